#include "cadvae/latent.hpp"

#include <algorithm>
#include <cmath>

namespace cadvae {

std::vector<double> LatentPartition::flat() const {
    std::vector<double> out;
    out.reserve(zx.size() + zy.size() + zs.size() + zr.size());
    out.insert(out.end(), zx.begin(), zx.end());
    out.insert(out.end(), zy.begin(), zy.end());
    out.insert(out.end(), zs.begin(), zs.end());
    out.insert(out.end(), zr.begin(), zr.end());
    return out;
}

GaussianPosterior::GaussianPosterior(std::vector<double> mu_in, std::vector<double> log_var_in)
    : mu(std::move(mu_in)), log_var(std::move(log_var_in)) {
    if (mu.size() != log_var.size()) {
        throw DimensionError("posterior: mu has " + std::to_string(mu.size()) +
                             " entries, log_var has " + std::to_string(log_var.size()));
    }
    for (double& v : log_var) v = std::min(std::max(v, -kLogVarClamp), kLogVarClamp);
}

GaussianPosterior PosteriorBatch::row(std::size_t i) const {
    const std::size_t total = mu.shape()[1];
    std::vector<double> m(mu.values().begin() + i * total, mu.values().begin() + (i + 1) * total);
    std::vector<double> lv(log_var.values().begin() + i * total,
                           log_var.values().begin() + (i + 1) * total);
    return GaussianPosterior(std::move(m), std::move(lv));
}

LatentPartition PartitionBatch::row(std::size_t i) const {
    auto slice = [i](const Tensor& t) {
        const std::size_t d = t.shape()[1];
        return std::vector<double>(t.values().begin() + i * d, t.values().begin() + (i + 1) * d);
    };
    return LatentPartition{slice(zx), slice(zy), slice(zs), slice(zr)};
}

PartitionBatch reparameterize(const PosteriorBatch& post, const Tensor& noise,
                              const LatentLayout& layout) {
    if (noise.shape() != post.mu.shape()) {
        throw DimensionError("reparameterize: noise " + shape_to_string(noise.shape()) +
                             " vs posterior " + shape_to_string(post.mu.shape()));
    }
    if (post.mu.shape()[1] != layout.total()) {
        throw DimensionError("reparameterize: posterior width " +
                             std::to_string(post.mu.shape()[1]) + " vs layout total " +
                             std::to_string(layout.total()));
    }
    Tensor std_dev = map_unary(Unary::exp, affine(post.log_var, 0.5, 0.0));
    Tensor z = add(post.mu, mul(std_dev, noise));
    auto parts = split(z, {layout.d_x, layout.d_y, layout.d_s, layout.d_r}, 1);
    return PartitionBatch{parts[0], parts[1], parts[2], parts[3]};
}

LatentPartition reparameterize(const GaussianPosterior& post, const std::vector<double>& noise,
                               const LatentLayout& layout) {
    if (noise.size() != post.mu.size() || post.mu.size() != layout.total()) {
        throw DimensionError("reparameterize: length mismatch");
    }
    LatentPartition out;
    std::size_t idx = 0;
    for (Code c : {Code::X, Code::Y, Code::S, Code::R}) {
        std::size_t d = c == Code::X   ? layout.d_x
                        : c == Code::Y ? layout.d_y
                        : c == Code::S ? layout.d_s
                                       : layout.d_r;
        std::vector<double>& dst = out.component(c);
        dst.resize(d);
        for (std::size_t i = 0; i < d; ++i, ++idx)
            dst[i] = post.mu[idx] + std::exp(0.5 * post.log_var[idx]) * noise[idx];
    }
    return out;
}

Tensor kl_per_sample(const PosteriorBatch& post) {
    // 0.5 * sum_i (mu^2 + e^lv - lv - 1), summed over the latent axis.
    Tensor mu2 = mul(post.mu, post.mu);
    Tensor var = map_unary(Unary::exp, post.log_var);
    Tensor inner = sub(add(mu2, var), affine(post.log_var, 1.0, 1.0));
    return affine(reduce(Reduce::sum, inner, 1), 0.5, 0.0);
}

double kl_standard_normal(const GaussianPosterior& post) {
    double acc = 0.0;
    for (std::size_t i = 0; i < post.mu.size(); ++i) {
        acc += post.mu[i] * post.mu[i] + std::exp(post.log_var[i]) - post.log_var[i] - 1.0;
    }
    return 0.5 * acc;
}

namespace {
void check_same_layout(const LatentPartition& a, const LatentPartition& b) {
    if (a.zx.size() != b.zx.size() || a.zy.size() != b.zy.size() ||
        a.zs.size() != b.zs.size() || a.zr.size() != b.zr.size()) {
        throw DimensionError("latent partitions have different layouts");
    }
}
}  // namespace

LatentPartition swap_codes(const LatentPartition& source, const LatentPartition& reference,
                           const CodeSet& mask) {
    check_same_layout(source, reference);
    LatentPartition out = source;
    for (Code c : {Code::X, Code::Y, Code::S, Code::R}) {
        if (mask.has(c)) out.component(c) = reference.component(c);
    }
    return out;
}

LatentPartition interpolate_codes(const LatentPartition& z1, const LatentPartition& z2,
                                  const std::map<Code, double>& lambdas) {
    check_same_layout(z1, z2);
    LatentPartition out = z1;
    for (const auto& [code, lambda] : lambdas) {
        if (lambda < 0.0 || lambda > 1.0) {
            throw RangeError("interpolate_codes: lambda " + std::to_string(lambda) +
                             " outside [0, 1]");
        }
        const std::vector<double>& a = z1.component(code);
        const std::vector<double>& b = z2.component(code);
        std::vector<double>& dst = out.component(code);
        for (std::size_t i = 0; i < dst.size(); ++i)
            dst[i] = (1.0 - lambda) * a[i] + lambda * b[i];
    }
    return out;
}

std::vector<LatentPartition> permute_codes_across_batch(const std::vector<LatentPartition>& batch,
                                                        const CodeSet& components,
                                                        std::uint64_t seed,
                                                        PermuteGranularity granularity) {
    if (batch.empty()) throw UsageError("permute_codes_across_batch: empty batch");
    std::vector<LatentPartition> out = batch;
    Rng rng(seed);
    for (Code c : {Code::X, Code::Y, Code::S, Code::R}) {
        if (!components.has(c)) continue;
        if (granularity == PermuteGranularity::block) {
            auto perm = rng.permutation(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i)
                out[i].component(c) = batch[perm[i]].component(c);
        } else {
            const std::size_t d = batch[0].component(c).size();
            for (std::size_t j = 0; j < d; ++j) {
                auto perm = rng.permutation(batch.size());
                for (std::size_t i = 0; i < batch.size(); ++i)
                    out[i].component(c)[j] = batch[perm[i]].component(c)[j];
            }
        }
    }
    return out;
}

PartitionBatch batch_from_partitions(const std::vector<LatentPartition>& parts) {
    if (parts.empty()) throw UsageError("batch_from_partitions: empty batch");
    const std::size_t n = parts.size();
    auto pack = [&](Code c) {
        const std::size_t d = parts[0].component(c).size();
        std::vector<double> data(n * d);
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<double>& src = parts[i].component(c);
            if (src.size() != d) throw DimensionError("batch_from_partitions: ragged batch");
            std::copy(src.begin(), src.end(), data.begin() + i * d);
        }
        return Tensor::from_data({n, d}, std::move(data), false);
    };
    return PartitionBatch{pack(Code::X), pack(Code::Y), pack(Code::S), pack(Code::R)};
}

std::vector<LatentPartition> partitions_from_batch(const PartitionBatch& batch,
                                                   const LatentLayout& layout) {
    std::vector<LatentPartition> out;
    const std::size_t n = batch.batch();
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(batch.row(i));
    for (const LatentPartition& p : out) {
        if (!p.matches(layout)) throw DimensionError("partitions_from_batch: layout mismatch");
    }
    return out;
}

}  // namespace cadvae
