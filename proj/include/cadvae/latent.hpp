#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "cadvae/rng.hpp"
#include "cadvae/tensor.hpp"

namespace cadvae {

// The four-way latent factorization: task-irrelevant (X), target-aligned (Y),
// sensitive-aligned (S) and the correlated code (R) holding what Y and S share.
enum class Code : std::uint8_t { X = 0, Y = 1, S = 2, R = 3 };

// Small value-set over the four codes.
struct CodeSet {
    bool x = false, y = false, s = false, r = false;

    static CodeSet none() { return {}; }
    static CodeSet all() { return {true, true, true, true}; }
    static CodeSet of(std::initializer_list<Code> codes) {
        CodeSet m;
        for (Code c : codes) m.set(c);
        return m;
    }
    void set(Code c) {
        switch (c) {
            case Code::X: x = true; break;
            case Code::Y: y = true; break;
            case Code::S: s = true; break;
            case Code::R: r = true; break;
        }
    }
    bool has(Code c) const {
        switch (c) {
            case Code::X: return x;
            case Code::Y: return y;
            case Code::S: return s;
            case Code::R: return r;
        }
        return false;
    }
};

struct LatentLayout {
    std::size_t d_x = 416;
    std::size_t d_y = 32;
    std::size_t d_s = 32;
    std::size_t d_r = 32;

    std::size_t total() const { return d_x + d_y + d_s + d_r; }

    void validate() const {
        if (d_x < 1 || d_y < 1 || d_s < 1 || d_r < 1) {
            throw ConfigError("latent layout: all four dimensions must be >= 1");
        }
    }
};

// Per-sample latent values; the unit editing and counterfactual paths work on.
struct LatentPartition {
    std::vector<double> zx, zy, zs, zr;

    bool matches(const LatentLayout& l) const {
        return zx.size() == l.d_x && zy.size() == l.d_y && zs.size() == l.d_s &&
               zr.size() == l.d_r;
    }
    const std::vector<double>& component(Code c) const {
        switch (c) {
            case Code::X: return zx;
            case Code::Y: return zy;
            case Code::S: return zs;
            case Code::R: break;
        }
        return zr;
    }
    std::vector<double>& component(Code c) {
        switch (c) {
            case Code::X: return zx;
            case Code::Y: return zy;
            case Code::S: return zs;
            case Code::R: break;
        }
        return zr;
    }
    std::vector<double> flat() const;
};

// Per-sample Gaussian posterior parameters, log-variance clamped to [-10, 10].
struct GaussianPosterior {
    std::vector<double> mu;
    std::vector<double> log_var;

    GaussianPosterior() = default;
    GaussianPosterior(std::vector<double> mu_in, std::vector<double> log_var_in);
};

inline constexpr double kLogVarClamp = 10.0;

// Batched posterior living in the autodiff graph; log_var already clamped.
struct PosteriorBatch {
    Tensor mu;       // [B x total]
    Tensor log_var;  // [B x total]

    std::size_t batch() const { return mu.shape()[0]; }
    GaussianPosterior row(std::size_t i) const;
};

// Batched partition with differentiable components.
struct PartitionBatch {
    Tensor zx, zy, zs, zr;  // [B x d_*]

    std::size_t batch() const { return zx.shape()[0]; }
    Tensor joint_ysr() const { return concat({zy, zs, zr}, 1); }
    Tensor full() const { return concat({zx, zy, zs, zr}, 1); }
    LatentPartition row(std::size_t i) const;
};

// z = mu + exp(0.5 log_var) * noise, split by layout. Differentiable w.r.t.
// mu and log_var; the noise is data.
PartitionBatch reparameterize(const PosteriorBatch& post, const Tensor& noise,
                              const LatentLayout& layout);
LatentPartition reparameterize(const GaussianPosterior& post, const std::vector<double>& noise,
                               const LatentLayout& layout);

// KL(q || N(0, I)) per sample: 0.5 * sum(mu^2 + e^lv - lv - 1). Tensor form
// returns a [B] vector; value form a plain double.
Tensor kl_per_sample(const PosteriorBatch& post);
double kl_standard_normal(const GaussianPosterior& post);

// Masked components come from `reference`, the rest from `source`.
LatentPartition swap_codes(const LatentPartition& source, const LatentPartition& reference,
                           const CodeSet& mask);

// Per component c: (1 - lambda_c) * z1_c + lambda_c * z2_c. Missing map
// entries default to lambda = 0, i.e. that component stays at z1.
LatentPartition interpolate_codes(const LatentPartition& z1, const LatentPartition& z2,
                                  const std::map<Code, double>& lambdas);

enum class PermuteGranularity { block, per_dimension };

// For each selected component, reorder that component across the batch by an
// independent uniform permutation (per_dimension permutes every scalar
// dimension separately). Deterministic given the seed.
std::vector<LatentPartition> permute_codes_across_batch(
    const std::vector<LatentPartition>& batch, const CodeSet& components, std::uint64_t seed,
    PermuteGranularity granularity = PermuteGranularity::block);

// Value <-> tensor bridges.
PartitionBatch batch_from_partitions(const std::vector<LatentPartition>& parts);
std::vector<LatentPartition> partitions_from_batch(const PartitionBatch& batch,
                                                   const LatentLayout& layout);

}  // namespace cadvae
