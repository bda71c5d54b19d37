#include "cadvae/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>
#include <thread>

namespace cadvae {

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// group -> count and group x class -> count histograms.
struct GroupHistogram {
    std::vector<std::size_t> group_count;
    std::vector<std::size_t> cell;  // [group * classes + predicted]
};

GroupHistogram histogram(const PredictionTable& t, std::size_t groups, std::size_t classes) {
    GroupHistogram h;
    h.group_count.assign(groups, 0);
    h.cell.assign(groups * classes, 0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        h.group_count[t.s[i]]++;
        h.cell[t.s[i] * classes + t.y_pred[i]]++;
    }
    return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// PredictionTable / DP / EOD
// ---------------------------------------------------------------------------

void PredictionTable::validate() const {
    if (y_true.size() != y_pred.size() || y_true.size() != s.size()) {
        throw DimensionError("prediction table: column lengths disagree");
    }
    if (y_true.empty()) throw UsageError("prediction table: empty");
    const std::size_t c = classes();
    const std::size_t g = groups();
    for (std::size_t i = 0; i < size(); ++i) {
        if (y_true[i] < 0 || static_cast<std::size_t>(y_true[i]) >= c ||
            y_pred[i] < 0 || static_cast<std::size_t>(y_pred[i]) >= c) {
            throw LabelError("prediction table: class label out of range at row " +
                             std::to_string(i));
        }
        if (s[i] < 0 || static_cast<std::size_t>(s[i]) >= g) {
            throw LabelError("prediction table: group label out of range at row " +
                             std::to_string(i));
        }
    }
}

std::size_t PredictionTable::classes() const {
    if (num_classes > 0) return num_classes;
    int mx = 0;
    for (int v : y_true) mx = std::max(mx, v);
    for (int v : y_pred) mx = std::max(mx, v);
    return static_cast<std::size_t>(mx) + 1;
}

std::size_t PredictionTable::groups() const {
    if (num_groups > 0) return num_groups;
    int mx = 0;
    for (int v : s) mx = std::max(mx, v);
    return static_cast<std::size_t>(mx) + 1;
}

double demographic_parity(const PredictionTable& t) {
    t.validate();
    const std::size_t classes = t.classes();
    const std::size_t groups = t.groups();
    if (groups == 1) return 0.0;  // no pair to compare
    GroupHistogram h = histogram(t, groups, classes);
    for (std::size_t g = 0; g < groups; ++g) {
        if (h.group_count[g] == 0) {
            throw UndefinedGroupError("demographic_parity: group " + std::to_string(g) +
                                      " has no members");
        }
    }
    double worst = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t a = 0; a < groups; ++a) {
            const double ra =
                static_cast<double>(h.cell[a * classes + c]) / static_cast<double>(h.group_count[a]);
            for (std::size_t b = a + 1; b < groups; ++b) {
                const double rb = static_cast<double>(h.cell[b * classes + c]) /
                                  static_cast<double>(h.group_count[b]);
                worst = std::max(worst, std::abs(ra - rb));
            }
        }
    }
    return worst;
}

double equalized_odds(const PredictionTable& t) {
    t.validate();
    const std::size_t classes = t.classes();
    const std::size_t groups = t.groups();
    if (groups == 1) return 0.0;

    // cell[y][g][c] = #(Y=y, s=g, pred=c); denom[y][g] = #(Y=y, s=g)
    std::vector<std::size_t> cell(classes * groups * classes, 0);
    std::vector<std::size_t> denom(classes * groups, 0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        denom[t.y_true[i] * groups + t.s[i]]++;
        cell[(t.y_true[i] * groups + t.s[i]) * classes + t.y_pred[i]]++;
    }

    // With an explicitly declared class count every true class must appear;
    // under inference only classes observed in y_true are conditioned on.
    std::vector<std::size_t> true_classes;
    if (t.num_classes > 0) {
        for (std::size_t y = 0; y < classes; ++y) true_classes.push_back(y);
    } else {
        std::vector<bool> seen(classes, false);
        for (int y : t.y_true) seen[y] = true;
        for (std::size_t y = 0; y < classes; ++y)
            if (seen[y]) true_classes.push_back(y);
    }

    double worst = 0.0;
    for (std::size_t y : true_classes) {
        std::vector<std::size_t> present;
        for (std::size_t g = 0; g < groups; ++g) {
            if (denom[y * groups + g] > 0) present.push_back(g);
        }
        if (present.empty()) {
            throw UndefinedGroupError("equalized_odds: true class " + std::to_string(y) +
                                      " has no samples in any group");
        }
        if (present.size() < 2) continue;  // nothing to compare; cells skipped
        for (std::size_t c = 0; c < classes; ++c) {
            for (std::size_t ai = 0; ai < present.size(); ++ai) {
                const std::size_t a = present[ai];
                const double ra = static_cast<double>(cell[(y * groups + a) * classes + c]) /
                                  static_cast<double>(denom[y * groups + a]);
                for (std::size_t bi = ai + 1; bi < present.size(); ++bi) {
                    const std::size_t b = present[bi];
                    const double rb = static_cast<double>(cell[(y * groups + b) * classes + c]) /
                                      static_cast<double>(denom[y * groups + b]);
                    worst = std::max(worst, std::abs(ra - rb));
                }
            }
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Gaussian statistics / Frechet distance
// ---------------------------------------------------------------------------

void GaussianStats::validate() const {
    if (dim < 1 || mean.size() != dim || cov.size() != dim * dim) {
        throw DimensionError("gaussian stats: inconsistent dimensions");
    }
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = i + 1; j < dim; ++j) {
            if (std::abs(cov[i * dim + j] - cov[j * dim + i]) > 1e-10) {
                throw NumericError("gaussian stats: covariance not symmetric");
            }
        }
    }
}

GaussianStats gaussian_stats(const std::vector<double>& features, std::size_t n, std::size_t d) {
    if (n < 2 || features.size() != n * d) {
        throw DimensionError("gaussian_stats: need at least 2 rows of width d");
    }
    GaussianStats st;
    st.dim = d;
    st.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) st.mean[j] += features[i * d + j];
    for (double& v : st.mean) v /= static_cast<double>(n);

    st.cov.assign(d * d, 0.0);
    std::vector<double> centered(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) centered[j] = features[i * d + j] - st.mean[j];
        for (std::size_t j = 0; j < d; ++j) {
            const double cj = centered[j];
            for (std::size_t k = j; k < d; ++k) st.cov[j * d + k] += cj * centered[k];
        }
    }
    const double inv = 1.0 / static_cast<double>(n - 1);
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = j; k < d; ++k) {
            st.cov[j * d + k] *= inv;
            st.cov[k * d + j] = st.cov[j * d + k];
        }
    if (n <= d) {
        // covariance-rank shrinkage keeps the matrix square root well-posed
        for (std::size_t j = 0; j < d; ++j) st.cov[j * d + j] += 1e-6;
    }
    return st;
}

void symmetric_eigen(std::vector<double> a, std::size_t d, std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors) {
    eigenvectors.assign(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) eigenvectors[i * d + i] = 1.0;

    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
        if (off < 1e-24) break;

        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < d; ++k) {
                    const double akp = a[k * d + p], akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double apk = a[p * d + k], aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double vkp = eigenvectors[k * d + p], vkq = eigenvectors[k * d + q];
                    eigenvectors[k * d + p] = c * vkp - s * vkq;
                    eigenvectors[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    eigenvalues.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) eigenvalues[i] = a[i * d + i];
}

namespace {

std::vector<double> psd_eigenvalues(const std::vector<double>& cov, std::size_t d,
                                    std::vector<double>* eigenvectors, const char* what) {
    std::vector<double> vals, vecs;
    symmetric_eigen(cov, d, vals, vecs);
    for (double v : vals) {
        if (v < -1e-8) {
            throw NumericError(std::string(what) + ": covariance has eigenvalue " +
                               std::to_string(v));
        }
    }
    for (double& v : vals) v = std::max(v, 0.0);
    if (eigenvectors) *eigenvectors = std::move(vecs);
    return vals;
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    a.validate();
    b.validate();
    if (a.dim != b.dim) {
        throw DimensionError("frechet_distance: dimensions " + std::to_string(a.dim) + " vs " +
                             std::to_string(b.dim));
    }
    const std::size_t d = a.dim;

    std::vector<double> va;
    std::vector<double> la = psd_eigenvalues(a.cov, d, &va, "frechet_distance(a)");
    std::vector<double> lb = psd_eigenvalues(b.cov, d, nullptr, "frechet_distance(b)");

    // A^(1/2) = V sqrt(L) V^T
    std::vector<double> a_half(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k)
                acc += va[i * d + k] * std::sqrt(la[k]) * va[j * d + k];
            a_half[i * d + j] = acc;
            a_half[j * d + i] = acc;
        }

    // M = A^(1/2) B A^(1/2), symmetrized against rounding.
    std::vector<double> tmp(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            const double v = a_half[i * d + k];
            if (v == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) tmp[i * d + j] += v * b.cov[k * d + j];
        }
    std::vector<double> m(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            const double v = tmp[i * d + k];
            if (v == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) m[i * d + j] += v * a_half[k * d + j];
        }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double sym = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = sym;
            m[j * d + i] = sym;
        }

    std::vector<double> lm_vals, lm_vecs;
    symmetric_eigen(m, d, lm_vals, lm_vecs);
    double trace_sqrt = 0.0;
    for (double v : lm_vals) trace_sqrt += std::sqrt(std::max(v, 0.0));

    double mean_term = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = a.mean[i] - b.mean[i];
        mean_term += diff * diff;
    }
    double trace_a = 0.0, trace_b = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        trace_a += a.cov[i * d + i];
        trace_b += b.cov[i * d + i];
    }
    return mean_term + trace_a + trace_b - 2.0 * trace_sqrt;
}

double entropy_score(const std::vector<double>& probs, std::size_t n, std::size_t c) {
    if (n < 1 || probs.size() != n * c) {
        throw DimensionError("entropy_score: need n rows of width c");
    }
    std::vector<double> marginal(c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double p = probs[i * c + j];
            if (p < -1e-12) throw ContractError("entropy_score: negative probability");
            sum += p;
            marginal[j] += p;
        }
        if (std::abs(sum - 1.0) > 1e-6) {
            throw ContractError("entropy_score: row " + std::to_string(i) + " sums to " +
                                std::to_string(sum));
        }
    }
    for (double& v : marginal) v /= static_cast<double>(n);

    double mean_kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double p = probs[i * c + j];
            if (p > 0.0) mean_kl += p * std::log(p / marginal[j]);
        }
    }
    mean_kl /= static_cast<double>(n);
    return std::exp(mean_kl);
}

// ---------------------------------------------------------------------------
// Discrete CMI
// ---------------------------------------------------------------------------

void DiscreteJoint::validate() const {
    if (nx < 1 || ny < 1 || nz < 1 || p.size() != nx * ny * nz) {
        throw DimensionError("discrete joint: inconsistent dimensions");
    }
    double sum = 0.0;
    for (double v : p) {
        if (v < 0.0) throw ContractError("discrete joint: negative mass");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
        throw ContractError("discrete joint: total mass " + std::to_string(sum));
    }
}

double discrete_cmi(const DiscreteJoint& j) {
    j.validate();
    std::vector<double> pz(j.nz, 0.0);
    std::vector<double> pxz(j.nx * j.nz, 0.0);
    std::vector<double> pyz(j.ny * j.nz, 0.0);
    for (std::size_t x = 0; x < j.nx; ++x)
        for (std::size_t y = 0; y < j.ny; ++y)
            for (std::size_t z = 0; z < j.nz; ++z) {
                const double v = j.at(x, y, z);
                pz[z] += v;
                pxz[x * j.nz + z] += v;
                pyz[y * j.nz + z] += v;
            }
    double info = 0.0;
    for (std::size_t x = 0; x < j.nx; ++x)
        for (std::size_t y = 0; y < j.ny; ++y)
            for (std::size_t z = 0; z < j.nz; ++z) {
                const double v = j.at(x, y, z);
                if (v <= 0.0) continue;  // 0 log(0/q) := 0
                info += v * std::log(v * pz[z] / (pxz[x * j.nz + z] * pyz[y * j.nz + z]));
            }
    return info;
}

// ---------------------------------------------------------------------------
// FeatureExtractor
// ---------------------------------------------------------------------------

namespace {

// Small local Adam for the desk-scale probe / extractor training loops.
struct MiniAdam {
    std::map<std::string, std::vector<double>> m, v;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void init(const ParamSet& ps) {
        for (const auto& [name, t] : ps) {
            m[name].assign(t.size(), 0.0);
            v[name].assign(t.size(), 0.0);
        }
    }
    void step(ParamSet& ps, double lr, std::uint64_t t) {
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (const auto& [name, tensor] : ps) {
            const std::vector<double>& g = tensor.grad();
            std::vector<double>& mi = m.at(name);
            std::vector<double>& vi = v.at(name);
            std::vector<double> data = tensor.values();
            for (std::size_t i = 0; i < data.size(); ++i) {
                mi[i] = beta1 * mi[i] + (1.0 - beta1) * g[i];
                vi[i] = beta2 * vi[i] + (1.0 - beta2) * g[i] * g[i];
                data[i] -= lr * (mi[i] / bc1) / (std::sqrt(vi[i] / bc2) + eps);
                if (!std::isfinite(data[i])) throw DivergenceError(name);
            }
            ps.rebind(name, Tensor::from_data(tensor.shape(), std::move(data), true));
        }
    }
};

Tensor rows_subset(const Tensor& mat, const std::vector<std::uint32_t>& idx) {
    const std::size_t d = mat.shape()[1];
    std::vector<double> data(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(mat.values().begin() + static_cast<std::size_t>(idx[i]) * d,
                  mat.values().begin() + (static_cast<std::size_t>(idx[i]) + 1) * d,
                  data.begin() + i * d);
    }
    return Tensor::from_data({idx.size(), d}, std::move(data), false);
}

}  // namespace

FeatureExtractor::FeatureExtractor(std::size_t input_dim, std::size_t classes, Rng& rng)
    : input_dim_(input_dim), classes_(classes) {
    params_.add("l1.w", glorot_uniform({input_dim, 64}, input_dim, 64, rng));
    params_.add("l1.b", Tensor::zeros({64}, true));
    params_.add("l2.w", glorot_uniform({64, 64}, 64, 64, rng));
    params_.add("l2.b", Tensor::zeros({64}, true));
    params_.add("out.w", glorot_uniform({64, classes}, 64, classes, rng));
    params_.add("out.b", Tensor::zeros({classes}, true));
}

FeatureExtractor FeatureExtractor::train(const LabeledDataset& ds, std::uint64_t seed,
                                         std::size_t epochs, std::size_t batch_size, double lr) {
    Rng rng(seed);
    const std::size_t input_dim = ds.channels() * ds.height() * ds.width();
    FeatureExtractor fx(input_dim, ds.num_classes, rng);

    const std::size_t n = ds.count();
    Tensor flat = reshape(ds.images, {n, input_dim});
    std::vector<int> labels(ds.y.begin(), ds.y.end());

    MiniAdam adam;
    adam.init(fx.params_);
    std::uint64_t t = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        auto order = rng.permutation(n);
        for (std::size_t off = 0; off + batch_size <= n; off += batch_size) {
            std::vector<std::uint32_t> idx(order.begin() + off, order.begin() + off + batch_size);
            Tensor x = rows_subset(flat, idx);
            std::vector<int> y(batch_size);
            for (std::size_t i = 0; i < batch_size; ++i) y[i] = labels[idx[i]];

            Tensor h1 = map_unary(Unary::relu,
                                  add_row_bias(matmul(x, fx.params_.use("l1.w")),
                                               fx.params_.use("l1.b")));
            Tensor h2 = map_unary(Unary::relu,
                                  add_row_bias(matmul(h1, fx.params_.use("l2.w")),
                                               fx.params_.use("l2.b")));
            Tensor probs = softmax_rows(
                add_row_bias(matmul(h2, fx.params_.use("out.w")), fx.params_.use("out.b")));
            Tensor loss = nll_from_probs(probs, y);
            backward(loss);
            adam.step(fx.params_, lr, ++t);
        }
    }
    return fx;
}

void FeatureExtractor::features_and_probs(const Tensor& images, std::vector<double>& features,
                                          std::vector<double>& probs) const {
    const std::size_t b = images.shape()[0];
    if (images.size() != b * input_dim_) {
        throw DimensionError("feature extractor: image size " + shape_to_string(images.shape()));
    }
    FreezeGuard freeze(params_);
    Tensor flat = reshape(images, {b, input_dim_});
    Tensor h1 = map_unary(
        Unary::relu, add_row_bias(matmul(flat, params_.use("l1.w")), params_.use("l1.b")));
    Tensor h2 = map_unary(Unary::relu,
                          add_row_bias(matmul(h1, params_.use("l2.w")), params_.use("l2.b")));
    Tensor p =
        softmax_rows(add_row_bias(matmul(h2, params_.use("out.w")), params_.use("out.b")));
    features = h2.values();
    probs = p.values();
}

double FeatureExtractor::eval_accuracy(const LabeledDataset& ds) const {
    std::vector<double> features, probs;
    std::size_t hits = 0;
    const std::size_t chunk = 512;
    for (std::size_t off = 0; off < ds.count(); off += chunk) {
        const std::size_t m = std::min(chunk, ds.count() - off);
        features_and_probs(ds.slice(off, m).images, features, probs);
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = probs.data() + i * classes_;
            std::size_t best = 0;
            for (std::size_t j = 1; j < classes_; ++j)
                if (row[j] > row[best]) best = j;
            if (best == ds.y[off + i]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(ds.count());
}

// ---------------------------------------------------------------------------
// delta metrics
// ---------------------------------------------------------------------------

namespace {

std::size_t eval_threads(std::size_t task_count) {
    std::size_t cap = std::thread::hardware_concurrency();
    if (cap == 0) cap = 1;
    if (const char* env = std::getenv("CADVAE_THREADS")) {
        const long parsed = std::strtol(env, nullptr, 10);
        if (parsed >= 1) cap = std::min<std::size_t>(cap, static_cast<std::size_t>(parsed));
    }
    return std::max<std::size_t>(1, std::min(cap, task_count));
}

// Decode partitions in chunks and push extractor features/probs. Chunks are
// independent graphs, so they may run on parallel threads; each writes its
// own slot, keeping the result identical for any thread count.
void decode_and_extract(const Decoder& decoder, const FeatureExtractor& fx,
                        const std::vector<LatentPartition>& parts, std::vector<double>& features,
                        std::vector<double>& probs) {
    FreezeGuard freeze(decoder.params());
    const std::size_t chunk = 128;
    const std::size_t num_chunks = (parts.size() + chunk - 1) / chunk;
    std::vector<std::vector<double>> chunk_feats(num_chunks), chunk_probs(num_chunks);

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t ci = next.fetch_add(1);
            if (ci >= num_chunks) return;
            const std::size_t off = ci * chunk;
            const std::size_t m = std::min(chunk, parts.size() - off);
            std::vector<LatentPartition> sub(parts.begin() + off, parts.begin() + off + m);
            Tensor recon = decoder.decode(batch_from_partitions(sub));
            fx.features_and_probs(recon, chunk_feats[ci], chunk_probs[ci]);
        }
    };
    const std::size_t workers = eval_threads(num_chunks);
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (std::size_t ci = 0; ci < num_chunks; ++ci) {
        features.insert(features.end(), chunk_feats[ci].begin(), chunk_feats[ci].end());
        probs.insert(probs.end(), chunk_probs[ci].begin(), chunk_probs[ci].end());
    }
}

}  // namespace

Tensor posterior_means(const Encoder& encoder, const LabeledDataset& ds, std::size_t max_rows) {
    const std::size_t n = max_rows == 0 ? ds.count() : std::min(max_rows, ds.count());
    const std::size_t total = encoder.spec().layout.total();
    std::vector<double> out(n * total);
    FreezeGuard freeze(encoder.params());
    const std::size_t chunk = 256;
    for (std::size_t off = 0; off < n; off += chunk) {
        const std::size_t m = std::min(chunk, n - off);
        PosteriorBatch post = encoder.encode(ds.slice(off, m).images);
        std::copy(post.mu.values().begin(), post.mu.values().end(), out.begin() + off * total);
    }
    return Tensor::from_data({n, total}, std::move(out), false);
}

Tensor select_codes(const Tensor& means, const LatentLayout& layout, const CodeSet& components) {
    auto parts = split(means, {layout.d_x, layout.d_y, layout.d_s, layout.d_r}, 1);
    std::vector<Tensor> chosen;
    if (components.x) chosen.push_back(parts[0]);
    if (components.y) chosen.push_back(parts[1]);
    if (components.s) chosen.push_back(parts[2]);
    if (components.r) chosen.push_back(parts[3]);
    if (chosen.empty()) throw UsageError("select_codes: empty component set");
    return chosen.size() == 1 ? chosen[0] : concat(chosen, 1);
}

DeltaReport delta_metrics(const Encoder& encoder, const Decoder& decoder,
                          const LabeledDataset& eval_set, const FeatureExtractor& extractor,
                          const PerturbationSpec& spec) {
    const LatentLayout& layout = encoder.spec().layout;
    const std::size_t n = eval_set.count();
    if (n < 2) throw UsageError("delta_metrics: need at least 2 evaluation samples");

    Tensor means = posterior_means(encoder, eval_set);
    auto split_parts = split(means, {layout.d_x, layout.d_y, layout.d_s, layout.d_r}, 1);
    PartitionBatch mean_batch{split_parts[0], split_parts[1], split_parts[2], split_parts[3]};
    std::vector<LatentPartition> parts = partitions_from_batch(mean_batch, layout);

    std::vector<double> direct_feats, direct_probs;
    decode_and_extract(decoder, extractor, parts, direct_feats, direct_probs);

    std::vector<double> pert_feats, pert_probs;
    DeltaReport report;
    if (spec.mode == PerturbMode::permute_ys) {
        std::vector<LatentPartition> permuted =
            spec.identity ? parts
                          : permute_codes_across_batch(parts, CodeSet::of({Code::Y, Code::S}),
                                                       spec.seed);
        decode_and_extract(decoder, extractor, permuted, pert_feats, pert_probs);
        report.perturbations = 1;
    } else {
        const std::vector<double> zero{0.0};
        const std::vector<double>& ly = spec.identity ? zero : spec.lambdas_y;
        const std::vector<double>& ls = spec.identity ? zero : spec.lambdas_s;
        const std::vector<double>& lr = spec.identity ? zero : spec.lambdas_r;
        report.perturbations = ly.size() * ls.size() * lr.size();
        for (double lam_y : ly)
            for (double lam_s : ls)
                for (double lam_r : lr) {
                    std::vector<LatentPartition> traversed(n);
                    for (std::size_t i = 0; i < n; ++i) {
                        const LatentPartition& ref = parts[(i + 1) % n];
                        traversed[i] = interpolate_codes(
                            parts[i], ref,
                            {{Code::Y, lam_y}, {Code::S, lam_s}, {Code::R, lam_r}});
                    }
                    decode_and_extract(decoder, extractor, traversed, pert_feats, pert_probs);
                }
    }

    const std::size_t d = extractor.feature_dim();
    const std::size_t c = extractor.classes();
    GaussianStats direct_stats = gaussian_stats(direct_feats, n, d);
    GaussianStats pert_stats =
        gaussian_stats(pert_feats, pert_feats.size() / d, d);
    report.delta_fid = frechet_distance(direct_stats, pert_stats);
    report.delta_is = std::abs(entropy_score(direct_probs, n, c) -
                               entropy_score(pert_probs, pert_probs.size() / c, c));
    return report;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

ProbeReport train_probe_on_features(const Tensor& train_feats, const std::vector<int>& y_train,
                                    const Tensor& test_feats, const std::vector<int>& y_test,
                                    const std::vector<int>& s_test, std::size_t num_classes,
                                    std::size_t num_groups, std::uint64_t seed,
                                    const ProbeConfig& cfg) {
    const std::size_t dim = train_feats.shape()[1];
    const std::size_t n = train_feats.shape()[0];
    if (y_train.size() != n || test_feats.shape()[1] != dim) {
        throw DimensionError("probe: feature/label layout mismatch");
    }
    const std::size_t batch = std::min(cfg.batch_size, n);

    Rng rng(seed);
    Classifier probe(ClassifierSpec{dim, cfg.hidden, num_classes}, rng);

    MiniAdam adam;
    adam.init(probe.params());
    std::uint64_t t = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = rng.permutation(n);
        for (std::size_t off = 0; off + batch <= n; off += batch) {
            std::vector<std::uint32_t> idx(order.begin() + off, order.begin() + off + batch);
            Tensor x = rows_subset(train_feats, idx);
            std::vector<int> y(batch);
            for (std::size_t i = 0; i < batch; ++i) y[i] = y_train[idx[i]];
            Tensor loss = nll_from_probs(probe.probs(x), y);
            if (!std::isfinite(loss.value())) throw DivergenceError("probe loss");
            backward(loss);
            adam.step(probe.params(), cfg.lr, ++t);
        }
    }

    FreezeGuard freeze(probe.params());
    Tensor probs = probe.probs(test_feats);
    ProbeReport report;
    report.seed = seed;
    report.table.num_classes = num_classes;
    report.table.num_groups = num_groups;
    std::size_t hits = 0;
    const std::size_t n_test = test_feats.shape()[0];
    for (std::size_t i = 0; i < n_test; ++i) {
        const double* row = probs.values().data() + i * num_classes;
        std::size_t best = 0;
        for (std::size_t j = 1; j < num_classes; ++j)
            if (row[j] > row[best]) best = j;
        report.table.y_true.push_back(y_test[i]);
        report.table.y_pred.push_back(static_cast<int>(best));
        report.table.s.push_back(s_test[i]);
        if (static_cast<int>(best) == y_test[i]) ++hits;
    }
    report.accuracy = static_cast<double>(hits) / static_cast<double>(n_test);
    return report;
}

ProbeReport probe_eval(const Encoder& encoder, const LabeledDataset& train,
                       const LabeledDataset& test, const CodeSet& components, std::uint64_t seed,
                       const ProbeConfig& cfg) {
    const LatentLayout& layout = encoder.spec().layout;
    Tensor train_feats = select_codes(posterior_means(encoder, train), layout, components);
    Tensor test_feats = select_codes(posterior_means(encoder, test), layout, components);
    return train_probe_on_features(train_feats, std::vector<int>(train.y.begin(), train.y.end()),
                                   test_feats, std::vector<int>(test.y.begin(), test.y.end()),
                                   std::vector<int>(test.s.begin(), test.s.end()),
                                   train.num_classes, train.num_groups, seed, cfg);
}

std::string metrics_report_json(const MetricsReport& r) {
    std::ostringstream os;
    os << "{\"accuracy\":" << fmt_double(r.accuracy) << ",\"dp\":" << fmt_double(r.dp)
       << ",\"eod\":" << fmt_double(r.eod) << ",\"delta_fid\":" << fmt_double(r.delta_fid)
       << ",\"delta_is\":" << fmt_double(r.delta_is) << ",\"probe_seed\":" << r.probe_seed
       << ",\"n_eval\":" << r.n_eval << "}";
    return os.str();
}

}  // namespace cadvae
