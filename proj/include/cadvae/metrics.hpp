#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cadvae/data.hpp"
#include "cadvae/networks.hpp"

namespace cadvae {

// ---------------------------------------------------------------------------
// Fairness metrics
// ---------------------------------------------------------------------------

struct PredictionTable {
    std::vector<int> y_true;
    std::vector<int> y_pred;
    std::vector<int> s;
    // 0 = infer from the data as max label + 1.
    std::size_t num_classes = 0;
    std::size_t num_groups = 0;

    std::size_t size() const { return y_true.size(); }
    void validate() const;
    std::size_t classes() const;
    std::size_t groups() const;
};

// Binary: |P(Yhat=1 | s=0) - P(Yhat=1 | s=1)|. Multi-class/multi-group: the
// max over predicted classes and group pairs of the prediction-rate gap.
double demographic_parity(const PredictionTable& t);

// Binary: max over true classes of the TPR/FPR gap. Multi-class: max over
// (true class, predicted class, group pair) of the conditional-rate gap;
// empty (y, s) cells are skipped, a true class with no samples at all is an
// undefined-group error.
double equalized_odds(const PredictionTable& t);

// ---------------------------------------------------------------------------
// Generation-quality metrics
// ---------------------------------------------------------------------------

struct GaussianStats {
    std::vector<double> mean;  // [d]
    std::vector<double> cov;   // [d x d], symmetric
    std::size_t dim = 0;

    void validate() const;
};

// Sample mean / covariance (ddof = 1) of feature rows; when n <= d the
// covariance is shrunk by adding 1e-6 I so the matrix square root stays
// well-posed at desk scale.
GaussianStats gaussian_stats(const std::vector<double>& features, std::size_t n, std::size_t d);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), square root taken via a
// symmetric eigendecomposition of Sa^(1/2) Sb Sa^(1/2). Eigenvalues below
// -1e-8 are an error; small negatives are clamped to zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// exp(mean_i KL(p(y|x_i) || mean_j p(y|x_j))), rows must be probabilities.
double entropy_score(const std::vector<double>& probs, std::size_t n, std::size_t c);

// Symmetric eigendecomposition helper (cyclic Jacobi); exposed for tests.
void symmetric_eigen(std::vector<double> matrix, std::size_t d, std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors);

// ---------------------------------------------------------------------------
// Discrete CMI oracle
// ---------------------------------------------------------------------------

struct DiscreteJoint {
    std::vector<double> p;  // row-major over (x, y, z)
    std::size_t nx = 0, ny = 0, nz = 0;

    double& at(std::size_t x, std::size_t y, std::size_t z) {
        return p[(x * ny + y) * nz + z];
    }
    double at(std::size_t x, std::size_t y, std::size_t z) const {
        return p[(x * ny + y) * nz + z];
    }
    void validate() const;
};

// Exact I(X;Y|Z) by direct summation, 0 log(0/q) := 0. Non-negative.
double discrete_cmi(const DiscreteJoint& j);

// ---------------------------------------------------------------------------
// Desk-scale feature extractor for delta-FID / delta-IS
// ---------------------------------------------------------------------------

// A small fixed pixel classifier (hidden 64/64) trained once on unbiased
// digits; its penultimate layer provides features, its softmax p(y|x).
class FeatureExtractor {
  public:
    static FeatureExtractor train(const LabeledDataset& ds, std::uint64_t seed,
                                  std::size_t epochs = 8, std::size_t batch_size = 128,
                                  double lr = 1e-3);

    std::size_t feature_dim() const { return 64; }
    std::size_t classes() const { return classes_; }
    std::size_t input_dim() const { return input_dim_; }

    // images: [B x C x H x W] -> (features [B x 64], probs [B x classes]).
    void features_and_probs(const Tensor& images, std::vector<double>& features,
                            std::vector<double>& probs) const;

    double eval_accuracy(const LabeledDataset& ds) const;

  private:
    FeatureExtractor(std::size_t input_dim, std::size_t classes, Rng& rng);
    std::size_t input_dim_;
    std::size_t classes_;
    ParamSet params_;
};

// ---------------------------------------------------------------------------
// Reconstruction-perturbation metrics
// ---------------------------------------------------------------------------

enum class PerturbMode { permute_ys, traverse };

struct PerturbationSpec {
    PerturbMode mode = PerturbMode::permute_ys;
    std::uint64_t seed = 0;
    bool identity = false;  // test hook: identity permutation / zero-only grids
    std::vector<double> lambdas_y{0.0, 0.33, 0.66, 1.0};
    std::vector<double> lambdas_s{0.0, 0.33, 0.66, 1.0};
    std::vector<double> lambdas_r{0.0, 0.5, 1.0};
};

struct DeltaReport {
    double delta_fid = 0.0;
    double delta_is = 0.0;
    std::size_t perturbations = 0;  // traverse: number of lambda combinations
};

// Reconstruct the evaluation set directly and under the perturbation, then
// compare feature Gaussians (delta-FID) and entropy scores (delta-IS).
DeltaReport delta_metrics(const Encoder& encoder, const Decoder& decoder,
                          const LabeledDataset& eval_set, const FeatureExtractor& extractor,
                          const PerturbationSpec& spec);

// ---------------------------------------------------------------------------
// Downstream probe protocol
// ---------------------------------------------------------------------------

struct ProbeReport {
    PredictionTable table;
    double accuracy = 0.0;
    std::uint64_t seed = 0;
};

struct ProbeConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    std::vector<std::size_t> hidden{64, 64};  // 3-layer MLP
};

// Posterior means of a dataset under a frozen encoder, [n x total].
Tensor posterior_means(const Encoder& encoder, const LabeledDataset& ds,
                       std::size_t max_rows = 0);

// Columns of `means` for the selected codes, concatenated in X,Y,S,R order.
Tensor select_codes(const Tensor& means, const LatentLayout& layout, const CodeSet& components);

// Core probe trainer over explicit feature rows; probe_eval wraps it with
// posterior-mean extraction. Exposed so oracles can feed planted features.
ProbeReport train_probe_on_features(const Tensor& train_feats, const std::vector<int>& y_train,
                                    const Tensor& test_feats, const std::vector<int>& y_test,
                                    const std::vector<int>& s_test, std::size_t num_classes,
                                    std::size_t num_groups, std::uint64_t seed,
                                    const ProbeConfig& cfg = {});

// Trains a fresh MLP on the selected posterior-mean codes of the training
// split to predict y, then evaluates on the test split. Deterministic given
// the seed.
ProbeReport probe_eval(const Encoder& encoder, const LabeledDataset& train,
                       const LabeledDataset& test, const CodeSet& components, std::uint64_t seed,
                       const ProbeConfig& cfg = {});

// The MetricsReport JSON emitted by evaluation runs.
struct MetricsReport {
    double accuracy = 0.0;
    double dp = 0.0;
    double eod = 0.0;
    double delta_fid = 0.0;
    double delta_is = 0.0;
    std::uint64_t probe_seed = 0;
    std::size_t n_eval = 0;
};

std::string metrics_report_json(const MetricsReport& r);

}  // namespace cadvae
