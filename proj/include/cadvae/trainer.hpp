#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cadvae/data.hpp"
#include "cadvae/objectives.hpp"

namespace cadvae {

// Two-step optimization schedule:
//   Phase A: one forward pass; (theta, phi, w_y, w_s) jointly minimize
//            recon + kl + l_y + l_s, while phi alone also receives the
//            weighted CMI, LRI and TC gradients (their other parameter
//            groups frozen). A single optimizer step applies the combined
//            gradients.
//   Phase B: with encoder outputs detached, one step on the opponent
//            cross-entropies updating (w_y_op, w_s_op) and one on the
//            discriminator BCE updating D.

struct TrainConfig {
    double lambda_cmi = 5.0;   // in [0, 10]
    double lambda_lri = 60.0;  // in [0, 100]
    double gamma_tc = 1.0;     // >= 0
    double lr_main = 1e-3;
    double lr_opponent = 1e-3;
    double lr_disc = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 10;
    LatentLayout layout;
    std::uint64_t seed = 0;
    bool cmi_conditional_variant = false;
    PermuteGranularity tc_granularity = PermuteGranularity::block;
    // Classifier widths for the two hidden layers; discriminator fixed shape.
    std::vector<std::size_t> classifier_hidden{64, 64};
    std::vector<std::size_t> disc_hidden{128, 128, 128};
    // Per-step assertion that every loss routed gradients only where the
    // schedule allows. Costly; meant for tests.
    bool routing_checks = false;

    void validate() const;
    // Canonical key=value text; hashed into the checkpoint digest.
    std::string canonical_text() const;
};

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-ParamSet Adam moments, keyed like the set itself.
struct AdamState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;

    void init_like(const ParamSet& ps);
    // One update over every entry of `ps` using its accumulated gradients.
    void step(ParamSet& ps, double lr, std::uint64_t t, const AdamParams& hp);
};

struct EpochStats {
    std::size_t epoch = 0;
    LossReport mean_losses;
    // Opponent accuracies on the evaluation slice (leakage probes).
    double acc_y_op = 0.0;
    double acc_s_op = 0.0;
};

struct TrainHistory {
    std::vector<LossReport> steps;
    std::vector<EpochStats> epochs;
};

class TrainState {
  public:
    TrainState(TrainConfig config, std::size_t channels, std::size_t height, std::size_t width,
               std::size_t num_classes, std::size_t num_groups);

    LossReport train_step(const Batch& batch);

    const TrainConfig& config() const { return config_; }
    Encoder& encoder() { return *encoder_; }
    const Encoder& encoder() const { return *encoder_; }
    Decoder& decoder() { return *decoder_; }
    const Decoder& decoder() const { return *decoder_; }
    Classifier& f_y() { return *f_y_; }
    Classifier& f_s() { return *f_s_; }
    Classifier& f_y_op() { return *f_y_op_; }
    const Classifier& f_y_op() const { return *f_y_op_; }
    Classifier& f_s_op() { return *f_s_op_; }
    const Classifier& f_s_op() const { return *f_s_op_; }
    Discriminator& disc() { return *disc_; }
    std::uint64_t step_count() const { return step_; }
    Rng& rng() { return rng_; }

    // Posterior means for a dataset slice, evaluated without building
    // gradient graphs. Rows follow dataset order.
    Tensor encode_means(const LabeledDataset& ds, std::size_t max_rows = 0) const;

    // Leakage probes: accuracy of the current opponents on posterior-mean
    // latents of `ds`.
    std::pair<double, double> opponent_accuracy(const LabeledDataset& ds,
                                                std::size_t max_rows = 0) const;

    void save_checkpoint(const std::string& path) const;
    static TrainState load_checkpoint(const std::string& path, const TrainConfig& config,
                                      std::size_t channels, std::size_t height, std::size_t width,
                                      std::size_t num_classes, std::size_t num_groups);

    // All (name, set) pairs in serialization order.
    std::vector<std::pair<std::string, ParamSet*>> param_sets();
    std::vector<std::pair<std::string, const ParamSet*>> param_sets() const;

  private:
    void init_optimizers();

    TrainConfig config_;
    std::size_t channels_, height_, width_, num_classes_, num_groups_;
    std::unique_ptr<Encoder> encoder_;
    std::unique_ptr<Decoder> decoder_;
    std::unique_ptr<Classifier> f_y_, f_s_, f_y_op_, f_s_op_;
    std::unique_ptr<Discriminator> disc_;
    AdamState adam_main_, adam_opponent_, adam_disc_;
    AdamParams adam_params_;
    std::uint64_t step_ = 0;
    Rng rng_;
};

// Called after each epoch with the stats and the live state (for logging
// and per-epoch checkpoints).
using EpochSink = std::function<void(const EpochStats&, const TrainState&)>;

// Full training loop: epochs x floor(N / batch) steps, per-epoch leakage
// probes on `eval_ds` (or a slice of the training set when absent).
// DivergenceError propagates after the per-epoch sink has seen the last
// completed epoch, so callers retain their latest checkpoint.
std::pair<std::unique_ptr<TrainState>, TrainHistory> fit(
    const LabeledDataset& train, const TrainConfig& config,
    const LabeledDataset* eval_ds = nullptr, const EpochSink& sink = nullptr);

// One JSONL line per epoch with deterministic float formatting.
std::string epoch_stats_json(const EpochStats& st);

}  // namespace cadvae
