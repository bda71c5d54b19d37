#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cadvae/latent.hpp"
#include "cadvae/networks.hpp"

namespace cadvae {

// All loss terms of the final two-step objective. Every function returns
// scalar graph tensors so a caller can combine them into one backward pass;
// freeze contracts are enforced at runtime (frozen ParamSets, detached
// latents) and violations throw ContractError.

struct LossWeights {
    double lambda_cmi = 5.0;
    double lambda_lri = 60.0;
    double gamma_tc = 1.0;
};

struct LossReport {
    double recon = 0.0;
    double kl = 0.0;
    double l_y = 0.0;
    double l_s = 0.0;
    double l_cmi = 0.0;
    double l_lri = 0.0;
    double l_tc = 0.0;
    double l_y_op = 0.0;
    double l_s_op = 0.0;
    double l_disc = 0.0;
    double total_main = 0.0;

    bool all_finite() const;
    // First non-finite entry's name, or nullptr when all finite.
    const char* first_non_finite() const;
};

// Negative ELBO split into its two terms. recon is the batch mean of the
// per-sample summed binary cross-entropy (Bernoulli decoder convention,
// log arguments clamped to [1e-7, 1-1e-7]); kl the batch mean of the
// closed-form KL against N(0, I).
std::pair<Tensor, Tensor> elbo_loss(const Tensor& x, const Tensor& recon_mean,
                                    const PosteriorBatch& post);

// Cross-entropy of f_y(z_Y, z_R) against y and f_s(z_S, z_R) against s.
// Gradients flow into both the classifier parameters and the encoder.
std::pair<Tensor, Tensor> joint_classification_losses(const Classifier& f_y,
                                                      const Classifier& f_s, const Tensor& zY,
                                                      const Tensor& zS, const Tensor& zR,
                                                      const std::vector<int>& y,
                                                      const std::vector<int>& s);

// Opponent cross-entropies on detached latents; gradients reach only the
// opponent parameters. Throws ContractError if a latent still carries grads.
std::pair<Tensor, Tensor> opponent_losses(const Classifier& f_y_op, const Classifier& f_s_op,
                                          const Tensor& zY_detached, const Tensor& zS_detached,
                                          const std::vector<int>& y, const std::vector<int>& s);

// Batch-mean Shannon entropy of probability rows, in nats, computed as
// -mean_i sum_c p log(p + 1e-12). Rows must sum to 1 within 1e-6.
Tensor prediction_entropy(const Tensor& probs);

// -( H(Yhat | z_S) + H(Shat | z_Y) ) with both entropies taken over the
// frozen opponents' outputs. The optional zR enables the conditional
// variant (opponents built on (z_S, z_R) / (z_Y, z_R) inputs).
Tensor cmi_loss(const Classifier& f_y_op, const Classifier& f_s_op, const Tensor& zY,
                const Tensor& zS, const Tensor* zR = nullptr);

// p(. | z_R^(k)) approximated by marginalizing the classifier over the
// batch of first-code samples: (1/B) sum_i f(z_first^(i), z_R^(k)).
Tensor marginal_conditional_prob(const Classifier& f, const Tensor& z_first_batch,
                                 const Tensor& zR_k);

// Same, restricted to the rows of z_first_batch the caller passes (the
// group with the matching label). Throws GroupSkipSignal on an empty group.
Tensor group_conditional_prob(const Classifier& f, const Tensor& z_first_group,
                              const Tensor& zR_k);

// -( I(Yhat; Y | z_R) + I(Shat; S | z_R) ) with every entropy estimated by
// batch marginalization; f_y / f_s must be frozen, gradients reach the
// encoder through all of zY, zS, zR.
Tensor lri_loss(const Classifier& f_y, const Classifier& f_s, const Tensor& zY, const Tensor& zS,
                const Tensor& zR, const std::vector<int>& y, const std::vector<int>& s);

struct TcLosses {
    Tensor l_tc;    // encoder side: E[log D/(1-D)] on joint samples, D frozen
    Tensor l_disc;  // discriminator side: BCE joint-vs-permuted, latents detached
};

// The FactorVAE-style pair. `disc` must arrive unfrozen; the function
// freezes it internally for the encoder term. Permutation of the detached
// latents (block-wise per component by default) is driven by `perm_seed`.
TcLosses tc_losses(Discriminator& disc, const PartitionBatch& z, std::uint64_t perm_seed,
                   PermuteGranularity granularity = PermuteGranularity::block);

}  // namespace cadvae
