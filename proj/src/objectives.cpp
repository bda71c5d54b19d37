#include "cadvae/objectives.hpp"

#include <cmath>

namespace cadvae {

namespace {

constexpr double kEntropyEps = 1e-12;

void check_probability_rows(const Tensor& probs, const char* where) {
    if (probs.rank() != 2) {
        throw ContractError(std::string(where) + ": expected probability rows, got " +
                            shape_to_string(probs.shape()));
    }
    const std::size_t n = probs.shape()[0], c = probs.shape()[1];
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += probs.values()[i * c + j];
        if (std::abs(sum - 1.0) > 1e-6) {
            throw ContractError(std::string(where) + ": row " + std::to_string(i) + " sums to " +
                                std::to_string(sum));
        }
    }
}

void check_labels(const std::vector<int>& labels, std::size_t classes, std::size_t batch) {
    if (labels.size() != batch) {
        throw DimensionError("labels: " + std::to_string(labels.size()) + " for batch " +
                             std::to_string(batch));
    }
    for (int v : labels) {
        if (v < 0 || static_cast<std::size_t>(v) >= classes) {
            throw LabelError("label " + std::to_string(v) + " out of range [0, " +
                             std::to_string(classes) + ")");
        }
    }
}

// -(1/B) sum over all entries of p * log(p + eps); probs is [B x c].
Tensor mean_row_entropy(const Tensor& probs) {
    const double batch = static_cast<double>(probs.shape()[0]);
    Tensor plogp = mul(probs, map_unary(Unary::log, affine(probs, 1.0, kEntropyEps)));
    return affine(reduce(Reduce::sum, plogp), -1.0 / batch, 0.0);
}

// Row groups for the conditional entropy terms: for each sample k, the rows
// of the pair block (k*B + i) whose label matches label[k].
std::vector<std::vector<std::uint32_t>> own_label_pair_groups(const std::vector<int>& labels) {
    const std::size_t b = labels.size();
    std::vector<std::vector<std::uint32_t>> by_label;
    for (std::size_t i = 0; i < b; ++i) {
        const auto lab = static_cast<std::size_t>(labels[i]);
        if (by_label.size() <= lab) by_label.resize(lab + 1);
        by_label[lab].push_back(static_cast<std::uint32_t>(i));
    }
    std::vector<std::vector<std::uint32_t>> groups(b);
    for (std::size_t k = 0; k < b; ++k) {
        const auto& members = by_label[static_cast<std::size_t>(labels[k])];
        groups[k].reserve(members.size());
        for (std::uint32_t i : members)
            groups[k].push_back(static_cast<std::uint32_t>(k * b + i));
    }
    return groups;
}

// One half of the LRI objective: I(pred; label | z_R) estimated on a batch.
// Evaluates the frozen classifier on all (i, k) pairs in one shot, then forms
// the batch-marginal and own-group-conditional distributions per sample.
Tensor lri_term(const Classifier& f, const Tensor& z_first, const Tensor& zR,
                const std::vector<int>& labels) {
    const std::size_t b = z_first.shape()[0];
    // Pair row k*B + i holds (z_first^(i), z_R^(k)).
    Tensor pair_input = concat({tile_rows(z_first, b), repeat_rows_each(zR, b)}, 1);
    Tensor pair_probs = f.probs(pair_input);

    std::vector<std::vector<std::uint32_t>> marg_groups(b);
    for (std::size_t k = 0; k < b; ++k) {
        marg_groups[k].reserve(b);
        for (std::size_t i = 0; i < b; ++i)
            marg_groups[k].push_back(static_cast<std::uint32_t>(k * b + i));
    }
    Tensor marginal = mean_rows_grouped(pair_probs, marg_groups);
    Tensor conditional = mean_rows_grouped(pair_probs, own_label_pair_groups(labels));

    return sub(mean_row_entropy(marginal), mean_row_entropy(conditional));
}

}  // namespace

bool LossReport::all_finite() const { return first_non_finite() == nullptr; }

const char* LossReport::first_non_finite() const {
    const struct {
        const char* name;
        double v;
    } entries[] = {{"recon", recon},   {"kl", kl},         {"l_y", l_y},
                   {"l_s", l_s},       {"l_cmi", l_cmi},   {"l_lri", l_lri},
                   {"l_tc", l_tc},     {"l_y_op", l_y_op}, {"l_s_op", l_s_op},
                   {"l_disc", l_disc}, {"total_main", total_main}};
    for (const auto& e : entries) {
        if (!std::isfinite(e.v)) return e.name;
    }
    return nullptr;
}

std::pair<Tensor, Tensor> elbo_loss(const Tensor& x, const Tensor& recon_mean,
                                    const PosteriorBatch& post) {
    if (x.shape() != recon_mean.shape()) {
        throw DimensionError("elbo: input " + shape_to_string(x.shape()) + " vs reconstruction " +
                             shape_to_string(recon_mean.shape()));
    }
    const double batch = static_cast<double>(x.shape()[0]);
    Tensor recon = affine(reduce(Reduce::sum, bernoulli_nll(x, recon_mean)), 1.0 / batch, 0.0);
    Tensor kl = reduce(Reduce::mean, kl_per_sample(post));
    return {recon, kl};
}

std::pair<Tensor, Tensor> joint_classification_losses(const Classifier& f_y,
                                                      const Classifier& f_s, const Tensor& zY,
                                                      const Tensor& zS, const Tensor& zR,
                                                      const std::vector<int>& y,
                                                      const std::vector<int>& s) {
    check_labels(y, f_y.spec().classes, zY.shape()[0]);
    check_labels(s, f_s.spec().classes, zS.shape()[0]);
    Tensor l_y = nll_from_probs(classify_target(f_y, zY, zR), y);
    Tensor l_s = nll_from_probs(classify_sensitive(f_s, zS, zR), s);
    return {l_y, l_s};
}

std::pair<Tensor, Tensor> opponent_losses(const Classifier& f_y_op, const Classifier& f_s_op,
                                          const Tensor& zY_detached, const Tensor& zS_detached,
                                          const std::vector<int>& y, const std::vector<int>& s) {
    if (zY_detached.requires_grad() || zS_detached.requires_grad()) {
        throw ContractError("opponent_losses: latents must be detached from the encoder");
    }
    check_labels(y, f_y_op.spec().classes, zS_detached.shape()[0]);
    check_labels(s, f_s_op.spec().classes, zY_detached.shape()[0]);
    Tensor l_y_op = nll_from_probs(opponent_target(f_y_op, zS_detached), y);
    Tensor l_s_op = nll_from_probs(opponent_sensitive(f_s_op, zY_detached), s);
    return {l_y_op, l_s_op};
}

Tensor prediction_entropy(const Tensor& probs) {
    check_probability_rows(probs, "prediction_entropy");
    return mean_row_entropy(probs);
}

Tensor cmi_loss(const Classifier& f_y_op, const Classifier& f_s_op, const Tensor& zY,
                const Tensor& zS, const Tensor* zR) {
    if (!f_y_op.params().frozen() || !f_s_op.params().frozen()) {
        throw ContractError("cmi_loss: opponent classifiers must be frozen");
    }
    Tensor in_s = zR ? concat({zS, *zR}, 1) : zS;
    Tensor in_y = zR ? concat({zY, *zR}, 1) : zY;
    Tensor h_y = mean_row_entropy(f_y_op.probs(in_s));
    Tensor h_s = mean_row_entropy(f_s_op.probs(in_y));
    return map_unary(Unary::negate, add(h_y, h_s));
}

Tensor marginal_conditional_prob(const Classifier& f, const Tensor& z_first_batch,
                                 const Tensor& zR_k) {
    if (z_first_batch.shape()[0] == 0) throw UsageError("marginal_conditional_prob: empty batch");
    return group_conditional_prob(f, z_first_batch, zR_k);
}

Tensor group_conditional_prob(const Classifier& f, const Tensor& z_first_group,
                              const Tensor& zR_k) {
    if (z_first_group.rank() != 2 || z_first_group.shape()[0] == 0) {
        throw GroupSkipSignal("group_conditional_prob: empty group");
    }
    const std::size_t b = z_first_group.shape()[0];
    Tensor zr_row = zR_k.rank() == 1 ? reshape(zR_k, {1, zR_k.shape()[0]}) : zR_k;
    Tensor probs = f.probs(concat({z_first_group, tile_rows(zr_row, b)}, 1));
    return reduce(Reduce::mean, probs, 0);
}

Tensor lri_loss(const Classifier& f_y, const Classifier& f_s, const Tensor& zY, const Tensor& zS,
                const Tensor& zR, const std::vector<int>& y, const std::vector<int>& s) {
    if (!f_y.params().frozen() || !f_s.params().frozen()) {
        throw ContractError("lri_loss: f_y and f_s must be frozen");
    }
    check_labels(y, f_y.spec().classes, zY.shape()[0]);
    check_labels(s, f_s.spec().classes, zS.shape()[0]);
    Tensor i_y = lri_term(f_y, zY, zR, y);
    Tensor i_s = lri_term(f_s, zS, zR, s);
    return map_unary(Unary::negate, add(i_y, i_s));
}

TcLosses tc_losses(Discriminator& disc, const PartitionBatch& z, std::uint64_t perm_seed,
                   PermuteGranularity granularity) {
    const std::size_t b = z.batch();
    if (b < 2) throw UsageError("tc_losses: batch must have at least 2 samples");

    TcLosses out;
    {
        // Encoder term. log(sigmoid(l)) - log(1 - sigmoid(l)) is identically
        // the logit, so the estimator reduces to the batch-mean joint logit.
        FreezeGuard freeze(disc.params());
        Tensor joint_logit = disc.logits(z.joint_ysr());
        out.l_tc = reduce(Reduce::mean, joint_logit);
    }

    // Discriminator term on detached latents: joint vs component-permuted.
    PartitionBatch detached{stop_gradient(z.zx), stop_gradient(z.zy), stop_gradient(z.zs),
                            stop_gradient(z.zr)};
    LatentLayout layout{detached.zx.shape()[1], detached.zy.shape()[1], detached.zs.shape()[1],
                        detached.zr.shape()[1]};
    auto parts = partitions_from_batch(detached, layout);
    auto permuted =
        permute_codes_across_batch(parts, CodeSet::of({Code::Y, Code::S, Code::R}), perm_seed,
                                   granularity);
    PartitionBatch permuted_batch = batch_from_partitions(permuted);

    Tensor joint_logit = disc.logits(detached.joint_ysr());
    Tensor perm_logit = disc.logits(permuted_batch.joint_ysr());
    // BCE with labels joint=1, permuted=0: mean softplus(-l_joint)/2 + softplus(l_perm)/2.
    Tensor loss_joint = reduce(Reduce::mean, softplus(map_unary(Unary::negate, joint_logit)));
    Tensor loss_perm = reduce(Reduce::mean, softplus(perm_logit));
    out.l_disc = affine(add(loss_joint, loss_perm), 0.5, 0.0);
    return out;
}

}  // namespace cadvae
