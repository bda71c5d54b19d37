#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "cadvae/trainer.hpp"

using namespace cadvae;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.layout = LatentLayout{6, 4, 4, 4};
    cfg.classifier_hidden = {16, 16};
    cfg.disc_hidden = {32, 32, 32};
    cfg.batch_size = 32;
    cfg.epochs = 1;
    cfg.seed = 99;
    return cfg;
}

LabeledDataset tiny_dataset(std::size_t n = 256, double bias = 0.7, std::uint64_t seed = 5) {
    BiasSpec spec;
    spec.image_size = 8;
    spec.bias_rate = bias;
    spec.seed = seed;
    return generate_colored_digits(n, spec);
}

bool params_equal(const ParamSet& a, const ParamSet& b) {
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
        if (ia->first != ib->first) return false;
        if (ia->second.values() != ib->second.values()) return false;
    }
    return ia == a.end() && ib == b.end();
}

bool states_equal(TrainState& a, TrainState& b) {
    auto sa = a.param_sets();
    auto sb = b.param_sets();
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (!params_equal(*sa[i].second, *sb[i].second)) return false;
    }
    return a.step_count() == b.step_count() && a.rng().state() == b.rng().state();
}

bool reports_equal(const LossReport& a, const LossReport& b) {
    return a.recon == b.recon && a.kl == b.kl && a.l_y == b.l_y && a.l_s == b.l_s &&
           a.l_cmi == b.l_cmi && a.l_lri == b.l_lri && a.l_tc == b.l_tc &&
           a.l_y_op == b.l_y_op && a.l_s_op == b.l_s_op && a.l_disc == b.l_disc &&
           a.total_main == b.total_main;
}

}  // namespace

TEST_CASE("config validation enforces the documented ranges") {
    TrainConfig cfg = tiny_config();
    cfg.lambda_cmi = 11.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.lambda_lri = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.gamma_tc = -0.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.lr_main = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("zero coefficients degrade to a supervised VAE step") {
    LabeledDataset ds = tiny_dataset(64);
    TrainConfig cfg = tiny_config();
    cfg.lambda_cmi = 0.0;
    cfg.lambda_lri = 0.0;
    cfg.gamma_tc = 0.0;

    TrainState real(cfg, 3, 8, 8, 10, 10);
    TrainState manual(cfg, 3, 8, 8, 10, 10);
    REQUIRE(states_equal(real, manual));

    Batch batch = batch_iter(ds, cfg.batch_size, 1)[0];
    real.train_step(batch);

    // replicate phase A by hand: supervised VAE forward, backward, Adam
    {
        const std::size_t b = batch.y.size();
        const LatentLayout& lay = cfg.layout;
        std::vector<double> noise(b * lay.total());
        for (double& v : noise) v = manual.rng().normal();
        PosteriorBatch post = manual.encoder().encode(batch.x);
        PartitionBatch z = reparameterize(
            post, Tensor::from_data({b, lay.total()}, std::move(noise), false), lay);
        Tensor recon_mean = manual.decoder().decode(z);
        auto [recon, kl] = elbo_loss(batch.x, recon_mean, post);
        auto [l_y, l_s] = joint_classification_losses(manual.f_y(), manual.f_s(), z.zy, z.zs,
                                                      z.zr, batch.y, batch.s);
        backward(add(add(recon, kl), add(l_y, l_s)));

        AdamParams hp;
        for (auto* net : {&manual.encoder().params(), &manual.decoder().params()}) {
            AdamState adam;
            adam.init_like(*net);
            adam.step(*net, cfg.lr_main, 1, hp);
        }
        AdamState ay, as;
        ay.init_like(manual.f_y().params());
        ay.step(manual.f_y().params(), cfg.lr_main, 1, hp);
        as.init_like(manual.f_s().params());
        as.step(manual.f_s().params(), cfg.lr_main, 1, hp);
    }

    // phi, theta, w_y, w_s must match the real step bit for bit
    CHECK(params_equal(real.encoder().params(), manual.encoder().params()));
    CHECK(params_equal(real.decoder().params(), manual.decoder().params()));
    CHECK(params_equal(real.f_y().params(), manual.f_y().params()));
    CHECK(params_equal(real.f_s().params(), manual.f_s().params()));
}

TEST_CASE("routing checks hold through a full default step") {
    LabeledDataset ds = tiny_dataset(64);
    TrainConfig cfg = tiny_config();
    cfg.routing_checks = true;  // asserts the freeze contracts inside train_step
    TrainState state(cfg, 3, 8, 8, 10, 10);
    Batch batch = batch_iter(ds, cfg.batch_size, 1)[0];
    CHECK_NOTHROW(state.train_step(batch));
    CHECK(state.step_count() == 1);
}

TEST_CASE("two runs from one seed produce identical loss sequences") {
    LabeledDataset ds = tiny_dataset(128);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 2;
    auto [s1, h1] = fit(ds, cfg);
    auto [s2, h2] = fit(ds, cfg);
    REQUIRE(h1.steps.size() == h2.steps.size());
    CHECK(h1.steps.size() == cfg.epochs * (128 / cfg.batch_size));
    for (std::size_t i = 0; i < h1.steps.size(); ++i) {
        CHECK(reports_equal(h1.steps[i], h2.steps[i]));
    }
    CHECK(states_equal(*s1, *s2));
    for (std::size_t i = 0; i < h1.epochs.size(); ++i) {
        CHECK(h1.epochs[i].acc_y_op == h2.epochs[i].acc_y_op);
        CHECK(h1.epochs[i].acc_s_op == h2.epochs[i].acc_s_op);
        CHECK(epoch_stats_json(h1.epochs[i]) == epoch_stats_json(h2.epochs[i]));
    }
}

TEST_CASE("checkpoint round-trips bit-exactly and resumes identically") {
    LabeledDataset ds = tiny_dataset(96);
    TrainConfig cfg = tiny_config();
    const std::string path = "/tmp/cadvae_test_ckpt.cadc";

    SUBCASE("fresh state reproduces initialization exactly") {
        TrainState state(cfg, 3, 8, 8, 10, 10);
        state.save_checkpoint(path);
        TrainState loaded = TrainState::load_checkpoint(path, cfg, 3, 8, 8, 10, 10);
        CHECK(states_equal(state, loaded));
    }

    SUBCASE("save -> load -> one step equals an uninterrupted step") {
        auto [state, history] = fit(ds, cfg);
        state->save_checkpoint(path);
        TrainState resumed = TrainState::load_checkpoint(path, cfg, 3, 8, 8, 10, 10);
        REQUIRE(states_equal(*state, resumed));

        Batch batch = batch_iter(ds, cfg.batch_size, 777)[0];
        LossReport direct = state->train_step(batch);
        LossReport after_resume = resumed.train_step(batch);
        CHECK(reports_equal(direct, after_resume));
        CHECK(states_equal(*state, resumed));
    }

    SUBCASE("saving twice produces byte-identical files") {
        TrainState state(cfg, 3, 8, 8, 10, 10);
        state.save_checkpoint(path);
        std::ifstream in1(path, std::ios::binary);
        std::string b1((std::istreambuf_iterator<char>(in1)), std::istreambuf_iterator<char>());
        state.save_checkpoint(path);
        std::ifstream in2(path, std::ios::binary);
        std::string b2((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
        CHECK(b1 == b2);
    }

    SUBCASE("tampered length field is rejected") {
        TrainState state(cfg, 3, 8, 8, 10, 10);
        state.save_checkpoint(path);
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        // first entry's name-length u16 sits right after magic+version+digest+count
        bytes[4 + 2 + 32 + 4] = static_cast<char>(0xff);
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
        CHECK_THROWS_AS(TrainState::load_checkpoint(path, cfg, 3, 8, 8, 10, 10), FormatError);
    }

    SUBCASE("config digest mismatch is rejected") {
        TrainState state(cfg, 3, 8, 8, 10, 10);
        state.save_checkpoint(path);
        TrainConfig other = cfg;
        other.lambda_cmi = 1.25;
        CHECK_THROWS_AS(TrainState::load_checkpoint(path, other, 3, 8, 8, 10, 10), FormatError);
    }
    std::remove(path.c_str());
}

TEST_CASE("history length and epoch bookkeeping") {
    LabeledDataset ds = tiny_dataset(100);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 3;
    auto [state, history] = fit(ds, cfg);
    CHECK(history.steps.size() == 3 * (100 / cfg.batch_size));
    CHECK(history.epochs.size() == 3);
    CHECK(history.epochs.back().epoch == 3);
    CHECK(state->step_count() == history.steps.size());
}

TEST_CASE("epoch-mean main loss decreases over the first epochs at 70% bias") {
    LabeledDataset ds = tiny_dataset(640, 0.7, 31);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 5;
    cfg.batch_size = 64;
    auto [state, history] = fit(ds, cfg);
    REQUIRE(history.epochs.size() == 5);
    for (std::size_t e = 1; e < history.epochs.size(); ++e) {
        CHECK(history.epochs[e].mean_losses.total_main <
              history.epochs[e - 1].mean_losses.total_main);
    }
}

TEST_CASE("non-finite forward values raise a divergence error naming the term") {
    LabeledDataset ds = tiny_dataset(64);
    TrainConfig cfg = tiny_config();
    TrainState state(cfg, 3, 8, 8, 10, 10);
    Batch batch = batch_iter(ds, cfg.batch_size, 1)[0];

    // poison one input pixel; the ELBO terms hit the guard first
    std::vector<double> pixels = batch.x.values();
    pixels[7] = std::nan("");
    batch.x = Tensor::from_data(batch.x.shape(), std::move(pixels), false);
    try {
        state.train_step(batch);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        const std::string what = e.what();
        CHECK(what.find("divergence") != std::string::npos);
        const bool named = what.find("recon") != std::string::npos ||
                           what.find("kl") != std::string::npos;
        CHECK(named);
    }
}

// Diagnostic only: the interaction between the leakage and relevance terms
// is logged, not asserted — their phi-gradient geometry is an open modeling
// question, but both must at least produce finite, nonzero gradients.
TEST_CASE("cmi/lri gradient cosine diagnostic") {
    LabeledDataset ds = tiny_dataset(64);
    TrainConfig cfg = tiny_config();
    TrainState state(cfg, 3, 8, 8, 10, 10);
    Batch batch = batch_iter(ds, cfg.batch_size, 1)[0];

    auto phi_grads_of = [&](bool use_cmi) {
        for (auto& [name, ps] : state.param_sets()) ps->zero_grads();
        Rng noise_rng(777);
        PosteriorBatch post = state.encoder().encode(batch.x);
        std::vector<double> noise(batch.y.size() * cfg.layout.total());
        for (double& v : noise) v = noise_rng.normal();
        PartitionBatch z = reparameterize(
            post,
            Tensor::from_data({batch.y.size(), cfg.layout.total()}, std::move(noise), false),
            cfg.layout);
        if (use_cmi) {
            FreezeGuard g1(state.f_y_op().params()), g2(state.f_s_op().params());
            backward(cmi_loss(state.f_y_op(), state.f_s_op(), z.zy, z.zs));
        } else {
            FreezeGuard g1(state.f_y().params()), g2(state.f_s().params());
            backward(lri_loss(state.f_y(), state.f_s(), z.zy, z.zs, z.zr, batch.y, batch.s));
        }
        std::vector<double> flat;
        for (const auto& [name, t] : state.encoder().params()) {
            flat.insert(flat.end(), t.grad().begin(), t.grad().end());
        }
        return flat;
    };

    const std::vector<double> g_cmi = phi_grads_of(true);
    const std::vector<double> g_lri = phi_grads_of(false);
    double dot = 0.0, n1 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < g_cmi.size(); ++i) {
        dot += g_cmi[i] * g_lri[i];
        n1 += g_cmi[i] * g_cmi[i];
        n2 += g_lri[i] * g_lri[i];
    }
    REQUIRE(n1 > 0.0);
    REQUIRE(n2 > 0.0);
    const double cosine = dot / std::sqrt(n1 * n2);
    CHECK(std::isfinite(cosine));
    MESSAGE("phi-gradient cosine(cmi, lri) on an untrained model: ", cosine);
}

TEST_CASE("opponent accuracy probes run on the evaluation split") {
    LabeledDataset ds = tiny_dataset(128);
    TrainConfig cfg = tiny_config();
    TrainState state(cfg, 3, 8, 8, 10, 10);
    auto [acc_y, acc_s] = state.opponent_accuracy(ds);
    CHECK(acc_y >= 0.0);
    CHECK(acc_y <= 1.0);
    CHECK(acc_s >= 0.0);
    CHECK(acc_s <= 1.0);
}
