#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cadvae/networks.hpp"
#include "cadvae/objectives.hpp"
#include "test_support.hpp"

using namespace cadvae;
using testsup::finite_diff_grad;
using testsup::max_grad_error;
using testsup::random_tensor;
using testsup::random_values;
using testsup::sgd_step;

namespace {

EncoderSpec tiny_encoder_spec() {
    EncoderSpec spec;
    spec.channels = 3;
    spec.height = 8;
    spec.width = 8;
    spec.conv_channels = {4, 8};
    spec.layout = LatentLayout{6, 3, 3, 4};
    return spec;
}

}  // namespace

TEST_CASE("encode shape contract under the default layout") {
    EncoderSpec spec;
    spec.height = 16;
    spec.width = 16;
    Rng rng(41);
    Encoder enc(spec, rng);
    Tensor x = random_tensor({2, 3, 16, 16}, rng, false, 0.0, 1.0);
    PosteriorBatch post = enc.encode(x);
    CHECK(post.mu.shape() == std::vector<std::size_t>{2, 512});
    CHECK(post.log_var.shape() == std::vector<std::size_t>{2, 512});
    for (double v : post.log_var.values()) {
        CHECK(v >= -10.0);
        CHECK(v <= 10.0);
    }
    CHECK_THROWS_AS(enc.encode(Tensor::zeros({2, 3, 8, 8})), DimensionError);
}

TEST_CASE("identical inputs produce identical posteriors") {
    Rng rng(42);
    Encoder enc(tiny_encoder_spec(), rng);
    Tensor one = random_tensor({1, 3, 8, 8}, rng, false, 0.0, 1.0);
    std::vector<double> both = one.values();
    both.insert(both.end(), one.values().begin(), one.values().end());
    PosteriorBatch post = enc.encode(Tensor::from_data({2, 3, 8, 8}, both));
    const std::size_t total = enc.spec().layout.total();
    for (std::size_t j = 0; j < total; ++j) {
        CHECK(post.mu.values()[j] == post.mu.values()[total + j]);
        CHECK(post.log_var.values()[j] == post.log_var.values()[total + j]);
    }
}

TEST_CASE("encoder first-layer gradients match finite differences") {
    Rng rng(43);
    EncoderSpec spec = tiny_encoder_spec();
    Encoder enc(spec, rng);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, false, 0.0, 1.0);

    backward(reduce(Reduce::mean, enc.encode(x).mu));
    const std::vector<double> analytic = enc.params().at("conv1.w").grad();

    const std::vector<double> w0 = enc.params().at("conv1.w").values();
    auto f = [&](const std::vector<double>& w) {
        enc.params().rebind("conv1.w", Tensor::from_data({4, 3, 3, 3}, w, true));
        return reduce(Reduce::mean, enc.encode(x).mu).value();
    };
    const auto numeric = finite_diff_grad(f, w0);
    enc.params().rebind("conv1.w", Tensor::from_data({4, 3, 3, 3}, w0, true));
    CHECK(max_grad_error(analytic, numeric) < 1e-4);
}

TEST_CASE("decode shape, range and determinism") {
    Rng rng(44);
    EncoderSpec espec = tiny_encoder_spec();
    Decoder dec(DecoderSpec::mirror_of(espec), rng);
    std::vector<LatentPartition> parts(3);
    for (auto& p : parts) {
        p.zx = random_values(espec.layout.d_x, rng);
        p.zy = random_values(espec.layout.d_y, rng);
        p.zs = random_values(espec.layout.d_s, rng);
        p.zr = random_values(espec.layout.d_r, rng);
    }
    PartitionBatch z = batch_from_partitions(parts);
    Tensor out = dec.decode(z);
    CHECK(out.shape() == std::vector<std::size_t>{3, 3, 8, 8});
    for (double v : out.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    Tensor again = dec.decode(z);
    CHECK(out.values() == again.values());
}

TEST_CASE("decoder mirrors 28x28 through the stride-2 stack") {
    Rng rng(45);
    EncoderSpec spec = tiny_encoder_spec();
    spec.height = 28;
    spec.width = 28;
    Encoder enc(spec, rng);
    Decoder dec(DecoderSpec::mirror_of(spec), rng);
    Tensor x = random_tensor({1, 3, 28, 28}, rng, false, 0.0, 1.0);
    PosteriorBatch post = enc.encode(x);
    PartitionBatch z = reparameterize(
        post, Tensor::zeros({1, spec.layout.total()}), spec.layout);
    CHECK(dec.decode(z).shape() == std::vector<std::size_t>{1, 3, 28, 28});
}

TEST_CASE("classifier probability rows") {
    Rng rng(46);
    ClassifierSpec spec{7, {16, 16}, 10};
    Classifier f(spec, rng);
    Tensor input = random_tensor({5, 7}, rng);
    Tensor probs = f.probs(input);
    for (std::size_t i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 10; ++j) sum += probs.values()[i * 10 + j];
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }

    Classifier zero = Classifier::zero_initialized(spec);
    Tensor uniform = zero.probs(input);
    for (double v : uniform.values()) CHECK(v == doctest::Approx(0.1).epsilon(1e-12));

    CHECK_THROWS_AS(f.probs(Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("cross-entropy gradient through classify_target matches finite differences") {
    Rng rng(47);
    ClassifierSpec spec{6, {8, 8}, 4};
    Classifier f(spec, rng);
    const std::vector<int> labels{0, 3, 1};
    const auto zy_vals = random_values(3 * 4, rng);
    const auto zr_vals = random_values(3 * 2, rng);
    Tensor zr = Tensor::from_data({3, 2}, zr_vals);

    Tensor zy = Tensor::from_data({3, 4}, zy_vals, true);
    backward(nll_from_probs(classify_target(f, zy, zr), labels));
    auto fd = [&](const std::vector<double>& v) {
        Tensor z = Tensor::from_data({3, 4}, v, false);
        return nll_from_probs(classify_target(f, z, zr), labels).value();
    };
    CHECK(max_grad_error(zy.grad(), finite_diff_grad(fd, zy_vals)) < 1e-4);
}

TEST_CASE("opponent trained on pure-noise latents stays at chance") {
    Rng rng(48);
    ClassifierSpec spec{4, {16, 16}, 10};
    Classifier opp(spec, rng);

    // latents carry no information about y at all
    auto draw = [&](std::size_t n, std::vector<int>& labels) {
        labels.resize(n);
        std::vector<double> vals(n * 4);
        for (auto& v : vals) v = rng.normal();
        for (auto& y : labels) y = static_cast<int>(rng.uniform_int(10));
        return Tensor::from_data({n, 4}, std::move(vals), false);
    };
    for (int step = 0; step < 300; ++step) {
        std::vector<int> y;
        Tensor zs = draw(64, y);
        backward(nll_from_probs(opponent_target(opp, zs), y));
        sgd_step(opp.params(), 0.2);
    }
    std::vector<int> y_eval;
    Tensor zs_eval = draw(2000, y_eval);
    FreezeGuard freeze(opp.params());
    Tensor probs = opponent_target(opp, zs_eval);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < 2000; ++i) {
        const double* row = probs.values().data() + i * 10;
        std::size_t best = 0;
        for (std::size_t j = 1; j < 10; ++j)
            if (row[j] > row[best]) best = j;
        if (static_cast<int>(best) == y_eval[i]) ++hits;
    }
    const double acc = static_cast<double>(hits) / 2000.0;
    CHECK(acc > 0.05);
    CHECK(acc < 0.15);
}

TEST_CASE("discriminator logit contract") {
    Rng rng(49);
    DiscriminatorSpec spec{9, {32, 32, 32}};
    Discriminator d(spec, rng);
    Tensor z = random_tensor({6, 9}, rng);
    Tensor logits = d.logits(z);
    CHECK(logits.shape() == std::vector<std::size_t>{6, 1});
    for (double v : logits.values()) CHECK(std::isfinite(v));

    // zero parameters -> logit 0 -> probability 1/2
    Rng rng2(50);
    Discriminator zero(spec, rng2);
    for (const auto& [name, t] : zero.params()) {
        zero.params().rebind(name, Tensor::zeros(t.shape(), true));
    }
    Tensor zl = zero.logits(z);
    for (double v : zl.values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(d.logits(Tensor::zeros({2, 4})), DimensionError);
}

TEST_CASE("discriminator separates a planted 2-d correlation") {
    Rng rng(51);
    DiscriminatorSpec spec{2, {32, 32, 32}};
    Discriminator d(spec, rng);

    // joint samples satisfy a = b; "permuted" samples break the tie
    auto draw_joint = [&](std::size_t n) {
        std::vector<double> v(n * 2);
        for (std::size_t i = 0; i < n; ++i) {
            const double a = rng.normal();
            v[2 * i] = a;
            v[2 * i + 1] = a;
        }
        return Tensor::from_data({n, 2}, std::move(v), false);
    };
    auto draw_perm = [&](std::size_t n) {
        std::vector<double> v(n * 2);
        for (double& x : v) x = rng.normal();
        return Tensor::from_data({n, 2}, std::move(v), false);
    };
    for (int step = 0; step < 400; ++step) {
        Tensor joint = draw_joint(64);
        Tensor perm = draw_perm(64);
        Tensor loss = affine(
            add(reduce(Reduce::mean, softplus(map_unary(Unary::negate, d.logits(joint)))),
                reduce(Reduce::mean, softplus(d.logits(perm)))),
            0.5, 0.0);
        backward(loss);
        sgd_step(d.params(), 0.1);
    }
    FreezeGuard freeze(d.params());
    Tensor joint = draw_joint(1000);
    Tensor perm = draw_perm(1000);
    std::size_t correct = 0;
    for (double v : d.logits(joint).values())
        if (v > 0.0) ++correct;
    for (double v : d.logits(perm).values())
        if (v <= 0.0) ++correct;
    CHECK(static_cast<double>(correct) / 2000.0 > 0.9);
}

TEST_CASE("network outputs stay finite for extreme finite inputs") {
    Rng rng(52);
    Encoder enc(tiny_encoder_spec(), rng);
    Tensor x = random_tensor({1, 3, 8, 8}, rng, false, -100.0, 100.0);
    PosteriorBatch post = enc.encode(x);
    for (double v : post.mu.values()) CHECK(std::isfinite(v));
    for (double v : post.log_var.values()) CHECK(std::isfinite(v));
}
