#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cadvae/metrics.hpp"
#include "test_support.hpp"

using namespace cadvae;
using testsup::random_values;

namespace {

// 20-row binary table with positive-prediction rates 0.6 (group 0) and 0.4
// (group 1) regardless of the true labels.
PredictionTable dp_table() {
    PredictionTable t;
    for (int i = 0; i < 10; ++i) {
        t.y_true.push_back(i % 2);
        t.y_pred.push_back(i < 6 ? 1 : 0);
        t.s.push_back(0);
    }
    for (int i = 0; i < 10; ++i) {
        t.y_true.push_back(i % 2);
        t.y_pred.push_back(i < 4 ? 1 : 0);
        t.s.push_back(1);
    }
    return t;
}

}  // namespace

TEST_CASE("demographic parity") {
    SUBCASE("hand-built 20-row table gives 0.2") {
        CHECK(demographic_parity(dp_table()) == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("group-independent predictions give zero") {
        PredictionTable t;
        for (int g = 0; g < 2; ++g)
            for (int i = 0; i < 8; ++i) {
                t.y_true.push_back(i % 2);
                t.y_pred.push_back(i % 2);
                t.s.push_back(g);
            }
        CHECK(demographic_parity(t) == 0.0);
    }
    SUBCASE("single group is zero by convention") {
        PredictionTable t;
        t.y_true = {0, 1, 0};
        t.y_pred = {1, 0, 1};
        t.s = {0, 0, 0};
        CHECK(demographic_parity(t) == 0.0);
    }
    SUBCASE("declared group with no members is undefined") {
        PredictionTable t = dp_table();
        t.num_groups = 3;
        CHECK_THROWS_AS(demographic_parity(t), UndefinedGroupError);
    }
    SUBCASE("invariant under relabeling of group identifiers") {
        PredictionTable t = dp_table();
        PredictionTable swapped = t;
        for (int& g : swapped.s) g = 1 - g;
        CHECK(demographic_parity(t) == demographic_parity(swapped));
    }
    SUBCASE("multi-class multi-group max gap") {
        PredictionTable t;
        // group 0 predicts class 2 at 1.0; group 1 never does
        for (int i = 0; i < 4; ++i) {
            t.y_true.push_back(2);
            t.y_pred.push_back(2);
            t.s.push_back(0);
        }
        for (int i = 0; i < 4; ++i) {
            t.y_true.push_back(2);
            t.y_pred.push_back(1);
            t.s.push_back(1);
        }
        CHECK(demographic_parity(t) == doctest::Approx(1.0));
    }
}

TEST_CASE("equalized odds") {
    SUBCASE("perfect classifier gives zero") {
        PredictionTable t;
        for (int g = 0; g < 2; ++g)
            for (int i = 0; i < 6; ++i) {
                t.y_true.push_back(i % 2);
                t.y_pred.push_back(i % 2);
                t.s.push_back(g);
            }
        CHECK(equalized_odds(t) == 0.0);
    }
    SUBCASE("hand-built 2x2x2 table: TPR gap 0.3 dominates FPR gap 0.1") {
        PredictionTable t;
        // true class 1: group 0 TPR 0.8 (8/10), group 1 TPR 0.5 (5/10)
        for (int i = 0; i < 10; ++i) {
            t.y_true.push_back(1);
            t.y_pred.push_back(i < 8 ? 1 : 0);
            t.s.push_back(0);
        }
        for (int i = 0; i < 10; ++i) {
            t.y_true.push_back(1);
            t.y_pred.push_back(i < 5 ? 1 : 0);
            t.s.push_back(1);
        }
        // true class 0: group 0 FPR 0.2 (2/10), group 1 FPR 0.1 (1/10)
        for (int i = 0; i < 10; ++i) {
            t.y_true.push_back(0);
            t.y_pred.push_back(i < 2 ? 1 : 0);
            t.s.push_back(0);
        }
        for (int i = 0; i < 10; ++i) {
            t.y_true.push_back(0);
            t.y_pred.push_back(i < 1 ? 1 : 0);
            t.s.push_back(1);
        }
        CHECK(equalized_odds(t) == doctest::Approx(0.3).epsilon(1e-12));
    }
    SUBCASE("group-constant predictions give zero") {
        PredictionTable t;
        for (int g = 0; g < 3; ++g)
            for (int i = 0; i < 5; ++i) {
                t.y_true.push_back(i % 2);
                t.y_pred.push_back(1);
                t.s.push_back(g);
            }
        CHECK(equalized_odds(t) == 0.0);
    }
    SUBCASE("true class absent everywhere is undefined") {
        PredictionTable t;
        t.y_true = {0, 0, 0, 0};
        t.y_pred = {0, 1, 0, 1};
        t.s = {0, 1, 0, 1};
        t.num_classes = 2;  // class 1 declared but never observed
        CHECK_THROWS_AS(equalized_odds(t), UndefinedGroupError);
    }
    SUBCASE("cells with a single populated group are skipped") {
        PredictionTable t;
        // class 0 seen in both groups, class 1 only in group 0
        t.y_true = {0, 0, 1, 1};
        t.y_pred = {0, 1, 1, 1};
        t.s = {0, 1, 0, 0};
        CHECK_NOTHROW(equalized_odds(t));
    }
    SUBCASE("invariant under group relabeling") {
        PredictionTable t = dp_table();
        PredictionTable swapped = t;
        for (int& g : swapped.s) g = 1 - g;
        CHECK(equalized_odds(t) == equalized_odds(swapped));
    }
}

TEST_CASE("frechet distance closed forms") {
    SUBCASE("identical stats give zero") {
        Rng rng(71);
        const std::size_t d = 6;
        const auto feats = random_values(40 * d, rng);
        GaussianStats st = gaussian_stats(feats, 40, d);
        CHECK(std::abs(frechet_distance(st, st)) < 1e-9);
    }
    SUBCASE("1-d mean shift of unit Gaussians") {
        GaussianStats a{{0.0}, {1.0}, 1};
        GaussianStats b{{1.0}, {1.0}, 1};
        CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("diagonal case sums (sqrt(sa) - sqrt(sb))^2") {
        GaussianStats a{{0.0, 0.0}, {1.0, 0.0, 0.0, 4.0}, 2};
        GaussianStats b{{0.0, 0.0}, {4.0, 0.0, 0.0, 1.0}, 2};
        CHECK(frechet_distance(a, b) == doctest::Approx(2.0).epsilon(1e-9));
    }
    SUBCASE("symmetric in its arguments") {
        Rng rng(72);
        const std::size_t d = 5;
        GaussianStats a = gaussian_stats(random_values(30 * d, rng), 30, d);
        GaussianStats b = gaussian_stats(random_values(30 * d, rng, 0.0, 2.0), 30, d);
        CHECK(frechet_distance(a, b) ==
              doctest::Approx(frechet_distance(b, a)).epsilon(1e-7));
    }
    SUBCASE("dimension mismatch and indefinite covariance are errors") {
        GaussianStats a{{0.0}, {1.0}, 1};
        GaussianStats b{{0.0, 0.0}, {1.0, 0.0, 0.0, 1.0}, 2};
        CHECK_THROWS_AS(frechet_distance(a, b), DimensionError);
        GaussianStats bad{{0.0, 0.0}, {1.0, 0.0, 0.0, -0.5}, 2};
        CHECK_THROWS_AS(frechet_distance(bad, b), NumericError);
    }
    SUBCASE("order of samples does not change the statistics") {
        Rng rng(73);
        const std::size_t d = 4, n = 50;
        auto feats = random_values(n * d, rng);
        GaussianStats ref = gaussian_stats(random_values(n * d, rng, 0.5, 1.5), n, d);
        const double direct = frechet_distance(gaussian_stats(feats, n, d), ref);
        // shuffle whole rows
        auto perm = rng.permutation(n);
        std::vector<double> shuffled(n * d);
        for (std::size_t i = 0; i < n; ++i)
            std::copy(feats.begin() + perm[i] * d, feats.begin() + (perm[i] + 1) * d,
                      shuffled.begin() + i * d);
        const double after = frechet_distance(gaussian_stats(shuffled, n, d), ref);
        CHECK(std::abs(direct - after) < 1e-9);
    }
}

TEST_CASE("entropy score") {
    SUBCASE("identical rows score exactly 1") {
        std::vector<double> probs;
        for (int i = 0; i < 5; ++i) {
            probs.insert(probs.end(), {0.2, 0.5, 0.3});
        }
        CHECK(entropy_score(probs, 5, 3) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("ten distinct one-hot rows score exactly 10") {
        std::vector<double> probs(10 * 10, 0.0);
        for (int i = 0; i < 10; ++i) probs[i * 10 + i] = 1.0;
        CHECK(entropy_score(probs, 10, 10) == doctest::Approx(10.0).epsilon(1e-12));
    }
    SUBCASE("mixed case matches the double-loop oracle to 1e-10") {
        Rng rng(74);
        const std::size_t n = 12, c = 7;
        std::vector<double> probs(n * c);
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                probs[i * c + j] = rng.uniform(0.01, 1.0);
                sum += probs[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= sum;
        }
        std::vector<double> marginal(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) marginal[j] += probs[i * c + j] / n;
        double kl_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double kl = 0.0;
            for (std::size_t j = 0; j < c; ++j)
                kl += probs[i * c + j] * std::log(probs[i * c + j] / marginal[j]);
            kl_sum += kl;
        }
        const double oracle = std::exp(kl_sum / n);
        CHECK(std::abs(entropy_score(probs, n, c) - oracle) < 1e-10);
    }
    SUBCASE("range is [1, classes] and bad rows are contract errors") {
        Rng rng(75);
        for (int rep = 0; rep < 20; ++rep) {
            const std::size_t n = 8, c = 5;
            std::vector<double> probs(n * c);
            for (std::size_t i = 0; i < n; ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    probs[i * c + j] = rng.uniform(0.0, 1.0);
                    sum += probs[i * c + j];
                }
                for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= sum;
            }
            const double is = entropy_score(probs, n, c);
            CHECK(is >= 1.0 - 1e-12);
            CHECK(is <= c + 1e-12);
        }
        CHECK_THROWS_AS(entropy_score({0.5, 0.2}, 1, 2), ContractError);
    }
}

TEST_CASE("discrete conditional mutual information") {
    SUBCASE("explicitly factorized joints are conditionally independent") {
        Rng rng(76);
        for (int rep = 0; rep < 50; ++rep) {
            DiscreteJoint j;
            j.nx = 2;
            j.ny = 3;
            j.nz = 2;
            j.p.assign(12, 0.0);
            std::vector<double> pz = {rng.uniform(0.2, 0.8), 0.0};
            pz[1] = 1.0 - pz[0];
            for (std::size_t z = 0; z < 2; ++z) {
                std::vector<double> px(2), py(3);
                double sx = 0, sy = 0;
                for (auto& v : px) sx += (v = rng.uniform(0.1, 1.0));
                for (auto& v : py) sy += (v = rng.uniform(0.1, 1.0));
                for (auto& v : px) v /= sx;
                for (auto& v : py) v /= sy;
                for (std::size_t x = 0; x < 2; ++x)
                    for (std::size_t y = 0; y < 3; ++y) j.at(x, y, z) = px[x] * py[y] * pz[z];
            }
            // renormalize against tiny fp drift, then assert near-zero CMI
            double total = 0;
            for (double v : j.p) total += v;
            for (double& v : j.p) v /= total;
            CHECK(discrete_cmi(j) < 1e-10);
            CHECK(discrete_cmi(j) >= -1e-12);
        }
    }
    SUBCASE("X = Y uniform binary with constant Z gives ln 2") {
        DiscreteJoint j;
        j.nx = 2;
        j.ny = 2;
        j.nz = 1;
        j.p = {0.5, 0.0, 0.0, 0.5};
        CHECK(discrete_cmi(j) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("symmetry in the primary arguments") {
        Rng rng(77);
        for (int rep = 0; rep < 100; ++rep) {
            DiscreteJoint j;
            j.nx = 3;
            j.ny = 3;
            j.nz = 3;
            j.p.assign(27, 0.0);
            double total = 0.0;
            for (double& v : j.p) total += (v = rng.uniform(0.001, 1.0));
            for (double& v : j.p) v /= total;

            DiscreteJoint t;  // transposed in (x, y)
            t.nx = 3;
            t.ny = 3;
            t.nz = 3;
            t.p.assign(27, 0.0);
            for (std::size_t x = 0; x < 3; ++x)
                for (std::size_t y = 0; y < 3; ++y)
                    for (std::size_t z = 0; z < 3; ++z) t.at(y, x, z) = j.at(x, y, z);
            CHECK(std::abs(discrete_cmi(j) - discrete_cmi(t)) < 1e-12);
            CHECK(discrete_cmi(j) >= -1e-12);
        }
    }
    SUBCASE("unnormalized joints are contract errors") {
        DiscreteJoint j;
        j.nx = 1;
        j.ny = 1;
        j.nz = 1;
        j.p = {0.5};
        CHECK_THROWS_AS(discrete_cmi(j), ContractError);
        j.p = {-1.0};
        CHECK_THROWS_AS(discrete_cmi(j), ContractError);
    }
}

TEST_CASE("gaussian_stats applies rank shrinkage") {
    Rng rng(78);
    const std::size_t d = 8, n = 4;  // fewer samples than dimensions
    GaussianStats st = gaussian_stats(random_values(n * d, rng), n, d);
    std::vector<double> vals, vecs;
    symmetric_eigen(st.cov, d, vals, vecs);
    for (double v : vals) CHECK(v > 0.0);  // shrinkage keeps it positive definite
}

TEST_CASE("probe protocol") {
    BiasSpec dspec;
    dspec.image_size = 8;
    dspec.seed = 17;
    LabeledDataset train = generate_colored_digits(512, dspec);
    dspec.seed = 18;
    LabeledDataset test = generate_unbiased_test(512, dspec);

    EncoderSpec espec;
    espec.channels = 3;
    espec.height = 8;
    espec.width = 8;
    espec.conv_channels = {4, 8};
    espec.layout = LatentLayout{6, 4, 4, 4};
    Rng rng(79);
    Encoder enc(espec, rng);

    SUBCASE("untrained encoder probes far below trained performance") {
        // Random conv features keep some digit signal on fixed glyphs, so the
        // control lands above the 10-class chance rate but stays low.
        ProbeConfig cfg;
        cfg.epochs = 8;
        ProbeReport report = probe_eval(enc, train, test, CodeSet::of({Code::Y}), 5, cfg);
        CHECK(report.accuracy > 0.03);
        CHECK(report.accuracy < 0.45);
    }
    SUBCASE("identical seeds give identical probes") {
        ProbeConfig cfg;
        cfg.epochs = 4;
        ProbeReport a = probe_eval(enc, train, test, CodeSet::of({Code::Y}), 9, cfg);
        ProbeReport b = probe_eval(enc, train, test, CodeSet::of({Code::Y}), 9, cfg);
        CHECK(a.accuracy == b.accuracy);
        CHECK(a.table.y_pred == b.table.y_pred);
    }
    SUBCASE("select_codes concatenates the requested components") {
        Tensor means = posterior_means(enc, train.slice(0, 8));
        CHECK(select_codes(means, espec.layout, CodeSet::of({Code::Y})).shape()[1] == 4);
        CHECK(select_codes(means, espec.layout, CodeSet::of({Code::Y, Code::R})).shape()[1] == 8);
        CHECK(select_codes(means, espec.layout, CodeSet::all()).shape()[1] == 18);
        CHECK_THROWS_AS(select_codes(means, espec.layout, CodeSet::none()), UsageError);
    }
}

TEST_CASE("probe on label-planted latents is near perfect") {
    Rng rng(80);
    const std::size_t n = 400, c = 10;
    auto planted = [&](std::size_t count, std::vector<int>& labels, std::vector<int>& groups) {
        labels.resize(count);
        groups.resize(count);
        std::vector<double> vals(count * c, 0.0);
        for (std::size_t i = 0; i < count; ++i) {
            labels[i] = static_cast<int>(rng.uniform_int(c));
            groups[i] = static_cast<int>(rng.uniform_int(c));
            vals[i * c + labels[i]] = 1.0;
            for (std::size_t j = 0; j < c; ++j) vals[i * c + j] += 0.05 * rng.normal();
        }
        return Tensor::from_data({count, c}, std::move(vals), false);
    };
    std::vector<int> y_train, s_train, y_test, s_test;
    Tensor train_feats = planted(n, y_train, s_train);
    Tensor test_feats = planted(200, y_test, s_test);
    ProbeConfig cfg;
    cfg.epochs = 20;
    ProbeReport report = train_probe_on_features(train_feats, y_train, test_feats, y_test,
                                                 s_test, c, c, 3, cfg);
    CHECK(report.accuracy > 0.99);
}

TEST_CASE("delta metrics identity perturbations vanish") {
    BiasSpec dspec;
    dspec.image_size = 8;
    dspec.seed = 23;
    LabeledDataset eval_set = generate_unbiased_test(48, dspec);
    FeatureExtractor fx = FeatureExtractor::train(generate_unbiased_test(256, dspec), 9, 2);

    EncoderSpec espec;
    espec.channels = 3;
    espec.height = 8;
    espec.width = 8;
    espec.conv_channels = {4, 8};
    espec.layout = LatentLayout{6, 4, 4, 4};
    Rng rng(81);
    Encoder enc(espec, rng);
    Decoder dec(DecoderSpec::mirror_of(espec), rng);

    SUBCASE("identity permutation") {
        PerturbationSpec spec;
        spec.mode = PerturbMode::permute_ys;
        spec.identity = true;
        DeltaReport r = delta_metrics(enc, dec, eval_set, fx, spec);
        CHECK(r.delta_fid <= 1e-6);
        CHECK(r.delta_is <= 1e-6);
        CHECK(r.perturbations == 1);
    }
    SUBCASE("all-zero traversal") {
        PerturbationSpec spec;
        spec.mode = PerturbMode::traverse;
        spec.identity = true;
        DeltaReport r = delta_metrics(enc, dec, eval_set, fx, spec);
        CHECK(r.delta_fid <= 1e-6);
        CHECK(r.delta_is <= 1e-6);
    }
    SUBCASE("default traverse grid enumerates exactly 48 combinations") {
        PerturbationSpec spec;
        spec.mode = PerturbMode::traverse;
        DeltaReport r = delta_metrics(enc, dec, eval_set, fx, spec);
        CHECK(r.perturbations == 48);
        CHECK(std::isfinite(r.delta_fid));
        CHECK(std::isfinite(r.delta_is));
    }
    SUBCASE("random permutation produces a finite non-negative delta") {
        PerturbationSpec spec;
        spec.mode = PerturbMode::permute_ys;
        spec.seed = 77;
        DeltaReport r = delta_metrics(enc, dec, eval_set, fx, spec);
        CHECK(r.delta_fid >= -1e-9);
        CHECK(std::isfinite(r.delta_is));
    }
}

TEST_CASE("metrics report json is stable") {
    MetricsReport r;
    r.accuracy = 0.5;
    r.probe_seed = 7;
    r.n_eval = 10;
    const std::string a = metrics_report_json(r);
    const std::string b = metrics_report_json(r);
    CHECK(a == b);
    CHECK(a.find("\"accuracy\":0.5") != std::string::npos);
    CHECK(a.find("\"n_eval\":10") != std::string::npos);
}
