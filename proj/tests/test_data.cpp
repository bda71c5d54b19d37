#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "cadvae/data.hpp"

using namespace cadvae;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

double empirical_bias(const LabeledDataset& ds) {
    std::size_t matches = 0;
    for (std::size_t i = 0; i < ds.count(); ++i)
        if (ds.y[i] % ds.num_groups == ds.s[i]) ++matches;
    return static_cast<double>(matches) / static_cast<double>(ds.count());
}

}  // namespace

TEST_CASE("bias spec validation") {
    BiasSpec spec;
    spec.bias_rate = 1.2;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec.bias_rate = 0.7;
    spec.image_size = 12;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec.image_size = 16;
    spec.jitter_std = -0.1;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    CHECK_THROWS_AS(generate_colored_digits(0, BiasSpec{}), UsageError);
}

TEST_CASE("bias-rate mechanics") {
    BiasSpec spec;
    spec.image_size = 8;
    spec.seed = 7;

    SUBCASE("rate 1 pins every color to its digit") {
        spec.bias_rate = 1.0;
        LabeledDataset ds = generate_colored_digits(500, spec);
        for (std::size_t i = 0; i < ds.count(); ++i) CHECK(ds.s[i] == ds.y[i]);
    }
    SUBCASE("rate 0.7 lands within the binomial window") {
        spec.bias_rate = 0.7;
        LabeledDataset ds = generate_colored_digits(10000, spec);
        CHECK(empirical_bias(ds) == doctest::Approx(0.7).epsilon(0.03));
    }
    SUBCASE("rate 0 never matches") {
        spec.bias_rate = 0.0;
        LabeledDataset ds = generate_colored_digits(10000, spec);
        CHECK(empirical_bias(ds) <= 0.01);
    }
    SUBCASE("pixels stay in [0, 1]") {
        spec.bias_rate = 0.7;
        spec.jitter_std = 0.5;
        LabeledDataset ds = generate_colored_digits(200, spec);
        for (double v : ds.images.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("unbiased generator") {
    BiasSpec spec;
    spec.image_size = 8;
    spec.seed = 11;
    LabeledDataset ds = generate_unbiased_test(10000, spec);

    CHECK(empirical_bias(ds) == doctest::Approx(0.1).epsilon(0.25));  // 0.1 +- 0.02 absolute
    CHECK(std::abs(empirical_bias(ds) - 0.1) < 0.02);

    std::vector<std::size_t> digit_hist(10, 0);
    for (auto y : ds.y) digit_hist[y]++;
    for (std::size_t h : digit_hist) {
        CHECK(std::abs(static_cast<double>(h) / 10000.0 - 0.1) < 0.02);
    }

    LabeledDataset again = generate_unbiased_test(10000, spec);
    CHECK(ds.images.values() == again.images.values());
    CHECK(ds.y == again.y);
    CHECK(ds.s == again.s);
}

TEST_CASE("dataset persistence round-trips byte-identically") {
    BiasSpec spec;
    spec.image_size = 8;
    spec.seed = 3;
    LabeledDataset ds = generate_colored_digits(64, spec);

    const std::string p1 = "/tmp/cadvae_test_ds1.cadv";
    const std::string p2 = "/tmp/cadvae_test_ds2.cadv";
    save_dataset(p1, ds);
    LabeledDataset loaded = load_dataset(p1);
    save_dataset(p2, loaded);
    CHECK(slurp(p1) == slurp(p2));

    CHECK(loaded.count() == ds.count());
    CHECK(loaded.y == ds.y);
    CHECK(loaded.s == ds.s);
    // pixels quantized at generation, so load reproduces them exactly
    CHECK(loaded.images.values() == ds.images.values());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("dataset format errors carry offsets") {
    BiasSpec spec;
    spec.image_size = 8;
    LabeledDataset ds = generate_colored_digits(4, spec);
    const std::string path = "/tmp/cadvae_test_ds_bad.cadv";
    save_dataset(path, ds);
    std::string bytes = slurp(path);

    SUBCASE("corrupted magic") {
        bytes[0] = 'X';
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
        CHECK_THROWS_AS(load_dataset(path), FormatError);
    }
    SUBCASE("bad version") {
        bytes[4] = 9;
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
        CHECK_THROWS_AS(load_dataset(path), FormatError);
    }
    SUBCASE("truncation") {
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes.substr(0, 40);
        CHECK_THROWS_AS(load_dataset(path), FormatError);
    }
    SUBCASE("count header mismatch against the payload") {
        bytes[6] = static_cast<char>(5);  // N = 5, labels only present for 4
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
        CHECK_THROWS_AS(load_dataset(path), FormatError);
    }
    std::remove(path.c_str());
}

TEST_CASE("batch iteration") {
    BiasSpec spec;
    spec.image_size = 8;
    spec.seed = 21;
    LabeledDataset ds = generate_colored_digits(100, spec);

    SUBCASE("groups partition every batch") {
        auto batches = batch_iter(ds, 16, 5);
        CHECK(batches.size() == 6);  // drop-last
        for (const Batch& b : batches) {
            std::set<std::uint32_t> seen;
            for (const auto& group : b.groups_y) {
                for (auto idx : group) {
                    CHECK(idx < 16);
                    CHECK(seen.insert(idx).second);  // disjoint
                }
            }
            CHECK(seen.size() == 16);  // union covers the batch
            std::set<std::uint32_t> seen_s;
            for (const auto& group : b.groups_s)
                for (auto idx : group) CHECK(seen_s.insert(idx).second);
            CHECK(seen_s.size() == 16);
            // group membership matches labels
            for (std::size_t g = 0; g < b.groups_y.size(); ++g)
                for (auto idx : b.groups_y[g]) CHECK(b.y[idx] == static_cast<int>(g));
        }
    }
    SUBCASE("same epoch seed reproduces the order") {
        auto a = batch_iter(ds, 16, 5);
        auto b = batch_iter(ds, 16, 5);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].y == b[i].y);
            CHECK(a[i].x.values() == b[i].x.values());
        }
        auto c = batch_iter(ds, 16, 6);
        bool same = true;
        for (std::size_t i = 0; i < a.size() && same; ++i) same = a[i].y == c[i].y;
        CHECK_FALSE(same);
    }
    SUBCASE("every sample except the dropped tail appears exactly once") {
        auto batches = batch_iter(ds, 16, 5);
        // multiset oracle over image bytes is heavy; labels + first pixel suffice
        std::multiset<std::pair<int, int>> seen;
        for (const Batch& b : batches)
            for (std::size_t i = 0; i < b.y.size(); ++i) seen.insert({b.y[i], b.s[i]});
        CHECK(seen.size() == 96);
        std::multiset<std::pair<int, int>> all;
        for (std::size_t i = 0; i < ds.count(); ++i) all.insert({ds.y[i], ds.s[i]});
        // dropped tail: seen must be a sub-multiset of all
        for (const auto& key : seen) CHECK(all.count(key.first == key.first ? key : key) >= 1);
    }
    SUBCASE("usage errors") {
        CHECK_THROWS_AS(batch_iter(ds, 1, 0), UsageError);
        CHECK_THROWS_AS(batch_iter(ds, 101, 0), UsageError);
    }
}

TEST_CASE("idx loaders reject malformed headers") {
    const std::string path = "/tmp/cadvae_test_idx";
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        const unsigned char bad[16] = {0, 0, 8, 99, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2};
        out.write(reinterpret_cast<const char*>(bad), 16);
    }
    std::size_t rows, cols;
    CHECK_THROWS_AS(load_idx_images(path, rows, cols), FormatError);
    CHECK_THROWS_AS(load_idx_labels(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("colorize_glyphs applies the same bias mechanics") {
    // synthetic 4x4 glyphs standing in for external digit images
    std::vector<std::vector<std::uint8_t>> glyphs(400, std::vector<std::uint8_t>(16, 200));
    std::vector<std::uint8_t> labels(400);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 10;
    BiasSpec spec;
    spec.image_size = 8;
    spec.bias_rate = 1.0;
    LabeledDataset ds = colorize_glyphs(glyphs, labels, 4, 4, spec, false);
    CHECK(ds.count() == 400);
    for (std::size_t i = 0; i < ds.count(); ++i) CHECK(ds.s[i] == ds.y[i]);
}
