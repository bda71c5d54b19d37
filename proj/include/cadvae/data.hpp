#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cadvae/rng.hpp"
#include "cadvae/tensor.hpp"

namespace cadvae {

// Synthetic colored-digit benchmark with a controllable target-sensitive
// correlation, plus binary persistence and grouped batch iteration.
//
// Pixel values are quantized to f32 precision at generation time so that an
// in-memory dataset and its round-tripped file are numerically identical.

struct BiasSpec {
    std::size_t num_classes = 10;
    std::size_t num_colors = 10;
    double bias_rate = 0.7;
    double jitter_std = 0.05;
    std::size_t image_size = 16;  // one of 8, 16, 28
    std::uint64_t seed = 0;

    void validate() const;
};

struct LabeledDataset {
    Tensor images;  // [N x 3 x H x W], values in [0, 1]
    std::vector<std::uint8_t> y;
    std::vector<std::uint8_t> s;
    std::uint8_t num_classes = 10;
    std::uint8_t num_groups = 10;

    std::size_t count() const { return y.size(); }
    std::size_t channels() const { return images.shape()[1]; }
    std::size_t height() const { return images.shape()[2]; }
    std::size_t width() const { return images.shape()[3]; }

    // One image as a constant [1 x C x H x W] tensor.
    Tensor image(std::size_t index) const;
    LabeledDataset slice(std::size_t offset, std::size_t n) const;
};

// The 10 palette anchors (RGB in [0,1]) digits are tinted with.
const std::array<std::array<double, 3>, 10>& color_palette();

// Biased generator: digit uniform; with probability bias_rate the color is
// the digit's own palette entry, otherwise uniform over the other colors.
LabeledDataset generate_colored_digits(std::size_t n, const BiasSpec& spec);

// Unbiased split: color uniform over all entries, independent of the digit.
LabeledDataset generate_unbiased_test(std::size_t n, const BiasSpec& spec);

// CADV binary format (little-endian):
//   magic "CADV" | u16 version=1 | u32 N | u8 C | u16 H | u16 W
//   | u8 |Y| | u8 |S| | f32 pixels | u8 y[N] | u8 s[N]
void save_dataset(const std::string& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::string& path);

// Optional IDX (MNIST) readers: 0x00000803 image file, 0x00000801 labels.
std::vector<std::vector<std::uint8_t>> load_idx_images(const std::string& path, std::size_t& rows,
                                                       std::size_t& cols);
std::vector<std::uint8_t> load_idx_labels(const std::string& path);

// Colored dataset built from externally loaded grayscale glyphs (real MNIST)
// with the same bias mechanics as the synthetic generator.
LabeledDataset colorize_glyphs(const std::vector<std::vector<std::uint8_t>>& glyphs,
                               const std::vector<std::uint8_t>& labels, std::size_t rows,
                               std::size_t cols, const BiasSpec& spec, bool unbiased);

struct Batch {
    Tensor x;            // [b x C x H x W]
    std::vector<int> y;  // int for direct use as class indices
    std::vector<int> s;
    // Index lists into this batch, one per label value; they partition 0..b-1.
    std::vector<std::vector<std::uint32_t>> groups_y;
    std::vector<std::vector<std::uint32_t>> groups_s;
};

// Epoch iteration: uniform shuffle under epoch_seed, fixed batch size, final
// partial batch dropped. Group indices are precomputed per batch.
std::vector<Batch> batch_iter(const LabeledDataset& ds, std::size_t batch_size,
                              std::uint64_t epoch_seed);

}  // namespace cadvae
