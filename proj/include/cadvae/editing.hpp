#pragma once

#include <string>
#include <vector>

#include "cadvae/networks.hpp"

namespace cadvae {

// Counterfactual generation and fine-grained editing: encode with posterior
// means, manipulate the partition, decode, render grids. Everything here is
// deterministic; no latent sampling.

struct GridImage {
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<double> pixels;  // C x H x W, values in [0, 1]
};

struct EditGrid {
    std::size_t rows = 0, cols = 0;
    std::vector<GridImage> images;  // row-major, rows * cols entries
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
};

// Posterior-mean latent partition of a single [1 x C x H x W] image.
LatentPartition encode_mean_partition(const Encoder& encoder, const Tensor& image);
GridImage decode_single(const Decoder& decoder, const LatentPartition& z);

// Row 0: source and reference reconstructions. One row per mask:
// decode(swap(source, reference, mask)) next to the mirrored swap.
EditGrid counterfactual(const Encoder& encoder, const Decoder& decoder, const Tensor& source,
                        const Tensor& reference, const std::vector<CodeSet>& masks);

inline std::vector<CodeSet> default_counterfactual_masks() {
    return {CodeSet::of({Code::X}), CodeSet::of({Code::Y}), CodeSet::of({Code::S}),
            CodeSet::of({Code::S, Code::R})};
}

// Interpolation grid. Plain mode: rows over lambda_y, columns over lambda_s,
// with z_R and z_X fixed at the source. s_replaced mode: z_S taken wholly
// from the reference, rows over lambda_y, columns over lambda_r.
EditGrid traversal_grid(const Encoder& encoder, const Decoder& decoder, const Tensor& source,
                        const Tensor& reference, const std::vector<double>& lambdas_y,
                        const std::vector<double>& lambdas_s_or_r, bool s_replaced);

inline std::vector<double> default_lambdas_ys() { return {0.0, 0.33, 0.66, 1.0}; }
inline std::vector<double> default_lambdas_r() { return {0.0, 0.5, 1.0}; }

// Single PPM (P6) image: 2-pixel white separators around and between cells,
// channel values quantized round-half-up to u8.
void render_grid(const EditGrid& grid, const std::string& path);

}  // namespace cadvae
