#include "cadvae/editing.hpp"

#include <cmath>
#include <fstream>

namespace cadvae {

LatentPartition encode_mean_partition(const Encoder& encoder, const Tensor& image) {
    FreezeGuard freeze(encoder.params());
    PosteriorBatch post = encoder.encode(image);
    const LatentLayout& lay = encoder.spec().layout;
    GaussianPosterior row = post.row(0);
    LatentPartition out;
    std::size_t idx = 0;
    for (Code c : {Code::X, Code::Y, Code::S, Code::R}) {
        const std::size_t d = c == Code::X   ? lay.d_x
                              : c == Code::Y ? lay.d_y
                              : c == Code::S ? lay.d_s
                                             : lay.d_r;
        out.component(c).assign(row.mu.begin() + idx, row.mu.begin() + idx + d);
        idx += d;
    }
    return out;
}

GridImage decode_single(const Decoder& decoder, const LatentPartition& z) {
    FreezeGuard freeze(decoder.params());
    Tensor recon = decoder.decode(batch_from_partitions({z}));
    GridImage img;
    img.channels = recon.shape()[1];
    img.height = recon.shape()[2];
    img.width = recon.shape()[3];
    img.pixels = recon.values();
    return img;
}

EditGrid counterfactual(const Encoder& encoder, const Decoder& decoder, const Tensor& source,
                        const Tensor& reference, const std::vector<CodeSet>& masks) {
    LatentPartition z_src = encode_mean_partition(encoder, source);
    LatentPartition z_ref = encode_mean_partition(encoder, reference);

    EditGrid grid;
    grid.cols = 2;
    grid.rows = 1 + masks.size();
    grid.col_labels = {"source", "reference"};
    grid.row_labels.push_back("reconstruction");
    grid.images.push_back(decode_single(decoder, z_src));
    grid.images.push_back(decode_single(decoder, z_ref));

    auto mask_name = [](const CodeSet& m) {
        std::string s;
        if (m.x) s += "X";
        if (m.y) s += "Y";
        if (m.s) s += "S";
        if (m.r) s += "R";
        return s.empty() ? std::string("none") : s;
    };
    for (const CodeSet& mask : masks) {
        grid.row_labels.push_back("swap " + mask_name(mask));
        grid.images.push_back(decode_single(decoder, swap_codes(z_src, z_ref, mask)));
        grid.images.push_back(decode_single(decoder, swap_codes(z_ref, z_src, mask)));
    }
    return grid;
}

EditGrid traversal_grid(const Encoder& encoder, const Decoder& decoder, const Tensor& source,
                        const Tensor& reference, const std::vector<double>& lambdas_y,
                        const std::vector<double>& lambdas_s_or_r, bool s_replaced) {
    for (double l : lambdas_y) {
        if (l < 0.0 || l > 1.0) throw RangeError("traversal: lambda outside [0, 1]");
    }
    for (double l : lambdas_s_or_r) {
        if (l < 0.0 || l > 1.0) throw RangeError("traversal: lambda outside [0, 1]");
    }
    LatentPartition z_src = encode_mean_partition(encoder, source);
    LatentPartition z_ref = encode_mean_partition(encoder, reference);

    EditGrid grid;
    grid.rows = lambdas_y.size();
    grid.cols = lambdas_s_or_r.size();
    for (double ly : lambdas_y) grid.row_labels.push_back("lambda_y=" + std::to_string(ly));
    for (double lc : lambdas_s_or_r) {
        grid.col_labels.push_back((s_replaced ? "lambda_r=" : "lambda_s=") + std::to_string(lc));
    }

    LatentPartition base = z_src;
    if (s_replaced) base.zs = z_ref.zs;  // z_S fully replaced by the reference

    for (double ly : lambdas_y) {
        for (double lc : lambdas_s_or_r) {
            std::map<Code, double> lambdas{{Code::Y, ly}};
            lambdas[s_replaced ? Code::R : Code::S] = lc;
            grid.images.push_back(decode_single(decoder, interpolate_codes(base, z_ref, lambdas)));
        }
    }
    return grid;
}

void render_grid(const EditGrid& grid, const std::string& path) {
    if (grid.images.size() != grid.rows * grid.cols || grid.images.empty()) {
        throw UsageError("render_grid: image count does not fill the grid");
    }
    const std::size_t h = grid.images[0].height;
    const std::size_t w = grid.images[0].width;
    for (const GridImage& img : grid.images) {
        if (img.height != h || img.width != w || img.channels != 3) {
            throw DimensionError("render_grid: cells must be equally sized RGB images");
        }
    }

    constexpr std::size_t sep = 2;
    const std::size_t out_w = grid.cols * w + (grid.cols + 1) * sep;
    const std::size_t out_h = grid.rows * h + (grid.rows + 1) * sep;
    std::vector<std::uint8_t> canvas(out_w * out_h * 3, 255);  // separators stay white

    auto quantize = [](double v) {
        const double scaled = std::floor(std::min(std::max(v, 0.0), 1.0) * 255.0 + 0.5);
        return static_cast<std::uint8_t>(std::min(scaled, 255.0));
    };
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            const GridImage& img = grid.images[r * grid.cols + c];
            const std::size_t y0 = sep + r * (h + sep);
            const std::size_t x0 = sep + c * (w + sep);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        canvas[((y0 + y) * out_w + (x0 + x)) * 3 + ch] =
                            quantize(img.pixels[ch * h * w + y * w + x]);
                    }
        }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "P6\n" << out_w << " " << out_h << "\n255\n";
    out.write(reinterpret_cast<const char*>(canvas.data()),
              static_cast<std::streamsize>(canvas.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace cadvae
