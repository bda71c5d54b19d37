#include "cadvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace cadvae {

namespace {

// 8x8 digit glyphs (bit j of a row = column j, leftmost column first).
constexpr std::array<std::array<std::uint8_t, 8>, 10> kGlyphs = {{
    {0x3E, 0x63, 0x73, 0x7B, 0x6F, 0x67, 0x3E, 0x00},  // 0
    {0x0C, 0x0E, 0x0C, 0x0C, 0x0C, 0x0C, 0x3F, 0x00},  // 1
    {0x1E, 0x33, 0x30, 0x1C, 0x06, 0x33, 0x3F, 0x00},  // 2
    {0x1E, 0x33, 0x30, 0x1C, 0x30, 0x33, 0x1E, 0x00},  // 3
    {0x38, 0x3C, 0x36, 0x33, 0x7F, 0x30, 0x78, 0x00},  // 4
    {0x3F, 0x03, 0x1F, 0x30, 0x30, 0x33, 0x1E, 0x00},  // 5
    {0x1C, 0x06, 0x03, 0x1F, 0x33, 0x33, 0x1E, 0x00},  // 6
    {0x3F, 0x33, 0x30, 0x18, 0x0C, 0x0C, 0x0C, 0x00},  // 7
    {0x1E, 0x33, 0x33, 0x1E, 0x33, 0x33, 0x1E, 0x00},  // 8
    {0x1E, 0x33, 0x33, 0x3E, 0x30, 0x18, 0x0E, 0x00},  // 9
}};

bool glyph_pixel(std::size_t digit, std::size_t row, std::size_t col) {
    return (kGlyphs[digit][row] >> col) & 1u;
}

double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

LabeledDataset render_dataset(std::size_t n, const BiasSpec& spec, bool unbiased) {
    spec.validate();
    if (n < 1) throw UsageError("dataset generation: n must be >= 1");

    const std::size_t size = spec.image_size;
    const auto& palette = color_palette();
    Rng rng(spec.seed);

    // The glyph lands at a random offset per sample; without placement
    // variation every digit is a single aligned template and the shape
    // factor carries no difficulty at all. Larger canvases leave more room,
    // which keeps digit identity a genuinely harder feature than color.
    const std::size_t span = std::max<std::size_t>(6, size / 2);
    const std::size_t offsets = size - span + 1;

    std::vector<double> pixels(n * 3 * size * size, 0.0);
    std::vector<std::uint8_t> ys(n), ss(n);

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t digit = rng.uniform_int(spec.num_classes);
        std::size_t color;
        if (unbiased) {
            color = rng.uniform_int(spec.num_colors);
        } else if (rng.uniform01() < spec.bias_rate) {
            color = digit % spec.num_colors;
        } else {
            // uniform over the other colors
            const std::size_t own = digit % spec.num_colors;
            std::size_t idx = rng.uniform_int(spec.num_colors - 1);
            color = idx >= own ? idx + 1 : idx;
        }
        ys[i] = static_cast<std::uint8_t>(digit);
        ss[i] = static_cast<std::uint8_t>(color);

        std::array<double, 3> tint;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            tint[ch] = std::min(
                std::max(palette[color][ch] + rng.normal(0.0, spec.jitter_std), 0.0), 1.0);
        }
        const std::size_t oy = rng.uniform_int(offsets);
        const std::size_t ox = rng.uniform_int(offsets);
        double* img = pixels.data() + i * 3 * size * size;
        for (std::size_t r = 0; r < span; ++r) {
            const std::size_t gr = r * 8 / span;
            for (std::size_t c = 0; c < span; ++c) {
                const std::size_t gc = c * 8 / span;
                if (!glyph_pixel(digit, gr, gc)) continue;
                for (std::size_t ch = 0; ch < 3; ++ch)
                    img[ch * size * size + (r + oy) * size + (c + ox)] = quantize_f32(tint[ch]);
            }
        }
    }

    LabeledDataset ds;
    ds.images = Tensor::from_data({n, 3, size, size}, std::move(pixels), false);
    ds.y = std::move(ys);
    ds.s = std::move(ss);
    ds.num_classes = static_cast<std::uint8_t>(spec.num_classes);
    ds.num_groups = static_cast<std::uint8_t>(spec.num_colors);
    return ds;
}

// little-endian stream helpers -------------------------------------------

void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}
void put_u16(std::string& out, std::uint16_t v) { put_bytes(out, &v, 2); }
void put_u32(std::string& out, std::uint32_t v) { put_bytes(out, &v, 4); }

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw FormatError(std::string("dataset file truncated reading ") + what +
                              " at offset " + std::to_string(pos));
        }
    }
    void read(void* dst, std::size_t n, const char* what) {
        need(n, what);
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        read(&v, 1, what);
        return v;
    }
    std::uint16_t u16(const char* what) {
        std::uint16_t v;
        read(&v, 2, what);
        return v;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        read(&v, 4, what);
        return v;
    }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

void write_file(const std::string& path, const std::string& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

std::uint32_t read_be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

}  // namespace

void BiasSpec::validate() const {
    if (bias_rate < 0.0 || bias_rate > 1.0) {
        throw ConfigError("bias_rate " + std::to_string(bias_rate) + " outside [0, 1]");
    }
    if (jitter_std < 0.0) throw ConfigError("jitter_std must be >= 0");
    if (image_size != 8 && image_size != 16 && image_size != 28) {
        throw ConfigError("image_size must be one of 8, 16, 28");
    }
    if (num_classes < 1 || num_classes > 10) throw ConfigError("num_classes must be in 1..10");
    if (num_colors < 2 || num_colors > 10) throw ConfigError("num_colors must be in 2..10");
}

const std::array<std::array<double, 3>, 10>& color_palette() {
    static const std::array<std::array<double, 3>, 10> palette = {{
        {0.90, 0.10, 0.10},  // red
        {0.10, 0.75, 0.10},  // green
        {0.15, 0.30, 0.95},  // blue
        {0.95, 0.85, 0.10},  // yellow
        {0.85, 0.15, 0.85},  // magenta
        {0.10, 0.85, 0.85},  // cyan
        {0.95, 0.55, 0.10},  // orange
        {0.55, 0.15, 0.90},  // purple
        {0.55, 0.90, 0.25},  // lime
        {0.95, 0.45, 0.60},  // pink
    }};
    return palette;
}

Tensor LabeledDataset::image(std::size_t index) const {
    const std::size_t px = channels() * height() * width();
    std::vector<double> data(images.values().begin() + index * px,
                             images.values().begin() + (index + 1) * px);
    return Tensor::from_data({1, channels(), height(), width()}, std::move(data), false);
}

LabeledDataset LabeledDataset::slice(std::size_t offset, std::size_t n) const {
    if (offset + n > count()) throw UsageError("dataset slice out of range");
    const std::size_t px = channels() * height() * width();
    LabeledDataset out;
    std::vector<double> data(images.values().begin() + offset * px,
                             images.values().begin() + (offset + n) * px);
    out.images = Tensor::from_data({n, channels(), height(), width()}, std::move(data), false);
    out.y.assign(y.begin() + offset, y.begin() + offset + n);
    out.s.assign(s.begin() + offset, s.begin() + offset + n);
    out.num_classes = num_classes;
    out.num_groups = num_groups;
    return out;
}

LabeledDataset generate_colored_digits(std::size_t n, const BiasSpec& spec) {
    return render_dataset(n, spec, false);
}

LabeledDataset generate_unbiased_test(std::size_t n, const BiasSpec& spec) {
    return render_dataset(n, spec, true);
}

void save_dataset(const std::string& path, const LabeledDataset& ds) {
    std::string buf;
    const std::size_t n = ds.count();
    buf.reserve(18 + n * (ds.channels() * ds.height() * ds.width() * 4 + 2));
    buf.append("CADV");
    put_u16(buf, 1);
    put_u32(buf, static_cast<std::uint32_t>(n));
    buf.push_back(static_cast<char>(ds.channels()));
    put_u16(buf, static_cast<std::uint16_t>(ds.height()));
    put_u16(buf, static_cast<std::uint16_t>(ds.width()));
    buf.push_back(static_cast<char>(ds.num_classes));
    buf.push_back(static_cast<char>(ds.num_groups));
    for (double v : ds.images.values()) {
        const float f = static_cast<float>(v);
        put_bytes(buf, &f, 4);
    }
    put_bytes(buf, ds.y.data(), n);
    put_bytes(buf, ds.s.data(), n);
    write_file(path, buf);
}

LabeledDataset load_dataset(const std::string& path) {
    const std::string buf = read_file(path);
    ByteReader r{buf};
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, "CADV", 4) != 0) {
        throw FormatError("bad magic at offset 0: expected 'CADV'");
    }
    const std::uint16_t version = r.u16("version");
    if (version != 1) {
        throw FormatError("unsupported dataset version " + std::to_string(version) +
                          " at offset 4");
    }
    const std::uint32_t n = r.u32("count");
    const std::uint8_t c = r.u8("channels");
    const std::uint16_t h = r.u16("height");
    const std::uint16_t w = r.u16("width");
    const std::uint8_t ny = r.u8("class count");
    const std::uint8_t ns = r.u8("group count");

    const std::size_t px = static_cast<std::size_t>(n) * c * h * w;
    std::vector<double> pixels(px);
    r.need(px * 4, "pixels");
    for (std::size_t i = 0; i < px; ++i) {
        float f;
        std::memcpy(&f, buf.data() + r.pos + i * 4, 4);
        pixels[i] = static_cast<double>(f);
    }
    r.pos += px * 4;

    LabeledDataset ds;
    ds.images = Tensor::from_data({n, c, h, w}, std::move(pixels), false);
    ds.y.resize(n);
    r.read(ds.y.data(), n, "y labels");
    ds.s.resize(n);
    r.read(ds.s.data(), n, "s labels");
    ds.num_classes = ny;
    ds.num_groups = ns;
    if (r.pos != buf.size()) {
        throw FormatError("trailing bytes at offset " + std::to_string(r.pos));
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (ds.y[i] >= ny || ds.s[i] >= ns) {
            throw FormatError("label out of range at sample " + std::to_string(i));
        }
    }
    return ds;
}

std::vector<std::vector<std::uint8_t>> load_idx_images(const std::string& path, std::size_t& rows,
                                                       std::size_t& cols) {
    const std::string buf = read_file(path);
    if (buf.size() < 16) throw FormatError("IDX image file too short");
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (read_be32(p) != 0x00000803u) {
        throw FormatError("IDX image magic mismatch at offset 0");
    }
    const std::size_t n = read_be32(p + 4);
    rows = read_be32(p + 8);
    cols = read_be32(p + 12);
    if (buf.size() != 16 + n * rows * cols) {
        throw FormatError("IDX image payload size mismatch");
    }
    std::vector<std::vector<std::uint8_t>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].assign(p + 16 + i * rows * cols, p + 16 + (i + 1) * rows * cols);
    }
    return out;
}

std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
    const std::string buf = read_file(path);
    if (buf.size() < 8) throw FormatError("IDX label file too short");
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (read_be32(p) != 0x00000801u) {
        throw FormatError("IDX label magic mismatch at offset 0");
    }
    const std::size_t n = read_be32(p + 4);
    if (buf.size() != 8 + n) throw FormatError("IDX label payload size mismatch");
    return std::vector<std::uint8_t>(p + 8, p + 8 + n);
}

LabeledDataset colorize_glyphs(const std::vector<std::vector<std::uint8_t>>& glyphs,
                               const std::vector<std::uint8_t>& labels, std::size_t rows,
                               std::size_t cols, const BiasSpec& spec, bool unbiased) {
    spec.validate();
    if (glyphs.size() != labels.size() || glyphs.empty()) {
        throw UsageError("colorize_glyphs: images and labels must align and be non-empty");
    }
    const std::size_t size = spec.image_size;
    const auto& palette = color_palette();
    Rng rng(spec.seed);
    const std::size_t n = glyphs.size();

    std::vector<double> pixels(n * 3 * size * size, 0.0);
    std::vector<std::uint8_t> ys(n), ss(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t digit = labels[i] % spec.num_classes;
        std::size_t color;
        if (unbiased) {
            color = rng.uniform_int(spec.num_colors);
        } else if (rng.uniform01() < spec.bias_rate) {
            color = digit % spec.num_colors;
        } else {
            const std::size_t own = digit % spec.num_colors;
            std::size_t idx = rng.uniform_int(spec.num_colors - 1);
            color = idx >= own ? idx + 1 : idx;
        }
        ys[i] = static_cast<std::uint8_t>(digit);
        ss[i] = static_cast<std::uint8_t>(color);
        std::array<double, 3> tint;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            tint[ch] = std::min(
                std::max(palette[color][ch] + rng.normal(0.0, spec.jitter_std), 0.0), 1.0);
        }
        double* img = pixels.data() + i * 3 * size * size;
        for (std::size_t r = 0; r < size; ++r) {
            const std::size_t gr = r * rows / size;
            for (std::size_t c = 0; c < size; ++c) {
                const std::size_t gc = c * cols / size;
                const double intensity = glyphs[i][gr * cols + gc] / 255.0;
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    img[ch * size * size + r * size + c] = quantize_f32(intensity * tint[ch]);
                }
            }
        }
    }

    LabeledDataset ds;
    ds.images = Tensor::from_data({n, 3, size, size}, std::move(pixels), false);
    ds.y = std::move(ys);
    ds.s = std::move(ss);
    ds.num_classes = static_cast<std::uint8_t>(spec.num_classes);
    ds.num_groups = static_cast<std::uint8_t>(spec.num_colors);
    return ds;
}

std::vector<Batch> batch_iter(const LabeledDataset& ds, std::size_t batch_size,
                              std::uint64_t epoch_seed) {
    if (batch_size < 2) throw UsageError("batch_iter: batch_size must be >= 2");
    if (batch_size > ds.count()) {
        throw UsageError("batch_iter: batch_size " + std::to_string(batch_size) +
                         " exceeds dataset size " + std::to_string(ds.count()));
    }
    Rng rng(epoch_seed);
    auto order = rng.permutation(ds.count());

    const std::size_t px = ds.channels() * ds.height() * ds.width();
    const std::size_t num_batches = ds.count() / batch_size;  // drop-last
    std::vector<Batch> batches;
    batches.reserve(num_batches);
    for (std::size_t b = 0; b < num_batches; ++b) {
        Batch batch;
        std::vector<double> data(batch_size * px);
        batch.y.resize(batch_size);
        batch.s.resize(batch_size);
        batch.groups_y.assign(ds.num_classes, {});
        batch.groups_s.assign(ds.num_groups, {});
        for (std::size_t i = 0; i < batch_size; ++i) {
            const std::size_t src = order[b * batch_size + i];
            std::copy(ds.images.values().begin() + src * px,
                      ds.images.values().begin() + (src + 1) * px, data.begin() + i * px);
            batch.y[i] = ds.y[src];
            batch.s[i] = ds.s[src];
            batch.groups_y[ds.y[src]].push_back(static_cast<std::uint32_t>(i));
            batch.groups_s[ds.s[src]].push_back(static_cast<std::uint32_t>(i));
        }
        batch.x = Tensor::from_data({batch_size, ds.channels(), ds.height(), ds.width()},
                                    std::move(data), false);
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace cadvae
