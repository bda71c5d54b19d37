#include "cadvae/networks.hpp"

#include <cmath>

namespace cadvae {

Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out,
                      Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    std::vector<double> data(n);
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

namespace {

// Dense layer helper over a ParamSet: y = x * W + b.
Tensor dense(const ParamSet& ps, const std::string& prefix, const Tensor& x) {
    return add_row_bias(matmul(x, ps.use(prefix + ".w")), ps.use(prefix + ".b"));
}

void add_dense(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out,
               Rng& rng) {
    ps.add(prefix + ".w", glorot_uniform({in, out}, in, out, rng));
    ps.add(prefix + ".b", Tensor::zeros({out}, true));
}

void add_dense_zero(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out) {
    ps.add(prefix + ".w", Tensor::zeros({in, out}, true));
    ps.add(prefix + ".b", Tensor::zeros({out}, true));
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(EncoderSpec spec, Rng& rng) : spec_(spec) {
    spec_.layout.validate();
    const std::size_t c1 = spec_.conv_channels[0];
    const std::size_t c2 = spec_.conv_channels[1];
    const std::size_t kc = 9;  // 3x3 kernels
    params_.add("conv1.w",
                glorot_uniform({c1, spec_.channels, 3, 3}, spec_.channels * kc, c1 * kc, rng));
    params_.add("conv1.b", Tensor::zeros({c1}, true));
    params_.add("conv2.w", glorot_uniform({c2, c1, 3, 3}, c1 * kc, c2 * kc, rng));
    params_.add("conv2.b", Tensor::zeros({c2}, true));
    add_dense(params_, "head", spec_.flat_dim(), 2 * spec_.layout.total(), rng);
}

PosteriorBatch Encoder::encode(const Tensor& x) const {
    if (x.rank() != 4 || x.shape()[1] != spec_.channels || x.shape()[2] != spec_.height ||
        x.shape()[3] != spec_.width) {
        throw DimensionError("encode: input " + shape_to_string(x.shape()) + ", expected [Bx" +
                             std::to_string(spec_.channels) + "x" + std::to_string(spec_.height) +
                             "x" + std::to_string(spec_.width) + "]");
    }
    const std::size_t batch = x.shape()[0];
    Tensor h = map_unary(spec_.activation,
                         conv2d(x, params_.use("conv1.w"), params_.use("conv1.b"), 2, 1));
    h = map_unary(spec_.activation, conv2d(h, params_.use("conv2.w"), params_.use("conv2.b"), 2, 1));
    h = reshape(h, {batch, spec_.flat_dim()});
    Tensor heads = dense(params_, "head", h);
    auto parts = split(heads, {spec_.layout.total(), spec_.layout.total()}, 1);
    return PosteriorBatch{parts[0], clamp(parts[1], -kLogVarClamp, kLogVarClamp)};
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

Decoder::Decoder(DecoderSpec spec, Rng& rng) : spec_(spec) {
    spec_.layout.validate();
    const std::size_t c1 = spec_.conv_channels[0];
    const std::size_t c2 = spec_.conv_channels[1];
    add_dense(params_, "fc", spec_.layout.total(), spec_.flat_dim(), rng);
    const std::size_t kc = 9;
    params_.add("tconv1.w", glorot_uniform({c2, c1, 3, 3}, c2 * kc, c1 * kc, rng));
    params_.add("tconv1.b", Tensor::zeros({c1}, true));
    params_.add("tconv2.w", glorot_uniform({c1, spec_.channels, 3, 3}, c1 * kc,
                                           spec_.channels * kc, rng));
    params_.add("tconv2.b", Tensor::zeros({spec_.channels}, true));
}

Tensor Decoder::decode(const PartitionBatch& z) const {
    const std::size_t batch = z.batch();
    if (z.zx.shape()[1] != spec_.layout.d_x || z.zy.shape()[1] != spec_.layout.d_y ||
        z.zs.shape()[1] != spec_.layout.d_s || z.zr.shape()[1] != spec_.layout.d_r) {
        throw DimensionError("decode: partition does not match layout");
    }
    const std::size_t c2 = spec_.conv_channels[1];
    Tensor h = map_unary(spec_.activation, dense(params_, "fc", z.full()));
    h = reshape(h, {batch, c2, spec_.h4(), spec_.w4()});
    h = map_unary(spec_.activation,
                  conv2d_transpose(h, params_.use("tconv1.w"), params_.use("tconv1.b"), 2, 1, 1));
    h = conv2d_transpose(h, params_.use("tconv2.w"), params_.use("tconv2.b"), 2, 1, 1);
    return map_unary(Unary::sigmoid, h);
}

// ---------------------------------------------------------------------------
// Classifier / Discriminator
// ---------------------------------------------------------------------------

Classifier::Classifier(ClassifierSpec spec, Rng& rng) : spec_(std::move(spec)) {
    std::size_t in = spec_.input_dim;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        add_dense(params_, "l" + std::to_string(i + 1), in, spec_.hidden[i], rng);
        in = spec_.hidden[i];
    }
    add_dense(params_, "out", in, spec_.classes, rng);
}

Classifier::Classifier(ClassifierSpec spec) : spec_(std::move(spec)) {
    std::size_t in = spec_.input_dim;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        add_dense_zero(params_, "l" + std::to_string(i + 1), in, spec_.hidden[i]);
        in = spec_.hidden[i];
    }
    add_dense_zero(params_, "out", in, spec_.classes);
}

Classifier Classifier::zero_initialized(ClassifierSpec spec) { return Classifier(std::move(spec)); }

Tensor Classifier::probs(const Tensor& input) const {
    if (input.rank() != 2 || input.shape()[1] != spec_.input_dim) {
        throw DimensionError("classifier: input " + shape_to_string(input.shape()) +
                             ", expected [Bx" + std::to_string(spec_.input_dim) + "]");
    }
    Tensor h = input;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        h = map_unary(Unary::relu, dense(params_, "l" + std::to_string(i + 1), h));
    }
    return softmax_rows(dense(params_, "out", h));
}

Discriminator::Discriminator(DiscriminatorSpec spec, Rng& rng) : spec_(std::move(spec)) {
    std::size_t in = spec_.input_dim;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        add_dense(params_, "l" + std::to_string(i + 1), in, spec_.hidden[i], rng);
        in = spec_.hidden[i];
    }
    add_dense(params_, "out", in, 1, rng);
}

Tensor Discriminator::logits(const Tensor& z) const {
    if (z.rank() != 2 || z.shape()[1] != spec_.input_dim) {
        throw DimensionError("discriminator: input " + shape_to_string(z.shape()) +
                             ", expected [Bx" + std::to_string(spec_.input_dim) + "]");
    }
    Tensor h = z;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        h = map_unary(Unary::relu, dense(params_, "l" + std::to_string(i + 1), h));
    }
    return dense(params_, "out", h);
}

Tensor classify_target(const Classifier& f_y, const Tensor& zY, const Tensor& zR) {
    return f_y.probs(concat({zY, zR}, 1));
}

Tensor classify_sensitive(const Classifier& f_s, const Tensor& zS, const Tensor& zR) {
    return f_s.probs(concat({zS, zR}, 1));
}

Tensor opponent_target(const Classifier& f_y_op, const Tensor& zS) { return f_y_op.probs(zS); }

Tensor opponent_sensitive(const Classifier& f_s_op, const Tensor& zY) { return f_s_op.probs(zY); }

Tensor tc_discriminate(const Discriminator& d, const Tensor& zY, const Tensor& zS,
                       const Tensor& zR) {
    return d.logits(concat({zY, zS, zR}, 1));
}

}  // namespace cadvae
