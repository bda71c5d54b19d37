#pragma once

#include <array>
#include <vector>

#include "cadvae/latent.hpp"
#include "cadvae/param_set.hpp"
#include "cadvae/rng.hpp"
#include "cadvae/tensor.hpp"

namespace cadvae {

// Desk-scale parameterizations: a two-conv encoder with a dense posterior
// head, a mirrored decoder, 2-hidden-layer MLP classifiers and a 3-hidden-
// layer discriminator. Widths are chosen to train on 8x8..28x28 colored
// digits in minutes; there is no residual backbone here.

struct EncoderSpec {
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::array<std::size_t, 2> conv_channels{16, 32};
    LatentLayout layout;
    Unary activation = Unary::relu;

    std::size_t conv_out(std::size_t n) const { return (n + 2 - 3) / 2 + 1; }  // k=3 s=2 p=1
    std::size_t h2() const { return conv_out(height); }
    std::size_t w2() const { return conv_out(width); }
    std::size_t h4() const { return conv_out(h2()); }
    std::size_t w4() const { return conv_out(w2()); }
    std::size_t flat_dim() const { return conv_channels[1] * h4() * w4(); }
};

struct DecoderSpec {
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::array<std::size_t, 2> conv_channels{16, 32};  // mirrors the encoder
    LatentLayout layout;
    Unary activation = Unary::relu;

    std::size_t conv_out(std::size_t n) const { return (n + 2 - 3) / 2 + 1; }
    std::size_t h4() const { return conv_out(conv_out(height)); }
    std::size_t w4() const { return conv_out(conv_out(width)); }
    std::size_t flat_dim() const { return conv_channels[1] * h4() * w4(); }

    static DecoderSpec mirror_of(const EncoderSpec& e) {
        return DecoderSpec{e.channels, e.height, e.width, e.conv_channels, e.layout, e.activation};
    }
};

struct ClassifierSpec {
    std::size_t input_dim = 64;
    std::vector<std::size_t> hidden{64, 64};
    std::size_t classes = 10;
};

struct DiscriminatorSpec {
    std::size_t input_dim = 96;  // d_y + d_s + d_r
    std::vector<std::size_t> hidden{128, 128, 128};
};

// Glorot-uniform weight in [-sqrt(6/(fan_in+fan_out)), +...], zero bias.
Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out,
                      Rng& rng);

class Encoder {
  public:
    Encoder(EncoderSpec spec, Rng& rng);

    // x: [B x C x H x W] -> per-sample mu / clamped log_var of layout total.
    PosteriorBatch encode(const Tensor& x) const;

    const EncoderSpec& spec() const { return spec_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

  private:
    EncoderSpec spec_;
    ParamSet params_;
};

class Decoder {
  public:
    Decoder(DecoderSpec spec, Rng& rng);

    // Latent partition batch -> Bernoulli means in (0, 1), input image shape.
    Tensor decode(const PartitionBatch& z) const;

    const DecoderSpec& spec() const { return spec_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

  private:
    DecoderSpec spec_;
    ParamSet params_;
};

class Classifier {
  public:
    Classifier(ClassifierSpec spec, Rng& rng);
    static Classifier zero_initialized(ClassifierSpec spec);

    // [B x input_dim] -> softmax probability rows [B x classes].
    Tensor probs(const Tensor& input) const;

    const ClassifierSpec& spec() const { return spec_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

  private:
    Classifier(ClassifierSpec spec);  // zero init
    ClassifierSpec spec_;
    ParamSet params_;
};

class Discriminator {
  public:
    Discriminator(DiscriminatorSpec spec, Rng& rng);

    // [B x input_dim] -> one unbounded logit per sample, shape [B x 1].
    Tensor logits(const Tensor& z) const;

    const DiscriminatorSpec& spec() const { return spec_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

  private:
    DiscriminatorSpec spec_;
    ParamSet params_;
};

// Prediction heads of the objective: f_y(z_Y, z_R), f_s(z_S, z_R) and the
// single-code opponents.
Tensor classify_target(const Classifier& f_y, const Tensor& zY, const Tensor& zR);
Tensor classify_sensitive(const Classifier& f_s, const Tensor& zS, const Tensor& zR);
Tensor opponent_target(const Classifier& f_y_op, const Tensor& zS);
Tensor opponent_sensitive(const Classifier& f_s_op, const Tensor& zY);
Tensor tc_discriminate(const Discriminator& d, const Tensor& zY, const Tensor& zS,
                       const Tensor& zR);

}  // namespace cadvae
