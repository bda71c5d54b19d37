#include "cadvae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cadvae/sha256.hpp"

namespace cadvae {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void check_finite_params(const ParamSet& ps, const char* set_name) {
    for (const auto& [name, t] : ps) {
        for (double v : t.values()) {
            if (!std::isfinite(v)) {
                throw DivergenceError(std::string(set_name) + "/" + name);
            }
        }
    }
}

void require_zero_grads(const ParamSet& ps, const char* what) {
    if (!ps.all_grads_zero()) {
        throw ContractError(std::string("routing violation: gradients present on ") + what);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (lambda_cmi < 0.0 || lambda_cmi > 10.0) {
        throw ConfigError("lambda_cmi " + std::to_string(lambda_cmi) + " outside [0, 10]");
    }
    if (lambda_lri < 0.0 || lambda_lri > 100.0) {
        throw ConfigError("lambda_lri " + std::to_string(lambda_lri) + " outside [0, 100]");
    }
    if (gamma_tc < 0.0) throw ConfigError("gamma_tc must be >= 0");
    if (lr_main <= 0.0 || lr_opponent <= 0.0 || lr_disc <= 0.0) {
        throw ConfigError("learning rates must be positive");
    }
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    layout.validate();
}

std::string TrainConfig::canonical_text() const {
    std::ostringstream os;
    os << "lambda_cmi=" << fmt_double(lambda_cmi) << '\n'
       << "lambda_lri=" << fmt_double(lambda_lri) << '\n'
       << "gamma_tc=" << fmt_double(gamma_tc) << '\n'
       << "lr_main=" << fmt_double(lr_main) << '\n'
       << "lr_opponent=" << fmt_double(lr_opponent) << '\n'
       << "lr_disc=" << fmt_double(lr_disc) << '\n'
       << "batch_size=" << batch_size << '\n'
       << "epochs=" << epochs << '\n'
       << "d_x=" << layout.d_x << '\n'
       << "d_y=" << layout.d_y << '\n'
       << "d_s=" << layout.d_s << '\n'
       << "d_r=" << layout.d_r << '\n'
       << "seed=" << seed << '\n'
       << "cmi_conditional_variant=" << (cmi_conditional_variant ? 1 : 0) << '\n'
       << "tc_granularity=" << (tc_granularity == PermuteGranularity::block ? "block" : "dim")
       << '\n';
    os << "classifier_hidden=";
    for (std::size_t i = 0; i < classifier_hidden.size(); ++i)
        os << (i ? "," : "") << classifier_hidden[i];
    os << "\ndisc_hidden=";
    for (std::size_t i = 0; i < disc_hidden.size(); ++i) os << (i ? "," : "") << disc_hidden[i];
    os << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void AdamState::init_like(const ParamSet& ps) {
    m.clear();
    v.clear();
    for (const auto& [name, t] : ps) {
        m[name].assign(t.size(), 0.0);
        v[name].assign(t.size(), 0.0);
    }
}

void AdamState::step(ParamSet& ps, double lr, std::uint64_t t, const AdamParams& hp) {
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
    for (const auto& [name, tensor] : ps) {
        const std::vector<double>& g = tensor.grad();
        std::vector<double>& mi = m.at(name);
        std::vector<double>& vi = v.at(name);
        std::vector<double> data = tensor.values();
        for (std::size_t i = 0; i < data.size(); ++i) {
            mi[i] = hp.beta1 * mi[i] + (1.0 - hp.beta1) * g[i];
            vi[i] = hp.beta2 * vi[i] + (1.0 - hp.beta2) * g[i] * g[i];
            const double mhat = mi[i] / bc1;
            const double vhat = vi[i] / bc2;
            data[i] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
        }
        ps.rebind(name, Tensor::from_data(tensor.shape(), std::move(data), true));
    }
}

// ---------------------------------------------------------------------------
// TrainState
// ---------------------------------------------------------------------------

TrainState::TrainState(TrainConfig config, std::size_t channels, std::size_t height,
                       std::size_t width, std::size_t num_classes, std::size_t num_groups)
    : config_(std::move(config)),
      channels_(channels),
      height_(height),
      width_(width),
      num_classes_(num_classes),
      num_groups_(num_groups),
      rng_(config_.seed) {
    config_.validate();
    const LatentLayout& lay = config_.layout;

    EncoderSpec enc;
    enc.channels = channels;
    enc.height = height;
    enc.width = width;
    enc.layout = lay;
    encoder_ = std::make_unique<Encoder>(enc, rng_);
    decoder_ = std::make_unique<Decoder>(DecoderSpec::mirror_of(enc), rng_);

    const std::size_t r_extra = config_.cmi_conditional_variant ? lay.d_r : 0;
    f_y_ = std::make_unique<Classifier>(
        ClassifierSpec{lay.d_y + lay.d_r, config_.classifier_hidden, num_classes}, rng_);
    f_s_ = std::make_unique<Classifier>(
        ClassifierSpec{lay.d_s + lay.d_r, config_.classifier_hidden, num_groups}, rng_);
    f_y_op_ = std::make_unique<Classifier>(
        ClassifierSpec{lay.d_s + r_extra, config_.classifier_hidden, num_classes}, rng_);
    f_s_op_ = std::make_unique<Classifier>(
        ClassifierSpec{lay.d_y + r_extra, config_.classifier_hidden, num_groups}, rng_);
    disc_ = std::make_unique<Discriminator>(
        DiscriminatorSpec{lay.d_y + lay.d_s + lay.d_r, config_.disc_hidden}, rng_);

    init_optimizers();
}

void TrainState::init_optimizers() {
    // Entry names repeat across sets ("l1.w" in every classifier), so the
    // shared moment stores key by "<set>/<entry>".
    for (auto& [set_name, ps] : param_sets()) {
        AdamState* target = nullptr;
        if (set_name == "phi" || set_name == "theta" || set_name == "w_y" || set_name == "w_s") {
            target = &adam_main_;
        } else if (set_name == "w_y_op" || set_name == "w_s_op") {
            target = &adam_opponent_;
        } else {
            target = &adam_disc_;
        }
        for (const auto& [name, t] : *ps) {
            target->m[set_name + "/" + name].assign(t.size(), 0.0);
            target->v[set_name + "/" + name].assign(t.size(), 0.0);
        }
    }
}

std::vector<std::pair<std::string, ParamSet*>> TrainState::param_sets() {
    return {{"phi", &encoder_->params()},     {"theta", &decoder_->params()},
            {"w_y", &f_y_->params()},         {"w_s", &f_s_->params()},
            {"w_y_op", &f_y_op_->params()},   {"w_s_op", &f_s_op_->params()},
            {"disc", &disc_->params()}};
}

std::vector<std::pair<std::string, const ParamSet*>> TrainState::param_sets() const {
    return {{"phi", &encoder_->params()},     {"theta", &decoder_->params()},
            {"w_y", &f_y_->params()},         {"w_s", &f_s_->params()},
            {"w_y_op", &f_y_op_->params()},   {"w_s_op", &f_s_op_->params()},
            {"disc", &disc_->params()}};
}

namespace {

// Adam over a list of (prefix, set) pairs sharing one moment store.
void step_group(AdamState& adam, std::vector<std::pair<std::string, ParamSet*>> sets, double lr,
                std::uint64_t t, const AdamParams& hp) {
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
    for (auto& [prefix, ps] : sets) {
        for (const auto& [name, tensor] : *ps) {
            const std::string key = prefix + "/" + name;
            const std::vector<double>& g = tensor.grad();
            std::vector<double>& mi = adam.m.at(key);
            std::vector<double>& vi = adam.v.at(key);
            std::vector<double> data = tensor.values();
            for (std::size_t i = 0; i < data.size(); ++i) {
                mi[i] = hp.beta1 * mi[i] + (1.0 - hp.beta1) * g[i];
                vi[i] = hp.beta2 * vi[i] + (1.0 - hp.beta2) * g[i] * g[i];
                data[i] -= lr * (mi[i] / bc1) / (std::sqrt(vi[i] / bc2) + hp.eps);
            }
            ps->rebind(name, Tensor::from_data(tensor.shape(), std::move(data), true));
        }
    }
}

}  // namespace

LossReport TrainState::train_step(const Batch& batch) {
    const std::size_t b = batch.y.size();
    const LatentLayout& lay = config_.layout;
    LossReport report;

    // ---- Phase A: one forward pass, combined main objective -------------
    PosteriorBatch post = encoder_->encode(batch.x);
    std::vector<double> noise(b * lay.total());
    for (double& v : noise) v = rng_.normal();
    PartitionBatch z =
        reparameterize(post, Tensor::from_data({b, lay.total()}, std::move(noise), false), lay);

    auto ensure_finite = [](double v, const char* term) {
        if (!std::isfinite(v)) throw DivergenceError(term);
        return v;
    };

    Tensor recon_mean = decoder_->decode(z);
    auto [recon, kl] = elbo_loss(batch.x, recon_mean, post);
    report.recon = ensure_finite(recon.value(), "recon");
    report.kl = ensure_finite(kl.value(), "kl");
    auto [l_y, l_s] =
        joint_classification_losses(*f_y_, *f_s_, z.zy, z.zs, z.zr, batch.y, batch.s);
    report.l_y = ensure_finite(l_y.value(), "l_y");
    report.l_s = ensure_finite(l_s.value(), "l_s");

    Tensor total_main = add(add(recon, kl), add(l_y, l_s));
    if (config_.lambda_cmi != 0.0) {
        FreezeGuard g1(f_y_op_->params());
        FreezeGuard g2(f_s_op_->params());
        Tensor l_cmi = config_.cmi_conditional_variant
                           ? cmi_loss(*f_y_op_, *f_s_op_, z.zy, z.zs, &z.zr)
                           : cmi_loss(*f_y_op_, *f_s_op_, z.zy, z.zs);
        report.l_cmi = ensure_finite(l_cmi.value(), "l_cmi");
        total_main = add(total_main, affine(l_cmi, config_.lambda_cmi, 0.0));
    }
    if (config_.lambda_lri != 0.0) {
        FreezeGuard g1(f_y_->params());
        FreezeGuard g2(f_s_->params());
        Tensor l_lri = lri_loss(*f_y_, *f_s_, z.zy, z.zs, z.zr, batch.y, batch.s);
        report.l_lri = ensure_finite(l_lri.value(), "l_lri");
        total_main = add(total_main, affine(l_lri, config_.lambda_lri, 0.0));
    }
    std::optional<TcLosses> tc;
    {
        const std::uint64_t perm_seed = rng_.next_u64();
        tc = tc_losses(*disc_, z, perm_seed, config_.tc_granularity);
        report.l_tc = ensure_finite(tc->l_tc.value(), "l_tc");
        if (config_.gamma_tc != 0.0) {
            total_main = add(total_main, affine(tc->l_tc, config_.gamma_tc, 0.0));
        }
    }
    report.total_main = report.recon + report.kl + report.l_y + report.l_s +
                        config_.lambda_cmi * report.l_cmi + config_.lambda_lri * report.l_lri +
                        config_.gamma_tc * report.l_tc;
    if (const char* term = report.first_non_finite()) throw DivergenceError(term);

    backward(total_main);
    if (config_.routing_checks) {
        require_zero_grads(f_y_op_->params(), "w_y_op after phase A");
        require_zero_grads(f_s_op_->params(), "w_s_op after phase A");
        require_zero_grads(disc_->params(), "disc after phase A");
    }
    const std::uint64_t t = step_ + 1;
    step_group(adam_main_,
               {{"phi", &encoder_->params()},
                {"theta", &decoder_->params()},
                {"w_y", &f_y_->params()},
                {"w_s", &f_s_->params()}},
               config_.lr_main, t, adam_params_);

    // ---- Phase B: opponents and discriminator on detached latents -------
    Tensor zy_det = stop_gradient(z.zy);
    Tensor zs_det = stop_gradient(z.zs);
    Tensor zr_det = stop_gradient(z.zr);
    {
        std::pair<Tensor, Tensor> opp =
            config_.cmi_conditional_variant
                ? opponent_losses(*f_y_op_, *f_s_op_, concat({zy_det, zr_det}, 1),
                                  concat({zs_det, zr_det}, 1), batch.y, batch.s)
                : opponent_losses(*f_y_op_, *f_s_op_, zy_det, zs_det, batch.y, batch.s);
        report.l_y_op = opp.first.value();
        report.l_s_op = opp.second.value();
        Tensor opp_total = add(opp.first, opp.second);
        backward(opp_total);
        if (config_.routing_checks) {
            require_zero_grads(encoder_->params(), "phi after phase B opponents");
            require_zero_grads(decoder_->params(), "theta after phase B opponents");
        }
        step_group(adam_opponent_,
                   {{"w_y_op", &f_y_op_->params()}, {"w_s_op", &f_s_op_->params()}},
                   config_.lr_opponent, t, adam_params_);
    }
    {
        report.l_disc = tc->l_disc.value();
        backward(tc->l_disc);
        if (config_.routing_checks) {
            require_zero_grads(encoder_->params(), "phi after discriminator step");
        }
        step_group(adam_disc_, {{"disc", &disc_->params()}}, config_.lr_disc, t, adam_params_);
    }

    if (const char* term = report.first_non_finite()) throw DivergenceError(term);
    for (auto& [set_name, ps] : param_sets()) check_finite_params(*ps, set_name.c_str());
    ++step_;
    return report;
}

Tensor TrainState::encode_means(const LabeledDataset& ds, std::size_t max_rows) const {
    const std::size_t n = max_rows == 0 ? ds.count() : std::min(max_rows, ds.count());
    const std::size_t total = config_.layout.total();
    std::vector<double> out(n * total);
    FreezeGuard freeze(encoder_->params());
    const std::size_t chunk = 256;
    for (std::size_t off = 0; off < n; off += chunk) {
        const std::size_t m = std::min(chunk, n - off);
        PosteriorBatch post = encoder_->encode(ds.slice(off, m).images);
        std::copy(post.mu.values().begin(), post.mu.values().end(), out.begin() + off * total);
    }
    return Tensor::from_data({n, total}, std::move(out), false);
}

std::pair<double, double> TrainState::opponent_accuracy(const LabeledDataset& ds,
                                                        std::size_t max_rows) const {
    const std::size_t n = max_rows == 0 ? ds.count() : std::min(max_rows, ds.count());
    Tensor means = encode_means(ds, n);
    const LatentLayout& lay = config_.layout;
    auto parts = split(means, {lay.d_x, lay.d_y, lay.d_s, lay.d_r}, 1);
    Tensor zy = parts[1], zs = parts[2], zr = parts[3];
    Tensor in_y_op = config_.cmi_conditional_variant ? concat({zs, zr}, 1) : zs;
    Tensor in_s_op = config_.cmi_conditional_variant ? concat({zy, zr}, 1) : zy;

    FreezeGuard g1(f_y_op_->params());
    FreezeGuard g2(f_s_op_->params());
    Tensor py = f_y_op_->probs(in_y_op);
    Tensor ps = f_s_op_->probs(in_s_op);

    auto accuracy = [n](const Tensor& probs, const std::vector<std::uint8_t>& labels) {
        const std::size_t c = probs.shape()[1];
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = probs.values().data() + i * c;
            std::size_t best = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (row[j] > row[best]) best = j;
            if (best == labels[i]) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(n);
    };
    return {accuracy(py, ds.y), accuracy(ps, ds.s)};
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

namespace {

void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}
void put_u16(std::string& out, std::uint16_t v) { put_bytes(out, &v, 2); }
void put_u32(std::string& out, std::uint32_t v) { put_bytes(out, &v, 4); }
void put_u64(std::string& out, std::uint64_t v) { put_bytes(out, &v, 8); }

void put_entry(std::string& out, const std::string& name, const std::vector<std::size_t>& shape,
               const std::vector<double>& data) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    out.push_back(static_cast<char>(shape.size()));
    for (std::size_t e : shape) put_u32(out, static_cast<std::uint32_t>(e));
    put_bytes(out, data.data(), data.size() * 8);
}

struct CheckpointReader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw FormatError(std::string("checkpoint truncated reading ") + what +
                              " at offset " + std::to_string(pos));
        }
    }
    void read(void* dst, std::size_t n, const char* what) {
        need(n, what);
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
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
    std::uint64_t u64(const char* what) {
        std::uint64_t v;
        read(&v, 8, what);
        return v;
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        read(&v, 1, what);
        return v;
    }

    std::pair<std::string, std::pair<std::vector<std::size_t>, std::vector<double>>> entry() {
        const std::uint16_t len = u16("entry name length");
        need(len, "entry name");
        std::string name(buf.data() + pos, len);
        pos += len;
        const std::uint8_t rank = u8("entry rank");
        std::vector<std::size_t> shape(rank);
        std::size_t count = 1;
        for (std::uint8_t i = 0; i < rank; ++i) {
            shape[i] = u32("entry extent");
            if (shape[i] == 0 || count > buf.size() / std::max<std::size_t>(shape[i], 1)) {
                throw FormatError("implausible entry extents at offset " + std::to_string(pos));
            }
            count *= shape[i];
        }
        // validate against the remaining bytes before allocating
        need(count * 8, "entry payload");
        std::vector<double> data(count);
        read(data.data(), count * 8, "entry payload");
        return {name, {std::move(shape), std::move(data)}};
    }
};

}  // namespace

void TrainState::save_checkpoint(const std::string& path) const {
    std::string buf;
    buf.append("CADC");
    put_u16(buf, 1);
    const auto digest = sha256(config_.canonical_text());
    put_bytes(buf, digest.data(), digest.size());

    const auto sets = param_sets();
    std::uint32_t count = 0;
    for (const auto& [set_name, ps] : sets) count += static_cast<std::uint32_t>(ps->size());
    put_u32(buf, count);
    for (const auto& [set_name, ps] : sets) {
        for (const auto& [name, t] : *ps) {
            put_entry(buf, set_name + "/" + name, t.shape(), t.values());
        }
    }

    // Optimizer moments in the same framing, names suffixed #m / #v.
    put_u32(buf, 2 * count);
    auto moments_of = [this](const std::string& set_name) -> const AdamState& {
        if (set_name == "w_y_op" || set_name == "w_s_op") return adam_opponent_;
        if (set_name == "disc") return adam_disc_;
        return adam_main_;
    };
    for (const auto& [set_name, ps] : sets) {
        const AdamState& adam = moments_of(set_name);
        for (const auto& [name, t] : *ps) {
            const std::string key = set_name + "/" + name;
            put_entry(buf, key + "#m", t.shape(), adam.m.at(key));
            put_entry(buf, key + "#v", t.shape(), adam.v.at(key));
        }
    }

    put_u64(buf, step_);
    const auto rng_state = rng_.state();
    put_bytes(buf, rng_state.data(), rng_state.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

TrainState TrainState::load_checkpoint(const std::string& path, const TrainConfig& config,
                                       std::size_t channels, std::size_t height,
                                       std::size_t width, std::size_t num_classes,
                                       std::size_t num_groups) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    CheckpointReader r{buf};
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, "CADC", 4) != 0) throw FormatError("bad checkpoint magic at offset 0");
    const std::uint16_t version = r.u16("version");
    if (version != 1) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    std::array<std::uint8_t, 32> digest;
    r.read(digest.data(), 32, "config digest");
    if (digest != sha256(config.canonical_text())) {
        throw FormatError("checkpoint config digest does not match the supplied config");
    }

    TrainState state(config, channels, height, width, num_classes, num_groups);

    const std::uint32_t count = r.u32("entry count");
    std::map<std::string, ParamSet*> by_name;
    for (auto& [set_name, ps] : state.param_sets()) by_name[set_name] = ps;
    std::uint32_t expected = 0;
    for (auto& [set_name, ps] : state.param_sets()) expected += ps->size();
    if (count != expected) {
        throw FormatError("checkpoint holds " + std::to_string(count) + " entries, model needs " +
                          std::to_string(expected));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, payload] = r.entry();
        const auto slash = name.find('/');
        if (slash == std::string::npos || !by_name.count(name.substr(0, slash))) {
            throw FormatError("unknown checkpoint entry '" + name + "'");
        }
        ParamSet* ps = by_name.at(name.substr(0, slash));
        const std::string entry_name = name.substr(slash + 1);
        if (ps->at(entry_name).shape() != payload.first) {
            throw FormatError("shape mismatch for checkpoint entry '" + name + "'");
        }
        ps->rebind(entry_name, Tensor::from_data(payload.first, std::move(payload.second), true));
    }

    const std::uint32_t moment_count = r.u32("moment count");
    if (moment_count != 2 * count) {
        throw FormatError("checkpoint holds " + std::to_string(moment_count) +
                          " moment entries, expected " + std::to_string(2 * count));
    }
    auto moments_of = [&state](const std::string& set_name) -> AdamState& {
        if (set_name == "w_y_op" || set_name == "w_s_op") return state.adam_opponent_;
        if (set_name == "disc") return state.adam_disc_;
        return state.adam_main_;
    };
    for (std::uint32_t i = 0; i < moment_count; ++i) {
        auto [name, payload] = r.entry();
        const auto hash_pos = name.rfind('#');
        if (hash_pos == std::string::npos || hash_pos + 2 != name.size()) {
            throw FormatError("malformed moment entry '" + name + "'");
        }
        const std::string key = name.substr(0, hash_pos);
        const char kind = name[hash_pos + 1];
        const auto slash = key.find('/');
        if (slash == std::string::npos) throw FormatError("malformed moment entry '" + name + "'");
        AdamState& adam = moments_of(key.substr(0, slash));
        auto& store = kind == 'm' ? adam.m : adam.v;
        auto it = store.find(key);
        if (it == store.end()) throw FormatError("unknown moment entry '" + name + "'");
        if (it->second.size() != payload.second.size()) {
            throw FormatError("moment size mismatch for '" + name + "'");
        }
        it->second = std::move(payload.second);
    }

    state.step_ = r.u64("step counter");
    std::array<std::uint8_t, 16> rng_state;
    r.read(rng_state.data(), 16, "rng state");
    state.rng_.set_state(rng_state);
    if (r.pos != buf.size()) {
        throw FormatError("trailing bytes at offset " + std::to_string(r.pos));
    }
    return state;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

std::pair<std::unique_ptr<TrainState>, TrainHistory> fit(const LabeledDataset& train,
                                                         const TrainConfig& config,
                                                         const LabeledDataset* eval_ds,
                                                         const EpochSink& sink) {
    config.validate();
    auto state = std::make_unique<TrainState>(config, train.channels(), train.height(),
                                              train.width(), train.num_classes, train.num_groups);
    TrainHistory history;
    const std::size_t probe_rows = 2048;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto batches = batch_iter(train, config.batch_size, mix_seed(config.seed, epoch));
        LossReport sum;
        for (const Batch& batch : batches) {
            LossReport r = state->train_step(batch);
            sum.recon += r.recon;
            sum.kl += r.kl;
            sum.l_y += r.l_y;
            sum.l_s += r.l_s;
            sum.l_cmi += r.l_cmi;
            sum.l_lri += r.l_lri;
            sum.l_tc += r.l_tc;
            sum.l_y_op += r.l_y_op;
            sum.l_s_op += r.l_s_op;
            sum.l_disc += r.l_disc;
            sum.total_main += r.total_main;
            history.steps.push_back(r);
        }
        const double inv = 1.0 / static_cast<double>(batches.size());
        EpochStats st;
        st.epoch = epoch + 1;
        st.mean_losses = {sum.recon * inv, sum.kl * inv,     sum.l_y * inv,    sum.l_s * inv,
                          sum.l_cmi * inv, sum.l_lri * inv,  sum.l_tc * inv,   sum.l_y_op * inv,
                          sum.l_s_op * inv, sum.l_disc * inv, sum.total_main * inv};
        const LabeledDataset& probe_set = eval_ds ? *eval_ds : train;
        auto [acc_y, acc_s] = state->opponent_accuracy(probe_set, probe_rows);
        st.acc_y_op = acc_y;
        st.acc_s_op = acc_s;
        history.epochs.push_back(st);
        if (sink) sink(st, *state);
    }
    return {std::move(state), std::move(history)};
}

std::string epoch_stats_json(const EpochStats& st) {
    std::ostringstream os;
    const LossReport& l = st.mean_losses;
    os << "{\"epoch\":" << st.epoch << ",\"recon\":" << fmt_double(l.recon)
       << ",\"kl\":" << fmt_double(l.kl) << ",\"l_y\":" << fmt_double(l.l_y)
       << ",\"l_s\":" << fmt_double(l.l_s) << ",\"l_cmi\":" << fmt_double(l.l_cmi)
       << ",\"l_lri\":" << fmt_double(l.l_lri) << ",\"l_tc\":" << fmt_double(l.l_tc)
       << ",\"l_y_op\":" << fmt_double(l.l_y_op) << ",\"l_s_op\":" << fmt_double(l.l_s_op)
       << ",\"l_disc\":" << fmt_double(l.l_disc) << ",\"total_main\":" << fmt_double(l.total_main)
       << ",\"acc_y_op\":" << fmt_double(st.acc_y_op)
       << ",\"acc_s_op\":" << fmt_double(st.acc_s_op) << "}";
    return os.str();
}

}  // namespace cadvae
