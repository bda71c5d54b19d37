// cadvae — correlation-aware disentangled VAE toolkit CLI.
//
// Subcommands: gen-data, train, eval, counterfactual, traverse,
// export-latents, ablate. Exit codes: 0 ok, 2 flag/config errors,
// 3 I/O errors, 4 divergence, 5 format errors.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "cadvae/data.hpp"
#include "cadvae/editing.hpp"
#include "cadvae/metrics.hpp"
#include "cadvae/trainer.hpp"

namespace fs = std::filesystem;
using namespace cadvae;

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// flat key=value run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
    TrainConfig train;
    BiasSpec bias;
    std::string data_path;
    std::string out_dir;
};

std::vector<std::size_t> parse_size_list(const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
    return out;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    RunConfig rc;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
            line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        line = line.substr(start);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
        }
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        try {
            if (key == "lambda_cmi") rc.train.lambda_cmi = std::stod(value);
            else if (key == "lambda_lri") rc.train.lambda_lri = std::stod(value);
            else if (key == "gamma_tc") rc.train.gamma_tc = std::stod(value);
            else if (key == "lr_main") rc.train.lr_main = std::stod(value);
            else if (key == "lr_opponent") rc.train.lr_opponent = std::stod(value);
            else if (key == "lr_disc") rc.train.lr_disc = std::stod(value);
            else if (key == "batch_size") rc.train.batch_size = std::stoul(value);
            else if (key == "epochs") rc.train.epochs = std::stoul(value);
            else if (key == "d_x") rc.train.layout.d_x = std::stoul(value);
            else if (key == "d_y") rc.train.layout.d_y = std::stoul(value);
            else if (key == "d_s") rc.train.layout.d_s = std::stoul(value);
            else if (key == "d_r") rc.train.layout.d_r = std::stoul(value);
            else if (key == "seed") {
                rc.train.seed = std::stoull(value);
                rc.bias.seed = rc.train.seed;
            } else if (key == "cmi_conditional_variant")
                rc.train.cmi_conditional_variant = value == "1" || value == "true";
            else if (key == "tc_granularity")
                rc.train.tc_granularity =
                    value == "dim" ? PermuteGranularity::per_dimension : PermuteGranularity::block;
            else if (key == "classifier_hidden") rc.train.classifier_hidden = parse_size_list(value);
            else if (key == "disc_hidden") rc.train.disc_hidden = parse_size_list(value);
            else if (key == "bias_rate") rc.bias.bias_rate = std::stod(value);
            else if (key == "jitter_std") rc.bias.jitter_std = std::stod(value);
            else if (key == "image_size") rc.bias.image_size = std::stoul(value);
            else if (key == "num_classes") rc.bias.num_classes = std::stoul(value);
            else if (key == "num_colors") rc.bias.num_colors = std::stoul(value);
            else if (key == "data_path") rc.data_path = value;
            else if (key == "out_dir") rc.out_dir = value;
            else throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" +
                                   key + "'");
        } catch (const std::invalid_argument&) {
            throw ConfigError("config line " + std::to_string(line_no) + ": bad value for '" +
                              key + "'");
        } catch (const std::out_of_range&) {
            throw ConfigError("config line " + std::to_string(line_no) + ": bad value for '" +
                              key + "'");
        }
    }
    return rc;
}

void write_resolved_config(const std::string& path, const TrainConfig& cfg) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << cfg.canonical_text();
    if (!out) throw IoError("write failed for '" + path + "'");
}

MetricsReport evaluate_checkpoint(const TrainState& state, const LabeledDataset& train_ds,
                                  const LabeledDataset& test_ds, std::uint64_t probe_seed,
                                  std::size_t n_eval) {
    ProbeReport probe =
        probe_eval(state.encoder(), train_ds, test_ds, CodeSet::of({Code::Y}), probe_seed);
    FeatureExtractor fx = FeatureExtractor::train(test_ds, probe_seed ^ 0x5eedf00dull);
    PerturbationSpec spec;
    spec.mode = PerturbMode::permute_ys;
    spec.seed = probe_seed ^ 0xfeedbeefull;
    const std::size_t cap = std::min(n_eval, test_ds.count());
    DeltaReport delta =
        delta_metrics(state.encoder(), state.decoder(), test_ds.slice(0, cap), fx, spec);

    MetricsReport report;
    report.accuracy = probe.accuracy;
    report.dp = demographic_parity(probe.table);
    report.eod = equalized_odds(probe.table);
    report.delta_fid = delta.delta_fid;
    report.delta_is = delta.delta_is;
    report.probe_seed = probe_seed;
    report.n_eval = cap;
    return report;
}

std::pair<std::unique_ptr<TrainState>, TrainHistory> run_training(const RunConfig& rc,
                                                                  const LabeledDataset& train_ds,
                                                                  const std::string& out_dir) {
    fs::create_directories(out_dir);
    const std::string log_path = out_dir + "/log.jsonl";
    const std::string ckpt_path = out_dir + "/checkpoint.cadc";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open '" + log_path + "' for writing");

    write_resolved_config(out_dir + "/config.resolved", rc.train);

    auto sink = [&](const EpochStats& st, const TrainState& state) {
        log << epoch_stats_json(st) << "\n";
        log.flush();
        state.save_checkpoint(ckpt_path);  // retained on divergence
    };
    return fit(train_ds, rc.train, nullptr, sink);
}

int dispatch(int argc, char** argv) {
    CLI::App app{"correlation-aware disentangled VAE toolkit"};
    app.require_subcommand(1);

    // ---- gen-data -------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a colored-digit dataset");
    std::string gen_out;
    std::size_t gen_n = 10000;
    BiasSpec gen_spec;
    bool gen_unbiased = false;
    std::string mnist_images, mnist_labels;
    gen->add_option("--out", gen_out, "output dataset path")->required();
    gen->add_option("--n", gen_n, "sample count");
    gen->add_option("--bias-rate", gen_spec.bias_rate, "P(color matches digit)");
    gen->add_option("--jitter", gen_spec.jitter_std, "color jitter std");
    gen->add_option("--size", gen_spec.image_size, "image size (8, 16, 28)");
    gen->add_option("--seed", gen_spec.seed, "generation seed");
    gen->add_flag("--unbiased", gen_unbiased, "uniform color assignment");
    gen->add_option("--mnist-images", mnist_images, "optional IDX image file");
    gen->add_option("--mnist-labels", mnist_labels, "optional IDX label file");

    // ---- train ----------------------------------------------------------
    auto* train = app.add_subcommand("train", "train a model");
    std::string train_config, train_data, train_out;
    train->add_option("--config", train_config, "run config file")->required();
    train->add_option("--data", train_data, "training dataset (overrides data_path)");
    train->add_option("--out", train_out, "output directory (overrides out_dir)");

    // ---- eval -----------------------------------------------------------
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_config, eval_ckpt, eval_train_data, eval_test_data, eval_out;
    std::uint64_t probe_seed = 17;
    std::size_t n_eval = 512;
    eval->add_option("--config", eval_config, "run config file")->required();
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--train-data", eval_train_data, "probe training split")->required();
    eval->add_option("--test-data", eval_test_data, "evaluation split")->required();
    eval->add_option("--out", eval_out, "write MetricsReport JSON here (default stdout)");
    eval->add_option("--probe-seed", probe_seed, "probe seed");
    eval->add_option("--n-eval", n_eval, "delta-metric sample cap");

    // ---- counterfactual -------------------------------------------------
    auto* cf = app.add_subcommand("counterfactual", "latent-code swap grid");
    std::string cf_config, cf_ckpt, cf_data, cf_out;
    std::size_t cf_src = 0, cf_ref = 1;
    cf->add_option("--config", cf_config)->required();
    cf->add_option("--checkpoint", cf_ckpt)->required();
    cf->add_option("--data", cf_data)->required();
    cf->add_option("--source-idx", cf_src);
    cf->add_option("--ref-idx", cf_ref);
    cf->add_option("--out", cf_out, "output directory")->required();

    // ---- traverse -------------------------------------------------------
    auto* tr = app.add_subcommand("traverse", "latent interpolation grid");
    std::string tr_config, tr_ckpt, tr_data, tr_out, tr_mode = "blue";
    std::size_t tr_src = 0, tr_ref = 1;
    tr->add_option("--config", tr_config)->required();
    tr->add_option("--checkpoint", tr_ckpt)->required();
    tr->add_option("--data", tr_data)->required();
    tr->add_option("--mode", tr_mode, "blue (zY x zS) or red (zY x zR, zS replaced)")
        ->check(CLI::IsMember({"blue", "red"}));
    tr->add_option("--source-idx", tr_src);
    tr->add_option("--ref-idx", tr_ref);
    tr->add_option("--out", tr_out, "output directory")->required();

    // ---- export-latents --------------------------------------------------
    auto* ex = app.add_subcommand("export-latents", "posterior means as CSV");
    std::string ex_config, ex_ckpt, ex_data, ex_out;
    ex->add_option("--config", ex_config)->required();
    ex->add_option("--checkpoint", ex_ckpt)->required();
    ex->add_option("--data", ex_data)->required();
    ex->add_option("--out", ex_out, "output CSV path")->required();

    // ---- ablate -----------------------------------------------------------
    auto* ab = app.add_subcommand("ablate", "train full and ablated variants");
    std::string ab_config, ab_data, ab_test, ab_out, ab_drop;
    ab->add_option("--config", ab_config)->required();
    ab->add_option("--data", ab_data, "training dataset")->required();
    ab->add_option("--test-data", ab_test, "evaluation dataset")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--drop", ab_drop, "term to zero")
        ->required()
        ->check(CLI::IsMember({"cmi", "lri", "tc", "all"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help text or the flag error
        return code == 0 ? 0 : 2;
    }

    if (gen->parsed()) {
        LabeledDataset ds;
        if (!mnist_images.empty() || !mnist_labels.empty()) {
            if (mnist_images.empty() || mnist_labels.empty()) {
                throw ConfigError("--mnist-images and --mnist-labels must be given together");
            }
            std::size_t rows = 0, cols = 0;
            auto glyphs = load_idx_images(mnist_images, rows, cols);
            auto labels = load_idx_labels(mnist_labels);
            if (glyphs.size() != labels.size()) {
                throw FormatError("IDX image and label counts disagree");
            }
            if (gen_n < glyphs.size()) {
                glyphs.resize(gen_n);
                labels.resize(gen_n);
            }
            ds = colorize_glyphs(glyphs, labels, rows, cols, gen_spec, gen_unbiased);
        } else {
            ds = gen_unbiased ? generate_unbiased_test(gen_n, gen_spec)
                              : generate_colored_digits(gen_n, gen_spec);
        }
        save_dataset(gen_out, ds);
        std::size_t matches = 0;
        for (std::size_t i = 0; i < ds.count(); ++i)
            if (ds.y[i] % ds.num_groups == ds.s[i]) ++matches;
        std::cout << "wrote " << ds.count() << " samples to " << gen_out
                  << " empirical_bias_rate="
                  << fmt_double(static_cast<double>(matches) / static_cast<double>(ds.count()))
                  << "\n";
        return 0;
    }

    if (train->parsed()) {
        RunConfig rc = parse_run_config(train_config);
        if (!train_data.empty()) rc.data_path = train_data;
        if (!train_out.empty()) rc.out_dir = train_out;
        if (rc.data_path.empty() || rc.out_dir.empty()) {
            throw ConfigError("train: data_path and out_dir must be set (config or flags)");
        }
        LabeledDataset ds = load_dataset(rc.data_path);
        run_training(rc, ds, rc.out_dir);
        std::cout << "training complete; artifacts in " << rc.out_dir << "\n";
        return 0;
    }

    auto load_state = [](const std::string& config_path, const std::string& ckpt,
                         const LabeledDataset& dims_ds) {
        RunConfig rc = parse_run_config(config_path);
        return TrainState::load_checkpoint(ckpt, rc.train, dims_ds.channels(), dims_ds.height(),
                                           dims_ds.width(), dims_ds.num_classes,
                                           dims_ds.num_groups);
    };

    if (eval->parsed()) {
        LabeledDataset train_ds = load_dataset(eval_train_data);
        LabeledDataset test_ds = load_dataset(eval_test_data);
        TrainState state = load_state(eval_config, eval_ckpt, train_ds);
        MetricsReport report = evaluate_checkpoint(state, train_ds, test_ds, probe_seed, n_eval);
        const std::string json = metrics_report_json(report);
        if (eval_out.empty()) {
            std::cout << json << "\n";
        } else {
            std::ofstream out(eval_out, std::ios::trunc);
            if (!out) throw IoError("cannot open '" + eval_out + "' for writing");
            out << json << "\n";
        }
        return 0;
    }

    if (cf->parsed()) {
        LabeledDataset ds = load_dataset(cf_data);
        TrainState state = load_state(cf_config, cf_ckpt, ds);
        if (cf_src >= ds.count() || cf_ref >= ds.count()) {
            throw UsageError("counterfactual: sample index out of range");
        }
        fs::create_directories(cf_out);
        EditGrid grid = counterfactual(state.encoder(), state.decoder(), ds.image(cf_src),
                                       ds.image(cf_ref), default_counterfactual_masks());
        const std::string path = cf_out + "/counterfactual_" + std::to_string(cf_src) + "_" +
                                 std::to_string(cf_ref) + ".ppm";
        render_grid(grid, path);
        std::cout << "wrote " << path << "\n";
        return 0;
    }

    if (tr->parsed()) {
        LabeledDataset ds = load_dataset(tr_data);
        TrainState state = load_state(tr_config, tr_ckpt, ds);
        if (tr_src >= ds.count() || tr_ref >= ds.count()) {
            throw UsageError("traverse: sample index out of range");
        }
        fs::create_directories(tr_out);
        const bool red = tr_mode == "red";
        EditGrid grid = traversal_grid(state.encoder(), state.decoder(), ds.image(tr_src),
                                       ds.image(tr_ref), default_lambdas_ys(),
                                       red ? default_lambdas_r() : default_lambdas_ys(), red);
        const std::string path = tr_out + "/traverse_" + tr_mode + "_" + std::to_string(tr_src) +
                                 "_" + std::to_string(tr_ref) + ".ppm";
        render_grid(grid, path);
        std::cout << "wrote " << path << "\n";
        return 0;
    }

    if (ex->parsed()) {
        LabeledDataset ds = load_dataset(ex_data);
        TrainState state = load_state(ex_config, ex_ckpt, ds);
        Tensor means = posterior_means(state.encoder(), ds);
        const std::size_t total = state.config().layout.total();
        std::ofstream out(ex_out, std::ios::trunc);
        if (!out) throw IoError("cannot open '" + ex_out + "' for writing");
        out << "index,y,s";
        for (std::size_t j = 0; j < total; ++j) out << ",z" << j;
        out << "\n";
        for (std::size_t i = 0; i < ds.count(); ++i) {
            out << i << "," << int(ds.y[i]) << "," << int(ds.s[i]);
            for (std::size_t j = 0; j < total; ++j)
                out << "," << fmt_double(means.values()[i * total + j]);
            out << "\n";
        }
        std::cout << "wrote " << ex_out << "\n";
        return 0;
    }

    if (ab->parsed()) {
        RunConfig rc = parse_run_config(ab_config);
        LabeledDataset train_ds = load_dataset(ab_data);
        LabeledDataset test_ds = load_dataset(ab_test);
        fs::create_directories(ab_out);

        RunConfig ablated = rc;
        if (ab_drop == "cmi" || ab_drop == "all") ablated.train.lambda_cmi = 0.0;
        if (ab_drop == "lri" || ab_drop == "all") ablated.train.lambda_lri = 0.0;
        if (ab_drop == "tc" || ab_drop == "all") ablated.train.gamma_tc = 0.0;

        auto full_result = run_training(rc, train_ds, ab_out + "/full");
        auto ablated_result = run_training(ablated, train_ds, ab_out + "/ablated");

        MetricsReport full_metrics =
            evaluate_checkpoint(*full_result.first, train_ds, test_ds, 17, 512);
        MetricsReport ablated_metrics =
            evaluate_checkpoint(*ablated_result.first, train_ds, test_ds, 17, 512);

        std::ostringstream os;
        os << "{\"drop\":\"" << ab_drop << "\",\"full\":" << metrics_report_json(full_metrics)
           << ",\"ablated\":" << metrics_report_json(ablated_metrics) << "}";
        const std::string path = ab_out + "/ablation.json";
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path + "' for writing");
        out << os.str() << "\n";
        std::cout << os.str() << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const RangeError& e) {
        std::cerr << "range error: " << e.what() << "\n";
        return 2;
    } catch (const LabelError& e) {
        std::cerr << "label error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
