// cellgan command-line interface.
//
// Subcommands:
//   maketoy   generate the procedural toy-cell dataset
//   train     train a conditional GAN on an image-folder dataset
//   sample    draw images from a checkpoint's EMA generator
//   fid       per-class Frechet distance between two datasets
//   augbench  k-fold classifier augmentation benchmark
//
// Exit codes: 0 success, 1 runtime/numerical failure, 2 configuration or
// validation failure. Every command is deterministic given its flags: re-runs
// produce byte-identical primary outputs (timing columns excepted).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cellgan/data.hpp"
#include "cellgan/evaluation.hpp"
#include "cellgan/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

// Applies one "key=value" override to a TrainConfig. Keys mirror the config
// file; augmentation fields are reached as augment.<field>.
void apply_override(cellgan::TrainConfig& cfg, const std::string& key, const json& value) {
    using cellgan::config_error;
    auto as_bool = [&]() -> bool {
        if (value.is_boolean()) return value.get<bool>();
        throw config_error("config key '" + key + "' expects true/false, got " + value.dump());
    };
    auto as_double = [&]() -> double {
        if (value.is_number()) return value.get<double>();
        throw config_error("config key '" + key + "' expects a number, got " + value.dump());
    };
    auto as_int = [&]() -> long long {
        if (value.is_number_integer()) return value.get<long long>();
        throw config_error("config key '" + key + "' expects an integer, got " + value.dump());
    };

    if (key == "lr") cfg.lr = as_double();
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(as_int());
    else if (key == "total_iters") cfg.total_iters = as_int();
    else if (key == "adam_beta1") cfg.adam_beta1 = as_double();
    else if (key == "adam_beta2") cfg.adam_beta2 = as_double();
    else if (key == "lambda_reg") cfg.lambda_reg = as_double();
    else if (key == "ema_decay") cfg.ema_decay = as_double();
    else if (key == "resolution") cfg.resolution = static_cast<int>(as_int());
    else if (key == "width") cfg.width = as_double();
    else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
    else if (key == "use_patchgan") cfg.use_patchgan = as_bool();
    else if (key == "use_mapping") cfg.use_mapping = as_bool();
    else if (key == "use_sgc") cfg.use_sgc = as_bool();
    else if (key == "use_sn") cfg.use_sn = as_bool();
    else if (key == "use_recon") cfg.use_recon = as_bool();
    else if (key == "uniform_labels") cfg.uniform_labels = as_bool();
    else if (key == "checkpoint_every") cfg.checkpoint_every = as_int();
    else if (key == "augment.color") cfg.augment.color = as_bool();
    else if (key == "augment.translation") cfg.augment.translation = as_bool();
    else if (key == "augment.cutout") cfg.augment.cutout = as_bool();
    else if (key == "augment.brightness") cfg.augment.brightness = as_double();
    else if (key == "augment.saturation_lo") cfg.augment.saturation_lo = as_double();
    else if (key == "augment.saturation_hi") cfg.augment.saturation_hi = as_double();
    else if (key == "augment.contrast_lo") cfg.augment.contrast_lo = as_double();
    else if (key == "augment.contrast_hi") cfg.augment.contrast_hi = as_double();
    else
        throw config_error("unknown config key '" + key + "'");
}

// Loads a flat JSON config file; nested "augment" objects flatten to
// augment.<field> keys. Unknown keys are fatal.
void apply_config_file(cellgan::TrainConfig& cfg, const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw cellgan::config_error("cannot open config file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw cellgan::config_error("config file " + path.string() + " is not valid JSON: " +
                                    e.what());
    }
    if (!j.is_object()) throw cellgan::config_error("config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "augment" && value.is_object()) {
            for (const auto& [akey, avalue] : value.items())
                apply_override(cfg, "augment." + akey, avalue);
        } else {
            apply_override(cfg, key, value);
        }
    }
}

// Parses one --set key=value pair; the value side is parsed as JSON so
// numbers, booleans, and strings all work.
void apply_set_flag(cellgan::TrainConfig& cfg, const std::string& pair) {
    const auto eq = pair.find('=');
    if (eq == std::string::npos || eq == 0)
        throw cellgan::config_error("--set expects key=value, got '" + pair + "'");
    const std::string key = pair.substr(0, eq);
    const std::string raw = pair.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // bare strings
    }
    apply_override(cfg, key, value);
}

void echo_config(const cellgan::TrainConfig& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream out(out_dir / "config.json");
    if (!out) throw cellgan::state_error("cannot write " + (out_dir / "config.json").string());
    out << cellgan::detail::config_to_json(cfg).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Extractor selection for `fid`
// ---------------------------------------------------------------------------

// Wraps the two extractor kinds behind one call signature.
struct AnyExtractor {
    std::optional<cellgan::RandomProjectionExtractor> randproj;
    std::optional<cellgan::ExternalExtractor> external;

    static AnyExtractor make(const std::string& kind) {
        AnyExtractor ex;
        if (kind == "randproj")
            ex.randproj.emplace();
        else if (kind == "pretrained")
            ex.external.emplace(cellgan::ExternalExtractor::from_env());
        else
            throw cellgan::config_error("--extractor must be 'randproj' or 'pretrained', got '" +
                                        kind + "'");
        return ex;
    }
    std::string id() const { return randproj ? randproj->id() : external->id(); }
    cellgan::Tensor<double> extract(const std::vector<cellgan::Tensor<double>>& imgs) const {
        return randproj ? randproj->extract(imgs) : external->extract(imgs);
    }
};

// Per-class feature statistics of the real set, cached on disk keyed by the
// extractor identity.
std::vector<cellgan::FeatureStats> real_stats_per_class(const cellgan::LabeledImageSet<double>& real,
                                                        const AnyExtractor& ex,
                                                        const std::string& cache_path) {
    using namespace cellgan;
    const int K = real.num_classes();
    if (!cache_path.empty() && fs::exists(cache_path)) {
        TensorFile<double> tf = TensorFile<double>::read(cache_path);
        std::vector<double> id_bytes = tf.get_vector("extractor_id");
        std::string id(id_bytes.size(), '\0');
        for (size_t i = 0; i < id_bytes.size(); ++i)
            id[i] = static_cast<char>(std::lround(id_bytes[i]));
        if (id != ex.id())
            throw state_error("stats cache " + cache_path + " was built with extractor \"" + id +
                              "\" but \"" + ex.id() + "\" is in use; delete the cache or switch "
                              "extractors");
        std::vector<FeatureStats> stats(K);
        for (int k = 0; k < K; ++k) {
            const std::string p = "class" + std::to_string(k) + ".";
            stats[k].mean = tf.get_vector(p + "mean");
            stats[k].cov = tf.get(p + "cov");
            stats[k].count = std::lround(tf.get_vector(p + "count").at(0));
        }
        return stats;
    }
    std::vector<FeatureStats> stats;
    for (int k = 0; k < K; ++k) {
        std::vector<Tensor<double>> imgs;
        for (size_t i = 0; i < real.images.size(); ++i)
            if (real.labels[i] == k) imgs.push_back(real.images[i].clone());
        if (imgs.size() < 2)
            throw config_error("fid: real class " + real.class_names[k] +
                               " needs at least 2 images");
        stats.push_back(compute_stats(ex.extract(imgs)));
    }
    if (!cache_path.empty()) {
        TensorFile<double> tf;
        for (int k = 0; k < K; ++k) {
            const std::string p = "class" + std::to_string(k) + ".";
            tf.put_vector(p + "mean", stats[k].mean);
            tf.put(p + "cov", stats[k].cov);
            tf.put_vector(p + "count", {static_cast<double>(stats[k].count)});
        }
        const std::string id = ex.id();
        std::vector<double> id_bytes(id.size());
        for (size_t i = 0; i < id.size(); ++i)
            id_bytes[i] = static_cast<double>(static_cast<unsigned char>(id[i]));
        tf.put_vector("extractor_id", id_bytes);
        tf.write(cache_path);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int run_maketoy(const std::string& out, int classes, int per_class, int res,
                std::uint64_t seed, const std::vector<double>& ratios, int cells_min,
                int cells_max) {
    using namespace cellgan;
    if (classes < 1) throw config_error("--classes must be >= 1, got " + std::to_string(classes));
    ToySpec spec;
    spec.num_classes = classes;
    spec.images_per_class = per_class;
    spec.resolution = res;
    spec.seed = seed;
    spec.cells_min = cells_min;
    spec.cells_max = cells_max;
    if (!ratios.empty()) {
        spec.nucleus_ratios = ratios;
    } else if (classes == 1) {
        spec.nucleus_ratios = {0.45};
    } else {
        spec.nucleus_ratios.clear();
        for (int k = 0; k < classes; ++k)
            spec.nucleus_ratios.push_back(0.2 + 0.5 * k / (classes - 1));
    }
    write_toy_dataset<double>(out, spec);
    std::cout << "wrote " << classes * per_class << " images (" << classes << " classes x "
              << per_class << ") at " << res << "x" << res << " to " << out << "\n";
    return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::vector<std::string>& sets,
              const std::string& resume) {
    using namespace cellgan;
    TrainConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& s : sets) apply_set_flag(cfg, s);
    cfg.validate();

    LabeledImageSet<double> data = load_dataset<double>(data_dir, cfg.resolution);
    std::cout << "dataset: " << data.size() << " images, " << data.num_classes() << " classes at "
              << data.resolution() << "x" << data.resolution() << "\n";

    std::optional<TrainState<double>> state;
    if (!resume.empty()) {
        TrainConfig saved;
        state.emplace(load_checkpoint<double>(resume, saved));
        // The resumed run keeps the saved architecture; step counts and other
        // schedule fields follow the current flags.
        if (saved.resolution != cfg.resolution || saved.width != cfg.width)
            throw config_error("resume: checkpoint architecture (resolution " +
                               std::to_string(saved.resolution) + ", width " +
                               std::to_string(saved.width) + ") does not match the requested config");
        std::cout << "resumed from " << resume << " at iteration " << state->iter << "\n";
    } else {
        state.emplace(cfg, data.num_classes());
    }

    echo_config(cfg, out_dir);
    train(*state, cfg, data, out_dir, [&](const StepMetrics& m) {
        if (m.iter == 1 || m.iter % 100 == 0 || m.iter == cfg.total_iters)
            std::cout << m.describe() << "\n";
    });
    std::cout << "done: " << out_dir << "\n";
    return 0;
}

int run_sample(const std::string& ckpt, const std::string& klass, int n, std::uint64_t seed,
               const std::string& out_dir) {
    using namespace cellgan;
    TrainConfig cfg;
    TrainState<double> state = load_checkpoint<double>(ckpt, cfg);

    int k = -1;
    for (size_t i = 0; i < state.class_names.size(); ++i)
        if (state.class_names[i] == klass) k = static_cast<int>(i);
    if (k < 0) {
        // Numeric indices are accepted too.
        try {
            const int idx = std::stoi(klass);
            if (idx >= 0 && idx < static_cast<int>(state.class_names.size())) k = idx;
        } catch (...) {
        }
    }
    if (k < 0) {
        std::string valid;
        for (const auto& name : state.class_names) valid += " " + name;
        throw config_error("unknown class '" + klass + "'; valid classes:" + valid);
    }

    Tensor<double> imgs = sample(state.gspec, state.ema, k, n, seed);
    fs::create_directories(out_dir);
    for (int i = 0; i < n; ++i) {
        Tensor<double> one({3, imgs.dim(2), imgs.dim(3)});
        std::copy_n(imgs.data() + static_cast<size_t>(i) * one.size(), one.size(), one.data());
        std::ostringstream name;
        name << state.class_names[k] << "_" << std::setw(4) << std::setfill('0') << i << ".png";
        save_image(fs::path(out_dir) / name.str(), one);
    }
    std::cout << "wrote " << n << " " << state.class_names[k] << " samples to " << out_dir << "\n";
    return 0;
}

int run_fid(const std::string& real_dir, const std::string& fake_dir, const std::string& extractor,
            const std::string& stats_cache, const std::string& report_path) {
    using namespace cellgan;
    AnyExtractor ex = AnyExtractor::make(extractor);
    LabeledImageSet<double> real = load_dataset<double>(real_dir);
    LabeledImageSet<double> fake = load_dataset<double>(fake_dir, real.resolution());
    real.check();
    fake.check();
    if (fake.num_classes() != real.num_classes())
        throw config_error("fid: real has " + std::to_string(real.num_classes()) +
                           " classes, fake has " + std::to_string(fake.num_classes()));

    const std::vector<FeatureStats> rs = real_stats_per_class(real, ex, stats_cache);
    const int K = real.num_classes();
    std::vector<double> per_class(K);
    for (int k = 0; k < K; ++k) {
        std::vector<Tensor<double>> imgs;
        for (size_t i = 0; i < fake.images.size(); ++i)
            if (fake.labels[i] == k) imgs.push_back(fake.images[i].clone());
        if (imgs.size() < 2)
            throw config_error("fid: fake class " + real.class_names[k] +
                               " needs at least 2 images");
        per_class[k] = fid(rs[k], compute_stats(ex.extract(imgs)));
    }
    const double mean = mean_of(per_class);

    json report;
    report["extractor"] = ex.id();
    report["mean"] = mean;
    json rows = json::array();
    for (int k = 0; k < K; ++k)
        rows.push_back({{"class", real.class_names[k]}, {"fid", per_class[k]}});
    report["per_class"] = rows;

    std::cout << std::setprecision(10);
    for (int k = 0; k < K; ++k)
        std::cout << "fid[" << real.class_names[k] << "] = " << per_class[k] << "\n";
    std::cout << "fid[mean] = " << mean << "\n";
    if (!report_path.empty()) {
        std::ofstream out(report_path);
        if (!out) throw state_error("cannot write report: " + report_path);
        out << report.dump(2) << "\n";
    }
    return 0;
}

cellgan::CVPlan load_plan(const std::string& path) {
    cellgan::CVPlan plan;
    if (path.empty()) return plan;
    std::ifstream in(path);
    if (!in) throw cellgan::config_error("cannot open plan file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw cellgan::config_error("plan file " + path + " is not valid JSON: " + e.what());
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "images_per_class") plan.images_per_class = value.get<int>();
        else if (key == "folds") plan.folds = value.get<int>();
        else if (key == "synth_per_class") plan.synth_per_class = value.get<int>();
        else if (key == "classifier_lr") plan.classifier_lr = value.get<double>();
        else if (key == "classifier_batch") plan.classifier_batch = value.get<int>();
        else if (key == "classifier_epochs") plan.classifier_epochs = value.get<int>();
        else if (key == "random_flip") plan.random_flip = value.get<bool>();
        else if (key == "seed") plan.seed = value.get<std::uint64_t>();
        else throw cellgan::config_error("unknown plan key '" + key + "'");
    }
    return plan;
}

int run_augbench(const std::string& real_dir, const std::string& synth_dir,
                 const std::string& plan_path, const std::string& out_csv, bool smoke_oracle) {
    using namespace cellgan;
    CVPlan plan = load_plan(plan_path);
    plan.validate();

    LabeledImageSet<double> real = load_dataset<double>(real_dir);
    ClassifierBuilder build =
        smoke_oracle ? ClassifierBuilder([](int, int) -> std::unique_ptr<Classifier> {
            return std::make_unique<OracleClassifier>();
        })
                     : small_cnn_builder();

    std::vector<std::pair<std::string, BenchmarkResult>> rows;
    rows.emplace_back("baseline", augmentation_benchmark(real, nullptr, plan, build));
    if (!synth_dir.empty()) {
        LabeledImageSet<double> synth = load_dataset<double>(synth_dir, real.resolution());
        rows.emplace_back("augmented", augmentation_benchmark(real, &synth, plan, build));
    }
    write_benchmark_csv(out_csv, rows);

    std::cout << std::setprecision(6);
    for (const auto& [name, r] : rows)
        std::cout << name << ": accuracy " << r.mean.accuracy << " +- " << r.stdev.accuracy
                  << ", f1 " << r.mean.f1 << "\n";
    std::cout << "wrote " << out_csv << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"class-conditional GAN for cell-image synthesis and augmentation"};
    app.require_subcommand(1);

    // maketoy ---------------------------------------------------------------
    auto* maketoy = app.add_subcommand("maketoy", "generate the procedural toy-cell dataset");
    std::string mk_out;
    int mk_classes = 3, mk_per_class = 100, mk_res = 64, mk_cells_min = 2, mk_cells_max = 3;
    std::uint64_t mk_seed = 0;
    std::vector<double> mk_ratios;
    maketoy->add_option("--out", mk_out, "output dataset directory")->required();
    maketoy->add_option("--classes", mk_classes, "number of classes");
    maketoy->add_option("--per-class", mk_per_class, "images per class");
    maketoy->add_option("--res", mk_res, "resolution (power of two, >= 8)");
    maketoy->add_option("--seed", mk_seed, "rng seed");
    maketoy->add_option("--ratios", mk_ratios,
                        "nucleus/cell ratio per class (default: evenly spaced)");
    maketoy->add_option("--cells-min", mk_cells_min, "min cells per image");
    maketoy->add_option("--cells-max", mk_cells_max, "max cells per image");

    // train -----------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train the conditional GAN");
    std::string tr_config, tr_data, tr_out, tr_resume;
    std::vector<std::string> tr_sets;
    train_cmd->add_option("--config", tr_config, "JSON config file (defaults when omitted)");
    train_cmd->add_option("--data", tr_data, "dataset root (class subdirectories)")->required();
    train_cmd->add_option("--out", tr_out, "output directory")->required();
    train_cmd->add_option("--set", tr_sets, "config override key=value (repeatable)");
    train_cmd->add_option("--resume", tr_resume, "checkpoint directory to resume from");

    // sample ----------------------------------------------------------------
    auto* sample_cmd = app.add_subcommand("sample", "draw images from a checkpoint");
    std::string sm_ckpt, sm_class, sm_out;
    int sm_n = 16;
    std::uint64_t sm_seed = 0;
    sample_cmd->add_option("--ckpt", sm_ckpt, "checkpoint directory")->required();
    sample_cmd->add_option("--class", sm_class, "class name or index")->required();
    sample_cmd->add_option("--n", sm_n, "number of images");
    sample_cmd->add_option("--seed", sm_seed, "rng seed");
    sample_cmd->add_option("--out", sm_out, "output directory")->required();

    // fid -------------------------------------------------------------------
    auto* fid_cmd = app.add_subcommand("fid", "per-class Frechet distance between datasets");
    std::string fd_real, fd_fake, fd_extractor = "randproj", fd_cache, fd_report;
    fid_cmd->add_option("--real", fd_real, "real dataset root")->required();
    fid_cmd->add_option("--fake", fd_fake, "generated dataset root")->required();
    fid_cmd->add_option("--extractor", fd_extractor,
                        "feature extractor: randproj | pretrained (reads $" +
                            std::string(cellgan::kExtractorEnvVar) + ")");
    fid_cmd->add_option("--stats-cache", fd_cache, "cache file for real-side statistics");
    fid_cmd->add_option("--out", fd_report, "JSON report path");

    // augbench ----------------------------------------------------------------
    auto* aug_cmd = app.add_subcommand("augbench", "k-fold augmentation benchmark");
    std::string ab_real, ab_synth, ab_plan, ab_out;
    bool ab_oracle = false;
    aug_cmd->add_option("--real", ab_real, "real dataset root")->required();
    aug_cmd->add_option("--synth", ab_synth, "synthetic dataset root (adds the augmented row)");
    aug_cmd->add_option("--plan", ab_plan, "JSON cross-validation plan");
    aug_cmd->add_option("--out", ab_out, "output CSV path")->required();
    aug_cmd->add_flag("--smoke-oracle", ab_oracle,
                      "use the label-echo oracle classifier (harness smoke check)");

    try {
        app.parse(argc, argv);
        if (maketoy->parsed())
            return run_maketoy(mk_out, mk_classes, mk_per_class, mk_res, mk_seed, mk_ratios,
                               mk_cells_min, mk_cells_max);
        if (train_cmd->parsed()) return run_train(tr_config, tr_data, tr_out, tr_sets, tr_resume);
        if (sample_cmd->parsed()) return run_sample(sm_ckpt, sm_class, sm_n, sm_seed, sm_out);
        if (fid_cmd->parsed()) return run_fid(fd_real, fd_fake, fd_extractor, fd_cache, fd_report);
        if (aug_cmd->parsed()) return run_augbench(ab_real, ab_synth, ab_plan, ab_out, ab_oracle);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);  // prints help/error text
        return rc == 0 ? 0 : 2;
    } catch (const cellgan::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const cellgan::domain_error& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const cellgan::divergence_error& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
