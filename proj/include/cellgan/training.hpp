#pragma once

// Adversarial training loop: alternating discriminator/generator updates with
// differentiable augmentation, self-supervised decoder reconstruction, R1
// regularization, EMA tracking, and resumable checkpoints.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellgan/data.hpp"
#include "cellgan/discriminator.hpp"
#include "cellgan/generator.hpp"
#include "cellgan/image_io.hpp"
#include "cellgan/losses.hpp"
#include "cellgan/serialize.hpp"
#include "cellgan/trainutils.hpp"

namespace cellgan {

struct TrainConfig {
    double lr = 2.5e-4;
    int batch_size = 64;
    long long total_iters = 100000;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    double lambda_reg = 0.01;
    double ema_decay = 0.999;
    int resolution = 256;
    double width = 1.0;
    uint64_t seed = 0;
    bool use_patchgan = true;
    bool use_mapping = true;
    bool use_sgc = true;
    bool use_sn = true;
    bool use_recon = true;
    bool uniform_labels = false;  // default: fake labels follow the data distribution
    AugmentPolicy augment;
    long long checkpoint_every = 1000;

    void validate() const {
        if (lr <= 0.0) throw config_error("TrainConfig: lr must be positive");
        if (batch_size < 2) throw config_error("TrainConfig: batch_size must be >= 2");
        if (total_iters < 1) throw config_error("TrainConfig: total_iters must be >= 1");
        if (lambda_reg < 0.0) throw config_error("TrainConfig: lambda_reg must be >= 0");
        if (ema_decay < 0.0 || ema_decay >= 1.0)
            throw config_error("TrainConfig: ema_decay must be in [0, 1)");
        if (checkpoint_every < 1) throw config_error("TrainConfig: checkpoint_every must be >= 1");
        augment.validate();
    }

    GeneratorSpec generator_spec(int num_classes) const {
        GeneratorSpec s;
        s.num_classes = num_classes;
        s.resolution = resolution;
        s.width = width;
        s.use_mapping = use_mapping;
        s.use_sgc = use_sgc;
        return s;
    }

    DiscriminatorSpec discriminator_spec(int num_classes) const {
        DiscriminatorSpec s;
        s.num_classes = num_classes;
        s.resolution = resolution;
        s.width = width;
        s.use_patchgan = use_patchgan;
        s.use_sn = use_sn;
        return s;
    }
};

struct StepMetrics {
    long long iter = 0;
    double adv_d = 0.0;
    double adv_g = 0.0;
    double recon = 0.0;
    double r1 = 0.0;
    double total_d = 0.0;
    double secs = 0.0;

    bool all_finite() const {
        return std::isfinite(adv_d) && std::isfinite(adv_g) && std::isfinite(recon) &&
               std::isfinite(r1) && std::isfinite(total_d);
    }
    std::string describe() const {
        return "iter=" + std::to_string(iter) + " adv_d=" + std::to_string(adv_d) +
               " adv_g=" + std::to_string(adv_g) + " recon=" + std::to_string(recon) +
               " r1=" + std::to_string(r1) + " total_d=" + std::to_string(total_d);
    }
};

/// Raised when a step produces a non-finite loss; carries the step's metrics.
struct divergence_error : numerical_error {
    StepMetrics metrics;
    explicit divergence_error(const StepMetrics& m)
        : numerical_error("training diverged: " + m.describe()), metrics(m) {}
};

template <typename T>
struct TrainState {
    // Declaration order matters: one seeded stream initializes G, then D,
    // then keeps driving every training draw.
    Rng rng;
    GeneratorSpec gspec;
    DiscriminatorSpec dspec;
    Generator<T> g;
    Discriminator<T> d;
    ParamStore<T> ema;  // shadow of the generator parameters
    Adam<T> opt_g;
    Adam<T> opt_d;
    std::vector<double> label_dist;  // fake-label sampling distribution
    std::vector<std::string> class_names;
    long long iter = 0;

    TrainState(const TrainConfig& cfg, int num_classes)
        : rng(cfg.seed),
          gspec(cfg.generator_spec(num_classes)),
          dspec(cfg.discriminator_spec(num_classes)),
          g(gspec, rng),
          d(dspec, rng),
          ema(g.params().clone()),
          opt_g(static_cast<T>(cfg.lr), static_cast<T>(cfg.adam_beta1),
                static_cast<T>(cfg.adam_beta2)),
          opt_d(static_cast<T>(cfg.lr), static_cast<T>(cfg.adam_beta1),
                static_cast<T>(cfg.adam_beta2)),
          label_dist(static_cast<size_t>(num_classes), 1.0 / num_classes) {
        for (int k = 0; k < num_classes; ++k) class_names.push_back("class" + std::to_string(k));
    }
};

namespace detail {

/// Inverse-CDF draw from a discrete distribution.
inline int sample_label(Rng& rng, const std::vector<double>& dist) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (size_t k = 0; k < dist.size(); ++k) {
        acc += dist[k];
        if (u < acc) return static_cast<int>(k);
    }
    return static_cast<int>(dist.size()) - 1;
}

template <typename T>
inline Tensor<T> draw_latents(Rng& rng, int batch, int z_dim) {
    Tensor<T> z({batch, z_dim});
    rng.fill_normal(z);
    return z;
}

}  // namespace detail

/// Normalized label distribution of a dataset.
template <typename T>
inline std::vector<double> empirical_label_dist(const LabeledImageSet<T>& data) {
    std::vector<double> dist(static_cast<size_t>(data.num_classes()), 0.0);
    for (int y : data.labels) dist[static_cast<size_t>(y)] += 1.0;
    for (double& p : dist) p /= static_cast<double>(data.size());
    return dist;
}

/// One alternating D/G update on a real batch. Draw order from state.rng is
/// fixed: z_d, fake labels, real-augmentation draws, fake-augmentation draws,
/// quadrant, z_g, G-phase labels, G-phase augmentation draws.
template <typename T>
inline StepMetrics train_step(TrainState<T>& state, const Tensor<T>& real,
                              const std::vector<int>& labels, const TrainConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    if (real.rank() != 4 || real.dim(0) != static_cast<int>(labels.size()))
        throw domain_error("train_step: real batch and labels disagree");
    const int B = real.dim(0);

    StepMetrics m;
    m.iter = state.iter + 1;

    // ---- discriminator update -------------------------------------------
    Tensor<T> z_d = detail::draw_latents<T>(state.rng, B, state.gspec.z_dim);
    std::vector<int> y_fake(static_cast<size_t>(B));
    for (int& y : y_fake) y = detail::sample_label(state.rng, state.label_dist);
    Tensor<T> fake = state.g.generate(z_d, y_fake);  // detached from the D graph

    state.d.params().zero_grads();
    {
        Graph<T> gr;
        auto bd = state.d.bind(gr, /*sn_update=*/true);
        Value real_aug = diff_augment(gr, gr.input(real.clone()), cfg.augment, state.rng);
        Value fake_aug = diff_augment(gr, gr.input(fake.clone()), cfg.augment, state.rng);
        auto enc_real = state.d.encode(bd, real_aug);
        auto enc_fake = state.d.encode(bd, fake_aug);
        Value adv = hinge_d(gr, state.d.logits_from(bd, enc_real, labels),
                            state.d.logits_from(bd, enc_fake, y_fake));
        const int quadrant = state.rng.uniform_int(4);
        Value total = adv;
        if (cfg.use_recon) {
            // Reconstruction targets are transforms of the augmented reals,
            // so the decoders describe exactly what the discriminator saw.
            RealTargetPair<T> targets = make_real_targets(gr.val(real_aug).clone(), quadrant);
            Value rec = add(gr,
                            recon_loss(gr, state.d.decode_resize(bd, enc_real.feat8),
                                       gr.constant(std::move(targets.resized))),
                            recon_loss(gr, state.d.decode_crop(bd, enc_real.feat16, quadrant),
                                       gr.constant(std::move(targets.cropped))));
            m.recon = static_cast<double>(gr.val(rec)[0]);
            total = add(gr, adv, rec);
        }
        m.adv_d = static_cast<double>(gr.val(adv)[0]);
        gr.backward(total);
        gr.add_param_grads();
    }
    if (cfg.lambda_reg > 0.0) {
        // R1 on the un-augmented reals, on a lean graph: the penalty's exact
        // parameter gradients accumulate directly into the store.
        Graph<T> gr;
        auto bd = state.d.bind(gr, /*sn_update=*/false);
        Value x = gr.input(real.clone());
        Value logits = state.d.discriminate(bd, x, labels);
        m.r1 = static_cast<double>(
            r1_penalty_accumulate(gr, logits, x, static_cast<T>(cfg.lambda_reg)));
    }
    m.total_d = m.adv_d + m.recon + cfg.lambda_reg * m.r1;
    state.opt_d.step(state.d.params());

    // ---- generator update ------------------------------------------------
    Tensor<T> z_g = detail::draw_latents<T>(state.rng, B, state.gspec.z_dim);
    std::vector<int> y_g(static_cast<size_t>(B));
    for (int& y : y_g) y = detail::sample_label(state.rng, state.label_dist);

    state.g.params().zero_grads();
    {
        Graph<T> gr;
        Value img = state.g.build(gr, gr.input(z_g.clone()), y_g);
        auto bd = state.d.bind(gr, /*sn_update=*/true);
        Value img_aug = diff_augment(gr, img, cfg.augment, state.rng);
        Value loss = hinge_g(gr, state.d.discriminate(bd, img_aug, y_g));
        m.adv_g = static_cast<double>(gr.val(loss)[0]);
        gr.backward(loss);
        gr.add_param_grads();
    }
    state.opt_g.step(state.g.params());
    ema_update(state.ema, state.g.params(), static_cast<T>(cfg.ema_decay));

    state.iter = m.iter;
    m.secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!m.all_finite()) throw divergence_error(m);
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json config_to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["lr"] = cfg.lr;
    j["batch_size"] = cfg.batch_size;
    j["total_iters"] = cfg.total_iters;
    j["adam_beta1"] = cfg.adam_beta1;
    j["adam_beta2"] = cfg.adam_beta2;
    j["lambda_reg"] = cfg.lambda_reg;
    j["ema_decay"] = cfg.ema_decay;
    j["resolution"] = cfg.resolution;
    j["width"] = cfg.width;
    j["seed"] = cfg.seed;
    j["use_patchgan"] = cfg.use_patchgan;
    j["use_mapping"] = cfg.use_mapping;
    j["use_sgc"] = cfg.use_sgc;
    j["use_sn"] = cfg.use_sn;
    j["use_recon"] = cfg.use_recon;
    j["uniform_labels"] = cfg.uniform_labels;
    j["checkpoint_every"] = cfg.checkpoint_every;
    j["augment"] = {{"color", cfg.augment.color},
                    {"translation", cfg.augment.translation},
                    {"cutout", cfg.augment.cutout},
                    {"brightness", cfg.augment.brightness},
                    {"saturation_lo", cfg.augment.saturation_lo},
                    {"saturation_hi", cfg.augment.saturation_hi},
                    {"contrast_lo", cfg.augment.contrast_lo},
                    {"contrast_hi", cfg.augment.contrast_hi}};
    return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.lr = j.at("lr").get<double>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.total_iters = j.at("total_iters").get<long long>();
    cfg.adam_beta1 = j.at("adam_beta1").get<double>();
    cfg.adam_beta2 = j.at("adam_beta2").get<double>();
    cfg.lambda_reg = j.at("lambda_reg").get<double>();
    cfg.ema_decay = j.at("ema_decay").get<double>();
    cfg.resolution = j.at("resolution").get<int>();
    cfg.width = j.at("width").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.use_patchgan = j.at("use_patchgan").get<bool>();
    cfg.use_mapping = j.at("use_mapping").get<bool>();
    cfg.use_sgc = j.at("use_sgc").get<bool>();
    cfg.use_sn = j.at("use_sn").get<bool>();
    cfg.use_recon = j.at("use_recon").get<bool>();
    cfg.uniform_labels = j.at("uniform_labels").get<bool>();
    cfg.checkpoint_every = j.at("checkpoint_every").get<long long>();
    const auto& a = j.at("augment");
    cfg.augment.color = a.at("color").get<bool>();
    cfg.augment.translation = a.at("translation").get<bool>();
    cfg.augment.cutout = a.at("cutout").get<bool>();
    cfg.augment.brightness = a.at("brightness").get<double>();
    cfg.augment.saturation_lo = a.at("saturation_lo").get<double>();
    cfg.augment.saturation_hi = a.at("saturation_hi").get<double>();
    cfg.augment.contrast_lo = a.at("contrast_lo").get<double>();
    cfg.augment.contrast_hi = a.at("contrast_hi").get<double>();
    return cfg;
}

}  // namespace detail

/// Write a checkpoint directory: manifest.json (config, iteration, optimizer
/// steps, rng state, label distribution) + tensors.bin (all weights, EMA,
/// optimizer moments, power-iteration vectors; layout in serialize.hpp).
template <typename T>
inline void save_checkpoint(const std::string& dir, const TrainState<T>& state,
                            const TrainConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    TensorFile<T> tf;
    tf.put_store("g.", state.g.params());
    tf.put_store("d.", state.d.params());
    tf.put_store("ema.", state.ema);
    auto put_moments = [&tf](const std::string& prefix, const Adam<T>& opt,
                             const ParamStore<T>& store) {
        for (size_t i = 0; i < opt.m.size(); ++i) {
            tf.put(prefix + "m." + store.at(static_cast<int>(i)).name, opt.m[i]);
            tf.put(prefix + "v." + store.at(static_cast<int>(i)).name, opt.v[i]);
        }
    };
    put_moments("opt_g.", state.opt_g, state.g.params());
    put_moments("opt_d.", state.opt_d, state.d.params());
    for (const auto& [name, st] : state.d.sn_states())
        tf.put_vector("sn." + name + ".u", st.u);
    tf.write((fs::path(dir) / "tensors.bin").string());

    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["iteration"] = state.iter;
    manifest["num_classes"] = state.gspec.num_classes;
    manifest["config"] = detail::config_to_json(cfg);
    manifest["opt_g_t"] = state.opt_g.t;
    manifest["opt_d_t"] = state.opt_d.t;
    manifest["rng_state"] = state.rng.save_state();
    manifest["label_dist"] = state.label_dist;
    manifest["class_names"] = state.class_names;
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw state_error("save_checkpoint: cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

/// Rebuild a TrainState (and its config) from a checkpoint directory.
template <typename T>
inline TrainState<T> load_checkpoint(const std::string& dir, TrainConfig& cfg_out) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw state_error("load_checkpoint: no manifest.json in " + dir);
    nlohmann::json manifest;
    in >> manifest;
    if (manifest.at("format_version").get<int>() != 1)
        throw state_error("load_checkpoint: unsupported format version in " + dir);

    cfg_out = detail::config_from_json(manifest.at("config"));
    const int num_classes = manifest.at("num_classes").get<int>();
    TrainState<T> state(cfg_out, num_classes);

    TensorFile<T> tf = TensorFile<T>::read((fs::path(dir) / "tensors.bin").string());
    tf.load_store("g.", state.g.params());
    tf.load_store("d.", state.d.params());
    tf.load_store("ema.", state.ema);
    auto load_moments = [&tf](const std::string& prefix, Adam<T>& opt, ParamStore<T>& store) {
        // Moments are absent when the optimizer never stepped before saving.
        if (store.count() > 0 && !tf.has(prefix + "m." + store.at(0).name)) return;
        opt.ensure_state(store);
        for (size_t i = 0; i < opt.m.size(); ++i) {
            opt.m[i] = tf.get(prefix + "m." + store.at(static_cast<int>(i)).name).clone();
            opt.v[i] = tf.get(prefix + "v." + store.at(static_cast<int>(i)).name).clone();
        }
    };
    load_moments("opt_g.", state.opt_g, state.g.params());
    load_moments("opt_d.", state.opt_d, state.d.params());
    for (auto& [name, st] : state.d.sn_states()) st.u = tf.get_vector("sn." + name + ".u");

    state.iter = manifest.at("iteration").get<long long>();
    state.opt_g.t = manifest.at("opt_g_t").get<long long>();
    state.opt_d.t = manifest.at("opt_d_t").get<long long>();
    state.rng.load_state(manifest.at("rng_state").get<std::string>());
    state.label_dist = manifest.at("label_dist").get<std::vector<double>>();
    state.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    return state;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Generate n images of one class from a weight snapshot (normally the EMA
/// shadow), deterministic under the given seed.
template <typename T>
inline Tensor<T> sample(const GeneratorSpec& spec, const ParamStore<T>& weights, int klass,
                        int n, uint64_t seed) {
    if (n < 1) throw domain_error("sample: n must be >= 1");
    Rng init_rng(seed);
    Generator<T> gen(spec, init_rng);
    for (int i = 0; i < static_cast<int>(gen.params().count()); ++i) {
        const auto& src = weights.at(i);
        auto& dst = gen.params().at(i);
        if (src.name != dst.name || !src.value.same_shape(dst.value))
            throw state_error("sample: weight snapshot does not match the generator spec");
        dst.value = src.value.clone();
    }
    Rng rng(seed);
    Tensor<T> z = detail::draw_latents<T>(rng, n, spec.z_dim);
    std::vector<int> y(static_cast<size_t>(n), klass);
    return gen.generate(z, y);
}

/// Arrange a batch [N,3,H,W] into one [3, rows*H, cols*W] mosaic image.
template <typename T>
inline Tensor<T> mosaic(const Tensor<T>& batch) {
    if (batch.rank() != 4 || batch.dim(1) != 3) throw domain_error("mosaic: expected [N,3,H,W]");
    const int N = batch.dim(0), H = batch.dim(2), W = batch.dim(3);
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(N))));
    const int rows = (N + cols - 1) / cols;
    Tensor<T> grid({3, rows * H, cols * W});
    for (int i = 0; i < N; ++i) {
        const int r = i / cols, c = i % cols;
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    grid[(static_cast<size_t>(ch) * rows * H + r * H + y) *
                             static_cast<size_t>(cols * W) +
                         c * W + x] =
                        batch[((static_cast<size_t>(i) * 3 + ch) * H + y) * W + x];
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Full loop
// ---------------------------------------------------------------------------

/// Run the loop from state.iter to cfg.total_iters, appending one CSV row per
/// step to <out_dir>/metrics.csv and checkpointing every checkpoint_every
/// iterations (plus the final iteration) to <out_dir>/checkpoints/iter_<N>.
/// Sample mosaics per class go to <out_dir>/samples/. On divergence, a final
/// checkpoint is written before the error propagates.
template <typename T>
inline void train(TrainState<T>& state, const TrainConfig& cfg, const LabeledImageSet<T>& data,
                  const std::string& out_dir,
                  const std::function<void(const StepMetrics&)>& on_step = {}) {
    namespace fs = std::filesystem;
    cfg.validate();
    data.check();
    if (data.size() == 0) throw config_error("train: empty dataset");
    if (data.num_classes() != state.gspec.num_classes)
        throw config_error("train: dataset classes do not match the model");
    std::vector<int> seen(static_cast<size_t>(data.num_classes()), 0);
    for (int y : data.labels) seen[static_cast<size_t>(y)] = 1;
    for (int k = 0; k < data.num_classes(); ++k)
        if (!seen[static_cast<size_t>(k)])
            throw config_error("train: class " + data.class_names[static_cast<size_t>(k)] +
                               " has no images");
    if (data.resolution() != cfg.resolution)
        throw config_error("train: dataset resolution does not match config");

    state.label_dist = cfg.uniform_labels
                           ? std::vector<double>(static_cast<size_t>(data.num_classes()),
                                                 1.0 / data.num_classes())
                           : empirical_label_dist(data);
    state.class_names = data.class_names;

    fs::create_directories(out_dir);
    fs::create_directories(fs::path(out_dir) / "checkpoints");
    fs::create_directories(fs::path(out_dir) / "samples");
    const fs::path csv_path = fs::path(out_dir) / "metrics.csv";
    const bool fresh_csv = !fs::exists(csv_path) || fs::file_size(csv_path) == 0;
    std::ofstream csv(csv_path, std::ios::app);
    if (!csv) throw state_error("train: cannot open " + csv_path.string());
    if (fresh_csv) csv << "iter,adv_d,adv_g,recon,r1,total_d,secs\n";
    csv.precision(17);

    auto checkpoint = [&](long long it) {
        save_checkpoint((fs::path(out_dir) / "checkpoints" / ("iter_" + std::to_string(it)))
                            .string(),
                        state, cfg);
        for (int k = 0; k < state.gspec.num_classes; ++k) {
            Tensor<T> batch = sample(state.gspec, state.ema, k, 16, cfg.seed + 1);
            save_image((fs::path(out_dir) / "samples" /
                        ("iter_" + std::to_string(it) + "_class_" + std::to_string(k) + ".png"))
                           .string(),
                       mosaic(batch));
        }
    };

    while (state.iter < cfg.total_iters) {
        std::vector<int> idx(static_cast<size_t>(cfg.batch_size));
        std::vector<int> labels(static_cast<size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            idx[static_cast<size_t>(b)] = state.rng.uniform_int(data.size());
            labels[static_cast<size_t>(b)] = data.labels[static_cast<size_t>(idx[static_cast<size_t>(b)])];
        }
        Tensor<T> real = stack_images(data.images, idx);

        StepMetrics m;
        try {
            m = train_step(state, real, labels, cfg);
        } catch (const divergence_error& e) {
            csv << e.metrics.iter << ',' << e.metrics.adv_d << ',' << e.metrics.adv_g << ','
                << e.metrics.recon << ',' << e.metrics.r1 << ',' << e.metrics.total_d << ','
                << e.metrics.secs << '\n';
            csv.flush();
            save_checkpoint(
                (fs::path(out_dir) / "checkpoints" / "diverged").string(), state, cfg);
            throw;
        }
        csv << m.iter << ',' << m.adv_d << ',' << m.adv_g << ',' << m.recon << ',' << m.r1 << ','
            << m.total_d << ',' << m.secs << '\n';
        csv.flush();
        if (on_step) on_step(m);
        if (state.iter % cfg.checkpoint_every == 0 || state.iter == cfg.total_iters)
            checkpoint(state.iter);
    }
}

}  // namespace cellgan
