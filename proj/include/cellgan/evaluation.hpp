#pragma once

// Evaluation: Frechet distance between feature distributions, feature
// extractors (a fast random-projection extractor for tests plus an adapter
// that shells out to a pretrained embedding model), cached feature
// statistics, classification metrics, and the k-fold classifier
// augmentation benchmark.
//
// Everything here operates on double-precision images ([3,H,W], values in
// [-1,1]) as produced by the data module.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "cellgan/data.hpp"
#include "cellgan/graph.hpp"
#include "cellgan/image_io.hpp"
#include "cellgan/ops.hpp"
#include "cellgan/params.hpp"
#include "cellgan/rng.hpp"
#include "cellgan/serialize.hpp"
#include "cellgan/tensor.hpp"

namespace cellgan {

// ---------------------------------------------------------------------------
// Feature statistics
// ---------------------------------------------------------------------------

// First and second moments of a set of feature vectors.
struct FeatureStats {
    std::vector<double> mean;  // [D]
    Tensor<double> cov;        // [D,D], unbiased (divides by N-1)
    long count = 0;

    int dim() const { return static_cast<int>(mean.size()); }
};

// Row-major feature matrix [N,D] -> moments. Covariance is the unbiased
// sample covariance, so at least two rows are required.
inline FeatureStats compute_stats(const Tensor<double>& features) {
    if (features.rank() != 2) throw domain_error("compute_stats: features must be [N,D]");
    const int N = features.dim(0), D = features.dim(1);
    if (N < 2) throw domain_error("compute_stats: need at least 2 feature rows, got " + std::to_string(N));
    FeatureStats s;
    s.count = N;
    s.mean.assign(D, 0.0);
    const double* f = features.data();
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < D; ++j) s.mean[j] += f[static_cast<size_t>(i) * D + j];
    for (int j = 0; j < D; ++j) s.mean[j] /= N;
    s.cov = Tensor<double>({D, D});
    double* c = s.cov.data();
    for (int i = 0; i < N; ++i) {
        const double* row = f + static_cast<size_t>(i) * D;
        for (int a = 0; a < D; ++a) {
            const double da = row[a] - s.mean[a];
            for (int b = a; b < D; ++b) c[static_cast<size_t>(a) * D + b] += da * (row[b] - s.mean[b]);
        }
    }
    for (int a = 0; a < D; ++a)
        for (int b = a; b < D; ++b) {
            const double v = c[static_cast<size_t>(a) * D + b] / (N - 1);
            c[static_cast<size_t>(a) * D + b] = v;
            c[static_cast<size_t>(b) * D + a] = v;
        }
    return s;
}

namespace detail {

// Symmetric PSD square root via eigendecomposition. Eigenvalues below
// -kEigTol are treated as genuine failures; small negatives are rounding
// noise and clamp to zero.
constexpr double kEigTol = 1e-6;

inline Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    if (es.info() != Eigen::Success) throw numerical_error(std::string(what) + ": eigendecomposition failed");
    Eigen::VectorXd lam = es.eigenvalues();
    for (int i = 0; i < lam.size(); ++i) {
        if (lam[i] < -kEigTol)
            throw numerical_error(std::string(what) + ": eigenvalue " + std::to_string(lam[i]) +
                                  " below tolerance; matrix is not PSD");
        lam[i] = std::sqrt(std::max(lam[i], 0.0));
    }
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

inline Eigen::Map<const Eigen::MatrixXd> as_eigen(const Tensor<double>& t) {
    // Tensor is row-major but covariance matrices here are symmetric, so the
    // column-major view is the same matrix.
    return Eigen::Map<const Eigen::MatrixXd>(t.data(), t.dim(0), t.dim(1));
}

}  // namespace detail

// Frechet distance between two Gaussians fitted to feature sets:
//   ||mu_a - mu_b||^2 + tr(Sa) + tr(Sb) - 2 tr((Sa^1/2 Sb Sa^1/2)^1/2).
// Eigenvalues of the symmetrized product in (-1e-6, 0) clamp to zero; more
// negative ones raise numerical_error.
inline double fid(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim())
        throw domain_error("fid: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                           std::to_string(b.dim()) + ")");
    const int D = a.dim();
    if (a.cov.rank() != 2 || a.cov.dim(0) != D || a.cov.dim(1) != D || b.cov.rank() != 2 ||
        b.cov.dim(0) != D || b.cov.dim(1) != D)
        throw domain_error("fid: covariance shape does not match mean dimension");
    Eigen::MatrixXd sa = detail::as_eigen(a.cov);
    Eigen::MatrixXd sb = detail::as_eigen(b.cov);
    const Eigen::MatrixXd ra = detail::spd_sqrt(sa, "fid: first covariance");
    const Eigen::MatrixXd prod = ra * sb * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (prod + prod.transpose()));
    if (es.info() != Eigen::Success) throw numerical_error("fid: eigendecomposition of product failed");
    double tr_sqrt = 0;
    for (int i = 0; i < D; ++i) {
        const double lam = es.eigenvalues()[i];
        if (lam < -detail::kEigTol)
            throw numerical_error("fid: product eigenvalue " + std::to_string(lam) +
                                  " below tolerance; covariances are ill-conditioned");
        tr_sqrt += std::sqrt(std::max(lam, 0.0));
    }
    double d2 = 0;
    for (int j = 0; j < D; ++j) {
        const double dm = a.mean[j] - b.mean[j];
        d2 += dm * dm;
    }
    return d2 + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
}

// ---------------------------------------------------------------------------
// Feature extractors
// ---------------------------------------------------------------------------
//
// An extractor maps a list of images to a row-major feature matrix [N,D]
// (row i belongs to image i) and reports a stable identity string used to
// tag cached statistics. Extraction must be deterministic.

// Lightweight deterministic extractor for tests and smoke runs: images are
// resized to 32x32, flattened, and pushed through two fixed Gaussian random
// projections -- 32 linear features plus 32 magnitude features, so both
// first- and second-moment differences between image distributions show up.
// Not a perceptual embedding; real evaluations should use ExternalExtractor.
class RandomProjectionExtractor {
public:
    static constexpr int kSide = 32;
    static constexpr int kHalf = 32;  // features per projection bank

    explicit RandomProjectionExtractor(std::uint64_t seed = 41) : seed_(seed) {
        const int in = 3 * kSide * kSide;
        p1_ = Tensor<double>({kHalf, in});
        p2_ = Tensor<double>({kHalf, in});
        Rng rng(seed);
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        rng.fill_normal(p1_, 0.0, scale);
        rng.fill_normal(p2_, 0.0, scale);
    }

    int dim() const { return 2 * kHalf; }
    std::string id() const { return "randproj-v1-seed" + std::to_string(seed_); }

    Tensor<double> extract(const std::vector<Tensor<double>>& images) const {
        if (images.empty()) throw domain_error("extract: no images");
        const int N = static_cast<int>(images.size());
        const int in = 3 * kSide * kSide;
        Tensor<double> out({N, dim()});
        for (int i = 0; i < N; ++i) {
            const Tensor<double>& img = images[i];
            if (img.rank() != 3 || img.dim(0) != 3)
                throw domain_error("extract: image " + std::to_string(i) + " is not [3,H,W]");
            Tensor<double> small = (img.dim(1) == kSide && img.dim(2) == kSide)
                                       ? img.clone()
                                       : bilinear_resize(img, kSide, kSide);
            const double* x = small.data();
            double* row = out.data() + static_cast<size_t>(i) * dim();
            for (int r = 0; r < kHalf; ++r) {
                double acc1 = 0, acc2 = 0;
                const double* w1 = p1_.data() + static_cast<size_t>(r) * in;
                const double* w2 = p2_.data() + static_cast<size_t>(r) * in;
                for (int j = 0; j < in; ++j) {
                    acc1 += w1[j] * x[j];
                    acc2 += w2[j] * x[j];
                }
                row[r] = acc1;
                row[kHalf + r] = std::abs(acc2);
            }
        }
        return out;
    }

private:
    std::uint64_t seed_;
    Tensor<double> p1_, p2_;
};

// Name of the environment variable holding the pretrained-extractor command.
inline constexpr const char* kExtractorEnvVar = "CELLGAN_FID_EXTRACTOR";

// Adapter for a pretrained embedding model running outside this process.
// The command is taken from the CELLGAN_FID_EXTRACTOR environment variable
// (or passed explicitly) and is invoked as
//     <command> <png_dir> <out_file>
// where <png_dir> contains img_00000.png, img_00001.png, ... in row order
// and <out_file> must be written as a tensor container with a single entry
// "features" of shape [N,D]. Any pretrained network wrapped in a small
// script satisfies this contract.
class ExternalExtractor {
public:
    explicit ExternalExtractor(std::string command) : cmd_(std::move(command)) {
        if (cmd_.empty()) throw config_error("external extractor: empty command");
    }

    // Resolves the command from the environment.
    static ExternalExtractor from_env() {
        const char* v = std::getenv(kExtractorEnvVar);
        if (v == nullptr || *v == '\0')
            throw config_error(std::string("external extractor: set ") + kExtractorEnvVar +
                               " to a command invoked as '<cmd> <png_dir> <out_file>' that writes a "
                               "tensor container with entry \"features\" [N,D]; or use the built-in "
                               "random-projection extractor");
        return ExternalExtractor(std::string(v));
    }

    std::string id() const { return "external:" + cmd_; }

    Tensor<double> extract(const std::vector<Tensor<double>>& images) const {
        if (images.empty()) throw domain_error("extract: no images");
        namespace fs = std::filesystem;
        static std::atomic<int> counter{0};
        const fs::path dir = fs::temp_directory_path() /
                             ("cellgan_feat_" + std::to_string(::getpid()) + "_" +
                              std::to_string(counter.fetch_add(1)));
        fs::create_directories(dir);
        struct Cleanup {
            fs::path p;
            ~Cleanup() {
                std::error_code ec;
                fs::remove_all(p, ec);
            }
        } cleanup{dir};
        for (size_t i = 0; i < images.size(); ++i) {
            std::ostringstream name;
            name << "img_" << std::setw(5) << std::setfill('0') << i << ".png";
            save_image(dir / name.str(), images[i]);
        }
        const fs::path out = dir / "features.bin";
        const std::string full = cmd_ + " '" + dir.string() + "' '" + out.string() + "'";
        const int rc = std::system(full.c_str());
        if (rc != 0)
            throw state_error("external extractor command failed (exit " + std::to_string(rc) +
                              "): " + cmd_);
        TensorFile<double> tf = TensorFile<double>::read(out);
        Tensor<double> feats = tf.get("features");
        if (feats.rank() != 2)
            throw state_error("external extractor: \"features\" must be [N,D], got rank " +
                              std::to_string(feats.rank()));
        if (feats.dim(0) != static_cast<int>(images.size()))
            throw state_error("external extractor: wrote " + std::to_string(feats.dim(0)) +
                              " feature rows for " + std::to_string(images.size()) + " images");
        return feats;
    }

private:
    std::string cmd_;
};

// ---------------------------------------------------------------------------
// Cached statistics
// ---------------------------------------------------------------------------

// Stats for the (expensive) real side of an FID comparison can be computed
// once and cached. The extractor id is stored alongside so a cache produced
// by one embedding is never silently reused with another.
inline void save_stats(const std::filesystem::path& path, const FeatureStats& stats,
                       const std::string& extractor_id) {
    TensorFile<double> tf;
    tf.put_vector("mean", stats.mean);
    tf.put("cov", stats.cov);
    tf.put_vector("count", {static_cast<double>(stats.count)});
    std::vector<double> id_bytes(extractor_id.size());
    for (size_t i = 0; i < extractor_id.size(); ++i)
        id_bytes[i] = static_cast<double>(static_cast<unsigned char>(extractor_id[i]));
    tf.put_vector("extractor_id", id_bytes);
    tf.write(path);
}

// Loads cached stats; if expected_extractor_id is nonempty it must match the
// id recorded at save time.
inline FeatureStats load_stats(const std::filesystem::path& path,
                               const std::string& expected_extractor_id = "") {
    TensorFile<double> tf = TensorFile<double>::read(path);
    std::vector<double> id_bytes = tf.get_vector("extractor_id");
    std::string id(id_bytes.size(), '\0');
    for (size_t i = 0; i < id_bytes.size(); ++i) id[i] = static_cast<char>(std::lround(id_bytes[i]));
    if (!expected_extractor_id.empty() && id != expected_extractor_id)
        throw state_error("stats cache at " + path.string() + " was built with extractor \"" + id +
                          "\" but \"" + expected_extractor_id + "\" was requested");
    FeatureStats s;
    s.mean = tf.get_vector("mean");
    s.cov = tf.get("cov");
    s.count = std::lround(tf.get_vector("count").at(0));
    const int D = s.dim();
    if (s.cov.rank() != 2 || s.cov.dim(0) != D || s.cov.dim(1) != D)
        throw state_error("stats cache at " + path.string() + " has inconsistent shapes");
    return s;
}

// ---------------------------------------------------------------------------
// FID over image sets
// ---------------------------------------------------------------------------

template <typename Extractor>
inline FeatureStats stats_of_images(const std::vector<Tensor<double>>& images, const Extractor& ex) {
    return compute_stats(ex.extract(images));
}

// Per-class FID: class k of `real` against class k of `fake`, using each
// set's labels. Returns one value per class; report the mean alongside the
// per-class values. Both sets must share the class count and every class
// needs at least two images on each side.
template <typename Extractor>
inline std::vector<double> fid_by_class(const LabeledImageSet<double>& real,
                                        const LabeledImageSet<double>& fake, const Extractor& ex) {
    real.check();
    fake.check();
    const int K = real.num_classes();
    if (fake.num_classes() != K)
        throw config_error("fid_by_class: class count mismatch (" + std::to_string(K) + " vs " +
                           std::to_string(fake.num_classes()) + ")");
    const Tensor<double> fr = ex.extract(real.images);
    const Tensor<double> ff = ex.extract(fake.images);
    const int D = fr.dim(1);
    std::vector<double> out(K);
    for (int k = 0; k < K; ++k) {
        auto gather = [D, k](const Tensor<double>& feats, const std::vector<int>& labels) {
            std::vector<int> idx;
            for (size_t i = 0; i < labels.size(); ++i)
                if (labels[i] == k) idx.push_back(static_cast<int>(i));
            Tensor<double> sub({static_cast<int>(idx.size()), D});
            for (size_t r = 0; r < idx.size(); ++r)
                std::copy_n(feats.data() + static_cast<size_t>(idx[r]) * D, D,
                            sub.data() + r * D);
            return sub;
        };
        const Tensor<double> sr = gather(fr, real.labels);
        const Tensor<double> sf = gather(ff, fake.labels);
        if (sr.dim(0) < 2 || sf.dim(0) < 2)
            throw config_error("fid_by_class: class " + std::to_string(k) +
                               " needs at least 2 images on both sides");
        out[k] = fid(compute_stats(sr), compute_stats(sf));
    }
    return out;
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw domain_error("mean_of: empty");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

// Accuracy plus macro-averaged precision/recall/F1. Per-class values use the
// 0/0 -> 0 convention (a class never predicted has precision 0; a class with
// no true members has recall 0).
struct ClassMetrics {
    double accuracy = 0;
    double precision = 0;  // macro
    double recall = 0;     // macro
    double f1 = 0;         // macro
    std::vector<double> per_class_precision, per_class_recall, per_class_f1;
};

inline ClassMetrics classification_metrics(const std::vector<int>& predicted,
                                           const std::vector<int>& truth, int num_classes) {
    if (predicted.size() != truth.size())
        throw domain_error("classification_metrics: size mismatch");
    if (predicted.empty()) throw domain_error("classification_metrics: empty input");
    if (num_classes < 1) throw domain_error("classification_metrics: num_classes < 1");
    std::vector<long> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    long correct = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
        const int p = predicted[i], t = truth[i];
        if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
            throw domain_error("classification_metrics: label out of range at index " +
                               std::to_string(i));
        if (p == t) {
            ++tp[p];
            ++correct;
        } else {
            ++fp[p];
            ++fn[t];
        }
    }
    ClassMetrics m;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    auto ratio = [](long num, long den) { return den == 0 ? 0.0 : static_cast<double>(num) / den; };
    for (int k = 0; k < num_classes; ++k) {
        const double p = ratio(tp[k], tp[k] + fp[k]);
        const double r = ratio(tp[k], tp[k] + fn[k]);
        const double f = (p + r) == 0 ? 0.0 : 2 * p * r / (p + r);
        m.per_class_precision.push_back(p);
        m.per_class_recall.push_back(r);
        m.per_class_f1.push_back(f);
        m.precision += p;
        m.recall += r;
        m.f1 += f;
    }
    m.precision /= num_classes;
    m.recall /= num_classes;
    m.f1 /= num_classes;
    return m;
}

// ---------------------------------------------------------------------------
// Augmentation benchmark
// ---------------------------------------------------------------------------

// Cross-validation plan for the classifier augmentation benchmark. Defaults
// mirror the full-scale evaluation recipe; desk-scale runs shrink the counts
// and usually raise the learning rate (the full recipe assumes many more
// optimization steps than a small smoke run takes).
struct CVPlan {
    int images_per_class = 400;  // real images used per class, split across folds
    int folds = 5;
    int synth_per_class = 2000;  // synthetic images added to every training fold
    double classifier_lr = 1e-4;
    int classifier_batch = 64;
    int classifier_epochs = 30;
    bool random_flip = true;  // horizontal-flip augmentation while fitting
    std::uint64_t seed = 0;

    void validate() const {
        if (folds < 2) throw config_error("cv plan: folds must be >= 2");
        if (images_per_class < folds)
            throw config_error("cv plan: images_per_class must be >= folds");
        if (images_per_class % folds != 0)
            throw config_error("cv plan: images_per_class (" + std::to_string(images_per_class) +
                               ") must divide evenly into " + std::to_string(folds) + " folds");
        if (synth_per_class < 0) throw config_error("cv plan: synth_per_class must be >= 0");
        if (classifier_lr <= 0) throw config_error("cv plan: classifier_lr must be positive");
        if (classifier_batch < 1) throw config_error("cv plan: classifier_batch must be >= 1");
        if (classifier_epochs < 1) throw config_error("cv plan: classifier_epochs must be >= 1");
    }
};

// Classifier interface used by the benchmark. fit() sees training images and
// labels; predict() sees images only (labels in the argument set are ignored
// by real classifiers -- the oracle below uses them, which is exactly why it
// exists only as a harness check).
class Classifier {
public:
    virtual ~Classifier() = default;
    virtual void fit(const LabeledImageSet<double>& train, const CVPlan& plan, Rng& rng) = 0;
    virtual std::vector<int> predict(const LabeledImageSet<double>& test) = 0;
};

using ClassifierBuilder =
    std::function<std::unique_ptr<Classifier>(int num_classes, int resolution)>;

namespace detail {

inline Tensor<double> flip_horizontal(const Tensor<double>& img) {
    Tensor<double> out(std::vector<int>(img.shape().begin(), img.shape().end()));
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y) {
            const double* src = img.data() + (static_cast<size_t>(c) * H + y) * W;
            double* dst = out.data() + (static_cast<size_t>(c) * H + y) * W;
            for (int x = 0; x < W; ++x) dst[x] = src[W - 1 - x];
        }
    return out;
}

}  // namespace detail

// Small convolutional classifier: three stride-2 3x3 conv blocks
// (3->16->32->64 channels) with leaky ReLU, global average pooling, and a
// linear head, trained with plain SGD on softmax cross-entropy. Weights are
// He-initialized from the Rng passed to fit(), so runs are reproducible.
class SmallCnnClassifier : public Classifier {
public:
    SmallCnnClassifier(int num_classes, int resolution)
        : num_classes_(num_classes), resolution_(resolution) {
        if (num_classes < 1) throw config_error("classifier: num_classes must be >= 1");
        if (resolution < 8) throw config_error("classifier: resolution must be >= 8");
    }

    void fit(const LabeledImageSet<double>& train, const CVPlan& plan, Rng& rng) override {
        train.check();
        if (train.num_classes() > num_classes_)
            throw config_error("classifier: training labels exceed num_classes");
        if (train.resolution() != resolution_)
            throw config_error("classifier: training resolution " +
                               std::to_string(train.resolution()) + " != expected " +
                               std::to_string(resolution_));
        init_params(rng);
        const int N = static_cast<int>(train.images.size());
        const int B = std::min(plan.classifier_batch, N);
        std::vector<int> order(N);
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < plan.classifier_epochs; ++epoch) {
            // Fisher-Yates shuffle driven by the benchmark's stream.
            for (int i = N - 1; i > 0; --i) {
                const int j = rng.uniform_int(i + 1);
                std::swap(order[i], order[j]);
            }
            for (int start = 0; start + B <= N; start += B) {
                std::vector<Tensor<double>> batch_imgs;
                std::vector<int> batch_labels;
                batch_imgs.reserve(B);
                for (int i = start; i < start + B; ++i) {
                    const int idx = order[i];
                    const bool flip = plan.random_flip && rng.uniform() < 0.5;
                    batch_imgs.push_back(flip ? detail::flip_horizontal(train.images[idx])
                                              : train.images[idx].clone());
                    batch_labels.push_back(train.labels[idx]);
                }
                std::vector<int> all(batch_imgs.size());
                std::iota(all.begin(), all.end(), 0);
                Tensor<double> xb = stack_images(batch_imgs, all);
                params_.zero_grads();
                Graph<double> g;
                Value logits = forward(g, g.input(std::move(xb)));
                Value loss = softmax_cross_entropy(g, logits, batch_labels);
                g.backward(loss);
                g.add_param_grads();
                for (int p = 0; p < params_.count(); ++p) {
                    auto& par = params_.at(p);
                    axpy(-plan.classifier_lr, par.grad, par.value);
                }
            }
        }
        fitted_ = true;
    }

    std::vector<int> predict(const LabeledImageSet<double>& test) override {
        if (!fitted_) throw state_error("classifier: predict before fit");
        std::vector<int> out;
        out.reserve(test.images.size());
        const int B = 32;
        for (size_t start = 0; start < test.images.size(); start += B) {
            const size_t stop = std::min(test.images.size(), start + B);
            std::vector<int> idx;
            for (size_t i = start; i < stop; ++i) idx.push_back(static_cast<int>(i));
            Tensor<double> xb = stack_images(test.images, idx);
            Graph<double> g;
            Value logits = forward(g, g.input(std::move(xb)));
            const Tensor<double>& lv = g.val(logits);
            for (int b = 0; b < lv.dim(0); ++b) {
                const double* row = lv.data() + static_cast<size_t>(b) * num_classes_;
                out.push_back(static_cast<int>(
                    std::max_element(row, row + num_classes_) - row));
            }
        }
        return out;
    }

private:
    void init_params(Rng& rng) {
        params_ = ParamStore<double>();
        auto conv = [&](const std::string& name, int cin, int cout) {
            Tensor<double> w({cout, cin, 3, 3});
            rng.fill_normal(w, 0.0, std::sqrt(2.0 / (cin * 9.0)));
            ids_.push_back(params_.add(name + ".w", std::move(w)));
            ids_.push_back(params_.add(name + ".b", Tensor<double>({cout})));
        };
        ids_.clear();
        conv("conv1", 3, 16);
        conv("conv2", 16, 32);
        conv("conv3", 32, 64);
        Tensor<double> fw({num_classes_, 64});
        rng.fill_normal(fw, 0.0, std::sqrt(2.0 / 64.0));
        ids_.push_back(params_.add("fc.w", std::move(fw)));
        ids_.push_back(params_.add("fc.b", Tensor<double>({num_classes_})));
    }

    Value forward(Graph<double>& g, Value x) {
        Value h = x;
        for (int block = 0; block < 3; ++block) {
            Value w = g.param(params_, ids_[static_cast<size_t>(block) * 2]);
            Value b = g.param(params_, ids_[static_cast<size_t>(block) * 2 + 1]);
            h = leaky_relu(g, conv2d(g, h, w, b, 2, 1), 0.2);
        }
        const Tensor<double>& hv = g.val(h);
        const double inv_area = 1.0 / (hv.dim(2) * hv.dim(3));
        Value pooled = affine_scalar(g, sum_spatial(g, h), inv_area, 0.0);
        return linear(g, pooled, g.param(params_, ids_[6]), g.param(params_, ids_[7]));
    }

    int num_classes_, resolution_;
    ParamStore<double> params_;
    std::vector<int> ids_;
    bool fitted_ = false;
};

// Harness-validation classifiers. The oracle reads the true labels at
// predict time (perfect scores by construction); the constant classifier
// always answers one class. Neither is a real model -- they pin down the
// benchmark arithmetic in tests and smoke runs.
class OracleClassifier : public Classifier {
public:
    void fit(const LabeledImageSet<double>&, const CVPlan&, Rng&) override {}
    std::vector<int> predict(const LabeledImageSet<double>& test) override { return test.labels; }
};

class ConstantClassifier : public Classifier {
public:
    explicit ConstantClassifier(int klass) : klass_(klass) {}
    void fit(const LabeledImageSet<double>&, const CVPlan&, Rng&) override {}
    std::vector<int> predict(const LabeledImageSet<double>& test) override {
        return std::vector<int>(test.labels.size(), klass_);
    }

private:
    int klass_;
};

inline ClassifierBuilder small_cnn_builder() {
    return [](int num_classes, int resolution) -> std::unique_ptr<Classifier> {
        return std::make_unique<SmallCnnClassifier>(num_classes, resolution);
    };
}

struct BenchmarkResult {
    std::vector<ClassMetrics> folds;
    ClassMetrics mean;
    ClassMetrics stdev;  // sample standard deviation across folds
};

namespace detail {

inline ClassMetrics metrics_mean(const std::vector<ClassMetrics>& v) {
    ClassMetrics m;
    for (const auto& f : v) {
        m.accuracy += f.accuracy;
        m.precision += f.precision;
        m.recall += f.recall;
        m.f1 += f.f1;
    }
    const double n = static_cast<double>(v.size());
    m.accuracy /= n;
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    return m;
}

inline ClassMetrics metrics_stdev(const std::vector<ClassMetrics>& v, const ClassMetrics& mean) {
    ClassMetrics s;
    if (v.size() < 2) return s;
    for (const auto& f : v) {
        s.accuracy += (f.accuracy - mean.accuracy) * (f.accuracy - mean.accuracy);
        s.precision += (f.precision - mean.precision) * (f.precision - mean.precision);
        s.recall += (f.recall - mean.recall) * (f.recall - mean.recall);
        s.f1 += (f.f1 - mean.f1) * (f.f1 - mean.f1);
    }
    const double n = static_cast<double>(v.size() - 1);
    s.accuracy = std::sqrt(s.accuracy / n);
    s.precision = std::sqrt(s.precision / n);
    s.recall = std::sqrt(s.recall / n);
    s.f1 = std::sqrt(s.f1 / n);
    return s;
}

}  // namespace detail

// k-fold classifier augmentation benchmark. Real images are split per class
// into `plan.folds` groups; fold f trains a fresh classifier on the other
// groups (plus, when `synth` is nonnull, up to synth_per_class synthetic
// images per class) and evaluates on group f. Synthetic images never enter a
// test set. Returns per-fold metrics with mean and sample std.
inline BenchmarkResult augmentation_benchmark(const LabeledImageSet<double>& real,
                                              const LabeledImageSet<double>* synth,
                                              const CVPlan& plan, const ClassifierBuilder& build) {
    plan.validate();
    real.check();
    const int K = real.num_classes();
    const int R = real.resolution();
    const int per_fold = plan.images_per_class / plan.folds;

    // Deterministic per-class subsample of the real set.
    Rng rng(plan.seed);
    std::vector<std::vector<int>> chosen(K);  // [class][images_per_class] real indices
    for (int k = 0; k < K; ++k) {
        std::vector<int> idx;
        for (size_t i = 0; i < real.labels.size(); ++i)
            if (real.labels[i] == k) idx.push_back(static_cast<int>(i));
        if (static_cast<int>(idx.size()) < plan.images_per_class)
            throw config_error("benchmark: class " + real.class_names[k] + " has " +
                               std::to_string(idx.size()) + " images, plan needs " +
                               std::to_string(plan.images_per_class));
        for (size_t i = idx.size() - 1; i > 0; --i) {
            const size_t j = rng.uniform_int(static_cast<int>(i) + 1);
            std::swap(idx[i], idx[j]);
        }
        chosen[k].assign(idx.begin(), idx.begin() + plan.images_per_class);
    }

    // Deterministic per-class pick of synthetic images.
    std::vector<std::vector<int>> synth_idx(K);
    if (synth != nullptr && plan.synth_per_class > 0) {
        synth->check();
        if (synth->num_classes() > K)
            throw config_error("benchmark: synthetic set has more classes than the real set");
        if (synth->resolution() != R)
            throw config_error("benchmark: synthetic resolution " +
                               std::to_string(synth->resolution()) + " != real resolution " +
                               std::to_string(R));
        for (int k = 0; k < K; ++k) {
            std::vector<int> idx;
            for (size_t i = 0; i < synth->labels.size(); ++i)
                if (synth->labels[i] == k) idx.push_back(static_cast<int>(i));
            if (idx.empty())
                throw config_error("benchmark: synthetic set has no images for class " +
                                   real.class_names[k]);
            for (size_t i = idx.size() - 1; i > 0; --i) {
                const size_t j = rng.uniform_int(static_cast<int>(i) + 1);
                std::swap(idx[i], idx[j]);
            }
            const int take = std::min<int>(plan.synth_per_class, static_cast<int>(idx.size()));
            synth_idx[k].assign(idx.begin(), idx.begin() + take);
        }
    }

    BenchmarkResult result;
    for (int f = 0; f < plan.folds; ++f) {
        LabeledImageSet<double> train, test;
        train.class_names = real.class_names;
        test.class_names = real.class_names;
        for (int k = 0; k < K; ++k) {
            for (int i = 0; i < plan.images_per_class; ++i) {
                const int src = chosen[k][i];
                const bool in_test = (i / per_fold) == f;
                auto& dst = in_test ? test : train;
                dst.images.push_back(real.images[src].clone());
                dst.labels.push_back(k);
            }
            for (const int s : synth_idx[k]) {
                train.images.push_back(synth->images[s].clone());
                train.labels.push_back(k);
            }
        }
        auto clf = build(K, R);
        Rng fold_rng(plan.seed + 1000003ULL * static_cast<std::uint64_t>(f + 1));
        clf->fit(train, plan, fold_rng);
        result.folds.push_back(classification_metrics(clf->predict(test), test.labels, K));
    }
    result.mean = detail::metrics_mean(result.folds);
    result.stdev = detail::metrics_stdev(result.folds, result.mean);
    return result;
}

// Writes benchmark rows as CSV: one row per setting, four metrics as
// mean/std column pairs.
inline void write_benchmark_csv(const std::filesystem::path& path,
                                const std::vector<std::pair<std::string, BenchmarkResult>>& rows) {
    std::ofstream out(path);
    if (!out) throw state_error("cannot write benchmark csv: " + path.string());
    out << "setting,accuracy_mean,accuracy_std,precision_mean,precision_std,"
           "recall_mean,recall_std,f1_mean,f1_std\n";
    out << std::setprecision(10);
    for (const auto& [name, r] : rows)
        out << name << ',' << r.mean.accuracy << ',' << r.stdev.accuracy << ',' << r.mean.precision
            << ',' << r.stdev.precision << ',' << r.mean.recall << ',' << r.stdev.recall << ','
            << r.mean.f1 << ',' << r.stdev.f1 << '\n';
}

}  // namespace cellgan
