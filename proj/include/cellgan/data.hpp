#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellgan/image_io.hpp"
#include "cellgan/rng.hpp"
#include "cellgan/tensor.hpp"

namespace cellgan {

/// A labeled image collection: per-item [3, R, R] tensors in [-1, 1].
template <typename T>
struct LabeledImageSet {
    std::vector<Tensor<T>> images;
    std::vector<int> labels;
    std::vector<std::string> class_names;  // ordered; label k names class_names[k]

    int num_classes() const { return static_cast<int>(class_names.size()); }
    int size() const { return static_cast<int>(images.size()); }
    int resolution() const { return images.empty() ? 0 : images.front().dim(1); }

    void check() const {
        if (images.size() != labels.size())
            throw state_error("LabeledImageSet: images/labels size mismatch");
        for (int y : labels)
            if (y < 0 || y >= num_classes())
                throw state_error("LabeledImageSet: label out of range");
        for (const auto& im : images)
            if (im.rank() != 3 || im.dim(0) != 3 || im.dim(1) != resolution() ||
                im.dim(2) != resolution())
                throw state_error("LabeledImageSet: inconsistent image shape");
    }
};

/// The two reconstruction targets derived from one real batch; `quadrant`
/// must be the same index handed to the discriminator's crop decoder.
template <typename T>
struct RealTargetPair {
    Tensor<T> resized;  // [B, 3, R/2, R/2]
    Tensor<T> cropped;  // [B, 3, R/2, R/2]
    int quadrant = 0;
};

/// Configuration of the procedural toy-cell dataset.
struct ToySpec {
    int num_classes = 3;
    int images_per_class = 100;
    int resolution = 64;
    std::vector<double> nucleus_ratios = {0.2, 0.45, 0.7};  // per class, increasing
    int cells_min = 2;
    int cells_max = 3;
    bool overlap_allowed = true;
    uint64_t seed = 0;

    void validate() const {
        if (num_classes < 1) throw config_error("ToySpec: num_classes must be >= 1");
        if (images_per_class < 1) throw config_error("ToySpec: images_per_class must be >= 1");
        if (resolution < 8 || (resolution & (resolution - 1)) != 0)
            throw config_error("ToySpec: resolution must be a power of two >= 8");
        if (static_cast<int>(nucleus_ratios.size()) != num_classes)
            throw config_error("ToySpec: need one nucleus ratio per class");
        for (int k = 0; k < num_classes; ++k) {
            if (nucleus_ratios[k] <= 0.0 || nucleus_ratios[k] >= 1.0)
                throw config_error("ToySpec: nucleus ratios must lie in (0, 1)");
            if (k > 0 && nucleus_ratios[k] <= nucleus_ratios[k - 1])
                throw config_error("ToySpec: nucleus ratios must be strictly increasing");
        }
        if (cells_min < 1 || cells_max < cells_min)
            throw config_error("ToySpec: bad cells_per_image range");
    }
};

// ---------------------------------------------------------------------------
// Target transforms
// ---------------------------------------------------------------------------

/// Bilinear 1/2 downsample of a batch [B, 3, H, W] -> [B, 3, H/2, W/2].
/// With half-pixel-centered sampling an exact 1/2 reduction averages each
/// 2x2 block, which is what the hand-computed checkerboard example pins.
template <typename T>
inline Tensor<T> transform_half_downsample(const Tensor<T>& batch) {
    if (batch.rank() != 4)
        throw domain_error("transform_half_downsample: expected [B,C,H,W]");
    const int B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw domain_error("transform_half_downsample: resolution must be even");
    const int oh = H / 2, ow = W / 2;
    Tensor<T> out({B, C, oh, ow});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    const size_t base = ((static_cast<size_t>(b) * C + c) * H + 2 * y) * W + 2 * x;
                    const double v = 0.25 * (static_cast<double>(batch[base]) +
                                             static_cast<double>(batch[base + 1]) +
                                             static_cast<double>(batch[base + W]) +
                                             static_cast<double>(batch[base + W + 1]));
                    out[((static_cast<size_t>(b) * C + c) * oh + y) * ow + x] = static_cast<T>(v);
                }
    return out;
}

/// Extract one (H/2 x W/2) corner of a batch [B, C, H, W].
/// Quadrants: 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right,
/// matching the discriminator's crop-decoder feature quadrants.
template <typename T>
inline Tensor<T> transform_quarter_crop(const Tensor<T>& batch, int quadrant) {
    if (batch.rank() != 4) throw domain_error("transform_quarter_crop: expected [B,C,H,W]");
    if (quadrant < 0 || quadrant > 3)
        throw domain_error("transform_quarter_crop: quadrant must be in 0..3");
    const int B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw domain_error("transform_quarter_crop: resolution must be even");
    const int oh = H / 2, ow = W / 2;
    const int r0 = (quadrant / 2) * oh, c0 = (quadrant % 2) * ow;
    Tensor<T> out({B, C, oh, ow});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x)
                    out[((static_cast<size_t>(b) * C + c) * oh + y) * ow + x] =
                        batch[((static_cast<size_t>(b) * C + c) * H + r0 + y) * W + c0 + x];
    return out;
}

/// Build both reconstruction targets from one real batch.
template <typename T>
inline RealTargetPair<T> make_real_targets(const Tensor<T>& batch, int quadrant) {
    RealTargetPair<T> out;
    out.resized = transform_half_downsample(batch);
    out.cropped = transform_quarter_crop(batch, quadrant);
    out.quadrant = quadrant;
    return out;
}

/// Stack selected per-item images [3, R, R] into a batch [B, 3, R, R].
template <typename T>
inline Tensor<T> stack_images(const std::vector<Tensor<T>>& images, const std::vector<int>& idx) {
    if (idx.empty()) throw domain_error("stack_images: empty selection");
    const Tensor<T>& first = images.at(static_cast<size_t>(idx[0]));
    const int C = first.dim(0), H = first.dim(1), W = first.dim(2);
    Tensor<T> out({static_cast<int>(idx.size()), C, H, W});
    const size_t per = first.size();
    for (size_t b = 0; b < idx.size(); ++b) {
        const Tensor<T>& im = images.at(static_cast<size_t>(idx[b]));
        if (!im.same_shape(first)) throw domain_error("stack_images: mixed image shapes");
        for (size_t i = 0; i < per; ++i) out[b * per + i] = im[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline bool has_image_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e == ".png" || e == ".jpg" || e == ".jpeg";
}

}  // namespace detail

/// Load `<root>/<class_name>/*.png|jpg`. Class index = lexicographic rank of
/// the subdirectory name; pixels are mapped to [-1, 1]. If `resolution` > 0,
/// images are bilinearly resized to it; otherwise all images must already
/// share one square resolution.
template <typename T>
inline LabeledImageSet<T> load_dataset(const std::string& root, int resolution = 0) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw config_error("load_dataset: no such directory " + root);

    LabeledImageSet<T> set;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) set.class_names.push_back(entry.path().filename().string());
    std::sort(set.class_names.begin(), set.class_names.end());
    if (set.class_names.empty())
        throw config_error("load_dataset: no class subdirectories under " + root);

    for (int k = 0; k < set.num_classes(); ++k) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(fs::path(root) / set.class_names[k]))
            if (entry.is_regular_file() && detail::has_image_ext(entry.path()))
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        if (files.empty())
            throw config_error("load_dataset: class '" + set.class_names[k] + "' has no images");
        for (const auto& f : files) {
            Tensor<T> img = load_image<T>(f.string());
            if (resolution > 0 && (img.dim(1) != resolution || img.dim(2) != resolution))
                img = bilinear_resize(img, resolution, resolution);
            set.images.push_back(std::move(img));
            set.labels.push_back(k);
        }
    }
    for (const auto& im : set.images)
        if (im.dim(1) != set.resolution() || im.dim(2) != set.resolution())
            throw domain_error(
                "load_dataset: mixed image resolutions; pass an explicit resolution");
    return set;
}

// ---------------------------------------------------------------------------
// Procedural toy-cell dataset
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void fill_ellipse(Tensor<T>& img, double cx, double cy, double rx, double ry,
                         double angle, const double color[3]) {
    const int H = img.dim(1), W = img.dim(2);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - std::max(rx, ry) - 1)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + std::max(rx, ry) + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - std::max(rx, ry) - 1)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + std::max(rx, ry) + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
            const double u = (ca * dx + sa * dy) / rx, v = (-sa * dx + ca * dy) / ry;
            if (u * u + v * v <= 1.0)
                for (int c = 0; c < 3; ++c)
                    img[(static_cast<size_t>(c) * H + y) * W + x] = static_cast<T>(color[c]);
        }
}

struct ToyCell {
    double cx, cy, rx, ry, angle;
    double cyto[3];
    double nf;  // nucleus radius fraction
    double nucleus[3];
};

}  // namespace detail

/// Synthesize one toy image of class k. Draw order is fixed so the dataset is
/// bit-reproducible: background tint (3), per-pixel noise (3*R*R), cell count,
/// then per cell center/radii/angle/cytoplasm color/nucleus fraction/color.
template <typename T>
inline Tensor<T> make_toy_image(const ToySpec& spec, int k, Rng& rng) {
    const int R = spec.resolution;
    Tensor<T> img({3, R, R});

    double bg[3];
    for (double& c : bg) c = rng.uniform(0.55, 0.78);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < R * R; ++i)
            img[static_cast<size_t>(c) * R * R + i] =
                static_cast<T>(bg[c] + rng.uniform(-0.02, 0.02));

    const int n_cells = spec.cells_min + rng.uniform_int(spec.cells_max - spec.cells_min + 1);
    std::vector<detail::ToyCell> cells;
    for (int j = 0; j < n_cells; ++j) {
        detail::ToyCell cell;
        for (int attempt = 0;; ++attempt) {
            cell.cx = rng.uniform(0.18, 0.82) * R;
            cell.cy = rng.uniform(0.18, 0.82) * R;
            if (spec.overlap_allowed || attempt >= 20) break;
            bool clear = true;
            for (const auto& other : cells) {
                const double d = std::hypot(cell.cx - other.cx, cell.cy - other.cy);
                if (d < 0.9 * (0.2 * R + std::max(other.rx, other.ry))) clear = false;
            }
            if (clear) break;
        }
        cell.rx = rng.uniform(0.14, 0.20) * R;
        cell.ry = rng.uniform(0.14, 0.20) * R;
        cell.angle = rng.uniform(0.0, 3.14159265358979323846);
        for (double& c : cell.cyto) c = rng.uniform(0.10, 0.40);
        cell.nf = std::clamp(spec.nucleus_ratios[static_cast<size_t>(k)] + 0.03 * rng.normal(),
                             0.05, 0.92);
        for (double& c : cell.nucleus) c = rng.uniform(-0.80, -0.50);
        cells.push_back(cell);
    }

    // Paint all cytoplasms first, then all nuclei, so nuclei of overlapping
    // cells are never covered by a later cytoplasm.
    for (const auto& cell : cells)
        detail::fill_ellipse(img, cell.cx, cell.cy, cell.rx, cell.ry, cell.angle, cell.cyto);
    for (const auto& cell : cells)
        detail::fill_ellipse(img, cell.cx, cell.cy, cell.nf * cell.rx, cell.nf * cell.ry,
                             cell.angle, cell.nucleus);

    for (size_t i = 0; i < img.size(); ++i)
        img[i] = static_cast<T>(std::clamp(static_cast<double>(img[i]), -1.0, 1.0));
    return img;
}

/// Build the toy dataset in memory: class-major order, exactly
/// images_per_class per class, deterministic under spec.seed.
template <typename T>
inline LabeledImageSet<T> make_toy_dataset(const ToySpec& spec) {
    spec.validate();
    LabeledImageSet<T> set;
    for (int k = 0; k < spec.num_classes; ++k) set.class_names.push_back("class" + std::to_string(k));
    Rng rng(spec.seed);
    for (int k = 0; k < spec.num_classes; ++k)
        for (int i = 0; i < spec.images_per_class; ++i) {
            set.images.push_back(make_toy_image<T>(spec, k, rng));
            set.labels.push_back(k);
        }
    return set;
}

/// Generate the toy dataset and write it as `<root>/<class>/class<k>_<i>.png`
/// plus a manifest.json echoing the generation parameters and seed.
template <typename T>
inline void write_toy_dataset(const std::string& root, const ToySpec& spec) {
    namespace fs = std::filesystem;
    LabeledImageSet<T> set = make_toy_dataset<T>(spec);
    fs::create_directories(root);
    std::vector<int> counter(static_cast<size_t>(spec.num_classes), 0);
    for (int i = 0; i < set.size(); ++i) {
        const int k = set.labels[static_cast<size_t>(i)];
        const fs::path dir = fs::path(root) / set.class_names[static_cast<size_t>(k)];
        fs::create_directories(dir);
        const std::string name =
            "class" + std::to_string(k) + "_" + std::to_string(counter[static_cast<size_t>(k)]++) +
            ".png";
        save_image((dir / name).string(), set.images[static_cast<size_t>(i)]);
    }
    nlohmann::json manifest;
    manifest["dataset"] = "toy-cells";
    manifest["num_classes"] = spec.num_classes;
    manifest["images_per_class"] = spec.images_per_class;
    manifest["resolution"] = spec.resolution;
    manifest["nucleus_ratios"] = spec.nucleus_ratios;
    manifest["cells_min"] = spec.cells_min;
    manifest["cells_max"] = spec.cells_max;
    manifest["overlap_allowed"] = spec.overlap_allowed;
    manifest["seed"] = spec.seed;
    std::ofstream out(fs::path(root) / "manifest.json");
    if (!out) throw state_error("write_toy_dataset: cannot write manifest under " + root);
    out << manifest.dump(2) << "\n";
}

}  // namespace cellgan
