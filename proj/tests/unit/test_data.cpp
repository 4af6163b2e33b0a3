// Dataset layer: PNG round trips, directory ingestion, the two target
// transforms, and the procedural toy-cell dataset. Hand-computed values
// (checkerboard average, pixel scaling) are asserted against constants
// derived here, and the pixel-quadrant <-> feature-quadrant alignment is
// checked against the discriminator's crop decoder behaviorally.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>
#include <nlohmann/json.hpp>

#include "cellgan/data.hpp"
#include "cellgan/discriminator.hpp"
#include "cellgan/image_io.hpp"

using namespace cellgan;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Tensor<double> constant_image(int res, double r, double g, double b) {
    Tensor<double> img({3, res, res});
    for (int i = 0; i < res * res; ++i) {
        img[static_cast<size_t>(0) * res * res + i] = r;
        img[static_cast<size_t>(1) * res * res + i] = g;
        img[static_cast<size_t>(2) * res * res + i] = b;
    }
    return img;
}

double luminance(const Tensor<double>& img, int y, int x) {
    const int H = img.dim(1), W = img.dim(2);
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += img[(static_cast<size_t>(c) * H + y) * W + x];
    return s / 3.0;
}

// Nucleus-area proxy: fraction of dark pixels, optionally normalized by the
// fraction of cell pixels (background is clearly separated by construction).
void pixel_stats(const Tensor<double>& img, double& dark_frac, double& proxy) {
    const int H = img.dim(1), W = img.dim(2);
    int dark = 0, cell = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double lum = luminance(img, y, x);
            if (lum < -0.2) ++dark;
            if (lum < 0.45) ++cell;
        }
    dark_frac = static_cast<double>(dark) / (H * W);
    proxy = static_cast<double>(dark) / std::max(cell, 1);
}

}  // namespace

TEST_CASE("toy spec validation", "[data]") {
    ToySpec spec;
    REQUIRE_NOTHROW(spec.validate());

    ToySpec bad = spec;
    bad.nucleus_ratios = {0.2, 0.2, 0.7};
    REQUIRE_THROWS_AS(bad.validate(), config_error);
    bad.nucleus_ratios = {0.7, 0.45, 0.2};
    REQUIRE_THROWS_AS(bad.validate(), config_error);
    bad.nucleus_ratios = {0.2, 0.45};
    REQUIRE_THROWS_AS(bad.validate(), config_error);

    bad = spec;
    bad.resolution = 48;
    REQUIRE_THROWS_AS(bad.validate(), config_error);
    bad.resolution = 0;
    REQUIRE_THROWS_AS(bad.validate(), config_error);

    bad = spec;
    bad.cells_min = 3;
    bad.cells_max = 2;
    REQUIRE_THROWS_AS(bad.validate(), config_error);

    bad = spec;
    bad.images_per_class = 0;
    REQUIRE_THROWS_AS(bad.validate(), config_error);
}

TEST_CASE("png round trip maps pixels to 2*(v/255)-1", "[data]") {
    const fs::path dir = fresh_dir("cellgan_test_png_roundtrip");

    // Values exactly on the 8-bit grid survive the round trip to double
    // precision; arbitrary values come back within one quantization step.
    Tensor<double> img({3, 4, 4});
    Rng rng(11);
    for (size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform(-1.0, 1.0);
    // Pin a few hand-chosen bytes in channel order R, G, B at pixel (0, 0).
    img[0 * 16 + 0] = 2.0 * (200.0 / 255.0) - 1.0;
    img[1 * 16 + 0] = 2.0 * (17.0 / 255.0) - 1.0;
    img[2 * 16 + 0] = 2.0 * (255.0 / 255.0) - 1.0;

    const std::string path = (dir / "probe.png").string();
    save_image(path, img);
    Tensor<double> back = load_image<double>(path);

    REQUIRE(back.rank() == 3);
    REQUIRE(back.dim(0) == 3);
    REQUIRE(back.dim(1) == 4);
    REQUIRE(back.dim(2) == 4);
    for (size_t i = 0; i < img.size(); ++i)
        REQUIRE(back[i] == Approx(img[i]).margin(1.0 / 255.0));
    // Grid-aligned bytes are exact (up to double rounding of the same formula).
    REQUIRE(back[0 * 16 + 0] == Approx(2.0 * (200.0 / 255.0) - 1.0).margin(1e-12));
    REQUIRE(back[1 * 16 + 0] == Approx(2.0 * (17.0 / 255.0) - 1.0).margin(1e-12));
    REQUIRE(back[2 * 16 + 0] == Approx(1.0).margin(1e-12));

    // Out-of-range values are clamped on write, not wrapped.
    Tensor<double> wild({3, 2, 2});
    for (size_t i = 0; i < wild.size(); ++i) wild[i] = (i % 2 == 0) ? 3.5 : -2.0;
    save_image(path, wild);
    back = load_image<double>(path);
    for (size_t i = 0; i < wild.size(); ++i)
        REQUIRE(back[i] == Approx(i % 2 == 0 ? 1.0 : -1.0).margin(1e-12));

    REQUIRE_THROWS_AS(load_image<double>((dir / "absent.png").string()), state_error);
    fs::remove_all(dir);
}

TEST_CASE("load_dataset: counts, lexicographic classes, named errors", "[data]") {
    const fs::path root = fresh_dir("cellgan_test_load_dataset");

    // Directories created out of order; ranking must be lexicographic.
    fs::create_directories(root / "NILM");
    fs::create_directories(root / "ASC-H");
    for (int i = 0; i < 3; ++i) {
        save_image((root / "ASC-H" / ("a" + std::to_string(i) + ".png")).string(),
                   constant_image(8, -0.5, 0.0, 0.5));
        save_image((root / "NILM" / ("n" + std::to_string(i) + ".png")).string(),
                   constant_image(8, 0.5, 0.0, -0.5));
    }
    // A stray regular file at the root (e.g. a manifest) must be ignored.
    std::ofstream(root / "manifest.json") << "{}\n";

    LabeledImageSet<double> set = load_dataset<double>(root.string());
    set.check();
    REQUIRE(set.size() == 6);
    REQUIRE(set.class_names == std::vector<std::string>{"ASC-H", "NILM"});
    REQUIRE(set.labels == std::vector<int>{0, 0, 0, 1, 1, 1});
    REQUIRE(set.resolution() == 8);
    // Contents confirm the label <-> directory mapping.
    REQUIRE(set.images[0][0] == Approx(-0.5).margin(1.0 / 255.0));
    REQUIRE(set.images[5][0] == Approx(0.5).margin(1.0 / 255.0));

    SECTION("empty class directory is an error naming the class") {
        fs::create_directories(root / "LSIL");
        try {
            load_dataset<double>(root.string());
            FAIL("expected config_error");
        } catch (const config_error& e) {
            REQUIRE(std::string(e.what()).find("LSIL") != std::string::npos);
        }
    }

    SECTION("unreadable image file is an error naming the file") {
        std::ofstream(root / "NILM" / "broken.png") << "this is not a png";
        try {
            load_dataset<double>(root.string());
            FAIL("expected state_error");
        } catch (const state_error& e) {
            REQUIRE(std::string(e.what()).find("broken.png") != std::string::npos);
        }
    }

    SECTION("missing root and root without class dirs are errors") {
        REQUIRE_THROWS_AS(load_dataset<double>((root / "nowhere").string()), config_error);
        const fs::path bare = fresh_dir("cellgan_test_bare_root");
        REQUIRE_THROWS_AS(load_dataset<double>(bare.string()), config_error);
        fs::remove_all(bare);
    }

    SECTION("explicit resolution resizes on load") {
        LabeledImageSet<double> small = load_dataset<double>(root.string(), 4);
        REQUIRE(small.resolution() == 4);
        REQUIRE(small.size() == 6);
        // Bilinear resize of a constant image stays constant.
        for (size_t i = 0; i < small.images[0].size(); ++i) {
            const int c = static_cast<int>(i) / 16;
            const double expect = c == 0 ? -0.5 : (c == 1 ? 0.0 : 0.5);
            REQUIRE(small.images[0][i] == Approx(expect).margin(1.0 / 255.0));
        }
    }

    fs::remove_all(root);
}

TEST_CASE("half downsample: constants, checkerboard, block average", "[data]") {
    // Constant image stays constant at half the resolution.
    Tensor<double> batch({2, 3, 8, 8});
    for (size_t i = 0; i < batch.size(); ++i) batch[i] = (i < batch.size() / 2) ? 0.3 : -0.7;
    Tensor<double> half = transform_half_downsample(batch);
    REQUIRE(half.shape() == std::vector<int>{2, 3, 4, 4});
    for (size_t i = 0; i < half.size(); ++i)
        REQUIRE(half[i] == Approx(i < half.size() / 2 ? 0.3 : -0.7).margin(1e-12));

    // 2x2 checkerboard {0,1} -> single pixel 0.5 (hand-computed average).
    Tensor<double> cb({1, 1, 2, 2}, {0.0, 1.0, 1.0, 0.0});
    Tensor<double> one = transform_half_downsample(cb);
    REQUIRE(one.shape() == std::vector<int>{1, 1, 1, 1});
    REQUIRE(one[0] == Approx(0.5).epsilon(1e-6));

    // General case: each output pixel is the mean of its 2x2 source block.
    Rng rng(5);
    Tensor<double> x({1, 2, 6, 4});
    for (size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
    Tensor<double> y = transform_half_downsample(x);
    REQUIRE(y.shape() == std::vector<int>{1, 2, 3, 2});
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 2; ++j) {
                const size_t base = ((static_cast<size_t>(c)) * 6 + 2 * i) * 4 + 2 * j;
                const double mean = 0.25 * (x[base] + x[base + 1] + x[base + 4] + x[base + 5]);
                REQUIRE(y[(static_cast<size_t>(c) * 3 + i) * 2 + j] ==
                        Approx(mean).margin(1e-12));
            }

    REQUIRE_THROWS_AS(transform_half_downsample(Tensor<double>({1, 3, 5, 5})), domain_error);
    REQUIRE_THROWS_AS(transform_half_downsample(Tensor<double>({3, 4, 4})), domain_error);
}

TEST_CASE("quarter crop: index contract, tiling, range check", "[data]") {
    Rng rng(7);
    Tensor<double> x({2, 3, 8, 8});
    for (size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);

    // Quadrant 0 is exactly img[:, :, 0:H/2, 0:W/2].
    Tensor<double> q0 = transform_quarter_crop(x, 0);
    REQUIRE(q0.shape() == std::vector<int>{2, 3, 4, 4});
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j)
                    REQUIRE(q0[((static_cast<size_t>(b) * 3 + c) * 4 + i) * 4 + j] ==
                            x[((static_cast<size_t>(b) * 3 + c) * 8 + i) * 8 + j]);

    // The four crops tile the original bit-exactly (0 TL, 1 TR, 2 BL, 3 BR).
    Tensor<double> rebuilt({2, 3, 8, 8});
    for (int q = 0; q < 4; ++q) {
        Tensor<double> crop = transform_quarter_crop(x, q);
        const int r0 = (q / 2) * 4, c0 = (q % 2) * 4;
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j)
                        rebuilt[((static_cast<size_t>(b) * 3 + c) * 8 + r0 + i) * 8 + c0 + j] =
                            crop[((static_cast<size_t>(b) * 3 + c) * 4 + i) * 4 + j];
    }
    REQUIRE(max_abs_diff(rebuilt, x) == 0.0);

    // Constant image -> constant crop.
    Tensor<double> flat({1, 3, 4, 4});
    for (size_t i = 0; i < flat.size(); ++i) flat[i] = 0.25;
    Tensor<double> fc = transform_quarter_crop(flat, 3);
    for (size_t i = 0; i < fc.size(); ++i) REQUIRE(fc[i] == 0.25);

    REQUIRE_THROWS_AS(transform_quarter_crop(x, 4), domain_error);
    REQUIRE_THROWS_AS(transform_quarter_crop(x, -1), domain_error);

    // make_real_targets bundles both transforms and echoes the quadrant.
    RealTargetPair<double> pair = make_real_targets(x, 2);
    REQUIRE(pair.quadrant == 2);
    REQUIRE(max_abs_diff(pair.resized, transform_half_downsample(x)) == 0.0);
    REQUIRE(max_abs_diff(pair.cropped, transform_quarter_crop(x, 2)) == 0.0);
}

TEST_CASE("pixel quadrants align with the crop decoder's feature quadrants", "[data]") {
    // Cross-module contract: perturbing the interior of pixel quadrant q must
    // change decode_crop(..., q) and leave the other three decodes untouched.
    DiscriminatorSpec spec;
    spec.num_classes = 3;
    spec.resolution = 32;
    spec.width = 0.125;
    spec.use_sn = false;
    Rng rng(99);
    Discriminator<double> d(spec, rng);

    Tensor<double> x({1, 3, 32, 32});
    Rng px(3);
    for (size_t i = 0; i < x.size(); ++i) x[i] = px.uniform(-0.5, 0.5);

    auto decode_all = [&](const Tensor<double>& img) {
        std::vector<Tensor<double>> outs;
        Graph<double> g;
        auto bd = d.bind(g);
        auto enc = d.encode(bd, g.input(img.clone()));
        for (int q = 0; q < 4; ++q) outs.push_back(g.val(d.decode_crop(bd, enc.feat16, q)).clone());
        return outs;
    };
    const std::vector<Tensor<double>> base = decode_all(x);
    for (const auto& t : base) REQUIRE(t.shape() == std::vector<int>{1, 3, 16, 16});

    for (int q = 0; q < 4; ++q) {
        // Bump a 2x2 patch at the center of pixel quadrant q, far from the
        // quadrant boundary relative to the conv receptive field.
        Tensor<double> bumped = x.clone();
        const int r0 = (q / 2) * 16 + 8, c0 = (q % 2) * 16 + 8;
        for (int c = 0; c < 3; ++c)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    bumped[((static_cast<size_t>(c)) * 32 + r0 + dy) * 32 + c0 + dx] += 0.5;
        // The bump lives in pixel quadrant q by the transform's definition.
        REQUIRE(max_abs_diff(transform_quarter_crop(bumped, q),
                             transform_quarter_crop(x, q)) > 0.0);

        const std::vector<Tensor<double>> out = decode_all(bumped);
        for (int p = 0; p < 4; ++p) {
            if (p == q)
                REQUIRE(max_abs_diff(out[p], base[p]) > 0.0);
            else
                REQUIRE(max_abs_diff(out[p], base[p]) == 0.0);
        }
    }
}

TEST_CASE("toy dataset: determinism, counts, shapes", "[data]") {
    ToySpec spec;
    spec.images_per_class = 4;
    spec.resolution = 32;
    spec.seed = 123;

    LabeledImageSet<double> a = make_toy_dataset<double>(spec);
    LabeledImageSet<double> b = make_toy_dataset<double>(spec);
    a.check();
    REQUIRE(a.size() == 12);
    REQUIRE(a.class_names == std::vector<std::string>{"class0", "class1", "class2"});
    REQUIRE(a.resolution() == 32);

    std::vector<int> counts(3, 0);
    for (int y : a.labels) ++counts[static_cast<size_t>(y)];
    REQUIRE(counts == std::vector<int>{4, 4, 4});

    for (int i = 0; i < a.size(); ++i) {
        REQUIRE(max_abs_diff(a.images[static_cast<size_t>(i)],
                             b.images[static_cast<size_t>(i)]) == 0.0);
        for (size_t j = 0; j < a.images[static_cast<size_t>(i)].size(); ++j)
            REQUIRE(std::abs(a.images[static_cast<size_t>(i)][j]) <= 1.0);
    }

    ToySpec other = spec;
    other.seed = 124;
    LabeledImageSet<double> c = make_toy_dataset<double>(other);
    double diff = 0.0;
    for (int i = 0; i < a.size(); ++i)
        diff = std::max(diff, max_abs_diff(a.images[static_cast<size_t>(i)],
                                           c.images[static_cast<size_t>(i)]));
    REQUIRE(diff > 0.0);
}

TEST_CASE("toy dataset: dark-fraction statistics separate the classes", "[data]") {
    ToySpec spec;
    spec.images_per_class = 100;
    spec.resolution = 64;
    spec.seed = 2024;
    LabeledImageSet<double> set = make_toy_dataset<double>(spec);

    // Mean dark-pixel fraction must be strictly increasing in class index.
    std::vector<double> mean_dark(3, 0.0);
    std::vector<std::vector<double>> proxies(3);
    for (int i = 0; i < set.size(); ++i) {
        double dark = 0.0, proxy = 0.0;
        pixel_stats(set.images[static_cast<size_t>(i)], dark, proxy);
        const int k = set.labels[static_cast<size_t>(i)];
        mean_dark[static_cast<size_t>(k)] += dark / spec.images_per_class;
        proxies[static_cast<size_t>(k)].push_back(proxy);
    }
    REQUIRE(mean_dark[0] < mean_dark[1]);
    REQUIRE(mean_dark[1] < mean_dark[2]);

    // Nearest-class-mean classifier on the nucleus-area proxy: fit the class
    // means on the first half of each class, score the held-out second half.
    std::vector<double> centers(3, 0.0);
    for (int k = 0; k < 3; ++k) {
        for (int i = 0; i < 50; ++i) centers[static_cast<size_t>(k)] += proxies[static_cast<size_t>(k)][static_cast<size_t>(i)];
        centers[static_cast<size_t>(k)] /= 50.0;
    }
    int correct = 0, total = 0;
    for (int k = 0; k < 3; ++k)
        for (int i = 50; i < 100; ++i) {
            const double p = proxies[static_cast<size_t>(k)][static_cast<size_t>(i)];
            int best = 0;
            for (int m = 1; m < 3; ++m)
                if (std::abs(p - centers[static_cast<size_t>(m)]) <
                    std::abs(p - centers[static_cast<size_t>(best)]))
                    best = m;
            correct += (best == k) ? 1 : 0;
            ++total;
        }
    const double accuracy = static_cast<double>(correct) / total;
    INFO("heuristic classifier accuracy = " << accuracy);
    REQUIRE(accuracy > 0.8);
}

TEST_CASE("toy dataset writer emits the layout plus manifest", "[data]") {
    const fs::path root = fresh_dir("cellgan_test_toy_write");
    ToySpec spec;
    spec.images_per_class = 4;
    spec.resolution = 32;
    spec.seed = 77;
    write_toy_dataset<double>(root.string(), spec);

    REQUIRE(fs::exists(root / "manifest.json"));
    std::ifstream in(root / "manifest.json");
    nlohmann::json manifest;
    in >> manifest;
    REQUIRE(manifest.at("num_classes").get<int>() == 3);
    REQUIRE(manifest.at("images_per_class").get<int>() == 4);
    REQUIRE(manifest.at("resolution").get<int>() == 32);
    REQUIRE(manifest.at("seed").get<uint64_t>() == 77);
    REQUIRE(manifest.at("nucleus_ratios").get<std::vector<double>>() ==
            std::vector<double>{0.2, 0.45, 0.7});

    int files = 0;
    for (int k = 0; k < 3; ++k)
        for (const auto& e : fs::directory_iterator(root / ("class" + std::to_string(k))))
            files += e.is_regular_file() ? 1 : 0;
    REQUIRE(files == 12);

    // Loading the written tree reproduces the in-memory dataset up to 8-bit
    // quantization, and the manifest file itself is ignored by the loader.
    LabeledImageSet<double> mem = make_toy_dataset<double>(spec);
    LabeledImageSet<double> disk = load_dataset<double>(root.string());
    REQUIRE(disk.size() == mem.size());
    REQUIRE(disk.labels == mem.labels);
    REQUIRE(disk.class_names == mem.class_names);
    double worst = 0.0;
    for (int i = 0; i < disk.size(); ++i)
        worst = std::max(worst, max_abs_diff(disk.images[static_cast<size_t>(i)],
                                             mem.images[static_cast<size_t>(i)]));
    REQUIRE(worst <= 1.0 / 255.0 + 1e-12);

    fs::remove_all(root);
}

TEST_CASE("stack_images builds batches from per-item tensors", "[data]") {
    ToySpec spec;
    spec.images_per_class = 2;
    spec.resolution = 16;
    spec.seed = 5;
    LabeledImageSet<double> set = make_toy_dataset<double>(spec);

    Tensor<double> batch = stack_images(set.images, {4, 0, 3});
    REQUIRE(batch.shape() == std::vector<int>{3, 3, 16, 16});
    const size_t per = set.images[0].size();
    for (size_t i = 0; i < per; ++i) {
        REQUIRE(batch[i] == set.images[4][i]);
        REQUIRE(batch[per + i] == set.images[0][i]);
        REQUIRE(batch[2 * per + i] == set.images[3][i]);
    }
    REQUIRE_THROWS_AS(stack_images(set.images, {}), domain_error);
}
