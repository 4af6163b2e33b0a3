#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "cellgan/tensor.hpp"

namespace cellgan {

/// Load an image file as [3, H, W] RGB with pixels mapped to 2*(v/255) - 1.
template <typename T>
inline Tensor<T> load_image(const std::string& path) {
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) throw state_error("load_image: cannot read " + path);
    const int H = bgr.rows, W = bgr.cols;
    Tensor<T> img({3, H, W});
    for (int y = 0; y < H; ++y) {
        const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)  // BGR -> RGB
                img[(static_cast<size_t>(c) * H + y) * W + x] =
                    static_cast<T>(2.0 * (row[x][2 - c] / 255.0) - 1.0);
    }
    return img;
}

/// Write a [3, H, W] image in [-1, 1] (clamped) as an 8-bit file.
template <typename T>
inline void save_image(const std::string& path, const Tensor<T>& img) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw domain_error("save_image: expected [3,H,W], got " + shape_str(img.shape()));
    const int H = img.dim(1), W = img.dim(2);
    cv::Mat bgr(H, W, CV_8UC3);
    for (int y = 0; y < H; ++y) {
        cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(
                    static_cast<double>(img[(static_cast<size_t>(c) * H + y) * W + x]), -1.0, 1.0);
                row[x][2 - c] = static_cast<unsigned char>(std::lround((v + 1.0) * 0.5 * 255.0));
            }
    }
    if (!cv::imwrite(path, bgr)) throw state_error("save_image: cannot write " + path);
}

/// Bilinear resize of one [C, H, W] image (half-pixel-centered sampling, so
/// an exact 1/2 reduction equals 2x2 block averaging).
template <typename T>
inline Tensor<T> bilinear_resize(const Tensor<T>& img, int oh, int ow) {
    if (img.rank() != 3) throw domain_error("bilinear_resize: expected [C,H,W]");
    if (oh < 1 || ow < 1) throw domain_error("bilinear_resize: bad target size");
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor<T> out({C, oh, ow});
    const double sy = static_cast<double>(H) / oh, sx = static_cast<double>(W) / ow;
    for (int y = 0; y < oh; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - y0;
        for (int x = 0; x < ow; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - x0;
            for (int c = 0; c < C; ++c) {
                auto px = [&](int yy, int xx) {
                    return static_cast<double>(img[(static_cast<size_t>(c) * H + yy) * W + xx]);
                };
                const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                                 wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
                out[(static_cast<size_t>(c) * oh + y) * ow + x] = static_cast<T>(v);
            }
        }
    }
    return out;
}

}  // namespace cellgan
