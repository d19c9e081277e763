#pragma once

#include <algorithm>
#include <limits>

#include "protomsl/image.hpp"
#include "protomsl/nn/layers.hpp"

namespace protomsl {

/// Pixel rectangle with inclusive corners.
struct BoundingBox {
    int row0 = 0;
    int col0 = 0;
    int row1 = -1;
    int col1 = -1;

    bool empty() const { return row1 < row0 || col1 < col0; }
    int height() const { return empty() ? 0 : row1 - row0 + 1; }
    int width() const { return empty() ? 0 : col1 - col0 + 1; }
    bool contains(int r, int c) const { return r >= row0 && r <= row1 && c >= col0 && c <= col1; }
    bool contains(const BoundingBox& o) const {
        return o.empty() || (contains(o.row0, o.col0) && contains(o.row1, o.col1));
    }
    bool operator==(const BoundingBox&) const = default;
};

/// Bilinear upsampling of a single-channel grid with half-pixel centres.
inline Matrix upsample_bilinear(const Matrix& grid, int out_h, int out_w) {
    const int in_h = static_cast<int>(grid.rows()), in_w = static_cast<int>(grid.cols());
    Matrix out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        auto ty = detail::linear_tap(y, in_h, out_h);
        for (int x = 0; x < out_w; ++x) {
            auto tx = detail::linear_tap(x, in_w, out_w);
            double top = grid(ty.lo, tx.lo) * (1 - tx.frac) + grid(ty.lo, tx.hi) * tx.frac;
            double bot = grid(ty.hi, tx.lo) * (1 - tx.frac) + grid(ty.hi, tx.hi) * tx.frac;
            out(y, x) = top * (1 - ty.frac) + bot * ty.frac;
        }
    }
    return out;
}

/// Smallest rectangle holding every cell with value >= fraction * max.
inline BoundingBox threshold_box(const Matrix& map, double fraction = 0.95) {
    if (map.size() == 0) return {};
    const double peak = map.maxCoeff();
    const double cut = peak > 0 ? fraction * peak : peak;
    BoundingBox box{std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), -1, -1};
    for (Eigen::Index r = 0; r < map.rows(); ++r)
        for (Eigen::Index c = 0; c < map.cols(); ++c)
            if (map(r, c) >= cut) {
                box.row0 = std::min(box.row0, static_cast<int>(r));
                box.col0 = std::min(box.col0, static_cast<int>(c));
                box.row1 = std::max(box.row1, static_cast<int>(r));
                box.col1 = std::max(box.col1, static_cast<int>(c));
            }
    return box;
}

/// Min-max scales to [0, 1]; a constant map becomes all zeros.
inline Matrix normalize_unit(const Matrix& map) {
    double lo = map.minCoeff(), hi = map.maxCoeff();
    if (hi - lo <= 0) return Matrix::Zero(map.rows(), map.cols());
    return ((map.array() - lo) / (hi - lo)).matrix();
}

/// Jet colormap of a [0, 1] map.
inline Image colorize_jet(const Matrix& unit) {
    Image out(static_cast<int>(unit.rows()), static_cast<int>(unit.cols()), 3);
    auto ramp = [](double v) { return static_cast<float>(std::clamp(1.5 - std::abs(v), 0.0, 1.0)); };
    for (int r = 0; r < out.height; ++r)
        for (int c = 0; c < out.width; ++c) {
            double v = 4.0 * std::clamp(unit(r, c), 0.0, 1.0);
            out.at(r, c, 0) = ramp(v - 3.0);
            out.at(r, c, 1) = ramp(v - 2.0);
            out.at(r, c, 2) = ramp(v - 1.0);
        }
    return out;
}

/// (1 - alpha) * image + alpha * jet(heat); the heatmap must match the image size.
inline Image overlay_heatmap(const Image& image, const Matrix& heat_unit, double alpha) {
    if (heat_unit.rows() != image.height || heat_unit.cols() != image.width)
        throw DimensionError("heatmap and image sizes differ");
    Image rgb = to_rgb(image);
    if (alpha == 0.0) return rgb;
    Image jet = colorize_jet(heat_unit);
    Image out = rgb;
    for (size_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = static_cast<float>((1.0 - alpha) * rgb.pixels[i] + alpha * jet.pixels[i]);
    return out;
}

inline Image crop(const Image& img, const BoundingBox& box) {
    if (box.empty() || box.row0 < 0 || box.col0 < 0 || box.row1 >= img.height || box.col1 >= img.width)
        throw DimensionError("crop box outside image");
    Image out(box.height(), box.width(), img.channels);
    for (int r = 0; r < out.height; ++r)
        for (int c = 0; c < out.width; ++c)
            for (int ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(box.row0 + r, box.col0 + c, ch);
    return out;
}

}  // namespace protomsl
