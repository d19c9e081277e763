#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "protomsl/error.hpp"

namespace protomsl {

/// Interleaved (HWC) RGB or grayscale image with intensities in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c), pixels(static_cast<size_t>(h) * w * c, fill) {}

    bool empty() const { return pixels.empty(); }
    bool square() const { return height == width; }

    float& at(int r, int c, int ch) { return pixels[(static_cast<size_t>(r) * width + c) * channels + ch]; }
    float at(int r, int c, int ch) const { return pixels[(static_cast<size_t>(r) * width + c) * channels + ch]; }

    bool operator==(const Image&) const = default;
};

namespace detail {

// Half-pixel-centre source coordinate, the convention of cv::resize(INTER_LINEAR).
struct LinearTap {
    int lo;
    int hi;
    double frac;
};

inline LinearTap linear_tap(int dst, int src_size, int dst_size) {
    double s = (dst + 0.5) * static_cast<double>(src_size) / dst_size - 0.5;
    if (s < 0.0) s = 0.0;
    int lo = static_cast<int>(std::floor(s));
    if (lo >= src_size - 1) return {src_size - 1, src_size - 1, 0.0};
    return {lo, lo + 1, s - lo};
}

}  // namespace detail

inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
    if (src.empty()) throw ImageError("cannot resize an empty image");
    if (out_h <= 0 || out_w <= 0) throw ImageError("resize target must be positive");
    if (src.height == out_h && src.width == out_w) return src;
    Image out(out_h, out_w, src.channels);
    for (int y = 0; y < out_h; ++y) {
        auto ty = detail::linear_tap(y, src.height, out_h);
        for (int x = 0; x < out_w; ++x) {
            auto tx = detail::linear_tap(x, src.width, out_w);
            for (int c = 0; c < src.channels; ++c) {
                double top = src.at(ty.lo, tx.lo, c) * (1 - tx.frac) + src.at(ty.lo, tx.hi, c) * tx.frac;
                double bot = src.at(ty.hi, tx.lo, c) * (1 - tx.frac) + src.at(ty.hi, tx.hi, c) * tx.frac;
                out.at(y, x, c) = static_cast<float>(top * (1 - ty.frac) + bot * ty.frac);
            }
        }
    }
    return out;
}

inline Image flip_horizontal(const Image& src) {
    Image out(src.height, src.width, src.channels);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < src.channels; ++c) out.at(y, src.width - 1 - x, c) = src.at(y, x, c);
    return out;
}

inline Image flip_vertical(const Image& src) {
    Image out(src.height, src.width, src.channels);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < src.channels; ++c) out.at(src.height - 1 - y, x, c) = src.at(y, x, c);
    return out;
}

/// Clockwise rotation by `degrees`, which must be a multiple of 90.
inline Image rotate(const Image& src, int degrees) {
    int turns = ((degrees / 90) % 4 + 4) % 4;
    if (degrees % 90 != 0) throw ImageError("rotation must be a multiple of 90 degrees");
    Image cur = src;
    for (int t = 0; t < turns; ++t) {
        Image next(cur.width, cur.height, cur.channels);
        for (int y = 0; y < cur.height; ++y)
            for (int x = 0; x < cur.width; ++x)
                for (int c = 0; c < cur.channels; ++c) next.at(x, cur.height - 1 - y, c) = cur.at(y, x, c);
        cur = std::move(next);
    }
    return cur;
}

inline Image to_rgb(const Image& src) {
    if (src.channels == 3) return src;
    if (src.channels != 1) throw ImageError("expected 1 or 3 channels");
    Image out(src.height, src.width, 3);
    for (size_t i = 0; i < src.pixels.size(); ++i)
        for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = src.pixels[i];
    return out;
}

// OpenCV handles the codecs; everything else operates on Image.

inline Image from_mat(const cv::Mat& bgr) {
    if (bgr.depth() != CV_8U) throw ImageError("only 8-bit images are supported");
    Image out(bgr.rows, bgr.cols, 3);
    if (bgr.channels() == 1) {
        for (int y = 0; y < bgr.rows; ++y)
            for (int x = 0; x < bgr.cols; ++x)
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = bgr.at<uint8_t>(y, x) / 255.0f;
    } else if (bgr.channels() == 3 || bgr.channels() == 4) {
        int nc = bgr.channels();
        for (int y = 0; y < bgr.rows; ++y) {
            const uint8_t* row = bgr.ptr<uint8_t>(y);
            for (int x = 0; x < bgr.cols; ++x) {
                out.at(y, x, 0) = row[x * nc + 2] / 255.0f;
                out.at(y, x, 1) = row[x * nc + 1] / 255.0f;
                out.at(y, x, 2) = row[x * nc + 0] / 255.0f;
            }
        }
    } else {
        throw ImageError("unsupported channel count");
    }
    return out;
}

inline cv::Mat to_mat(const Image& img) {
    Image rgb = to_rgb(img);
    cv::Mat m(rgb.height, rgb.width, CV_8UC3);
    for (int y = 0; y < rgb.height; ++y) {
        uint8_t* row = m.ptr<uint8_t>(y);
        for (int x = 0; x < rgb.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = std::clamp(rgb.at(y, x, c), 0.0f, 1.0f);
                row[x * 3 + (2 - c)] = static_cast<uint8_t>(std::lround(v * 255.0f));
            }
    }
    return m;
}

inline Image decode_image(std::span<const uint8_t> bytes) {
    if (bytes.empty()) throw ImageError("empty image payload");
    cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8U, const_cast<uint8_t*>(bytes.data()));
    cv::Mat m = cv::imdecode(buf, cv::IMREAD_COLOR);
    if (m.empty()) throw ImageError("payload is not a decodable image");
    return from_mat(m);
}

inline Image load_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ImageError("image not found: " + path.string());
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) throw ImageError("cannot decode image: " + path.string());
    return from_mat(m);
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), to_mat(img))) throw ImageError("cannot write image: " + path.string());
}

inline std::vector<uint8_t> encode_png(const Image& img) {
    std::vector<uint8_t> out;
    if (!cv::imencode(".png", to_mat(img), out)) throw ImageError("png encoding failed");
    return out;
}

}  // namespace protomsl
