#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "protomsl/dataset.hpp"
#include "protomsl/image.hpp"

// Synthetic "colored shapes" data for desk-scale end-to-end runs.
namespace protomsl::toy {

inline const std::vector<std::string>& class_names() {
    static const std::vector<std::string> names{"disc", "square", "cross"};
    return names;
}

/// One image of class `label` (0 discs, 1 squares, 2 crosses): four to seven
/// scattered shapes on a noisy sand-coloured background.
inline Image render_shape(int label, int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(size, size, 3);
    const float base[3] = {0.55f, 0.45f, 0.35f};
    const float shade = static_cast<float>(0.1 * (u(rng) - 0.5));
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = base[ch] + static_cast<float>(0.06 * (u(rng) - 0.5)) + shade;

    static const float colours[3][3] = {{0.85f, 0.2f, 0.15f}, {0.2f, 0.75f, 0.25f}, {0.2f, 0.3f, 0.9f}};
    std::uniform_int_distribution<int> count(4, 7);
    const int n = count(rng);
    for (int s = 0; s < n; ++s) {
        const double radius = size * (0.07 + 0.05 * u(rng));
        const double cy = radius + u(rng) * (size - 2 * radius), cx = radius + u(rng) * (size - 2 * radius);
        const double jitter = 0.15 * (u(rng) - 0.5);
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c) {
                double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
                bool inside = false;
                switch (label) {
                    case 0: inside = dy * dy + dx * dx <= radius * radius; break;
                    case 1: inside = std::abs(dy) <= 0.85 * radius && std::abs(dx) <= 0.85 * radius; break;
                    default:
                        inside = (std::abs(dy) <= radius && std::abs(dx) <= 0.3 * radius) ||
                                 (std::abs(dx) <= radius && std::abs(dy) <= 0.3 * radius);
                }
                if (!inside) continue;
                for (int ch = 0; ch < 3; ++ch)
                    img.at(r, c, ch) = std::clamp(colours[label][ch] + static_cast<float>(jitter), 0.0f, 1.0f);
            }
    }
    return img;
}

struct ToyItem {
    ImageEntry entry;
    Image image;
};

/// `n` images, classes round-robin in a shuffled order, one distinct sol per
/// image so that a chronological split is well defined. Every image is tagged
/// MASTCAM, so training doubles the pool with horizontal flips.
inline std::vector<ToyItem> make_items(int n, int size, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = i % 3;
    std::shuffle(labels.begin(), labels.end(), rng);
    std::vector<ToyItem> out;
    for (int i = 0; i < n; ++i) {
        ImageEntry e;
        char id[32];
        std::snprintf(id, sizeof id, "toy%03d", i);
        e.image_id = id;
        e.path = std::string(id) + ".png";
        e.label = labels[i];
        e.class_name = class_names()[labels[i]];
        e.instrument = Instrument::MASTCAM;
        e.sol = 100 + i;
        out.push_back({std::move(e), render_shape(labels[i], size, rng)});
    }
    return out;
}

/// In-memory dataset index (no files) for the items above.
inline DatasetIndex index_of(const std::vector<ToyItem>& items) {
    DatasetIndex idx;
    idx.class_names = class_names();
    for (const auto& it : items) idx.entries.push_back(it.entry);
    return idx;
}

/// Writes PNGs and a manifest (split by sol, 60/20/20) into `dir`; returns the manifest path.
inline std::filesystem::path write_dataset(const std::filesystem::path& dir, int n, int size, uint64_t seed) {
    std::filesystem::create_directories(dir / "images");
    auto items = make_items(n, size, seed);
    for (auto& it : items) {
        it.entry.path = dir / "images" / it.entry.path;
        save_image(it.image, it.entry.path);
    }
    DatasetIndex idx = sol_split(index_of(items), 0.2, 0.2);
    auto manifest = dir / "manifest.tsv";
    save_manifest(idx, manifest);
    return manifest;
}

}  // namespace protomsl::toy
