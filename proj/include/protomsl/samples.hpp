#pragma once

#include <string>
#include <vector>

#include "protomsl/dataset.hpp"
#include "protomsl/image.hpp"

namespace protomsl {

/// A decoded image at model resolution together with its label.
struct Sample {
    std::string image_id;  // carries the "@tag" suffix for augmented variants
    int label = 0;
    Image image;
};

/// Loads every entry of `split`, resized to `size`; with `augmented` set each
/// entry expands into its instrument's variants.
inline std::vector<Sample> load_samples(const DatasetIndex& index, Split split, int size, bool augmented) {
    std::vector<Sample> out;
    for (const ImageEntry* e : index.in_split(split)) {
        Image img = load_entry_image(*e, size);
        if (!augmented) {
            out.push_back({e->image_id, e->label, std::move(img)});
            continue;
        }
        for (auto& a : augment(*e, img, recipe_for(e->instrument)))
            out.push_back({a.entry.image_id, e->label, std::move(a.image)});
    }
    return out;
}

}  // namespace protomsl
