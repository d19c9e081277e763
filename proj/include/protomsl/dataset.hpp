#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "protomsl/error.hpp"
#include "protomsl/image.hpp"

namespace protomsl {

enum class Instrument { MAHLI, MASTCAM, OTHER };
enum class Split { TRAIN, VAL, TEST };

inline constexpr std::array<Split, 3> kAllSplits{Split::TRAIN, Split::VAL, Split::TEST};

inline std::string to_string(Instrument i) {
    switch (i) {
        case Instrument::MAHLI: return "MAHLI";
        case Instrument::MASTCAM: return "MASTCAM";
        case Instrument::OTHER: return "OTHER";
    }
    return "OTHER";
}

inline std::string to_string(Split s) {
    switch (s) {
        case Split::TRAIN: return "train";
        case Split::VAL: return "val";
        case Split::TEST: return "test";
    }
    return "train";
}

namespace detail {
inline std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

inline std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, '\t')) out.push_back(trim(field));
    if (!line.empty() && line.back() == '\t') out.emplace_back();
    return out;
}
}  // namespace detail

inline std::optional<Instrument> parse_instrument(std::string_view s) {
    auto l = detail::lower(s);
    if (l == "mahli") return Instrument::MAHLI;
    if (l == "mastcam") return Instrument::MASTCAM;
    if (l == "other") return Instrument::OTHER;
    return std::nullopt;
}

inline std::optional<Split> parse_split(std::string_view s) {
    auto l = detail::lower(s);
    if (l == "train") return Split::TRAIN;
    if (l == "val" || l == "validation") return Split::VAL;
    if (l == "test") return Split::TEST;
    return std::nullopt;
}

struct ImageEntry {
    std::string image_id;
    std::filesystem::path path;
    int label = 0;
    std::string class_name;
    Instrument instrument = Instrument::OTHER;
    long sol = 0;
    std::optional<Split> split;
};

struct DatasetIndex {
    std::vector<ImageEntry> entries;
    std::vector<std::string> class_names;

    int num_classes() const { return static_cast<int>(class_names.size()); }

    /// counts[c][s] for s in {train, val, test, unassigned}.
    std::vector<std::array<int, 4>> counts_per_class_per_split() const {
        std::vector<std::array<int, 4>> counts(class_names.size(), {0, 0, 0, 0});
        for (const auto& e : entries) {
            int col = e.split ? static_cast<int>(*e.split) : 3;
            counts[e.label][col] += 1;
        }
        return counts;
    }

    std::vector<const ImageEntry*> in_split(Split s) const {
        std::vector<const ImageEntry*> out;
        for (const auto& e : entries)
            if (e.split == s) out.push_back(&e);
        return out;
    }

    bool fully_split() const {
        return !entries.empty() &&
               std::all_of(entries.begin(), entries.end(), [](const ImageEntry& e) { return e.split.has_value(); });
    }

    const ImageEntry* find(std::string_view image_id) const {
        for (const auto& e : entries)
            if (e.image_id == image_id) return &e;
        return nullptr;
    }

    int class_index(std::string_view name) const {
        for (size_t i = 0; i < class_names.size(); ++i)
            if (class_names[i] == name) return static_cast<int>(i);
        return -1;
    }
};

/// Class list of the MSL surface dataset, in the order of its published class map.
inline const std::vector<std::string>& msl_surface_class_names() {
    static const std::vector<std::string> names{
        "arm cover",  "other rover part", "artifact",          "nearby surface",     "close-up rock",
        "DRT",        "DRT spot",         "distant landscape", "drill hole",         "night sky",
        "float",      "layers",           "light-toned veins", "mastcam cal target", "sand",
        "sun",        "wheel",            "wheel joint",       "wheel tracks"};
    return names;
}

inline std::string image_id_from_path(const std::filesystem::path& p) { return p.stem().string(); }

// Manifest: tab-separated, one record per line:
//   path <TAB> class_name <TAB> instrument <TAB> sol [<TAB> split]
// Lines starting with '#' are comments. An optional "@classes" directive fixes
// the class order; without it classes are numbered in order of first use.
inline DatasetIndex parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
    DatasetIndex index;
    bool declared = false;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    int row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto fields = detail::split_tabs(line);
        if (fields[0] == "@classes") {
            if (declared || !index.entries.empty()) throw ManifestError("@classes must precede all records", row);
            declared = true;
            for (size_t i = 1; i < fields.size(); ++i) {
                if (fields[i].empty()) continue;
                if (index.class_index(fields[i]) >= 0) throw ManifestError("duplicate class name '" + fields[i] + "'", row);
                index.class_names.push_back(fields[i]);
            }
            if (index.class_names.empty()) throw ManifestError("@classes lists no classes", row);
            continue;
        }
        if (fields.size() < 4 || fields.size() > 5)
            throw ManifestError("expected 4 or 5 tab-separated fields, got " + std::to_string(fields.size()), row);
        for (size_t i = 0; i < 4; ++i) {
            static const char* names[] = {"path", "class_name", "instrument", "sol"};
            if (fields[i].empty()) throw ManifestError(std::string("missing ") + names[i], row);
        }
        ImageEntry e;
        std::filesystem::path p(fields[0]);
        e.path = (p.is_relative() && !base_dir.empty()) ? base_dir / p : p;
        e.image_id = image_id_from_path(p);
        if (!seen_ids.insert(e.image_id).second) throw ManifestError("duplicate image_id '" + e.image_id + "'", row);
        e.class_name = fields[1];
        int label = index.class_index(e.class_name);
        if (label < 0) {
            if (declared) throw ManifestError("unknown class name '" + e.class_name + "'", row);
            label = index.num_classes();
            index.class_names.push_back(e.class_name);
        }
        e.label = label;
        auto inst = parse_instrument(fields[2]);
        if (!inst) throw ManifestError("unknown instrument '" + fields[2] + "'", row);
        e.instrument = *inst;
        const std::string& sol = fields[3];
        if (!std::all_of(sol.begin(), sol.end(), [](unsigned char c) { return std::isdigit(c); }))
            throw ManifestError("sol must be a non-negative integer, got '" + sol + "'", row);
        try {
            e.sol = std::stol(sol);
        } catch (const std::exception&) {
            throw ManifestError("sol out of range '" + sol + "'", row);
        }
        if (fields.size() == 5 && !fields[4].empty()) {
            auto s = parse_split(fields[4]);
            if (!s) throw ManifestError("unknown split '" + fields[4] + "'", row);
            e.split = *s;
        }
        index.entries.push_back(std::move(e));
    }
    return index;
}

inline DatasetIndex load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ManifestError("manifest not found: " + path.string());
    return parse_manifest(in, path.parent_path());
}

inline void write_manifest(const DatasetIndex& index, std::ostream& out, const std::filesystem::path& base_dir = {}) {
    out << "@classes";
    for (const auto& c : index.class_names) out << '\t' << c;
    out << '\n';
    for (const auto& e : index.entries) {
        auto p = base_dir.empty() ? e.path : std::filesystem::relative(e.path, base_dir);
        out << p.generic_string() << '\t' << e.class_name << '\t' << to_string(e.instrument) << '\t' << e.sol;
        if (e.split) out << '\t' << to_string(*e.split);
        out << '\n';
    }
}

inline void save_manifest(const DatasetIndex& index, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ManifestError("cannot write manifest: " + path.string());
    write_manifest(index, out, path.parent_path());
}

/// Chronological split: earliest sols train, then validation, then test.
/// A sol that straddles a boundary moves wholly to the later split.
inline DatasetIndex sol_split(const DatasetIndex& index, double val_fraction, double test_fraction) {
    if (!(val_fraction > 0) || !(test_fraction > 0) || val_fraction + test_fraction >= 1.0)
        throw SplitError("fractions must be positive and sum to less than 1");
    const long n = static_cast<long>(index.entries.size());
    if (n == 0) throw SplitError("cannot split an empty index");

    std::vector<size_t> order(index.entries.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return index.entries[a].sol < index.entries[b].sol; });

    const long n_val = std::lround(val_fraction * n);
    const long n_test = std::lround(test_fraction * n);
    const long train_end = n - n_val - n_test;
    const long val_end = n - n_test;

    DatasetIndex out;
    out.class_names = index.class_names;
    out.entries.reserve(index.entries.size());
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        long sol = index.entries[order[i]].sol;
        while (j < order.size() && index.entries[order[j]].sol == sol) ++j;
        long group_end = static_cast<long>(j);
        Split s = group_end <= train_end ? Split::TRAIN : (group_end <= val_end ? Split::VAL : Split::TEST);
        for (size_t k = i; k < j; ++k) {
            ImageEntry e = index.entries[order[k]];
            e.split = s;
            out.entries.push_back(std::move(e));
        }
        i = j;
    }
    for (Split s : kAllSplits)
        if (out.in_split(s).empty()) throw SplitError("split '" + to_string(s) + "' would be empty");
    return out;
}

// Augmentation ---------------------------------------------------------------

struct AugmentationRecipe {
    std::vector<int> rotations_deg;
    bool horizontal_flip = false;
    bool vertical_flip = false;

    static AugmentationRecipe identity() { return {}; }
    static AugmentationRecipe mastcam() { return {{}, true, false}; }
    static AugmentationRecipe mahli() { return {{90, 180, 270}, true, true}; }
};

/// Mastcam sits on a fixed mast, MAHLI on the rotatable arm; other sources are not augmented.
inline AugmentationRecipe recipe_for(Instrument instrument) {
    switch (instrument) {
        case Instrument::MAHLI: return AugmentationRecipe::mahli();
        case Instrument::MASTCAM: return AugmentationRecipe::mastcam();
        case Instrument::OTHER: return AugmentationRecipe::identity();
    }
    return AugmentationRecipe::identity();
}

inline std::vector<std::string> variant_tags(const AugmentationRecipe& recipe) {
    std::vector<std::string> tags{"orig"};
    for (int deg : recipe.rotations_deg) tags.push_back("rot" + std::to_string(deg));
    if (recipe.horizontal_flip) tags.push_back("hflip");
    if (recipe.vertical_flip) tags.push_back("vflip");
    return tags;
}

inline Image apply_variant(const Image& img, std::string_view tag) {
    if (tag == "orig") return img;
    if (tag == "hflip") return flip_horizontal(img);
    if (tag == "vflip") return flip_vertical(img);
    if (tag.starts_with("rot")) {
        if (!img.square()) throw AugmentError("rotation variants require a square image");
        int deg = std::stoi(std::string(tag.substr(3)));
        if (deg != 90 && deg != 180 && deg != 270) throw AugmentError("unsupported rotation " + std::string(tag));
        return rotate(img, deg);
    }
    throw AugmentError("unknown variant tag '" + std::string(tag) + "'");
}

/// "<image_id>" for the original, "<image_id>@<tag>" for derived variants.
inline std::string variant_id(std::string_view image_id, std::string_view tag) {
    if (tag == "orig") return std::string(image_id);
    return std::string(image_id) + "@" + std::string(tag);
}

inline std::pair<std::string, std::string> split_variant_id(std::string_view id) {
    auto at = id.rfind('@');
    if (at == std::string_view::npos) return {std::string(id), "orig"};
    return {std::string(id.substr(0, at)), std::string(id.substr(at + 1))};
}

struct AugmentedImage {
    Image image;
    std::string variant_tag;
};

inline std::vector<AugmentedImage> augment(const Image& img, const AugmentationRecipe& recipe) {
    if (!recipe.rotations_deg.empty() && !img.square())
        throw AugmentError("non-square image (" + std::to_string(img.width) + "x" + std::to_string(img.height) +
                           ") cannot be rotated; resize it first");
    std::vector<AugmentedImage> out;
    for (const auto& tag : variant_tags(recipe)) out.push_back({apply_variant(img, tag), tag});
    return out;
}

struct AugmentedSample {
    ImageEntry entry;  // image_id carries the variant suffix
    std::string variant_tag;
    Image image;
};

inline std::vector<AugmentedSample> augment(const ImageEntry& entry, const Image& img, const AugmentationRecipe& recipe) {
    std::vector<AugmentedSample> out;
    for (auto& a : augment(img, recipe)) {
        ImageEntry e = entry;
        e.image_id = variant_id(entry.image_id, a.variant_tag);
        out.push_back({std::move(e), a.variant_tag, std::move(a.image)});
    }
    return out;
}

/// Loads an entry's image and resizes it to `size`x`size` (0 keeps the native size).
inline Image load_entry_image(const ImageEntry& entry, int size) {
    Image img = load_image(entry.path);
    if (size > 0) img = resize_bilinear(img, size, size);
    return img;
}

// MSL surface dataset import -------------------------------------------------

struct MslFileInfo {
    long sol = 0;
    Instrument instrument = Instrument::OTHER;
};

/// Product IDs start with a 4-digit sol followed by the camera code (ML/MR Mastcam, MH MAHLI).
inline std::optional<MslFileInfo> parse_msl_filename(std::string_view name) {
    if (name.size() < 6) return std::nullopt;
    for (int i = 0; i < 4; ++i)
        if (!std::isdigit(static_cast<unsigned char>(name[i]))) return std::nullopt;
    MslFileInfo info;
    info.sol = std::stol(std::string(name.substr(0, 4)));
    auto cam = name.substr(4, 2);
    if (cam == "ML" || cam == "MR") info.instrument = Instrument::MASTCAM;
    else if (cam == "MH") info.instrument = Instrument::MAHLI;
    return info;
}

/// Builds a manifest from the published class map ("index,name" lines) and
/// per-split file lists ("filename label" lines).
inline DatasetIndex import_msl(const std::filesystem::path& class_map,
                               const std::vector<std::pair<Split, std::filesystem::path>>& split_lists,
                               const std::filesystem::path& image_dir) {
    DatasetIndex index;
    {
        std::ifstream in(class_map);
        if (!in) throw ManifestError("class map not found: " + class_map.string());
        std::map<int, std::string> by_index;
        std::string line;
        int row = 0;
        while (std::getline(in, line)) {
            ++row;
            auto t = detail::trim(line);
            if (t.empty()) continue;
            auto comma = t.find(',');
            if (comma == std::string::npos) throw ManifestError("class map line lacks a comma", row);
            try {
                by_index[std::stoi(t.substr(0, comma))] = detail::trim(t.substr(comma + 1));
            } catch (const std::exception&) {
                throw ManifestError("bad class index in class map", row);
            }
        }
        int expect = 0;
        for (auto& [i, name] : by_index) {
            if (i != expect++) throw ManifestError("class map indices must be contiguous from 0");
            index.class_names.push_back(name);
        }
    }
    std::unordered_set<std::string> seen;
    for (const auto& [split, list] : split_lists) {
        std::ifstream in(list);
        if (!in) throw ManifestError("split list not found: " + list.string());
        std::string line;
        int row = 0;
        while (std::getline(in, line)) {
            ++row;
            std::istringstream ls(line);
            std::string file;
            int label = -1;
            if (!(ls >> file)) continue;
            if (!(ls >> label) || label < 0 || label >= index.num_classes())
                throw ManifestError(list.filename().string() + ": bad label", row);
            auto info = parse_msl_filename(std::filesystem::path(file).filename().string());
            if (!info) throw ManifestError(list.filename().string() + ": cannot parse sol from '" + file + "'", row);
            ImageEntry e;
            e.path = image_dir / file;
            e.image_id = image_id_from_path(file);
            if (!seen.insert(e.image_id).second)
                throw ManifestError(list.filename().string() + ": duplicate image_id '" + e.image_id + "'", row);
            e.label = label;
            e.class_name = index.class_names[label];
            e.instrument = info->instrument;
            e.sol = info->sol;
            e.split = split;
            index.entries.push_back(std::move(e));
        }
    }
    return index;
}

}  // namespace protomsl
