#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "protomsl/dataset.hpp"

using namespace protomsl;
namespace fs = std::filesystem;

namespace {

DatasetIndex parse(const std::string& text) {
    std::istringstream in(text);
    return parse_manifest(in);
}

DatasetIndex with_sols(const std::vector<long>& sols) {
    std::ostringstream m;
    for (size_t i = 0; i < sols.size(); ++i) m << "img" << i << ".png\tsun\tMASTCAM\t" << sols[i] << "\n";
    return parse(m.str());
}

Image gradient_image(int h, int w) {
    Image img(h, w, 3);
    for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>((i * 37) % 101) / 100.0f;
    return img;
}

fs::path temp_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("protomsl_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST(Manifest, MinimalTwoRows) {
    auto idx = parse("a.png\tsun\tMASTCAM\t10\nb.png\tdrt\tMAHLI\t12\n");
    EXPECT_EQ(idx.num_classes(), 2);
    ASSERT_EQ(idx.entries.size(), 2u);
    EXPECT_EQ(idx.entries[0].image_id, "a");
    EXPECT_EQ(idx.entries[1].label, 1);
    EXPECT_EQ(idx.entries[1].instrument, Instrument::MAHLI);
    EXPECT_EQ(idx.entries[1].sol, 12);
    EXPECT_FALSE(idx.entries[0].split.has_value());
}

TEST(Manifest, ReferenceClassListHasNineteenClasses) {
    std::ostringstream m;
    m << "@classes";
    for (const auto& c : msl_surface_class_names()) m << '\t' << c;
    m << "\nx.png\tnight sky\tMASTCAM\t3\ttrain\n";
    auto idx = parse(m.str());
    EXPECT_EQ(idx.num_classes(), 19);
    EXPECT_EQ(idx.entries[0].label, 9);
    EXPECT_EQ(idx.entries[0].split, Split::TRAIN);
}

TEST(Manifest, MissingSolNamesTheRow) {
    try {
        parse("# header\na.png\tsun\tMASTCAM\t1\nb.png\tsun\tMASTCAM\n");
        FAIL() << "expected a ManifestError";
    } catch (const ManifestError& e) {
        EXPECT_EQ(e.row(), 3);
        EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos);
    }
    EXPECT_THROW(parse("a.png\tsun\tMASTCAM\t\n"), ManifestError);
    EXPECT_THROW(parse("a.png\tsun\tMASTCAM\t-4\n"), ManifestError);
}

TEST(Manifest, RejectsUnknownClassDuplicateIdAndMissingFile) {
    EXPECT_THROW(parse("@classes\tsun\na.png\tmoon\tMASTCAM\t1\n"), ManifestError);
    EXPECT_THROW(parse("a.png\tsun\tMASTCAM\t1\nsub/a.jpg\tsun\tMAHLI\t2\n"), ManifestError);
    EXPECT_THROW(parse("a.png\tsun\tCHEMCAM\t1\n"), ManifestError);
    EXPECT_THROW(load_manifest("/nonexistent/manifest.tsv"), ManifestError);
}

TEST(Manifest, RoundTripsThroughFile) {
    auto dir = temp_dir("manifest_rt");
    auto idx = sol_split(with_sols({1, 2, 3, 4, 5}), 0.2, 0.2);
    for (auto& e : idx.entries) e.path = dir / "images" / e.path;
    save_manifest(idx, dir / "m.tsv");
    auto back = load_manifest(dir / "m.tsv");
    ASSERT_EQ(back.entries.size(), idx.entries.size());
    for (size_t i = 0; i < idx.entries.size(); ++i) {
        EXPECT_EQ(back.entries[i].image_id, idx.entries[i].image_id);
        EXPECT_EQ(back.entries[i].split, idx.entries[i].split);
        EXPECT_EQ(fs::weakly_canonical(back.entries[i].path), fs::weakly_canonical(idx.entries[i].path));
    }
    auto counts = back.counts_per_class_per_split();
    EXPECT_EQ(counts[0][0] + counts[0][1] + counts[0][2] + counts[0][3], 5);
}

TEST(SolSplit, HandPartition) {
    auto out = sol_split(with_sols({5, 3, 1, 4, 2}), 0.2, 0.2);
    std::map<long, Split> by_sol;
    for (const auto& e : out.entries) by_sol[e.sol] = *e.split;
    EXPECT_EQ(by_sol[1], Split::TRAIN);
    EXPECT_EQ(by_sol[2], Split::TRAIN);
    EXPECT_EQ(by_sol[3], Split::TRAIN);
    EXPECT_EQ(by_sol[4], Split::VAL);
    EXPECT_EQ(by_sol[5], Split::TEST);
}

TEST(SolSplit, SharedSolNeverStraddles) {
    // Sorted sols 1 1 2 2 2 3 3 4 5 5; 0.2/0.2 puts the train boundary inside sol 3.
    auto out = sol_split(with_sols({1, 1, 2, 2, 2, 3, 3, 4, 5, 5}), 0.2, 0.2);
    std::map<long, std::set<Split>> seen;
    for (const auto& e : out.entries) seen[e.sol].insert(*e.split);
    for (auto& [sol, s] : seen) EXPECT_EQ(s.size(), 1u) << "sol " << sol;
    long max_train = -1, min_later = 1 << 30;
    for (const auto& e : out.entries) {
        if (*e.split == Split::TRAIN) max_train = std::max(max_train, e.sol);
        else min_later = std::min(min_later, e.sol);
    }
    EXPECT_LE(max_train, min_later);
    auto again = sol_split(with_sols({1, 1, 2, 2, 2, 3, 3, 4, 5, 5}), 0.2, 0.2);
    for (size_t i = 0; i < out.entries.size(); ++i) EXPECT_EQ(out.entries[i].split, again.entries[i].split);
}

TEST(SolSplit, DegenerateInputsFail) {
    EXPECT_THROW(sol_split(with_sols({7, 7, 7, 7}), 0.25, 0.25), SplitError);
    EXPECT_THROW(sol_split(with_sols({1, 2, 3}), 0.5, 0.5), SplitError);
    EXPECT_THROW(sol_split(with_sols({1, 2, 3}), 0.0, 0.2), SplitError);
}

TEST(SolSplit, PublishedSplitColumnIsKeptVerbatim) {
    auto idx = parse("a.png\tsun\tMASTCAM\t9\ttest\nb.png\tsun\tMAHLI\t1\tval\nc.png\tsun\tMAHLI\t5\ttrain\n");
    EXPECT_TRUE(idx.fully_split());
    EXPECT_EQ(idx.entries[0].split, Split::TEST);
    EXPECT_EQ(idx.entries[1].split, Split::VAL);
    EXPECT_EQ(idx.in_split(Split::TRAIN).size(), 1u);
}

TEST(Augment, VariantCountsPerInstrument) {
    Image sq = gradient_image(8, 8);
    EXPECT_EQ(augment(sq, recipe_for(Instrument::MASTCAM)).size(), 2u);
    auto mahli = augment(sq, recipe_for(Instrument::MAHLI));
    ASSERT_EQ(mahli.size(), 6u);
    std::vector<std::string> tags;
    for (auto& a : mahli) tags.push_back(a.variant_tag);
    EXPECT_EQ(tags, (std::vector<std::string>{"orig", "rot90", "rot180", "rot270", "hflip", "vflip"}));
    auto id = augment(sq, AugmentationRecipe::identity());
    ASSERT_EQ(id.size(), 1u);
    EXPECT_EQ(id[0].image, sq);
    EXPECT_TRUE(AugmentationRecipe::mastcam().rotations_deg.empty());
    EXPECT_FALSE(AugmentationRecipe::mastcam().vertical_flip);
}

TEST(Augment, PixelGeometry) {
    Image img = gradient_image(4, 4);
    EXPECT_EQ(flip_horizontal(flip_horizontal(img)), img);
    Image r = rotate(img, 90);
    // Clockwise: the top-left of the result is the bottom-left of the source.
    EXPECT_EQ(r.at(0, 0, 1), img.at(3, 0, 1));
    EXPECT_EQ(rotate(rotate(img, 180), 180), img);
    EXPECT_EQ(rotate(rotate(img, 90), 270), img);
    for (auto& a : augment(img, AugmentationRecipe::mahli())) {
        EXPECT_EQ(a.image.height, 4);
        EXPECT_EQ(a.image.width, 4);
    }
}

TEST(Augment, NonSquareRotationRejected) {
    Image wide = gradient_image(4, 6);
    EXPECT_THROW(augment(wide, AugmentationRecipe::mahli()), AugmentError);
    EXPECT_EQ(augment(wide, AugmentationRecipe::mastcam()).size(), 2u);
}

TEST(Augment, EntryMetadataPreserved) {
    ImageEntry e{"x", "x.png", 3, "sand", Instrument::MAHLI, 42, Split::TRAIN};
    for (auto& s : augment(e, gradient_image(6, 6), recipe_for(e.instrument))) {
        EXPECT_EQ(s.entry.label, 3);
        EXPECT_EQ(s.entry.instrument, Instrument::MAHLI);
        EXPECT_EQ(split_variant_id(s.entry.image_id).first, "x");
        EXPECT_EQ(split_variant_id(s.entry.image_id).second, s.variant_tag);
    }
}

TEST(Images, PngRoundTripAndResize) {
    auto dir = temp_dir("png_rt");
    Image img = gradient_image(5, 7);
    save_image(img, dir / "a.png");
    Image back = load_image(dir / "a.png");
    ASSERT_EQ(back.height, 5);
    ASSERT_EQ(back.width, 7);
    for (size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1.0 / 255.0 + 1e-6);
    Image big = resize_bilinear(Image(3, 3, 1, 0.25f), 9, 9);
    for (float v : big.pixels) EXPECT_FLOAT_EQ(v, 0.25f);
    std::vector<uint8_t> junk{1, 2, 3, 4};
    EXPECT_THROW(decode_image(junk), ImageError);
}

TEST(Import, MslFileListsBecomeAManifest) {
    auto dir = temp_dir("msl_import");
    std::ofstream(dir / "classes.csv") << "0,sun\n1,drill hole\n";
    std::ofstream(dir / "train.txt") << "0100ML0001.jpg 0\n0101MH0002.jpg 1\n";
    std::ofstream(dir / "test.txt") << "0300MR0003.jpg 1\n";
    auto idx = import_msl(dir / "classes.csv", {{Split::TRAIN, dir / "train.txt"}, {Split::TEST, dir / "test.txt"}},
                          dir / "images");
    ASSERT_EQ(idx.entries.size(), 3u);
    EXPECT_EQ(idx.entries[1].instrument, Instrument::MAHLI);
    EXPECT_EQ(idx.entries[1].sol, 101);
    EXPECT_EQ(idx.entries[2].class_name, "drill hole");
    EXPECT_EQ(idx.entries[2].split, Split::TEST);
}
