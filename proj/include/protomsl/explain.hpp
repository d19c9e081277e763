#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "protomsl/checkpoint.hpp"
#include "protomsl/dataset.hpp"
#include "protomsl/heatmap.hpp"
#include "protomsl/protonet.hpp"

namespace protomsl {

inline constexpr double kBoxFraction = 0.95;

/// Upsampled activation map of one prototype and its thresholded box.
struct EvidenceGeometry {
    Matrix heatmap;  // image resolution, raw activation scale
    BoundingBox box;
    int peak_row = 0;
    int peak_col = 0;
};

inline EvidenceGeometry evidence_geometry(const Matrix& sim_map, int height, int width, double fraction = kBoxFraction) {
    EvidenceGeometry g;
    g.heatmap = upsample_bilinear(sim_map, height, width);
    g.box = threshold_box(g.heatmap, fraction);
    Eigen::Index r, c;
    g.heatmap.maxCoeff(&r, &c);
    g.peak_row = static_cast<int>(r);
    g.peak_col = static_cast<int>(c);
    return g;
}

struct EvidenceItem {
    int rank = 0;
    int prototype_id = 0;
    int prototype_class = 0;
    double similarity_score = 0;
    double fc_weight_to_predicted = 0;
    BoundingBox test_bbox;
    Matrix heatmap;
    int patch_row = 0;  // feature-grid cell of the best match
    int patch_col = 0;
    std::string source_image_id;
    BoundingBox source_bbox;

    bool negative_evidence() const { return fc_weight_to_predicted < 0; }
};

struct Explanation {
    std::string image_id;
    int predicted_class = 0;
    std::string predicted_class_name;
    double confidence = 0;
    int k = 0;
    std::vector<EvidenceItem> items;
    std::string warning;
};

struct ExplainOptions {
    int k = 4;
    double box_fraction = kBoxFraction;
};

/// Top-k prototype evidence for an already extracted feature map. Boxes are in
/// the pixel frame of an `image_height` x `image_width` input.
inline Explanation explain_features(const Model& model, const FeatureMap& fm, int image_height, int image_width,
                                    const ExplainOptions& opt = {}) {
    if (opt.k < 1) throw ExplainError("k must be at least 1");
    if (!model.prototypes.projected()) throw ExplainError("model has no projected prototypes; train with projection first");
    HeadOutput head = model.forward_features(fm);
    Vector prob = model.probabilities(head.logits);
    Explanation ex;
    ex.image_id = fm.image_id;
    Eigen::Index pred;
    ex.confidence = prob.maxCoeff(&pred);
    ex.predicted_class = static_cast<int>(pred);
    ex.predicted_class_name = model.class_names.at(pred);

    const int M = model.prototypes.size();
    ex.k = std::min(opt.k, M);
    if (opt.k > M) ex.warning = "k=" + std::to_string(opt.k) + " exceeds the " + std::to_string(M) + " prototypes; clamped";

    std::vector<SimilarityResult> sims;
    sims.reserve(M);
    for (int j = 0; j < M; ++j)
        sims.push_back(similarity(fm, model.prototypes.vectors.value.row(j).transpose(), model.config.epsilon));
    std::vector<int> order(M);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sims[a].score > sims[b].score; });

    for (int r = 0; r < ex.k; ++r) {
        const int j = order[r];
        EvidenceItem item;
        item.rank = r + 1;
        item.prototype_id = j;
        item.prototype_class = model.prototypes.class_ids[j];
        item.similarity_score = sims[j].score;
        item.fc_weight_to_predicted = model.fc.value(ex.predicted_class, j);
        auto geo = evidence_geometry(sims[j].map, image_height, image_width, opt.box_fraction);
        item.test_bbox = geo.box;
        item.heatmap = std::move(geo.heatmap);
        item.patch_row = sims[j].row;
        item.patch_col = sims[j].col;
        const auto& src = *model.prototypes.sources[j];
        item.source_image_id = src.image_id;
        item.source_bbox = src.bbox;
        ex.items.push_back(std::move(item));
    }
    return ex;
}

inline Explanation explain(const Model& model, const Image& image, const std::string& image_id,
                           const ExplainOptions& opt = {}) {
    FeatureMap fm = model.extract_features(image, image_id);
    return explain_features(model, fm, image.height, image.width, opt);
}

/// JSON form: ids, scores, weights, boxes and source references; no pixel data.
inline nlohmann::json to_json(const Explanation& ex, const std::string& model_version = {}) {
    nlohmann::json j{{"image_id", ex.image_id},
                     {"predicted_class", ex.predicted_class},
                     {"predicted_class_name", ex.predicted_class_name},
                     {"confidence", ex.confidence},
                     {"k", ex.k}};
    if (!model_version.empty()) j["model_version"] = model_version;
    auto& items = j["items"] = nlohmann::json::array();
    for (const auto& it : ex.items)
        items.push_back({{"rank", it.rank},
                         {"prototype_id", it.prototype_id},
                         {"prototype_class", it.prototype_class},
                         {"similarity_score", it.similarity_score},
                         {"fc_weight_to_predicted", it.fc_weight_to_predicted},
                         {"negative_evidence", it.negative_evidence()},
                         {"test_bbox", to_json(it.test_bbox)},
                         {"source_image_id", it.source_image_id},
                         {"source_bbox", to_json(it.source_bbox)}});
    if (!ex.warning.empty()) j["warning"] = ex.warning;
    return j;
}

/// Resolves a (possibly augmented, "id@tag") source id against the dataset and
/// returns the image exactly as the model saw it during projection.
inline Image load_source_image(const DatasetIndex& index, const std::string& source_id, int size) {
    auto [base, tag] = split_variant_id(source_id);
    const ImageEntry* e = index.find(base);
    if (!e) throw ExplainError("source image '" + base + "' is not in the dataset");
    try {
        return apply_variant(load_entry_image(*e, size), tag);
    } catch (const ImageError& err) {
        throw ExplainError("source image '" + base + "' unavailable: " + err.what());
    }
}

struct PanelOptions {
    int cell = 112;
    double alpha = 0.5;
};

namespace detail {

inline Image fit_cell(const Image& img, int cell) { return resize_bilinear(to_rgb(img), cell, cell); }

inline void blit(Image& dst, const Image& src, int top, int left) {
    for (int r = 0; r < src.height; ++r)
        for (int c = 0; c < src.width; ++c)
            for (int ch = 0; ch < 3; ++ch) dst.at(top + r, left + c, ch) = src.at(r, c, ch);
}

inline void draw_box(Image& img, const BoundingBox& box, double sy, double sx) {
    if (box.empty()) return;
    cv::Mat m = to_mat(img);
    cv::rectangle(m, cv::Point(static_cast<int>(box.col0 * sx), static_cast<int>(box.row0 * sy)),
                  cv::Point(static_cast<int>((box.col1 + 1) * sx) - 1, static_cast<int>((box.row1 + 1) * sy) - 1),
                  cv::Scalar(0, 255, 255), 1);
    img = from_mat(m);
}

inline void draw_label(Image& img, const std::string& text) {
    cv::Mat m = to_mat(img);
    cv::putText(m, text, cv::Point(3, m.rows - 5), cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 3);
    cv::putText(m, text, cv::Point(3, m.rows - 5), cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(255, 255, 255), 1);
    img = from_mat(m);
}

inline std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace detail

/// One row per evidence item, five columns: test image with box, test heatmap
/// overlay, thresholded test crop with its score, source prototype crop, and
/// the source image overlaid with the prototype's activation.
inline Image render_panel(const Explanation& ex, const Image& test_image, const Model& model,
                          const std::function<Image(const std::string&)>& load_source, const PanelOptions& opt = {}) {
    const int cell = opt.cell;
    Image panel(cell * static_cast<int>(ex.items.size()), cell * 5, 3, 1.0f);
    const double sy = static_cast<double>(cell) / test_image.height, sx = static_cast<double>(cell) / test_image.width;
    for (size_t i = 0; i < ex.items.size(); ++i) {
        const auto& it = ex.items[i];
        const int top = static_cast<int>(i) * cell;

        Image a = detail::fit_cell(test_image, cell);
        detail::draw_box(a, it.test_bbox, sy, sx);
        detail::blit(panel, a, top, 0);

        Image b = overlay_heatmap(test_image, normalize_unit(it.heatmap), opt.alpha);
        detail::blit(panel, detail::fit_cell(b, cell), top, cell);

        Image c = detail::fit_cell(crop(to_rgb(test_image), it.test_bbox), cell);
        detail::draw_label(c, detail::fixed2(it.similarity_score) + " w=" + detail::fixed2(it.fc_weight_to_predicted));
        detail::blit(panel, c, top, 2 * cell);

        Image src = load_source(it.source_image_id);
        if (src.empty()) throw ExplainError("source image '" + it.source_image_id + "' is missing");
        if (!it.source_bbox.empty() && it.source_bbox.row1 < src.height && it.source_bbox.col1 < src.width)
            detail::blit(panel, detail::fit_cell(crop(to_rgb(src), it.source_bbox), cell), top, 3 * cell);

        if (src.height == model.input_size() && src.width == model.input_size()) {
            FeatureMap sfm = model.extract_features(src, it.source_image_id);
            auto sim = similarity(sfm, model.prototypes.vectors.value.row(it.prototype_id).transpose(), model.config.epsilon);
            Matrix heat = upsample_bilinear(sim.map, src.height, src.width);
            detail::blit(panel, detail::fit_cell(overlay_heatmap(src, normalize_unit(heat), opt.alpha), cell), top, 4 * cell);
        } else {
            detail::blit(panel, detail::fit_cell(src, cell), top, 4 * cell);
        }
    }
    return panel;
}

}  // namespace protomsl
