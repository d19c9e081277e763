#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protomsl/archive.hpp"
#include "protomsl/calibrate.hpp"
#include "protomsl/heatmap.hpp"
#include "protomsl/image.hpp"
#include "protomsl/nn/backbones.hpp"
#include "protomsl/nn/layers.hpp"

namespace protomsl {

inline constexpr double kSimilarityEpsilon = 1e-4;

/// log((d + 1) / (d + eps)): positive, strictly decreasing in the squared distance d.
inline double similarity_activation(double d, double eps = kSimilarityEpsilon) { return std::log((d + 1.0) / (d + eps)); }

inline double similarity_derivative(double d, double eps = kSimilarityEpsilon) { return 1.0 / (d + 1.0) - 1.0 / (d + eps); }

/// H x W grid of D-dimensional latent patches, stored one patch per row (row-major over the grid).
struct FeatureMap {
    int height = 0;
    int width = 0;
    Matrix patches;
    std::string image_id;

    FeatureMap() = default;
    FeatureMap(int h, int w, Matrix p, std::string id = {})
        : height(h), width(w), patches(std::move(p)), image_id(std::move(id)) {
        if (h < 1 || w < 1 || patches.rows() != static_cast<Eigen::Index>(h) * w || patches.cols() < 1)
            throw DimensionError("feature map shape does not match its patch matrix");
    }

    int dim() const { return static_cast<int>(patches.cols()); }
    int locations() const { return height * width; }
    auto patch(int row, int col) const { return patches.row(static_cast<Eigen::Index>(row) * width + col); }
};

/// Squared Euclidean distance from every patch (rows) to every prototype (columns).
inline Matrix patch_distances(const Matrix& patches, const Matrix& prototypes) {
    if (patches.cols() != prototypes.cols())
        throw DimensionError("patch dimension " + std::to_string(patches.cols()) + " != prototype dimension " +
                             std::to_string(prototypes.cols()));
    Matrix d(patches.rows(), prototypes.rows());
    for (Eigen::Index j = 0; j < prototypes.rows(); ++j)
        d.col(j) = (patches.rowwise() - prototypes.row(j)).rowwise().squaredNorm();
    return d;
}

struct SimilarityResult {
    Matrix map;  // H x W activations
    double score = 0;
    int row = 0;  // location of the score
    int col = 0;
};

inline SimilarityResult similarity(const FeatureMap& fm, const Vector& prototype, double eps = kSimilarityEpsilon) {
    if (prototype.size() != fm.dim())
        throw DimensionError("prototype dimension " + std::to_string(prototype.size()) + " != feature dimension " +
                             std::to_string(fm.dim()));
    SimilarityResult r;
    r.map.resize(fm.height, fm.width);
    r.score = -std::numeric_limits<double>::infinity();
    for (int y = 0; y < fm.height; ++y)
        for (int x = 0; x < fm.width; ++x) {
            double d = (fm.patch(y, x).transpose() - prototype).squaredNorm();
            double s = similarity_activation(d, eps);
            r.map(y, x) = s;
            if (s > r.score) {
                r.score = s;
                r.row = y;
                r.col = x;
            }
        }
    return r;
}

struct PrototypeSource {
    std::string image_id;
    int row = 0;
    int col = 0;
    double distance = 0;  // Euclidean, at projection time
    BoundingBox bbox;     // pixel box on the source image (empty if image size unknown)
};

struct Prototype {
    int prototype_id = 0;
    int class_id = 0;
    Vector vector;
    std::optional<PrototypeSource> source;
};

/// The prototype layer: C * m prototypes, class-major (ids c*m .. c*m+m-1 belong to class c).
struct PrototypeLayer {
    nn::Param vectors;
    std::vector<int> class_ids;
    std::vector<std::optional<PrototypeSource>> sources;
    int num_classes = 0;

    static PrototypeLayer make(int num_classes, int per_class, int dim, std::mt19937_64& rng) {
        PrototypeLayer p;
        p.num_classes = num_classes;
        const int M = num_classes * per_class;
        Matrix v(M, dim);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = u(rng);
        p.vectors = nn::Param("prototype_vectors", std::move(v));
        for (int j = 0; j < M; ++j) p.class_ids.push_back(j / per_class);
        p.sources.assign(M, std::nullopt);
        return p;
    }

    int size() const { return static_cast<int>(class_ids.size()); }
    int dim() const { return static_cast<int>(vectors.value.cols()); }
    int per_class() const { return num_classes > 0 ? size() / num_classes : 0; }

    std::vector<int> of_class(int c) const {
        std::vector<int> out;
        for (int j = 0; j < size(); ++j)
            if (class_ids[j] == c) out.push_back(j);
        return out;
    }

    Prototype prototype(int j) const { return {j, class_ids.at(j), vectors.value.row(j).transpose(), sources.at(j)}; }

    bool projected() const {
        return !sources.empty() && std::all_of(sources.begin(), sources.end(), [](const auto& s) { return s.has_value(); });
    }
};

/// Evidence-layer initialisation: +1 to the owning class, -0.5 to every other class.
inline Matrix initial_fc_weights(int num_classes, const std::vector<int>& class_ids, double off_class = -0.5) {
    Matrix w = Matrix::Constant(num_classes, static_cast<Eigen::Index>(class_ids.size()), off_class);
    for (size_t j = 0; j < class_ids.size(); ++j) w(class_ids[j], static_cast<Eigen::Index>(j)) = 1.0;
    return w;
}

/// Result of the prototype + evidence layers on one feature map.
struct HeadOutput {
    Vector min_distances;          // per prototype, min over patches
    std::vector<int> nearest_patch;  // location index realising the min (first on ties)
    Vector similarity_scores;
    Vector logits;
};

inline HeadOutput head_forward(const Matrix& patches, const Matrix& prototypes, const Matrix& fc,
                               double eps = kSimilarityEpsilon) {
    if (fc.cols() != prototypes.rows()) throw DimensionError("fc columns must equal prototype count");
    Matrix d = patch_distances(patches, prototypes);
    HeadOutput out;
    const Eigen::Index M = prototypes.rows();
    out.min_distances.resize(M);
    out.nearest_patch.resize(M);
    out.similarity_scores.resize(M);
    for (Eigen::Index j = 0; j < M; ++j) {
        Eigen::Index arg;
        out.min_distances(j) = d.col(j).minCoeff(&arg);
        out.nearest_patch[j] = static_cast<int>(arg);
        out.similarity_scores(j) = similarity_activation(out.min_distances(j), eps);
    }
    out.logits = fc * out.similarity_scores;
    return out;
}

struct ModelConfig {
    std::string backbone = "resnet18";
    int prototypes_per_class = 10;
    int prototype_dim = 128;
    double epsilon = kSimilarityEpsilon;
    uint64_t seed = 0;
};

/// Backbone f, add-on layers, prototype layer g_P and evidence layer h.
class Model {
public:
    ModelConfig config;
    std::vector<std::string> class_names;
    nn::Backbone backbone;
    nn::Sequential add_on;
    PrototypeLayer prototypes;
    nn::Param fc;
    Calibrator calibrator;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    int input_size() const { return backbone.input_size; }

    /// Backbone followed by the add-on layers.
    FeatureMap extract_features(const Image& img, std::string image_id = {}) const {
        nn::Activation a = add_on.forward(backbone.forward(backbone.preprocess(img), nullptr), nullptr);
        if (!a.values.allFinite()) throw Error("non-finite features for image '" + image_id + "'");
        return FeatureMap(a.height, a.width, std::move(a.values), std::move(image_id));
    }

    HeadOutput forward_features(const FeatureMap& fm) const {
        return head_forward(fm.patches, prototypes.vectors.value, fc.value, config.epsilon);
    }

    HeadOutput forward(const Image& img) const { return forward_features(extract_features(img)); }

    Vector probabilities(const Vector& logits) const { return calibrator.apply(logits); }

    std::vector<nn::Param*> backbone_parameters() { return backbone.parameters(); }
    std::vector<nn::Param*> add_on_parameters() {
        std::vector<nn::Param*> out;
        add_on.collect(out);
        return out;
    }
    /// Every parameter, in a stable order with unique names.
    std::vector<nn::Param*> all_parameters() {
        auto out = backbone_parameters();
        for (auto* p : add_on_parameters()) out.push_back(p);
        out.push_back(&prototypes.vectors);
        out.push_back(&fc);
        return out;
    }
};

inline Model make_model(const ModelConfig& config, std::vector<std::string> class_names,
                        const TensorArchive* pretrained = nullptr) {
    if (class_names.empty()) throw Error("model needs at least one class");
    if (config.prototypes_per_class < 1 || config.prototype_dim < 1) throw Error("invalid prototype configuration");
    std::mt19937_64 rng(config.seed);
    Model m;
    m.config = config;
    m.class_names = std::move(class_names);
    m.backbone = nn::make_backbone(config.backbone, rng);
    if (pretrained) nn::load_torchvision_weights(m.backbone, *pretrained);
    for (auto* p : m.backbone.parameters()) p->name = "backbone." + p->name;
    nn::Conv2d a0("add_on.0", m.backbone.out_channels, config.prototype_dim, 1, 1, 0, true);
    nn::Conv2d a2("add_on.2", config.prototype_dim, config.prototype_dim, 1, 1, 0, true);
    a0.init_he(rng);
    a2.init_he(rng);
    m.add_on.add(std::move(a0));
    m.add_on.add(nn::ReLU{});
    m.add_on.add(std::move(a2));
    m.add_on.add(nn::Sigmoid{});
    m.prototypes = PrototypeLayer::make(m.num_classes(), config.prototypes_per_class, config.prototype_dim, rng);
    m.fc = nn::Param("last_layer.weight", initial_fc_weights(m.num_classes(), m.prototypes.class_ids));
    return m;
}

// Projection -----------------------------------------------------------------

struct LabeledFeatureMap {
    FeatureMap features;
    int label = 0;
};

struct ProjectionOptions {
    int image_height = 0;  // when set, source pixel boxes are computed
    int image_width = 0;
    double box_fraction = 0.95;
    double epsilon = kSimilarityEpsilon;
};

struct NearestPatch {
    PrototypeSource source;
    size_t pool_index = 0;
    int location = 0;
};

/// Nearest same-class patch for every prototype. Ties go to the lowest
/// (image_id, row, col). Classes without pool images yield nullopt.
inline std::vector<std::optional<NearestPatch>> find_nearest_patches(const PrototypeLayer& layer,
                                                                     std::span<const LabeledFeatureMap> pool,
                                                                     const ProjectionOptions& opt = {}) {
    std::vector<size_t> order(pool.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return pool[a].features.image_id < pool[b].features.image_id; });

    std::vector<std::optional<NearestPatch>> out(layer.size());
    for (int j = 0; j < layer.size(); ++j) {
        const auto p = layer.vectors.value.row(j);
        double best = std::numeric_limits<double>::infinity();
        const LabeledFeatureMap* best_map = nullptr;
        size_t best_idx = 0;
        int best_loc = -1;
        for (size_t idx : order) {
            const auto& item = pool[idx];
            if (item.label != layer.class_ids[j]) continue;
            if (item.features.dim() != layer.dim()) throw DimensionError("pool feature dimension mismatch");
            for (int l = 0; l < item.features.locations(); ++l) {
                double d = (item.features.patches.row(l) - p).squaredNorm();
                if (d < best) {
                    best = d;
                    best_map = &item;
                    best_idx = idx;
                    best_loc = l;
                }
            }
        }
        if (!best_map) continue;
        PrototypeSource src;
        src.image_id = best_map->features.image_id;
        src.row = best_loc / best_map->features.width;
        src.col = best_loc % best_map->features.width;
        src.distance = std::sqrt(best);
        if (opt.image_height > 0 && opt.image_width > 0) {
            Vector target = best_map->features.patches.row(best_loc).transpose();
            auto sim = similarity(best_map->features, target, opt.epsilon);
            src.bbox = threshold_box(upsample_bilinear(sim.map, opt.image_height, opt.image_width), opt.box_fraction);
        }
        out[j] = NearestPatch{std::move(src), best_idx, best_loc};
    }
    return out;
}

inline std::vector<std::optional<PrototypeSource>> nearest_patches(const PrototypeLayer& layer,
                                                                   std::span<const LabeledFeatureMap> pool,
                                                                   const ProjectionOptions& opt = {}) {
    std::vector<std::optional<PrototypeSource>> out;
    for (auto& n : find_nearest_patches(layer, pool, opt))
        out.push_back(n ? std::optional<PrototypeSource>(std::move(n->source)) : std::nullopt);
    return out;
}

/// Replaces every prototype with its nearest same-class training patch.
inline void project_prototypes(PrototypeLayer& layer, std::span<const LabeledFeatureMap> pool,
                               const ProjectionOptions& opt = {}) {
    for (int c = 0; c < layer.num_classes; ++c) {
        bool any = std::any_of(pool.begin(), pool.end(), [&](const LabeledFeatureMap& m) { return m.label == c; });
        if (!any && !layer.of_class(c).empty())
            throw Error("projection pool has no images of class " + std::to_string(c));
    }
    auto nearest = find_nearest_patches(layer, pool, opt);
    for (int j = 0; j < layer.size(); ++j) {
        const auto& n = *nearest[j];
        layer.vectors.value.row(j) = pool[n.pool_index].features.patches.row(n.location);
        layer.sources[j] = n.source;
    }
}

/// Same search against a held-out pool; the layer is left untouched.
inline std::vector<std::optional<PrototypeSource>> visualize_test_prototypes(const PrototypeLayer& layer,
                                                                             std::span<const LabeledFeatureMap> pool,
                                                                             const ProjectionOptions& opt = {}) {
    return nearest_patches(layer, pool, opt);
}

}  // namespace protomsl
