#pragma once

#include <array>
#include <limits>
#include <span>
#include <vector>

#include "protomsl/calibrate.hpp"
#include "protomsl/protonet.hpp"

namespace protomsl {

struct LossWeights {
    double lambda1 = 0.8;   // cluster
    double lambda2 = 0.08;  // separation
    double lambda3 = 0.04;  // diversity
    double margin = 1.0;
};

struct LossBreakdown {
    double total = 0;
    double crsent = 0;
    double clst = 0;
    double sep = 0;
    double div = 0;
};

enum Term { kCrsEnt = 0, kClst = 1, kSep = 2, kDiv = 3 };

/// Read-only view of the head parameters the objective depends on.
struct HeadParams {
    const Matrix& prototypes;
    const std::vector<int>& class_ids;
    int num_classes;
    const Matrix& fc;
    double epsilon = kSimilarityEpsilon;
};

inline HeadParams head_params(const Model& m) {
    return {m.prototypes.vectors.value, m.prototypes.class_ids, m.num_classes(), m.fc.value, m.config.epsilon};
}

/// Gradients of the batch objective. `terms[t]` holds d(component t)/d(prototypes)
/// and is only filled when requested.
struct ObjectiveGradients {
    Matrix prototypes;
    Matrix fc;
    std::vector<Matrix> features;
    std::array<Matrix, 4> terms;
    bool per_term = false;
};

namespace detail {

struct ImageTerms {
    double crsent = 0;
    double clst = 0;
    double sep = 0;
    double div = 0;
    // d(term)/d(min distance of prototype j)
    std::array<Vector, 4> d_min;
    Vector d_logits;
    Vector scores;
};

inline ImageTerms image_terms(const HeadOutput& h, int label, const HeadParams& p, double margin) {
    const Eigen::Index M = p.prototypes.rows();
    if (label < 0 || label >= p.num_classes) throw Error("label " + std::to_string(label) + " out of range");
    ImageTerms t;
    for (auto& v : t.d_min) v = Vector::Zero(M);
    t.scores = h.similarity_scores;

    Vector prob = softmax(h.logits);
    t.crsent = log_sum_exp(h.logits) - h.logits(label);
    t.d_logits = prob;
    t.d_logits(label) -= 1.0;
    Vector d_scores = p.fc.transpose() * t.d_logits;
    for (Eigen::Index j = 0; j < M; ++j)
        t.d_min[kCrsEnt](j) = d_scores(j) * similarity_derivative(h.min_distances(j), p.epsilon);

    int in_arg = -1, out_arg = -1, in_count = 0;
    double in_min = std::numeric_limits<double>::infinity(), out_min = in_min, hinge_sum = 0;
    for (Eigen::Index j = 0; j < M; ++j) {
        double d = h.min_distances(j);
        if (p.class_ids[j] == label) {
            ++in_count;
            if (d < in_min) {
                in_min = d;
                in_arg = static_cast<int>(j);
            }
            hinge_sum += std::max(d - margin, 0.0);
        } else if (d < out_min) {
            out_min = d;
            out_arg = static_cast<int>(j);
        }
    }
    if (in_count == 0) throw Error("class " + std::to_string(label) + " has no prototypes");
    if (out_arg < 0) throw Error("separation cost needs at least one out-of-class prototype");
    t.clst = in_min;
    t.d_min[kClst](in_arg) = 1.0;
    t.sep = -out_min;
    t.d_min[kSep](out_arg) = -1.0;
    t.div = -hinge_sum / in_count;
    for (Eigen::Index j = 0; j < M; ++j)
        if (p.class_ids[j] == label && h.min_distances(j) > margin) t.d_min[kDiv](j) = -1.0 / in_count;
    return t;
}

// d(min_j)/dP_j = 2 (P_j - z*), d(min_j)/dz* = 2 (z* - P_j), scaled by g_j.
inline void chain_min_distance(const Vector& g, const HeadOutput& h, const Matrix& patches, const Matrix& prototypes,
                               Matrix* d_prototypes, Matrix* d_patches) {
    for (Eigen::Index j = 0; j < g.size(); ++j) {
        if (g(j) == 0.0) continue;
        auto diff = (prototypes.row(j) - patches.row(h.nearest_patch[j])).eval();
        if (d_prototypes) d_prototypes->row(j) += 2.0 * g(j) * diff;
        if (d_patches) d_patches->row(h.nearest_patch[j]) -= 2.0 * g(j) * diff;
    }
}

}  // namespace detail

/// Adds one image's contribution (scaled by `scale`, usually 1/n) to the
/// breakdown and, when `d_patches` / `grads` are given, to the gradients.
inline void accumulate_image_objective(const Matrix& patches, const HeadOutput& h, int label, const HeadParams& p,
                                       const LossWeights& w, double scale, LossBreakdown& acc,
                                       ObjectiveGradients* grads, Matrix* d_patches) {
    auto t = detail::image_terms(h, label, p, w.margin);
    acc.crsent += scale * t.crsent;
    acc.clst += scale * t.clst;
    acc.sep += scale * t.sep;
    acc.div += scale * t.div;
    acc.total += scale * (t.crsent + w.lambda1 * t.clst + w.lambda2 * t.sep + w.lambda3 * t.div);
    if (!grads && !d_patches) return;
    Vector g_total = t.d_min[kCrsEnt] + w.lambda1 * t.d_min[kClst] + w.lambda2 * t.d_min[kSep] + w.lambda3 * t.d_min[kDiv];
    g_total *= scale;
    detail::chain_min_distance(g_total, h, patches, p.prototypes, grads ? &grads->prototypes : nullptr, d_patches);
    if (grads) {
        grads->fc.noalias() += scale * t.d_logits * t.scores.transpose();
        if (grads->per_term)
            for (int k = 0; k < 4; ++k)
                detail::chain_min_distance(scale * t.d_min[k], h, patches, p.prototypes, &grads->terms[k], nullptr);
    }
}

/// Total objective CrsEnt + l1 Clst + l2 Sep + l3 Div, averaged over the batch.
inline LossBreakdown evaluate_objective(std::span<const FeatureMap> batch, std::span<const int> labels,
                                        const HeadParams& p, const LossWeights& w,
                                        ObjectiveGradients* grads = nullptr) {
    if (batch.empty()) throw Error("objective needs a non-empty batch");
    if (batch.size() != labels.size()) throw Error("batch and label counts differ");
    if (grads) {
        grads->prototypes = Matrix::Zero(p.prototypes.rows(), p.prototypes.cols());
        grads->fc = Matrix::Zero(p.fc.rows(), p.fc.cols());
        grads->features.clear();
        for (auto& m : grads->terms) m = Matrix::Zero(p.prototypes.rows(), p.prototypes.cols());
    }
    LossBreakdown acc;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        HeadOutput h = head_forward(batch[i].patches, p.prototypes, p.fc, p.epsilon);
        Matrix d_patches;
        if (grads) d_patches = Matrix::Zero(batch[i].patches.rows(), batch[i].patches.cols());
        accumulate_image_objective(batch[i].patches, h, labels[i], p, w, scale, acc, grads, grads ? &d_patches : nullptr);
        if (grads) grads->features.push_back(std::move(d_patches));
    }
    return acc;
}

inline LossBreakdown total_loss(std::span<const FeatureMap> batch, std::span<const int> labels, const Model& model,
                                const LossWeights& w) {
    return evaluate_objective(batch, labels, head_params(model), w);
}

/// Mean negative log-likelihood of softmax(logits) at the labels.
inline double crsent(std::span<const Vector> logits, std::span<const int> labels) {
    if (logits.empty() || logits.size() != labels.size()) throw Error("crsent needs matching, non-empty inputs");
    double total = 0;
    for (size_t i = 0; i < logits.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= logits[i].size()) throw Error("label out of range");
        total += log_sum_exp(logits[i]) - logits[i](labels[i]);
    }
    return total / static_cast<double>(logits.size());
}

namespace detail {
inline Matrix min_distances_per_image(const FeatureMap& fm, const PrototypeLayer& layer) {
    Matrix d = patch_distances(fm.patches, layer.vectors.value);
    return d.colwise().minCoeff();
}
}  // namespace detail

/// Mean over images of the smallest squared distance between any patch and any in-class prototype.
inline double clst(std::span<const FeatureMap> batch, std::span<const int> labels, const PrototypeLayer& layer) {
    if (batch.empty()) throw Error("clst needs a non-empty batch");
    double total = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
        Matrix mins = detail::min_distances_per_image(batch[i], layer);
        double best = std::numeric_limits<double>::infinity();
        for (int j : layer.of_class(labels[i])) best = std::min(best, mins(0, j));
        if (!std::isfinite(best)) throw Error("class " + std::to_string(labels[i]) + " has no prototypes");
        total += best;
    }
    return total / static_cast<double>(batch.size());
}

/// Negated mean over images of the smallest squared distance to any out-of-class prototype.
inline double sep(std::span<const FeatureMap> batch, std::span<const int> labels, const PrototypeLayer& layer) {
    if (batch.empty()) throw Error("sep needs a non-empty batch");
    double total = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
        Matrix mins = detail::min_distances_per_image(batch[i], layer);
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < layer.size(); ++j)
            if (layer.class_ids[j] != labels[i]) best = std::min(best, mins(0, j));
        if (!std::isfinite(best)) throw Error("separation cost needs at least one out-of-class prototype");
        total += best;
    }
    return -total / static_cast<double>(batch.size());
}

/// Diversity cost: -(1/n) sum_i mean_{j in P_{y_i}} min_z max(d(z, p_j) - margin, 0).
inline double div(std::span<const FeatureMap> batch, std::span<const int> labels, const PrototypeLayer& layer,
                  double margin) {
    if (batch.empty()) throw Error("div needs a non-empty batch");
    if (margin < 0) throw Error("margin must be non-negative");
    double total = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
        Matrix mins = detail::min_distances_per_image(batch[i], layer);
        auto in_class = layer.of_class(labels[i]);
        if (in_class.empty()) throw Error("class " + std::to_string(labels[i]) + " has no prototypes");
        double sum = 0;
        for (int j : in_class) sum += std::max(mins(0, j) - margin, 0.0);
        total += sum / static_cast<double>(in_class.size());
    }
    return -total / static_cast<double>(batch.size());
}

}  // namespace protomsl
