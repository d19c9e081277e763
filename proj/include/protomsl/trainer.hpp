#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomsl/checkpoint.hpp"
#include "protomsl/objectives.hpp"
#include "protomsl/optim.hpp"
#include "protomsl/samples.hpp"

namespace protomsl {

struct TrainConfig {
    double lr_phase1 = 1e-4;
    int epochs_phase1 = 100;
    double lr_phase2 = 1e-5;
    int epochs_phase2 = 100;
    int batch_size = 80;
    int projection_period = 5;
    int warmup_epochs = 5;  // backbone frozen while epoch <= warmup_epochs
    uint64_t seed = 0;
    int last_layer_iterations = 0;  // fc-only tuning after each projection
    double last_layer_l1 = 0.0;

    int total_epochs() const { return epochs_phase1 + epochs_phase2; }
    void validate() const {
        if (lr_phase1 <= 0 || lr_phase2 <= 0) throw Error("learning rates must be positive");
        if (epochs_phase1 < 0 || epochs_phase2 < 0) throw Error("epoch counts must be non-negative");
        if (batch_size < 1 || projection_period < 1) throw Error("batch_size and projection_period must be positive");
        if (warmup_epochs < 0 || last_layer_iterations < 0 || last_layer_l1 < 0)
            throw Error("warm-up, tuning iterations and l1 must be non-negative");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr_phase1", c.lr_phase1},         {"epochs_phase1", c.epochs_phase1},
            {"lr_phase2", c.lr_phase2},         {"epochs_phase2", c.epochs_phase2},
            {"batch_size", c.batch_size},       {"projection_period", c.projection_period},
            {"warmup_epochs", c.warmup_epochs}, {"seed", c.seed},
            {"last_layer_iterations", c.last_layer_iterations}, {"last_layer_l1", c.last_layer_l1},
            {"optimizer", "adam"}};
}

inline nlohmann::json to_json(const LossWeights& w) {
    return {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}, {"margin", w.margin}};
}

inline nlohmann::json to_json(const LossBreakdown& b) {
    return {{"total", b.total}, {"crsent", b.crsent}, {"clst", b.clst}, {"sep", b.sep}, {"div", b.div}};
}

/// Reads the keys it knows from a JSON config; anything absent keeps its default.
inline void apply_config(const nlohmann::json& j, TrainConfig& c, LossWeights& w, ModelConfig& m) {
    c.lr_phase1 = j.value("lr_phase1", c.lr_phase1);
    c.epochs_phase1 = j.value("epochs_phase1", c.epochs_phase1);
    c.lr_phase2 = j.value("lr_phase2", c.lr_phase2);
    c.epochs_phase2 = j.value("epochs_phase2", c.epochs_phase2);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.projection_period = j.value("projection_period", c.projection_period);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.seed = j.value("seed", c.seed);
    c.last_layer_iterations = j.value("last_layer_iterations", c.last_layer_iterations);
    c.last_layer_l1 = j.value("last_layer_l1", c.last_layer_l1);
    if (j.contains("optimizer") && j["optimizer"] != "adam") throw Error("only the adam optimizer is supported");
    w.lambda1 = j.value("lambda1", w.lambda1);
    w.lambda2 = j.value("lambda2", w.lambda2);
    w.lambda3 = j.value("lambda3", w.lambda3);
    w.margin = j.value("margin", w.margin);
    if (w.margin < 0) throw Error("margin must be non-negative");
    m.backbone = j.value("backbone", m.backbone);
    m.prototypes_per_class = j.value("prototypes_per_class", m.prototypes_per_class);
    m.prototype_dim = j.value("prototype_dim", m.prototype_dim);
    m.seed = j.value("model_seed", c.seed);
}

struct TrainState {
    int epoch = 0;
    Model model;  // parameters after the last completed epoch
    std::optional<Model> best_model;
    int best_epoch = 0;
    double best_val_acc = -1;
    std::filesystem::path best_checkpoint;
    std::vector<LossBreakdown> loss_history;
    std::vector<nlohmann::json> metrics;
};

struct TrainOptions {
    std::filesystem::path out_dir;  // empty: nothing is written
    std::function<void(const nlohmann::json&)> on_epoch;  // per-epoch metrics record
};

/// Features of every sample; the pool used for projection and fixed-feature evaluation.
inline std::vector<LabeledFeatureMap> compute_features(const Model& model, std::span<const Sample> samples) {
    std::vector<LabeledFeatureMap> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back({model.extract_features(s.image, s.image_id), s.label});
    return out;
}

inline int predicted_label(const HeadOutput& h) {
    Eigen::Index arg;
    h.logits.maxCoeff(&arg);
    return static_cast<int>(arg);
}

inline double accuracy_on_features(const Model& model, std::span<const LabeledFeatureMap> pool) {
    if (pool.empty()) return 0;
    int correct = 0;
    for (const auto& f : pool) correct += predicted_label(model.forward_features(f.features)) == f.label;
    return static_cast<double>(correct) / static_cast<double>(pool.size());
}

inline double accuracy(const Model& model, std::span<const Sample> samples) {
    if (samples.empty()) return 0;
    int correct = 0;
    for (const auto& s : samples) correct += predicted_label(model.forward(s.image)) == s.label;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

/// Mean cross-entropy of the head on fixed features, plus the optional l1 penalty on off-class fc weights.
inline double last_layer_objective(const Matrix& fc, const Model& model, std::span<const LabeledFeatureMap> pool,
                                   double l1, Matrix* grad) {
    double f = 0;
    if (grad) *grad = Matrix::Zero(fc.rows(), fc.cols());
    for (const auto& item : pool) {
        HeadOutput h = head_forward(item.features.patches, model.prototypes.vectors.value, fc, model.config.epsilon);
        f += log_sum_exp(h.logits) - h.logits(item.label);
        if (grad) {
            Vector p = softmax(h.logits);
            p(item.label) -= 1.0;
            grad->noalias() += p * h.similarity_scores.transpose();
        }
    }
    const double n = static_cast<double>(pool.size());
    f /= n;
    if (grad) *grad /= n;
    if (l1 > 0) {
        for (Eigen::Index c = 0; c < fc.rows(); ++c)
            for (Eigen::Index j = 0; j < fc.cols(); ++j) {
                if (model.prototypes.class_ids[j] == c) continue;
                f += l1 * std::abs(fc(c, j));
                if (grad) (*grad)(c, j) += l1 * (fc(c, j) > 0 ? 1.0 : (fc(c, j) < 0 ? -1.0 : 0.0));
            }
    }
    return f;
}

/// Convex last-layer step: only the evidence layer moves, and every accepted
/// iterate lowers the training objective on the fixed features.
inline void last_layer_tune(Model& model, std::span<const LabeledFeatureMap> pool, int iterations, double l1 = 0.0) {
    if (iterations <= 0 || pool.empty()) return;
    if (!model.prototypes.projected()) throw Error("last-layer tuning needs projected prototypes");
    const Eigen::Index rows = model.fc.value.rows(), cols = model.fc.value.cols();
    auto objective = [&](const Vector& x, Vector& g) {
        Matrix fc = Eigen::Map<const Matrix>(x.data(), rows, cols);
        Matrix grad;
        double f = last_layer_objective(fc, model, pool, l1, &grad);
        g = Eigen::Map<const Vector>(grad.data(), grad.size());
        return f;
    };
    Vector x0 = Eigen::Map<const Vector>(model.fc.value.data(), model.fc.value.size());
    LbfgsOptions opt;
    opt.max_iterations = iterations;
    auto res = minimize_lbfgs(objective, x0, opt);
    model.fc.value = Eigen::Map<const Matrix>(res.x.data(), rows, cols);
}

namespace detail {

/// One gradient step on a mini-batch; returns the batch-mean breakdown and per-sample correctness.
inline LossBreakdown train_batch(Model& model, std::span<const Sample> samples, std::span<const size_t> batch,
                                 const LossWeights& w, bool train_backbone, Adam& adam, int& correct) {
    std::vector<nn::Param*> params = model.add_on_parameters();
    params.push_back(&model.prototypes.vectors);
    if (train_backbone)
        for (auto* p : model.backbone_parameters()) params.push_back(p);
    for (auto* p : params) p->zero_grad();

    HeadParams hp = head_params(model);
    ObjectiveGradients grads;
    grads.prototypes = Matrix::Zero(hp.prototypes.rows(), hp.prototypes.cols());
    grads.fc = Matrix::Zero(hp.fc.rows(), hp.fc.cols());
    LossBreakdown acc;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (size_t idx : batch) {
        const Sample& s = samples[idx];
        nn::Tape tb, ta;
        nn::Activation feat = model.backbone.forward(model.backbone.preprocess(s.image), train_backbone ? &tb : nullptr);
        nn::Activation z = model.add_on.forward(feat, &ta);
        HeadOutput h = head_forward(z.values, hp.prototypes, hp.fc, hp.epsilon);
        correct += predicted_label(h) == s.label;
        Matrix d_patches = Matrix::Zero(z.values.rows(), z.values.cols());
        accumulate_image_objective(z.values, h, s.label, hp, w, scale, acc, &grads, &d_patches);
        nn::Activation g = model.add_on.backward({z.height, z.width, std::move(d_patches)}, ta);
        if (train_backbone) model.backbone.backward(g, tb);
    }
    model.prototypes.vectors.grad = grads.prototypes;
    if (std::isfinite(acc.total)) adam.step(params);
    return acc;
}

inline bool finite(const LossBreakdown& b) {
    return std::isfinite(b.total) && std::isfinite(b.crsent) && std::isfinite(b.clst) && std::isfinite(b.sep) &&
           std::isfinite(b.div);
}

}  // namespace detail

/// Runs the two-phase schedule. Prototypes are projected onto the (augmented)
/// training pool after every projection_period-th epoch; the model with the
/// best validation accuracy among projected states is kept (all epochs are
/// candidates when the schedule never projects).
inline TrainState train(Model model, std::span<const Sample> train_samples, std::span<const Sample> val_samples,
                        const TrainConfig& config, const LossWeights& weights, const TrainOptions& options = {}) {
    config.validate();
    if (train_samples.empty() || val_samples.empty()) throw Error("training needs non-empty TRAIN and VAL splits");
    TrainState state;
    state.model = std::move(model);
    if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);
    const int total = config.total_epochs();
    const bool schedule_projects = config.projection_period <= total;
    std::mt19937_64 rng(config.seed);
    Adam adam(config.lr_phase1);
    ProjectionOptions popt;
    popt.image_height = popt.image_width = state.model.input_size();
    popt.epsilon = state.model.config.epsilon;
    std::vector<size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Model last_good = state.model;
    std::ofstream metrics_out;
    if (!options.out_dir.empty()) metrics_out.open(options.out_dir / "metrics.jsonl");

    for (int epoch = 1; epoch <= total; ++epoch) {
        const bool phase1 = epoch <= config.epochs_phase1;
        adam.set_learning_rate(phase1 ? config.lr_phase1 : config.lr_phase2);
        const bool train_backbone = epoch > config.warmup_epochs;
        std::shuffle(order.begin(), order.end(), rng);

        LossBreakdown epoch_loss;
        int correct = 0;
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
            std::span<const size_t> batch(order.data() + start, end - start);
            LossBreakdown b = detail::train_batch(state.model, train_samples, batch, weights, train_backbone, adam, correct);
            const double frac = static_cast<double>(batch.size()) / static_cast<double>(order.size());
            epoch_loss.total += frac * b.total;
            epoch_loss.crsent += frac * b.crsent;
            epoch_loss.clst += frac * b.clst;
            epoch_loss.sep += frac * b.sep;
            epoch_loss.div += frac * b.div;
            if (!detail::finite(b)) break;
        }
        if (!detail::finite(epoch_loss) || !state.model.prototypes.vectors.value.allFinite()) {
            if (!options.out_dir.empty()) save_checkpoint(last_good, options.out_dir / "last_good.pmsl", {{"epoch", epoch - 1}});
            throw TrainingDiverged(epoch);
        }
        state.loss_history.push_back(epoch_loss);
        state.epoch = epoch;

        nlohmann::json rec{{"epoch", epoch},
                           {"phase", phase1 ? 1 : 2},
                           {"lr", adam.learning_rate()},
                           {"backbone_trainable", train_backbone},
                           {"loss", to_json(epoch_loss)},
                           {"train_acc_running", static_cast<double>(correct) / static_cast<double>(order.size())}};

        const bool project_now = epoch % config.projection_period == 0;
        if (project_now) {
            auto pool = compute_features(state.model, train_samples);
            rec["train_acc_before_projection"] = accuracy_on_features(state.model, pool);
            project_prototypes(state.model.prototypes, pool, popt);
            rec["train_acc_after_projection"] = accuracy_on_features(state.model, pool);
            if (config.last_layer_iterations > 0) {
                last_layer_tune(state.model, pool, config.last_layer_iterations, config.last_layer_l1);
                rec["train_acc_after_last_layer"] = accuracy_on_features(state.model, pool);
            }
        }
        const double val_acc = accuracy(state.model, val_samples);
        rec["val_acc"] = val_acc;
        rec["projected"] = project_now;
        const bool candidate = project_now || !schedule_projects;
        if (candidate && val_acc > state.best_val_acc) {
            state.best_val_acc = val_acc;
            state.best_epoch = epoch;
            state.best_model = state.model;
            if (!options.out_dir.empty()) {
                state.best_checkpoint = options.out_dir / "best.pmsl";
                save_checkpoint(state.model, state.best_checkpoint, {{"epoch", epoch}, {"val_acc", val_acc}});
            }
        }
        rec["best_val_acc"] = state.best_val_acc;
        state.metrics.push_back(rec);
        if (metrics_out) metrics_out << rec.dump() << std::endl;
        if (options.on_epoch) options.on_epoch(rec);
        last_good = state.model;
    }
    if (!options.out_dir.empty()) save_checkpoint(state.model, options.out_dir / "last.pmsl", {{"epoch", state.epoch}});
    return state;
}

/// Trains on the TRAIN split (augmented per instrument) and selects on VAL.
inline TrainState train(Model model, const DatasetIndex& index, const TrainConfig& config, const LossWeights& weights,
                        const TrainOptions& options = {}) {
    const int size = model.input_size();
    auto train_samples = load_samples(index, Split::TRAIN, size, true);
    auto val_samples = load_samples(index, Split::VAL, size, false);
    return train(std::move(model), train_samples, val_samples, config, weights, options);
}

}  // namespace protomsl
