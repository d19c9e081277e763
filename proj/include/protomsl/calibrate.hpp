#pragma once

#include <cmath>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomsl/error.hpp"
#include "protomsl/optim.hpp"

namespace protomsl {

inline Vector softmax(const Vector& z) {
    Vector e = (z.array() - z.maxCoeff()).exp();
    return e / e.sum();
}

inline double log_sum_exp(const Vector& z) {
    double m = z.maxCoeff();
    return m + std::log((z.array() - m).exp().sum());
}

enum class CalibrationKind { NONE, TEMPERATURE, VECTOR };

inline std::string to_string(CalibrationKind k) {
    switch (k) {
        case CalibrationKind::NONE: return "none";
        case CalibrationKind::TEMPERATURE: return "temperature";
        case CalibrationKind::VECTOR: return "vector";
    }
    return "none";
}

inline CalibrationKind parse_calibration_kind(const std::string& s) {
    if (s == "none") return CalibrationKind::NONE;
    if (s == "temp" || s == "temperature") return CalibrationKind::TEMPERATURE;
    if (s == "vector") return CalibrationKind::VECTOR;
    throw CalibrationError("unknown calibration method '" + s + "'");
}

/// Post-hoc rescaling of logits before the softmax.
struct Calibrator {
    CalibrationKind kind = CalibrationKind::NONE;
    double temperature = 1.0;
    Vector scale;  // VECTOR only
    Vector bias;   // VECTOR only

    static Calibrator identity() { return {}; }
    static Calibrator with_temperature(double t) {
        if (!(t > 0)) throw CalibrationError("temperature must be positive");
        return {CalibrationKind::TEMPERATURE, t, {}, {}};
    }
    static Calibrator with_vector(Vector s, Vector b) {
        if (s.size() != b.size()) throw CalibrationError("scale and bias sizes differ");
        return {CalibrationKind::VECTOR, 1.0, std::move(s), std::move(b)};
    }

    Vector scaled_logits(const Vector& logits) const {
        if (!logits.allFinite()) throw CalibrationError("non-finite logits");
        switch (kind) {
            case CalibrationKind::NONE: return logits;
            case CalibrationKind::TEMPERATURE: return logits / temperature;
            case CalibrationKind::VECTOR:
                if (scale.size() != logits.size()) throw CalibrationError("calibrator fitted for a different class count");
                return scale.cwiseProduct(logits) + bias;
        }
        return logits;
    }

    Vector apply(const Vector& logits) const { return softmax(scaled_logits(logits)); }
};

inline nlohmann::json to_json(const Calibrator& c) {
    nlohmann::json j{{"kind", to_string(c.kind)}};
    if (c.kind == CalibrationKind::TEMPERATURE) j["temperature"] = c.temperature;
    if (c.kind == CalibrationKind::VECTOR) {
        j["scale"] = std::vector<double>(c.scale.data(), c.scale.data() + c.scale.size());
        j["bias"] = std::vector<double>(c.bias.data(), c.bias.data() + c.bias.size());
    }
    return j;
}

inline Calibrator calibrator_from_json(const nlohmann::json& j) {
    auto kind = parse_calibration_kind(j.at("kind").get<std::string>());
    if (kind == CalibrationKind::TEMPERATURE) return Calibrator::with_temperature(j.at("temperature").get<double>());
    if (kind == CalibrationKind::VECTOR) {
        auto s = j.at("scale").get<std::vector<double>>();
        auto b = j.at("bias").get<std::vector<double>>();
        return Calibrator::with_vector(Eigen::Map<Vector>(s.data(), s.size()), Eigen::Map<Vector>(b.data(), b.size()));
    }
    return Calibrator::identity();
}

inline double mean_nll(const Calibrator& c, std::span<const Vector> logits, std::span<const int> labels) {
    double total = 0;
    for (size_t i = 0; i < logits.size(); ++i) {
        Vector u = c.scaled_logits(logits[i]);
        total += log_sum_exp(u) - u(labels[i]);
    }
    return total / static_cast<double>(logits.size());
}

/// Fits by minimising validation NLL with L-BFGS (gradient-norm tolerance and
/// iteration cap from `options`). The vector fit starts from the temperature
/// optimum, so its NLL never exceeds the temperature fit's.
inline Calibrator fit_calibrator(CalibrationKind kind, std::span<const Vector> logits, std::span<const int> labels,
                                 const LbfgsOptions& options = {}) {
    if (logits.empty() || logits.size() != labels.size()) throw CalibrationError("need matching, non-empty logits and labels");
    const Eigen::Index C = logits[0].size();
    std::set<int> distinct;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (logits[i].size() != C) throw CalibrationError("ragged logits");
        if (!logits[i].allFinite()) throw CalibrationError("non-finite logits");
        if (labels[i] < 0 || labels[i] >= C) throw CalibrationError("label out of range");
        distinct.insert(labels[i]);
    }
    if (distinct.size() < 2) throw CalibrationError("degenerate validation set: a single class");
    if (kind == CalibrationKind::NONE) return Calibrator::identity();

    const double n = static_cast<double>(logits.size());
    auto temp_objective = [&](const Vector& x, Vector& grad) {
        const double t = std::exp(x(0));
        double f = 0, dt = 0;
        for (size_t i = 0; i < logits.size(); ++i) {
            Vector u = logits[i] / t;
            Vector p = softmax(u);
            f += log_sum_exp(u) - u(labels[i]);
            dt += (logits[i](labels[i]) - p.dot(logits[i])) / (t * t);
        }
        grad.resize(1);
        grad(0) = dt / n * t;
        return f / n;
    };
    auto tres = minimize_lbfgs(temp_objective, Vector::Zero(1), options);
    Calibrator temp = Calibrator::with_temperature(std::exp(tres.x(0)));
    if (kind == CalibrationKind::TEMPERATURE) return temp;

    auto vec_objective = [&](const Vector& theta, Vector& grad) {
        grad = Vector::Zero(2 * C);
        double f = 0;
        for (size_t i = 0; i < logits.size(); ++i) {
            Vector u = theta.head(C).cwiseProduct(logits[i]) + theta.tail(C);
            Vector p = softmax(u);
            f += log_sum_exp(u) - u(labels[i]);
            p(labels[i]) -= 1.0;
            grad.head(C) += p.cwiseProduct(logits[i]);
            grad.tail(C) += p;
        }
        grad /= n;
        return f / n;
    };
    Vector theta0(2 * C);
    theta0.head(C).setConstant(1.0 / temp.temperature);
    theta0.tail(C).setZero();
    auto vres = minimize_lbfgs(vec_objective, theta0, options);
    return Calibrator::with_vector(vres.x.head(C), vres.x.tail(C));
}

/// Expected calibration error over equal-width confidence bins.
inline double expected_calibration_error(std::span<const double> confidence, std::span<const int> correct, int bins = 15) {
    if (confidence.empty()) return 0;
    std::vector<double> conf_sum(bins, 0), acc_sum(bins, 0);
    std::vector<int> count(bins, 0);
    for (size_t i = 0; i < confidence.size(); ++i) {
        int b = std::min(bins - 1, static_cast<int>(confidence[i] * bins));
        conf_sum[b] += confidence[i];
        acc_sum[b] += correct[i];
        count[b] += 1;
    }
    double ece = 0;
    for (int b = 0; b < bins; ++b)
        if (count[b] > 0) ece += std::abs(acc_sum[b] - conf_sum[b]) / static_cast<double>(confidence.size());
    return ece;
}

}  // namespace protomsl
