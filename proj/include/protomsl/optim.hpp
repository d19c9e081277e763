#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "protomsl/nn/layers.hpp"

namespace protomsl {

/// Adam over named parameters. Moment estimates are keyed by parameter name,
/// so they persist across learning-rate changes.
class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_learning_rate(double lr) { lr_ = lr; }
    double learning_rate() const { return lr_; }

    void step(const std::vector<nn::Param*>& params) {
        for (nn::Param* p : params) {
            if (!p->trainable) continue;
            auto& s = state_[p->name];
            if (s.m.size() == 0) {
                s.m = Matrix::Zero(p->value.rows(), p->value.cols());
                s.v = Matrix::Zero(p->value.rows(), p->value.cols());
            }
            s.t += 1;
            s.m = beta1_ * s.m + (1 - beta1_) * p->grad;
            s.v = beta2_ * s.v + (1 - beta2_) * p->grad.cwiseAbs2();
            const double c1 = 1 - std::pow(beta1_, s.t), c2 = 1 - std::pow(beta2_, s.t);
            p->value.array() -= lr_ * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps_);
        }
    }

private:
    struct State {
        Matrix m;
        Matrix v;
        int t = 0;
    };
    double lr_, beta1_, beta2_, eps_;
    std::unordered_map<std::string, State> state_;
};

struct LbfgsOptions {
    int max_iterations = 500;
    double gradient_tolerance = 1e-6;
    int history = 10;
};

struct LbfgsResult {
    Vector x;
    double value = 0;
    double gradient_norm = 0;
    int iterations = 0;
    bool converged = false;
};

/// Limited-memory BFGS with a backtracking Armijo line search. Every accepted
/// step decreases the objective. `f(x, grad)` returns the value and fills grad.
template <typename Objective>
LbfgsResult minimize_lbfgs(Objective&& f, Vector x, const LbfgsOptions& opt = {}) {
    const Eigen::Index n = x.size();
    Vector g(n);
    double fx = f(x, g);
    std::deque<Vector> s_hist, y_hist;
    std::deque<double> rho_hist;
    LbfgsResult res;
    int it = 0;
    for (; it < opt.max_iterations; ++it) {
        if (g.norm() <= opt.gradient_tolerance) break;
        // Two-loop recursion.
        Vector q = g;
        std::vector<double> alpha(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            alpha[i] = rho_hist[i] * s_hist[i].dot(q);
            q -= alpha[i] * y_hist[i];
        }
        double gamma = 1.0;
        if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        else gamma = 1.0 / std::max(1.0, g.norm());
        Vector d = gamma * q;
        for (size_t i = 0; i < s_hist.size(); ++i) {
            double beta = rho_hist[i] * y_hist[i].dot(d);
            d += s_hist[i] * (alpha[i] - beta);
        }
        d = -d;
        double slope = g.dot(d);
        if (!(slope < 0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = -g / std::max(1.0, g.norm());
            slope = g.dot(d);
        }
        double step = 1.0;
        Vector x_new(n), g_new(n);
        double f_new = fx;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            x_new = x + step * d;
            f_new = f(x_new, g_new);
            if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        Vector s = x_new - x, y = g_new - g;
        double sy = s.dot(y);
        if (sy > 1e-12) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opt.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        x = std::move(x_new);
        g = std::move(g_new);
        fx = f_new;
    }
    res.x = std::move(x);
    res.value = fx;
    res.gradient_norm = g.norm();
    res.iterations = it;
    res.converged = res.gradient_norm <= opt.gradient_tolerance;
    return res;
}

}  // namespace protomsl
