#pragma once

#include <any>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "protomsl/error.hpp"

namespace protomsl {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

}  // namespace protomsl

namespace protomsl::nn {

/// Spatial activation: one row per location (row-major over H x W), one column per channel.
struct Activation {
    int height = 0;
    int width = 0;
    Matrix values;

    int channels() const { return static_cast<int>(values.cols()); }
    int locations() const { return height * width; }
};

struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Matrix v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())), trainable(train) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Stack of per-layer forward state consumed in reverse by backward().
class Tape {
public:
    template <typename T>
    void push(T value) { stack_.emplace_back(std::move(value)); }

    template <typename T>
    T pop() {
        if (stack_.empty()) throw Error("tape underflow");
        T v = std::any_cast<T>(std::move(stack_.back()));
        stack_.pop_back();
        return v;
    }

    bool empty() const { return stack_.empty(); }
    void clear() { stack_.clear(); }

private:
    std::vector<std::any> stack_;
};

class Layer {
public:
    virtual ~Layer() = default;
    /// Pass a tape to record what backward() needs; nullptr for inference.
    virtual Activation forward(const Activation& in, Tape* tape) const = 0;
    virtual Activation backward(const Activation& grad_out, Tape& tape) = 0;
    virtual void collect(std::vector<Param*>& out) { (void)out; }
    virtual std::unique_ptr<Layer> clone() const = 0;
};

template <typename Derived>
class ClonableLayer : public Layer {
public:
    std::unique_ptr<Layer> clone() const override {
        return std::make_unique<Derived>(static_cast<const Derived&>(*this));
    }
};

class Conv2d : public ClonableLayer<Conv2d> {
public:
    Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding, bool bias)
        : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding),
          weight_(name + ".weight", Matrix::Zero(kernel * kernel * in_channels, out_channels)),
          bias_(name + ".bias", Matrix::Zero(1, out_channels)), has_bias_(bias) {}

    /// He-normal initialisation (fan-in).
    void init_he(std::mt19937_64& rng) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (k_ * k_ * in_)));
        for (Eigen::Index i = 0; i < weight_.value.size(); ++i) weight_.value.data()[i] = dist(rng);
        bias_.value.setZero();
    }

    int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

    Activation forward(const Activation& in, Tape* tape) const override {
        if (in.channels() != in_)
            throw DimensionError("conv " + weight_.name + ": expected " + std::to_string(in_) + " channels, got " +
                                 std::to_string(in.channels()));
        Activation out;
        out.height = out_size(in.height);
        out.width = out_size(in.width);
        if (out.height <= 0 || out.width <= 0) throw DimensionError("conv input too small");
        Matrix col = im2col(in, out.height, out.width);
        out.values = col * weight_.value;
        if (has_bias_) out.values.rowwise() += bias_.value.row(0);
        if (tape) {
            tape->push(std::move(col));
            tape->push(std::array<int, 2>{in.height, in.width});
        }
        return out;
    }

    Activation backward(const Activation& grad_out, Tape& tape) override {
        auto in_hw = tape.pop<std::array<int, 2>>();
        Matrix col = tape.pop<Matrix>();
        if (weight_.trainable) {
            weight_.grad.noalias() += col.transpose() * grad_out.values;
            if (has_bias_) bias_.grad.row(0) += grad_out.values.colwise().sum();
        }
        Matrix dcol = grad_out.values * weight_.value.transpose();
        return col2im(dcol, in_hw[0], in_hw[1], grad_out.height, grad_out.width);
    }

    void collect(std::vector<Param*>& out) override {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    Param& weight() { return weight_; }
    Param& bias() { return bias_; }
    const Param& weight() const { return weight_; }
    const Param& bias() const { return bias_; }
    int kernel() const { return k_; }
    int in_channels() const { return in_; }
    int out_channels() const { return out_; }

private:
    bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

    // Column index: (ky * k + kx) * in_channels + c.
    Matrix im2col(const Activation& in, int oh, int ow) const {
        if (pointwise()) return in.values;
        Matrix col = Matrix::Zero(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(k_) * k_ * in_);
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                auto r = static_cast<Eigen::Index>(oy) * ow + ox;
                for (int ky = 0; ky < k_; ++ky) {
                    int iy = oy * stride_ - pad_ + ky;
                    if (iy < 0 || iy >= in.height) continue;
                    for (int kx = 0; kx < k_; ++kx) {
                        int ix = ox * stride_ - pad_ + kx;
                        if (ix < 0 || ix >= in.width) continue;
                        col.row(r).segment((ky * k_ + kx) * in_, in_) =
                            in.values.row(static_cast<Eigen::Index>(iy) * in.width + ix);
                    }
                }
            }
        return col;
    }

    Activation col2im(const Matrix& dcol, int ih, int iw, int oh, int ow) const {
        Activation g;
        g.height = ih;
        g.width = iw;
        if (pointwise()) {
            g.values = dcol;
            return g;
        }
        g.values = Matrix::Zero(static_cast<Eigen::Index>(ih) * iw, in_);
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                auto r = static_cast<Eigen::Index>(oy) * ow + ox;
                for (int ky = 0; ky < k_; ++ky) {
                    int iy = oy * stride_ - pad_ + ky;
                    if (iy < 0 || iy >= ih) continue;
                    for (int kx = 0; kx < k_; ++kx) {
                        int ix = ox * stride_ - pad_ + kx;
                        if (ix < 0 || ix >= iw) continue;
                        g.values.row(static_cast<Eigen::Index>(iy) * iw + ix) +=
                            dcol.row(r).segment((ky * k_ + kx) * in_, in_);
                    }
                }
            }
        return g;
    }

    int in_, out_, k_, stride_, pad_;
    Param weight_;
    Param bias_;
    bool has_bias_;
};

/// Batch normalisation in inference form (running statistics folded into a
/// per-channel affine map). Kept frozen during fine-tuning.
class FrozenBatchNorm : public ClonableLayer<FrozenBatchNorm> {
public:
    FrozenBatchNorm(std::string name, int channels)
        : scale_(name + ".scale", Matrix::Ones(1, channels), false),
          shift_(name + ".shift", Matrix::Zero(1, channels), false) {}

    void set_from_statistics(const Vector& gamma, const Vector& beta, const Vector& mean, const Vector& var,
                             double eps = 1e-5) {
        for (Eigen::Index c = 0; c < gamma.size(); ++c) {
            double s = gamma(c) / std::sqrt(var(c) + eps);
            scale_.value(0, c) = s;
            shift_.value(0, c) = beta(c) - mean(c) * s;
        }
    }

    Activation forward(const Activation& in, Tape*) const override {
        Activation out{in.height, in.width, in.values.array().rowwise() * scale_.value.row(0).array()};
        out.values.rowwise() += shift_.value.row(0);
        return out;
    }

    Activation backward(const Activation& grad_out, Tape&) override {
        return {grad_out.height, grad_out.width, grad_out.values.array().rowwise() * scale_.value.row(0).array()};
    }

    void collect(std::vector<Param*>& out) override {
        out.push_back(&scale_);
        out.push_back(&shift_);
    }

private:
    Param scale_;
    Param shift_;
};

class ReLU : public ClonableLayer<ReLU> {
public:
    Activation forward(const Activation& in, Tape* tape) const override {
        Activation out{in.height, in.width, in.values.cwiseMax(0.0)};
        if (tape) tape->push(Matrix((in.values.array() > 0.0).cast<double>()));
        return out;
    }

    Activation backward(const Activation& grad_out, Tape& tape) override {
        Matrix mask = tape.pop<Matrix>();
        return {grad_out.height, grad_out.width, grad_out.values.cwiseProduct(mask)};
    }
};

class Sigmoid : public ClonableLayer<Sigmoid> {
public:
    Activation forward(const Activation& in, Tape* tape) const override {
        Activation out{in.height, in.width, (1.0 / (1.0 + (-in.values.array()).exp())).matrix()};
        if (tape) tape->push(Matrix(out.values));
        return out;
    }

    Activation backward(const Activation& grad_out, Tape& tape) override {
        Matrix y = tape.pop<Matrix>();
        return {grad_out.height, grad_out.width,
                (grad_out.values.array() * y.array() * (1.0 - y.array())).matrix()};
    }
};

class MaxPool2d : public ClonableLayer<MaxPool2d> {
public:
    MaxPool2d(int kernel, int stride, int padding = 0) : k_(kernel), stride_(stride), pad_(padding) {}

    int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

    Activation forward(const Activation& in, Tape* tape) const override {
        Activation out;
        out.height = out_size(in.height);
        out.width = out_size(in.width);
        if (out.height <= 0 || out.width <= 0) throw DimensionError("max-pool input too small");
        const int C = in.channels();
        out.values.resize(static_cast<Eigen::Index>(out.height) * out.width, C);
        Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> arg(out.values.rows(), C);
        for (int oy = 0; oy < out.height; ++oy)
            for (int ox = 0; ox < out.width; ++ox) {
                auto r = static_cast<Eigen::Index>(oy) * out.width + ox;
                for (int c = 0; c < C; ++c) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_idx = -1;
                    for (int ky = 0; ky < k_; ++ky) {
                        int iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= in.height) continue;
                        for (int kx = 0; kx < k_; ++kx) {
                            int ix = ox * stride_ - pad_ + kx;
                            if (ix < 0 || ix >= in.width) continue;
                            int idx = iy * in.width + ix;
                            double v = in.values(idx, c);
                            if (v > best) {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out.values(r, c) = best;
                    arg(r, c) = best_idx;
                }
            }
        if (tape) {
            tape->push(std::move(arg));
            tape->push(std::array<int, 2>{in.height, in.width});
        }
        return out;
    }

    Activation backward(const Activation& grad_out, Tape& tape) override {
        auto hw = tape.pop<std::array<int, 2>>();
        auto arg = tape.pop<Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>();
        Activation g{hw[0], hw[1], Matrix::Zero(static_cast<Eigen::Index>(hw[0]) * hw[1], grad_out.channels())};
        for (Eigen::Index r = 0; r < arg.rows(); ++r)
            for (Eigen::Index c = 0; c < arg.cols(); ++c) g.values(arg(r, c), c) += grad_out.values(r, c);
        return g;
    }

private:
    int k_, stride_, pad_;
};

class Sequential : public ClonableLayer<Sequential> {
public:
    Sequential() = default;
    Sequential(const Sequential& other) {
        for (const auto& l : other.layers_) layers_.push_back(l->clone());
    }
    Sequential& operator=(const Sequential& other) {
        if (this != &other) {
            layers_.clear();
            for (const auto& l : other.layers_) layers_.push_back(l->clone());
        }
        return *this;
    }
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    template <typename L>
    L& add(L layer) {
        auto p = std::make_unique<L>(std::move(layer));
        L& ref = *p;
        layers_.push_back(std::move(p));
        return ref;
    }

    Activation forward(const Activation& in, Tape* tape) const override {
        Activation x = in;
        for (const auto& l : layers_) x = l->forward(x, tape);
        return x;
    }

    Activation backward(const Activation& grad_out, Tape& tape) override {
        Activation g = grad_out;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g, tape);
        return g;
    }

    void collect(std::vector<Param*>& out) override {
        for (auto& l : layers_) l->collect(out);
    }

    size_t size() const { return layers_.size(); }
    Layer& at(size_t i) { return *layers_.at(i); }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

/// Residual block of two 3x3 convolutions (ResNet-18/34 style).
class BasicBlock : public ClonableLayer<BasicBlock> {
public:
    BasicBlock(const std::string& name, int in_channels, int out_channels, int stride)
        : conv1_(name + ".conv1", in_channels, out_channels, 3, stride, 1, false),
          bn1_(name + ".bn1", out_channels),
          conv2_(name + ".conv2", out_channels, out_channels, 3, 1, 1, false),
          bn2_(name + ".bn2", out_channels),
          downsample_(stride != 1 || in_channels != out_channels) {
        if (downsample_) {
            down_conv_.emplace(name + ".downsample.0", in_channels, out_channels, 1, stride, 0, false);
            down_bn_.emplace(name + ".downsample.1", out_channels);
        }
    }

    void init_he(std::mt19937_64& rng) {
        conv1_.init_he(rng);
        conv2_.init_he(rng);
        if (downsample_) down_conv_->init_he(rng);
    }

    Activation forward(const Activation& in, Tape* tape) const override {
        Activation a = relu1_.forward(bn1_.forward(conv1_.forward(in, tape), tape), tape);
        Activation b = bn2_.forward(conv2_.forward(a, tape), tape);
        if (downsample_) {
            Activation s = down_bn_->forward(down_conv_->forward(in, tape), tape);
            b.values += s.values;
        } else {
            b.values += in.values;
        }
        return relu_out_.forward(b, tape);
    }

    Activation backward(const Activation& grad_out, Tape& tape) override {
        Activation g = relu_out_.backward(grad_out, tape);
        Activation g_short;
        if (downsample_) g_short = down_conv_->backward(down_bn_->backward(g, tape), tape);
        else g_short = g;
        Activation g_main = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(g, tape), tape), tape), tape), tape);
        g_main.values += g_short.values;
        return g_main;
    }

    void collect(std::vector<Param*>& out) override {
        conv1_.collect(out);
        bn1_.collect(out);
        conv2_.collect(out);
        bn2_.collect(out);
        if (downsample_) {
            down_conv_->collect(out);
            down_bn_->collect(out);
        }
    }

    Conv2d& conv1() { return conv1_; }
    Conv2d& conv2() { return conv2_; }
    FrozenBatchNorm& bn1() { return bn1_; }
    FrozenBatchNorm& bn2() { return bn2_; }
    bool has_downsample() const { return downsample_; }
    Conv2d& down_conv() { return *down_conv_; }
    FrozenBatchNorm& down_bn() { return *down_bn_; }

private:
    Conv2d conv1_;
    FrozenBatchNorm bn1_;
    ReLU relu1_;
    Conv2d conv2_;
    FrozenBatchNorm bn2_;
    bool downsample_;
    std::optional<Conv2d> down_conv_;
    std::optional<FrozenBatchNorm> down_bn_;
    ReLU relu_out_;
};

}  // namespace protomsl::nn
