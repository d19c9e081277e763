#pragma once

#include <array>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "protomsl/archive.hpp"
#include "protomsl/image.hpp"
#include "protomsl/nn/layers.hpp"

namespace protomsl::nn {

/// Convolutional feature extractor f. Input is a square RGB image at
/// `input_size`; output is an (input_size / downsample)^2 grid of
/// `out_channels`-dimensional vectors.
struct Backbone {
    std::string name;
    int input_size = 0;
    int downsample = 1;
    int out_channels = 0;
    Sequential net;
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> stdev{0.229, 0.224, 0.225};

    int grid_size() const { return input_size / downsample; }

    Activation preprocess(const Image& img) const {
        if (img.height != input_size || img.width != input_size)
            throw DimensionError(name + " expects " + std::to_string(input_size) + "x" + std::to_string(input_size) +
                                 " input, got " + std::to_string(img.width) + "x" + std::to_string(img.height));
        Image rgb = to_rgb(img);
        Activation a{input_size, input_size, Matrix(static_cast<Eigen::Index>(input_size) * input_size, 3)};
        for (int y = 0; y < input_size; ++y)
            for (int x = 0; x < input_size; ++x)
                for (int c = 0; c < 3; ++c)
                    a.values(static_cast<Eigen::Index>(y) * input_size + x, c) = (rgb.at(y, x, c) - mean[c]) / stdev[c];
        return a;
    }

    Activation forward(const Activation& in, Tape* tape) const { return net.forward(in, tape); }
    Activation backward(const Activation& g, Tape& tape) { return net.backward(g, tape); }

    std::vector<Param*> parameters() {
        std::vector<Param*> out;
        net.collect(out);
        return out;
    }
};

inline const std::vector<std::string>& backbone_names() {
    static const std::vector<std::string> names{"tiny", "vgg19", "resnet18"};
    return names;
}

namespace detail {

inline Conv2d& add_conv(Sequential& net, const std::string& name, int in, int out, int k, int stride, int pad,
                        bool bias, std::mt19937_64& rng) {
    Conv2d conv(name, in, out, k, stride, pad, bias);
    conv.init_he(rng);
    return net.add(std::move(conv));
}

inline Backbone make_tiny(std::mt19937_64& rng) {
    Backbone b;
    b.name = "tiny";
    b.input_size = 56;
    b.downsample = 8;
    b.out_channels = 64;
    int idx = 0, in = 3;
    for (int out : {16, 32, 64}) {
        add_conv(b.net, "features." + std::to_string(idx), in, out, 3, 1, 1, true, rng);
        b.net.add(ReLU{});
        b.net.add(MaxPool2d(2, 2));
        idx += 3;
        in = out;
    }
    return b;
}

inline Backbone make_vgg19(std::mt19937_64& rng) {
    Backbone b;
    b.name = "vgg19";
    b.input_size = 224;
    b.downsample = 32;
    b.out_channels = 512;
    const int cfg[] = {64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0};
    int idx = 0, in = 3;
    for (int v : cfg) {
        if (v == 0) {
            b.net.add(MaxPool2d(2, 2));
            idx += 1;
        } else {
            add_conv(b.net, "features." + std::to_string(idx), in, v, 3, 1, 1, true, rng);
            b.net.add(ReLU{});
            idx += 2;
            in = v;
        }
    }
    return b;
}

inline Backbone make_resnet18(std::mt19937_64& rng) {
    Backbone b;
    b.name = "resnet18";
    b.input_size = 224;
    b.downsample = 32;
    b.out_channels = 512;
    add_conv(b.net, "conv1", 3, 64, 7, 2, 3, false, rng);
    b.net.add(FrozenBatchNorm("bn1", 64));
    b.net.add(ReLU{});
    b.net.add(MaxPool2d(3, 2, 1));
    int in = 64;
    const int widths[] = {64, 128, 256, 512};
    for (int layer = 0; layer < 4; ++layer) {
        for (int block = 0; block < 2; ++block) {
            int stride = (layer > 0 && block == 0) ? 2 : 1;
            std::string name = "layer" + std::to_string(layer + 1) + "." + std::to_string(block);
            BasicBlock bb(name, in, widths[layer], stride);
            bb.init_he(rng);
            b.net.add(std::move(bb));
            in = widths[layer];
        }
    }
    return b;
}

// torchvision stores conv weights as [out, in, kh, kw].
inline void load_conv(Conv2d& conv, const TensorArchive& a, const std::string& name) {
    const Tensor& w = a.at(name + ".weight");
    const int k = conv.kernel(), in = conv.in_channels(), out = conv.out_channels();
    if (w.shape != std::vector<int64_t>{out, in, k, k})
        throw ArchiveError("tensor '" + name + ".weight' has an unexpected shape");
    Matrix& W = conv.weight().value;
    for (int o = 0; o < out; ++o)
        for (int c = 0; c < in; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx)
                    W((ky * k + kx) * in + c, o) = w.data[((static_cast<size_t>(o) * in + c) * k + ky) * k + kx];
    if (a.has(name + ".bias")) {
        const Tensor& bias = a.at(name + ".bias");
        for (int o = 0; o < out; ++o) conv.bias().value(0, o) = bias.data[o];
    }
}

inline void load_bn(FrozenBatchNorm& bn, const TensorArchive& a, const std::string& name) {
    auto vec = [&](const std::string& suffix) {
        const Tensor& t = a.at(name + "." + suffix);
        return Vector(Eigen::Map<const Vector>(t.data.data(), static_cast<Eigen::Index>(t.data.size())));
    };
    bn.set_from_statistics(vec("weight"), vec("bias"), vec("running_mean"), vec("running_var"));
}

}  // namespace detail

/// Builds a backbone with He-initialised weights. Pretrained weights are
/// applied afterwards with load_torchvision_weights().
inline Backbone make_backbone(std::string_view name, std::mt19937_64& rng) {
    if (name == "tiny") return detail::make_tiny(rng);
    if (name == "vgg19") return detail::make_vgg19(rng);
    if (name == "resnet18") return detail::make_resnet18(rng);
    throw Error("unknown backbone '" + std::string(name) + "'");
}

/// Loads a torchvision-style state dict (exported by tools/export_torchvision_weights.py).
inline void load_torchvision_weights(Backbone& b, const TensorArchive& a) {
    if (a.meta.contains("arch") && a.meta["arch"].get<std::string>() != b.name)
        throw ArchiveError("weights are for '" + a.meta["arch"].get<std::string>() + "', backbone is '" + b.name + "'");
    if (b.name == "resnet18") {
        detail::load_conv(dynamic_cast<Conv2d&>(b.net.at(0)), a, "conv1");
        detail::load_bn(dynamic_cast<FrozenBatchNorm&>(b.net.at(1)), a, "bn1");
        size_t idx = 4;
        for (int layer = 1; layer <= 4; ++layer)
            for (int block = 0; block < 2; ++block, ++idx) {
                auto& bb = dynamic_cast<BasicBlock&>(b.net.at(idx));
                std::string p = "layer" + std::to_string(layer) + "." + std::to_string(block);
                detail::load_conv(bb.conv1(), a, p + ".conv1");
                detail::load_bn(bb.bn1(), a, p + ".bn1");
                detail::load_conv(bb.conv2(), a, p + ".conv2");
                detail::load_bn(bb.bn2(), a, p + ".bn2");
                if (bb.has_downsample()) {
                    detail::load_conv(bb.down_conv(), a, p + ".downsample.0");
                    detail::load_bn(bb.down_bn(), a, p + ".downsample.1");
                }
            }
        return;
    }
    // vgg19 / tiny: convs are addressed by their own names.
    for (size_t i = 0; i < b.net.size(); ++i)
        if (auto* conv = dynamic_cast<Conv2d*>(&b.net.at(i))) {
            std::string name = conv->weight().name;
            detail::load_conv(*conv, a, name.substr(0, name.size() - std::string(".weight").size()));
        }
}

}  // namespace protomsl::nn
