#pragma once

#include <random>
#include <string>
#include <vector>

#include "protomsl/protonet.hpp"

namespace testing_support {

using protomsl::FeatureMap;
using protomsl::Matrix;

inline Matrix random_matrix(int rows, int cols, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

inline FeatureMap random_map(int h, int w, int d, std::mt19937_64& rng, std::string id = "img") {
    return FeatureMap(h, w, random_matrix(h * w, d, rng), std::move(id));
}

inline protomsl::PrototypeLayer layer_from(const Matrix& vectors, std::vector<int> class_ids, int num_classes) {
    protomsl::PrototypeLayer p;
    p.vectors = protomsl::nn::Param("prototype_vectors", vectors);
    p.class_ids = std::move(class_ids);
    p.sources.assign(p.class_ids.size(), std::nullopt);
    p.num_classes = num_classes;
    return p;
}

}  // namespace testing_support
