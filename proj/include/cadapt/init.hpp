#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cadapt/tensor.hpp"

namespace cadapt {

using Rng = std::mt19937_64;

template <typename T>
using NamedParams = std::vector<std::pair<std::string, BasicTensor<T>*>>;

template <typename T>
BasicTensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
BasicTensor<T> uniform_param(Shape shape, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
BasicTensor<T> const_param(Shape shape, double value) {
    return BasicTensor<T>::full(std::move(shape), static_cast<T>(value), true);
}

/// Converts a 64-bit constant into the working precision.
template <typename T>
BasicTensor<T> constant_from(Shape shape, const std::vector<double>& values) {
    return BasicTensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()), false);
}

}  // namespace cadapt
