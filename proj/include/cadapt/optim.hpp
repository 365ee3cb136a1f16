#pragma once

#include <cstddef>
#include <vector>

#include "cadapt/init.hpp"

namespace cadapt {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by position in the
/// parameter list, so the list must keep its order between steps.
template <typename T>
class Adam {
public:
    Adam(NamedParams<T> params, AdamConfig cfg);

    /// Applies one update from the gradients currently held by the params.
    void step();
    void zero_grad();
    std::size_t steps() const { return t_; }

private:
    NamedParams<T> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace cadapt
