#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cadapt/init.hpp"

namespace cadapt {

struct ParamCheck {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t excluded = 0;  // perturbation flipped a hard gate
};

struct GradCheckReport {
    std::vector<ParamCheck> params;
    double max_rel_error = 0.0;
    std::size_t excluded = 0;
    bool pass = false;
};

/// Relative error |a - n| / max(|a|, |n|, 1e-6).
double relative_error(double analytic, double numeric);

/// Central differences against the tape gradient. `f` must rebuild its graph
/// on every call and return a scalar. Entries where +step or -step changes
/// any hard-gate decision are excluded and counted. Throws GraphError if two
/// evaluations at the same point disagree.
GradCheckReport grad_check(const std::function<Tensor()>& f, const NamedParams<double>& params, double step, double tol);

}  // namespace cadapt
