#include "cadapt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cadapt/errors.hpp"

namespace cadapt {

namespace {

struct Eval {
    double value;
    std::vector<std::uint8_t> gates;
};

Eval evaluate(const std::function<Tensor()>& f) {
    GateLog::clear();
    Eval e;
    {
        NoGradGuard guard;
        e.value = f().item();
    }
    e.gates = GateLog::bits();
    return e;
}

class GateScope {
public:
    GateScope() : previous_(GateLog::enabled()) { GateLog::enable(true); }
    ~GateScope() {
        GateLog::clear();
        GateLog::enable(previous_);
    }

private:
    bool previous_;
};

}  // namespace

double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const NamedParams<double>& params, double step, double tol) {
    if (!(step > 0.0)) throw ConfigError("grad_check step must be positive");
    GateScope scope;

    const Eval base = evaluate(f);
    const Eval again = evaluate(f);
    if (std::memcmp(&base.value, &again.value, sizeof(double)) != 0 || base.gates != again.gates)
        throw GraphError("function is not deterministic: two evaluations at the same point disagree");

    for (auto& [name, t] : params) t->zero_grad();
    backward(f());
    std::vector<std::vector<double>> analytic;
    for (auto& [name, t] : params) analytic.emplace_back(t->grad().begin(), t->grad().end());

    GradCheckReport report;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, t] = params[i];
        ParamCheck pc{name};
        auto w = t->mutable_data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double orig = w[j];
            w[j] = orig + step;
            const Eval plus = evaluate(f);
            w[j] = orig - step;
            const Eval minus = evaluate(f);
            w[j] = orig;
            if (plus.gates != base.gates || minus.gates != base.gates) {
                ++pc.excluded;
                continue;
            }
            const double numeric = (plus.value - minus.value) / (2.0 * step);
            pc.max_rel_error = std::max(pc.max_rel_error, relative_error(analytic[i][j], numeric));
            ++pc.checked;
        }
        report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
        report.excluded += pc.excluded;
        report.params.push_back(std::move(pc));
    }
    report.pass = report.max_rel_error < tol;
    return report;
}

}  // namespace cadapt
