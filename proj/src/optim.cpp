#include "cadapt/optim.hpp"

#include <cmath>

#include "cadapt/errors.hpp"

namespace cadapt {

template <typename T>
Adam<T>::Adam(NamedParams<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw ConfigError("learning rate must be positive");
    for (auto& [name, t] : params_) {
        m_.emplace_back(t->numel(), 0.0);
        v_.emplace_back(t->numel(), 0.0);
    }
}

template <typename T>
void Adam<T>::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i].second;
        const auto g = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            w[j] = static_cast<T>(w[j] - cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps));
        }
    }
}

template <typename T>
void Adam<T>::zero_grad() {
    for (auto& [name, t] : params_) t->zero_grad();
}

template class Adam<double>;
template class Adam<float>;

}  // namespace cadapt
