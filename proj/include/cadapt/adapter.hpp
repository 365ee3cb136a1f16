#pragma once

// The full correlation-aware adapter: DCE + HD + HPCL + fusion, wired the way
// training and inference use them.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cadapt/dce.hpp"
#include "cadapt/fusion.hpp"
#include "cadapt/hpcl.hpp"
#include "cadapt/projection.hpp"

namespace cadapt {

enum class DceMode { Full, PearsonOnly };

struct AdapterConfig {
    DceConfig dce;
    HpclConfig hpcl;
    std::size_t hd_depth = 3;      // l1
    std::size_t fusion_depth = 3;  // l2
    bool dual = true;              // false: one projection branch shared by both spaces
    DceMode dce_mode = DceMode::Full;
    bool hpcl_on = true;
    double beta_logit_init = -5.0;
    std::uint64_t seed = 0;
};

template <typename T>
struct AdapterState {
    AdapterConfig config;
    std::size_t channels = 0, patches = 0, dim = 0, horizon = 0;
    DceParams<T> dce;
    HdParams<T> hd;
    HpclParams<T> hpcl;
    FusionParams<T> fusion;

    static AdapterState init(const AdapterConfig& cfg, std::size_t channels, std::size_t patches, std::size_t dim,
                             std::size_t horizon);

    /// Every parameter tensor, trainable or not.
    NamedParams<T> all_parameters();
    /// Parameters the optimizer updates under the current ablation switches.
    NamedParams<T> trainable_parameters();
    std::size_t trainable_count();

    std::vector<std::vector<T>> snapshot();
    void restore(const std::vector<std::vector<T>>& values);
};

template <typename T>
struct TrainOutputs {
    BasicTensor<T> ystar;  // [B, N, F] normalized space
    BasicTensor<T> l_pos, l_neg, l_aux;
    BasicTensor<T> corr;   // [B, N, N]
    BasicTensor<T> x_pos, x_neg;
};

/// Training path: DCE (when hpcl is on) + HD + HPCL + fusion.
template <typename T>
TrainOutputs<T> adapter_forward_train(const AdapterState<T>& state, const BasicTensor<T>& repr,
                                      const BasicTensor<T>& pearson, const BasicTensor<T>& yhat_norm);

/// Inference path: HD + fusion only; never builds a correlation matrix.
template <typename T>
BasicTensor<T> adapter_forward_infer(const AdapterState<T>& state, const BasicTensor<T>& repr,
                                     const BasicTensor<T>& yhat_norm);

void save_adapter(AdapterState<double>& state, const std::filesystem::path& path);
AdapterState<double> load_adapter(const std::filesystem::path& path, const AdapterConfig& cfg);

}  // namespace cadapt
