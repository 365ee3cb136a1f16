#pragma once

// Frozen patch-linear stand-in for a foundation model:
// instance-normalize -> patchify -> linear embed (l -> d) -> flatten -> linear head.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cadapt/data.hpp"
#include "cadapt/tensor.hpp"

namespace cadapt {

inline constexpr double kNormFloor = 1e-8;

struct BackboneConfig {
    std::size_t lookback = 96;
    std::size_t horizon = 96;
    std::size_t patch_len = 16;
    std::size_t repr_dim = 32;
    std::uint64_t seed = 0;

    std::size_t patches() const { return lookback / patch_len; }
    void validate() const;
};

struct BackboneState {
    BackboneConfig config;
    std::vector<double> embedding;  // patch_len x repr_dim
    std::vector<double> head;       // (patches * repr_dim) x horizon
    double ridge = 0.0;             // ridge actually used for the head
    std::size_t ridge_escalations = 0;
    double train_mse = 0.0;         // normalized-space fit error
};

BackboneState pretrain_backbone(const WindowBatch& corpus, const BackboneConfig& config, double ridge = 1e-4);

/// Per-window, per-channel normalization statistics.
struct InstanceStats {
    std::vector<double> mean;   // B x N
    std::vector<double> stdev;  // B x N (floored)
    std::vector<bool> flat;     // B x N, true where the floor was hit
};

struct BackboneOutput {
    Tensor repr;       // [B, P, N, d]
    Tensor yhat_norm;  // [B, N, F], normalized space
    InstanceStats stats;

    /// yhat in the raw scale of the inputs: [B, N, F].
    std::vector<double> yhat_raw() const;
};

BackboneOutput backbone_forward(const BackboneState& state, const WindowBatch& windows);

/// Applies the stats of window b to normalized values shaped [B, N, F].
std::vector<double> denormalize(std::span<const double> normalized, const InstanceStats& stats, std::size_t horizon);
/// Normalizes targets with each window's input statistics.
std::vector<double> normalize_targets(const WindowBatch& windows, const InstanceStats& stats);

void save_backbone(const BackboneState& state, const std::filesystem::path& path);
BackboneState load_backbone(const std::filesystem::path& path);

}  // namespace cadapt
