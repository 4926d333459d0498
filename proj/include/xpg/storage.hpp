// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "xpg/codec.hpp"
#include "xpg/model.hpp"

namespace xpg {

enum class BackendKind : uint8_t { CompressedDevice, HostOffload };

std::string_view to_string(BackendKind kind);
// Accepts "compressed_device" / "host_offload". Throws Error(Validation).
BackendKind backend_kind_from_string(std::string_view text);

struct Backend {
    BackendKind kind = BackendKind::HostOffload;
    double bandwidth = 0.0;  // bytes/s; post-decompression rate for CompressedDevice
    uint64_t capacity = UINT64_MAX;

    void validate() const;
};

inline constexpr double kDefaultDeviceBandwidth = 300e9;
inline constexpr double kDefaultHostBandwidth = 30e9;

// Device-compressed backend first, host-offload second.
std::vector<Backend> default_backends();

// x_k = B_k / sum(B).
std::vector<double> bandwidth_fractions(const std::vector<Backend>& backends);

struct PlacementPlan {
    static constexpr int32_t kUnassigned = -1;

    std::vector<double> fractions;
    std::optional<double> alpha;
    // Backend index per tensor, indexed by linear_index.
    std::vector<int32_t> assignment;
    // per_layer_bytes[layer - 1][k], raw bytes.
    std::vector<std::vector<uint64_t>> per_layer_bytes;

    // Throws Error(BackendMiss).
    uint32_t backend_of(const ExpertTensorId& id, const ModelSpec& spec) const;
    uint64_t bytes_on(size_t backend) const;
    std::vector<double> realized_fractions() const;
};

// Without alpha: bandwidth-proportional fractions, realized per layer by
// placing tensors (largest first) wherever they finish earliest.
// With alpha: requires exactly one CompressedDevice and one HostOffload
// backend; round(alpha*N*L) experts go to the device, spread evenly over
// layers, lowest expert indices first. Throws Validation or CapacityExceeded.
PlacementPlan plan_placement(const ModelSpec& spec, const std::vector<Backend>& backends,
                             std::optional<double> alpha = std::nullopt);

struct LoadEstimate {
    std::vector<std::vector<double>> tau_k;  // [layer - 1][k], seconds
    std::vector<double> tau_layer;           // max over k
    double tau_load = 0.0;                   // sum over layers
};

// `extra_bytes`, when given, adds per-layer per-backend bytes on top of the
// plan (same shape as per_layer_bytes).
LoadEstimate estimate_load(const PlacementPlan& plan, const std::vector<Backend>& backends,
                           const std::vector<std::vector<uint64_t>>* extra_bytes = nullptr);

// Serves exact tensor bytes from the backend each tensor was assigned to.
// Host tensors are kept raw; device tensors are kept compressed under one
// model-wide table. Read-only after construction apart from the delay hook.
class TensorStorage {
public:
    using DelayHook = std::function<void(const ExpertTensorId&)>;

    TensorStorage(const WeightContainer& weights, PlacementPlan plan, std::vector<Backend> backends);
    TensorStorage(const CompressedModel& compressed, PlacementPlan plan, std::vector<Backend> backends);

    const ModelSpec& spec() const { return spec_; }
    const PlacementPlan& plan() const { return plan_; }
    const std::vector<Backend>& backends() const { return backends_; }
    const HuffmanTable& table() const { return table_; }
    BackendKind backend_kind(const ExpertTensorId& id) const;

    // Called at the start of every fetch; used to inject latency in tests.
    void set_delay_hook(DelayHook hook) { delay_ = std::move(hook); }

    // Writes the tensor's original bytes into `dest`. Throws BackendMiss,
    // Validation on size mismatch, or codec errors.
    void fetch(const ExpertTensorId& id, std::span<std::byte> dest) const;

    uint64_t device_stored_bytes() const;
    uint64_t host_stored_bytes() const;

private:
    void assign_slots();

    ModelSpec spec_;
    PlacementPlan plan_;
    std::vector<Backend> backends_;
    HuffmanTable table_;
    std::vector<std::vector<std::byte>> raw_;    // by linear index, host tensors only
    std::vector<CompressedTensor> compressed_;  // by linear index, device tensors only
    DelayHook delay_;
};

}  // namespace xpg
