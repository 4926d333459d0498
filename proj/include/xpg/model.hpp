// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace xpg {

enum class TensorKind : uint8_t { GateUp = 1, Down = 2 };

inline constexpr int kind_index(TensorKind kind) { return kind == TensorKind::GateUp ? 0 : 1; }
inline constexpr TensorKind kind_from_index(int index) { return index == 0 ? TensorKind::GateUp : TensorKind::Down; }
inline constexpr TensorKind kAllKinds[] = {TensorKind::GateUp, TensorKind::Down};

// Geometry of a synthetic MoE model. All expert weights are bf16.
struct ModelSpec {
    uint64_t num_layers = 0;         // N
    uint64_t experts_per_layer = 0;  // L
    uint64_t hidden_dim = 0;         // H
    uint64_t intermediate_dim = 0;   // F

    // Fused gate/up tensor, shape [2F, H].
    uint64_t gate_up_bytes() const { return 2 * hidden_dim * 2 * intermediate_dim; }
    // Down projection, shape [H, F].
    uint64_t down_bytes() const { return 2 * intermediate_dim * hidden_dim; }
    uint64_t tensor_bytes(TensorKind kind) const {
        return kind == TensorKind::GateUp ? gate_up_bytes() : down_bytes();
    }
    uint64_t expert_bytes() const { return gate_up_bytes() + down_bytes(); }
    uint64_t layer_bytes() const { return experts_per_layer * expert_bytes(); }
    uint64_t total_bytes() const { return num_layers * layer_bytes(); }
    // Bytes of the mandatory two-layer residency window.
    uint64_t window_bytes() const { return 2 * layer_bytes(); }
    uint64_t tensor_count() const { return 2 * num_layers * experts_per_layer; }

    // Throws Error(Validation) unless N >= 2, L >= 1, H >= 1, F >= 1.
    void validate() const;

    bool operator==(const ModelSpec&) const = default;
};

// Layer and expert indices are 1-based, matching the layer arithmetic used by
// the recycling schedule.
struct ExpertTensorId {
    uint32_t layer = 1;
    uint32_t expert = 1;
    TensorKind kind = TensorKind::GateUp;

    bool operator==(const ExpertTensorId&) const = default;
    auto operator<=>(const ExpertTensorId&) const = default;
};

std::string to_string(const ExpertTensorId& id);

// Dense index in (layer, expert, kind) row-major order, in [0, 2NL).
uint64_t linear_index(const ExpertTensorId& id, const ModelSpec& spec);
ExpertTensorId id_from_linear(uint64_t index, const ModelSpec& spec);

// Throws Error(OutOfRange) if the id lies outside the model geometry.
void check_bounds(const ExpertTensorId& id, const ModelSpec& spec);

// Byte offset of a tensor inside the container payload.
uint64_t tensor_offset(const ExpertTensorId& id, const ModelSpec& spec);

// Raw bf16 weights of every expert tensor, ordered (layer, expert, kind).
class WeightContainer {
public:
    static constexpr char kMagic[4] = {'X', 'P', 'G', 'W'};
    static constexpr uint32_t kVersion = 1;
    static constexpr size_t kHeaderBytes = 4 + 4 + 4 * 8;

    WeightContainer() = default;
    WeightContainer(ModelSpec spec, std::vector<std::byte> payload);

    const ModelSpec& spec() const { return spec_; }
    std::span<const std::byte> payload() const { return payload_; }
    std::span<const std::byte> tensor(const ExpertTensorId& id) const;

    std::vector<std::byte> serialize() const;
    static WeightContainer deserialize(std::span<const std::byte> bytes);

    void save(const std::filesystem::path& path) const;
    static WeightContainer load(const std::filesystem::path& path);

private:
    ModelSpec spec_;
    std::vector<std::byte> payload_;
};

// Gaussian(0, 0.02) weights rounded to bf16; deterministic in (spec, seed).
WeightContainer generate_synthetic_model(const ModelSpec& spec, uint64_t seed);

// Little-endian helpers shared by the file formats.
void put_u32(std::vector<std::byte>& out, uint32_t value);
void put_u64(std::vector<std::byte>& out, uint64_t value);
uint32_t get_u32(std::span<const std::byte> in, size_t offset);
uint64_t get_u64(std::span<const std::byte> in, size_t offset);

std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace xpg
