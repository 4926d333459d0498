// SPDX-License-Identifier: Apache-2.0

#include "xpg/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>

#include "xpg/bf16.hpp"
#include "xpg/error.hpp"

namespace xpg {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::OutOfRange: return "OutOfRange";
        case ErrorCode::Validation: return "Validation";
        case ErrorCode::Io: return "Io";
        case ErrorCode::CorruptFile: return "CorruptFile";
        case ErrorCode::DoubleMap: return "DoubleMap";
        case ErrorCode::PoolExhausted: return "PoolExhausted";
        case ErrorCode::NotMapped: return "NotMapped";
        case ErrorCode::IllegalTransition: return "IllegalTransition";
        case ErrorCode::PageFault: return "PageFault";
        case ErrorCode::OddLength: return "OddLength";
        case ErrorCode::EmptyHistogram: return "EmptyHistogram";
        case ErrorCode::SymbolNotInTable: return "SymbolNotInTable";
        case ErrorCode::TruncatedStream: return "TruncatedStream";
        case ErrorCode::InvalidCode: return "InvalidCode";
        case ErrorCode::CapacityExceeded: return "CapacityExceeded";
        case ErrorCode::BackendMiss: return "BackendMiss";
        case ErrorCode::InfeasibleConfig: return "InfeasibleConfig";
        case ErrorCode::Aborted: return "Aborted";
    }
    return "Unknown";
}

void ModelSpec::validate() const {
    if (num_layers < 2) throw Error(ErrorCode::Validation, "num_layers must be >= 2");
    if (experts_per_layer < 1) throw Error(ErrorCode::Validation, "experts_per_layer must be >= 1");
    if (hidden_dim < 1) throw Error(ErrorCode::Validation, "hidden_dim must be >= 1");
    if (intermediate_dim < 1) throw Error(ErrorCode::Validation, "intermediate_dim must be >= 1");
}

std::string to_string(const ExpertTensorId& id) {
    return "(layer=" + std::to_string(id.layer) + ", expert=" + std::to_string(id.expert) +
           ", kind=" + std::to_string(static_cast<int>(id.kind)) + ")";
}

void check_bounds(const ExpertTensorId& id, const ModelSpec& spec) {
    if (id.layer < 1 || id.layer > spec.num_layers || id.expert < 1 || id.expert > spec.experts_per_layer ||
        (id.kind != TensorKind::GateUp && id.kind != TensorKind::Down)) {
        throw Error(ErrorCode::OutOfRange, "tensor id " + to_string(id) + " outside model bounds");
    }
}

uint64_t linear_index(const ExpertTensorId& id, const ModelSpec& spec) {
    check_bounds(id, spec);
    return ((id.layer - 1) * spec.experts_per_layer + (id.expert - 1)) * 2 + kind_index(id.kind);
}

ExpertTensorId id_from_linear(uint64_t index, const ModelSpec& spec) {
    if (index >= spec.tensor_count()) throw Error(ErrorCode::OutOfRange, "linear index out of range");
    const uint64_t expert_linear = index / 2;
    return ExpertTensorId{static_cast<uint32_t>(expert_linear / spec.experts_per_layer + 1),
                          static_cast<uint32_t>(expert_linear % spec.experts_per_layer + 1),
                          kind_from_index(static_cast<int>(index % 2))};
}

uint64_t tensor_offset(const ExpertTensorId& id, const ModelSpec& spec) {
    check_bounds(id, spec);
    const uint64_t expert_base = (id.layer - 1) * spec.layer_bytes() + (id.expert - 1) * spec.expert_bytes();
    return id.kind == TensorKind::GateUp ? expert_base : expert_base + spec.gate_up_bytes();
}

WeightContainer::WeightContainer(ModelSpec spec, std::vector<std::byte> payload)
    : spec_(spec), payload_(std::move(payload)) {
    spec_.validate();
    if (payload_.size() != spec_.total_bytes()) {
        throw Error(ErrorCode::Validation, "payload length " + std::to_string(payload_.size()) +
                                               " != P_total " + std::to_string(spec_.total_bytes()));
    }
}

std::span<const std::byte> WeightContainer::tensor(const ExpertTensorId& id) const {
    return std::span<const std::byte>(payload_).subspan(tensor_offset(id, spec_), spec_.tensor_bytes(id.kind));
}

std::vector<std::byte> WeightContainer::serialize() const {
    std::vector<std::byte> out;
    out.reserve(kHeaderBytes + payload_.size());
    for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
    put_u32(out, kVersion);
    put_u64(out, spec_.num_layers);
    put_u64(out, spec_.experts_per_layer);
    put_u64(out, spec_.hidden_dim);
    put_u64(out, spec_.intermediate_dim);
    out.insert(out.end(), payload_.begin(), payload_.end());
    return out;
}

WeightContainer WeightContainer::deserialize(std::span<const std::byte> bytes) {
    if (bytes.size() < kHeaderBytes) {
        throw Error(ErrorCode::CorruptFile, "XPGW header truncated at byte " + std::to_string(bytes.size()));
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error(ErrorCode::CorruptFile, "bad XPGW magic at byte 0");
    if (get_u32(bytes, 4) != kVersion) throw Error(ErrorCode::CorruptFile, "unsupported XPGW version at byte 4");
    ModelSpec spec{get_u64(bytes, 8), get_u64(bytes, 16), get_u64(bytes, 24), get_u64(bytes, 32)};
    spec.validate();
    const uint64_t expected = kHeaderBytes + spec.total_bytes();
    if (bytes.size() != expected) {
        throw Error(ErrorCode::CorruptFile, "XPGW length " + std::to_string(bytes.size()) + " != expected " +
                                                std::to_string(expected));
    }
    return WeightContainer(spec, std::vector<std::byte>(bytes.begin() + kHeaderBytes, bytes.end()));
}

void WeightContainer::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

WeightContainer WeightContainer::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

WeightContainer generate_synthetic_model(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    std::vector<std::byte> payload(spec.total_bytes());
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, 0.02f);
    const size_t values = payload.size() / 2;
    for (size_t i = 0; i < values; ++i) {
        bf16::store(payload, i, bf16::from_float(dist(rng)));
    }
    return WeightContainer(spec, std::move(payload));
}

void put_u32(std::vector<std::byte>& out, uint32_t value) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((value >> (8 * i)) & 0xffu));
}

void put_u64(std::vector<std::byte>& out, uint64_t value) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((value >> (8 * i)) & 0xffu));
}

uint32_t get_u32(std::span<const std::byte> in, size_t offset) {
    uint32_t value = 0;
    for (int i = 0; i < 4; ++i) value |= std::to_integer<uint32_t>(in[offset + i]) << (8 * i);
    return value;
}

uint64_t get_u64(std::span<const std::byte> in, size_t offset) {
    uint64_t value = 0;
    for (int i = 0; i < 8; ++i) value |= std::to_integer<uint64_t>(in[offset + i]) << (8 * i);
    return value;
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::byte> bytes(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
        throw Error(ErrorCode::Io, "short read on " + path.string());
    }
    return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot create " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "write failed on " + path.string());
}

}  // namespace xpg
