// SPDX-License-Identifier: Apache-2.0

#include "xpg/storage.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "xpg/error.hpp"

namespace xpg {

std::string_view to_string(BackendKind kind) {
    return kind == BackendKind::CompressedDevice ? "compressed_device" : "host_offload";
}

BackendKind backend_kind_from_string(std::string_view text) {
    if (text == "compressed_device") return BackendKind::CompressedDevice;
    if (text == "host_offload") return BackendKind::HostOffload;
    throw Error(ErrorCode::Validation, "unknown backend kind '" + std::string(text) + "'");
}

void Backend::validate() const {
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
        throw Error(ErrorCode::Validation, "backend bandwidth must be positive");
    }
}

std::vector<Backend> default_backends() {
    return {Backend{BackendKind::CompressedDevice, kDefaultDeviceBandwidth},
            Backend{BackendKind::HostOffload, kDefaultHostBandwidth}};
}

std::vector<double> bandwidth_fractions(const std::vector<Backend>& backends) {
    double total = 0.0;
    for (const auto& b : backends) total += b.bandwidth;
    std::vector<double> x;
    x.reserve(backends.size());
    for (const auto& b : backends) x.push_back(b.bandwidth / total);
    return x;
}

uint32_t PlacementPlan::backend_of(const ExpertTensorId& id, const ModelSpec& spec) const {
    const uint64_t index = linear_index(id, spec);
    if (index >= assignment.size() || assignment[index] == kUnassigned) {
        throw Error(ErrorCode::BackendMiss, "tensor " + to_string(id) + " has no backend");
    }
    return static_cast<uint32_t>(assignment[index]);
}

uint64_t PlacementPlan::bytes_on(size_t backend) const {
    uint64_t sum = 0;
    for (const auto& layer : per_layer_bytes) sum += layer[backend];
    return sum;
}

std::vector<double> PlacementPlan::realized_fractions() const {
    std::vector<double> x(fractions.size(), 0.0);
    uint64_t total = 0;
    for (size_t k = 0; k < x.size(); ++k) total += bytes_on(k);
    for (size_t k = 0; k < x.size(); ++k) x[k] = static_cast<double>(bytes_on(k)) / static_cast<double>(total);
    return x;
}

namespace {

void check_backends(const std::vector<Backend>& backends) {
    if (backends.empty()) throw Error(ErrorCode::Validation, "at least one backend is required");
    for (const auto& b : backends) b.validate();
}

void check_capacity(const PlacementPlan& plan, const std::vector<Backend>& backends) {
    for (size_t k = 0; k < backends.size(); ++k) {
        const uint64_t used = plan.bytes_on(k);
        if (used > backends[k].capacity) {
            throw Error(ErrorCode::CapacityExceeded, "backend " + std::to_string(k) + " needs " +
                                                         std::to_string(used) + " bytes, capacity " +
                                                         std::to_string(backends[k].capacity));
        }
    }
}

void assign(PlacementPlan& plan, const ModelSpec& spec, const ExpertTensorId& id, size_t k) {
    plan.assignment[linear_index(id, spec)] = static_cast<int32_t>(k);
    plan.per_layer_bytes[id.layer - 1][k] += spec.tensor_bytes(id.kind);
}

PlacementPlan balanced_plan(const ModelSpec& spec, const std::vector<Backend>& backends) {
    PlacementPlan plan;
    plan.fractions = bandwidth_fractions(backends);
    plan.assignment.assign(spec.tensor_count(), PlacementPlan::kUnassigned);
    plan.per_layer_bytes.assign(spec.num_layers, std::vector<uint64_t>(backends.size(), 0));
    std::vector<uint64_t> remaining;
    for (const auto& b : backends) remaining.push_back(b.capacity);

    std::vector<ExpertTensorId> order;
    for (uint32_t layer = 1; layer <= spec.num_layers; ++layer) {
        order.clear();
        for (uint32_t expert = 1; expert <= spec.experts_per_layer; ++expert) {
            for (TensorKind kind : kAllKinds) order.push_back({layer, expert, kind});
        }
        std::stable_sort(order.begin(), order.end(), [&](const ExpertTensorId& a, const ExpertTensorId& b) {
            return spec.tensor_bytes(a.kind) > spec.tensor_bytes(b.kind);
        });
        auto& bytes = plan.per_layer_bytes[layer - 1];
        for (const auto& id : order) {
            const uint64_t size = spec.tensor_bytes(id.kind);
            int best = -1;
            double best_finish = 0.0;
            for (size_t k = 0; k < backends.size(); ++k) {
                if (remaining[k] < size) continue;
                const double finish = static_cast<double>(bytes[k] + size) / backends[k].bandwidth;
                if (best < 0 || finish < best_finish) {
                    best = static_cast<int>(k);
                    best_finish = finish;
                }
            }
            if (best < 0) throw Error(ErrorCode::CapacityExceeded, "no backend can hold " + to_string(id));
            remaining[best] -= size;
            assign(plan, spec, id, static_cast<size_t>(best));
        }
    }
    return plan;
}

PlacementPlan alpha_plan(const ModelSpec& spec, const std::vector<Backend>& backends, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorCode::Validation, "alpha must lie in (0, 1]");
    if (backends.size() != 2 || backends[0].kind == backends[1].kind) {
        throw Error(ErrorCode::Validation, "an alpha split needs one compressed_device and one host_offload backend");
    }
    const size_t dev = backends[0].kind == BackendKind::CompressedDevice ? 0 : 1;
    const size_t host = 1 - dev;

    PlacementPlan plan;
    plan.alpha = alpha;
    plan.fractions.assign(2, 0.0);
    plan.fractions[dev] = alpha;
    plan.fractions[host] = 1.0 - alpha;
    plan.assignment.assign(spec.tensor_count(), PlacementPlan::kUnassigned);
    plan.per_layer_bytes.assign(spec.num_layers, std::vector<uint64_t>(2, 0));

    const uint64_t experts = spec.num_layers * spec.experts_per_layer;
    const auto on_device = static_cast<uint64_t>(std::llround(alpha * static_cast<double>(experts)));
    const uint64_t base = on_device / spec.num_layers;
    const uint64_t extra = on_device % spec.num_layers;
    for (uint32_t layer = 1; layer <= spec.num_layers; ++layer) {
        const uint64_t count = base + (layer <= extra ? 1 : 0);
        for (uint32_t expert = 1; expert <= spec.experts_per_layer; ++expert) {
            const size_t k = expert <= count ? dev : host;
            for (TensorKind kind : kAllKinds) assign(plan, spec, {layer, expert, kind}, k);
        }
    }
    return plan;
}

}  // namespace

PlacementPlan plan_placement(const ModelSpec& spec, const std::vector<Backend>& backends, std::optional<double> alpha) {
    spec.validate();
    check_backends(backends);
    PlacementPlan plan = alpha ? alpha_plan(spec, backends, *alpha) : balanced_plan(spec, backends);
    check_capacity(plan, backends);
    return plan;
}

LoadEstimate estimate_load(const PlacementPlan& plan, const std::vector<Backend>& backends,
                           const std::vector<std::vector<uint64_t>>* extra_bytes) {
    LoadEstimate est;
    est.tau_k.resize(plan.per_layer_bytes.size());
    est.tau_layer.resize(plan.per_layer_bytes.size());
    for (size_t layer = 0; layer < plan.per_layer_bytes.size(); ++layer) {
        double slowest = 0.0;
        for (size_t k = 0; k < backends.size(); ++k) {
            uint64_t bytes = plan.per_layer_bytes[layer][k];
            if (extra_bytes) bytes += (*extra_bytes)[layer][k];
            const double tau = static_cast<double>(bytes) / backends[k].bandwidth;
            est.tau_k[layer].push_back(tau);
            slowest = std::max(slowest, tau);
        }
        est.tau_layer[layer] = slowest;
        est.tau_load += slowest;
    }
    return est;
}

TensorStorage::TensorStorage(const WeightContainer& weights, PlacementPlan plan, std::vector<Backend> backends)
    : spec_(weights.spec()), plan_(std::move(plan)), backends_(std::move(backends)) {
    if (plan_.assignment.size() != spec_.tensor_count()) throw Error(ErrorCode::Validation, "plan/spec mismatch");
    table_ = build_table(build_histogram(weights.payload()));
    assign_slots();
    for (uint64_t index = 0; index < spec_.tensor_count(); ++index) {
        const int32_t k = plan_.assignment[index];
        if (k == PlacementPlan::kUnassigned) continue;
        const ExpertTensorId id = id_from_linear(index, spec_);
        const auto bytes = weights.tensor(id);
        if (backends_[static_cast<size_t>(k)].kind == BackendKind::CompressedDevice) {
            compressed_[index] = compress(bytes, table_, id);
        } else {
            raw_[index].assign(bytes.begin(), bytes.end());
        }
    }
}

TensorStorage::TensorStorage(const CompressedModel& compressed, PlacementPlan plan, std::vector<Backend> backends)
    : spec_(compressed.spec()), plan_(std::move(plan)), backends_(std::move(backends)), table_(compressed.table()) {
    if (plan_.assignment.size() != spec_.tensor_count()) throw Error(ErrorCode::Validation, "plan/spec mismatch");
    assign_slots();
    for (uint64_t index = 0; index < spec_.tensor_count(); ++index) {
        const int32_t k = plan_.assignment[index];
        if (k == PlacementPlan::kUnassigned) continue;
        const CompressedTensor& ct = compressed.tensors()[index];
        if (backends_[static_cast<size_t>(k)].kind == BackendKind::CompressedDevice) {
            compressed_[index] = ct;
        } else {
            raw_[index] = decompress(ct, table_);
        }
    }
}

void TensorStorage::assign_slots() {
    for (int32_t k : plan_.assignment) {
        if (k != PlacementPlan::kUnassigned && static_cast<size_t>(k) >= backends_.size()) {
            throw Error(ErrorCode::Validation, "plan references an unknown backend");
        }
    }
    raw_.resize(spec_.tensor_count());
    compressed_.resize(spec_.tensor_count());
}

BackendKind TensorStorage::backend_kind(const ExpertTensorId& id) const {
    return backends_[plan_.backend_of(id, spec_)].kind;
}

void TensorStorage::fetch(const ExpertTensorId& id, std::span<std::byte> dest) const {
    const uint32_t k = plan_.backend_of(id, spec_);
    if (dest.size() != spec_.tensor_bytes(id.kind)) throw Error(ErrorCode::Validation, "fetch destination size");
    if (delay_) delay_(id);
    const uint64_t index = linear_index(id, spec_);
    if (backends_[k].kind == BackendKind::CompressedDevice) {
        decompress_into(compressed_[index], table_, dest);
    } else {
        std::memcpy(dest.data(), raw_[index].data(), dest.size());
    }
}

uint64_t TensorStorage::device_stored_bytes() const {
    uint64_t sum = 0;
    for (const auto& ct : compressed_) {
        if (ct.value_count > 0) sum += ct.byte_size();
    }
    return sum;
}

uint64_t TensorStorage::host_stored_bytes() const {
    uint64_t sum = 0;
    for (const auto& raw : raw_) sum += raw.size();
    return sum;
}

}  // namespace xpg
