// SPDX-License-Identifier: Apache-2.0

#include "xpg/timing_sim.hpp"

#include <algorithm>
#include <cmath>

#include "xpg/error.hpp"

namespace xpg {

void SimConfig::validate() const {
    spec.validate();
    if (!tau_load_override) {
        if (backends.size() != 2 || backends[0].kind == backends[1].kind) {
            throw Error(ErrorCode::Validation, "simulation needs one compressed_device and one host_offload backend");
        }
        for (const auto& b : backends) b.validate();
    }
    if (!(tau_comp_theory > 0.0) && phases.empty()) {
        throw Error(ErrorCode::Validation, "tau_comp_theory must be positive");
    }
    for (const auto& p : phases) {
        if (!(p.tau_comp_theory > 0.0)) throw Error(ErrorCode::Validation, "phase tau_comp_theory must be positive");
    }
    if (batch_size < 1) throw Error(ErrorCode::Validation, "batch_size must be >= 1");
    if (max_new_tokens < 1) throw Error(ErrorCode::Validation, "max_new_tokens must be >= 1");
    if (!(c_gpu > 0.0)) throw Error(ErrorCode::Validation, "c_gpu must be positive");
    if (non_expert_bytes < 0.0) throw Error(ErrorCode::Validation, "non_expert_bytes must be >= 0");
    if (!(swap_bandwidth > 0.0)) throw Error(ErrorCode::Validation, "swap_bandwidth must be positive");
    if (!(compression_ratio > 0.0 && compression_ratio <= 2.0)) {
        throw Error(ErrorCode::Validation, "compression_ratio must lie in (0, 2]");
    }
    if (!(load_noise >= 0.0 && load_noise < 1.0)) throw Error(ErrorCode::Validation, "load_noise must lie in [0, 1)");
}

double SimConfig::tau_comp_at(uint64_t iteration) const {
    double tau = tau_comp_theory;
    uint64_t best = 0;
    bool found = false;
    for (const auto& p : phases) {
        if (p.start_iteration <= iteration && (!found || p.start_iteration >= best)) {
            tau = p.tau_comp_theory;
            best = p.start_iteration;
            found = true;
        }
    }
    return tau;
}

double SimConfig::compressed_expert_bytes() const {
    return compression_ratio * static_cast<double>(spec.total_bytes());
}

double SimConfig::kv_bytes(uint64_t iteration) const {
    return static_cast<double>(batch_size) * static_cast<double>(context_start + iteration) *
           static_cast<double>(kv_bytes_per_token);
}

MemoryBreakdown memory_breakdown(const SimConfig& config, double alpha, uint64_t iteration) {
    MemoryBreakdown m;
    m.expert_weights = config.window_bytes() + alpha * config.compressed_expert_bytes();
    m.kv_cache = config.kv_bytes(iteration);
    m.non_expert = config.non_expert_bytes;
    const double free = config.c_gpu - m.non_expert - m.expert_weights;
    m.kv_swapped = std::max(0.0, m.kv_cache - free);
    return m;
}

namespace {

size_t host_index(const std::vector<Backend>& backends) {
    return backends[0].kind == BackendKind::HostOffload ? 0 : 1;
}

}  // namespace

DecodeSimulator::DecodeSimulator(SimConfig config) : config_(std::move(config)), rng_(config_.noise_seed) {
    config_.validate();
    const double min_alpha = 1.0 / static_cast<double>(config_.spec.experts_per_layer);
    const double fixed = config_.non_expert_bytes + config_.window_bytes() + c_exp(min_alpha);
    if (fixed > config_.c_gpu) {
        throw Error(ErrorCode::InfeasibleConfig, "non-expert bytes + window + C_exp(1/L) = " + std::to_string(fixed) +
                                                     " exceeds C_gpu = " + std::to_string(config_.c_gpu));
    }
}

double DecodeSimulator::expert_room(uint64_t iteration) const {
    return config_.c_gpu - config_.non_expert_bytes - config_.window_bytes() - config_.kv_bytes(iteration);
}

double DecodeSimulator::tau_load_estimate(double alpha) const {
    if (config_.tau_load_override) return config_.tau_load_override(alpha);
    auto it = cache_.find(alpha);
    if (it == cache_.end()) {
        PlacementPlan plan = plan_placement(config_.spec, config_.backends, alpha);
        const double tau = estimate_load(plan, config_.backends).tau_load;
        it = cache_.emplace(alpha, std::make_pair(std::move(plan), tau)).first;
    }
    return it->second.second;
}

double DecodeSimulator::realized_tau_load(double alpha, const std::vector<double>* migration_host_bytes) const {
    const double base = tau_load_estimate(alpha);
    if (!migration_host_bytes || config_.tau_load_override) return base;
    const PlacementPlan& plan = cache_.at(alpha).first;
    const size_t host = host_index(config_.backends);
    std::vector<std::vector<uint64_t>> extra(plan.per_layer_bytes.size(), std::vector<uint64_t>(2, 0));
    for (size_t layer = 0; layer < extra.size(); ++layer) {
        extra[layer][host] = static_cast<uint64_t>((*migration_host_bytes)[layer]);
    }
    return estimate_load(plan, config_.backends, &extra).tau_load;
}

IterationSample DecodeSimulator::step(double alpha, const std::vector<double>* migration_host_bytes) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorCode::Validation, "alpha must lie in (0, 1]");
    IterationSample s;
    s.iter = iter_;
    s.alpha = alpha;
    s.kv_bytes = config_.kv_bytes(iter_);
    s.c_exp = c_exp(alpha);
    const double free = config_.c_gpu - config_.non_expert_bytes - config_.window_bytes() - s.c_exp;
    s.kv_overflow = std::max(0.0, s.kv_bytes - free);
    s.tau_swap = 2.0 * std::max(0.0, s.kv_overflow - previous_overflow_) / config_.swap_bandwidth;
    previous_overflow_ = s.kv_overflow;

    s.tau_load_estimate = tau_load_estimate(alpha);
    double factor = 1.0;
    if (config_.load_noise > 0.0) {
        std::uniform_real_distribution<double> noise(-config_.load_noise, config_.load_noise);
        factor += noise(rng_);
    }
    s.tau_load = realized_tau_load(alpha, migration_host_bytes) * factor;
    s.tau_load_observed = s.tau_load_estimate * factor;
    if (migration_host_bytes) {
        for (double b : *migration_host_bytes) s.migration_bytes += b;
    }
    s.tau_comp_theory = config_.tau_comp_at(iter_);
    s.tau_comp_actual = s.tau_comp_theory + s.tau_swap;
    s.iteration_time = std::max(s.tau_comp_actual, s.tau_load);
    s.throughput = static_cast<double>(config_.batch_size) / s.iteration_time;
    s.rho = s.tau_load > 0.0 ? s.tau_comp_theory / s.tau_load : INFINITY;
    ++iter_;
    return s;
}

std::vector<IterationSample> simulate_decode(const SimConfig& config, double alpha) {
    DecodeSimulator sim(config);
    std::vector<IterationSample> samples;
    samples.reserve(config.max_new_tokens);
    for (uint64_t i = 0; i < config.max_new_tokens; ++i) samples.push_back(sim.step(alpha));
    return samples;
}

std::vector<SweepRow> sweep_alpha(const SimConfig& config, const std::vector<double>& grid) {
    config.validate();
    std::vector<SweepRow> rows;
    for (double alpha : grid) {
        if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorCode::Validation, "sweep grid must lie in (0, 1]");
        double tau;
        if (config.tau_load_override) {
            tau = config.tau_load_override(alpha);
        } else {
            tau = estimate_load(plan_placement(config.spec, config.backends, alpha), config.backends).tau_load;
        }
        rows.push_back({alpha, tau, std::max(config.tau_comp_at(0), tau)});
    }
    return rows;
}

std::optional<double> closed_form_knee(const SimConfig& config) {
    const size_t host = host_index(config.backends);
    const double b_host = config.backends[host].bandwidth;
    const double b_dev = config.backends[1 - host].bandwidth;
    const double total = static_cast<double>(config.spec.total_bytes());
    const double tau = config.tau_comp_at(0);
    if (total / b_dev > tau) return std::nullopt;
    return std::max(0.0, 1.0 - tau * b_host / total);
}

std::optional<double> empirical_knee(const std::vector<SweepRow>& rows, double tau_comp_theory) {
    std::vector<SweepRow> sorted = rows;
    std::sort(sorted.begin(), sorted.end(), [](const SweepRow& a, const SweepRow& b) { return a.alpha < b.alpha; });
    std::optional<double> knee;
    for (size_t i = sorted.size(); i-- > 0;) {
        if (sorted[i].tau_comp != tau_comp_theory) break;
        knee = sorted[i].alpha;
    }
    return knee;
}

std::vector<double> alpha_grid(uint64_t experts_per_layer) {
    std::vector<double> grid;
    for (uint64_t k = 1; k <= experts_per_layer; ++k) {
        grid.push_back(static_cast<double>(k) / static_cast<double>(experts_per_layer));
    }
    return grid;
}

}  // namespace xpg
