// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "xpg/model.hpp"
#include "xpg/storage.hpp"

namespace xpg {

struct TauCompPhase {
    uint64_t start_iteration = 0;
    double tau_comp_theory = 0.0;  // seconds
};

struct SimConfig {
    ModelSpec spec;
    std::vector<Backend> backends = default_backends();
    double tau_comp_theory = 0.0;       // seconds per iteration
    std::vector<TauCompPhase> phases;   // optional; overrides tau_comp_theory from each start
    uint64_t batch_size = 0;
    uint64_t context_start = 0;
    uint64_t max_new_tokens = 0;        // simulated decode iterations
    uint64_t kv_bytes_per_token = 0;    // per (token, sequence), all layers
    double c_gpu = 0.0;                 // device bytes
    double non_expert_bytes = 0.0;
    double swap_bandwidth = 0.0;        // bytes/s
    double compression_ratio = 0.8;     // compressed / raw expert bytes
    // Relative amplitude of iid uniform noise on the realized tau_load.
    double load_noise = 0.0;
    uint64_t noise_seed = 1;
    // Replaces the placement-derived tau_load(alpha) when set.
    std::function<double(double alpha)> tau_load_override;

    // Throws Error(Validation).
    void validate() const;
    double tau_comp_at(uint64_t iteration) const;
    double compressed_expert_bytes() const;
    double window_bytes() const { return static_cast<double>(spec.window_bytes()); }
    double kv_bytes(uint64_t iteration) const;
};

struct IterationSample {
    uint64_t iter = 0;
    double alpha = 0.0;
    double kv_bytes = 0.0;
    double kv_overflow = 0.0;
    double c_exp = 0.0;
    double tau_load = 0.0;           // realized, including migration traffic and noise
    double tau_load_estimate = 0.0;  // placement estimate, no migration, no noise
    // Residency-based estimate under this iteration's load noise; excludes
    // migration traffic. This is what the planner averages into rho.
    double tau_load_observed = 0.0;
    double tau_swap = 0.0;
    double tau_comp_theory = 0.0;
    double tau_comp_actual = 0.0;
    double iteration_time = 0.0;
    double throughput = 0.0;  // tokens/s = batch / iteration_time
    double rho = 0.0;         // tau_comp_theory / tau_load
    double migration_bytes = 0.0;
};

struct MemoryBreakdown {
    double expert_weights = 0.0;  // window + C_exp(alpha)
    double kv_cache = 0.0;        // full demand, including swapped bytes
    double kv_swapped = 0.0;
    double non_expert = 0.0;

    double total() const { return expert_weights + kv_cache + non_expert; }
};

MemoryBreakdown memory_breakdown(const SimConfig& config, double alpha, uint64_t iteration);

// Decode-only model: one call to step() per generated token.
class DecodeSimulator {
public:
    // Throws Error(Validation) or Error(InfeasibleConfig) when the window plus
    // the smallest alpha quantum cannot fit next to the non-expert bytes.
    explicit DecodeSimulator(SimConfig config);

    const SimConfig& config() const { return config_; }
    uint64_t iteration() const { return iter_; }

    double c_exp(double alpha) const { return alpha * config_.compressed_expert_bytes(); }
    // Bytes left for C_exp once non-expert bytes, the window and the KV cache
    // of `iteration` are placed.
    double expert_room(uint64_t iteration) const;
    double tau_load_estimate(double alpha) const;

    // `migration_host_bytes`, when given, holds extra host-link bytes per
    // layer window for this iteration.
    IterationSample step(double alpha, const std::vector<double>* migration_host_bytes = nullptr);

private:
    double realized_tau_load(double alpha, const std::vector<double>* migration_host_bytes) const;

    SimConfig config_;
    uint64_t iter_ = 0;
    double previous_overflow_ = 0.0;
    std::mt19937_64 rng_;
    mutable std::map<double, std::pair<PlacementPlan, double>> cache_;
};

std::vector<IterationSample> simulate_decode(const SimConfig& config, double alpha);

struct SweepRow {
    double alpha = 0.0;
    double tau_load = 0.0;
    double tau_comp = 0.0;
};

// Steady state per alpha: tau_comp = max(tau_comp_theory, tau_load), no swap.
std::vector<SweepRow> sweep_alpha(const SimConfig& config, const std::vector<double>& grid);

// Smallest alpha with tau_load(alpha) <= tau_comp_theory on the host-bound
// branch, for two backends: 1 - T * B_host / P_total, floored at 0. Empty when
// even the balanced split exceeds T or fully device-resident loading does.
std::optional<double> closed_form_knee(const SimConfig& config);

// Smallest grid alpha from which tau_comp stays flat at tau_comp_theory.
std::optional<double> empirical_knee(const std::vector<SweepRow>& rows, double tau_comp_theory);

std::vector<double> alpha_grid(uint64_t experts_per_layer);

}  // namespace xpg
