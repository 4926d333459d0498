// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "xpg/timing_sim.hpp"

namespace xpg {

struct PlannerConfig {
    double theta = 0.9;
    uint32_t step = 1;        // experts per layer per adjustment
    uint32_t cooldown = 300;  // iterations between decisions
    bool io_balance = true;
    // Use the measured tau_comp (theory + swap) as the rho numerator.
    bool measured_compute_numerator = false;

    void validate() const;
};

// alpha is held as a whole number of device-resident experts per layer.
struct PlannerState {
    uint32_t experts_per_layer = 1;
    uint32_t resident_experts = 1;

    double alpha() const { return static_cast<double>(resident_experts) / static_cast<double>(experts_per_layer); }
};

struct MemoryBudget {
    double c_kv = 0.0;
    // Bytes available to C_exp: whatever remains after the non-expert bytes,
    // the mandatory window and the KV cache.
    double c_res = 0.0;
    double compressed_expert_bytes = 0.0;

    double c_exp(double alpha) const { return alpha * compressed_expert_bytes; }
};

// tau_comp / tau_load; +inf when tau_load is zero.
double compute_rho(double tau_comp_theory, double tau_load);

// The rho-driven move: down one step above 1, up one step below theta,
// otherwise unchanged; kept within [1, L].
PlannerState adjust(const PlannerState& state, double rho, const PlannerConfig& config);
// Largest resident count not above the current one with C_exp <= C_res,
// never below one expert per layer.
PlannerState clamp_to_budget(const PlannerState& state, const MemoryBudget& budget);
// adjust followed by clamp_to_budget.
PlannerState plan_step(const PlannerState& state, double rho, const MemoryBudget& budget,
                       const PlannerConfig& config);

struct TraceRow {
    uint64_t iter = 0;
    double rho = 0.0;  // value used at the latest decision
    double alpha = 0.0;
    uint32_t resident_experts = 0;
    double c_kv = 0.0;
    double c_exp = 0.0;
    double c_res = 0.0;
    double c_gpu = 0.0;
    double tau_load = 0.0;
    double iteration_time = 0.0;
    double throughput = 0.0;
    int delta = 0;  // change in resident experts per layer this iteration
    bool decision = false;
};

// Decisions happen at iterations that are positive multiples of the cooldown
// and use the mean residency-based tau_load (noise included, migration
// traffic excluded) since the previous decision. The budget
// clamp runs before every iteration.
std::vector<TraceRow> run_control_loop(DecodeSimulator& sim, const PlannerConfig& config, PlannerState state,
                                       uint64_t iterations);

// Host-link bytes per layer window caused by changing the resident count by
// `delta` experts per layer. Balanced: window i carries layer i's experts.
// Unbalanced: the first window carries everything.
std::vector<double> migration_schedule(const ModelSpec& spec, int delta, bool io_balance);

// Direction reversals between successive nonzero alpha changes.
uint64_t count_oscillations(const std::vector<TraceRow>& trace);

}  // namespace xpg
