// SPDX-License-Identifier: Apache-2.0

#include "xpg/planner.hpp"

#include <cmath>
#include <cstdlib>

#include "xpg/error.hpp"

namespace xpg {

void PlannerConfig::validate() const {
    if (!(theta > 0.0 && theta <= 1.0)) throw Error(ErrorCode::Validation, "theta must lie in (0, 1]");
    if (step < 1) throw Error(ErrorCode::Validation, "step must be >= 1");
    if (cooldown < 1) throw Error(ErrorCode::Validation, "cooldown must be >= 1");
}

double compute_rho(double tau_comp_theory, double tau_load) {
    if (tau_load <= 0.0) return INFINITY;
    return tau_comp_theory / tau_load;
}

PlannerState adjust(const PlannerState& state, double rho, const PlannerConfig& config) {
    PlannerState next = state;
    if (rho > 1.0) {
        next.resident_experts = state.resident_experts > config.step ? state.resident_experts - config.step : 1;
    } else if (rho < config.theta) {
        next.resident_experts = std::min(state.resident_experts + config.step, state.experts_per_layer);
    }
    return next;
}

PlannerState clamp_to_budget(const PlannerState& state, const MemoryBudget& budget) {
    PlannerState next = state;
    while (next.resident_experts > 1 && budget.c_exp(next.alpha()) > budget.c_res) --next.resident_experts;
    return next;
}

PlannerState plan_step(const PlannerState& state, double rho, const MemoryBudget& budget,
                       const PlannerConfig& config) {
    return clamp_to_budget(adjust(state, rho, config), budget);
}

std::vector<double> migration_schedule(const ModelSpec& spec, int delta, bool io_balance) {
    std::vector<double> bytes(spec.num_layers, 0.0);
    const double per_layer = static_cast<double>(std::abs(delta)) * static_cast<double>(spec.expert_bytes());
    if (io_balance) {
        for (auto& b : bytes) b = per_layer;
    } else {
        bytes[0] = per_layer * static_cast<double>(spec.num_layers);
    }
    return bytes;
}

std::vector<TraceRow> run_control_loop(DecodeSimulator& sim, const PlannerConfig& config, PlannerState state,
                                       uint64_t iterations) {
    config.validate();
    const SimConfig& sc = sim.config();
    if (state.experts_per_layer != sc.spec.experts_per_layer || state.resident_experts < 1 ||
        state.resident_experts > state.experts_per_layer) {
        throw Error(ErrorCode::Validation, "planner state does not match the model");
    }
    std::vector<TraceRow> trace;
    trace.reserve(iterations);
    double window_load = 0.0;
    double window_comp = 0.0;
    uint64_t window_count = 0;
    double last_rho = NAN;
    for (uint64_t n = 0; n < iterations; ++n) {
        const uint64_t iter = sim.iteration();
        MemoryBudget budget{sc.kv_bytes(iter), sim.expert_room(iter), sc.compressed_expert_bytes()};
        const uint32_t before = state.resident_experts;
        const bool decision = iter > 0 && iter % config.cooldown == 0 && window_count > 0;
        if (decision) {
            const double load = window_load / static_cast<double>(window_count);
            const double numerator = config.measured_compute_numerator ? window_comp / static_cast<double>(window_count)
                                                                       : sc.tau_comp_at(iter);
            last_rho = compute_rho(numerator, load);
            state = adjust(state, last_rho, config);
            window_load = window_comp = 0.0;
            window_count = 0;
        }
        state = clamp_to_budget(state, budget);
        const int delta = static_cast<int>(state.resident_experts) - static_cast<int>(before);

        IterationSample s;
        if (delta != 0) {
            const auto migration = migration_schedule(sc.spec, delta, config.io_balance);
            s = sim.step(state.alpha(), &migration);
        } else {
            s = sim.step(state.alpha());
        }
        window_load += s.tau_load_observed;
        window_comp += s.tau_comp_actual;
        ++window_count;

        TraceRow row;
        row.iter = iter;
        row.rho = last_rho;
        row.alpha = state.alpha();
        row.resident_experts = state.resident_experts;
        row.c_kv = budget.c_kv;
        row.c_exp = budget.c_exp(state.alpha());
        row.c_res = budget.c_res;
        row.c_gpu = sc.c_gpu;
        row.tau_load = s.tau_load;
        row.iteration_time = s.iteration_time;
        row.throughput = s.throughput;
        row.delta = delta;
        row.decision = decision;
        trace.push_back(row);
    }
    return trace;
}

uint64_t count_oscillations(const std::vector<TraceRow>& trace) {
    uint64_t reversals = 0;
    int previous = 0;
    for (const auto& row : trace) {
        if (row.delta == 0) continue;
        const int direction = row.delta > 0 ? 1 : -1;
        if (previous != 0 && direction != previous) ++reversals;
        previous = direction;
    }
    return reversals;
}

}  // namespace xpg
