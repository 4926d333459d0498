// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xpg/model.hpp"
#include "xpg/planner.hpp"
#include "xpg/storage.hpp"
#include "xpg/timing_sim.hpp"
#include "xpg/toy_moe.hpp"

namespace xpg {

struct ModelBlock {
    ModelSpec spec{8, 16, 128, 256};
    uint64_t seed = 1;
};

struct PipelineBlock {
    uint32_t tokens = 4;
    uint32_t top_k = 2;
    uint32_t iterations = 3;
    // Device fraction used to place tensors for `run`; empty means the
    // bandwidth-proportional split.
    std::optional<double> alpha = 0.5;
    bool sequential = false;
    double fetch_delay_ms_min = 0.0;
    double fetch_delay_ms_max = 0.0;
    double compute_delay_ms_min = 0.0;
    double compute_delay_ms_max = 0.0;
};

struct SimBlock {
    double tau_comp_theory = 200e-6;
    std::vector<TauCompPhase> phases;
    uint64_t batch_size = 64;
    uint64_t context_start = 512;
    uint64_t max_new_tokens = 2000;
    uint64_t kv_bytes_per_token = 64;
    double c_gpu = 36.6e6;
    double non_expert_bytes = 4e6;
    double swap_bandwidth = 1e8;
    double compression_ratio = 0.8;
    double load_noise = 0.0;
    double alpha = 1.0;  // fixed alpha for `simulate`
};

struct PlannerBlock {
    PlannerConfig planner;
    double alpha0 = 1.0;
};

struct RunConfig {
    ModelBlock model;
    std::vector<Backend> backends = default_backends();
    PipelineBlock pipeline;
    SimBlock sim;
    PlannerBlock planner;

    // Throws Error(Validation) naming the offending key.
    void validate() const;
    SimConfig sim_config() const;
    ToyForwardSpec toy() const;
    uint64_t derived_seed(uint64_t stream) const;
};

// Blocks: model, backends, pipeline, sim, planner. Unknown keys and type
// mismatches throw Error(Validation).
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string default_config_yaml();

}  // namespace xpg
