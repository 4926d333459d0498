// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "xpg/model.hpp"

namespace xpg {

struct ToyForwardSpec {
    uint32_t tokens = 4;
    uint32_t top_k = 2;
    uint64_t router_seed = 0x5eed;
};

uint64_t splitmix64(uint64_t x);

// Routed experts (1-based, ascending) for one token at one layer. Depends only
// on (seed, token, layer, L); never on residency.
std::vector<uint32_t> route(const ToyForwardSpec& toy, uint32_t token, uint32_t layer, uint32_t num_experts);

// T x H activations, uniform in [-1, 1), deterministic in seed.
std::vector<float> initial_activations(const ModelSpec& spec, const ToyForwardSpec& toy, uint64_t seed);

using WeightView = std::function<std::span<const std::byte>(const ExpertTensorId&)>;

// One MoE layer, in place. For each token:
//   x <- x + (sum over routed j of Down_j (SiLU(Gate_j x) * Up_j x)) / top_k
// fp32 accumulation, experts in ascending order, features in index order.
void layer_forward(const ModelSpec& spec, const ToyForwardSpec& toy, uint32_t layer, const WeightView& weights,
                   std::vector<float>& activations);

// n full iterations with weights read straight from the container.
std::vector<float> resident_baseline(uint32_t iterations, const WeightContainer& weights, const ToyForwardSpec& toy,
                                     std::vector<float> activations);

// FNV-1a over the raw float bytes.
uint64_t activation_checksum(std::span<const float> activations);

}  // namespace xpg
