// SPDX-License-Identifier: Apache-2.0

#include "xpg/toy_moe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "xpg/bf16.hpp"
#include "xpg/error.hpp"

namespace xpg {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::vector<uint32_t> route(const ToyForwardSpec& toy, uint32_t token, uint32_t layer, uint32_t num_experts) {
    const uint32_t k = std::min(toy.top_k, num_experts);
    std::vector<std::pair<uint64_t, uint32_t>> scored;
    scored.reserve(num_experts);
    for (uint32_t j = 1; j <= num_experts; ++j) {
        uint64_t h = splitmix64(toy.router_seed);
        h = splitmix64(h ^ token);
        h = splitmix64(h ^ layer);
        h = splitmix64(h ^ j);
        scored.emplace_back(h, j);
    }
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<uint32_t> experts;
    for (uint32_t r = 0; r < k; ++r) experts.push_back(scored[r].second);
    std::sort(experts.begin(), experts.end());
    return experts;
}

std::vector<float> initial_activations(const ModelSpec& spec, const ToyForwardSpec& toy, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> x(toy.tokens * spec.hidden_dim);
    for (auto& v : x) v = dist(rng);
    return x;
}

namespace {

float silu(float z) { return z / (1.0f + std::exp(-z)); }

}  // namespace

void layer_forward(const ModelSpec& spec, const ToyForwardSpec& toy, uint32_t layer, const WeightView& weights,
                   std::vector<float>& activations) {
    const size_t H = spec.hidden_dim;
    const size_t F = spec.intermediate_dim;
    if (activations.size() != toy.tokens * H) throw Error(ErrorCode::Validation, "activation shape mismatch");
    const float scale = 1.0f / static_cast<float>(std::min<uint64_t>(toy.top_k, spec.experts_per_layer));
    std::vector<float> acc(H);
    std::vector<float> hidden(F);
    for (uint32_t t = 0; t < toy.tokens; ++t) {
        float* x = activations.data() + t * H;
        std::fill(acc.begin(), acc.end(), 0.0f);
        for (uint32_t j : route(toy, t, layer, static_cast<uint32_t>(spec.experts_per_layer))) {
            const auto gate_up = weights({layer, j, TensorKind::GateUp});
            for (size_t f = 0; f < F; ++f) {
                float g = 0.0f;
                float u = 0.0f;
                for (size_t h = 0; h < H; ++h) {
                    g += bf16::to_float(bf16::load(gate_up, f * H + h)) * x[h];
                    u += bf16::to_float(bf16::load(gate_up, (F + f) * H + h)) * x[h];
                }
                hidden[f] = silu(g) * u;
            }
            const auto down = weights({layer, j, TensorKind::Down});
            for (size_t h = 0; h < H; ++h) {
                float y = 0.0f;
                for (size_t f = 0; f < F; ++f) y += bf16::to_float(bf16::load(down, h * F + f)) * hidden[f];
                acc[h] += y;
            }
        }
        for (size_t h = 0; h < H; ++h) x[h] += acc[h] * scale;
    }
}

std::vector<float> resident_baseline(uint32_t iterations, const WeightContainer& weights, const ToyForwardSpec& toy,
                                     std::vector<float> activations) {
    const ModelSpec& spec = weights.spec();
    const WeightView view = [&](const ExpertTensorId& id) { return weights.tensor(id); };
    for (uint32_t iter = 0; iter < iterations; ++iter) {
        for (uint32_t layer = 1; layer <= spec.num_layers; ++layer) layer_forward(spec, toy, layer, view, activations);
    }
    return activations;
}

uint64_t activation_checksum(std::span<const float> activations) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (float v : activations) {
        uint32_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 4; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

}  // namespace xpg
