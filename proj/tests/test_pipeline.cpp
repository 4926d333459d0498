// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>

#include "xpg/bf16.hpp"
#include "xpg/error.hpp"
#include "xpg/pipeline.hpp"

using namespace xpg;

namespace {

struct Fixture {
    WeightContainer weights;
    std::vector<Backend> backends = default_backends();
    TensorStorage storage;

    Fixture(const ModelSpec& spec, uint64_t seed, std::optional<double> alpha = 0.5)
        : weights(generate_synthetic_model(spec, seed)),
          storage(weights, plan_placement(spec, backends, alpha), backends) {}
};

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::vector<float> baseline_for(const Fixture& f, const PipelineConfig& c) {
    return resident_baseline(c.iterations, f.weights, c.toy, initial_activations(f.weights.spec(), c.toy, c.input_seed));
}

void sleep_us(uint64_t us) { std::this_thread::sleep_for(std::chrono::microseconds(us)); }

// Independent scalar forward: full sort for routing, explicit gate/up/down loops.
std::vector<float> scalar_oracle(const WeightContainer& w, const ToyForwardSpec& toy, uint32_t iterations,
                                 std::vector<float> x) {
    const ModelSpec& s = w.spec();
    const uint32_t L = static_cast<uint32_t>(s.experts_per_layer);
    const size_t H = s.hidden_dim, F = s.intermediate_dim;
    auto weight = [&](uint32_t layer, uint32_t j, TensorKind kind, size_t index) {
        return bf16::to_float(bf16::load(w.tensor({layer, j, kind}), index));
    };
    for (uint32_t it = 0; it < iterations; ++it) {
        for (uint32_t layer = 1; layer <= s.num_layers; ++layer) {
            for (uint32_t t = 0; t < toy.tokens; ++t) {
                std::vector<std::pair<uint64_t, uint32_t>> scores;
                for (uint32_t j = 1; j <= L; ++j) {
                    const uint64_t h = splitmix64(splitmix64(splitmix64(splitmix64(toy.router_seed) ^ t) ^ layer) ^ j);
                    scores.push_back({h, j});
                }
                std::sort(scores.begin(), scores.end(), [](auto a, auto b) {
                    return a.first != b.first ? a.first > b.first : a.second < b.second;
                });
                const uint32_t k = std::min(toy.top_k, L);
                std::vector<uint32_t> chosen;
                for (uint32_t r = 0; r < k; ++r) chosen.push_back(scores[r].second);
                std::sort(chosen.begin(), chosen.end());
                float* xt = x.data() + t * H;
                std::vector<float> acc(H, 0.0f);
                for (uint32_t j : chosen) {
                    std::vector<float> mid(F);
                    for (size_t f = 0; f < F; ++f) {
                        float g = 0.0f, u = 0.0f;
                        for (size_t h = 0; h < H; ++h) {
                            g += weight(layer, j, TensorKind::GateUp, f * H + h) * xt[h];
                            u += weight(layer, j, TensorKind::GateUp, (F + f) * H + h) * xt[h];
                        }
                        mid[f] = g / (1.0f + std::exp(-g)) * u;
                    }
                    for (size_t h = 0; h < H; ++h) {
                        float y = 0.0f;
                        for (size_t f = 0; f < F; ++f) y += weight(layer, j, TensorKind::Down, h * F + f) * mid[f];
                        acc[h] += y;
                    }
                }
                for (size_t h = 0; h < H; ++h) xt[h] += acc[h] * (1.0f / static_cast<float>(k));
            }
        }
    }
    return x;
}

}  // namespace

TEST(Events, OneShotSemantics) {
    EventRegistry ev;
    const EventKey k{1, 2, EventRole::Compute};
    EXPECT_FALSE(ev.is_signaled(k));
    EXPECT_THROW(ev.wait(k, true), Error);
    ev.signal(k);
    EXPECT_NO_THROW(ev.wait(k));
    EXPECT_NO_THROW(ev.wait(k, true));
    EXPECT_THROW(ev.signal(k), Error);
    std::thread waiter([&] { EXPECT_THROW(ev.wait({1, 3, EventRole::Compute}), Error); });
    sleep_us(2000);
    ev.abort();
    waiter.join();
}

TEST(Router, DeterministicDistinctSorted) {
    const ToyForwardSpec toy{4, 2, 99};
    for (uint32_t layer = 1; layer <= 6; ++layer) {
        for (uint32_t t = 0; t < 4; ++t) {
            const auto r = route(toy, t, layer, 8);
            ASSERT_EQ(r.size(), 2u);
            EXPECT_LT(r[0], r[1]);
            EXPECT_GE(r[0], 1u);
            EXPECT_LE(r[1], 8u);
            EXPECT_EQ(route(toy, t, layer, 8), r);
        }
    }
    EXPECT_EQ(route(toy, 0, 1, 1), std::vector<uint32_t>{1});
}

TEST(ToyForward, ZeroInputStaysZero) {
    const WeightContainer w = generate_synthetic_model({2, 2, 4, 8}, 1);
    ToyForwardSpec toy;
    std::vector<float> x(toy.tokens * 4, 0.0f);
    const auto y = resident_baseline(2, w, toy, x);
    for (float v : y) EXPECT_EQ(v, 0.0f);
}

TEST(ToyForward, ZeroWeightsContributeNothing) {
    const ModelSpec spec{2, 2, 4, 8};
    const WeightContainer zero(spec, std::vector<std::byte>(spec.total_bytes()));
    ToyForwardSpec toy;
    const auto x = initial_activations(spec, toy, 3);
    EXPECT_TRUE(same_bits(resident_baseline(3, zero, toy, x), x));
}

TEST(ToyForward, MatchesScalarOracle) {
    const WeightContainer w = generate_synthetic_model({2, 2, 4, 8}, 6);
    for (uint32_t top_k : {1u, 2u, 3u}) {
        const ToyForwardSpec toy{5, top_k, 17};
        const auto x = initial_activations(w.spec(), toy, 8);
        const auto base = resident_baseline(2, w, toy, x);
        EXPECT_TRUE(same_bits(base, scalar_oracle(w, toy, 2, x))) << "top_k " << top_k;
        EXPECT_TRUE(same_bits(base, resident_baseline(2, w, toy, x)));
        EXPECT_FALSE(same_bits(base, x));
    }
}

TEST(Pipeline, OneIterationBitIdentical) {
    Fixture f({4, 2, 8, 16}, 1);
    PipelineConfig c;
    c.iterations = 1;
    c.toy.tokens = 3;
    const auto report = run_iterations(f.storage, c);
    ASSERT_TRUE(report.ok()) << report.error_message;
    EXPECT_TRUE(same_bits(report.activations, baseline_for(f, c)));
}

TEST(Pipeline, ThreeIterationsValidOrderingAndExactPeak) {
    const ModelSpec spec{8, 4, 4, 16};
    ASSERT_EQ(spec.gate_up_bytes(), 256u);
    ASSERT_EQ(spec.down_bytes(), 128u);
    Fixture f(spec, 2, std::nullopt);
    PipelineConfig c;
    const auto report = run_iterations(f.storage, c);
    ASSERT_TRUE(report.ok()) << report.error_message;
    EXPECT_TRUE(report.violations.empty());
    EXPECT_EQ(report.arena_peak_bytes, 3072u);
    EXPECT_EQ(report.arena_peak_bytes * spec.num_layers, spec.total_bytes() * 2);
    EXPECT_EQ(report.pages_mapped, 3 * spec.tensor_count());
    EXPECT_TRUE(same_bits(report.activations, baseline_for(f, c)));
}

TEST(Pipeline, LoaderDelaysStillExactAndStall) {
    Fixture f({4, 3, 8, 16}, 3);
    PipelineConfig c;
    c.fetch_delay = [](const ExpertTensorId&) { sleep_us(1000); };
    const auto report = run_iterations(f.storage, c);
    ASSERT_TRUE(report.ok()) << report.error_message;
    EXPECT_TRUE(same_bits(report.activations, baseline_for(f, c)));
    EXPECT_GT(report.stall_ms, 0.0);
}

TEST(Pipeline, SequentialModeMatchesThreaded) {
    Fixture f({5, 3, 8, 16}, 4);
    PipelineConfig threaded;
    PipelineConfig sequential;
    sequential.sequential = true;
    const auto a = run_iterations(f.storage, threaded);
    const auto b = run_iterations(f.storage, sequential);
    ASSERT_TRUE(a.ok());
    ASSERT_TRUE(b.ok()) << b.error_message;
    EXPECT_TRUE(same_bits(a.activations, b.activations));
    EXPECT_TRUE(b.violations.empty());
    EXPECT_EQ(a.arena_peak_bytes, b.arena_peak_bytes);
}

TEST(Pipeline, RecycleSchedule) {
    const ModelSpec spec{8, 2, 4, 8};
    Fixture f(spec, 5);
    PipelineConfig c;
    c.iterations = 2;
    c.sequential = true;
    const auto report = run_iterations(f.storage, c);
    ASSERT_TRUE(report.ok());
    auto find = [&](RecordType type, uint32_t iter, uint32_t layer) {
        return std::find_if(report.log.begin(), report.log.end(),
                            [&](const LogRecord& r) { return r.type == type && r.iter == iter && r.layer == layer; });
    };
    // Cold start: layers 1 and 2 of the first iteration recycle nothing.
    EXPECT_EQ(find(RecordType::Recycle, 1, 1), report.log.end());
    EXPECT_EQ(find(RecordType::Recycle, 1, 2), report.log.end());
    const auto r13 = find(RecordType::Recycle, 1, 3);
    ASSERT_NE(r13, report.log.end());
    EXPECT_EQ(r13->target_layer, 1u);
    EXPECT_EQ(r13->target_iter, 1u);
    EXPECT_LT(find(RecordType::ComputeDone, 1, 1)->seq, r13->seq);
    const auto r21 = find(RecordType::Recycle, 2, 1);
    ASSERT_NE(r21, report.log.end());
    EXPECT_EQ(r21->target_layer, 7u);
    EXPECT_EQ(r21->target_iter, 1u);
    const auto recycles = std::count_if(report.log.begin(), report.log.end(),
                                        [](const LogRecord& r) { return r.type == RecordType::Recycle; });
    EXPECT_EQ(recycles, 2 * (2 * 8 - 2));
}

TEST(Pipeline, TwoLayerModel) {
    Fixture f({2, 1, 4, 8}, 6);
    PipelineConfig c;
    c.iterations = 4;
    const auto report = run_iterations(f.storage, c);
    ASSERT_TRUE(report.ok()) << report.error_message;
    EXPECT_TRUE(same_bits(report.activations, baseline_for(f, c)));
}

TEST(ValidateOrdering, ConstructedNegatives) {
    Fixture f({4, 2, 4, 8}, 7);
    PipelineConfig c;
    c.sequential = true;
    const auto report = run_iterations(f.storage, c);
    ASSERT_TRUE(validate_ordering(report.log).empty());

    auto war = report.log;
    const auto recycle = std::find_if(war.begin(), war.end(), [](auto& r) { return r.type == RecordType::Recycle; });
    const auto done = std::find_if(war.begin(), war.end(), [&](auto& r) {
        return r.type == RecordType::ComputeDone && r.iter == recycle->target_iter && r.layer == recycle->target_layer;
    });
    ASSERT_LT(done, recycle);
    const LogRecord moved = *recycle;
    war.erase(recycle);
    war.insert(done, moved);
    const auto v = validate_ordering(war);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].kind, Violation::Kind::War);

    auto raw = report.log;
    const auto load_done = std::find_if(raw.begin(), raw.end(), [](auto& r) {
        return r.type == RecordType::LoadDone && r.iter == 2 && r.layer == 3 && r.kind == TensorKind::Down;
    });
    const LogRecord late = *load_done;
    raw.erase(load_done);
    raw.push_back(late);
    const auto v2 = validate_ordering(raw);
    ASSERT_EQ(v2.size(), 1u);
    EXPECT_EQ(v2[0].kind, Violation::Kind::Raw);
}

TEST(Pipeline, LoadsOverlapComputeAndEachOther) {
    Fixture f({6, 3, 8, 16}, 8);
    PipelineConfig c;
    c.iterations = 2;
    c.fetch_delay = [](const ExpertTensorId&) { sleep_us(1500); };
    c.compute_delay = [](uint32_t, uint32_t) { sleep_us(3000); };
    const auto report = run_iterations(f.storage, c);
    ASSERT_TRUE(report.ok()) << report.error_message;
    const auto& iv = report.intervals;
    ASSERT_EQ(iv.size(), 12u);
    size_t kinds_overlap = 0, pipelined = 0;
    for (size_t k = 0; k < iv.size(); ++k) {
        const auto& a = iv[k];
        if (a.load_start_ms[0] < a.load_done_ms[1] && a.load_start_ms[1] < a.load_done_ms[0]) ++kinds_overlap;
        if (k + 1 < iv.size() && iv[k + 1].load_start_ms[0] < a.compute_done_ms) ++pipelined;
    }
    EXPECT_EQ(kinds_overlap, iv.size());
    EXPECT_EQ(pipelined, iv.size() - 1);
}

TEST(Pipeline, SabotageIsCaught) {
    Fixture f({4, 2, 8, 16}, 9);
    PipelineConfig c;
    c.sabotage = std::make_pair(2u, 3u);
    c.sabotage_load_delay_ms = 50;
    const auto report = run_iterations(f.storage, c);
    EXPECT_FALSE(report.ok());
    EXPECT_GE(report.violations.size(), 1u);
    ASSERT_TRUE(report.error_code.has_value());
    EXPECT_EQ(*report.error_code, ErrorCode::PageFault);
}

TEST(Pipeline, FetchErrorsAbortCleanly) {
    const ModelSpec spec{3, 2, 4, 8};
    const WeightContainer w = generate_synthetic_model(spec, 1);
    auto backends = default_backends();
    auto plan = plan_placement(spec, backends, 0.5);
    plan.assignment[linear_index({2, 1, TensorKind::Down}, spec)] = PlacementPlan::kUnassigned;
    const TensorStorage storage(w, plan, backends);
    for (bool seq : {false, true}) {
        PipelineConfig c;
        c.sequential = seq;
        const auto report = run_iterations(storage, c);
        ASSERT_TRUE(report.error_code.has_value());
        EXPECT_EQ(*report.error_code, ErrorCode::BackendMiss);
    }
}

TEST(Pipeline, ReportJsonShape) {
    Fixture f({2, 2, 4, 8}, 10);
    const auto report = run_iterations(f.storage, PipelineConfig{});
    const auto j = report.to_json();
    EXPECT_EQ(j["violation_count"], 0);
    EXPECT_EQ(j["arena_peak_bytes"], report.arena_peak_bytes);
    EXPECT_EQ(j["intervals"].size(), 6u);
    EXPECT_TRUE(j["error"].is_null());
    EXPECT_EQ(j["checksum"].get<std::string>().size(), 18u);
}
