// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xpg/error.hpp"
#include "xpg/paged_tensor.hpp"
#include "xpg/storage.hpp"
#include "xpg/toy_moe.hpp"

namespace xpg {

enum class EventRole : uint8_t { LoadGateUp, LoadDown, Compute };

inline EventRole load_role(TensorKind kind) {
    return kind == TensorKind::GateUp ? EventRole::LoadGateUp : EventRole::LoadDown;
}

struct EventKey {
    uint32_t iter = 0;
    uint32_t layer = 0;
    EventRole role = EventRole::Compute;

    auto operator<=>(const EventKey&) const = default;
};

// One-shot completion events keyed by (iteration, layer, role).
class EventRegistry {
public:
    // Throws Error(Validation) when signaled twice.
    void signal(const EventKey& key);
    // Blocks until signaled. Throws Error(Aborted) after abort(). With
    // `eager` set, an unsignaled event throws instead of blocking.
    void wait(const EventKey& key, bool eager = false);
    bool is_signaled(const EventKey& key) const;
    void abort();

private:
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::set<EventKey> signaled_;
    bool aborted_ = false;
};

enum class RecordType : uint8_t { LoadStart, LoadDone, ComputeStart, ComputeDone, Recycle };

std::string_view to_string(RecordType type);

struct LogRecord {
    RecordType type = RecordType::LoadStart;
    uint32_t iter = 0;
    uint32_t layer = 0;
    TensorKind kind = TensorKind::GateUp;  // loads and recycles only
    // Recycle only: the layer whose blocks are freed and the iteration whose
    // compute-done must precede it.
    uint32_t target_layer = 0;
    uint32_t target_iter = 0;
    double t_ms = 0.0;
    uint64_t seq = 0;
};

// Append-only; stamps each record's wall time and sequence number under one
// lock so the two orders agree.
class OrderingLog {
public:
    OrderingLog() : start_(std::chrono::steady_clock::now()) {}

    void append(LogRecord record);
    std::vector<LogRecord> records() const;
    double elapsed_ms() const;

private:
    std::chrono::steady_clock::time_point start_;
    mutable std::mutex mutex_;
    std::vector<LogRecord> records_;
};

struct Violation {
    enum class Kind : uint8_t { Raw, War };
    Kind kind = Kind::Raw;
    uint64_t seq = 0;
    std::string message;
};

// Empty iff every ComputeStart follows both LoadDones of its (iter, layer) and
// every Recycle follows the ComputeDone it targets. Records are taken in
// sequence order.
std::vector<Violation> validate_ordering(const std::vector<LogRecord>& log);

struct PipelineConfig {
    uint32_t iterations = 3;
    bool sequential = false;
    ToyForwardSpec toy;
    uint64_t input_seed = 7;
    std::function<void(const ExpertTensorId&)> fetch_delay;
    std::function<void(uint32_t iter, uint32_t layer)> compute_delay;
    // Fault injection: this (iter, layer) skips its RAW wait while its loads
    // start late. Threaded mode only.
    std::optional<std::pair<uint32_t, uint32_t>> sabotage;
    double sabotage_load_delay_ms = 200.0;
    TraceSink trace;
};

struct LayerInterval {
    uint32_t iter = 0;
    uint32_t layer = 0;
    double load_start_ms[2] = {-1.0, -1.0};
    double load_done_ms[2] = {-1.0, -1.0};
    double compute_start_ms = -1.0;
    double compute_done_ms = -1.0;
};

struct RunReport {
    std::vector<float> activations;
    uint64_t checksum = 0;
    double stall_ms = 0.0;
    double war_wait_ms = 0.0;
    uint64_t arena_bytes = 0;
    uint64_t arena_peak_bytes = 0;
    uint64_t pages_mapped = 0;
    uint64_t window_violations = 0;
    std::vector<LogRecord> log;
    std::vector<Violation> violations;
    std::vector<LayerInterval> intervals;
    std::optional<ErrorCode> error_code;
    std::string error_message;

    bool ok() const { return !error_code && violations.empty() && window_violations == 0; }
    nlohmann::json to_json() const;
};

// Streams every layer through the 4L-block pool for `iterations` passes with
// two loader contexts and one compute context. Errors raised inside a context
// abort the run and are captured in the report.
RunReport run_iterations(const TensorStorage& storage, const PipelineConfig& config);

}  // namespace xpg
