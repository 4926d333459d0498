// SPDX-License-Identifier: Apache-2.0

#include "xpg/pipeline.hpp"

#include <atomic>
#include <deque>
#include <map>
#include <sstream>
#include <thread>

namespace xpg {

void EventRegistry::signal(const EventKey& key) {
    {
        std::lock_guard lock(mutex_);
        if (!signaled_.insert(key).second) {
            throw Error(ErrorCode::Validation, "event (iter=" + std::to_string(key.iter) + ", layer=" +
                                                   std::to_string(key.layer) + ") signaled twice");
        }
    }
    cv_.notify_all();
}

void EventRegistry::wait(const EventKey& key, bool eager) {
    std::unique_lock lock(mutex_);
    if (eager && !signaled_.contains(key) && !aborted_) {
        throw Error(ErrorCode::Aborted, "sequential mode waited on an unsignaled event (iter=" +
                                            std::to_string(key.iter) + ", layer=" + std::to_string(key.layer) + ")");
    }
    cv_.wait(lock, [&] { return aborted_ || signaled_.contains(key); });
    if (aborted_ && !signaled_.contains(key)) throw Error(ErrorCode::Aborted, "run aborted");
}

bool EventRegistry::is_signaled(const EventKey& key) const {
    std::lock_guard lock(mutex_);
    return signaled_.contains(key);
}

void EventRegistry::abort() {
    {
        std::lock_guard lock(mutex_);
        aborted_ = true;
    }
    cv_.notify_all();
}

std::string_view to_string(RecordType type) {
    switch (type) {
        case RecordType::LoadStart: return "load_start";
        case RecordType::LoadDone: return "load_done";
        case RecordType::ComputeStart: return "compute_start";
        case RecordType::ComputeDone: return "compute_done";
        case RecordType::Recycle: return "recycle";
    }
    return "?";
}

void OrderingLog::append(LogRecord record) {
    std::lock_guard lock(mutex_);
    record.t_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    record.seq = records_.size();
    records_.push_back(record);
}

std::vector<LogRecord> OrderingLog::records() const {
    std::lock_guard lock(mutex_);
    return records_;
}

double OrderingLog::elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
}

std::vector<Violation> validate_ordering(const std::vector<LogRecord>& log) {
    std::set<std::tuple<uint32_t, uint32_t, int>> loads_done;
    std::set<std::pair<uint32_t, uint32_t>> computes_done;
    std::vector<Violation> violations;
    for (const auto& r : log) {
        switch (r.type) {
            case RecordType::LoadDone: loads_done.insert({r.iter, r.layer, kind_index(r.kind)}); break;
            case RecordType::ComputeDone: computes_done.insert({r.iter, r.layer}); break;
            case RecordType::ComputeStart:
                for (TensorKind kind : kAllKinds) {
                    if (!loads_done.contains({r.iter, r.layer, kind_index(kind)})) {
                        std::ostringstream msg;
                        msg << "RAW: compute_start(iter=" << r.iter << ", layer=" << r.layer << ") before load_done(kind="
                            << static_cast<int>(kind) << ")";
                        violations.push_back({Violation::Kind::Raw, r.seq, msg.str()});
                    }
                }
                break;
            case RecordType::Recycle:
                if (!computes_done.contains({r.target_iter, r.target_layer})) {
                    std::ostringstream msg;
                    msg << "WAR: recycle(layer=" << r.target_layer << ", kind=" << static_cast<int>(r.kind)
                        << ") before compute_done(iter=" << r.target_iter << ", layer=" << r.target_layer << ")";
                    violations.push_back({Violation::Kind::War, r.seq, msg.str()});
                }
                break;
            case RecordType::LoadStart: break;
        }
    }
    return violations;
}

nlohmann::json RunReport::to_json() const {
    using nlohmann::json;
    char hex[19];
    std::snprintf(hex, sizeof hex, "0x%016llx", static_cast<unsigned long long>(checksum));
    json j;
    j["checksum"] = hex;
    j["stall_ms"] = stall_ms;
    j["war_wait_ms"] = war_wait_ms;
    j["arena_bytes"] = arena_bytes;
    j["arena_peak_bytes"] = arena_peak_bytes;
    j["pages_mapped"] = pages_mapped;
    j["violation_count"] = violations.size();
    j["window_violations"] = window_violations;
    json v = json::array();
    for (const auto& violation : violations) v.push_back(violation.message);
    j["violations"] = v;
    json table = json::array();
    for (const auto& iv : intervals) {
        table.push_back({{"iter", iv.iter},
                         {"layer", iv.layer},
                         {"load_gate_up_ms", {iv.load_start_ms[0], iv.load_done_ms[0]}},
                         {"load_down_ms", {iv.load_start_ms[1], iv.load_done_ms[1]}},
                         {"compute_ms", {iv.compute_start_ms, iv.compute_done_ms}}});
    }
    j["intervals"] = table;
    if (error_code) {
        j["error"] = {{"code", std::string(to_string(*error_code))}, {"message", error_message}};
    } else {
        j["error"] = nullptr;
    }
    return j;
}

namespace {

struct Failure {
    std::mutex mutex;
    std::atomic<bool> raised{false};
    std::optional<ErrorCode> code;
    std::string message;
    EventRegistry* events = nullptr;

    void record(ErrorCode c, std::string msg) {
        {
            std::lock_guard lock(mutex);
            if (!code) {
                code = c;
                message = std::move(msg);
            }
        }
        raised = true;
        events->abort();
    }

    void run_guarded(const std::function<void()>& task) {
        if (raised) return;
        try {
            task();
        } catch (const Error& e) {
            record(e.code(), e.what());
        } catch (const std::exception& e) {
            record(ErrorCode::Aborted, e.what());
        }
    }
};

// A single execution context with an ordered task queue.
class Stream {
public:
    explicit Stream(Failure& failure) : failure_(failure), thread_([this] { loop(); }) {}
    ~Stream() { close(); }

    void enqueue(std::function<void()> task) {
        {
            std::lock_guard lock(mutex_);
            tasks_.push_back(std::move(task));
        }
        cv_.notify_one();
    }

    void close() {
        {
            std::lock_guard lock(mutex_);
            closed_ = true;
        }
        cv_.notify_one();
        if (thread_.joinable()) thread_.join();
    }

private:
    void loop() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock lock(mutex_);
                cv_.wait(lock, [&] { return closed_ || !tasks_.empty(); });
                if (tasks_.empty()) return;
                task = std::move(tasks_.front());
                tasks_.pop_front();
            }
            failure_.run_guarded(task);
        }
    }

    Failure& failure_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> tasks_;
    bool closed_ = false;
    std::thread thread_;
};

class Run {
public:
    Run(const TensorStorage& storage, const PipelineConfig& config)
        : storage_(storage), config_(config), spec_(storage.spec()), table_(spec_, config.trace) {
        failure_.events = &events_;
        activations_ = initial_activations(spec_, config.toy, config.input_seed);
    }

    RunReport execute() {
        if (config_.iterations < 1) throw Error(ErrorCode::Validation, "iterations must be >= 1");
        if (config_.sequential) {
            schedule([&](std::function<void()> task, int) { failure_.run_guarded(task); });
        } else {
            Stream load_gate_up(failure_);
            Stream load_down(failure_);
            Stream compute(failure_);
            Stream* streams[3] = {&load_gate_up, &load_down, &compute};
            schedule([&](std::function<void()> task, int stream) { streams[stream]->enqueue(std::move(task)); });
            for (Stream* s : streams) s->close();
        }
        return report();
    }

private:
    static constexpr int kComputeStream = 2;

    bool sabotaged(uint32_t iter, uint32_t layer) const {
        return config_.sabotage && config_.sabotage->first == iter && config_.sabotage->second == layer;
    }

    template <typename Dispatch>
    void schedule(Dispatch&& dispatch) {
        const auto n = config_.iterations;
        const auto N = static_cast<uint32_t>(spec_.num_layers);
        auto materialize = [&](uint32_t iter, uint32_t layer) {
            for (TensorKind kind : kAllKinds) {
                dispatch([=, this] { materialize_kind(iter, layer, kind); }, kind_index(kind));
            }
        };
        for (uint32_t iter = 1; iter <= n; ++iter) {
            for (uint32_t layer = 1; layer <= N; ++layer) {
                if (iter == 1 && layer == 1) materialize(1, 1);
                const uint32_t next_iter = layer == N ? iter + 1 : iter;
                const uint32_t next_layer = layer == N ? 1 : layer + 1;
                if (next_iter <= n) materialize(next_iter, next_layer);
                dispatch([=, this] { forward(iter, layer); }, kComputeStream);
            }
        }
    }

    void materialize_kind(uint32_t iter, uint32_t layer, TensorKind kind) {
        const auto N = static_cast<uint32_t>(spec_.num_layers);
        const auto L = static_cast<uint32_t>(spec_.experts_per_layer);
        if (sabotaged(iter, layer)) {
            std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(config_.sabotage_load_delay_ms));
        }
        if (!(iter == 1 && layer <= 2)) {
            const uint32_t target = target_layer(layer, N);
            const uint32_t target_iter = target < layer ? iter : iter - 1;
            const double t0 = log_.elapsed_ms();
            events_.wait({target_iter, target, EventRole::Compute}, config_.sequential);
            add(war_wait_ms_, log_.elapsed_ms() - t0);
            log_.append({RecordType::Recycle, iter, layer, kind, target, target_iter});
            for (uint32_t j = 1; j <= L; ++j) table_.unmap_page({target, j, kind});
        }
        log_.append({RecordType::LoadStart, iter, layer, kind});
        const uint32_t previous = layer == 1 ? N : layer - 1;
        for (uint32_t j = 1; j <= L; ++j) {
            const ExpertTensorId id{layer, j, kind};
            table_.map_page(id);
            for (uint32_t bound : table_.bound_layers(kind)) {
                if (bound != layer && bound != previous) ++window_violations_;
            }
            const auto dest = table_.load_target(id);
            if (config_.fetch_delay) config_.fetch_delay(id);
            storage_.fetch(id, dest);
            table_.mark_resident(id);
        }
        log_.append({RecordType::LoadDone, iter, layer, kind});
        events_.signal({iter, layer, load_role(kind)});
    }

    void forward(uint32_t iter, uint32_t layer) {
        if (!sabotaged(iter, layer)) {
            const double t0 = log_.elapsed_ms();
            for (TensorKind kind : kAllKinds) events_.wait({iter, layer, load_role(kind)}, config_.sequential);
            add(stall_ms_, log_.elapsed_ms() - t0);
        }
        log_.append({RecordType::ComputeStart, iter, layer});
        if (config_.compute_delay) config_.compute_delay(iter, layer);
        const WeightView view = [&](const ExpertTensorId& id) { return table_.read(id); };
        layer_forward(spec_, config_.toy, layer, view, activations_);
        log_.append({RecordType::ComputeDone, iter, layer});
        events_.signal({iter, layer, EventRole::Compute});
    }

    void add(double& total, double value) {
        std::lock_guard lock(stats_mutex_);
        total += value;
    }

    RunReport report() {
        RunReport r;
        r.activations = activations_;
        r.checksum = activation_checksum(activations_);
        r.stall_ms = stall_ms_;
        r.war_wait_ms = war_wait_ms_;
        r.arena_bytes = table_.arena_bytes();
        r.arena_peak_bytes = table_.arena_peak_bytes();
        r.pages_mapped = table_.pages_ever_mapped();
        r.window_violations = window_violations_;
        r.log = log_.records();
        r.violations = validate_ordering(r.log);
        std::map<std::pair<uint32_t, uint32_t>, LayerInterval> intervals;
        for (const auto& rec : r.log) {
            auto& iv = intervals[{rec.iter, rec.layer}];
            iv.iter = rec.iter;
            iv.layer = rec.layer;
            switch (rec.type) {
                case RecordType::LoadStart: iv.load_start_ms[kind_index(rec.kind)] = rec.t_ms; break;
                case RecordType::LoadDone: iv.load_done_ms[kind_index(rec.kind)] = rec.t_ms; break;
                case RecordType::ComputeStart: iv.compute_start_ms = rec.t_ms; break;
                case RecordType::ComputeDone: iv.compute_done_ms = rec.t_ms; break;
                case RecordType::Recycle: break;
            }
        }
        for (auto& [key, iv] : intervals) r.intervals.push_back(iv);
        r.error_code = failure_.code;
        r.error_message = failure_.message;
        return r;
    }

    const TensorStorage& storage_;
    const PipelineConfig& config_;
    ModelSpec spec_;
    PageTable table_;
    EventRegistry events_;
    OrderingLog log_;
    Failure failure_;
    std::vector<float> activations_;
    std::mutex stats_mutex_;
    double stall_ms_ = 0.0;
    double war_wait_ms_ = 0.0;
    std::atomic<uint64_t> window_violations_{0};
};

}  // namespace

RunReport run_iterations(const TensorStorage& storage, const PipelineConfig& config) {
    Run run(storage, config);
    return run.execute();
}

}  // namespace xpg
