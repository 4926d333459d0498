// SPDX-License-Identifier: Apache-2.0

#include "xpg/commands.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <thread>

#include "xpg/codec.hpp"
#include "xpg/pipeline.hpp"

namespace xpg {

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::Validation:
        case ErrorCode::OutOfRange:
        case ErrorCode::InfeasibleConfig:
        case ErrorCode::CapacityExceeded:
        case ErrorCode::OddLength:
        case ErrorCode::EmptyHistogram: return kExitValidation;
        case ErrorCode::Io:
        case ErrorCode::CorruptFile:
        case ErrorCode::TruncatedStream:
        case ErrorCode::InvalidCode: return kExitIo;
        case ErrorCode::DoubleMap:
        case ErrorCode::PoolExhausted:
        case ErrorCode::NotMapped:
        case ErrorCode::IllegalTransition:
        case ErrorCode::PageFault:
        case ErrorCode::SymbolNotInTable:
        case ErrorCode::BackendMiss:
        case ErrorCode::Aborted: return kExitCorrectness;
    }
    return kExitValidation;
}

namespace {

template <typename Body>
int guarded(std::ostream& log, Body&& body) {
    try {
        return body();
    } catch (const Error& e) {
        log << "error: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::filesystem::filesystem_error& e) {
        log << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        log << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}

void check_writable(const std::filesystem::path& path, bool force) {
    if (!force && std::filesystem::exists(path)) {
        throw Error(ErrorCode::Io, path.string() + " exists (use --force to overwrite)");
    }
}

void write_text(const std::filesystem::path& path, const std::string& text, bool force) {
    check_writable(path, force);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot create " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::Io, "write failed on " + path.string());
}

void emit(const std::optional<std::filesystem::path>& out, const std::string& text, bool force, std::ostream& log) {
    if (out) {
        write_text(*out, text, force);
        log << "wrote " << out->string() << "\n";
    } else {
        log << text;
    }
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

std::function<void()> make_delay(uint64_t seed, double lo_ms, double hi_ms) {
    if (!(hi_ms > 0.0)) return {};
    auto counter = std::make_shared<std::atomic<uint64_t>>(0);
    return [=] {
        const uint64_t draw = splitmix64(seed ^ splitmix64(counter->fetch_add(1)));
        const double u = static_cast<double>(draw >> 11) * 0x1.0p-53;
        std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(lo_ms + u * (hi_ms - lo_ms)));
    };
}

PlannerState initial_state(const RunConfig& config) {
    const auto L = static_cast<uint32_t>(config.model.spec.experts_per_layer);
    auto k = static_cast<int64_t>(std::llround(config.planner.alpha0 * L));
    k = std::clamp<int64_t>(k, 1, L);
    return PlannerState{L, static_cast<uint32_t>(k)};
}

}  // namespace

int cmd_generate(const RunConfig& config, const std::filesystem::path& out, bool force, std::ostream& log) {
    return guarded(log, [&] {
        config.validate();
        check_writable(out, force);
        const WeightContainer weights = generate_synthetic_model(config.model.spec, config.model.seed);
        weights.save(out);
        log << "wrote " << out.string() << " (" << WeightContainer::kHeaderBytes + weights.payload().size()
            << " bytes, P_total " << weights.payload().size() << ")\n";
        return kExitOk;
    });
}

int cmd_compress(const std::filesystem::path& in, const std::filesystem::path& out, bool force, std::ostream& log) {
    return guarded(log, [&] {
        check_writable(out, force);
        const WeightContainer weights = WeightContainer::load(in);
        const CompressedModel compressed = CompressedModel::from_weights(weights);
        compressed.save(out);
        log << "wrote " << out.string() << ": " << compressed.compressed_bytes() << " / " << compressed.raw_bytes()
            << " bytes, ratio " << num(compressed.ratio()) << "\n";
        return kExitOk;
    });
}

int cmd_verify(const std::filesystem::path& compressed_path, const std::filesystem::path& original_path,
               std::ostream& log) {
    return guarded(log, [&] {
        const CompressedModel compressed = CompressedModel::load(compressed_path);
        const WeightContainer original = WeightContainer::load(original_path);
        if (!(compressed.spec() == original.spec())) {
            log << "MISMATCH: model geometry differs\n";
            return kExitCorrectness;
        }
        const auto t0 = std::chrono::steady_clock::now();
        const WeightContainer restored = compressed.decompress_all();
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const auto a = restored.payload();
        const auto b = original.payload();
        if (a.size() != b.size() || std::memcmp(a.data(), b.data(), a.size()) != 0) {
            for (uint64_t index = 0; index < original.spec().tensor_count(); ++index) {
                const ExpertTensorId id = id_from_linear(index, original.spec());
                const auto x = restored.tensor(id);
                const auto y = original.tensor(id);
                if (std::memcmp(x.data(), y.data(), x.size()) != 0) {
                    log << "MISMATCH at tensor " << to_string(id) << "\n";
                    break;
                }
            }
            return kExitCorrectness;
        }
        log << "identical; ratio " << num(compressed.ratio()) << " (" << compressed.compressed_bytes() << " / "
            << compressed.raw_bytes() << " bytes); decode " << num(static_cast<double>(b.size()) / seconds / 1e6)
            << " MB/s\n";
        return kExitOk;
    });
}

int cmd_run(const RunConfig& config, const RunOptions& options, std::ostream& log) {
    return guarded(log, [&] {
        config.validate();
        if (options.seeds < 1) throw Error(ErrorCode::Validation, "seeds must be >= 1");
        if (options.report_path) check_writable(*options.report_path, options.force);
        nlohmann::json reports = nlohmann::json::array();
        uint32_t passed = 0;
        for (uint32_t s = 0; s < options.seeds; ++s) {
            RunConfig c = config;
            c.model.seed = config.model.seed + s;
            const WeightContainer weights = options.model_path
                                                ? WeightContainer::load(*options.model_path)
                                                : generate_synthetic_model(c.model.spec, c.model.seed);
            const ModelSpec& spec = weights.spec();
            TensorStorage storage(weights, plan_placement(spec, c.backends, c.pipeline.alpha), c.backends);

            PipelineConfig pc;
            pc.iterations = c.pipeline.iterations;
            pc.sequential = c.pipeline.sequential;
            pc.toy = c.toy();
            pc.input_seed = c.derived_seed(2);
            pc.sabotage = options.sabotage;
            if (auto delay = make_delay(c.derived_seed(4), c.pipeline.fetch_delay_ms_min, c.pipeline.fetch_delay_ms_max)) {
                pc.fetch_delay = [delay](const ExpertTensorId&) { delay(); };
            }
            if (auto delay =
                    make_delay(c.derived_seed(5), c.pipeline.compute_delay_ms_min, c.pipeline.compute_delay_ms_max)) {
                pc.compute_delay = [delay](uint32_t, uint32_t) { delay(); };
            }

            const RunReport report = run_iterations(storage, pc);
            const auto baseline =
                resident_baseline(pc.iterations, weights, pc.toy, initial_activations(spec, pc.toy, pc.input_seed));
            const bool identical = !report.error_code && report.activations.size() == baseline.size() &&
                                   std::memcmp(report.activations.data(), baseline.data(),
                                               baseline.size() * sizeof(float)) == 0;
            const bool pass = identical && report.ok();
            passed += pass ? 1 : 0;

            log << "seed " << c.model.seed << ": " << (identical ? "bit-identical" : "MISMATCH") << ", "
                << report.violations.size() << " violations, arena peak " << report.arena_peak_bytes << " of "
                << report.arena_bytes << " bytes, stall " << num(report.stall_ms) << " ms\n";
            for (const auto& v : report.violations) log << "  violation: " << v.message << "\n";
            if (report.error_code) {
                log << "  error: " << to_string(*report.error_code) << ": " << report.error_message << "\n";
            }
            nlohmann::json j = report.to_json();
            j["seed"] = c.model.seed;
            j["bit_identical"] = identical;
            char hex[19];
            std::snprintf(hex, sizeof hex, "0x%016llx",
                          static_cast<unsigned long long>(activation_checksum(baseline)));
            j["baseline_checksum"] = hex;
            reports.push_back(std::move(j));
        }
        if (options.report_path) {
            const auto& doc = options.seeds == 1 ? reports[0] : reports;
            write_text(*options.report_path, doc.dump(2) + "\n", options.force);
        }
        if (options.seeds > 1) log << "pass " << passed << "/" << options.seeds << "\n";
        return passed == options.seeds ? kExitOk : kExitCorrectness;
    });
}

int cmd_simulate(const RunConfig& config, const std::optional<std::filesystem::path>& out, bool force,
                 std::ostream& log) {
    return guarded(log, [&] {
        config.validate();
        const auto samples = simulate_decode(config.sim_config(), config.sim.alpha);
        std::ostringstream csv;
        csv << "iter,alpha,kv_bytes,tau_load,tau_comp,iter_time,throughput,rho\n";
        for (const auto& s : samples) {
            csv << s.iter << ',' << num(s.alpha) << ',' << num(s.kv_bytes) << ',' << num(s.tau_load) << ','
                << num(s.tau_comp_actual) << ',' << num(s.iteration_time) << ',' << num(s.throughput) << ','
                << num(s.rho) << '\n';
        }
        emit(out, csv.str(), force, log);
        return kExitOk;
    });
}

int cmd_sweep(const RunConfig& config, const std::optional<std::filesystem::path>& out, bool force,
              std::ostream& log) {
    return guarded(log, [&] {
        config.validate();
        const SimConfig sc = config.sim_config();
        const auto rows = sweep_alpha(sc, alpha_grid(sc.spec.experts_per_layer));
        std::ostringstream csv;
        csv << "alpha,tau_load,tau_comp\n";
        for (const auto& r : rows) csv << num(r.alpha) << ',' << num(r.tau_load) << ',' << num(r.tau_comp) << '\n';
        emit(out, csv.str(), force, log);
        const auto closed = closed_form_knee(sc);
        const auto empirical = empirical_knee(rows, sc.tau_comp_at(0));
        log << "knee: closed-form " << (closed ? num(*closed) : std::string("none")) << ", grid "
            << (empirical ? num(*empirical) : std::string("none")) << "\n";
        return kExitOk;
    });
}

int cmd_plan(const RunConfig& config, const std::optional<std::filesystem::path>& out, bool force,
             std::ostream& log) {
    return guarded(log, [&] {
        config.validate();
        DecodeSimulator sim(config.sim_config());
        const auto trace =
            run_control_loop(sim, config.planner.planner, initial_state(config), config.sim.max_new_tokens);
        std::ostringstream csv;
        csv << "iter,rho,alpha,C_kv,C_exp,throughput\n";
        uint64_t adjustments = 0;
        for (const auto& r : trace) {
            csv << r.iter << ',' << num(r.rho) << ',' << num(r.alpha) << ',' << num(r.c_kv) << ',' << num(r.c_exp)
                << ',' << num(r.throughput) << '\n';
            adjustments += r.delta != 0 ? 1 : 0;
        }
        emit(out, csv.str(), force, log);
        log << "final alpha " << num(trace.back().alpha) << ", " << adjustments << " adjustments, "
            << count_oscillations(trace) << " oscillations\n";
        return kExitOk;
    });
}

}  // namespace xpg
