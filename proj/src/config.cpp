// SPDX-License-Identifier: Apache-2.0

#include "xpg/config.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "xpg/error.hpp"

namespace xpg {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
    throw Error(ErrorCode::Validation, where + ": " + what);
}

void check_keys(const YAML::Node& node, const std::string& block, const std::set<std::string>& allowed) {
    if (!node.IsMap()) fail(block, "expected a mapping");
    for (const auto& item : node) {
        const auto key = item.first.as<std::string>();
        if (!allowed.contains(key)) fail(block + "." + key, "unknown key");
    }
}

template <typename T>
void read(const YAML::Node& node, const std::string& block, const char* key, T& out) {
    const YAML::Node value = node[key];
    if (!value) return;
    try {
        out = value.as<T>();
    } catch (const YAML::Exception&) {
        fail(block + "." + key, "has the wrong type");
    }
}

void parse_model(const YAML::Node& node, ModelBlock& m) {
    check_keys(node, "model", {"num_layers", "experts_per_layer", "hidden_dim", "intermediate_dim", "seed"});
    read(node, "model", "num_layers", m.spec.num_layers);
    read(node, "model", "experts_per_layer", m.spec.experts_per_layer);
    read(node, "model", "hidden_dim", m.spec.hidden_dim);
    read(node, "model", "intermediate_dim", m.spec.intermediate_dim);
    read(node, "model", "seed", m.seed);
}

std::vector<Backend> parse_backends(const YAML::Node& node) {
    if (!node.IsSequence()) fail("backends", "expected a list");
    std::vector<Backend> out;
    for (size_t i = 0; i < node.size(); ++i) {
        const std::string where = "backends[" + std::to_string(i) + "]";
        check_keys(node[i], where, {"kind", "bandwidth_bytes_per_s", "capacity_bytes"});
        Backend b;
        std::string kind;
        read(node[i], where, "kind", kind);
        if (kind.empty()) fail(where + ".kind", "is required");
        b.kind = backend_kind_from_string(kind);
        read(node[i], where, "bandwidth_bytes_per_s", b.bandwidth);
        read(node[i], where, "capacity_bytes", b.capacity);
        out.push_back(b);
    }
    return out;
}

void parse_pipeline(const YAML::Node& node, PipelineBlock& p) {
    check_keys(node, "pipeline",
               {"tokens", "top_k", "iterations", "alpha", "sequential", "fetch_delay_ms_min", "fetch_delay_ms_max",
                "compute_delay_ms_min", "compute_delay_ms_max"});
    read(node, "pipeline", "tokens", p.tokens);
    read(node, "pipeline", "top_k", p.top_k);
    read(node, "pipeline", "iterations", p.iterations);
    if (node["alpha"]) {
        if (node["alpha"].IsNull() || node["alpha"].as<std::string>() == "balanced") {
            p.alpha.reset();
        } else {
            double a = 0.0;
            read(node, "pipeline", "alpha", a);
            p.alpha = a;
        }
    }
    read(node, "pipeline", "sequential", p.sequential);
    read(node, "pipeline", "fetch_delay_ms_min", p.fetch_delay_ms_min);
    read(node, "pipeline", "fetch_delay_ms_max", p.fetch_delay_ms_max);
    read(node, "pipeline", "compute_delay_ms_min", p.compute_delay_ms_min);
    read(node, "pipeline", "compute_delay_ms_max", p.compute_delay_ms_max);
}

void parse_sim(const YAML::Node& node, SimBlock& s) {
    check_keys(node, "sim",
               {"tau_comp_theory", "phases", "batch_size", "context_start", "max_new_tokens", "kv_bytes_per_token",
                "c_gpu", "non_expert_bytes", "swap_bandwidth", "compression_ratio", "load_noise", "alpha"});
    read(node, "sim", "tau_comp_theory", s.tau_comp_theory);
    if (const YAML::Node phases = node["phases"]) {
        if (!phases.IsSequence()) fail("sim.phases", "expected a list");
        s.phases.clear();
        for (size_t i = 0; i < phases.size(); ++i) {
            const std::string where = "sim.phases[" + std::to_string(i) + "]";
            check_keys(phases[i], where, {"start_iteration", "tau_comp_theory"});
            TauCompPhase phase;
            read(phases[i], where, "start_iteration", phase.start_iteration);
            read(phases[i], where, "tau_comp_theory", phase.tau_comp_theory);
            s.phases.push_back(phase);
        }
    }
    read(node, "sim", "batch_size", s.batch_size);
    read(node, "sim", "context_start", s.context_start);
    read(node, "sim", "max_new_tokens", s.max_new_tokens);
    read(node, "sim", "kv_bytes_per_token", s.kv_bytes_per_token);
    read(node, "sim", "c_gpu", s.c_gpu);
    read(node, "sim", "non_expert_bytes", s.non_expert_bytes);
    read(node, "sim", "swap_bandwidth", s.swap_bandwidth);
    read(node, "sim", "compression_ratio", s.compression_ratio);
    read(node, "sim", "load_noise", s.load_noise);
    read(node, "sim", "alpha", s.alpha);
}

void parse_planner(const YAML::Node& node, PlannerBlock& p) {
    check_keys(node, "planner", {"theta", "step", "cooldown", "io_balance", "measured_compute_numerator", "alpha0"});
    read(node, "planner", "theta", p.planner.theta);
    read(node, "planner", "step", p.planner.step);
    read(node, "planner", "cooldown", p.planner.cooldown);
    read(node, "planner", "io_balance", p.planner.io_balance);
    read(node, "planner", "measured_compute_numerator", p.planner.measured_compute_numerator);
    read(node, "planner", "alpha0", p.alpha0);
}

void check_fraction(double value, const std::string& where) {
    if (!(value > 0.0 && value <= 1.0)) fail(where, "must lie in (0, 1]");
}

void check_delay(double lo, double hi, const std::string& where) {
    if (!(lo >= 0.0) || !(hi >= lo)) fail(where, "needs 0 <= min <= max");
}

}  // namespace

void RunConfig::validate() const {
    try {
        model.spec.validate();
    } catch (const Error& e) {
        fail("model", e.what());
    }
    if (backends.empty()) fail("backends", "at least one backend is required");
    for (size_t i = 0; i < backends.size(); ++i) {
        if (!(backends[i].bandwidth > 0.0)) fail("backends[" + std::to_string(i) + "]", "bandwidth must be positive");
    }
    if (pipeline.tokens < 1) fail("pipeline.tokens", "must be >= 1");
    if (pipeline.top_k < 1) fail("pipeline.top_k", "must be >= 1");
    if (pipeline.iterations < 1) fail("pipeline.iterations", "must be >= 1");
    if (pipeline.alpha) check_fraction(*pipeline.alpha, "pipeline.alpha");
    check_delay(pipeline.fetch_delay_ms_min, pipeline.fetch_delay_ms_max, "pipeline.fetch_delay_ms");
    check_delay(pipeline.compute_delay_ms_min, pipeline.compute_delay_ms_max, "pipeline.compute_delay_ms");
    check_fraction(sim.alpha, "sim.alpha");
    check_fraction(planner.alpha0, "planner.alpha0");
    try {
        sim_config().validate();
    } catch (const Error& e) {
        fail("sim", e.what());
    }
    try {
        planner.planner.validate();
    } catch (const Error& e) {
        fail("planner", e.what());
    }
}

SimConfig RunConfig::sim_config() const {
    SimConfig c;
    c.spec = model.spec;
    c.backends = backends;
    c.tau_comp_theory = sim.tau_comp_theory;
    c.phases = sim.phases;
    c.batch_size = sim.batch_size;
    c.context_start = sim.context_start;
    c.max_new_tokens = sim.max_new_tokens;
    c.kv_bytes_per_token = sim.kv_bytes_per_token;
    c.c_gpu = sim.c_gpu;
    c.non_expert_bytes = sim.non_expert_bytes;
    c.swap_bandwidth = sim.swap_bandwidth;
    c.compression_ratio = sim.compression_ratio;
    c.load_noise = sim.load_noise;
    c.noise_seed = derived_seed(3);
    return c;
}

ToyForwardSpec RunConfig::toy() const {
    return ToyForwardSpec{pipeline.tokens, pipeline.top_k, derived_seed(1)};
}

uint64_t RunConfig::derived_seed(uint64_t stream) const { return splitmix64(model.seed ^ splitmix64(stream)); }

RunConfig parse_config(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw Error(ErrorCode::Validation, std::string("config: ") + e.what());
    }
    RunConfig config;
    if (!root || root.IsNull()) return config;
    check_keys(root, "config", {"model", "backends", "pipeline", "sim", "planner"});
    if (root["model"]) parse_model(root["model"], config.model);
    if (root["backends"]) config.backends = parse_backends(root["backends"]);
    if (root["pipeline"]) parse_pipeline(root["pipeline"], config.pipeline);
    if (root["sim"]) parse_sim(root["sim"], config.sim);
    if (root["planner"]) parse_planner(root["planner"], config.planner);
    config.validate();
    return config;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str());
}

std::string default_config_yaml() {
    const RunConfig d;
    YAML::Emitter out;
    out.SetDoublePrecision(12);
    out << YAML::BeginMap;
    out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "num_layers" << YAML::Value << d.model.spec.num_layers;
    out << YAML::Key << "experts_per_layer" << YAML::Value << d.model.spec.experts_per_layer;
    out << YAML::Key << "hidden_dim" << YAML::Value << d.model.spec.hidden_dim;
    out << YAML::Key << "intermediate_dim" << YAML::Value << d.model.spec.intermediate_dim;
    out << YAML::Key << "seed" << YAML::Value << d.model.seed;
    out << YAML::EndMap;
    out << YAML::Key << "backends" << YAML::Value << YAML::BeginSeq;
    for (const auto& b : d.backends) {
        out << YAML::BeginMap;
        out << YAML::Key << "kind" << YAML::Value << std::string(to_string(b.kind));
        out << YAML::Key << "bandwidth_bytes_per_s" << YAML::Value << b.bandwidth;
        out << YAML::EndMap;
    }
    out << YAML::EndSeq;
    out << YAML::Key << "pipeline" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "tokens" << YAML::Value << d.pipeline.tokens;
    out << YAML::Key << "top_k" << YAML::Value << d.pipeline.top_k;
    out << YAML::Key << "iterations" << YAML::Value << d.pipeline.iterations;
    out << YAML::Key << "alpha" << YAML::Value << *d.pipeline.alpha;
    out << YAML::Key << "sequential" << YAML::Value << d.pipeline.sequential;
    out << YAML::Key << "fetch_delay_ms_min" << YAML::Value << d.pipeline.fetch_delay_ms_min;
    out << YAML::Key << "fetch_delay_ms_max" << YAML::Value << d.pipeline.fetch_delay_ms_max;
    out << YAML::Key << "compute_delay_ms_min" << YAML::Value << d.pipeline.compute_delay_ms_min;
    out << YAML::Key << "compute_delay_ms_max" << YAML::Value << d.pipeline.compute_delay_ms_max;
    out << YAML::EndMap;
    out << YAML::Key << "sim" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "tau_comp_theory" << YAML::Value << d.sim.tau_comp_theory;
    out << YAML::Key << "batch_size" << YAML::Value << d.sim.batch_size;
    out << YAML::Key << "context_start" << YAML::Value << d.sim.context_start;
    out << YAML::Key << "max_new_tokens" << YAML::Value << d.sim.max_new_tokens;
    out << YAML::Key << "kv_bytes_per_token" << YAML::Value << d.sim.kv_bytes_per_token;
    out << YAML::Key << "c_gpu" << YAML::Value << d.sim.c_gpu;
    out << YAML::Key << "non_expert_bytes" << YAML::Value << d.sim.non_expert_bytes;
    out << YAML::Key << "swap_bandwidth" << YAML::Value << d.sim.swap_bandwidth;
    out << YAML::Key << "compression_ratio" << YAML::Value << d.sim.compression_ratio;
    out << YAML::Key << "load_noise" << YAML::Value << d.sim.load_noise;
    out << YAML::Key << "alpha" << YAML::Value << d.sim.alpha;
    out << YAML::EndMap;
    out << YAML::Key << "planner" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "theta" << YAML::Value << d.planner.planner.theta;
    out << YAML::Key << "step" << YAML::Value << d.planner.planner.step;
    out << YAML::Key << "cooldown" << YAML::Value << d.planner.planner.cooldown;
    out << YAML::Key << "io_balance" << YAML::Value << d.planner.planner.io_balance;
    out << YAML::Key << "measured_compute_numerator" << YAML::Value << d.planner.planner.measured_compute_numerator;
    out << YAML::Key << "alpha0" << YAML::Value << d.planner.alpha0;
    out << YAML::EndMap;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

}  // namespace xpg
