// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "xpg/commands.hpp"

namespace {

struct Overrides {
    std::optional<uint64_t> layers, experts, hidden, intermediate, seed;
    std::optional<uint32_t> iterations, tokens, top_k, cooldown, step;
    std::optional<double> alpha, sim_alpha, theta, noise, alpha0;
    std::optional<std::string> io_balance;
    bool sequential = false;
    bool balanced = false;

    void apply(xpg::RunConfig& c) const {
        if (layers) c.model.spec.num_layers = *layers;
        if (experts) c.model.spec.experts_per_layer = *experts;
        if (hidden) c.model.spec.hidden_dim = *hidden;
        if (intermediate) c.model.spec.intermediate_dim = *intermediate;
        if (seed) c.model.seed = *seed;
        if (iterations) c.pipeline.iterations = *iterations;
        if (tokens) c.pipeline.tokens = *tokens;
        if (top_k) c.pipeline.top_k = *top_k;
        if (alpha) c.pipeline.alpha = *alpha;
        if (balanced) c.pipeline.alpha.reset();
        if (sequential) c.pipeline.sequential = true;
        if (sim_alpha) c.sim.alpha = *sim_alpha;
        if (noise) c.sim.load_noise = *noise;
        if (theta) c.planner.planner.theta = *theta;
        if (cooldown) c.planner.planner.cooldown = *cooldown;
        if (step) c.planner.planner.step = *step;
        if (alpha0) c.planner.alpha0 = *alpha0;
        if (io_balance) {
            if (*io_balance == "on") {
                c.planner.planner.io_balance = true;
            } else if (*io_balance == "off") {
                c.planner.planner.io_balance = false;
            } else {
                throw xpg::Error(xpg::ErrorCode::Validation, "--io-balance takes on|off");
            }
        }
    }
};

std::optional<std::pair<uint32_t, uint32_t>> parse_sabotage(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw xpg::Error(xpg::ErrorCode::Validation, "--sabotage takes ITER:LAYER");
    try {
        return std::make_pair(static_cast<uint32_t>(std::stoul(text.substr(0, colon))),
                              static_cast<uint32_t>(std::stoul(text.substr(colon + 1))));
    } catch (const std::exception&) {
        throw xpg::Error(xpg::ErrorCode::Validation, "--sabotage takes ITER:LAYER");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Expert paging toolkit: weight containers, streamed execution and residency simulation"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    Overrides ov;
    app.add_option("-c,--config", config_path, "YAML run configuration");
    app.add_option("--layers", ov.layers, "model.num_layers");
    app.add_option("--experts", ov.experts, "model.experts_per_layer");
    app.add_option("--hidden", ov.hidden, "model.hidden_dim");
    app.add_option("--intermediate", ov.intermediate, "model.intermediate_dim");
    app.add_option("--seed", ov.seed, "model.seed");
    app.add_option("--iterations", ov.iterations, "pipeline.iterations");
    app.add_option("--tokens", ov.tokens, "pipeline.tokens");
    app.add_option("--top-k", ov.top_k, "pipeline.top_k");
    app.add_option("--alpha", ov.alpha, "pipeline.alpha (device fraction for run)");
    app.add_flag("--balanced", ov.balanced, "bandwidth-proportional placement for run");
    app.add_flag("--sequential", ov.sequential, "single-context execution for run");
    app.add_option("--sim-alpha", ov.sim_alpha, "sim.alpha (fixed alpha for simulate)");
    app.add_option("--noise", ov.noise, "sim.load_noise");
    app.add_option("--theta", ov.theta, "planner.theta");
    app.add_option("--cooldown", ov.cooldown, "planner.cooldown");
    app.add_option("--step", ov.step, "planner.step");
    app.add_option("--alpha0", ov.alpha0, "planner.alpha0");
    app.add_option("--io-balance", ov.io_balance, "planner.io_balance (on|off)");

    bool force = false;
    std::string out_path, in_path, compressed_path, original_path, model_path, report_path, sabotage;
    uint32_t seeds = 1;

    auto* generate = app.add_subcommand("generate", "write a synthetic XPGW weight container");
    generate->add_option("-o,--out", out_path, "output path")->required();
    generate->add_flag("-f,--force", force, "overwrite existing output");

    auto* compress = app.add_subcommand("compress", "build the exponent code and write XPGC");
    compress->add_option("-i,--in", in_path, "XPGW input")->required();
    compress->add_option("-o,--out", out_path, "XPGC output")->required();
    compress->add_flag("-f,--force", force, "overwrite existing output");

    auto* verify = app.add_subcommand("verify", "decompress XPGC and byte-compare against XPGW");
    verify->add_option("compressed", compressed_path, "XPGC file")->required();
    verify->add_option("original", original_path, "XPGW file")->required();

    auto* run = app.add_subcommand("run", "streamed execution checked against the resident baseline");
    run->add_option("-m,--model", model_path, "XPGW input (default: generate from config)");
    run->add_option("-r,--report", report_path, "write the JSON run report here");
    run->add_option("--sabotage", sabotage, "skip the RAW wait of ITER:LAYER (negative control)");
    run->add_option("--seeds", seeds, "batch mode: number of consecutive seeds");
    run->add_flag("-f,--force", force, "overwrite existing report");

    auto* simulate = app.add_subcommand("simulate", "per-iteration decode simulation at a fixed alpha");
    auto* sweep = app.add_subcommand("sweep-alpha", "steady-state tau_load and tau_comp over the alpha grid");
    auto* plan = app.add_subcommand("plan", "closed-loop residency planner trace");
    for (auto* sub : {simulate, sweep, plan}) {
        sub->add_option("-o,--out", out_path, "CSV output (default: stdout)");
        sub->add_flag("-f,--force", force, "overwrite existing output");
    }

    app.add_subcommand("print-config", "print the default configuration as YAML");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return xpg::kExitValidation;
    }

    xpg::RunConfig config;
    try {
        if (!config_path.empty()) config = xpg::load_config(config_path);
        ov.apply(config);
    } catch (const xpg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return xpg::exit_code_for(e.code());
    }

    std::ostream& log = std::cout;
    const auto csv_out = out_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(out_path);
    if (app.got_subcommand("print-config")) {
        std::cout << xpg::default_config_yaml();
        return xpg::kExitOk;
    }
    if (*generate) return xpg::cmd_generate(config, out_path, force, log);
    if (*compress) return xpg::cmd_compress(in_path, out_path, force, log);
    if (*verify) return xpg::cmd_verify(compressed_path, original_path, log);
    if (*run) {
        xpg::RunOptions options;
        options.force = force;
        options.seeds = seeds;
        if (!model_path.empty()) options.model_path = model_path;
        if (!report_path.empty()) options.report_path = report_path;
        try {
            if (!sabotage.empty()) options.sabotage = parse_sabotage(sabotage);
        } catch (const xpg::Error& e) {
            std::cerr << "error: " << e.what() << "\n";
            return xpg::kExitValidation;
        }
        return xpg::cmd_run(config, options, log);
    }
    if (*simulate) return xpg::cmd_simulate(config, csv_out, force, log);
    if (*sweep) return xpg::cmd_sweep(config, csv_out, force, log);
    if (*plan) return xpg::cmd_plan(config, csv_out, force, log);
    return xpg::kExitValidation;
}
