// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <utility>

#include "xpg/config.hpp"
#include "xpg/error.hpp"

namespace xpg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitCorrectness = 2;
inline constexpr int kExitIo = 3;

int exit_code_for(ErrorCode code);

struct RunOptions {
    std::optional<std::filesystem::path> model_path;   // XPGW; generated from config when empty
    std::optional<std::filesystem::path> report_path;  // JSON RunReport
    std::optional<std::pair<uint32_t, uint32_t>> sabotage;
    uint32_t seeds = 1;  // batch mode: consecutive seeds from model.seed
    bool force = false;
};

// Each command writes human-readable status to `log` and returns an exit code.
// Errors are caught and mapped through exit_code_for.
int cmd_generate(const RunConfig& config, const std::filesystem::path& out, bool force, std::ostream& log);
int cmd_compress(const std::filesystem::path& in, const std::filesystem::path& out, bool force, std::ostream& log);
int cmd_verify(const std::filesystem::path& compressed, const std::filesystem::path& original, std::ostream& log);
int cmd_run(const RunConfig& config, const RunOptions& options, std::ostream& log);
// CSV goes to `out` when given, else to `log`.
int cmd_simulate(const RunConfig& config, const std::optional<std::filesystem::path>& out, bool force,
                 std::ostream& log);
int cmd_sweep(const RunConfig& config, const std::optional<std::filesystem::path>& out, bool force,
              std::ostream& log);
int cmd_plan(const RunConfig& config, const std::optional<std::filesystem::path>& out, bool force,
             std::ostream& log);

}  // namespace xpg
