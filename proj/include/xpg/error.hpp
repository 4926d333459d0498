// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xpg {

enum class ErrorCode {
    OutOfRange,
    Validation,
    Io,
    CorruptFile,
    // paged tensor
    DoubleMap,
    PoolExhausted,
    NotMapped,
    IllegalTransition,
    PageFault,
    // codec
    OddLength,
    EmptyHistogram,
    SymbolNotInTable,
    TruncatedStream,
    InvalidCode,
    // storage
    CapacityExceeded,
    BackendMiss,
    // simulation / pipeline
    InfeasibleConfig,
    Aborted,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace xpg
