#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ntku {

enum class ErrorCode {
    DimensionMismatch,
    NotSymmetric,
    SingularBeyondPolicy,
    NonFinite,
    InvalidStrategy,
    InvalidConfig,
    BudgetExceeded,
    BadMagic,
    TruncatedFile,
    LabelRange,
    UnknownClass,
    EmptySplit,
    BadFormat,
    Io,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::NotSymmetric: return "NotSymmetric";
        case ErrorCode::SingularBeyondPolicy: return "SingularBeyondPolicy";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::InvalidStrategy: return "InvalidStrategy";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::BudgetExceeded: return "BudgetExceeded";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::TruncatedFile: return "TruncatedFile";
        case ErrorCode::LabelRange: return "LabelRange";
        case ErrorCode::UnknownClass: return "UnknownClass";
        case ErrorCode::EmptySplit: return "EmptySplit";
        case ErrorCode::BadFormat: return "BadFormat";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

/// Every failure in the library surfaces as this exception; `code()` is the
/// machine-checkable part, `what()` carries the context.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        fail(code, message);
    }
}

}  // namespace ntku
