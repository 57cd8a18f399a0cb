#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace odestim {

enum class ErrorKind {
    NonFiniteState,
    EmptyTrajectory,
    ShapeMismatch,
    LengthMismatch,
    NonPositiveDelta,
    NonPositiveSigma,
    BadHyperparameter,
    NonFiniteGradient,
    NonFiniteLoss,
    UnknownSystem,
    DimensionMismatch,
    EmptyResults,
    ParseError,
    ConfigError,
    IoError,
};

inline constexpr std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::NonFiniteState: return "NonFiniteState";
    case ErrorKind::EmptyTrajectory: return "EmptyTrajectory";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::NonPositiveDelta: return "NonPositiveDelta";
    case ErrorKind::NonPositiveSigma: return "NonPositiveSigma";
    case ErrorKind::BadHyperparameter: return "BadHyperparameter";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::UnknownSystem: return "UnknownSystem";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::EmptyResults: return "EmptyResults";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

/// Library exception. `kind()` is the machine-readable category the CLI
/// prints on stderr.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

} // namespace odestim
