#pragma once

#include <stdexcept>
#include <string>

namespace liqa {

enum class ErrorKind {
    InvalidBounds,
    ShapeMismatch,
    TimestepOutOfRange,
    TimestepOrder,
    Underflow,
    InvalidConfig,
    Tokenization,
    Validation,
    TopologyMismatch,
    MissingCheckpoint,
    CorruptArchive,
    VersionMismatch,
    MissingKey,
    Parse,
    Io,
    Degenerate,
    NanLoss,
    EmptyManifest,
    Decode,
    Unsupported,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::InvalidBounds: return "invalid-bounds";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::TimestepOutOfRange: return "timestep-out-of-range";
    case ErrorKind::TimestepOrder: return "timestep-order";
    case ErrorKind::Underflow: return "timestep-underflow";
    case ErrorKind::InvalidConfig: return "invalid-config";
    case ErrorKind::Tokenization: return "tokenization";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::TopologyMismatch: return "topology-mismatch";
    case ErrorKind::MissingCheckpoint: return "missing-checkpoint";
    case ErrorKind::CorruptArchive: return "corrupt-archive";
    case ErrorKind::VersionMismatch: return "version-mismatch";
    case ErrorKind::MissingKey: return "missing-key";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Io: return "io";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::NanLoss: return "nan-loss";
    case ErrorKind::EmptyManifest: return "empty-manifest";
    case ErrorKind::Decode: return "decode";
    case ErrorKind::Unsupported: return "unsupported";
    }
    return "unknown";
}

/// Every failure raised by the library carries a kind so callers and tests
/// can branch on it without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

} // namespace liqa
