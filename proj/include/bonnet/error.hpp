#pragma once

#include <stdexcept>
#include <string>

namespace bonnet {

// Every failure mode the engine can report. Tests match on the kind, not
// on message text.
enum class Err {
    DuplicateCoordinate,
    ShapeMismatch,
    SupportMismatch,
    EmptyTensor,
    MissingCache,
    InvalidConfig,
    DepthExceedsExtent,
    LabelOutOfRange,
    InvalidProbability,
    DegenerateStats,
    OccupancyExceeded,
    UncoveredVoxel,
    BadMagic,
    VersionMismatch,
    TruncatedFile,
    ChecksumMismatch,
    ManifestMissing,
    SizeMismatch,
    UnknownKind,
    UnsupportedDatatype,
    UnsupportedDim,
    IoError,
};

const char* err_name(Err kind);

class Error : public std::runtime_error {
public:
    Error(Err kind, const std::string& msg)
        : std::runtime_error(std::string(err_name(kind)) + ": " + msg), kind_(kind) {}

    Err kind() const { return kind_; }

private:
    Err kind_;
};

[[noreturn]] inline void fail(Err kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool ok, Err kind, const std::string& msg) {
    if (!ok) fail(kind, msg);
}

} // namespace bonnet
