#include "bonnet/error.hpp"

namespace bonnet {

const char* err_name(Err kind) {
    switch (kind) {
        case Err::DuplicateCoordinate: return "DuplicateCoordinate";
        case Err::ShapeMismatch:       return "ShapeMismatch";
        case Err::SupportMismatch:     return "SupportMismatch";
        case Err::EmptyTensor:         return "EmptyTensor";
        case Err::MissingCache:        return "MissingCache";
        case Err::InvalidConfig:       return "InvalidConfig";
        case Err::DepthExceedsExtent:  return "DepthExceedsExtent";
        case Err::LabelOutOfRange:     return "LabelOutOfRange";
        case Err::InvalidProbability:  return "InvalidProbability";
        case Err::DegenerateStats:     return "DegenerateStats";
        case Err::OccupancyExceeded:   return "OccupancyExceeded";
        case Err::UncoveredVoxel:      return "UncoveredVoxel";
        case Err::BadMagic:            return "BadMagic";
        case Err::VersionMismatch:     return "VersionMismatch";
        case Err::TruncatedFile:       return "TruncatedFile";
        case Err::ChecksumMismatch:    return "ChecksumMismatch";
        case Err::ManifestMissing:     return "ManifestMissing";
        case Err::SizeMismatch:        return "SizeMismatch";
        case Err::UnknownKind:         return "UnknownKind";
        case Err::UnsupportedDatatype: return "UnsupportedDatatype";
        case Err::UnsupportedDim:      return "UnsupportedDim";
        case Err::IoError:             return "IoError";
    }
    return "UnknownError";
}

} // namespace bonnet
