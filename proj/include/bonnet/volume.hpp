#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bonnet/error.hpp"

namespace bonnet {

enum class ValueKind : uint8_t {
    HuI16,     // signed 16-bit Hounsfield units
    LabelsU16, // unsigned 16-bit class ids
};

const char* value_kind_name(ValueKind kind);
ValueKind value_kind_from_name(const std::string& name);

// Dense grid geometry. Linear layout: index = z*(Y*X) + y*X + x (x fastest).
struct VolumeMeta {
    std::array<int32_t, 3> shape{0, 0, 0};            // X, Y, Z
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};  // per axis
    ValueKind kind = ValueKind::HuI16;

    int64_t voxel_count() const {
        return int64_t(shape[0]) * int64_t(shape[1]) * int64_t(shape[2]);
    }

    void validate() const {
        for (int32_t s : shape)
            require(s >= 1, Err::InvalidConfig, "volume shape components must be >= 1");
        for (double s : spacing_mm)
            require(s > 0.0, Err::InvalidConfig, "voxel spacing must be positive");
    }
};

template <typename T>
struct Volume {
    VolumeMeta meta;
    std::vector<T> data;

    int64_t index(int32_t x, int32_t y, int32_t z) const {
        return (int64_t(z) * meta.shape[1] + y) * meta.shape[0] + x;
    }
    T at(int32_t x, int32_t y, int32_t z) const { return data[size_t(index(x, y, z))]; }
    T& at(int32_t x, int32_t y, int32_t z) { return data[size_t(index(x, y, z))]; }

    void check_consistent() const {
        meta.validate();
        require(int64_t(data.size()) == meta.voxel_count(), Err::SizeMismatch,
                "payload length != shape product");
    }
};

using HuVolume = Volume<int16_t>;
using LabelVolume = Volume<uint16_t>;

} // namespace bonnet
