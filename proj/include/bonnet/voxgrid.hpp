#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "bonnet/error.hpp"

namespace bonnet {

// ---------------------------------------------------------------------------
// Coordinates
// ---------------------------------------------------------------------------

struct VoxelCoord {
    int32_t x = 0;
    int32_t y = 0;
    int32_t z = 0;

    bool operator==(const VoxelCoord&) const = default;

    VoxelCoord operator+(const VoxelCoord& o) const { return {x + o.x, y + o.y, z + o.z}; }
    VoxelCoord operator-(const VoxelCoord& o) const { return {x - o.x, y - o.y, z - o.z}; }
};

// Canonical coordinate order: scan order (z, then y, then x), matching the
// dense linear layout z*(Y*X) + y*X + x.
inline bool zyx_less(const VoxelCoord& a, const VoxelCoord& b) {
    if (a.z != b.z) return a.z < b.z;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
}

// Floor division toward -inf, so downsampling is translation-consistent for
// negative coordinates.
inline int32_t floor_div2(int32_t v) {
    return v >= 0 ? v / 2 : -((-v + 1) / 2);
}

inline VoxelCoord floor_half(const VoxelCoord& c) {
    return {floor_div2(c.x), floor_div2(c.y), floor_div2(c.z)};
}

struct CoordHash {
    size_t operator()(const VoxelCoord& c) const {
        uint64_t h = uint64_t(uint32_t(c.x));
        h = h * 0x9e3779b97f4a7c15ull + uint64_t(uint32_t(c.y));
        h = (h ^ (h >> 31)) * 0xbf58476d1ce4e5b9ull + uint64_t(uint32_t(c.z));
        h ^= h >> 29;
        return size_t(h);
    }
};

// ---------------------------------------------------------------------------
// Feature storage
// ---------------------------------------------------------------------------

// Row-major dense matrix; rows are voxels, columns are channels.
template <typename T>
struct Matrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(int64_t r, int64_t c, T fill = T(0)) : rows(r), cols(c), data(size_t(r) * size_t(c), fill) {}

    T* row(int64_t i) { return data.data() + size_t(i) * size_t(cols); }
    const T* row(int64_t i) const { return data.data() + size_t(i) * size_t(cols); }
    T& at(int64_t i, int64_t j) { return data[size_t(i) * size_t(cols) + size_t(j)]; }
    const T& at(int64_t i, int64_t j) const { return data[size_t(i) * size_t(cols) + size_t(j)]; }

    bool operator==(const Matrix&) const = default;
};

// Active voxels plus per-voxel feature rows and optional class labels.
template <typename T>
struct SparseTensor {
    std::vector<VoxelCoord> coords;
    Matrix<T> features;
    std::optional<std::vector<uint16_t>> labels;

    int64_t size() const { return int64_t(coords.size()); }
    int64_t channels() const { return features.cols; }

    void check_consistent() const {
        require(features.rows == int64_t(coords.size()), Err::ShapeMismatch,
                "feature row count != coordinate count");
        if (labels)
            require(labels->size() == coords.size(), Err::ShapeMismatch,
                    "label count != coordinate count");
    }
};

using SparseTensorF = SparseTensor<float>;
using SparseTensorD = SparseTensor<double>;

template <typename To, typename From>
SparseTensor<To> cast_tensor(const SparseTensor<From>& st) {
    SparseTensor<To> out;
    out.coords = st.coords;
    out.features = Matrix<To>(st.features.rows, st.features.cols);
    for (size_t i = 0; i < st.features.data.size(); ++i)
        out.features.data[i] = To(st.features.data[i]);
    out.labels = st.labels;
    return out;
}

// ---------------------------------------------------------------------------
// Coordinate index
// ---------------------------------------------------------------------------

// Bijection coordinate -> row. Realizes the support indicator: a missed
// lookup means the voxel is inactive.
class CoordIndex {
public:
    CoordIndex() = default;

    std::optional<int32_t> lookup(const VoxelCoord& c) const {
        auto it = map_.find(c);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

    size_t size() const { return map_.size(); }

    friend CoordIndex build_coord_index(std::span<const VoxelCoord> coords);

private:
    std::unordered_map<VoxelCoord, int32_t, CoordHash> map_;
};

CoordIndex build_coord_index(std::span<const VoxelCoord> coords);

// ---------------------------------------------------------------------------
// Kernels and rulebooks
// ---------------------------------------------------------------------------

struct KernelSpec {
    std::array<int, 3> size{3, 3, 3};
    int stride = 1;
    // Covers exactly the kernel volume, lexicographic by (dz, dy, dx).
    std::vector<VoxelCoord> offsets;

    int volume() const { return int(offsets.size()); }

    // 3x3x3 stride-1 kernel for submanifold convolutions.
    static KernelSpec subm3();
    // 2x2x2 stride-2 kernel for downsampling and its inverse.
    static KernelSpec down2();
};

struct IndexPair {
    int32_t in_row;
    int32_t out_row;

    bool operator==(const IndexPair&) const = default;
};

// Per-kernel-offset (input row, output row) lists: the nonzero terms of a
// sparse convolution, made explicit. Pair order within an offset is
// (out_row, in_row) ascending, so forward passes are bit-reproducible.
struct Rulebook {
    KernelSpec kernel;
    std::vector<std::vector<IndexPair>> pairs; // one list per kernel offset
    int64_t in_count = 0;
    int64_t out_count = 0;

    int64_t pair_count() const {
        int64_t n = 0;
        for (const auto& p : pairs) n += int64_t(p.size());
        return n;
    }
};

// Submanifold rulebook: output support equals input support; a pair
// (row(x+d), row(x)) exists for every active x and offset d with x+d active.
Rulebook build_rulebook_subm(std::span<const VoxelCoord> coords, const CoordIndex& index,
                             const KernelSpec& kernel);

// Stride-2 downsampling: coarse support is the floor-halved image of the fine
// support, deduplicated and sorted in scan order; each fine voxel contributes
// one pair under the offset c - 2*floor(c/2).
std::pair<std::vector<VoxelCoord>, Rulebook> build_downsample(std::span<const VoxelCoord> coords,
                                                              const KernelSpec& kernel);

// Role-swapped downsample rulebook: coarse rows become inputs, the recorded
// fine support becomes the output. `fine_count` must match the rulebook's
// recorded fine side.
Rulebook transpose_rulebook(const Rulebook& rb, int64_t fine_count);

inline Rulebook transpose_rulebook(const Rulebook& rb, std::span<const VoxelCoord> fine_coords) {
    return transpose_rulebook(rb, int64_t(fine_coords.size()));
}

} // namespace bonnet
