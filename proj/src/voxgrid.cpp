#include "bonnet/voxgrid.hpp"

#include <algorithm>
#include <string>

namespace bonnet {

CoordIndex build_coord_index(std::span<const VoxelCoord> coords) {
    CoordIndex index;
    index.map_.reserve(coords.size() * 2);
    for (size_t i = 0; i < coords.size(); ++i) {
        auto [it, inserted] = index.map_.emplace(coords[i], int32_t(i));
        if (!inserted)
            fail(Err::DuplicateCoordinate,
                 "coordinate (" + std::to_string(coords[i].x) + "," + std::to_string(coords[i].y) +
                     "," + std::to_string(coords[i].z) + ") listed twice");
    }
    return index;
}

KernelSpec KernelSpec::subm3() {
    KernelSpec k;
    k.size = {3, 3, 3};
    k.stride = 1;
    k.offsets.reserve(27);
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) k.offsets.push_back({dx, dy, dz});
    return k;
}

KernelSpec KernelSpec::down2() {
    KernelSpec k;
    k.size = {2, 2, 2};
    k.stride = 2;
    k.offsets.reserve(8);
    for (int dz = 0; dz <= 1; ++dz)
        for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) k.offsets.push_back({dx, dy, dz});
    return k;
}

Rulebook build_rulebook_subm(std::span<const VoxelCoord> coords, const CoordIndex& index,
                             const KernelSpec& kernel) {
    require(kernel.stride == 1, Err::InvalidConfig, "submanifold kernel must have stride 1");
    for (int s : kernel.size)
        require(s % 2 == 1, Err::InvalidConfig, "submanifold kernel size must be odd per axis");

    Rulebook rb;
    rb.kernel = kernel;
    rb.in_count = int64_t(coords.size());
    rb.out_count = int64_t(coords.size());
    rb.pairs.assign(kernel.offsets.size(), {});

    // Iterating outputs in row order keeps each per-offset list sorted by
    // (out_row, in_row) without an explicit sort: at most one neighbor exists
    // per (offset, output).
    for (size_t k = 0; k < kernel.offsets.size(); ++k) {
        const VoxelCoord d = kernel.offsets[k];
        auto& list = rb.pairs[k];
        for (size_t o = 0; o < coords.size(); ++o) {
            if (auto in = index.lookup(coords[o] + d))
                list.push_back({*in, int32_t(o)});
        }
    }
    return rb;
}

std::pair<std::vector<VoxelCoord>, Rulebook> build_downsample(std::span<const VoxelCoord> coords,
                                                              const KernelSpec& kernel) {
    require(kernel.stride == 2, Err::InvalidConfig, "downsample kernel must have stride 2");
    for (int s : kernel.size)
        require(s == 2, Err::InvalidConfig, "downsample kernel size must be 2 per axis");

    std::vector<VoxelCoord> coarse;
    coarse.reserve(coords.size());
    for (const auto& c : coords) coarse.push_back(floor_half(c));
    std::sort(coarse.begin(), coarse.end(), zyx_less);
    coarse.erase(std::unique(coarse.begin(), coarse.end()), coarse.end());

    const CoordIndex coarse_index = build_coord_index(coarse);

    Rulebook rb;
    rb.kernel = kernel;
    rb.in_count = int64_t(coords.size());
    rb.out_count = int64_t(coarse.size());
    rb.pairs.assign(kernel.offsets.size(), {});

    for (size_t i = 0; i < coords.size(); ++i) {
        const VoxelCoord parent = floor_half(coords[i]);
        const VoxelCoord d = coords[i] - VoxelCoord{2 * parent.x, 2 * parent.y, 2 * parent.z};
        size_t k = size_t(d.z) * 4 + size_t(d.y) * 2 + size_t(d.x); // offsets are (dz,dy,dx)-ordered
        rb.pairs[k].push_back({int32_t(i), *coarse_index.lookup(parent)});
    }
    for (auto& list : rb.pairs)
        std::sort(list.begin(), list.end(), [](const IndexPair& a, const IndexPair& b) {
            if (a.out_row != b.out_row) return a.out_row < b.out_row;
            return a.in_row < b.in_row;
        });

    return {std::move(coarse), std::move(rb)};
}

Rulebook transpose_rulebook(const Rulebook& rb, int64_t fine_count) {
    require(fine_count == rb.in_count, Err::ShapeMismatch,
            "fine support size " + std::to_string(fine_count) + " != rulebook input count " +
                std::to_string(rb.in_count));

    Rulebook out;
    out.kernel = rb.kernel;
    out.in_count = rb.out_count;
    out.out_count = rb.in_count;
    out.pairs.assign(rb.pairs.size(), {});
    for (size_t k = 0; k < rb.pairs.size(); ++k) {
        auto& list = out.pairs[k];
        list.reserve(rb.pairs[k].size());
        for (const auto& p : rb.pairs[k]) list.push_back({p.out_row, p.in_row});
        std::sort(list.begin(), list.end(), [](const IndexPair& a, const IndexPair& b) {
            if (a.out_row != b.out_row) return a.out_row < b.out_row;
            return a.in_row < b.in_row;
        });
    }
    return out;
}

} // namespace bonnet
