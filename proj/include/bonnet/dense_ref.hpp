#pragma once

#include <algorithm>
#include <array>
#include <vector>

#include "bonnet/network.hpp"

// Dense reference forward: the same U-Net weights applied by zero-padded
// dense convolution over the full window grid, with features masked back to
// the active set after every convolution so results agree with the sparse
// engine at active sites. Convolutions visit every grid site — this is the
// point: it is the benchmark foil and correctness oracle, not a fast path.

namespace bonnet {

namespace dense_detail {

template <typename T>
struct DenseGrid {
    std::array<int32_t, 3> extent{0, 0, 0};
    int channels = 0;
    std::vector<T> data; // site-major, channel fastest

    int64_t sites() const { return int64_t(extent[0]) * extent[1] * extent[2]; }
    int64_t site(int32_t x, int32_t y, int32_t z) const {
        return (int64_t(z) * extent[1] + y) * extent[0] + x;
    }
    T* at(int64_t s) { return data.data() + size_t(s) * size_t(channels); }
    const T* at(int64_t s) const { return data.data() + size_t(s) * size_t(channels); }

    static DenseGrid zeros(const std::array<int32_t, 3>& extent, int channels) {
        DenseGrid g;
        g.extent = extent;
        g.channels = channels;
        g.data.assign(size_t(int64_t(extent[0]) * extent[1] * extent[2]) * size_t(channels), T(0));
        return g;
    }
};

using Mask = std::vector<uint8_t>; // one flag per site

template <typename T>
void apply_mask(DenseGrid<T>& g, const Mask& mask) {
    for (int64_t s = 0; s < g.sites(); ++s)
        if (!mask[size_t(s)]) {
            T* row = g.at(s);
            std::fill(row, row + g.channels, T(0));
        }
}

// 3^3 stride-1 zero-padded convolution at every site.
template <typename T>
DenseGrid<T> conv_subm(const DenseGrid<T>& in, const ConvParams<T>& p) {
    DenseGrid<T> out = DenseGrid<T>::zeros(in.extent, p.cout);
    const auto& e = in.extent;
    for (int32_t z = 0; z < e[2]; ++z)
        for (int32_t y = 0; y < e[1]; ++y)
            for (int32_t x = 0; x < e[0]; ++x) {
                T* o = out.at(out.site(x, y, z));
                for (int co = 0; co < p.cout; ++co) o[co] = p.bias.empty() ? T(0) : p.bias[size_t(co)];
                int k = 0;
                for (int dz = -1; dz <= 1; ++dz)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx, ++k) {
                            const int32_t nx = x + dx, ny = y + dy, nz = z + dz;
                            if (nx < 0 || ny < 0 || nz < 0 || nx >= e[0] || ny >= e[1] || nz >= e[2])
                                continue;
                            const T* src = in.at(in.site(nx, ny, nz));
                            const T* wk = p.w_at(k);
                            for (int ci = 0; ci < p.cin; ++ci) {
                                const T a = src[ci];
                                const T* wrow = wk + size_t(ci) * size_t(p.cout);
                                for (int co = 0; co < p.cout; ++co) o[co] += a * wrow[co];
                            }
                        }
            }
    return out;
}

// 2^3 stride-2 zero-padded convolution at every coarse site.
template <typename T>
DenseGrid<T> conv_strided(const DenseGrid<T>& in, const ConvParams<T>& p,
                          const std::array<int32_t, 3>& coarse_extent) {
    DenseGrid<T> out = DenseGrid<T>::zeros(coarse_extent, p.cout);
    const auto& e = in.extent;
    for (int32_t z = 0; z < coarse_extent[2]; ++z)
        for (int32_t y = 0; y < coarse_extent[1]; ++y)
            for (int32_t x = 0; x < coarse_extent[0]; ++x) {
                T* o = out.at(out.site(x, y, z));
                for (int co = 0; co < p.cout; ++co) o[co] = p.bias.empty() ? T(0) : p.bias[size_t(co)];
                int k = 0;
                for (int dz = 0; dz <= 1; ++dz)
                    for (int dy = 0; dy <= 1; ++dy)
                        for (int dx = 0; dx <= 1; ++dx, ++k) {
                            const int32_t fx = 2 * x + dx, fy = 2 * y + dy, fz = 2 * z + dz;
                            if (fx >= e[0] || fy >= e[1] || fz >= e[2]) continue;
                            const T* src = in.at(in.site(fx, fy, fz));
                            const T* wk = p.w_at(k);
                            for (int ci = 0; ci < p.cin; ++ci) {
                                const T a = src[ci];
                                const T* wrow = wk + size_t(ci) * size_t(p.cout);
                                for (int co = 0; co < p.cout; ++co) o[co] += a * wrow[co];
                            }
                        }
            }
    return out;
}

// Transposed stride-2 convolution: every fine site reads its unique parent.
template <typename T>
DenseGrid<T> conv_inverse(const DenseGrid<T>& in, const ConvParams<T>& p,
                          const std::array<int32_t, 3>& fine_extent) {
    DenseGrid<T> out = DenseGrid<T>::zeros(fine_extent, p.cout);
    for (int32_t z = 0; z < fine_extent[2]; ++z)
        for (int32_t y = 0; y < fine_extent[1]; ++y)
            for (int32_t x = 0; x < fine_extent[0]; ++x) {
                T* o = out.at(out.site(x, y, z));
                const int k = (z % 2) * 4 + (y % 2) * 2 + (x % 2);
                const T* src = in.at(in.site(x / 2, y / 2, z / 2));
                const T* wk = p.w_at(k);
                for (int co = 0; co < p.cout; ++co) o[co] = p.bias.empty() ? T(0) : p.bias[size_t(co)];
                for (int ci = 0; ci < p.cin; ++ci) {
                    const T a = src[ci];
                    const T* wrow = wk + size_t(ci) * size_t(p.cout);
                    for (int co = 0; co < p.cout; ++co) o[co] += a * wrow[co];
                }
            }
    return out;
}

// Instance norm over the active sites only (matching the sparse statistics),
// written back at active sites; inactive sites stay zero.
template <typename T>
void norm_masked(DenseGrid<T>& g, const Mask& mask, const NormParams<T>& p) {
    const int c = g.channels;
    std::vector<double> mean(size_t(c), 0.0), var(size_t(c), 0.0);
    int64_t n = 0;
    for (int64_t s = 0; s < g.sites(); ++s) {
        if (!mask[size_t(s)]) continue;
        ++n;
        const T* row = g.at(s);
        for (int j = 0; j < c; ++j) mean[size_t(j)] += double(row[j]);
    }
    require(n >= 1, Err::EmptyTensor, "dense norm over empty mask");
    for (int j = 0; j < c; ++j) mean[size_t(j)] /= double(n);
    for (int64_t s = 0; s < g.sites(); ++s) {
        if (!mask[size_t(s)]) continue;
        const T* row = g.at(s);
        for (int j = 0; j < c; ++j) {
            const double d = double(row[j]) - mean[size_t(j)];
            var[size_t(j)] += d * d;
        }
    }
    std::vector<double> inv_std(static_cast<size_t>(c));
    for (int j = 0; j < c; ++j)
        inv_std[size_t(j)] = 1.0 / std::sqrt(var[size_t(j)] / double(n) + double(p.eps));
    for (int64_t s = 0; s < g.sites(); ++s) {
        if (!mask[size_t(s)]) continue;
        T* row = g.at(s);
        for (int j = 0; j < c; ++j)
            row[j] = T(double(p.gamma[size_t(j)]) *
                           ((double(row[j]) - mean[size_t(j)]) * inv_std[size_t(j)]) +
                       double(p.beta[size_t(j)]));
    }
}

template <typename T>
void relu_all(DenseGrid<T>& g, T slope) {
    for (T& v : g.data)
        if (v < T(0)) v *= slope;
}

} // namespace dense_detail

// Logits rows aligned with `coords` order; `extent` is the window's dense
// shape (coords must lie inside it).
template <typename T>
Matrix<T> dense_reference_forward(const std::vector<VoxelCoord>& coords, const Matrix<T>& features,
                                  const UNetParams<T>& params, const UNetConfig& cfg,
                                  const std::array<int32_t, 3>& extent) {
    using dense_detail::DenseGrid;
    using dense_detail::Mask;
    cfg.validate();
    require(!coords.empty(), Err::EmptyTensor, "dense forward over empty window");
    require(features.rows == int64_t(coords.size()) && features.cols == 1, Err::ShapeMismatch,
            "dense forward expects one feature channel per coordinate");

    const int L = cfg.levels;
    const int B = cfg.blocks_per_level;
    const T slope = T(cfg.leaky_slope);

    // Per-level extents and active masks (floor-halved supports).
    std::vector<std::array<int32_t, 3>> extents(static_cast<size_t>(L));
    extents[0] = extent;
    for (int l = 1; l < L; ++l)
        for (int d = 0; d < 3; ++d)
            extents[size_t(l)][size_t(d)] = (extents[size_t(l) - 1][size_t(d)] + 1) / 2;

    std::vector<Mask> masks(static_cast<size_t>(L));
    {
        std::vector<VoxelCoord> level = coords;
        for (int l = 0; l < L; ++l) {
            const auto& e = extents[size_t(l)];
            Mask m(size_t(int64_t(e[0]) * e[1] * e[2]), 0);
            for (const VoxelCoord& c : level) {
                require(c.x >= 0 && c.y >= 0 && c.z >= 0 && c.x < e[0] && c.y < e[1] && c.z < e[2],
                        Err::ShapeMismatch, "coordinate outside the window extent");
                m[size_t((int64_t(c.z) * e[1] + c.y) * e[0] + c.x)] = 1;
            }
            masks[size_t(l)] = std::move(m);
            if (l + 1 < L) {
                for (VoxelCoord& c : level) c = floor_half(c);
                std::sort(level.begin(), level.end(), zyx_less);
                level.erase(std::unique(level.begin(), level.end()), level.end());
            }
        }
    }

    DenseGrid<T> x = DenseGrid<T>::zeros(extent, 1);
    for (size_t i = 0; i < coords.size(); ++i)
        x.at(x.site(coords[i].x, coords[i].y, coords[i].z))[0] = features.at(int64_t(i), 0);

    auto block = [&](DenseGrid<T>& g, const BlockParams<T>& bp, const Mask& mask) {
        g = dense_detail::conv_subm(g, bp.conv);
        dense_detail::apply_mask(g, mask);
        dense_detail::norm_masked(g, mask, bp.norm);
        dense_detail::relu_all(g, slope);
    };

    std::vector<DenseGrid<T>> skips(size_t(L - 1));
    for (int l = 0; l < L; ++l) {
        for (int b = 0; b < B; ++b) block(x, params.encoder[size_t(l)][size_t(b)], masks[size_t(l)]);
        if (l + 1 < L) {
            skips[size_t(l)] = x;
            x = dense_detail::conv_strided(x, params.down[size_t(l)].conv, extents[size_t(l) + 1]);
            dense_detail::apply_mask(x, masks[size_t(l) + 1]);
            dense_detail::norm_masked(x, masks[size_t(l) + 1], params.down[size_t(l)].norm);
            dense_detail::relu_all(x, slope);
        }
    }
    for (int l = L - 2; l >= 0; --l) {
        x = dense_detail::conv_inverse(x, params.up[size_t(l)].conv, extents[size_t(l)]);
        dense_detail::apply_mask(x, masks[size_t(l)]);
        dense_detail::norm_masked(x, masks[size_t(l)], params.up[size_t(l)].norm);
        dense_detail::relu_all(x, slope);

        DenseGrid<T> cat = DenseGrid<T>::zeros(extents[size_t(l)], x.channels + skips[size_t(l)].channels);
        for (int64_t s = 0; s < cat.sites(); ++s) {
            T* o = cat.at(s);
            const T* d = x.at(s);
            const T* e = skips[size_t(l)].at(s);
            for (int j = 0; j < x.channels; ++j) o[j] = d[j];
            for (int j = 0; j < skips[size_t(l)].channels; ++j) o[x.channels + j] = e[j];
        }
        x = std::move(cat);
        for (int b = 0; b < B; ++b) block(x, params.decoder[size_t(l)][size_t(b)], masks[size_t(l)]);
    }

    // MLP head at every site (dense work), gathered at the active coords.
    auto affine_all = [](const DenseGrid<T>& g, const AffineParams<T>& p) {
        DenseGrid<T> out = DenseGrid<T>::zeros(g.extent, p.cout);
        for (int64_t s = 0; s < g.sites(); ++s) {
            const T* in_row = g.at(s);
            T* o = out.at(s);
            for (int co = 0; co < p.cout; ++co) o[co] = p.bias[size_t(co)];
            for (int ci = 0; ci < p.cin; ++ci) {
                const T a = in_row[ci];
                const T* wrow = p.weights.data() + size_t(ci) * size_t(p.cout);
                for (int co = 0; co < p.cout; ++co) o[co] += a * wrow[co];
            }
        }
        return out;
    };
    x = affine_all(x, params.fc0);
    dense_detail::relu_all(x, slope);
    x = affine_all(x, params.fc1);

    Matrix<T> logits(int64_t(coords.size()), cfg.num_classes);
    for (size_t i = 0; i < coords.size(); ++i) {
        const T* src = x.at(x.site(coords[i].x, coords[i].y, coords[i].z));
        T* dst = logits.row(int64_t(i));
        for (int j = 0; j < cfg.num_classes; ++j) dst[j] = src[j];
    }
    return logits;
}

} // namespace bonnet
