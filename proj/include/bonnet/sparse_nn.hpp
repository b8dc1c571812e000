#pragma once

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "bonnet/voxgrid.hpp"

namespace bonnet {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// One weight matrix per kernel offset, offsets in KernelSpec order.
template <typename T>
struct ConvParams {
    int kvol = 0;
    int cin = 0;
    int cout = 0;
    std::vector<T> weights; // [kvol][cin][cout] row-major
    std::vector<T> bias;    // cout entries, or empty for no bias

    const T* w_at(int k) const { return weights.data() + size_t(k) * size_t(cin) * size_t(cout); }
    T* w_at(int k) { return weights.data() + size_t(k) * size_t(cin) * size_t(cout); }

    void check_shape() const {
        require(weights.size() == size_t(kvol) * size_t(cin) * size_t(cout), Err::ShapeMismatch,
                "conv weight count != kvol*cin*cout");
        require(bias.empty() || bias.size() == size_t(cout), Err::ShapeMismatch,
                "conv bias length != cout");
    }

    void check_finite() const {
        check_shape();
        for (T v : weights)
            require(std::isfinite(double(v)), Err::InvalidConfig, "non-finite conv weight");
        for (T v : bias)
            require(std::isfinite(double(v)), Err::InvalidConfig, "non-finite conv bias");
    }
};

template <typename T>
struct NormParams {
    std::vector<T> gamma;
    std::vector<T> beta;
    T eps = T(1e-5);

    void check_shape(int64_t channels) const {
        require(int64_t(gamma.size()) == channels && int64_t(beta.size()) == channels,
                Err::ShapeMismatch, "norm parameter length != channel count");
        require(eps > T(0), Err::InvalidConfig, "norm eps must be positive");
    }
};

// Per-row affine map, used by the MLP head.
template <typename T>
struct AffineParams {
    int cin = 0;
    int cout = 0;
    std::vector<T> weights; // [cin][cout] row-major
    std::vector<T> bias;    // cout

    void check_shape() const {
        require(weights.size() == size_t(cin) * size_t(cout), Err::ShapeMismatch,
                "affine weight count != cin*cout");
        require(bias.size() == size_t(cout), Err::ShapeMismatch, "affine bias length != cout");
    }
};

// ---------------------------------------------------------------------------
// Backward-pass caches
// ---------------------------------------------------------------------------

enum class LayerKind { SubmConv, StridedConv, InverseConv, InstanceNorm, LeakyRelu, Concat, Affine, Head };

template <typename T>
struct ConvCache {
    Matrix<T> input;
    const Rulebook* rb = nullptr;
    const ConvParams<T>* params = nullptr;
    int64_t out_rows = 0;
};

template <typename T>
struct NormCache {
    Matrix<T> xhat;
    std::vector<T> inv_std;
    const NormParams<T>* params = nullptr;
};

template <typename T>
struct ReluCache {
    Matrix<T> input;
    T slope = T(0.01);
};

struct ConcatCache {
    int64_t c_dec = 0;
    int64_t c_enc = 0;
};

template <typename T>
struct AffineCache {
    Matrix<T> input;
    const AffineParams<T>* params = nullptr;
};

template <typename T>
struct HeadCache {
    AffineCache<T> fc0;
    ReluCache<T> relu;
    AffineCache<T> fc1;
};

template <typename T>
struct LayerCache {
    LayerKind kind = LayerKind::SubmConv;
    std::variant<std::monostate, ConvCache<T>, NormCache<T>, ReluCache<T>, ConcatCache, AffineCache<T>, HeadCache<T>>
        data;
};

// Gradients mirroring the parameter shapes of one layer, plus the gradient
// w.r.t. the layer input. Head layers use the *_hidden fields for the first
// affine and the plain fields for the final one.
template <typename T>
struct LayerGrads {
    Matrix<T> d_input;
    std::vector<T> d_weights;
    std::vector<T> d_bias;
    std::vector<T> d_gamma;
    std::vector<T> d_beta;
    std::vector<T> d_weights_hidden;
    std::vector<T> d_bias_hidden;
};

// ---------------------------------------------------------------------------
// Shared gather-scatter core
// ---------------------------------------------------------------------------

// out[o] = bias + sum over pairs (i,o) under offset k of W_k^T in[i].
// Offsets are visited in kernel order and each output row sees at most one
// pair per offset, so per-row accumulation order is fixed.
template <typename T>
Matrix<T> conv_apply(const Rulebook& rb, const Matrix<T>& in, const ConvParams<T>& p,
                     int64_t out_rows) {
    Matrix<T> out(out_rows, p.cout);
    if (!p.bias.empty()) {
        for (int64_t o = 0; o < out_rows; ++o) {
            T* row = out.row(o);
            for (int co = 0; co < p.cout; ++co) row[co] = p.bias[size_t(co)];
        }
    }
    for (size_t k = 0; k < rb.pairs.size(); ++k) {
        const T* wk = p.w_at(int(k));
        for (const IndexPair& pr : rb.pairs[k]) {
            const T* in_row = in.row(pr.in_row);
            T* out_row = out.row(pr.out_row);
            for (int ci = 0; ci < p.cin; ++ci) {
                const T a = in_row[ci];
                const T* wrow = wk + size_t(ci) * size_t(p.cout);
                for (int co = 0; co < p.cout; ++co) out_row[co] += a * wrow[co];
            }
        }
    }
    return out;
}

template <typename T>
LayerGrads<T> conv_backward_core(const ConvCache<T>& cache, const Matrix<T>& upstream) {
    require(cache.rb != nullptr && cache.params != nullptr, Err::MissingCache,
            "conv cache incomplete");
    const ConvParams<T>& p = *cache.params;
    const Rulebook& rb = *cache.rb;
    require(upstream.rows == cache.out_rows && upstream.cols == p.cout, Err::ShapeMismatch,
            "upstream gradient shape mismatch");

    LayerGrads<T> g;
    g.d_input = Matrix<T>(cache.input.rows, p.cin);
    g.d_weights.assign(p.weights.size(), T(0));
    if (!p.bias.empty()) {
        g.d_bias.assign(p.bias.size(), T(0));
        for (int64_t o = 0; o < upstream.rows; ++o) {
            const T* up = upstream.row(o);
            for (int co = 0; co < p.cout; ++co) g.d_bias[size_t(co)] += up[co];
        }
    }
    for (size_t k = 0; k < rb.pairs.size(); ++k) {
        const T* wk = p.w_at(int(k));
        T* dwk = g.d_weights.data() + size_t(k) * size_t(p.cin) * size_t(p.cout);
        for (const IndexPair& pr : rb.pairs[k]) {
            const T* in_row = cache.input.row(pr.in_row);
            const T* up = upstream.row(pr.out_row);
            T* din = g.d_input.row(pr.in_row);
            for (int ci = 0; ci < p.cin; ++ci) {
                const T a = in_row[ci];
                const T* wrow = wk + size_t(ci) * size_t(p.cout);
                T* dwrow = dwk + size_t(ci) * size_t(p.cout);
                T acc = T(0);
                for (int co = 0; co < p.cout; ++co) {
                    dwrow[co] += a * up[co];
                    acc += wrow[co] * up[co];
                }
                din[ci] += acc;
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Layer forwards
// ---------------------------------------------------------------------------

template <typename T>
SparseTensor<T> subm_conv_forward(const SparseTensor<T>& st, const Rulebook& rb,
                                  const ConvParams<T>& p, LayerCache<T>* cache = nullptr) {
    p.check_shape();
    require(st.channels() == p.cin, Err::ShapeMismatch, "input channels != conv cin");
    require(rb.in_count == st.size() && rb.out_count == st.size(), Err::ShapeMismatch,
            "rulebook is not submanifold over this support");

    SparseTensor<T> out;
    out.coords = st.coords;
    out.features = conv_apply(rb, st.features, p, st.size());
    if (cache) {
        cache->kind = LayerKind::SubmConv;
        cache->data = ConvCache<T>{st.features, &rb, &p, st.size()};
    }
    return out;
}

template <typename T>
SparseTensor<T> strided_conv_forward(const SparseTensor<T>& st, const Rulebook& rb,
                                     std::vector<VoxelCoord> coarse_coords, const ConvParams<T>& p,
                                     LayerCache<T>* cache = nullptr) {
    p.check_shape();
    require(st.channels() == p.cin, Err::ShapeMismatch, "input channels != conv cin");
    require(rb.in_count == st.size(), Err::ShapeMismatch, "rulebook input count != support size");
    require(rb.out_count == int64_t(coarse_coords.size()), Err::ShapeMismatch,
            "rulebook output count != coarse support size");

    SparseTensor<T> out;
    out.features = conv_apply(rb, st.features, p, rb.out_count);
    out.coords = std::move(coarse_coords);
    if (cache) {
        cache->kind = LayerKind::StridedConv;
        cache->data = ConvCache<T>{st.features, &rb, &p, rb.out_count};
    }
    return out;
}

template <typename T>
SparseTensor<T> inverse_conv_forward(const SparseTensor<T>& st_coarse, const Rulebook& rb_t,
                                     std::vector<VoxelCoord> fine_coords, const ConvParams<T>& p,
                                     LayerCache<T>* cache = nullptr) {
    p.check_shape();
    require(st_coarse.channels() == p.cin, Err::ShapeMismatch, "input channels != conv cin");
    require(rb_t.in_count == st_coarse.size(), Err::ShapeMismatch,
            "transposed rulebook input count != coarse support size");
    require(rb_t.out_count == int64_t(fine_coords.size()), Err::ShapeMismatch,
            "transposed rulebook output count != fine support size");

    SparseTensor<T> out;
    out.features = conv_apply(rb_t, st_coarse.features, p, rb_t.out_count);
    out.coords = std::move(fine_coords);
    if (cache) {
        cache->kind = LayerKind::InverseConv;
        cache->data = ConvCache<T>{st_coarse.features, &rb_t, &p, rb_t.out_count};
    }
    return out;
}

// Per-channel standardization over all active voxels of one window.
// Statistics are accumulated in double in row order, population variance.
template <typename T>
SparseTensor<T> sparse_instance_norm(const SparseTensor<T>& st, const NormParams<T>& p,
                                     LayerCache<T>* cache = nullptr) {
    const int64_t n = st.size();
    const int64_t c = st.channels();
    require(n >= 1, Err::EmptyTensor, "instance norm over empty tensor");
    p.check_shape(c);

    std::vector<double> mean(size_t(c), 0.0), var(size_t(c), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        const T* row = st.features.row(i);
        for (int64_t j = 0; j < c; ++j) mean[size_t(j)] += double(row[j]);
    }
    for (int64_t j = 0; j < c; ++j) mean[size_t(j)] /= double(n);
    for (int64_t i = 0; i < n; ++i) {
        const T* row = st.features.row(i);
        for (int64_t j = 0; j < c; ++j) {
            const double d = double(row[j]) - mean[size_t(j)];
            var[size_t(j)] += d * d;
        }
    }

    std::vector<T> inv_std(static_cast<size_t>(c));
    for (int64_t j = 0; j < c; ++j) {
        var[size_t(j)] /= double(n);
        inv_std[size_t(j)] = T(1.0 / std::sqrt(var[size_t(j)] + double(p.eps)));
    }

    SparseTensor<T> out;
    out.coords = st.coords;
    out.features = Matrix<T>(n, c);
    Matrix<T> xhat(n, c);
    for (int64_t i = 0; i < n; ++i) {
        const T* in_row = st.features.row(i);
        T* xh = xhat.row(i);
        T* o = out.features.row(i);
        for (int64_t j = 0; j < c; ++j) {
            xh[j] = T((double(in_row[j]) - mean[size_t(j)])) * inv_std[size_t(j)];
            o[j] = p.gamma[size_t(j)] * xh[j] + p.beta[size_t(j)];
        }
    }
    if (cache) {
        cache->kind = LayerKind::InstanceNorm;
        cache->data = NormCache<T>{std::move(xhat), std::move(inv_std), &p};
    }
    return out;
}

template <typename T>
SparseTensor<T> leaky_relu(const SparseTensor<T>& st, T slope = T(0.01),
                           LayerCache<T>* cache = nullptr) {
    SparseTensor<T> out;
    out.coords = st.coords;
    out.features = st.features;
    for (T& v : out.features.data)
        if (v < T(0)) v *= slope;
    if (cache) {
        cache->kind = LayerKind::LeakyRelu;
        cache->data = ReluCache<T>{st.features, slope};
    }
    return out;
}

// Channelwise [decoder | encoder] concatenation over an identical support.
template <typename T>
SparseTensor<T> concat_skip(const SparseTensor<T>& decoder, const SparseTensor<T>& encoder,
                            LayerCache<T>* cache = nullptr) {
    require(decoder.coords == encoder.coords, Err::SupportMismatch,
            "decoder and encoder supports differ");
    const int64_t n = decoder.size();
    const int64_t cd = decoder.channels();
    const int64_t ce = encoder.channels();

    SparseTensor<T> out;
    out.coords = decoder.coords;
    out.features = Matrix<T>(n, cd + ce);
    for (int64_t i = 0; i < n; ++i) {
        T* o = out.features.row(i);
        const T* d = decoder.features.row(i);
        const T* e = encoder.features.row(i);
        for (int64_t j = 0; j < cd; ++j) o[j] = d[j];
        for (int64_t j = 0; j < ce; ++j) o[cd + j] = e[j];
    }
    if (cache) {
        cache->kind = LayerKind::Concat;
        cache->data = ConcatCache{cd, ce};
    }
    return out;
}

template <typename T>
SparseTensor<T> affine_forward(const SparseTensor<T>& st, const AffineParams<T>& p,
                               LayerCache<T>* cache = nullptr) {
    p.check_shape();
    require(st.channels() == p.cin, Err::ShapeMismatch, "input channels != affine cin");
    const int64_t n = st.size();

    SparseTensor<T> out;
    out.coords = st.coords;
    out.features = Matrix<T>(n, p.cout);
    for (int64_t i = 0; i < n; ++i) {
        const T* in_row = st.features.row(i);
        T* o = out.features.row(i);
        for (int co = 0; co < p.cout; ++co) o[co] = p.bias[size_t(co)];
        for (int ci = 0; ci < p.cin; ++ci) {
            const T a = in_row[ci];
            const T* wrow = p.weights.data() + size_t(ci) * size_t(p.cout);
            for (int co = 0; co < p.cout; ++co) o[co] += a * wrow[co];
        }
    }
    if (cache) {
        cache->kind = LayerKind::Affine;
        cache->data = AffineCache<T>{st.features, &p};
    }
    return out;
}

// affine(C->C) -> LeakyReLU -> affine(C->K), per row independently.
template <typename T>
SparseTensor<T> mlp_head_forward(const SparseTensor<T>& st, const AffineParams<T>& fc0,
                                 const AffineParams<T>& fc1, T slope = T(0.01),
                                 LayerCache<T>* cache = nullptr) {
    require(fc0.cout == fc1.cin, Err::ShapeMismatch, "head affine widths disagree");
    LayerCache<T> c0, c1, c2;
    SparseTensor<T> h = affine_forward(st, fc0, cache ? &c0 : nullptr);
    h = leaky_relu(h, slope, cache ? &c1 : nullptr);
    SparseTensor<T> out = affine_forward(h, fc1, cache ? &c2 : nullptr);
    if (cache) {
        cache->kind = LayerKind::Head;
        cache->data = HeadCache<T>{std::get<AffineCache<T>>(std::move(c0.data)),
                                   std::get<ReluCache<T>>(std::move(c1.data)),
                                   std::get<AffineCache<T>>(std::move(c2.data))};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <typename T>
LayerGrads<T> norm_backward(const NormCache<T>& cache, const Matrix<T>& upstream) {
    require(cache.params != nullptr, Err::MissingCache, "norm cache incomplete");
    const NormParams<T>& p = *cache.params;
    const int64_t n = cache.xhat.rows;
    const int64_t c = cache.xhat.cols;
    require(upstream.rows == n && upstream.cols == c, Err::ShapeMismatch,
            "upstream gradient shape mismatch");

    LayerGrads<T> g;
    g.d_input = Matrix<T>(n, c);
    g.d_gamma.assign(size_t(c), T(0));
    g.d_beta.assign(size_t(c), T(0));

    // Per channel: dx = gamma*inv_std*(g - mean(g) - xhat*mean(g.xhat)),
    // means over the N active rows (population statistics).
    std::vector<double> sum_g(size_t(c), 0.0), sum_gx(size_t(c), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        const T* up = upstream.row(i);
        const T* xh = cache.xhat.row(i);
        for (int64_t j = 0; j < c; ++j) {
            sum_g[size_t(j)] += double(up[j]);
            sum_gx[size_t(j)] += double(up[j]) * double(xh[j]);
        }
    }
    for (int64_t j = 0; j < c; ++j) {
        g.d_beta[size_t(j)] = T(sum_g[size_t(j)]);
        g.d_gamma[size_t(j)] = T(sum_gx[size_t(j)]);
    }
    for (int64_t i = 0; i < n; ++i) {
        const T* up = upstream.row(i);
        const T* xh = cache.xhat.row(i);
        T* d = g.d_input.row(i);
        for (int64_t j = 0; j < c; ++j) {
            const double mean_g = sum_g[size_t(j)] / double(n);
            const double mean_gx = sum_gx[size_t(j)] / double(n);
            d[j] = T(double(p.gamma[size_t(j)]) * double(cache.inv_std[size_t(j)]) *
                     (double(up[j]) - mean_g - double(xh[j]) * mean_gx));
        }
    }
    return g;
}

template <typename T>
LayerGrads<T> affine_backward(const AffineCache<T>& cache, const Matrix<T>& upstream) {
    require(cache.params != nullptr, Err::MissingCache, "affine cache incomplete");
    const AffineParams<T>& p = *cache.params;
    const int64_t n = cache.input.rows;
    require(upstream.rows == n && upstream.cols == p.cout, Err::ShapeMismatch,
            "upstream gradient shape mismatch");

    LayerGrads<T> g;
    g.d_input = Matrix<T>(n, p.cin);
    g.d_weights.assign(p.weights.size(), T(0));
    g.d_bias.assign(p.bias.size(), T(0));
    for (int64_t i = 0; i < n; ++i) {
        const T* up = upstream.row(i);
        const T* in_row = cache.input.row(i);
        T* din = g.d_input.row(i);
        for (int co = 0; co < p.cout; ++co) g.d_bias[size_t(co)] += up[co];
        for (int ci = 0; ci < p.cin; ++ci) {
            const T a = in_row[ci];
            const T* wrow = p.weights.data() + size_t(ci) * size_t(p.cout);
            T* dwrow = g.d_weights.data() + size_t(ci) * size_t(p.cout);
            T acc = T(0);
            for (int co = 0; co < p.cout; ++co) {
                dwrow[co] += a * up[co];
                acc += wrow[co] * up[co];
            }
            din[ci] = acc;
        }
    }
    return g;
}

template <typename T>
LayerGrads<T> layer_backward(const LayerCache<T>& cache, const Matrix<T>& upstream) {
    switch (cache.kind) {
        case LayerKind::SubmConv:
        case LayerKind::StridedConv:
        case LayerKind::InverseConv: {
            const auto* c = std::get_if<ConvCache<T>>(&cache.data);
            require(c != nullptr, Err::MissingCache, "conv cache absent");
            return conv_backward_core(*c, upstream);
        }
        case LayerKind::InstanceNorm: {
            const auto* c = std::get_if<NormCache<T>>(&cache.data);
            require(c != nullptr, Err::MissingCache, "norm cache absent");
            return norm_backward(*c, upstream);
        }
        case LayerKind::LeakyRelu: {
            const auto* c = std::get_if<ReluCache<T>>(&cache.data);
            require(c != nullptr, Err::MissingCache, "relu cache absent");
            require(upstream.rows == c->input.rows && upstream.cols == c->input.cols,
                    Err::ShapeMismatch, "upstream gradient shape mismatch");
            LayerGrads<T> g;
            g.d_input = Matrix<T>(c->input.rows, c->input.cols);
            for (size_t i = 0; i < c->input.data.size(); ++i)
                g.d_input.data[i] =
                    c->input.data[i] >= T(0) ? upstream.data[i] : c->slope * upstream.data[i];
            return g;
        }
        case LayerKind::Concat: {
            const auto* c = std::get_if<ConcatCache>(&cache.data);
            require(c != nullptr, Err::MissingCache, "concat cache absent");
            require(upstream.cols == c->c_dec + c->c_enc, Err::ShapeMismatch,
                    "upstream gradient shape mismatch");
            LayerGrads<T> g;
            g.d_input = upstream; // caller slices columns into the two branches
            return g;
        }
        case LayerKind::Affine: {
            const auto* c = std::get_if<AffineCache<T>>(&cache.data);
            require(c != nullptr, Err::MissingCache, "affine cache absent");
            return affine_backward(*c, upstream);
        }
        case LayerKind::Head: {
            const auto* c = std::get_if<HeadCache<T>>(&cache.data);
            require(c != nullptr, Err::MissingCache, "head cache absent");
            LayerGrads<T> g1 = affine_backward(c->fc1, upstream);
            LayerCache<T> relu;
            relu.kind = LayerKind::LeakyRelu;
            relu.data = c->relu;
            LayerGrads<T> gr = layer_backward(relu, g1.d_input);
            LayerGrads<T> g0 = affine_backward(c->fc0, gr.d_input);
            LayerGrads<T> g;
            g.d_input = std::move(g0.d_input);
            g.d_weights = std::move(g1.d_weights);
            g.d_bias = std::move(g1.d_bias);
            g.d_weights_hidden = std::move(g0.d_weights);
            g.d_bias_hidden = std::move(g0.d_bias);
            return g;
        }
    }
    fail(Err::MissingCache, "unknown layer kind");
}

// Column slice [lo, hi) of a feature matrix; used to split concat gradients.
template <typename T>
Matrix<T> slice_cols(const Matrix<T>& m, int64_t lo, int64_t hi) {
    Matrix<T> out(m.rows, hi - lo);
    for (int64_t i = 0; i < m.rows; ++i) {
        const T* src = m.row(i);
        T* dst = out.row(i);
        for (int64_t j = lo; j < hi; ++j) dst[j - lo] = src[j];
    }
    return out;
}

} // namespace bonnet
