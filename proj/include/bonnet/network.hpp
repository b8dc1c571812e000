#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bonnet/objective.hpp"
#include "bonnet/pipeline.hpp"
#include "bonnet/sparse_nn.hpp"

namespace bonnet {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct UNetConfig {
    int levels = 4;
    std::vector<int> base_widths{4, 8, 16, 32};
    double width_factor = 4.0; // effective channels = round(base * factor)
    int blocks_per_level = 2;
    int num_classes = 2;
    double leaky_slope = 0.01;
    double norm_eps = 1e-5;

    std::vector<int> channels() const {
        std::vector<int> c;
        c.reserve(base_widths.size());
        for (int b : base_widths) c.push_back(int(std::lround(double(b) * width_factor)));
        return c;
    }

    void validate() const;
    std::string to_json() const;
    static UNetConfig from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct BlockParams {
    ConvParams<T> conv;
    NormParams<T> norm;
};

// The whole net. Also reused as the container for gradients and for the
// optimizer's moment accumulators (identical shapes).
template <typename T>
struct UNetParams {
    std::vector<std::vector<BlockParams<T>>> encoder; // [L][B]; level L-1 is the bottleneck
    std::vector<BlockParams<T>> down;                 // [L-1], 2^3 stride-2
    std::vector<BlockParams<T>> up;                   // [L-1], inverse conv onto level l
    std::vector<std::vector<BlockParams<T>>> decoder; // [L-1][B]
    AffineParams<T> fc0, fc1;                         // MLP head
};

using UNetParamsF = UNetParams<float>;
using UNetParamsD = UNetParams<double>;

template <typename T>
struct TensorRef {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<T>* data;
};

// Canonical tensor enumeration: encoder levels (each block: conv.w, conv.b,
// norm.gamma, norm.beta), then down, up, decoder levels, then the head. This
// order fixes the init RNG stream and the checkpoint layout.
template <typename T>
std::vector<TensorRef<T>> tensor_refs(UNetParams<T>& p) {
    std::vector<TensorRef<T>> out;
    auto push_conv = [&out](const std::string& base, ConvParams<T>& c) {
        out.push_back({base + ".conv.w",
                       {uint32_t(c.kvol), uint32_t(c.cin), uint32_t(c.cout)},
                       &c.weights});
        out.push_back({base + ".conv.b", {uint32_t(c.cout)}, &c.bias});
    };
    auto push_norm = [&out](const std::string& base, NormParams<T>& n) {
        out.push_back({base + ".norm.gamma", {uint32_t(n.gamma.size())}, &n.gamma});
        out.push_back({base + ".norm.beta", {uint32_t(n.beta.size())}, &n.beta});
    };
    auto push_block = [&](const std::string& base, BlockParams<T>& b) {
        push_conv(base, b.conv);
        push_norm(base, b.norm);
    };
    for (size_t l = 0; l < p.encoder.size(); ++l)
        for (size_t b = 0; b < p.encoder[l].size(); ++b)
            push_block("enc" + std::to_string(l) + ".block" + std::to_string(b), p.encoder[l][b]);
    for (size_t l = 0; l < p.down.size(); ++l)
        push_block("down" + std::to_string(l), p.down[l]);
    for (size_t l = 0; l < p.up.size(); ++l)
        push_block("up" + std::to_string(l), p.up[l]);
    for (size_t l = 0; l < p.decoder.size(); ++l)
        for (size_t b = 0; b < p.decoder[l].size(); ++b)
            push_block("dec" + std::to_string(l) + ".block" + std::to_string(b), p.decoder[l][b]);
    out.push_back({"head.fc0.w", {uint32_t(p.fc0.cin), uint32_t(p.fc0.cout)}, &p.fc0.weights});
    out.push_back({"head.fc0.b", {uint32_t(p.fc0.cout)}, &p.fc0.bias});
    out.push_back({"head.fc1.w", {uint32_t(p.fc1.cin), uint32_t(p.fc1.cout)}, &p.fc1.weights});
    out.push_back({"head.fc1.b", {uint32_t(p.fc1.cout)}, &p.fc1.bias});
    return out;
}

// All-zero parameter set with the shapes (and norm eps) the config dictates.
template <typename T>
UNetParams<T> allocate_params(const UNetConfig& cfg) {
    cfg.validate();
    const std::vector<int> ch = cfg.channels();
    const int L = cfg.levels;
    const int B = cfg.blocks_per_level;
    const int k_subm = KernelSpec::subm3().volume();
    const int k_down = KernelSpec::down2().volume();

    auto conv = [](int kvol, int cin, int cout) {
        ConvParams<T> c;
        c.kvol = kvol;
        c.cin = cin;
        c.cout = cout;
        c.weights.assign(size_t(kvol) * size_t(cin) * size_t(cout), T(0));
        c.bias.assign(size_t(cout), T(0));
        return c;
    };
    auto norm = [&cfg](int c) {
        NormParams<T> n;
        n.gamma.assign(size_t(c), T(0));
        n.beta.assign(size_t(c), T(0));
        n.eps = T(cfg.norm_eps);
        return n;
    };

    UNetParams<T> p;
    p.encoder.resize(size_t(L));
    for (int l = 0; l < L; ++l)
        for (int b = 0; b < B; ++b) {
            const int cin = b == 0 ? (l == 0 ? 1 : ch[size_t(l)]) : ch[size_t(l)];
            p.encoder[size_t(l)].push_back({conv(k_subm, cin, ch[size_t(l)]), norm(ch[size_t(l)])});
        }
    for (int l = 0; l + 1 < L; ++l)
        p.down.push_back({conv(k_down, ch[size_t(l)], ch[size_t(l) + 1]), norm(ch[size_t(l) + 1])});
    for (int l = 0; l + 1 < L; ++l)
        p.up.push_back({conv(k_down, ch[size_t(l) + 1], ch[size_t(l)]), norm(ch[size_t(l)])});
    p.decoder.resize(size_t(L - 1));
    for (int l = 0; l + 1 < L; ++l)
        for (int b = 0; b < B; ++b) {
            const int cin = b == 0 ? 2 * ch[size_t(l)] : ch[size_t(l)];
            p.decoder[size_t(l)].push_back({conv(k_subm, cin, ch[size_t(l)]), norm(ch[size_t(l)])});
        }
    p.fc0.cin = p.fc0.cout = ch[0];
    p.fc0.weights.assign(size_t(ch[0]) * size_t(ch[0]), T(0));
    p.fc0.bias.assign(size_t(ch[0]), T(0));
    p.fc1.cin = ch[0];
    p.fc1.cout = cfg.num_classes;
    p.fc1.weights.assign(size_t(ch[0]) * size_t(cfg.num_classes), T(0));
    p.fc1.bias.assign(size_t(cfg.num_classes), T(0));
    return p;
}

template <typename To, typename From>
UNetParams<To> cast_params(const UNetParams<From>& src) {
    UNetParams<To> dst;
    auto cast_conv = [](const ConvParams<From>& c) {
        ConvParams<To> o;
        o.kvol = c.kvol;
        o.cin = c.cin;
        o.cout = c.cout;
        o.weights.assign(c.weights.begin(), c.weights.end());
        o.bias.assign(c.bias.begin(), c.bias.end());
        return o;
    };
    auto cast_norm = [](const NormParams<From>& n) {
        NormParams<To> o;
        o.gamma.assign(n.gamma.begin(), n.gamma.end());
        o.beta.assign(n.beta.begin(), n.beta.end());
        o.eps = To(n.eps);
        return o;
    };
    auto cast_block = [&](const BlockParams<From>& b) {
        return BlockParams<To>{cast_conv(b.conv), cast_norm(b.norm)};
    };
    for (const auto& lvl : src.encoder) {
        dst.encoder.emplace_back();
        for (const auto& b : lvl) dst.encoder.back().push_back(cast_block(b));
    }
    for (const auto& b : src.down) dst.down.push_back(cast_block(b));
    for (const auto& b : src.up) dst.up.push_back(cast_block(b));
    for (const auto& lvl : src.decoder) {
        dst.decoder.emplace_back();
        for (const auto& b : lvl) dst.decoder.back().push_back(cast_block(b));
    }
    auto cast_affine = [](const AffineParams<From>& a) {
        AffineParams<To> o;
        o.cin = a.cin;
        o.cout = a.cout;
        o.weights.assign(a.weights.begin(), a.weights.end());
        o.bias.assign(a.bias.begin(), a.bias.end());
        return o;
    };
    dst.fc0 = cast_affine(src.fc0);
    dst.fc1 = cast_affine(src.fc1);
    return dst;
}

// He init: weights ~ Normal(0, 2/fan_in) with fan_in = |kernel|*C_in (for the
// head affines, C_in); biases and beta zero; gamma one. One RNG stream over
// the canonical tensor order, so the result is a pure function of the seed.
UNetParamsF init_network(const UNetConfig& cfg, uint64_t seed);

int64_t count_parameters(const UNetConfig& cfg);

// ---------------------------------------------------------------------------
// Per-window rulebook plan
// ---------------------------------------------------------------------------

// Coordinates and rulebooks for every level of one window. Encoder and
// decoder submanifold convs at a level share the same rulebook.
struct WindowPlan {
    int levels = 0;
    std::vector<std::vector<VoxelCoord>> coords; // [L]
    std::vector<Rulebook> subm;                  // [L]
    std::vector<Rulebook> down;                  // [L-1], fine l -> coarse l+1
    std::vector<Rulebook> up;                    // [L-1], transposed down
};

WindowPlan build_plan(const std::vector<VoxelCoord>& coords, int levels);

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename T>
struct BlockTape {
    LayerCache<T> conv, norm, relu;
};

// Training-mode record of one forward pass. Holds pointers into the params
// and plan used, which must outlive the tape.
template <typename T>
struct ForwardTape {
    std::vector<std::vector<BlockTape<T>>> enc; // [L][B]
    std::vector<BlockTape<T>> down;             // [L-1]
    std::vector<BlockTape<T>> up;               // [L-1]
    std::vector<LayerCache<T>> concat;          // [L-1]
    std::vector<std::vector<BlockTape<T>>> dec; // [L-1][B]
    LayerCache<T> head;
};

namespace detail {

template <typename T>
SparseTensor<T> norm_act(SparseTensor<T> x, const BlockParams<T>& bp, T slope, BlockTape<T>* bt) {
    x = sparse_instance_norm(x, bp.norm, bt ? &bt->norm : nullptr);
    return leaky_relu(x, slope, bt ? &bt->relu : nullptr);
}

} // namespace detail

template <typename T>
SparseTensor<T> network_forward(const SparseTensor<T>& st, const UNetParams<T>& params,
                                const UNetConfig& cfg, const WindowPlan& plan,
                                ForwardTape<T>* tape = nullptr) {
    cfg.validate();
    require(st.size() > 0, Err::EmptyTensor, "network forward over empty window");
    require(plan.levels == cfg.levels, Err::ShapeMismatch, "plan depth != config depth");
    require(plan.coords[0] == st.coords, Err::SupportMismatch,
            "plan was built for a different support");

    const int L = cfg.levels;
    const int B = cfg.blocks_per_level;
    const T slope = T(cfg.leaky_slope);
    if (tape) {
        tape->enc.assign(size_t(L), std::vector<BlockTape<T>>(size_t(B)));
        tape->down.assign(size_t(L - 1), {});
        tape->up.assign(size_t(L - 1), {});
        tape->concat.assign(size_t(L - 1), {});
        tape->dec.assign(size_t(L - 1), std::vector<BlockTape<T>>(size_t(B)));
    }

    std::vector<SparseTensor<T>> skips(size_t(L - 1));
    SparseTensor<T> x = st;
    for (int l = 0; l < L; ++l) {
        for (int b = 0; b < B; ++b) {
            BlockTape<T>* bt = tape ? &tape->enc[size_t(l)][size_t(b)] : nullptr;
            const BlockParams<T>& bp = params.encoder[size_t(l)][size_t(b)];
            x = subm_conv_forward(x, plan.subm[size_t(l)], bp.conv, bt ? &bt->conv : nullptr);
            x = detail::norm_act(std::move(x), bp, slope, bt);
        }
        if (l + 1 < L) {
            skips[size_t(l)] = x;
            BlockTape<T>* bt = tape ? &tape->down[size_t(l)] : nullptr;
            const BlockParams<T>& bp = params.down[size_t(l)];
            x = strided_conv_forward(x, plan.down[size_t(l)], plan.coords[size_t(l) + 1], bp.conv,
                                     bt ? &bt->conv : nullptr);
            x = detail::norm_act(std::move(x), bp, slope, bt);
        }
    }
    for (int l = L - 2; l >= 0; --l) {
        BlockTape<T>* bt = tape ? &tape->up[size_t(l)] : nullptr;
        const BlockParams<T>& bp = params.up[size_t(l)];
        x = inverse_conv_forward(x, plan.up[size_t(l)], plan.coords[size_t(l)], bp.conv,
                                 bt ? &bt->conv : nullptr);
        x = detail::norm_act(std::move(x), bp, slope, bt);
        x = concat_skip(x, skips[size_t(l)], tape ? &tape->concat[size_t(l)] : nullptr);
        for (int b = 0; b < B; ++b) {
            BlockTape<T>* dbt = tape ? &tape->dec[size_t(l)][size_t(b)] : nullptr;
            const BlockParams<T>& dbp = params.decoder[size_t(l)][size_t(b)];
            x = subm_conv_forward(x, plan.subm[size_t(l)], dbp.conv, dbt ? &dbt->conv : nullptr);
            x = detail::norm_act(std::move(x), dbp, slope, dbt);
        }
    }
    return mlp_head_forward(x, params.fc0, params.fc1, slope, tape ? &tape->head : nullptr);
}

namespace detail {

template <typename T>
void add_in_place(Matrix<T>& a, const Matrix<T>& b) {
    require(a.rows == b.rows && a.cols == b.cols, Err::ShapeMismatch,
            "gradient accumulation shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

// Reverse of conv -> norm -> act; fills this block's parameter gradients.
template <typename T>
Matrix<T> block_backward(const BlockTape<T>& bt, const Matrix<T>& upstream,
                         BlockParams<T>& grads) {
    LayerGrads<T> gr = layer_backward(bt.relu, upstream);
    LayerGrads<T> gn = layer_backward(bt.norm, gr.d_input);
    grads.norm.gamma = std::move(gn.d_gamma);
    grads.norm.beta = std::move(gn.d_beta);
    LayerGrads<T> gc = layer_backward(bt.conv, gn.d_input);
    grads.conv.weights = std::move(gc.d_weights);
    grads.conv.bias = std::move(gc.d_bias);
    return std::move(gc.d_input);
}

} // namespace detail

// Gradients of the scalar objective w.r.t. every parameter, given the
// gradient at the logits. Returns a parameter-shaped container.
template <typename T>
UNetParams<T> network_backward(const ForwardTape<T>& tape, const UNetConfig& cfg,
                               const Matrix<T>& d_logits) {
    const int L = cfg.levels;
    const int B = cfg.blocks_per_level;
    UNetParams<T> grads = allocate_params<T>(cfg);

    const auto* head = std::get_if<HeadCache<T>>(&tape.head.data);
    require(head != nullptr, Err::MissingCache, "forward tape has no head cache");
    LayerGrads<T> hg = layer_backward(tape.head, d_logits);
    grads.fc1.weights = std::move(hg.d_weights);
    grads.fc1.bias = std::move(hg.d_bias);
    grads.fc0.weights = std::move(hg.d_weights_hidden);
    grads.fc0.bias = std::move(hg.d_bias_hidden);
    Matrix<T> g = std::move(hg.d_input);

    // Decoder, shallow to deep (reverse execution order), peeling skip
    // gradients off at each concat.
    std::vector<Matrix<T>> d_skip(size_t(L - 1));
    for (int l = 0; l + 1 < L; ++l) {
        for (int b = B - 1; b >= 0; --b)
            g = detail::block_backward(tape.dec[size_t(l)][size_t(b)], g,
                                       grads.decoder[size_t(l)][size_t(b)]);
        const auto* cc = std::get_if<ConcatCache>(&tape.concat[size_t(l)].data);
        require(cc != nullptr, Err::MissingCache, "forward tape has no concat cache");
        d_skip[size_t(l)] = slice_cols(g, cc->c_dec, cc->c_dec + cc->c_enc);
        Matrix<T> d_dec = slice_cols(g, 0, cc->c_dec);
        g = detail::block_backward(tape.up[size_t(l)], d_dec, grads.up[size_t(l)]);
    }

    // Encoder, deep to shallow; skip gradients rejoin after each downsample.
    for (int l = L - 1; l >= 0; --l) {
        for (int b = B - 1; b >= 0; --b)
            g = detail::block_backward(tape.enc[size_t(l)][size_t(b)], g,
                                       grads.encoder[size_t(l)][size_t(b)]);
        if (l > 0) {
            g = detail::block_backward(tape.down[size_t(l) - 1], g, grads.down[size_t(l) - 1]);
            detail::add_in_place(g, d_skip[size_t(l) - 1]);
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        require(lr >= 0.0, Err::InvalidConfig, "learning rate must be nonnegative");
        require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, Err::InvalidConfig,
                "moment decays must be in [0, 1)");
        require(eps > 0.0, Err::InvalidConfig, "adam eps must be positive");
    }
};

template <typename T>
struct OptimState {
    AdamConfig hp;
    int64_t step = 0;
    UNetParams<T> m, v; // first/second moment accumulators, parameter-shaped
};

template <typename T>
OptimState<T> init_optim(const UNetConfig& cfg, const AdamConfig& hp = {}) {
    hp.validate();
    return {hp, 0, allocate_params<T>(cfg), allocate_params<T>(cfg)};
}

// One Adam step with bias correction; arithmetic in double, stored back in T.
template <typename T>
void adam_update(UNetParams<T>& params, OptimState<T>& opt, UNetParams<T>& grads) {
    auto tp = tensor_refs(params);
    auto tm = tensor_refs(opt.m);
    auto tv = tensor_refs(opt.v);
    auto tg = tensor_refs(grads);
    require(tp.size() == tm.size() && tp.size() == tv.size() && tp.size() == tg.size(),
            Err::ShapeMismatch, "optimizer state does not mirror the parameters");
    opt.step += 1;
    const double b1 = opt.hp.beta1;
    const double b2 = opt.hp.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(opt.step));
    const double bc2 = 1.0 - std::pow(b2, double(opt.step));
    for (size_t t = 0; t < tp.size(); ++t) {
        std::vector<T>& pv = *tp[t].data;
        std::vector<T>& mv = *tm[t].data;
        std::vector<T>& vv = *tv[t].data;
        const std::vector<T>& gv = *tg[t].data;
        require(pv.size() == gv.size() && pv.size() == mv.size() && pv.size() == vv.size(),
                Err::ShapeMismatch, "gradient tensor shape mismatch at " + tp[t].name);
        for (size_t j = 0; j < pv.size(); ++j) {
            const double g = double(gv[j]);
            const double m = b1 * double(mv[j]) + (1.0 - b1) * g;
            const double v = b2 * double(vv[j]) + (1.0 - b2) * g * g;
            mv[j] = T(m);
            vv[j] = T(v);
            pv[j] = T(double(pv[j]) - opt.hp.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.hp.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

// Forward, combined CE + (1 - SoftDice) loss, full backward, one Adam update.
// Returns the scalar window loss.
template <typename T>
double train_step(UNetParams<T>& params, OptimState<T>& opt, const SparseTensor<T>& window,
                  const UNetConfig& cfg, const LossConfig& loss_cfg) {
    require(window.labels.has_value(), Err::ShapeMismatch, "training window carries no labels");
    require(loss_cfg.num_classes == cfg.num_classes, Err::InvalidConfig,
            "loss and network disagree on K");
    WindowPlan plan = build_plan(window.coords, cfg.levels);
    ForwardTape<T> tape;
    SparseTensor<T> logits = network_forward(window, params, cfg, plan, &tape);
    LossResult<T> loss = combined_loss(logits.features, *window.labels, loss_cfg);
    UNetParams<T> grads = network_backward(tape, cfg, loss.grad);
    adam_update(params, opt, grads);
    return double(loss.value);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    UNetConfig cfg;
    DatasetStats stats;
    uint64_t init_seed = 0;
    UNetParamsF params;
    std::optional<OptimState<float>> optim;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

} // namespace bonnet
