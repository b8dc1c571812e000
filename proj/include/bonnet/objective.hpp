#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "bonnet/voxgrid.hpp"

namespace bonnet {

struct LossConfig {
    int num_classes = 2;        // K
    double smoothing = 0.05;    // label-smoothing mass
    double dice_eps = 1e-5;     // stability constant in the soft Dice quotient
    // Reduction is mean over voxels.

    void validate() const {
        require(num_classes >= 2, Err::InvalidConfig, "K must be >= 2");
        require(smoothing >= 0.0 && smoothing < 1.0, Err::InvalidConfig,
                "smoothing must be in [0, 1)");
        require(dice_eps > 0.0, Err::InvalidConfig, "dice eps must be positive");
    }
};

template <typename T>
struct LossResult {
    T value = T(0);
    Matrix<T> grad; // w.r.t. the op's stated input (logits or probs)
};

// Numerically stable row-wise softmax.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
    Matrix<T> p(logits.rows, logits.cols);
    for (int64_t i = 0; i < logits.rows; ++i) {
        const T* in = logits.row(i);
        T* out = p.row(i);
        T mx = in[0];
        for (int64_t j = 1; j < logits.cols; ++j) mx = std::max(mx, in[j]);
        T sum = T(0);
        for (int64_t j = 0; j < logits.cols; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        for (int64_t j = 0; j < logits.cols; ++j) out[j] /= sum;
    }
    return p;
}

// Cross-entropy with label smoothing, mean over voxels. Targets put 1-eps on
// the true class and eps/(K-1) on each other class. Gradient w.r.t. logits is
// (p - q)/N per row.
template <typename T>
LossResult<T> ce_label_smoothing(const Matrix<T>& logits, const std::vector<uint16_t>& labels,
                                 const LossConfig& cfg) {
    cfg.validate();
    const int64_t n = logits.rows;
    const int64_t k = logits.cols;
    require(n >= 1, Err::EmptyTensor, "cross-entropy over empty input");
    require(int64_t(labels.size()) == n, Err::ShapeMismatch, "label count != row count");
    require(k == cfg.num_classes, Err::ShapeMismatch, "logit width != K");
    for (uint16_t y : labels)
        require(y < cfg.num_classes, Err::LabelOutOfRange,
                "label " + std::to_string(y) + " >= K");

    const T off = T(cfg.smoothing / double(cfg.num_classes - 1));
    const T on = T(1.0 - cfg.smoothing);

    Matrix<T> p = softmax_rows(logits);
    LossResult<T> res;
    res.grad = Matrix<T>(n, k);
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const T* li = logits.row(i);
        const T* pi = p.row(i);
        T* gi = res.grad.row(i);
        T mx = li[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, li[j]);
        T lse = T(0);
        for (int64_t j = 0; j < k; ++j) lse += std::exp(li[j] - mx);
        lse = std::log(lse) + mx; // log-sum-exp; log p = logit - lse
        for (int64_t j = 0; j < k; ++j) {
            const T q = (j == int64_t(labels[size_t(i)])) ? on : off;
            total -= double(q) * double(li[j] - lse);
            gi[j] = (pi[j] - q) / T(n);
        }
    }
    res.value = T(total / double(n));
    return res;
}

// Soft Dice over softmax probabilities: mean over foreground classes
// c = 1..K-1 of (2*sum p*[y=c] + eps) / (sum p + sum [y=c] + eps).
template <typename T>
LossResult<T> soft_dice(const Matrix<T>& probs, const std::vector<uint16_t>& labels,
                        const LossConfig& cfg) {
    cfg.validate();
    const int64_t n = probs.rows;
    const int64_t k = probs.cols;
    require(n >= 1, Err::EmptyTensor, "soft dice over empty input");
    require(int64_t(labels.size()) == n, Err::ShapeMismatch, "label count != row count");
    require(k == cfg.num_classes, Err::ShapeMismatch, "probability width != K");
    for (uint16_t y : labels)
        require(y < cfg.num_classes, Err::LabelOutOfRange, "label " + std::to_string(y) + " >= K");
    for (int64_t i = 0; i < n; ++i) {
        const T* pi = probs.row(i);
        T sum = T(0);
        for (int64_t j = 0; j < k; ++j) {
            require(pi[j] >= T(0), Err::InvalidProbability, "negative probability");
            sum += pi[j];
        }
        require(std::abs(double(sum) - 1.0) <= 1e-5, Err::InvalidProbability,
                "row does not sum to 1");
    }

    const double eps = cfg.dice_eps;
    const double inv_fg = 1.0 / double(k - 1);

    LossResult<T> res;
    res.grad = Matrix<T>(n, k);
    double total = 0.0;
    for (int64_t c = 1; c < k; ++c) {
        double inter = 0.0, psum = 0.0;
        int64_t count = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double p = double(probs.at(i, c));
            psum += p;
            if (int64_t(labels[size_t(i)]) == c) {
                inter += p;
                ++count;
            }
        }
        const double num = 2.0 * inter + eps;
        const double den = psum + double(count) + eps;
        total += num / den;
        // Quotient rule: d/dp_i(c) = (2*[y_i=c]*den - num) / den^2, scaled by 1/(K-1).
        for (int64_t i = 0; i < n; ++i) {
            const double ind = (int64_t(labels[size_t(i)]) == c) ? 2.0 : 0.0;
            res.grad.at(i, c) = T(inv_fg * (ind * den - num) / (den * den));
        }
    }
    res.value = T(total * inv_fg);
    return res;
}

// Combined window objective: CE + (1 - SoftDice(softmax(logits))), gradient
// w.r.t. logits chains the softmax through both terms.
template <typename T>
LossResult<T> combined_loss(const Matrix<T>& logits, const std::vector<uint16_t>& labels,
                            const LossConfig& cfg) {
    LossResult<T> ce = ce_label_smoothing(logits, labels, cfg);
    Matrix<T> probs = softmax_rows(logits);
    LossResult<T> sd = soft_dice(probs, labels, cfg);

    LossResult<T> res;
    res.value = ce.value + T(1) - sd.value;
    res.grad = std::move(ce.grad);
    // d(1 - SD)/dlogit = -J_softmax^T dSD/dp; per row:
    // g_j = p_j * (gp_j - sum_c gp_c * p_c), negated.
    for (int64_t i = 0; i < logits.rows; ++i) {
        const T* p = probs.row(i);
        const T* gp = sd.grad.row(i);
        T* g = res.grad.row(i);
        T dot = T(0);
        for (int64_t j = 0; j < logits.cols; ++j) dot += gp[j] * p[j];
        for (int64_t j = 0; j < logits.cols; ++j) g[j] -= p[j] * (gp[j] - dot);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Hard Dice evaluation
// ---------------------------------------------------------------------------

// Named groups of class ids; groups may overlap.
struct ClassGrouping {
    std::map<std::string, std::set<uint16_t>> groups;

    static ClassGrouping from_json_file(const std::string& path);
    std::string to_json() const;
};

// Dice (%) per group over two label volumes of identical shape: binarize to
// membership in the group's id set, then 200*|A&B| / (|A|+|B|). Both masks
// empty counts as 100 (flagged by callers in evaluation output).
std::map<std::string, double> hard_dice(const std::vector<uint16_t>& pred,
                                        const std::vector<uint16_t>& gt,
                                        const ClassGrouping& grouping);

} // namespace bonnet
