#include "bonnet/predict.hpp"

#include <atomic>
#include <chrono>
#include <thread>

#include "bonnet/dense_ref.hpp"

namespace bonnet {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

PredictResult predict_impl(const Checkpoint& ckpt, const HuVolume& volume,
                           const FusionConfig& fusion, int window_edge, int workers,
                           bool dense_mode) {
    ckpt.cfg.validate();
    fusion.validate();
    require(window_edge >= 8, Err::InvalidConfig, "window edge must be >= 8");
    require(workers >= 1, Err::InvalidConfig, "need at least one worker");

    PredictResult res;
    res.mask.meta = {volume.meta.shape, volume.meta.spacing_mm, ValueKind::LabelsU16};
    res.mask.data.assign(size_t(res.mask.meta.voxel_count()), 0);

    const auto t_pre = Clock::now();
    const SparseTensorF thresholded = hu_threshold_to_sparse(volume, fusion);
    if (thresholded.size() == 0) {
        res.timings.preprocess_s = seconds_since(t_pre);
        return res;
    }
    const SparseTensorF st = zscore(thresholded, ckpt.stats);
    const std::vector<WindowPlacement> placements =
        enumerate_inference_windows(volume.meta.shape, fusion, window_edge);
    res.timings.preprocess_s = seconds_since(t_pre);

    const int k = ckpt.cfg.num_classes;
    const auto t_fwd = Clock::now();
    std::vector<WindowScores> scores(placements.size());

    auto run_window = [&](size_t t) {
        const WindowPlacement& win = placements[t];
        WindowScores ws;
        std::vector<VoxelCoord> local;
        std::vector<float> feats;
        for (int64_t i = 0; i < st.size(); ++i) {
            if (!win.contains(st.coords[size_t(i)])) continue;
            ws.global_rows.push_back(int32_t(i));
            local.push_back(st.coords[size_t(i)] - win.origin);
            feats.push_back(st.features.at(i, 0));
        }
        if (local.empty()) {
            ws.probs = Matrix<float>(0, k);
            scores[t] = std::move(ws);
            return;
        }
        Matrix<float> logits;
        if (dense_mode) {
            Matrix<float> input(int64_t(local.size()), 1);
            input.data = std::move(feats);
            logits = dense_reference_forward(local, input, ckpt.params, ckpt.cfg, win.edge);
        } else {
            SparseTensorF window;
            window.coords = std::move(local);
            window.features = Matrix<float>(int64_t(window.coords.size()), 1);
            window.features.data = std::move(feats);
            const WindowPlan plan = build_plan(window.coords, ckpt.cfg.levels);
            logits = network_forward(window, ckpt.params, ckpt.cfg, plan).features;
        }
        ws.probs = softmax_rows(logits);
        scores[t] = std::move(ws);
    };

    if (workers == 1 || placements.size() <= 1) {
        for (size_t t = 0; t < placements.size(); ++t) run_window(t);
    } else {
        std::atomic<size_t> next{0};
        auto pull = [&] {
            for (;;) {
                const size_t t = next.fetch_add(1);
                if (t >= placements.size()) return;
                run_window(t);
            }
        };
        std::vector<std::thread> pool;
        const size_t n_threads = std::min(size_t(workers), placements.size());
        pool.reserve(n_threads);
        for (size_t i = 0; i < n_threads; ++i) pool.emplace_back(pull);
        for (std::thread& th : pool) th.join();
    }
    res.timings.forward_s = seconds_since(t_fwd);

    const auto t_fuse = Clock::now();
    const FusedPrediction fused =
        fuse_predictions(scores, placements, st.coords, fusion.decay_sigma, k);
    for (int64_t i = 0; i < st.size(); ++i) {
        const VoxelCoord& c = st.coords[size_t(i)];
        res.mask.data[size_t(res.mask.index(c.x, c.y, c.z))] = fused.labels[size_t(i)];
    }
    res.timings.fuse_s = seconds_since(t_fuse);
    return res;
}

} // namespace

PredictResult predict_volume(const Checkpoint& ckpt, const HuVolume& volume,
                             const FusionConfig& fusion, int window_edge, int workers) {
    return predict_impl(ckpt, volume, fusion, window_edge, workers, false);
}

PredictResult predict_volume_dense(const Checkpoint& ckpt, const HuVolume& volume,
                                   const FusionConfig& fusion, int window_edge) {
    return predict_impl(ckpt, volume, fusion, window_edge, 1, true);
}

} // namespace bonnet
