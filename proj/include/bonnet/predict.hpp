#pragma once

#include "bonnet/network.hpp"
#include "bonnet/pipeline.hpp"
#include "bonnet/volume.hpp"

namespace bonnet {

struct PredictTimings {
    double preprocess_s = 0.0;
    double forward_s = 0.0;
    double fuse_s = 0.0;
};

struct PredictResult {
    LabelVolume mask;
    PredictTimings timings;
};

// Full-volume inference: threshold -> z-score -> per-window forward + softmax
// (parallel across windows) -> Gaussian-decay fusion -> dense label grid.
// Sub-threshold voxels stay background. Output is worker-count independent,
// bit-exactly: windows are computed independently and fused in placement
// order.
PredictResult predict_volume(const Checkpoint& ckpt, const HuVolume& volume,
                             const FusionConfig& fusion, int window_edge, int workers);

// Same pipeline with the dense reference forward in place of the sparse
// engine; benchmark foil and full-network oracle. Single-threaded.
PredictResult predict_volume_dense(const Checkpoint& ckpt, const HuVolume& volume,
                                   const FusionConfig& fusion, int window_edge);

} // namespace bonnet
