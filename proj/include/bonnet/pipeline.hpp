#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "bonnet/rng.hpp"
#include "bonnet/volume.hpp"
#include "bonnet/voxgrid.hpp"

namespace bonnet {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Training-set HU statistics over thresholded voxels (population sigma).
struct DatasetStats {
    double mu = 0.0;
    double sigma = 1.0;

    void validate() const {
        require(sigma > 0.0, Err::DegenerateStats, "sigma must be positive");
    }
};

struct SamplingConfig {
    int window_edge = 128;          // per axis (desk scale: 32)
    double foreground_prob = 0.33;  // rho

    void validate() const {
        require(window_edge >= 8, Err::InvalidConfig, "window edge must be >= 8");
        require(foreground_prob >= 0.0 && foreground_prob <= 1.0, Err::InvalidConfig,
                "rho must be in [0, 1]");
    }
};

struct FusionConfig {
    double overlap = 0.5;     // sliding-window overlap fraction
    double decay_sigma = 0.5; // Gaussian decay parameter
    int hu_lo = 200;          // inclusive HU retention range
    int hu_hi = 3000;

    void validate() const {
        require(overlap >= 0.0 && overlap < 1.0, Err::InvalidConfig, "overlap must be in [0, 1)");
        require(decay_sigma > 0.0, Err::InvalidConfig, "decay sigma must be positive");
        require(hu_lo < hu_hi, Err::InvalidConfig, "HU range is empty");
    }
};

// One sliding window: integer origin plus per-axis edge (clamped to the
// volume), with a real-valued center at origin + edge/2.
struct WindowPlacement {
    VoxelCoord origin;
    std::array<int32_t, 3> edge{0, 0, 0};

    std::array<double, 3> center() const {
        return {double(origin.x) + 0.5 * edge[0], double(origin.y) + 0.5 * edge[1],
                double(origin.z) + 0.5 * edge[2]};
    }

    bool contains(const VoxelCoord& c) const {
        return c.x >= origin.x && c.x < origin.x + edge[0] && c.y >= origin.y &&
               c.y < origin.y + edge[1] && c.z >= origin.z && c.z < origin.z + edge[2];
    }
};

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Keep voxels with HU in [hu_lo, hu_hi], inclusive both ends; rows emitted in
// scan order (z, then y, then x). Feature column is the raw HU. When a label
// volume is supplied its values are carried along.
SparseTensorF hu_threshold_to_sparse(const HuVolume& volume, const FusionConfig& cfg,
                                     const LabelVolume* labels = nullptr);

// mu/sigma over all thresholded voxels of all training volumes.
DatasetStats compute_dataset_stats(const std::vector<const HuVolume*>& volumes,
                                   const FusionConfig& cfg);

// feature <- (HU - mu) / sigma, in place on a copy.
SparseTensorF zscore(const SparseTensorF& st, const DatasetStats& stats);

// ---------------------------------------------------------------------------
// Window sampling and enumeration
// ---------------------------------------------------------------------------

// Random training crop in origin-relative coordinates. With probability rho a
// uniformly chosen foreground voxel becomes the window center (origin clamped
// to bounds); otherwise the origin is uniform over valid origins. Falls back
// to uniform when no foreground label exists.
SparseTensorF sample_training_window(const SparseTensorF& st,
                                     const std::array<int32_t, 3>& volume_shape,
                                     const SamplingConfig& cfg, Rng& rng,
                                     VoxelCoord* origin_out = nullptr);

// Overlapping sliding windows: per axis, origins at stride
// round(edge*(1-overlap)) from 0, plus a boundary-clamped final origin when
// needed; placements ordered lexicographically by origin (z, y, x).
std::vector<WindowPlacement> enumerate_inference_windows(const std::array<int32_t, 3>& volume_shape,
                                                         const FusionConfig& cfg, int window_edge);

// Gaussian decay weight, per-axis form:
// a_t(x) = exp(-sum_d (x_d - m_d)^2 / (2*(sigma*w_d)^2)).
double gaussian_weight(const VoxelCoord& x, const WindowPlacement& placement, double decay_sigma);

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

// Softmax scores of one window, mapped back to global support rows.
struct WindowScores {
    std::vector<int32_t> global_rows; // one global row per window row
    Matrix<float> probs;              // window rows x K
};

struct FusedPrediction {
    Matrix<float> probs;          // accumulated a_t * p_t, unnormalized
    std::vector<uint16_t> labels; // argmax per global row, ties to smallest id
};

// Accumulates per-voxel weighted scores over covering windows in placement
// order and takes the argmax. Every global row must be covered by at least
// one window.
FusedPrediction fuse_predictions(const std::vector<WindowScores>& windows,
                                 const std::vector<WindowPlacement>& placements,
                                 const std::vector<VoxelCoord>& global_coords,
                                 double decay_sigma, int num_classes);

// ---------------------------------------------------------------------------
// Synthetic phantoms
// ---------------------------------------------------------------------------

struct PhantomPrimitive {
    enum class Kind { Ellipsoid, Tube, StackedCylinders };

    Kind kind = Kind::Ellipsoid;
    uint16_t class_id = 1;
    std::array<double, 3> center{0.5, 0.5, 0.5}; // fractions of the volume extent
    std::array<double, 3> radii{0.1, 0.1, 0.1};  // fractions; tube/stack: axis entry = half-length
    int axis = 2;                                // tube / stack axis
    int count = 1;                               // stacked cylinder segments
    double gap = 0.25;                           // gap fraction of a segment period
};

struct PhantomSpec {
    std::array<int32_t, 3> shape{64, 64, 64};
    int num_classes = 4;
    std::vector<PhantomPrimitive> primitives;
    double bone_hu_mean = 700.0;
    double bone_hu_std = 150.0;
    std::array<double, 2> bone_hu_clip{250.0, 1500.0};
    double soft_tissue_hu = 40.0;
    double air_hu = -1000.0;
    double noise_std = 10.0;            // additive; clamped to +-3 sigma and +-49 HU
    double occupancy_ceiling = 0.05;    // max bone fraction of the volume
    std::array<double, 3> body_radii{0.46, 0.46, 0.49}; // soft-tissue ellipsoid
    double jitter = 0.02;               // per-phantom center/radius perturbation

    void validate() const;
    static PhantomSpec default_spec();
    static PhantomSpec from_json(const std::string& text);
    static PhantomSpec from_json_file(const std::string& path);
    std::string to_json() const;
};

// Rasterizes the primitives (later ones overwrite earlier), assigns HU by
// region, adds clamped noise. Deterministic in the seed.
std::pair<HuVolume, LabelVolume> generate_phantom(const PhantomSpec& spec, uint64_t seed);

} // namespace bonnet
