#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bonnet/network.hpp"
#include "bonnet/pipeline.hpp"
#include "bonnet/predict.hpp"

// Reusable command bodies: the CLI subcommands and the end-to-end tests call
// these, so both exercise exactly one code path.

namespace bonnet {

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Dataset {
    int num_classes = 0;
    std::vector<HuVolume> volumes;
    std::vector<LabelVolume> labels;
};

// Generates `count` phantom pairs (per-case seed mixed from `seed`), writes
// RAWZ pairs plus a dataset.json manifest into `dir`, and returns the set.
Dataset write_phantom_dataset(const std::string& dir, const PhantomSpec& spec, int count,
                              uint64_t seed);

// In-memory generation with the same per-case seeding, for tests.
Dataset make_phantom_dataset(const PhantomSpec& spec, int count, uint64_t seed);

Dataset load_dataset(const std::string& dir);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    UNetConfig net;
    SamplingConfig sampling;
    LossConfig loss;
    AdamConfig adam;
    FusionConfig fusion;
    int steps = 1200;
    uint64_t seed = 1;

    void validate() const;
    // Missing keys keep their defaults; `loss.num_classes` follows the net.
    static TrainConfig from_json(const std::string& text);
    static TrainConfig from_json_file(const std::string& path);
    std::string to_json() const;
};

struct TrainResult {
    Checkpoint ckpt;
    std::vector<double> losses; // one entry per step
};

// Dataset stats, init from seed, then `steps` single-window Adam steps with
// rho-prioritized sampling (empty windows are redrawn). Deterministic in
// (cfg.seed, dataset).
TrainResult train_run(const Dataset& data, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Per-group hard Dice (%), always including an "overall" group (union of all
// nonzero ids present in either volume) unless the grouping already has one.
std::map<std::string, double> eval_dice_report(const LabelVolume& pred, const LabelVolume& gt,
                                               const ClassGrouping& grouping);

// Mean over foreground classes 1..K-1 of per-class hard Dice (%).
double mean_foreground_dice(const LabelVolume& pred, const LabelVolume& gt, int num_classes);

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct BenchModeReport {
    std::vector<PredictTimings> runs;
    PredictTimings median; // per stage, over runs
    LabelVolume mask;      // from the last run
};

struct BenchReport {
    std::optional<BenchModeReport> sparse;
    std::optional<BenchModeReport> dense;
    double forward_ratio = 0.0; // dense median / sparse median, when both ran
    bool masks_match = false;   // byte equality of the two masks, when both ran
};

BenchReport bench_run(const Checkpoint& ckpt, const HuVolume& volume, const FusionConfig& fusion,
                      int window_edge, bool run_sparse, bool run_dense, int repeat, int workers);

} // namespace bonnet
