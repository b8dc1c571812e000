#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bonnet/io_ct.hpp"
#include "bonnet/predict.hpp"
#include "bonnet/runner.hpp"

// Exit codes: 0 success, 1 usage error, 2 data/format error. A run manifest
// (JSON) is written beside every command's primary output on success, never
// on a usage error. Human-readable output goes to stdout, diagnostics to
// stderr.

namespace {

using namespace bonnet;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

HuVolume read_volume_any(const std::string& path) {
    if (ends_with(path, ".nii") || ends_with(path, ".nii.gz")) return read_nifti1(path);
    return read_rawz_hu(path);
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    const std::string text = j.dump(2) + "\n";
    write_file_bytes(path, text.data(), text.size());
}

nlohmann::json timings_json(const PredictTimings& t) {
    return {{"preprocess_s", t.preprocess_s}, {"forward_s", t.forward_s}, {"fuse_s", t.fuse_s}};
}

// Resolves the worker count: explicit --workers wins, then BONNET_NUM_WORKERS,
// then 1. Returns -1 (usage error) for a malformed environment value.
int resolve_workers(const CLI::Option* flag, int flag_value) {
    if (flag->count() > 0) return flag_value;
    const char* env = std::getenv("BONNET_NUM_WORKERS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == nullptr || *end != '\0' || v < 1 || v > 4096) {
        std::cerr << "bonnet: BONNET_NUM_WORKERS must be an integer in [1, 4096], got \"" << env
                  << "\"\n";
        return -1;
    }
    return int(v);
}

// --- phantom ---------------------------------------------------------------

struct PhantomArgs {
    std::string out_dir;
    std::string spec_path;
    int count = 1;
    uint64_t seed = 1;
};

int cmd_phantom(const PhantomArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    const PhantomSpec spec =
        a.spec_path.empty() ? PhantomSpec::default_spec() : PhantomSpec::from_json_file(a.spec_path);
    write_phantom_dataset(a.out_dir, spec, a.count, a.seed);
    const double gen_s = seconds_since(t0);

    const nlohmann::json manifest{
        {"command", "phantom"},
        {"spec", nlohmann::json::parse(spec.to_json())},
        {"spec_file", a.spec_path},
        {"count", a.count},
        {"seed", a.seed},
        {"out_dir", a.out_dir},
        {"timings", {{"preprocess_s", gen_s}, {"forward_s", 0.0}, {"fuse_s", 0.0}}},
        {"exit_status", 0},
    };
    write_json_file(a.out_dir + "/run.manifest.json", manifest);
    std::cout << "wrote " << a.count << " phantom pair(s) to " << a.out_dir << " in " << gen_s
              << " s\n";
    return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
    std::string data_dir;
    std::string config_path;
    std::string out_path;
    int steps = -1;       // -1: keep the config value
    long long seed = -1;  // -1: keep the config value
};

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg =
        a.config_path.empty() ? TrainConfig{} : TrainConfig::from_json_file(a.config_path);
    if (a.steps >= 0) cfg.steps = a.steps;
    if (a.seed >= 0) cfg.seed = uint64_t(a.seed);

    const Dataset data = load_dataset(a.data_dir);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult res = train_run(data, cfg);
    const double train_s = seconds_since(t0);

    save_checkpoint(a.out_path, res.ckpt);
    const std::string csv_path = a.out_path + ".loss.csv";
    std::string csv;
    for (size_t i = 0; i < res.losses.size(); ++i) {
        char line[64];
        std::snprintf(line, sizeof line, "%zu,%.17g\n", i, res.losses[i]);
        csv += line;
    }
    write_file_bytes(csv_path, csv.data(), csv.size());

    const nlohmann::json manifest{
        {"command", "train"},
        {"config", nlohmann::json::parse(cfg.to_json())},
        {"config_file", a.config_path},
        {"data_dir", a.data_dir},
        {"checkpoint", a.out_path},
        {"loss_csv", csv_path},
        {"final_loss", res.losses.empty() ? 0.0 : res.losses.back()},
        {"timings", {{"preprocess_s", 0.0}, {"forward_s", train_s}, {"fuse_s", 0.0}}},
        {"exit_status", 0},
    };
    write_json_file(a.out_path + ".manifest.json", manifest);
    std::cout << "trained " << cfg.steps << " step(s) in " << train_s << " s";
    if (!res.losses.empty()) std::cout << "; final loss " << res.losses.back();
    std::cout << "; wrote " << a.out_path << "\n";
    return 0;
}

// --- infer -----------------------------------------------------------------

struct InferArgs {
    std::string ckpt_path;
    std::string in_path;
    std::string out_path;
    int window = 128;
    int workers = 1;
};

int cmd_infer(const InferArgs& a) {
    const Checkpoint ckpt = load_checkpoint(a.ckpt_path);
    const HuVolume volume = read_volume_any(a.in_path);
    const FusionConfig fusion; // method constants: HU [200,3000], overlap 0.5, sigma 0.5
    const PredictResult res = predict_volume(ckpt, volume, fusion, a.window, a.workers);
    export_mask(a.out_path, res.mask);

    const nlohmann::json manifest{
        {"command", "infer"},
        {"checkpoint", a.ckpt_path},
        {"input", a.in_path},
        {"mask", a.out_path},
        {"window", a.window},
        {"workers", a.workers},
        {"net", nlohmann::json::parse(ckpt.cfg.to_json())},
        {"timings", timings_json(res.timings)},
        {"exit_status", 0},
    };
    write_json_file(a.out_path + ".manifest.json", manifest);
    std::cout << "segmented " << volume.meta.shape[0] << "x" << volume.meta.shape[1] << "x"
              << volume.meta.shape[2] << ": preprocess " << res.timings.preprocess_s
              << " s, forward " << res.timings.forward_s << " s, fuse " << res.timings.fuse_s
              << " s; wrote " << a.out_path << "\n";
    return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string pred_path;
    std::string gt_path;
    std::string groups_path;
    std::string out_path; // default: <pred>.dice.json
};

int cmd_eval(const EvalArgs& a) {
    const LabelVolume pred = read_rawz_labels(a.pred_path);
    const LabelVolume gt = read_rawz_labels(a.gt_path);
    const ClassGrouping grouping = ClassGrouping::from_json_file(a.groups_path);
    const auto report = eval_dice_report(pred, gt, grouping);

    nlohmann::json dice;
    for (const auto& [name, value] : report) {
        dice[name] = value;
        std::printf("%-24s %8.2f\n", name.c_str(), value);
    }
    const std::string out = a.out_path.empty() ? a.pred_path + ".dice.json" : a.out_path;
    const nlohmann::json manifest{
        {"command", "eval"},
        {"pred", a.pred_path},
        {"gt", a.gt_path},
        {"groups_file", a.groups_path},
        {"dice", dice},
        {"timings", {{"preprocess_s", 0.0}, {"forward_s", 0.0}, {"fuse_s", 0.0}}},
        {"exit_status", 0},
    };
    write_json_file(out, manifest);
    return 0;
}

// --- bench -----------------------------------------------------------------

struct BenchArgs {
    std::string ckpt_path;
    std::string in_path;
    std::string out_path; // default: <in>.bench.json
    std::string mode = "both";
    int repeat = 5;
    int window = 128;
    int workers = 1;
};

nlohmann::json mode_report_json(const BenchModeReport& r) {
    nlohmann::json pre = nlohmann::json::array(), fwd = nlohmann::json::array(),
                   fuse = nlohmann::json::array();
    for (const auto& t : r.runs) {
        pre.push_back(t.preprocess_s);
        fwd.push_back(t.forward_s);
        fuse.push_back(t.fuse_s);
    }
    return {{"samples", {{"preprocess_s", pre}, {"forward_s", fwd}, {"fuse_s", fuse}}},
            {"median", timings_json(r.median)}};
}

int cmd_bench(const BenchArgs& a) {
    const Checkpoint ckpt = load_checkpoint(a.ckpt_path);
    const HuVolume volume = read_volume_any(a.in_path);
    const FusionConfig fusion;
    const bool run_sparse = a.mode == "sparse" || a.mode == "both";
    const bool run_dense = a.mode == "dense" || a.mode == "both";
    const BenchReport rep =
        bench_run(ckpt, volume, fusion, a.window, run_sparse, run_dense, a.repeat, a.workers);

    nlohmann::json manifest{
        {"command", "bench"}, {"checkpoint", a.ckpt_path}, {"input", a.in_path},
        {"mode", a.mode},     {"repeat", a.repeat},        {"window", a.window},
        {"workers", a.workers}, {"exit_status", 0},
    };
    if (rep.sparse) {
        manifest["sparse"] = mode_report_json(*rep.sparse);
        std::cout << "sparse  forward median " << rep.sparse->median.forward_s << " s (preprocess "
                  << rep.sparse->median.preprocess_s << " s, fuse " << rep.sparse->median.fuse_s
                  << " s) over " << a.repeat << " run(s)\n";
    }
    if (rep.dense) {
        manifest["dense"] = mode_report_json(*rep.dense);
        std::cout << "dense   forward median " << rep.dense->median.forward_s << " s (preprocess "
                  << rep.dense->median.preprocess_s << " s, fuse " << rep.dense->median.fuse_s
                  << " s) over " << a.repeat << " run(s)\n";
    }
    manifest["timings"] = timings_json(rep.sparse ? rep.sparse->median : rep.dense->median);
    if (rep.sparse && rep.dense) {
        manifest["forward_ratio"] = rep.forward_ratio;
        manifest["masks_match"] = rep.masks_match;
        std::cout << "dense/sparse forward ratio: " << rep.forward_ratio << "; masks "
                  << (rep.masks_match ? "match" : "DIFFER") << "\n";
    }
    write_json_file(a.out_path.empty() ? a.in_path + ".bench.json" : a.out_path, manifest);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"bonnet: sparse-voxel CT bone segmentation"};
    app.require_subcommand(1);

    PhantomArgs pa;
    CLI::App* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
    phantom->add_option("--out", pa.out_dir, "output dataset directory")->required();
    phantom->add_option("--count", pa.count, "number of phantom pairs")
        ->required()
        ->check(CLI::PositiveNumber);
    phantom->add_option("--seed", pa.seed, "base RNG seed (per-case seeds are mixed from it)");
    phantom->add_option("--spec", pa.spec_path, "phantom spec JSON (default: built-in spine/rib/hip scene)");

    TrainArgs ta;
    CLI::App* train = app.add_subcommand("train", "train a network on a phantom dataset");
    train->add_option("--data", ta.data_dir, "dataset directory (with dataset.json)")->required();
    train->add_option("--out", ta.out_path, "output checkpoint path")->required();
    train->add_option("--config", ta.config_path, "training config JSON");
    train->add_option("--steps", ta.steps, "override step count")->check(CLI::NonNegativeNumber);
    train->add_option("--seed", ta.seed, "override RNG seed")->check(CLI::NonNegativeNumber);

    InferArgs ia;
    CLI::App* infer = app.add_subcommand("infer", "segment a volume with a trained checkpoint");
    infer->add_option("--ckpt", ia.ckpt_path, "checkpoint path")->required();
    infer->add_option("--in", ia.in_path, "input volume (.rawz, .nii, .nii.gz)")->required();
    infer->add_option("--out", ia.out_path, "output mask path (RAWZ, labels)")->required();
    infer->add_option("--window", ia.window, "sliding-window edge (voxels)")
        ->check(CLI::Range(8, 4096));
    CLI::Option* infer_workers =
        infer->add_option("--workers", ia.workers, "window worker threads")->check(CLI::Range(1, 4096));

    EvalArgs ea;
    CLI::App* eval = app.add_subcommand("eval", "per-group Dice between two label volumes");
    eval->add_option("--pred", ea.pred_path, "predicted mask (RAWZ labels)")->required();
    eval->add_option("--gt", ea.gt_path, "reference mask (RAWZ labels)")->required();
    eval->add_option("--groups", ea.groups_path, "class grouping JSON")->required();
    eval->add_option("--out", ea.out_path, "report path (default: <pred>.dice.json)");

    BenchArgs ba;
    CLI::App* bench = app.add_subcommand("bench", "time sparse vs dense-reference inference");
    bench->add_option("--ckpt", ba.ckpt_path, "checkpoint path")->required();
    bench->add_option("--in", ba.in_path, "input volume")->required();
    bench->add_option("--mode", ba.mode, "sparse | dense | both")
        ->check(CLI::IsMember({"sparse", "dense", "both"}));
    bench->add_option("--repeat", ba.repeat, "runs per mode (median reported)")
        ->check(CLI::PositiveNumber);
    bench->add_option("--window", ba.window, "sliding-window edge (voxels)")
        ->check(CLI::Range(8, 4096));
    CLI::Option* bench_workers =
        bench->add_option("--workers", ba.workers, "window worker threads")->check(CLI::Range(1, 4096));
    bench->add_option("--out", ba.out_path, "report path (default: <in>.bench.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e); // prints help, exits 0
    } catch (const CLI::ParseError& e) {
        app.exit(e); // prints the diagnostic to stderr
        return 1;
    }

    try {
        if (phantom->parsed()) return cmd_phantom(pa);
        if (train->parsed()) return cmd_train(ta);
        if (infer->parsed()) {
            ia.workers = resolve_workers(infer_workers, ia.workers);
            if (ia.workers < 0) return 1;
            return cmd_infer(ia);
        }
        if (eval->parsed()) return cmd_eval(ea);
        if (bench->parsed()) {
            ba.workers = resolve_workers(bench_workers, ba.workers);
            if (ba.workers < 0) return 1;
            return cmd_bench(ba);
        }
    } catch (const Error& e) {
        std::cerr << "bonnet: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "bonnet: " << e.what() << "\n";
        return 2;
    }
    return 1; // unreachable: require_subcommand(1)
}
