#include "bonnet/runner.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>
#include <utility>

#include <json.hpp>

#include "bonnet/io_ct.hpp"
#include "bonnet/rng.hpp"

namespace fs = std::filesystem;

namespace bonnet {

namespace {

nlohmann::json parse_json_file(const std::string& path) {
    const std::vector<unsigned char> bytes = read_file_bytes(path);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, path + ": " + e.what());
    }
}

void write_text_file(const std::string& path, const std::string& text) {
    write_file_bytes(path, text.data(), text.size());
}

std::string case_name(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%03d.rawz", prefix, i);
    return buf;
}

} // namespace

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

Dataset make_phantom_dataset(const PhantomSpec& spec, int count, uint64_t seed) {
    require(count >= 1, Err::InvalidConfig, "dataset needs at least one case");
    spec.validate();
    Dataset out;
    out.num_classes = spec.num_classes;
    out.volumes.reserve(size_t(count));
    out.labels.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        auto [hu, lab] = generate_phantom(spec, mix_seed(seed, uint64_t(i)));
        out.volumes.push_back(std::move(hu));
        out.labels.push_back(std::move(lab));
    }
    return out;
}

Dataset write_phantom_dataset(const std::string& dir, const PhantomSpec& spec, int count,
                              uint64_t seed) {
    Dataset data = make_phantom_dataset(spec, count, seed);
    fs::create_directories(dir);
    nlohmann::json cases = nlohmann::json::array();
    for (int i = 0; i < count; ++i) {
        const std::string vol = case_name("vol", i);
        const std::string lab = case_name("lab", i);
        write_rawz((fs::path(dir) / vol).string(), data.volumes[size_t(i)]);
        write_rawz((fs::path(dir) / lab).string(), data.labels[size_t(i)]);
        cases.push_back({{"volume", vol}, {"labels", lab}});
    }
    const nlohmann::json manifest{
        {"num_classes", data.num_classes},
        {"count", count},
        {"seed", seed},
        {"cases", cases},
        {"phantom_spec", nlohmann::json::parse(spec.to_json())},
    };
    write_text_file((fs::path(dir) / "dataset.json").string(), manifest.dump(2) + "\n");
    return data;
}

Dataset load_dataset(const std::string& dir) {
    const std::string manifest = (fs::path(dir) / "dataset.json").string();
    require(fs::exists(manifest), Err::ManifestMissing, "missing dataset manifest: " + manifest);
    const nlohmann::json j = parse_json_file(manifest);
    Dataset out;
    try {
        out.num_classes = j.at("num_classes").get<int>();
        for (const auto& c : j.at("cases")) {
            const auto vol = (fs::path(dir) / c.at("volume").get<std::string>()).string();
            const auto lab = (fs::path(dir) / c.at("labels").get<std::string>()).string();
            out.volumes.push_back(read_rawz_hu(vol));
            out.labels.push_back(read_rawz_labels(lab));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, manifest + ": " + e.what());
    }
    require(out.num_classes >= 2, Err::InvalidConfig, "dataset manifest needs num_classes >= 2");
    require(!out.volumes.empty(), Err::InvalidConfig, "dataset manifest lists no cases");
    for (size_t i = 0; i < out.volumes.size(); ++i)
        require(out.volumes[i].meta.shape == out.labels[i].meta.shape, Err::ShapeMismatch,
                "volume/label shape mismatch in case " + std::to_string(i));
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    net.validate();
    sampling.validate();
    loss.validate();
    adam.validate();
    fusion.validate();
    require(loss.num_classes == net.num_classes, Err::InvalidConfig,
            "loss and network disagree on K");
    require(steps >= 0, Err::InvalidConfig, "steps must be nonnegative");
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, std::string("bad training config: ") + e.what());
    }
    TrainConfig cfg;
    try {
        if (j.contains("net")) cfg.net = UNetConfig::from_json(j.at("net").dump());
        if (j.contains("sampling")) {
            const auto& s = j.at("sampling");
            if (s.contains("window_edge")) cfg.sampling.window_edge = s.at("window_edge").get<int>();
            if (s.contains("foreground_prob"))
                cfg.sampling.foreground_prob = s.at("foreground_prob").get<double>();
        }
        if (j.contains("loss")) {
            const auto& s = j.at("loss");
            if (s.contains("smoothing")) cfg.loss.smoothing = s.at("smoothing").get<double>();
            if (s.contains("dice_eps")) cfg.loss.dice_eps = s.at("dice_eps").get<double>();
        }
        if (j.contains("adam")) {
            const auto& s = j.at("adam");
            if (s.contains("lr")) cfg.adam.lr = s.at("lr").get<double>();
            if (s.contains("beta1")) cfg.adam.beta1 = s.at("beta1").get<double>();
            if (s.contains("beta2")) cfg.adam.beta2 = s.at("beta2").get<double>();
            if (s.contains("eps")) cfg.adam.eps = s.at("eps").get<double>();
        }
        if (j.contains("fusion")) {
            const auto& s = j.at("fusion");
            if (s.contains("overlap")) cfg.fusion.overlap = s.at("overlap").get<double>();
            if (s.contains("decay_sigma")) cfg.fusion.decay_sigma = s.at("decay_sigma").get<double>();
            if (s.contains("hu_lo")) cfg.fusion.hu_lo = s.at("hu_lo").get<int>();
            if (s.contains("hu_hi")) cfg.fusion.hu_hi = s.at("hu_hi").get<int>();
        }
        if (j.contains("steps")) cfg.steps = j.at("steps").get<int>();
        if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, std::string("bad training config: ") + e.what());
    }
    cfg.loss.num_classes = cfg.net.num_classes;
    cfg.validate();
    return cfg;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
    const std::vector<unsigned char> bytes = read_file_bytes(path);
    return from_json(std::string(bytes.begin(), bytes.end()));
}

std::string TrainConfig::to_json() const {
    const nlohmann::json j{
        {"net", nlohmann::json::parse(net.to_json())},
        {"sampling",
         {{"window_edge", sampling.window_edge}, {"foreground_prob", sampling.foreground_prob}}},
        {"loss", {{"smoothing", loss.smoothing}, {"dice_eps", loss.dice_eps}}},
        {"adam",
         {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
        {"fusion",
         {{"overlap", fusion.overlap},
          {"decay_sigma", fusion.decay_sigma},
          {"hu_lo", fusion.hu_lo},
          {"hu_hi", fusion.hu_hi}}},
        {"steps", steps},
        {"seed", seed},
    };
    return j.dump(2);
}

TrainResult train_run(const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    require(!data.volumes.empty(), Err::InvalidConfig, "training needs at least one volume");
    require(data.num_classes == cfg.net.num_classes, Err::InvalidConfig,
            "network K does not match the dataset");

    std::vector<const HuVolume*> vols;
    vols.reserve(data.volumes.size());
    for (const auto& v : data.volumes) vols.push_back(&v);
    const DatasetStats stats = compute_dataset_stats(vols, cfg.fusion);

    std::vector<SparseTensorF> prepped;
    std::vector<std::array<int32_t, 3>> shapes;
    prepped.reserve(data.volumes.size());
    for (size_t i = 0; i < data.volumes.size(); ++i) {
        prepped.push_back(
            zscore(hu_threshold_to_sparse(data.volumes[i], cfg.fusion, &data.labels[i]), stats));
        shapes.push_back(data.volumes[i].meta.shape);
        for (uint16_t l : *prepped.back().labels)
            require(l < cfg.net.num_classes, Err::LabelOutOfRange,
                    "label id exceeds K-1 in case " + std::to_string(i));
    }

    TrainResult out;
    out.ckpt.cfg = cfg.net;
    out.ckpt.stats = stats;
    out.ckpt.init_seed = cfg.seed;
    out.ckpt.params = init_network(cfg.net, cfg.seed);
    OptimState<float> opt = init_optim<float>(cfg.net, cfg.adam);

    // Weights draw from Rng(seed) inside init_network; sampling gets its own
    // mixed sub-stream so the two never overlap. Each step draws a volume
    // index, then a window; empty windows redraw both (bounded retries).
    Rng rng(mix_seed(cfg.seed, 1));
    out.losses.reserve(size_t(cfg.steps));
    for (int s = 0; s < cfg.steps; ++s) {
        SparseTensorF window;
        for (int attempt = 0;; ++attempt) {
            require(attempt < 100, Err::EmptyTensor,
                    "no nonempty training window in 100 attempts");
            const size_t vi = size_t(rng.below(uint64_t(prepped.size())));
            window = sample_training_window(prepped[vi], shapes[vi], cfg.sampling, rng);
            if (!window.coords.empty()) break;
        }
        out.losses.push_back(train_step(out.ckpt.params, opt, window, cfg.net, cfg.loss));
    }
    out.ckpt.optim = std::move(opt);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

std::map<std::string, double> eval_dice_report(const LabelVolume& pred, const LabelVolume& gt,
                                               const ClassGrouping& grouping) {
    require(pred.meta.shape == gt.meta.shape, Err::ShapeMismatch,
            "prediction/reference shape mismatch");
    ClassGrouping g = grouping;
    if (!g.groups.count("overall")) {
        std::set<uint16_t> all;
        for (uint16_t v : pred.data)
            if (v != 0) all.insert(v);
        for (uint16_t v : gt.data)
            if (v != 0) all.insert(v);
        g.groups["overall"] = std::move(all);
    }
    return hard_dice(pred.data, gt.data, g);
}

double mean_foreground_dice(const LabelVolume& pred, const LabelVolume& gt, int num_classes) {
    require(num_classes >= 2, Err::InvalidConfig, "K must be >= 2");
    ClassGrouping g;
    for (int c = 1; c < num_classes; ++c)
        g.groups["class_" + std::to_string(c)] = {uint16_t(c)};
    require(pred.meta.shape == gt.meta.shape, Err::ShapeMismatch,
            "prediction/reference shape mismatch");
    const auto per = hard_dice(pred.data, gt.data, g);
    double sum = 0.0;
    for (const auto& [name, dice] : per) sum += dice;
    return sum / double(per.size());
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

namespace {

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

PredictTimings median_timings(const std::vector<PredictTimings>& runs) {
    std::vector<double> pre, fwd, fuse;
    for (const auto& t : runs) {
        pre.push_back(t.preprocess_s);
        fwd.push_back(t.forward_s);
        fuse.push_back(t.fuse_s);
    }
    return {median_of(pre), median_of(fwd), median_of(fuse)};
}

} // namespace

BenchReport bench_run(const Checkpoint& ckpt, const HuVolume& volume, const FusionConfig& fusion,
                      int window_edge, bool run_sparse, bool run_dense, int repeat, int workers) {
    require(repeat >= 1, Err::InvalidConfig, "repeat must be >= 1");
    require(run_sparse || run_dense, Err::InvalidConfig, "benchmark needs at least one mode");
    BenchReport out;
    if (run_sparse) {
        BenchModeReport r;
        for (int i = 0; i < repeat; ++i) {
            PredictResult p = predict_volume(ckpt, volume, fusion, window_edge, workers);
            r.runs.push_back(p.timings);
            if (i + 1 == repeat) r.mask = std::move(p.mask); // runs agree bit-exactly
        }
        r.median = median_timings(r.runs);
        out.sparse = std::move(r);
    }
    if (run_dense) {
        BenchModeReport r;
        for (int i = 0; i < repeat; ++i) {
            PredictResult p = predict_volume_dense(ckpt, volume, fusion, window_edge);
            r.runs.push_back(p.timings);
            if (i + 1 == repeat) r.mask = std::move(p.mask);
        }
        r.median = median_timings(r.runs);
        out.dense = std::move(r);
    }
    if (out.sparse && out.dense) {
        const double s = out.sparse->median.forward_s;
        out.forward_ratio = s > 0.0 ? out.dense->median.forward_s / s : 0.0;
        out.masks_match = out.sparse->mask.meta.shape == out.dense->mask.meta.shape &&
                          out.sparse->mask.data == out.dense->mask.data;
    }
    return out;
}

} // namespace bonnet
