#include "bonnet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bonnet {

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

SparseTensorF hu_threshold_to_sparse(const HuVolume& volume, const FusionConfig& cfg,
                                     const LabelVolume* labels) {
    volume.check_consistent();
    cfg.validate();
    if (labels) {
        labels->check_consistent();
        require(labels->meta.shape == volume.meta.shape, Err::ShapeMismatch,
                "label volume shape differs from HU volume shape");
    }

    const auto& shape = volume.meta.shape;
    SparseTensorF st;
    std::vector<float> feats;
    std::vector<uint16_t> labs;
    for (int32_t z = 0; z < shape[2]; ++z)
        for (int32_t y = 0; y < shape[1]; ++y)
            for (int32_t x = 0; x < shape[0]; ++x) {
                const int16_t hu = volume.at(x, y, z);
                if (hu < cfg.hu_lo || hu > cfg.hu_hi) continue;
                st.coords.push_back({x, y, z});
                feats.push_back(float(hu));
                if (labels) labs.push_back(labels->at(x, y, z));
            }
    st.features.rows = int64_t(feats.size());
    st.features.cols = 1;
    st.features.data = std::move(feats);
    if (labels) st.labels = std::move(labs);
    return st;
}

DatasetStats compute_dataset_stats(const std::vector<const HuVolume*>& volumes,
                                   const FusionConfig& cfg) {
    cfg.validate();
    int64_t count = 0;
    double sum = 0.0;
    for (const HuVolume* v : volumes) {
        v->check_consistent();
        for (int16_t hu : v->data) {
            if (hu < cfg.hu_lo || hu > cfg.hu_hi) continue;
            sum += double(hu);
            ++count;
        }
    }
    require(count > 0, Err::EmptyTensor, "no voxel in the HU range across the training set");
    const double mu = sum / double(count);

    double sq = 0.0;
    for (const HuVolume* v : volumes)
        for (int16_t hu : v->data) {
            if (hu < cfg.hu_lo || hu > cfg.hu_hi) continue;
            const double d = double(hu) - mu;
            sq += d * d;
        }
    const double sigma = std::sqrt(sq / double(count));
    require(sigma >= 1e-6, Err::DegenerateStats, "HU standard deviation below 1e-6");
    return {mu, sigma};
}

SparseTensorF zscore(const SparseTensorF& st, const DatasetStats& stats) {
    stats.validate();
    st.check_consistent();
    SparseTensorF out = st;
    for (float& f : out.features.data)
        f = float((double(f) - stats.mu) / stats.sigma);
    return out;
}

// ---------------------------------------------------------------------------
// Window sampling and enumeration
// ---------------------------------------------------------------------------

SparseTensorF sample_training_window(const SparseTensorF& st,
                                     const std::array<int32_t, 3>& volume_shape,
                                     const SamplingConfig& cfg, Rng& rng,
                                     VoxelCoord* origin_out) {
    cfg.validate();
    st.check_consistent();
    require(st.size() > 0, Err::EmptyTensor, "cannot sample a window from an empty tensor");

    std::array<int32_t, 3> edge{};
    for (int d = 0; d < 3; ++d) {
        require(volume_shape[size_t(d)] >= 1, Err::InvalidConfig, "volume shape must be positive");
        edge[size_t(d)] = std::min(cfg.window_edge, volume_shape[size_t(d)]);
    }

    std::vector<int64_t> foreground;
    if (st.labels)
        for (int64_t i = 0; i < st.size(); ++i)
            if ((*st.labels)[size_t(i)] > 0) foreground.push_back(i);

    // Draw order is part of the reproducibility contract: one branch draw,
    // then either one foreground pick or three origin components (x, y, z).
    const bool prioritize = rng.uniform() < cfg.foreground_prob && !foreground.empty();

    VoxelCoord origin;
    if (prioritize) {
        const VoxelCoord c = st.coords[size_t(foreground[size_t(rng.below(foreground.size()))])];
        const int32_t cs[3] = {c.x, c.y, c.z};
        int32_t o[3];
        for (int d = 0; d < 3; ++d) {
            const int32_t hi = volume_shape[size_t(d)] - edge[size_t(d)];
            o[d] = std::clamp(cs[d] - edge[size_t(d)] / 2, 0, hi);
        }
        origin = {o[0], o[1], o[2]};
    } else {
        int32_t o[3];
        for (int d = 0; d < 3; ++d)
            o[d] = int32_t(rng.range(0, volume_shape[size_t(d)] - edge[size_t(d)]));
        origin = {o[0], o[1], o[2]};
    }
    if (origin_out) *origin_out = origin;

    WindowPlacement win{origin, edge};
    SparseTensorF out;
    std::vector<float> feats;
    std::vector<uint16_t> labs;
    const int64_t channels = st.channels();
    for (int64_t i = 0; i < st.size(); ++i) {
        if (!win.contains(st.coords[size_t(i)])) continue;
        out.coords.push_back(st.coords[size_t(i)] - origin);
        const float* row = st.features.row(i);
        feats.insert(feats.end(), row, row + channels);
        if (st.labels) labs.push_back((*st.labels)[size_t(i)]);
    }
    out.features.rows = int64_t(out.coords.size());
    out.features.cols = channels;
    out.features.data = std::move(feats);
    if (st.labels) out.labels = std::move(labs);
    return out;
}

namespace {

std::vector<int32_t> axis_origins(int32_t extent, int32_t edge, double overlap) {
    const int32_t eff = std::min(edge, extent);
    const int32_t stride = std::max<int32_t>(1, int32_t(std::lround(double(eff) * (1.0 - overlap))));
    std::vector<int32_t> origins;
    for (int32_t o = 0; o + eff <= extent; o += stride) origins.push_back(o);
    if (origins.back() + eff < extent) origins.push_back(extent - eff);
    return origins;
}

} // namespace

std::vector<WindowPlacement> enumerate_inference_windows(const std::array<int32_t, 3>& volume_shape,
                                                         const FusionConfig& cfg, int window_edge) {
    cfg.validate();
    require(window_edge >= 1, Err::InvalidConfig, "window edge must be >= 1");
    for (int32_t s : volume_shape)
        require(s >= 1, Err::InvalidConfig, "volume shape must be positive");

    std::array<std::vector<int32_t>, 3> per_axis;
    std::array<int32_t, 3> eff{};
    for (int d = 0; d < 3; ++d) {
        per_axis[size_t(d)] = axis_origins(volume_shape[size_t(d)], window_edge, cfg.overlap);
        eff[size_t(d)] = std::min(window_edge, volume_shape[size_t(d)]);
    }

    std::vector<WindowPlacement> out;
    out.reserve(per_axis[0].size() * per_axis[1].size() * per_axis[2].size());
    for (int32_t oz : per_axis[2])
        for (int32_t oy : per_axis[1])
            for (int32_t ox : per_axis[0])
                out.push_back({{ox, oy, oz}, eff});
    return out;
}

double gaussian_weight(const VoxelCoord& x, const WindowPlacement& placement, double decay_sigma) {
    const auto m = placement.center();
    const double pos[3] = {double(x.x), double(x.y), double(x.z)};
    double expo = 0.0;
    for (int d = 0; d < 3; ++d) {
        const double w = double(placement.edge[size_t(d)]);
        const double diff = pos[d] - m[size_t(d)];
        expo += diff * diff / (2.0 * (decay_sigma * w) * (decay_sigma * w));
    }
    return std::exp(-expo);
}

FusedPrediction fuse_predictions(const std::vector<WindowScores>& windows,
                                 const std::vector<WindowPlacement>& placements,
                                 const std::vector<VoxelCoord>& global_coords,
                                 double decay_sigma, int num_classes) {
    require(windows.size() == placements.size(), Err::ShapeMismatch,
            "one score block per placement required");
    require(num_classes >= 2, Err::InvalidConfig, "need at least two classes");
    require(decay_sigma > 0.0, Err::InvalidConfig, "decay sigma must be positive");

    const int64_t n = int64_t(global_coords.size());
    FusedPrediction fused;
    fused.probs = Matrix<float>(n, num_classes);
    std::vector<char> covered(size_t(n), 0);

    // Fixed iteration order (placement, then window row): the float
    // accumulations below are bit-reproducible regardless of how the window
    // scores were produced.
    for (size_t t = 0; t < windows.size(); ++t) {
        const WindowScores& ws = windows[t];
        require(ws.probs.rows == int64_t(ws.global_rows.size()), Err::ShapeMismatch,
                "window probability rows != mapped row count");
        require(ws.probs.cols == num_classes, Err::ShapeMismatch,
                "window probability columns != class count");
        for (int64_t r = 0; r < ws.probs.rows; ++r) {
            const int32_t g = ws.global_rows[size_t(r)];
            require(g >= 0 && int64_t(g) < n, Err::ShapeMismatch,
                    "window row maps outside the global support");
            const VoxelCoord& c = global_coords[size_t(g)];
            require(placements[t].contains(c), Err::SupportMismatch,
                    "window score refers to a voxel outside its placement");
            const float a = float(gaussian_weight(c, placements[t], decay_sigma));
            const float* p = ws.probs.row(r);
            float* acc = fused.probs.row(g);
            for (int c_id = 0; c_id < num_classes; ++c_id) acc[c_id] += a * p[c_id];
            covered[size_t(g)] = 1;
        }
    }

    for (int64_t i = 0; i < n; ++i)
        require(covered[size_t(i)] != 0, Err::UncoveredVoxel,
                "active voxel covered by no window");

    fused.labels.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
        const float* row = fused.probs.row(i);
        int best = 0;
        for (int c_id = 1; c_id < num_classes; ++c_id)
            if (row[c_id] > row[best]) best = c_id; // ties keep the smaller id
        fused.labels[size_t(i)] = uint16_t(best);
    }
    return fused;
}

// ---------------------------------------------------------------------------
// Synthetic phantoms
// ---------------------------------------------------------------------------

namespace {

double noise_clamp_hu(double noise_std) { return std::min(3.0 * noise_std, 49.0); }

const char* primitive_kind_name(PhantomPrimitive::Kind kind) {
    switch (kind) {
    case PhantomPrimitive::Kind::Ellipsoid: return "ellipsoid";
    case PhantomPrimitive::Kind::Tube: return "tube";
    case PhantomPrimitive::Kind::StackedCylinders: return "stacked_cylinders";
    }
    fail(Err::UnknownKind, "unhandled primitive kind");
}

PhantomPrimitive::Kind primitive_kind_from_name(const std::string& name) {
    if (name == "ellipsoid") return PhantomPrimitive::Kind::Ellipsoid;
    if (name == "tube") return PhantomPrimitive::Kind::Tube;
    if (name == "stacked_cylinders") return PhantomPrimitive::Kind::StackedCylinders;
    fail(Err::UnknownKind, "unknown primitive kind '" + name + "'");
}

} // namespace

void PhantomSpec::validate() const {
    for (int32_t s : shape)
        require(s >= 8, Err::InvalidConfig, "phantom extent must be >= 8 per axis");
    require(num_classes >= 2 && num_classes <= 65535, Err::InvalidConfig,
            "class count must be in [2, 65535]");
    require(!primitives.empty(), Err::InvalidConfig, "phantom needs at least one primitive");
    for (const PhantomPrimitive& p : primitives) {
        require(p.class_id >= 1 && int(p.class_id) < num_classes, Err::LabelOutOfRange,
                "primitive class id must be in [1, K)");
        for (double r : p.radii)
            require(r > 0.0, Err::InvalidConfig, "primitive radii must be positive");
        require(p.axis >= 0 && p.axis <= 2, Err::InvalidConfig, "primitive axis must be 0, 1 or 2");
        require(p.count >= 1, Err::InvalidConfig, "segment count must be >= 1");
        require(p.gap >= 0.0 && p.gap < 1.0, Err::InvalidConfig, "gap fraction must be in [0, 1)");
    }
    require(bone_hu_std >= 0.0 && noise_std >= 0.0, Err::InvalidConfig,
            "HU spreads must be nonnegative");
    require(bone_hu_clip[0] < bone_hu_clip[1], Err::InvalidConfig, "bone HU clip range is empty");
    // Guarantees every labeled voxel survives HU thresholding at 200.
    require(bone_hu_clip[0] - noise_clamp_hu(noise_std) >= 200.0, Err::InvalidConfig,
            "bone HU floor minus worst-case noise must stay >= 200");
    require(occupancy_ceiling > 0.0 && occupancy_ceiling <= 1.0, Err::InvalidConfig,
            "occupancy ceiling must be in (0, 1]");
    require(jitter >= 0.0 && jitter < 0.2, Err::InvalidConfig, "jitter must be in [0, 0.2)");
    for (double r : body_radii)
        require(r > 0.0 && r <= 0.5, Err::InvalidConfig, "body radii must be in (0, 0.5]");
}

PhantomSpec PhantomSpec::default_spec() {
    PhantomSpec spec;
    spec.shape = {64, 64, 64};
    spec.num_classes = 4;

    PhantomPrimitive spine;
    spine.kind = PhantomPrimitive::Kind::StackedCylinders;
    spine.class_id = 2;
    spine.center = {0.50, 0.58, 0.50};
    spine.radii = {0.080, 0.080, 0.42}; // cross radii, half-length on z
    spine.axis = 2;
    spine.count = 5;
    spine.gap = 0.22;
    spec.primitives.push_back(spine);

    for (int i = 0; i < 4; ++i) {
        PhantomPrimitive rib;
        rib.kind = PhantomPrimitive::Kind::Tube;
        rib.class_id = 1;
        rib.center = {0.30, 0.42 + 0.10 * (i % 2), 0.22 + 0.18 * i};
        rib.radii = {0.26, 0.032, 0.032}; // half-length on x, cross radii
        rib.axis = 0;
        spec.primitives.push_back(rib);
    }

    for (int side = 0; side < 2; ++side) {
        PhantomPrimitive hip;
        hip.kind = PhantomPrimitive::Kind::Ellipsoid;
        hip.class_id = 3;
        hip.center = {side == 0 ? 0.34 : 0.66, 0.56, 0.12};
        hip.radii = {0.10, 0.075, 0.065};
        spec.primitives.push_back(hip);
    }
    return spec;
}

PhantomSpec PhantomSpec::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, std::string("phantom spec JSON: ") + e.what());
    }
    PhantomSpec spec = default_spec();
    try {
        if (j.contains("shape"))
            for (int d = 0; d < 3; ++d) spec.shape[size_t(d)] = j["shape"].at(size_t(d)).get<int32_t>();
        spec.num_classes = j.value("num_classes", spec.num_classes);
        spec.bone_hu_mean = j.value("bone_hu_mean", spec.bone_hu_mean);
        spec.bone_hu_std = j.value("bone_hu_std", spec.bone_hu_std);
        if (j.contains("bone_hu_clip"))
            for (int d = 0; d < 2; ++d)
                spec.bone_hu_clip[size_t(d)] = j["bone_hu_clip"].at(size_t(d)).get<double>();
        spec.soft_tissue_hu = j.value("soft_tissue_hu", spec.soft_tissue_hu);
        spec.air_hu = j.value("air_hu", spec.air_hu);
        spec.noise_std = j.value("noise_std", spec.noise_std);
        spec.occupancy_ceiling = j.value("occupancy_ceiling", spec.occupancy_ceiling);
        spec.jitter = j.value("jitter", spec.jitter);
        if (j.contains("body_radii"))
            for (int d = 0; d < 3; ++d)
                spec.body_radii[size_t(d)] = j["body_radii"].at(size_t(d)).get<double>();
        if (j.contains("primitives")) {
            spec.primitives.clear();
            for (const auto& pj : j["primitives"]) {
                PhantomPrimitive p;
                p.kind = primitive_kind_from_name(pj.value("kind", std::string("ellipsoid")));
                p.class_id = uint16_t(pj.value("class_id", 1));
                if (pj.contains("center"))
                    for (int d = 0; d < 3; ++d) p.center[size_t(d)] = pj["center"].at(size_t(d)).get<double>();
                if (pj.contains("radii"))
                    for (int d = 0; d < 3; ++d) p.radii[size_t(d)] = pj["radii"].at(size_t(d)).get<double>();
                p.axis = pj.value("axis", p.axis);
                p.count = pj.value("count", p.count);
                p.gap = pj.value("gap", p.gap);
                spec.primitives.push_back(p);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, std::string("phantom spec JSON: ") + e.what());
    }
    spec.validate();
    return spec;
}

PhantomSpec PhantomSpec::from_json_file(const std::string& path) {
    std::ifstream in(path);
    require(bool(in), Err::IoError, "cannot open phantom spec '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

std::string PhantomSpec::to_json() const {
    nlohmann::json j;
    j["shape"] = shape;
    j["num_classes"] = num_classes;
    j["bone_hu_mean"] = bone_hu_mean;
    j["bone_hu_std"] = bone_hu_std;
    j["bone_hu_clip"] = bone_hu_clip;
    j["soft_tissue_hu"] = soft_tissue_hu;
    j["air_hu"] = air_hu;
    j["noise_std"] = noise_std;
    j["occupancy_ceiling"] = occupancy_ceiling;
    j["jitter"] = jitter;
    j["body_radii"] = body_radii;
    j["primitives"] = nlohmann::json::array();
    for (const PhantomPrimitive& p : primitives) {
        nlohmann::json pj;
        pj["kind"] = primitive_kind_name(p.kind);
        pj["class_id"] = p.class_id;
        pj["center"] = p.center;
        pj["radii"] = p.radii;
        pj["axis"] = p.axis;
        pj["count"] = p.count;
        pj["gap"] = p.gap;
        j["primitives"].push_back(pj);
    }
    return j.dump(2);
}

namespace {

struct RealPrimitive {
    PhantomPrimitive::Kind kind;
    uint16_t class_id;
    double center[3];
    double radii[3];
    int axis;
    int count;
    double gap;
};

// Fractional spec -> voxel units, with per-primitive jitter applied.
RealPrimitive realize(const PhantomPrimitive& p, const std::array<int32_t, 3>& shape,
                      double jitter, Rng& rng) {
    RealPrimitive r{};
    r.kind = p.kind;
    r.class_id = p.class_id;
    r.axis = p.axis;
    r.count = p.count;
    r.gap = p.gap;
    // Four draws per primitive, always taken, so the stream shape does not
    // depend on the jitter amount.
    double dc[3], ds;
    for (int d = 0; d < 3; ++d) dc[d] = jitter * (2.0 * rng.uniform() - 1.0);
    ds = 1.0 + jitter * (2.0 * rng.uniform() - 1.0);
    for (int d = 0; d < 3; ++d) {
        r.center[d] = (p.center[size_t(d)] + dc[d]) * double(shape[size_t(d)]);
        r.radii[d] = std::max(1.0, p.radii[size_t(d)] * ds * double(shape[size_t(d)]));
    }
    return r;
}

bool inside_primitive(const RealPrimitive& p, int32_t x, int32_t y, int32_t z) {
    const double pos[3] = {double(x), double(y), double(z)};
    if (p.kind == PhantomPrimitive::Kind::Ellipsoid) {
        double q = 0.0;
        for (int d = 0; d < 3; ++d) {
            const double u = (pos[d] - p.center[d]) / p.radii[d];
            q += u * u;
        }
        return q <= 1.0;
    }
    // Tube and stacked cylinders: circular cross section, banded axis.
    const int a = p.axis;
    const double half_len = p.radii[a];
    const double t = pos[a] - (p.center[a] - half_len);
    if (t < 0.0 || t > 2.0 * half_len) return false;
    double q = 0.0;
    for (int d = 0; d < 3; ++d) {
        if (d == a) continue;
        const double u = (pos[d] - p.center[d]) / p.radii[d];
        q += u * u;
    }
    if (q > 1.0) return false;
    if (p.kind == PhantomPrimitive::Kind::Tube) return true;
    const double period = 2.0 * half_len / double(p.count);
    const int k = int(t / period);
    if (k >= p.count) return false;
    return t - double(k) * period <= (1.0 - p.gap) * period;
}

} // namespace

std::pair<HuVolume, LabelVolume> generate_phantom(const PhantomSpec& spec, uint64_t seed) {
    spec.validate();

    VolumeMeta hu_meta{spec.shape, {1.0, 1.0, 1.0}, ValueKind::HuI16};
    VolumeMeta lab_meta{spec.shape, {1.0, 1.0, 1.0}, ValueKind::LabelsU16};
    HuVolume hu{hu_meta, std::vector<int16_t>(size_t(hu_meta.voxel_count()), 0)};
    LabelVolume labels{lab_meta, std::vector<uint16_t>(size_t(lab_meta.voxel_count()), 0)};

    Rng rng(seed);

    std::vector<RealPrimitive> prims;
    prims.reserve(spec.primitives.size());
    for (const PhantomPrimitive& p : spec.primitives)
        prims.push_back(realize(p, spec.shape, spec.jitter, rng));

    // Labels first (later primitives overwrite earlier), restricted to each
    // primitive's bounding box.
    for (const RealPrimitive& p : prims) {
        int32_t lo[3], hi[3];
        for (int d = 0; d < 3; ++d) {
            lo[d] = std::max<int32_t>(0, int32_t(std::floor(p.center[d] - p.radii[d])));
            hi[d] = std::min<int32_t>(spec.shape[size_t(d)] - 1,
                                      int32_t(std::ceil(p.center[d] + p.radii[d])));
        }
        for (int32_t z = lo[2]; z <= hi[2]; ++z)
            for (int32_t y = lo[1]; y <= hi[1]; ++y)
                for (int32_t x = lo[0]; x <= hi[0]; ++x)
                    if (inside_primitive(p, x, y, z)) labels.at(x, y, z) = p.class_id;
    }

    const double nclamp = noise_clamp_hu(spec.noise_std);
    double body_c[3], body_r[3];
    for (int d = 0; d < 3; ++d) {
        body_c[d] = 0.5 * double(spec.shape[size_t(d)]);
        body_r[d] = spec.body_radii[size_t(d)] * double(spec.shape[size_t(d)]);
    }

    int64_t bone = 0;
    for (int32_t z = 0; z < spec.shape[2]; ++z)
        for (int32_t y = 0; y < spec.shape[1]; ++y)
            for (int32_t x = 0; x < spec.shape[0]; ++x) {
                double base;
                if (labels.at(x, y, z) > 0) {
                    ++bone;
                    base = std::clamp(rng.normal(spec.bone_hu_mean, spec.bone_hu_std),
                                      spec.bone_hu_clip[0], spec.bone_hu_clip[1]);
                } else {
                    const double pos[3] = {double(x), double(y), double(z)};
                    double q = 0.0;
                    for (int d = 0; d < 3; ++d) {
                        const double u = (pos[d] - body_c[d]) / body_r[d];
                        q += u * u;
                    }
                    base = q <= 1.0 ? spec.soft_tissue_hu : spec.air_hu;
                }
                const double noise =
                    std::clamp(rng.normal(0.0, spec.noise_std), -nclamp, nclamp);
                const double v = std::clamp(std::round(base + noise), -32768.0, 32767.0);
                hu.at(x, y, z) = int16_t(v);
            }

    const double frac = double(bone) / double(hu_meta.voxel_count());
    require(frac <= spec.occupancy_ceiling, Err::OccupancyExceeded,
            "bone occupancy " + std::to_string(frac) + " exceeds ceiling " +
                std::to_string(spec.occupancy_ceiling));
    return {std::move(hu), std::move(labels)};
}

} // namespace bonnet
