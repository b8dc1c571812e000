#include "bonnet/network.hpp"

#include <cstring>
#include <map>

#include <json.hpp>

#include "bonnet/io_ct.hpp"
#include "bonnet/rng.hpp"

namespace bonnet {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void UNetConfig::validate() const {
    require(levels >= 2, Err::InvalidConfig, "need at least two levels");
    require(int(base_widths.size()) == levels, Err::InvalidConfig,
            "base width count != level count");
    for (size_t i = 1; i < base_widths.size(); ++i)
        require(base_widths[i] > base_widths[i - 1], Err::InvalidConfig,
                "base widths must be strictly increasing");
    for (int c : channels())
        require(c >= 1, Err::InvalidConfig, "effective channel count must be >= 1");
    require(blocks_per_level >= 1, Err::InvalidConfig, "need at least one block per level");
    require(num_classes >= 2, Err::InvalidConfig, "need at least two classes");
    require(leaky_slope > 0.0 && leaky_slope < 1.0, Err::InvalidConfig,
            "leaky slope must be in (0, 1)");
    require(norm_eps > 0.0, Err::InvalidConfig, "norm eps must be positive");
    require(width_factor > 0.0, Err::InvalidConfig, "width factor must be positive");
}

std::string UNetConfig::to_json() const {
    nlohmann::json j;
    j["levels"] = levels;
    j["base_widths"] = base_widths;
    j["width_factor"] = width_factor;
    j["blocks_per_level"] = blocks_per_level;
    j["num_classes"] = num_classes;
    j["leaky_slope"] = leaky_slope;
    j["norm_eps"] = norm_eps;
    return j.dump(2);
}

UNetConfig UNetConfig::from_json(const std::string& text) {
    UNetConfig cfg;
    try {
        const nlohmann::json j = nlohmann::json::parse(text);
        cfg.levels = j.value("levels", cfg.levels);
        if (j.contains("base_widths")) cfg.base_widths = j["base_widths"].get<std::vector<int>>();
        cfg.width_factor = j.value("width_factor", cfg.width_factor);
        cfg.blocks_per_level = j.value("blocks_per_level", cfg.blocks_per_level);
        cfg.num_classes = j.value("num_classes", cfg.num_classes);
        cfg.leaky_slope = j.value("leaky_slope", cfg.leaky_slope);
        cfg.norm_eps = j.value("norm_eps", cfg.norm_eps);
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, std::string("network config JSON: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

} // namespace

UNetParamsF init_network(const UNetConfig& cfg, uint64_t seed) {
    UNetParamsF p = allocate_params<float>(cfg);
    Rng rng(seed);
    for (TensorRef<float>& t : tensor_refs(p)) {
        if (ends_with(t.name, ".w")) {
            // fan_in: kvol*cin for convs (3-d), cin for head affines (2-d).
            uint64_t fan_in = 1;
            for (size_t d = 0; d + 1 < t.dims.size(); ++d) fan_in *= t.dims[d];
            const double stddev = std::sqrt(2.0 / double(fan_in));
            for (float& w : *t.data) w = float(rng.normal(0.0, stddev));
        } else if (ends_with(t.name, ".gamma")) {
            for (float& g : *t.data) g = 1.0f;
        }
        // biases and beta stay zero
    }
    return p;
}

int64_t count_parameters(const UNetConfig& cfg) {
    UNetParamsF p = allocate_params<float>(cfg);
    int64_t n = 0;
    for (const TensorRef<float>& t : tensor_refs(p)) n += int64_t(t.data->size());
    return n;
}

// ---------------------------------------------------------------------------
// Window plan
// ---------------------------------------------------------------------------

WindowPlan build_plan(const std::vector<VoxelCoord>& coords, int levels) {
    require(levels >= 2, Err::InvalidConfig, "need at least two levels");
    require(!coords.empty(), Err::EmptyTensor, "cannot plan an empty window");
    for (const VoxelCoord& c : coords)
        require(c.x >= 0 && c.y >= 0 && c.z >= 0, Err::DepthExceedsExtent,
                "window coordinates must be local (nonnegative)");

    WindowPlan plan;
    plan.levels = levels;
    plan.coords.resize(size_t(levels));
    plan.subm.resize(size_t(levels));
    plan.down.resize(size_t(levels) - 1);
    plan.up.resize(size_t(levels) - 1);
    plan.coords[0] = coords;

    const KernelSpec subm3 = KernelSpec::subm3();
    const KernelSpec down2 = KernelSpec::down2();
    for (int l = 0; l < levels; ++l) {
        const CoordIndex index = build_coord_index(plan.coords[size_t(l)]);
        plan.subm[size_t(l)] = build_rulebook_subm(plan.coords[size_t(l)], index, subm3);
        if (l + 1 < levels) {
            auto [coarse, rb] = build_downsample(plan.coords[size_t(l)], down2);
            plan.up[size_t(l)] = transpose_rulebook(rb, int64_t(plan.coords[size_t(l)].size()));
            plan.down[size_t(l)] = std::move(rb);
            plan.coords[size_t(l) + 1] = std::move(coarse);
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Checkpoints (BNT1)
// ---------------------------------------------------------------------------

namespace {

void append(std::vector<unsigned char>& buf, const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    buf.insert(buf.end(), p, p + len);
}

template <typename T>
void append_scalar(std::vector<unsigned char>& buf, T v) {
    append(buf, &v, sizeof(T));
}

template <typename T>
T take(const std::vector<unsigned char>& bytes, size_t& cursor) {
    require(cursor + sizeof(T) <= bytes.size(), Err::TruncatedFile, "checkpoint ends early");
    T v;
    std::memcpy(&v, bytes.data() + cursor, sizeof(T));
    cursor += sizeof(T);
    return v;
}

void append_tensor(std::vector<unsigned char>& buf, const std::string& name,
                   const std::vector<uint32_t>& dims, const std::vector<float>& data) {
    require(name.size() <= 65535, Err::InvalidConfig, "tensor name too long");
    append_scalar<uint16_t>(buf, uint16_t(name.size()));
    append(buf, name.data(), name.size());
    append_scalar<uint8_t>(buf, uint8_t(dims.size()));
    size_t count = 1;
    for (uint32_t d : dims) {
        append_scalar<uint32_t>(buf, d);
        count *= d;
    }
    require(count == data.size(), Err::ShapeMismatch,
            "tensor '" + name + "' dims do not match its element count");
    append(buf, data.data(), data.size() * sizeof(float));
}

struct RawTensor {
    std::vector<uint32_t> dims;
    std::vector<float> data;
};

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    ckpt.cfg.validate();
    ckpt.stats.validate();

    nlohmann::json blob = nlohmann::json::parse(ckpt.cfg.to_json());
    blob["mu"] = ckpt.stats.mu;
    blob["sigma"] = ckpt.stats.sigma;
    blob["seed"] = ckpt.init_seed;
    blob["has_optim"] = ckpt.optim.has_value();
    if (ckpt.optim) {
        blob["optim"] = {{"step", ckpt.optim->step},
                         {"lr", ckpt.optim->hp.lr},
                         {"beta1", ckpt.optim->hp.beta1},
                         {"beta2", ckpt.optim->hp.beta2},
                         {"eps", ckpt.optim->hp.eps}};
    }
    const std::string blob_text = blob.dump();

    std::vector<unsigned char> buf;
    append(buf, "BNT1", 4);
    append_scalar<uint32_t>(buf, 1);
    append_scalar<uint32_t>(buf, uint32_t(blob_text.size()));
    append(buf, blob_text.data(), blob_text.size());

    // The casts below only strip const so tensor_refs can walk the structs;
    // nothing is written through them.
    auto& params = const_cast<UNetParamsF&>(ckpt.params);
    auto refs = tensor_refs(params);
    std::vector<TensorRef<float>> optim_refs;
    if (ckpt.optim) {
        auto& opt = const_cast<OptimState<float>&>(*ckpt.optim);
        for (auto& r : tensor_refs(opt.m)) optim_refs.push_back({"optim.m." + r.name, r.dims, r.data});
        for (auto& r : tensor_refs(opt.v)) optim_refs.push_back({"optim.v." + r.name, r.dims, r.data});
    }
    append_scalar<uint32_t>(buf, uint32_t(refs.size() + optim_refs.size()));
    for (const auto& r : refs) append_tensor(buf, r.name, r.dims, *r.data);
    for (const auto& r : optim_refs) append_tensor(buf, r.name, r.dims, *r.data);

    append_scalar<uint64_t>(buf, fnv1a64(buf.data(), buf.size()));
    write_file_bytes(path, buf.data(), buf.size());
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::vector<unsigned char> bytes = read_file_bytes(path);
    require(bytes.size() >= 4 + 4 + 4 + 4 + 8, Err::TruncatedFile,
            "checkpoint shorter than its fixed fields");

    char magic[4];
    std::memcpy(magic, bytes.data(), 4);
    require(std::memcmp(magic, "BNT1", 4) == 0, Err::BadMagic, "not a BNT1 checkpoint");

    size_t cursor = 4;
    const auto version = take<uint32_t>(bytes, cursor);
    require(version == 1, Err::VersionMismatch, "checkpoint version " + std::to_string(version));

    const auto blob_len = take<uint32_t>(bytes, cursor);
    require(cursor + blob_len <= bytes.size() - 8, Err::TruncatedFile, "config blob ends early");
    const std::string blob_text(reinterpret_cast<const char*>(bytes.data() + cursor), blob_len);
    cursor += blob_len;

    const auto tensor_count = take<uint32_t>(bytes, cursor);
    std::map<std::string, RawTensor> tensors;
    for (uint32_t t = 0; t < tensor_count; ++t) {
        const auto name_len = take<uint16_t>(bytes, cursor);
        require(cursor + name_len <= bytes.size() - 8, Err::TruncatedFile, "tensor name ends early");
        std::string name(reinterpret_cast<const char*>(bytes.data() + cursor), name_len);
        cursor += name_len;
        const auto ndim = take<uint8_t>(bytes, cursor);
        RawTensor raw;
        uint64_t count = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            raw.dims.push_back(take<uint32_t>(bytes, cursor));
            count *= raw.dims.back();
            // bound each step so a garbage dim cannot overflow the product
            require(count <= uint64_t(bytes.size()), Err::TruncatedFile, "tensor data ends early");
        }
        require(cursor + size_t(count) * 4 <= bytes.size() - 8, Err::TruncatedFile,
                "tensor data ends early");
        raw.data.resize(size_t(count));
        std::memcpy(raw.data.data(), bytes.data() + cursor, size_t(count) * 4);
        cursor += size_t(count) * 4;
        tensors.emplace(std::move(name), std::move(raw));
    }
    require(cursor == bytes.size() - 8, Err::SizeMismatch,
            "checkpoint has trailing bytes before the checksum");

    // Structural checks diagnose truncation precisely; the checksum then
    // catches in-place corruption anywhere in the remaining bytes.
    const uint64_t stored_sum = fnv1a64(bytes.data(), bytes.size() - 8);
    uint64_t file_sum;
    std::memcpy(&file_sum, bytes.data() + bytes.size() - 8, 8);
    require(stored_sum == file_sum, Err::ChecksumMismatch, "checkpoint checksum does not match");

    Checkpoint ckpt;
    bool has_optim = false;
    AdamConfig hp;
    int64_t optim_step = 0;
    try {
        const nlohmann::json blob = nlohmann::json::parse(blob_text);
        ckpt.cfg = UNetConfig::from_json(blob_text);
        ckpt.stats.mu = blob.at("mu").get<double>();
        ckpt.stats.sigma = blob.at("sigma").get<double>();
        ckpt.init_seed = blob.value("seed", uint64_t(0));
        has_optim = blob.value("has_optim", false);
        if (has_optim) {
            const auto& o = blob.at("optim");
            optim_step = o.at("step").get<int64_t>();
            hp.lr = o.at("lr").get<double>();
            hp.beta1 = o.at("beta1").get<double>();
            hp.beta2 = o.at("beta2").get<double>();
            hp.eps = o.at("eps").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, std::string("checkpoint config blob: ") + e.what());
    }
    ckpt.stats.validate();

    auto fill = [&tensors](UNetParams<float>& params, const std::string& prefix) {
        for (TensorRef<float>& r : tensor_refs(params)) {
            const auto it = tensors.find(prefix + r.name);
            require(it != tensors.end(), Err::ShapeMismatch,
                    "checkpoint is missing tensor '" + prefix + r.name + "'");
            require(it->second.dims == r.dims, Err::ShapeMismatch,
                    "tensor '" + prefix + r.name + "' shape disagrees with the config");
            *r.data = it->second.data;
        }
    };
    ckpt.params = allocate_params<float>(ckpt.cfg);
    fill(ckpt.params, "");
    if (has_optim) {
        OptimState<float> opt = init_optim<float>(ckpt.cfg, hp);
        opt.step = optim_step;
        fill(opt.m, "optim.m.");
        fill(opt.v, "optim.v.");
        ckpt.optim = std::move(opt);
    }
    return ckpt;
}

} // namespace bonnet
