#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "bonnet/network.hpp"
#include "oracles.hpp"

using namespace bonnet;
using oracle::error_kind_of;

namespace {

UNetConfig micro_cfg(int num_classes) {
    UNetConfig cfg;
    cfg.levels = 2;
    cfg.base_widths = {2, 4};
    cfg.width_factor = 1.0;
    cfg.blocks_per_level = 2;
    cfg.num_classes = num_classes;
    return cfg;
}

SparseTensor<float> micro_window(Rng& rng, int extent, int count, int num_classes) {
    SparseTensor<float> st;
    st.coords = oracle::random_support(rng, extent, count);
    st.features = Matrix<float>(int64_t(st.coords.size()), 1);
    std::vector<uint16_t> labels(st.coords.size());
    for (size_t i = 0; i < st.coords.size(); ++i) {
        const float v = float(rng.normal());
        st.features.at(int64_t(i), 0) = v;
        // labels follow a pointwise rule so a tiny net can overfit them
        if (v > 0.4f)
            labels[i] = uint16_t(1 % num_classes);
        else if (v < -0.4f)
            labels[i] = uint16_t(std::min(2, num_classes - 1));
        else
            labels[i] = 0;
    }
    st.labels = std::move(labels);
    return st;
}

bool params_equal(UNetParamsF& a, UNetParamsF& b) {
    auto ta = tensor_refs(a);
    auto tb = tensor_refs(b);
    if (ta.size() != tb.size()) return false;
    for (size_t i = 0; i < ta.size(); ++i)
        if (ta[i].name != tb[i].name || *ta[i].data != *tb[i].data) return false;
    return true;
}

} // namespace

TEST_CASE("configuration arithmetic") {
    UNetConfig cfg; // defaults
    CHECK(cfg.channels() == std::vector<int>{16, 32, 64, 128});
    CHECK(count_parameters(cfg) == 1779474);

    // the counting routine must agree with the allocated shapes
    auto params = allocate_params<float>(cfg);
    int64_t total = 0;
    for (const auto& t : tensor_refs(params)) total += int64_t(t.data->size());
    CHECK(total == count_parameters(cfg));

    UNetConfig bad = cfg;
    bad.base_widths = {4, 4, 16, 32}; // not strictly increasing
    CHECK(error_kind_of([&] { bad.validate(); }) == Err::InvalidConfig);

    UNetConfig round = UNetConfig::from_json(cfg.to_json());
    CHECK(round.levels == cfg.levels);
    CHECK(round.base_widths == cfg.base_widths);
    CHECK(round.width_factor == cfg.width_factor);
    CHECK(round.num_classes == cfg.num_classes);
}

TEST_CASE("initialization") {
    UNetConfig cfg; // defaults

    SUBCASE("same seed gives bit-identical parameters") {
        auto a = init_network(cfg, 42);
        auto b = init_network(cfg, 42);
        CHECK(params_equal(a, b));
        auto c = init_network(cfg, 43);
        CHECK(!params_equal(a, c));
    }

    SUBCASE("gamma is one, beta and biases are zero") {
        auto p = init_network(cfg, 7);
        for (const auto& t : tensor_refs(p)) {
            if (t.name.find(".norm.gamma") != std::string::npos)
                for (float v : *t.data) CHECK(v == 1.0f);
            if (t.name.find(".norm.beta") != std::string::npos)
                for (float v : *t.data) CHECK(v == 0.0f);
            if (t.name.size() >= 2 && t.name.substr(t.name.size() - 2) == ".b")
                for (float v : *t.data) CHECK(v == 0.0f);
        }
    }

    SUBCASE("conv weights carry He variance") {
        auto p = init_network(cfg, 1234);
        // enc2.block0.conv.w is 27x64x64: fan_in = 27*64
        auto refs = tensor_refs(p);
        const auto it = std::find_if(refs.begin(), refs.end(), [](const TensorRef<float>& t) {
            return t.name == "enc2.block0.conv.w";
        });
        REQUIRE(it != refs.end());
        REQUIRE(it->dims == std::vector<uint32_t>{27, 64, 64});
        double mean = 0.0;
        for (float v : *it->data) mean += v;
        mean /= double(it->data->size());
        double var = 0.0;
        for (float v : *it->data) var += (v - mean) * (v - mean);
        var /= double(it->data->size());
        const double want = 2.0 / (27.0 * 64.0);
        CHECK(std::abs(mean) <= 0.1 * std::sqrt(want));
        CHECK(var >= 0.9 * want);
        CHECK(var <= 1.1 * want);
    }
}

TEST_CASE("window plan") {
    SUBCASE("levels mirror the downsample ladder") {
        Rng rng(5);
        const auto coords = oracle::random_support(rng, 8, 50);
        const auto plan = build_plan(coords, 3);
        CHECK(plan.levels == 3);
        CHECK(plan.coords[0] == coords);
        // next level = sorted unique floor-halved coords
        std::set<std::tuple<int32_t, int32_t, int32_t>> want;
        for (const auto& c : coords) {
            const auto h = floor_half(c);
            want.insert({h.z, h.y, h.x});
        }
        REQUIRE(plan.coords[1].size() == want.size());
        size_t i = 0;
        for (const auto& [z, y, x] : want) {
            CHECK(plan.coords[1][i] == VoxelCoord{x, y, z});
            ++i;
        }
        CHECK(plan.subm[0].in_count == int64_t(coords.size()));
        CHECK(plan.down[0].out_count == int64_t(plan.coords[1].size()));
        CHECK(plan.up[0].in_count == plan.down[0].out_count);
        CHECK(plan.up[0].out_count == plan.down[0].in_count);
    }

    SUBCASE("negative window-local coordinates are rejected") {
        CHECK(error_kind_of([&] { build_plan({{-1, 0, 0}}, 2); }) == Err::DepthExceedsExtent);
    }
}

TEST_CASE("network forward") {
    const UNetConfig cfg = micro_cfg(3);
    const auto params = init_network(cfg, 99);

    SUBCASE("output coordinates equal input coordinates") {
        Rng rng(6);
        auto st = micro_window(rng, 6, 40, 3);
        const auto plan = build_plan(st.coords, cfg.levels);
        const auto out = network_forward(st, params, cfg, plan);
        CHECK(out.coords == st.coords);
        CHECK(out.channels() == 3);
    }

    SUBCASE("a single voxel yields one finite logit row") {
        SparseTensor<float> st;
        st.coords = {{5, 7, 9}};
        st.features = Matrix<float>(1, 1, 0.25f);
        const auto plan = build_plan(st.coords, cfg.levels);
        const auto out = network_forward(st, params, cfg, plan);
        REQUIRE(out.size() == 1);
        for (int j = 0; j < 3; ++j) CHECK(std::isfinite(out.features.at(0, j)));
    }

    SUBCASE("permuting input rows permutes logit rows") {
        Rng rng(7);
        auto st = micro_window(rng, 6, 30, 3);
        const auto base = network_forward(st, params, cfg, build_plan(st.coords, cfg.levels));

        std::vector<size_t> perm(st.coords.size());
        for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        SparseTensor<float> shuffled;
        shuffled.coords.resize(st.coords.size());
        shuffled.features = Matrix<float>(int64_t(st.coords.size()), 1);
        for (size_t i = 0; i < perm.size(); ++i) {
            shuffled.coords[i] = st.coords[perm[i]];
            shuffled.features.at(int64_t(i), 0) = st.features.at(int64_t(perm[i]), 0);
        }
        const auto out =
            network_forward(shuffled, params, cfg, build_plan(shuffled.coords, cfg.levels));
        for (size_t i = 0; i < perm.size(); ++i)
            for (int64_t j = 0; j < 3; ++j)
                CHECK(out.features.at(int64_t(i), j) ==
                      doctest::Approx(base.features.at(int64_t(perm[i]), j)).epsilon(1e-4));
    }

    SUBCASE("empty input is rejected") {
        SparseTensor<float> st;
        st.features = Matrix<float>(0, 1);
        WindowPlan plan;
        plan.levels = cfg.levels;
        plan.coords.resize(size_t(cfg.levels));
        CHECK(error_kind_of([&] { network_forward(st, params, cfg, plan); }) == Err::EmptyTensor);
    }
}

TEST_CASE("training steps") {
    SUBCASE("zero learning rate leaves parameters untouched") {
        const UNetConfig cfg = micro_cfg(3);
        auto params = init_network(cfg, 11);
        auto before = params;
        AdamConfig hp;
        hp.lr = 0.0;
        auto opt = init_optim<float>(cfg, hp);
        Rng rng(12);
        auto window = micro_window(rng, 5, 60, 3);
        LossConfig loss_cfg;
        loss_cfg.num_classes = 3;
        const double loss = train_step(params, opt, window, cfg, loss_cfg);
        CHECK(loss > 0.0);
        CHECK(opt.step == 1);
        CHECK(params_equal(params, before));
    }

    SUBCASE("fifty steps on one fixed window overfit it") {
        UNetConfig cfg = micro_cfg(3);
        cfg.base_widths = {4, 8};
        auto params = init_network(cfg, 21);
        AdamConfig hp;
        hp.lr = 0.02;
        auto opt = init_optim<float>(cfg, hp);
        Rng rng(22);
        auto window = micro_window(rng, 6, 150, 3);
        LossConfig loss_cfg;
        loss_cfg.num_classes = 3;
        double first = 0.0, last = 0.0;
        for (int step = 0; step < 50; ++step) {
            last = train_step(params, opt, window, cfg, loss_cfg);
            if (step == 0) first = last;
        }
        CHECK(last < first);
        CHECK(last < 0.25 * first);
    }

    SUBCASE("a window without labels is rejected") {
        const UNetConfig cfg = micro_cfg(2);
        auto params = init_network(cfg, 31);
        auto opt = init_optim<float>(cfg);
        SparseTensor<float> st;
        st.coords = {{0, 0, 0}};
        st.features = Matrix<float>(1, 1, 1.0f);
        LossConfig loss_cfg;
        CHECK(error_kind_of([&] { train_step(params, opt, st, cfg, loss_cfg); }) ==
              Err::ShapeMismatch);
    }
}

TEST_CASE("whole-network gradients match finite differences") {
    UNetConfig cfg = micro_cfg(2);
    Rng rng(41);
    SparseTensor<double> st;
    st.coords = oracle::random_support(rng, 4, 25);
    st.features = Matrix<double>(int64_t(st.coords.size()), 1);
    std::vector<uint16_t> labels(st.coords.size());
    for (size_t i = 0; i < st.coords.size(); ++i) {
        st.features.at(int64_t(i), 0) = rng.normal();
        labels[i] = uint16_t(rng.below(2));
    }

    auto params = cast_params<double>(init_network(cfg, 42));
    const WindowPlan plan = build_plan(st.coords, cfg.levels);
    LossConfig loss_cfg;
    loss_cfg.num_classes = 2;

    ForwardTape<double> tape;
    const auto logits = network_forward(st, params, cfg, plan, &tape);
    const auto loss = combined_loss(logits.features, labels, loss_cfg);
    auto grads = network_backward(tape, cfg, loss.grad);

    auto value = [&] {
        const auto out = network_forward(st, params, cfg, plan);
        return combined_loss(out.features, labels, loss_cfg).value;
    };

    auto prefs = tensor_refs(params);
    auto grefs = tensor_refs(grads);
    REQUIRE(prefs.size() == grefs.size());
    for (size_t t = 0; t < prefs.size(); ++t) {
        REQUIRE(prefs[t].name == grefs[t].name);
        REQUIRE(prefs[t].data->size() == grefs[t].data->size());
        INFO("tensor ", prefs[t].name);
        CHECK(oracle::fd_violation(value, prefs[t].data->data(), prefs[t].data->size(),
                                   grefs[t].data->data()) <= 1.0);
    }
}

TEST_CASE("checkpoint persistence") {
    const UNetConfig cfg = micro_cfg(3);
    Checkpoint ckpt;
    ckpt.cfg = cfg;
    ckpt.stats = {342.5, 117.25};
    ckpt.init_seed = 77;
    ckpt.params = init_network(cfg, 77);
    AdamConfig hp;
    hp.lr = 0.01;
    auto opt = init_optim<float>(cfg, hp);
    Rng rng(78);
    auto window = micro_window(rng, 5, 50, 3);
    LossConfig loss_cfg;
    loss_cfg.num_classes = 3;
    for (int i = 0; i < 3; ++i) train_step(ckpt.params, opt, window, cfg, loss_cfg);
    ckpt.optim = std::move(opt);

    const std::string path = "ckpt_test.bnt";

    SUBCASE("round trip is bit-exact") {
        save_checkpoint(path, ckpt);
        auto back = load_checkpoint(path);
        CHECK(back.init_seed == 77);
        CHECK(back.stats.mu == ckpt.stats.mu);
        CHECK(back.stats.sigma == ckpt.stats.sigma);
        CHECK(back.cfg.levels == cfg.levels);
        CHECK(back.cfg.num_classes == cfg.num_classes);
        CHECK(params_equal(back.params, ckpt.params));
        REQUIRE(back.optim.has_value());
        CHECK(back.optim->step == ckpt.optim->step);
        CHECK(back.optim->hp.lr == ckpt.optim->hp.lr);
        CHECK(params_equal(back.optim->m, ckpt.optim->m));
        CHECK(params_equal(back.optim->v, ckpt.optim->v));
        std::remove(path.c_str());
    }

    SUBCASE("corrupting the magic is detected") {
        save_checkpoint(path, ckpt);
        {
            std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
            f.write("XXXX", 4);
        }
        CHECK(error_kind_of([&] { load_checkpoint(path); }) == Err::BadMagic);
        std::remove(path.c_str());
    }

    SUBCASE("truncation is detected") {
        save_checkpoint(path, ckpt);
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), std::streamsize(bytes.size() / 2));
        out.close();
        CHECK(error_kind_of([&] { load_checkpoint(path); }) == Err::TruncatedFile);
        std::remove(path.c_str());
    }
}
