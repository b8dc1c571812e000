#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "bonnet/sparse_nn.hpp"
#include "oracles.hpp"

using namespace bonnet;
using oracle::error_kind_of;

namespace {

ConvParams<double> identity_conv(int kvol, int c, int center) {
    ConvParams<double> p;
    p.kvol = kvol;
    p.cin = c;
    p.cout = c;
    p.weights.assign(size_t(kvol) * size_t(c) * size_t(c), 0.0);
    for (int i = 0; i < c; ++i) p.w_at(center)[size_t(i) * size_t(c) + size_t(i)] = 1.0;
    p.bias.assign(size_t(c), 0.0);
    return p;
}

// Linear objective sum_ij c_ij * out_ij so the upstream gradient is just c.
double dot_all(const Matrix<double>& c, const Matrix<double>& out) {
    double L = 0.0;
    for (size_t i = 0; i < c.data.size(); ++i) L += c.data[i] * out.data[i];
    return L;
}

} // namespace

TEST_CASE("submanifold conv: identity kernel and single voxel") {
    SUBCASE("identity kernel reproduces the input") {
        Rng rng(1);
        const auto coords = oracle::random_support(rng, 5, 20);
        SparseTensor<double> st;
        st.coords = coords;
        st.features = oracle::random_features<double>(rng, 20, 3);
        const Rulebook rb = build_rulebook_subm(coords, build_coord_index(coords), KernelSpec::subm3());
        const auto out = subm_conv_forward(st, rb, identity_conv(27, 3, 13));
        CHECK(out.coords == st.coords);
        CHECK(out.features == st.features);
    }

    SUBCASE("isolated voxel sees only the center weight") {
        Rng rng(2);
        SparseTensor<double> st;
        st.coords = {{4, 2, 3}};
        st.features = oracle::random_features<double>(rng, 1, 2);
        const Rulebook rb =
            build_rulebook_subm(st.coords, build_coord_index(st.coords), KernelSpec::subm3());
        const auto p = oracle::random_conv<double>(rng, 27, 2, 3);
        const auto out = subm_conv_forward(st, rb, p);
        for (int co = 0; co < 3; ++co) {
            double want = p.bias[size_t(co)];
            for (int ci = 0; ci < 2; ++ci)
                want += st.features.at(0, ci) * p.w_at(13)[size_t(ci) * 3 + size_t(co)];
            CHECK(out.features.at(0, co) == doctest::Approx(want).epsilon(1e-12));
        }
    }

    SUBCASE("channel mismatch is rejected") {
        SparseTensor<double> st;
        st.coords = {{0, 0, 0}};
        st.features = Matrix<double>(1, 2);
        const Rulebook rb =
            build_rulebook_subm(st.coords, build_coord_index(st.coords), KernelSpec::subm3());
        Rng rng(3);
        const auto p = oracle::random_conv<double>(rng, 27, 3, 2);
        CHECK(error_kind_of([&] { subm_conv_forward(st, rb, p); }) == Err::ShapeMismatch);
    }
}

TEST_CASE("submanifold conv matches the zero-padded dense oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 1 + int(rng.below(50));
        const auto coords = oracle::random_support(rng, 6, n);
        SparseTensor<double> st;
        st.coords = coords;
        st.features = oracle::random_features<double>(rng, int64_t(coords.size()), 3);
        const Rulebook rb = build_rulebook_subm(coords, build_coord_index(coords), KernelSpec::subm3());
        const auto p = oracle::random_conv<double>(rng, 27, 3, 2);
        const auto out = subm_conv_forward(st, rb, p);
        const auto want = oracle::subm_conv_oracle(coords, st.features, p);
        CHECK(oracle::max_rel_err(out.features, want) <= 1e-10);
    }
}

TEST_CASE("strided conv: hand cases and dense oracle") {
    SUBCASE("two fine voxels sum into their shared parent") {
        SparseTensor<double> st;
        st.coords = {{0, 0, 0}, {1, 1, 1}};
        st.features = Matrix<double>(2, 2);
        st.features.at(0, 0) = 1.0;
        st.features.at(0, 1) = 2.0;
        st.features.at(1, 0) = 10.0;
        st.features.at(1, 1) = 20.0;
        auto [coarse, rb] = build_downsample(st.coords, KernelSpec::down2());
        ConvParams<double> p = identity_conv(8, 2, 0);
        for (int k = 1; k < 8; ++k) // identity at every offset
            for (int i = 0; i < 2; ++i) p.w_at(k)[size_t(i) * 2 + size_t(i)] = 1.0;
        p.bias = {0.5, 0.5};
        const auto out = strided_conv_forward(st, rb, coarse, p);
        REQUIRE(out.size() == 1);
        CHECK(out.coords[0] == VoxelCoord{0, 0, 0});
        CHECK(out.features.at(0, 0) == doctest::Approx(11.5).epsilon(1e-12));
        CHECK(out.features.at(0, 1) == doctest::Approx(22.5).epsilon(1e-12));
    }

    SUBCASE("single fine voxel uses its unique offset") {
        Rng rng(21);
        SparseTensor<double> st;
        st.coords = {{2, 3, 5}};
        st.features = oracle::random_features<double>(rng, 1, 2);
        auto [coarse, rb] = build_downsample(st.coords, KernelSpec::down2());
        const auto p = oracle::random_conv<double>(rng, 8, 2, 2);
        const auto out = strided_conv_forward(st, rb, coarse, p);
        REQUIRE(out.size() == 1);
        const int k = 6; // d = (dx=0, dy=1, dz=1)
        for (int co = 0; co < 2; ++co) {
            double want = p.bias[size_t(co)];
            for (int ci = 0; ci < 2; ++ci)
                want += st.features.at(0, ci) * p.w_at(k)[size_t(ci) * 2 + size_t(co)];
            CHECK(out.features.at(0, co) == doctest::Approx(want).epsilon(1e-12));
        }
    }

    SUBCASE("random 8^3 supports match the dense strided oracle") {
        Rng rng(22);
        for (int trial = 0; trial < 40; ++trial) {
            const auto coords = oracle::random_support(rng, 8, 1 + int(rng.below(80)));
            SparseTensor<double> st;
            st.coords = coords;
            st.features = oracle::random_features<double>(rng, int64_t(coords.size()), 2);
            auto [coarse, rb] = build_downsample(coords, KernelSpec::down2());
            const auto p = oracle::random_conv<double>(rng, 8, 2, 3);
            const auto out = strided_conv_forward(st, rb, coarse, p);
            auto [want_coords, want] = oracle::strided_conv_oracle(coords, st.features, p);
            CHECK(out.coords == want_coords);
            CHECK(oracle::max_rel_err(out.features, want) <= 1e-10);
        }
    }
}

TEST_CASE("inverse conv: hand cases, oracle, adjoint identity") {
    SUBCASE("zero coarse features and bias give zero fine features") {
        const std::vector<VoxelCoord> fine{{0, 0, 0}, {1, 1, 1}};
        auto [coarse, rb] = build_downsample(fine, KernelSpec::down2());
        const Rulebook rbt = transpose_rulebook(rb, fine);
        SparseTensor<double> st;
        st.coords = coarse;
        st.features = Matrix<double>(1, 2);
        ConvParams<double> p = identity_conv(8, 2, 0);
        p.bias.clear();
        const auto out = inverse_conv_forward(st, rbt, fine, p);
        CHECK(out.features.data == std::vector<double>(4, 0.0));
    }

    SUBCASE("one coarse voxel fans out through identity weights") {
        const std::vector<VoxelCoord> fine{{0, 0, 0}, {1, 1, 1}};
        auto [coarse, rb] = build_downsample(fine, KernelSpec::down2());
        const Rulebook rbt = transpose_rulebook(rb, fine);
        SparseTensor<double> st;
        st.coords = coarse;
        st.features = Matrix<double>(1, 2);
        st.features.at(0, 0) = 3.0;
        st.features.at(0, 1) = -4.0;
        ConvParams<double> p = identity_conv(8, 2, 0);
        for (int k = 1; k < 8; ++k)
            for (int i = 0; i < 2; ++i) p.w_at(k)[size_t(i) * 2 + size_t(i)] = 1.0;
        const auto out = inverse_conv_forward(st, rbt, fine, p);
        CHECK(out.coords == fine);
        for (int64_t r = 0; r < 2; ++r) {
            CHECK(out.features.at(r, 0) == 3.0);
            CHECK(out.features.at(r, 1) == -4.0);
        }
    }

    SUBCASE("random supports match the oracle") {
        Rng rng(31);
        for (int trial = 0; trial < 30; ++trial) {
            const auto fine = oracle::random_support(rng, 8, 1 + int(rng.below(60)));
            auto [coarse, rb] = build_downsample(fine, KernelSpec::down2());
            const Rulebook rbt = transpose_rulebook(rb, fine);
            SparseTensor<double> st;
            st.coords = coarse;
            st.features = oracle::random_features<double>(rng, int64_t(coarse.size()), 3);
            const auto p = oracle::random_conv<double>(rng, 8, 3, 2);
            const auto out = inverse_conv_forward(st, rbt, fine, p);
            const auto want = oracle::inverse_conv_oracle(fine, coarse, st.features, p);
            CHECK(oracle::max_rel_err(out.features, want) <= 1e-10);
        }
    }

    SUBCASE("strided and inverse convs are adjoint with tied weights") {
        Rng rng(32);
        for (int trial = 0; trial < 20; ++trial) {
            const auto fine = oracle::random_support(rng, 8, 1 + int(rng.below(60)));
            auto [coarse, rb] = build_downsample(fine, KernelSpec::down2());
            const Rulebook rbt = transpose_rulebook(rb, fine);
            const int a = 2, b = 3;
            auto p = oracle::random_conv<double>(rng, 8, a, b, /*with_bias=*/false);
            // adjoint weights: per-offset transpose, channels swapped
            ConvParams<double> pt;
            pt.kvol = 8;
            pt.cin = b;
            pt.cout = a;
            pt.weights.assign(size_t(8) * a * b, 0.0);
            for (int k = 0; k < 8; ++k)
                for (int ci = 0; ci < a; ++ci)
                    for (int co = 0; co < b; ++co)
                        pt.w_at(k)[size_t(co) * size_t(a) + size_t(ci)] =
                            p.w_at(k)[size_t(ci) * size_t(b) + size_t(co)];

            SparseTensor<double> x;
            x.coords = fine;
            x.features = oracle::random_features<double>(rng, int64_t(fine.size()), a);
            SparseTensor<double> y;
            y.coords = coarse;
            y.features = oracle::random_features<double>(rng, int64_t(coarse.size()), b);

            const auto ax = strided_conv_forward(x, rb, coarse, p);
            const auto aty = inverse_conv_forward(y, rbt, fine, pt);
            const double lhs = dot_all(ax.features, y.features);
            const double rhs = dot_all(x.features, aty.features);
            CHECK(oracle::rel_err(lhs, rhs) <= 1e-10);
        }
    }
}

TEST_CASE("sparse instance norm") {
    NormParams<double> p;
    p.gamma = {1.0};
    p.beta = {0.0};
    p.eps = 1e-12;

    SUBCASE("two rows standardize to -1 and 1") {
        SparseTensor<double> st;
        st.coords = {{0, 0, 0}, {1, 0, 0}};
        st.features = Matrix<double>(2, 1);
        st.features.at(0, 0) = 1.0;
        st.features.at(1, 0) = 3.0;
        const auto out = sparse_instance_norm(st, p);
        CHECK(out.features.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-6));
        CHECK(out.features.at(1, 0) == doctest::Approx(1.0).epsilon(1e-6));
    }

    SUBCASE("constant input collapses to beta") {
        NormParams<double> pb = p;
        pb.beta = {0.75};
        pb.eps = 1e-5;
        SparseTensor<double> st;
        st.coords = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
        st.features = Matrix<double>(3, 1, 4.0);
        const auto out = sparse_instance_norm(st, pb);
        for (int64_t i = 0; i < 3; ++i)
            CHECK(out.features.at(i, 0) == doctest::Approx(0.75).epsilon(1e-12));
    }

    SUBCASE("single row collapses to beta") {
        NormParams<double> pb = p;
        pb.beta = {-2.5};
        pb.eps = 1e-5;
        SparseTensor<double> st;
        st.coords = {{0, 0, 0}};
        st.features = Matrix<double>(1, 1, 123.0);
        const auto out = sparse_instance_norm(st, pb);
        CHECK(out.features.at(0, 0) == doctest::Approx(-2.5).epsilon(1e-12));
    }

    SUBCASE("normalized output has zero mean and unit variance") {
        Rng rng(41);
        NormParams<double> pn;
        pn.gamma = {1.0, 1.0, 1.0};
        pn.beta = {0.0, 0.0, 0.0};
        pn.eps = 1e-12;
        SparseTensor<double> st;
        st.coords = oracle::random_support(rng, 6, 40);
        st.features = oracle::random_features<double>(rng, 40, 3, 5.0);
        const auto out = sparse_instance_norm(st, pn);
        for (int64_t j = 0; j < 3; ++j) {
            double mean = 0.0, var = 0.0;
            for (int64_t i = 0; i < 40; ++i) mean += out.features.at(i, j);
            mean /= 40.0;
            for (int64_t i = 0; i < 40; ++i) {
                const double d = out.features.at(i, j) - mean;
                var += d * d;
            }
            var /= 40.0;
            CHECK(std::abs(mean) <= 1e-6);
            CHECK(std::abs(var - 1.0) <= 1e-4);
        }
    }

    SUBCASE("empty tensor is rejected") {
        SparseTensor<double> st;
        st.features = Matrix<double>(0, 1);
        CHECK(error_kind_of([&] { sparse_instance_norm(st, p); }) == Err::EmptyTensor);
    }
}

TEST_CASE("leaky relu") {
    SparseTensor<double> st;
    st.coords = {{0, 0, 0}, {1, 0, 0}};
    st.features = Matrix<double>(2, 1);
    st.features.at(0, 0) = 2.0;
    st.features.at(1, 0) = -2.0;
    const auto out = leaky_relu(st, 0.01);
    CHECK(out.features.at(0, 0) == 2.0);
    CHECK(out.features.at(1, 0) == doctest::Approx(-0.02).epsilon(1e-12));

    // strictly monotone: input ordering is preserved
    Rng rng(51);
    SparseTensor<double> r;
    r.coords = oracle::random_support(rng, 6, 30);
    r.features = oracle::random_features<double>(rng, 30, 1, 3.0);
    const auto ro = leaky_relu(r, 0.01);
    for (int64_t i = 0; i < 30; ++i)
        for (int64_t j = 0; j < 30; ++j)
            if (r.features.at(i, 0) < r.features.at(j, 0))
                CHECK(ro.features.at(i, 0) < ro.features.at(j, 0));
}

TEST_CASE("skip concatenation") {
    Rng rng(61);
    const auto coords = oracle::random_support(rng, 5, 10);
    SparseTensor<double> dec, enc;
    dec.coords = coords;
    dec.features = oracle::random_features<double>(rng, 10, 2);
    enc.coords = coords;
    enc.features = oracle::random_features<double>(rng, 10, 3);

    const auto out = concat_skip(dec, enc);
    CHECK(out.channels() == 5);
    CHECK(slice_cols(out.features, 0, 2) == dec.features);
    CHECK(slice_cols(out.features, 2, 5) == enc.features);

    SparseTensor<double> other = enc;
    std::reverse(other.coords.begin(), other.coords.end());
    CHECK(error_kind_of([&] { concat_skip(dec, other); }) == Err::SupportMismatch);
}

TEST_CASE("mlp head") {
    Rng rng(71);
    const auto coords = oracle::random_support(rng, 5, 8);
    SparseTensor<double> st;
    st.coords = coords;
    st.features = oracle::random_features<double>(rng, 8, 3);

    SUBCASE("zero weights leave only the final bias") {
        AffineParams<double> fc0{3, 3, std::vector<double>(9, 0.0), std::vector<double>(3, 0.0)};
        AffineParams<double> fc1{3, 4, std::vector<double>(12, 0.0), {1.0, -2.0, 3.0, 0.5}};
        const auto out = mlp_head_forward(st, fc0, fc1);
        for (int64_t i = 0; i < 8; ++i) {
            CHECK(out.features.at(i, 0) == 1.0);
            CHECK(out.features.at(i, 1) == -2.0);
            CHECK(out.features.at(i, 2) == 3.0);
            CHECK(out.features.at(i, 3) == 0.5);
        }
    }

    SUBCASE("identity first layer on nonnegative inputs is a single affine") {
        SparseTensor<double> pos = st;
        for (double& v : pos.features.data) v = std::abs(v);
        AffineParams<double> fc0{3, 3, std::vector<double>(9, 0.0), std::vector<double>(3, 0.0)};
        for (int i = 0; i < 3; ++i) fc0.weights[size_t(i) * 3 + size_t(i)] = 1.0;
        AffineParams<double> fc1{3, 2, {}, {0.1, -0.2}};
        fc1.weights.resize(6);
        for (double& v : fc1.weights) v = rng.uniform(-1.0, 1.0);
        const auto out = mlp_head_forward(pos, fc0, fc1);
        const auto direct = affine_forward(pos, fc1);
        CHECK(oracle::max_rel_err(out.features, direct.features) <= 1e-12);
    }

    SUBCASE("random head equals scalar re-evaluation") {
        AffineParams<double> fc0{3, 3, {}, {}};
        fc0.weights.resize(9);
        fc0.bias.resize(3);
        for (double& v : fc0.weights) v = rng.uniform(-1.0, 1.0);
        for (double& v : fc0.bias) v = rng.uniform(-1.0, 1.0);
        AffineParams<double> fc1{3, 2, {}, {}};
        fc1.weights.resize(6);
        fc1.bias.resize(2);
        for (double& v : fc1.weights) v = rng.uniform(-1.0, 1.0);
        for (double& v : fc1.bias) v = rng.uniform(-1.0, 1.0);

        const auto out = mlp_head_forward(st, fc0, fc1);
        for (int64_t i = 0; i < 8; ++i) {
            double h[3];
            for (int j = 0; j < 3; ++j) {
                double a = fc0.bias[size_t(j)];
                for (int k = 0; k < 3; ++k)
                    a += st.features.at(i, k) * fc0.weights[size_t(k) * 3 + size_t(j)];
                h[j] = a >= 0.0 ? a : 0.01 * a;
            }
            for (int j = 0; j < 2; ++j) {
                double a = fc1.bias[size_t(j)];
                for (int k = 0; k < 3; ++k) a += h[k] * fc1.weights[size_t(k) * 2 + size_t(j)];
                CHECK(out.features.at(i, j) == doctest::Approx(a).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("conv backward hand cases") {
    SUBCASE("all-ones upstream through a conv gives d_bias = N") {
        Rng rng(81);
        const auto coords = oracle::random_support(rng, 5, 12);
        SparseTensor<double> st;
        st.coords = coords;
        st.features = oracle::random_features<double>(rng, 12, 2);
        const Rulebook rb = build_rulebook_subm(coords, build_coord_index(coords), KernelSpec::subm3());
        const auto p = oracle::random_conv<double>(rng, 27, 2, 3);
        LayerCache<double> cache;
        subm_conv_forward(st, rb, p, &cache);
        const auto g = layer_backward(cache, Matrix<double>(12, 3, 1.0));
        for (double db : g.d_bias) CHECK(db == doctest::Approx(12.0).epsilon(1e-12));
    }

    SUBCASE("single voxel: center weight gradient is the outer product") {
        Rng rng(82);
        SparseTensor<double> st;
        st.coords = {{1, 2, 3}};
        st.features = oracle::random_features<double>(rng, 1, 2);
        const Rulebook rb =
            build_rulebook_subm(st.coords, build_coord_index(st.coords), KernelSpec::subm3());
        const auto p = oracle::random_conv<double>(rng, 27, 2, 3);
        LayerCache<double> cache;
        subm_conv_forward(st, rb, p, &cache);
        Matrix<double> up = oracle::random_features<double>(rng, 1, 3);
        const auto g = layer_backward(cache, up);
        for (int ci = 0; ci < 2; ++ci)
            for (int co = 0; co < 3; ++co) {
                const double want = st.features.at(0, ci) * up.at(0, co);
                CHECK(g.d_weights[size_t(13) * 6 + size_t(ci) * 3 + size_t(co)] ==
                      doctest::Approx(want).epsilon(1e-12));
            }
        // all other offsets have no pairs, so their weight gradients vanish
        for (int k = 0; k < 27; ++k) {
            if (k == 13) continue;
            for (int e = 0; e < 6; ++e) CHECK(g.d_weights[size_t(k) * 6 + size_t(e)] == 0.0);
        }
    }
}

TEST_CASE("finite differences validate every layer backward") {
    Rng rng(91);

    SUBCASE("submanifold conv") {
        const auto coords = oracle::random_support(rng, 5, 14);
        SparseTensor<double> st;
        st.coords = coords;
        st.features = oracle::random_features<double>(rng, 14, 3);
        const Rulebook rb = build_rulebook_subm(coords, build_coord_index(coords), KernelSpec::subm3());
        auto p = oracle::random_conv<double>(rng, 27, 3, 2);
        const Matrix<double> c = oracle::random_features<double>(rng, 14, 2);

        LayerCache<double> cache;
        subm_conv_forward(st, rb, p, &cache);
        const auto g = layer_backward(cache, c);
        auto value = [&] { return dot_all(c, subm_conv_forward(st, rb, p).features); };
        CHECK(oracle::fd_violation(value, p.weights.data(), p.weights.size(), g.d_weights.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, p.bias.data(), p.bias.size(), g.d_bias.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, st.features.data.data(), st.features.data.size(),
                                   g.d_input.data.data()) <= 1.0);
    }

    SUBCASE("strided conv") {
        const auto coords = oracle::random_support(rng, 6, 20);
        SparseTensor<double> st;
        st.coords = coords;
        st.features = oracle::random_features<double>(rng, 20, 2);
        auto [coarse, rb] = build_downsample(coords, KernelSpec::down2());
        auto p = oracle::random_conv<double>(rng, 8, 2, 3);
        const Matrix<double> c = oracle::random_features<double>(rng, int64_t(coarse.size()), 3);

        LayerCache<double> cache;
        strided_conv_forward(st, rb, coarse, p, &cache);
        const auto g = layer_backward(cache, c);
        auto value = [&] { return dot_all(c, strided_conv_forward(st, rb, coarse, p).features); };
        CHECK(oracle::fd_violation(value, p.weights.data(), p.weights.size(), g.d_weights.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, p.bias.data(), p.bias.size(), g.d_bias.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, st.features.data.data(), st.features.data.size(),
                                   g.d_input.data.data()) <= 1.0);
    }

    SUBCASE("inverse conv") {
        const auto fine = oracle::random_support(rng, 6, 20);
        auto [coarse, rb] = build_downsample(fine, KernelSpec::down2());
        const Rulebook rbt = transpose_rulebook(rb, fine);
        SparseTensor<double> st;
        st.coords = coarse;
        st.features = oracle::random_features<double>(rng, int64_t(coarse.size()), 3);
        auto p = oracle::random_conv<double>(rng, 8, 3, 2);
        const Matrix<double> c = oracle::random_features<double>(rng, int64_t(fine.size()), 2);

        LayerCache<double> cache;
        inverse_conv_forward(st, rbt, fine, p, &cache);
        const auto g = layer_backward(cache, c);
        auto value = [&] { return dot_all(c, inverse_conv_forward(st, rbt, fine, p).features); };
        CHECK(oracle::fd_violation(value, p.weights.data(), p.weights.size(), g.d_weights.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, p.bias.data(), p.bias.size(), g.d_bias.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, st.features.data.data(), st.features.data.size(),
                                   g.d_input.data.data()) <= 1.0);
    }

    SUBCASE("instance norm") {
        SparseTensor<double> st;
        st.coords = oracle::random_support(rng, 5, 12);
        st.features = oracle::random_features<double>(rng, 12, 2, 2.0);
        NormParams<double> p;
        p.gamma = {1.3, 0.7};
        p.beta = {0.2, -0.4};
        p.eps = 1e-5;
        const Matrix<double> c = oracle::random_features<double>(rng, 12, 2);

        LayerCache<double> cache;
        sparse_instance_norm(st, p, &cache);
        const auto g = layer_backward(cache, c);
        auto value = [&] { return dot_all(c, sparse_instance_norm(st, p).features); };
        CHECK(oracle::fd_violation(value, p.gamma.data(), p.gamma.size(), g.d_gamma.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, p.beta.data(), p.beta.size(), g.d_beta.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, st.features.data.data(), st.features.data.size(),
                                   g.d_input.data.data()) <= 1.0);
    }

    SUBCASE("leaky relu") {
        SparseTensor<double> st;
        st.coords = oracle::random_support(rng, 5, 15);
        st.features = oracle::random_features<double>(rng, 15, 2);
        // keep inputs away from the kink so central differences are valid
        for (double& v : st.features.data)
            if (std::abs(v) < 1e-3) v = 0.5;
        const Matrix<double> c = oracle::random_features<double>(rng, 15, 2);

        LayerCache<double> cache;
        leaky_relu(st, 0.01, &cache);
        const auto g = layer_backward(cache, c);
        auto value = [&] { return dot_all(c, leaky_relu(st, 0.01).features); };
        CHECK(oracle::fd_violation(value, st.features.data.data(), st.features.data.size(),
                                   g.d_input.data.data()) <= 1.0);
    }

    SUBCASE("mlp head") {
        SparseTensor<double> st;
        st.coords = oracle::random_support(rng, 5, 10);
        st.features = oracle::random_features<double>(rng, 10, 3);
        AffineParams<double> fc0{3, 3, {}, {}};
        fc0.weights.resize(9);
        fc0.bias.resize(3);
        for (double& v : fc0.weights) v = rng.uniform(-1.0, 1.0);
        for (double& v : fc0.bias) v = rng.uniform(-1.0, 1.0);
        AffineParams<double> fc1{3, 2, {}, {}};
        fc1.weights.resize(6);
        fc1.bias.resize(2);
        for (double& v : fc1.weights) v = rng.uniform(-1.0, 1.0);
        for (double& v : fc1.bias) v = rng.uniform(-1.0, 1.0);
        const Matrix<double> c = oracle::random_features<double>(rng, 10, 2);

        LayerCache<double> cache;
        mlp_head_forward(st, fc0, fc1, 0.01, &cache);
        const auto g = layer_backward(cache, c);
        auto value = [&] { return dot_all(c, mlp_head_forward(st, fc0, fc1, 0.01).features); };
        CHECK(oracle::fd_violation(value, fc1.weights.data(), fc1.weights.size(), g.d_weights.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, fc1.bias.data(), fc1.bias.size(), g.d_bias.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, fc0.weights.data(), fc0.weights.size(),
                                   g.d_weights_hidden.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, fc0.bias.data(), fc0.bias.size(), g.d_bias_hidden.data()) <= 1.0);
        CHECK(oracle::fd_violation(value, st.features.data.data(), st.features.data.size(),
                                   g.d_input.data.data()) <= 1.0);
    }
}

TEST_CASE("conv linearity and permutation equivariance") {
    Rng rng(101);
    const auto coords = oracle::random_support(rng, 6, 25);
    const Rulebook rb = build_rulebook_subm(coords, build_coord_index(coords), KernelSpec::subm3());
    auto p = oracle::random_conv<double>(rng, 27, 2, 2, /*with_bias=*/false);

    SUBCASE("linearity with zero bias") {
        SparseTensor<double> x, y;
        x.coords = coords;
        x.features = oracle::random_features<double>(rng, 25, 2);
        y.coords = coords;
        y.features = oracle::random_features<double>(rng, 25, 2);
        SparseTensor<double> mix = x;
        for (size_t i = 0; i < mix.features.data.size(); ++i)
            mix.features.data[i] = 2.0 * x.features.data[i] - 3.0 * y.features.data[i];
        const auto fx = subm_conv_forward(x, rb, p);
        const auto fy = subm_conv_forward(y, rb, p);
        const auto fmix = subm_conv_forward(mix, rb, p);
        for (size_t i = 0; i < fmix.features.data.size(); ++i)
            CHECK(fmix.features.data[i] ==
                  doctest::Approx(2.0 * fx.features.data[i] - 3.0 * fy.features.data[i])
                      .epsilon(1e-12));
    }

    SUBCASE("row permutation permutes outputs bit-exactly") {
        SparseTensor<double> st;
        st.coords = coords;
        st.features = oracle::random_features<double>(rng, 25, 2);
        const auto base = subm_conv_forward(st, rb, p);

        std::vector<size_t> perm(coords.size());
        std::iota(perm.begin(), perm.end(), size_t(0));
        for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);

        SparseTensor<double> shuffled;
        shuffled.coords.resize(coords.size());
        shuffled.features = Matrix<double>(int64_t(coords.size()), 2);
        for (size_t i = 0; i < perm.size(); ++i) {
            shuffled.coords[i] = st.coords[perm[i]];
            for (int64_t j = 0; j < 2; ++j)
                shuffled.features.at(int64_t(i), j) = st.features.at(int64_t(perm[i]), j);
        }
        const Rulebook rb2 =
            build_rulebook_subm(shuffled.coords, build_coord_index(shuffled.coords), KernelSpec::subm3());
        const auto out = subm_conv_forward(shuffled, rb2, p);
        for (size_t i = 0; i < perm.size(); ++i)
            for (int64_t j = 0; j < 2; ++j)
                CHECK(out.features.at(int64_t(i), j) == base.features.at(int64_t(perm[i]), j));
    }
}
