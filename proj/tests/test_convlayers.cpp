#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"

#include "convseq/convlayers.hpp"
#include "convseq/errors.hpp"

using namespace convseq;

namespace {

double dconv_kernel_at(const Tensor &wd, const oracle::Matrix &v, std::size_t i, std::size_t row, std::size_t k) {
    const std::size_t K = wd.shape()[1], dv = wd.shape()[2];
    double acc = 0.0;
    for (std::size_t c = 0; c < dv; ++c) acc += wd[((row - 1) * K + (k - 1)) * dv + c] * v[i - 1][c];
    return acc;
}

Tensor identity(std::size_t n) {
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return Tensor({n, n}, std::move(d), true);
}

Tensor stacked(const Tensor &top, const Tensor &bottom) { return transpose(concat_cols({transpose(top), transpose(bottom)})); }

// loss = <layer(x), w> and its finite-difference check over every parameter
void check_block_gradients(ConvBlockParams &p, std::size_t T, std::uint64_t seed, bool training = false) {
    std::mt19937_64 r(seed);
    Tensor x = oracle::random_tensor({T, p.options.channels}, r, -1, 1, true);
    const Tensor w = oracle::random_tensor({T, p.options.channels}, r);
    auto loss_fn = [&] {
        Rng rng(seed);
        ForwardContext ctx{training, &rng};
        return sum(mul(conv_block(x, p, ctx), w));
    };
    const Gradients g = backward(loss_fn());
    auto value = [&] {
        NoGradGuard guard;
        return loss_fn().item();
    };
    for (auto [name, t] : p.named_tensors()) {
        INFO(name);
        CHECK(oracle::relative_error(g.of(t), oracle::numeric_gradient(value, t)) < 1e-5);
    }
    CHECK(oracle::relative_error(g.of(x), oracle::numeric_gradient(value, x)) < 1e-5);
}

} // namespace

TEST_CASE("kernel row mapping at boundaries") {
    // 1-based j=1 -> row 1, j=dv -> row H
    CHECK(kernel_row(0, 4, 16) == 0);
    CHECK(kernel_row(15, 4, 16) == 3);
    CHECK(kernel_row(3, 4, 16) == 0);
    CHECK(kernel_row(4, 4, 16) == 1);
    CHECK(kernel_row(0, 1, 5) == 0);
    CHECK(kernel_row(4, 1, 5) == 0);
    CHECK(kernel_row(4, 5, 5) == 4);
    // non-dividing sharing still lands inside 0..H-1
    for (std::size_t dv = 1; dv <= 7; ++dv)
        for (std::size_t h = 1; h <= 9; ++h)
            for (std::size_t j = 0; j < dv; ++j) CHECK(kernel_row(j, h, dv) < h);
}

TEST_CASE("kernel row mapping is surjective when sharing divides channels") {
    for (std::size_t dv : {2, 4, 6, 12, 64})
        for (std::size_t h = 1; h <= dv; ++h) {
            if (dv % h) continue;
            std::vector<bool> hit(h, false);
            for (std::size_t j = 0; j < dv; ++j) hit[kernel_row(j, h, dv)] = true;
            CHECK(std::all_of(hit.begin(), hit.end(), [](bool b) { return b; }));
        }
}

TEST_CASE("lconv examples") {
    std::mt19937_64 r(1);
    const Tensor v = oracle::random_tensor({5, 4}, r);

    const LConvKernel delta1{Tensor({2, 1}, {1.0, 1.0})};
    CHECK(oracle::max_abs_diff(convseq::lconv(v, delta1, false), oracle::to_matrix(v)) == 0.0);

    const LConvKernel delta3{Tensor({2, 3}, {0, 1, 0, 0, 1, 0})};
    CHECK(oracle::max_abs_diff(convseq::lconv(v, delta3, false), oracle::to_matrix(v)) == 0.0);

    CHECK_THROWS_AS(time_conv(v, Tensor({2, 2}, {1, 1, 1, 1}), 2, 2, false), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(LConvKernel::init(2, 4, rng), ConfigError);
}

TEST_CASE("lconv matches the nested-loop oracle") {
    std::mt19937_64 r(2);
    for (bool causal : {false, true}) {
        const Tensor v = oracle::random_tensor({5, 4}, r);
        const Tensor w = oracle::random_tensor({2, 3}, r);
        const auto expect = oracle::conv_time_direct(oracle::to_matrix(v), 2, 3, causal,
                                                     [&](std::size_t, std::size_t row, std::size_t k) { return w.at(row - 1, k - 1); });
        CHECK(oracle::max_abs_diff(convseq::lconv(v, LConvKernel{w}, causal), expect) < 1e-12);
    }
}

TEST_CASE("lconv with one row per channel is depthwise convolution") {
    std::mt19937_64 r(3);
    const Tensor v = oracle::random_tensor({7, 5}, r);
    const Tensor w = oracle::random_tensor({5, 3}, r);
    const auto expect = oracle::depthwise_direct(oracle::to_matrix(v), oracle::to_matrix(w));
    CHECK(oracle::max_abs_diff(convseq::lconv(v, LConvKernel{w}, false), expect) < 1e-12);
    CHECK(LConvKernel{w}.parameter_count() == 5 * 3);
}

TEST_CASE("dconv examples") {
    std::mt19937_64 r(4);
    const Tensor v = oracle::random_tensor({4, 2}, r);
    const DConvPredictor zero{Tensor::zeros({2, 3, 2})};
    const Tensor zeroed = dconv(v, zero, false);
    for (double x : zeroed.data()) CHECK(x == 0.0);

    // Constant-row input: W^D v_t is the same for every t, so DConv reduces
    // to LConv with that kernel. Build W^D so the kernel equals a chosen W^L.
    const std::vector<double> row{0.5, -1.5};
    const Tensor constant({4, 2}, {0.5, -1.5, 0.5, -1.5, 0.5, -1.5, 0.5, -1.5});
    const Tensor wl = oracle::random_tensor({2, 3}, r);
    std::vector<double> wd(2 * 3 * 2, 0.0);
    // W^D[h,k,:] = wl[h,k] * row / |row|^2
    const double norm2 = row[0] * row[0] + row[1] * row[1];
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t c = 0; c < 2; ++c) wd[(h * 3 + k) * 2 + c] = wl.at(h, k) * row[c] / norm2;
    const DConvPredictor pred{Tensor({2, 3, 2}, wd)};
    CHECK(oracle::max_abs_diff(dconv(constant, pred, false), oracle::to_matrix(convseq::lconv(constant, LConvKernel{wl}, false))) <
          1e-12);
}

TEST_CASE("dconv matches the per-position oracle") {
    std::mt19937_64 r(5);
    for (bool causal : {false, true}) {
        const Tensor v = oracle::random_tensor({4, 2}, r);
        const Tensor wd = oracle::random_tensor({2, 3, 2}, r);
        const auto vm = oracle::to_matrix(v);
        const auto expect = oracle::conv_time_direct(vm, 2, 3, causal, [&](std::size_t i, std::size_t row, std::size_t k) {
            return dconv_kernel_at(wd, vm, i, row, k);
        });
        CHECK(oracle::max_abs_diff(dconv(v, DConvPredictor{wd}, causal), expect) < 1e-12);
    }
}

TEST_CASE("lconv_f examples") {
    std::mt19937_64 r(6);
    const Tensor v = oracle::random_tensor({3, 5}, r);
    CHECK(oracle::max_abs_diff(lconv_f(v, Tensor::vector({0, 1, 0})), oracle::to_matrix(v)) == 0.0);

    const Tensor shifted = lconv_f(v, Tensor::vector({1, 0, 0}));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(shifted.at(i, 0) == 0.0);
        for (std::size_t j = 1; j < 5; ++j) CHECK(shifted.at(i, j) == v.at(i, j - 1));
    }

    const Tensor w = oracle::random_tensor({5}, r);
    const auto expect = oracle::conv_freq_direct(oracle::to_matrix(v), 5, [&](std::size_t, std::size_t k) { return w[k - 1]; });
    CHECK(oracle::max_abs_diff(lconv_f(v, w), expect) < 1e-12);

    CHECK_THROWS_AS(lconv_f(v, Tensor::vector({1, 1})), ConfigError);
}

TEST_CASE("dconv_f examples") {
    std::mt19937_64 r(7);
    const Tensor v = oracle::random_tensor({4, 5}, r);
    const Tensor zeroed = dconv_f(v, Tensor::zeros({3, 5}));
    for (double x : zeroed.data()) CHECK(x == 0.0);

    const Tensor wu = oracle::random_tensor({3, 5}, r);
    const Tensor row = slice_rows(v, 0, 1);
    const Tensor kernel = reshape(matmul_nt(row, wu), {3});
    CHECK(oracle::max_abs_diff(dconv_f(row, wu), oracle::to_matrix(lconv_f(row, kernel))) < 1e-12);

    const auto vm = oracle::to_matrix(v);
    const auto expect = oracle::conv_freq_direct(vm, 3, [&](std::size_t i, std::size_t k) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 5; ++c) acc += wu.at(k - 1, c) * vm[i - 1][c];
        return acc;
    });
    CHECK(oracle::max_abs_diff(dconv_f(v, wu), expect) < 1e-12);
}

TEST_CASE("causal convolution ignores the future") {
    std::mt19937_64 r(8);
    const Tensor w = oracle::random_tensor({2, 5}, r);
    const Tensor wd = oracle::random_tensor({2, 5, 4}, r);
    const Tensor v = oracle::random_tensor({6, 4}, r);
    const Tensor base_l = convseq::lconv(v, LConvKernel{w}, true);
    const Tensor base_d = dconv(v, DConvPredictor{wd}, true);
    for (std::size_t t = 0; t < 6; ++t) {
        std::vector<double> data(v.data().begin(), v.data().end());
        for (std::size_t j = t * 4; j < data.size(); ++j) data[j] += 10.0 * (j % 3 + 1);
        const Tensor perturbed({6, 4}, data);
        const Tensor out_l = convseq::lconv(perturbed, LConvKernel{w}, true);
        const Tensor out_d = dconv(perturbed, DConvPredictor{wd}, true);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                CHECK(out_l.at(i, j) == base_l.at(i, j));
                CHECK(out_d.at(i, j) == base_d.at(i, j));
            }
    }
}

TEST_CASE("interior outputs do not depend on the padding convention") {
    // Replace zero padding with arbitrary values by embedding the sequence in
    // a longer one; interior positions must agree.
    std::mt19937_64 r(9);
    const std::size_t T = 9, K = 5, half = K / 2;
    const Tensor w = oracle::random_tensor({2, K}, r);
    const Tensor v = oracle::random_tensor({T, 4}, r);
    const Tensor noise_before = oracle::random_tensor({half, 4}, r);
    const Tensor noise_after = oracle::random_tensor({half, 4}, r);
    const Tensor longer = transpose(concat_cols({transpose(noise_before), transpose(v), transpose(noise_after)}));
    const Tensor a = convseq::lconv(v, LConvKernel{w}, false);
    const Tensor b = convseq::lconv(longer, LConvKernel{w}, false);
    for (std::size_t i = half; i < T - half; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(a.at(i, j) - b.at(i + half, j)) < 1e-12);
}

TEST_CASE("conv block parameter counts") {
    Rng rng(1);
    const std::size_t d = 8, H = 2, K = 5;
    auto count = [&](ConvKind kind, bool two_d) {
        return ConvBlockParams::init({kind, two_d, d, H, K}, rng).parameter_count();
    };
    CHECK(count(ConvKind::Lightweight, false) == 2 * d * d + H * K + d * d);
    CHECK(count(ConvKind::Dynamic, false) == 2 * d * d + H * K * d + d * d);
    CHECK(count(ConvKind::Lightweight, true) == 2 * d * d + H * K + K + 2 * d * d);
    CHECK(count(ConvKind::Dynamic, true) == 2 * d * d + H * K * d + K * d + 2 * d * d);
    const auto p = ConvBlockParams::init({ConvKind::Lightweight, false, d, H, K}, rng);
    CHECK(p.lconv->parameter_count() == H * K);
}

TEST_CASE("conv block validation") {
    Rng rng(2);
    auto p = ConvBlockParams::init({ConvKind::Lightweight, true, 4, 2, 3}, rng);
    p.freq.reset();
    CHECK_THROWS_AS(conv_block(Tensor::zeros({3, 4}), p, {}), ConfigError);
    auto q = ConvBlockParams::init({ConvKind::Lightweight, false, 4, 2, 3}, rng);
    CHECK_THROWS_AS(dconv_layer(Tensor::zeros({3, 4}), q, {}), ConfigError);
    CHECK_THROWS_AS(ConvBlockParams::init({ConvKind::Dynamic, false, 4, 2, 4}, rng), ConfigError);
}

TEST_CASE("lconv layer hand-checked composition") {
    // W^I = [I | 0] puts V in the value half and zeros in the gate half, so
    // GLU halves the input; a K=1 kernel of 2 and W^P = I restore it.
    const std::size_t d = 3;
    ConvBlockParams p;
    p.options = {ConvKind::Lightweight, false, d, 1, 1};
    p.input_proj = concat_cols({identity(d), Tensor::zeros({d, d}, true)});
    p.lconv = LConvKernel{Tensor({1, 1}, {2.0}, true)};
    p.output_proj = identity(d);
    std::mt19937_64 r(10);
    const Tensor v = oracle::random_tensor({4, d}, r);
    const Tensor out = lconv_layer(v, p);
    CHECK(out.shape() == Shape{4, d});
    CHECK(oracle::max_abs_diff(out, oracle::to_matrix(v)) < 1e-15);
}

TEST_CASE("conv layers equal their manual composition") {
    Rng rng(3);
    std::mt19937_64 r(11);
    const std::size_t d = 6, T = 5;
    const Tensor v = oracle::random_tensor({T, d}, r);
    for (ConvKind kind : {ConvKind::Lightweight, ConvKind::Dynamic})
        for (bool two_d : {false, true})
            for (bool causal : {false, true}) {
                auto p = ConvBlockParams::init({kind, two_d, d, 3, 3, causal}, rng);
                const Tensor g = glu(matmul(v, p.input_proj));
                const Tensor time = kind == ConvKind::Lightweight ? convseq::lconv(g, *p.lconv, causal) : dconv(g, *p.dconv, causal);
                Tensor expect;
                if (two_d) {
                    const Tensor freq = kind == ConvKind::Lightweight ? lconv_f(g, p.freq->weight) : dconv_f(g, p.freq->weight);
                    expect = matmul(concat_cols({time, freq}), p.freq->merge);
                } else {
                    expect = matmul(time, p.output_proj);
                }
                const Tensor got = conv_block(v, p);
                CHECK(got.shape() == Shape{T, d});
                CHECK(oracle::max_abs_diff(got, oracle::to_matrix(expect)) < 1e-12);
            }
}

TEST_CASE("2-D merge projection selects a branch") {
    Rng rng(4);
    std::mt19937_64 r(12);
    const std::size_t d = 4;
    const Tensor v = oracle::random_tensor({5, d}, r);
    for (ConvKind kind : {ConvKind::Lightweight, ConvKind::Dynamic}) {
        auto p = ConvBlockParams::init({kind, true, d, 2, 3}, rng);
        const Tensor g = glu(matmul(v, p.input_proj));
        const Tensor time = kind == ConvKind::Lightweight ? convseq::lconv(g, *p.lconv, false) : dconv(g, *p.dconv, false);
        const Tensor freq = kind == ConvKind::Lightweight ? lconv_f(g, p.freq->weight) : dconv_f(g, p.freq->weight);

        p.freq->merge = stacked(identity(d), Tensor::zeros({d, d}));
        CHECK(oracle::max_abs_diff(conv_block(v, p), oracle::to_matrix(time)) < 1e-15);
        p.freq->merge = stacked(Tensor::zeros({d, d}), identity(d));
        CHECK(oracle::max_abs_diff(conv_block(v, p), oracle::to_matrix(freq)) < 1e-15);
    }
}

TEST_CASE("softmax-normalised kernels") {
    Rng rng(5);
    std::mt19937_64 r(13);
    auto p = ConvBlockParams::init({ConvKind::Lightweight, false, 4, 2, 3, false, true}, rng);
    const Tensor v = oracle::random_tensor({5, 4}, r);
    const Tensor g = glu(matmul(v, p.input_proj));
    const Tensor expect = matmul(convseq::lconv(g, LConvKernel{softmax_rows(p.lconv->weight)}, false), p.output_proj);
    CHECK(oracle::max_abs_diff(conv_block(v, p), oracle::to_matrix(expect)) < 1e-12);
}

TEST_CASE("DropConnect only in training mode and reproducible per seed") {
    Rng init(6);
    std::mt19937_64 r(14);
    auto p = ConvBlockParams::init({ConvKind::Lightweight, false, 4, 2, 5, false, false, 0.5}, init);
    const Tensor v = oracle::random_tensor({6, 4}, r);
    const Tensor eval = conv_block(v, p, {});
    Rng a(1), b(1), c(2);
    const Tensor ta = conv_block(v, p, {true, &a});
    const Tensor tb = conv_block(v, p, {true, &b});
    const Tensor tc = conv_block(v, p, {true, &c});
    CHECK(oracle::max_abs_diff(ta, oracle::to_matrix(tb)) == 0.0);
    CHECK(oracle::max_abs_diff(ta, oracle::to_matrix(eval)) > 0.0);
    CHECK(oracle::max_abs_diff(ta, oracle::to_matrix(tc)) > 0.0);
}

TEST_CASE("conv layer gradients match finite differences") {
    Rng rng(7);
    std::uint64_t seed = 100;
    for (ConvKind kind : {ConvKind::Lightweight, ConvKind::Dynamic})
        for (bool two_d : {false, true})
            for (bool causal : {false, true}) {
                auto p = ConvBlockParams::init({kind, two_d, 4, 2, 3, causal}, rng);
                check_block_gradients(p, 5, seed++);
            }
    auto soft = ConvBlockParams::init({ConvKind::Dynamic, false, 4, 2, 3, false, true, 0.3}, rng);
    check_block_gradients(soft, 5, seed++, true);
}
