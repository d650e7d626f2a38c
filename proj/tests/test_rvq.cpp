#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "omni/rng.hpp"
#include "omni/rvq.hpp"
#include "omni/tensor.hpp"
#include "testutil.hpp"

using namespace omni;

namespace {

RvqConfig small_cfg(size_t layers, size_t entries, size_t dim) {
    RvqConfig c;
    c.layers = layers;
    c.entries = entries;
    c.dim = dim;
    return c;
}

// The two-dimensional worked example: entries (0,0) pinned, (1,0), (0,1).
RvqStack plane_stack() {
    Rng rng(1);
    RvqStack s(small_cfg(1, 3, 2), rng);
    s.set_entry_for_test(0, 1, {1.0, 0.0});
    s.set_entry_for_test(0, 2, {0.0, 1.0});
    return s;
}

} // namespace

TEST_CASE("zero input selects the pinned zero code at every layer") {
    Rng rng(7);
    RvqStack s(small_cfg(8, 16, 8), rng);
    QuantizeResult q = s.quantize(std::vector<double>(8, 0.0));
    for (uint16_t c : q.frame.codes) CHECK(c == 0);
    for (double n : q.residual_norms) CHECK(n == 0.0);
    for (double v : q.quantized) CHECK(v == 0.0);
}

TEST_CASE("worked two-dimensional example quantizes by hand") {
    RvqStack s = plane_stack();
    QuantizeResult q = s.quantize({0.9, 0.2});
    REQUIRE(q.frame.codes.size() == 1);
    CHECK(q.frame.codes[0] == 1);
    CHECK(q.quantized[0] == 1.0);
    CHECK(q.quantized[1] == 0.0);
    // residual (-0.1, 0.2), norm sqrt(0.05)
    CHECK(q.residual_norms[0] == doctest::Approx(std::sqrt(0.05)).epsilon(1e-12));

    std::vector<double> back = s.dequantize(q.frame);
    CHECK(back[0] == 1.0);
    CHECK(back[1] == 0.0);
}

TEST_CASE("ties break toward the lowest index") {
    RvqStack s = plane_stack();
    // (0.5, 0.5) is equidistant from all three entries.
    QuantizeResult q = s.quantize({0.5, 0.5});
    CHECK(q.frame.codes[0] == 0);
}

TEST_CASE("residual norms never increase across layers") {
    Rng rng(42);
    RvqStack s(small_cfg(8, 16, 8), rng);
    Rng data(43);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> x(8);
        for (double& v : x) v = data.normal() * 2.0;
        QuantizeResult q = s.quantize(x);
        double prev = 1e300;
        for (double n : q.residual_norms) {
            CHECK(n <= prev);
            prev = n;
        }
        // Never worse than emitting all zero codes.
        double norm = 0.0;
        for (double v : x) norm += v * v;
        CHECK(q.residual_norms.back() <= std::sqrt(norm));
    }
}

TEST_CASE("a deeper stack reconstructs no worse on the shared prefix") {
    Rng r1(9), r2(9);
    RvqStack deep(small_cfg(8, 16, 8), r1);
    RvqStack shallow(small_cfg(7, 16, 8), r2);
    Rng data(10);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x(8);
        for (double& v : x) v = data.normal();
        QuantizeResult qd = deep.quantize(x);
        QuantizeResult qs = shallow.quantize(x);
        for (size_t l = 0; l < 7; ++l) {
            CHECK(qd.frame.codes[l] == qs.frame.codes[l]);
            CHECK(qd.residual_norms[l] == qs.residual_norms[l]);
        }
        CHECK(qd.residual_norms[7] <= qs.residual_norms[6]);
    }
}

TEST_CASE("quantize is deterministic and validates dimensions") {
    Rng rng(5);
    RvqStack s(small_cfg(4, 8, 6), rng);
    std::vector<double> x = {0.3, -1.2, 0.7, 0.0, 2.1, -0.4};
    QuantizeResult a = s.quantize(x);
    QuantizeResult b = s.quantize(x);
    CHECK(a.frame.codes == b.frame.codes);
    CHECK(a.quantized == b.quantized);

    CHECK_THROWS_WITH_AS(s.quantize({1.0, 2.0}), doctest::Contains("dimension"),
                         std::runtime_error);
}

TEST_CASE("dequantize rejects out-of-range codes and handles the zero frame") {
    Rng rng(5);
    RvqStack s(small_cfg(3, 8, 4), rng);
    CodeFrame zero{std::vector<uint16_t>(3, 0)};
    for (double v : s.dequantize(zero)) CHECK(v == 0.0);

    CodeFrame bad{{0, 8, 0}};
    CHECK_THROWS_WITH_AS(s.dequantize(bad), doctest::Contains("out of range"),
                         std::runtime_error);
    CodeFrame wrong_depth{{0, 0}};
    CHECK_THROWS_AS(s.dequantize(wrong_depth), std::runtime_error);
}

TEST_CASE("ema update converges to a repeated vector") {
    Rng rng(21);
    RvqStack s(small_cfg(1, 8, 4), rng);
    // Target sits just off an existing entry so that entry, not the
    // pinned zero, wins the assignment from the start.
    std::vector<double> v(4);
    for (size_t d = 0; d < 4; ++d) v[d] = 1.05 * s.entry(0, 3, d);
    CHECK(s.quantize(v).frame.codes[0] == 3);

    std::vector<std::vector<double>> batch(4, v);
    for (int it = 0; it < 300; ++it) s.ema_update(batch, 0.9);
    CHECK(s.quantize(v).residual_norms[0] < 1e-6);
}

TEST_CASE("ema update rejects boundary decay and empty batches") {
    Rng rng(3);
    RvqStack s(small_cfg(1, 4, 2), rng);
    std::vector<std::vector<double>> batch = {{0.5, 0.5}};
    CHECK_THROWS_WITH_AS(s.ema_update(batch, 1.0), doctest::Contains("(0,1)"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(s.ema_update(batch, 0.0), doctest::Contains("(0,1)"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(s.ema_update(std::vector<std::vector<double>>{}, 0.9),
                         doctest::Contains("empty batch"), std::runtime_error);
}

TEST_CASE("pinned entry stays exactly zero through training") {
    Rng rng(13);
    RvqStack s(small_cfg(2, 8, 4), rng);
    Rng data(14);
    for (int it = 0; it < 20; ++it) {
        std::vector<std::vector<double>> batch(6, std::vector<double>(4));
        for (auto& row : batch)
            for (double& x : row) x = data.normal();
        s.ema_update(batch, 0.99);
    }
    for (size_t l = 0; l < 2; ++l)
        for (size_t d = 0; d < 4; ++d) CHECK(s.entry(l, 0, d) == 0.0);
}

TEST_CASE("dead codebook entries are reseeded from live residuals") {
    RvqConfig cfg = small_cfg(1, 4, 2);
    cfg.restart_after = 3;
    Rng rng(31);
    RvqStack s(cfg, rng);
    // All batch mass lands on one entry; the others starve.
    std::vector<double> v = {s.entry(0, 1, 0), s.entry(0, 1, 1)};
    std::vector<std::vector<double>> batch = {v, v};
    std::vector<double> before2 = {s.entry(0, 2, 0), s.entry(0, 2, 1)};
    for (int it = 0; it < 3; ++it) s.ema_update(batch, 0.9);
    std::vector<double> after2 = {s.entry(0, 2, 0), s.entry(0, 2, 1)};
    CHECK(after2 != before2);
    // Reseeded value is one of the batch residual vectors, which at
    // layer 0 are the batch vectors themselves.
    CHECK(after2 == v);
}

TEST_CASE("usage stats report entropy and perplexity per layer") {
    Rng rng(17);
    RvqStack s(small_cfg(2, 4, 2), rng);

    std::vector<CodeFrame> constant(10, CodeFrame{{2, 1}});
    auto u = s.usage_stats(constant);
    REQUIRE(u.size() == 2);
    CHECK(u[0].perplexity == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(u[1].perplexity == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(u[0].entropy == 0.0);

    std::vector<CodeFrame> uniform;
    for (uint16_t k = 0; k < 4; ++k) uniform.push_back(CodeFrame{{k, uint16_t(3 - k)}});
    u = s.usage_stats(uniform);
    CHECK(u[0].perplexity == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(u[1].perplexity == doctest::Approx(4.0).epsilon(1e-12));

    CHECK_THROWS_WITH_AS(s.usage_stats({}), doctest::Contains("empty history"),
                         std::runtime_error);
}

TEST_CASE("straight-through value is the quantization, gradient is identity") {
    Rng rng(23);
    RvqStack s(small_cfg(4, 8, 6), rng);
    Rng data(24);
    std::vector<double> xd(3 * 6);
    for (double& v : xd) v = data.normal();
    Tensor x = Tensor::from_data({3, 6}, xd, true);

    Tensor st = s.quantize_st(x);
    Tensor hard = s.decode_rows(s.encode_rows(x));
    REQUIRE(st.shape() == hard.shape());
    for (size_t i = 0; i < st.size(); ++i) CHECK(st.at(i) == hard.at(i));

    std::vector<double> w(x.size());
    for (double& v : w) v = data.uniform() * 2.0 - 1.0;
    Tensor loss = sum(mul(st, Tensor::from_data(x.shape(), w)));
    backward(loss);
    for (size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == w[i]);
}

TEST_CASE("commitment loss vanishes on codebook sums") {
    Rng rng(29);
    RvqStack s(small_cfg(1, 8, 4), rng);
    std::vector<double> e(4);
    for (size_t d = 0; d < 4; ++d) e[d] = s.entry(0, 5, d);
    Tensor x = Tensor::from_data({1, 4}, e, true);
    CHECK(s.commitment_loss(x).value() == 0.0);

    // Gradient flows to x only, toward the frozen quantization.
    std::vector<double> off = e;
    off[0] += 0.2;
    Tensor y = Tensor::from_data({1, 4}, off, true);
    Tensor c = s.commitment_loss(y);
    CHECK(c.value() == doctest::Approx(0.2 * 0.2 / 4.0).epsilon(1e-12));
    backward(c);
    CHECK(y.grad()[0] == doctest::Approx(2.0 * 0.2 / 4.0).epsilon(1e-12));
}

TEST_CASE("codebooks round trip through named tensors") {
    Rng r1(101), r2(999);
    RvqStack a(small_cfg(3, 8, 4), r1);
    RvqStack b(small_cfg(3, 8, 4), r2);

    auto named = a.named_tensors();
    REQUIRE(named.size() == 3);
    CHECK(named[0].first == "rvq.layer0.vectors");
    CHECK(named[2].first == "rvq.layer2.vectors");
    CHECK(named[1].second.shape() == std::vector<size_t>{8, 4});

    Rng data(55);
    std::vector<double> x(4);
    for (double& v : x) v = data.normal();
    CHECK(a.quantize(x).frame.codes != b.quantize(x).frame.codes);

    b.load_tensors(named);
    CHECK(a.quantize(x).frame.codes == b.quantize(x).frame.codes);

    // A checkpoint claiming a nonzero pinned entry is corrected on load.
    auto tampered = named;
    std::vector<double> vals = tampered[0].second.data();
    vals[0] = 7.5;
    tampered[0].second = Tensor::from_data({8, 4}, vals);
    b.load_tensors(tampered);
    CHECK(b.entry(0, 0, 0) == 0.0);

    CHECK_THROWS_WITH_AS(b.load_tensors({named[0]}), doctest::Contains("missing tensor"),
                         std::runtime_error);
}
