#include <cmath>

#include <doctest.h>

#include "dg/binio.hpp"
#include "dg/error.hpp"
#include "dg/int8.hpp"
#include "dg/model.hpp"
#include "support.hpp"

using namespace dg;

TEST_SUITE("quant-baseline") {

TEST_CASE("exact worked example") {
    auto q = quantize_tensor(Tensor({2}, {0.0f, 1.27f}));
    CHECK(q.scale == doctest::Approx(0.01f));
    CHECK(q.q == std::vector<std::int8_t>{0, 127});
    auto d = dequantize_tensor(q);
    CHECK(d[0] == 0.0f);
    CHECK(d[1] == doctest::Approx(1.27f).epsilon(1e-6));
}

TEST_CASE("all-zero tensor gets scale one") {
    auto q = quantize_tensor(Tensor::zeros({3, 3}));
    CHECK(q.scale == 1.0f);
    for (auto v : q.q) CHECK(v == 0);
}

TEST_CASE("round-trip error is at most half a step") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        auto w = rng_normal(rng, {1 + rng.below(30), 1 + rng.below(30)}, 0.1f + float(rng.uniform()));
        auto q = quantize_tensor(w);
        double mx = 0;
        for (float v : w.data()) mx = std::max(mx, double(std::abs(v)));
        CHECK(q.scale == doctest::Approx(mx / 127.0).epsilon(1e-6));
        auto d = dequantize_tensor(q);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            CHECK(std::abs(int(q.q[i])) <= 127);
            CHECK(std::abs(d[i] - w[i]) <= q.scale * 0.5f * (1 + 1e-5f));
        }
    }
}

TEST_CASE("quantization is odd-symmetric") {
    Rng rng(2);
    auto w = rng_normal(rng, {50}, 1.0f);
    auto neg = w;
    for (auto& v : neg.data()) v = -v;
    auto a = quantize_tensor(w), b = quantize_tensor(neg);
    CHECK(a.scale == b.scale);
    for (std::size_t i = 0; i < 50; ++i) CHECK(a.q[i] == -b.q[i]);
}

TEST_CASE("quantizing a dequantized model reproduces the codes") {
    Rng rng(3);
    auto c = init_model(dgtest::tiny_arch(), rng);
    auto q1 = quantize(c);
    auto q2 = quantize(dequantize(q1));
    for (const auto& [name, t] : q1.tensors) {
        CHECK(t.q == q2.tensors.at(name).q);
        CHECK(t.scale == doctest::Approx(q2.tensors.at(name).scale).epsilon(1e-6));
    }
}

TEST_CASE("every tensor is quantized and the result is a usable checkpoint") {
    Rng rng(4);
    auto c = init_model(dgtest::tiny_arch(), rng);
    auto q = quantize(c);
    CHECK(q.tensors.size() == c.tensors.size());
    auto d = dequantize(q);
    d.check_layout();
    auto out = forward(d, std::vector<int>{tok::kBos, 'a'}, false).logits;
    CHECK(out.all_finite());
}

TEST_CASE("int8 file round-trip and layout") {
    dgtest::TempDir dir;
    Rng rng(5);
    auto c = init_model(dgtest::tiny_arch(), rng);
    auto q = quantize(c);
    save_int8(q, dir / "m.dgi8");
    CHECK(load_int8(dir / "m.dgi8") == q);

    auto bytes = dgtest::read_bytes(dir / "m.dgi8");
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DGI8");
    std::uint64_t hlen;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    // Payload: one byte per parameter, then one f32 scale per tensor.
    CHECK(bytes.size() - binio::kPreambleBytes - hlen == param_count(c.arch) + 4 * c.tensors.size());

    auto cut = bytes;
    cut.resize(bytes.size() - 2);
    dgtest::write_bytes(dir / "t.dgi8", cut);
    CHECK_THROWS_WITH_AS(load_int8(dir / "t.dgi8"), doctest::Contains("corrupt int8 file"), FormatError);
    auto magic = bytes;
    magic[3] = '9';
    dgtest::write_bytes(dir / "m9.dgi8", magic);
    CHECK_THROWS_WITH_AS(load_int8(dir / "m9.dgi8"), doctest::Contains("unsupported format"), FormatError);
}

} // TEST_SUITE
