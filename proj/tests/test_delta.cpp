#include <cmath>

#include <doctest.h>

#include "dg/binio.hpp"
#include "dg/delta.hpp"
#include "dg/error.hpp"
#include "support.hpp"

using namespace dg;

namespace {

/// Plain double-precision residual iteration, independent of the library.
struct OraclePlane {
    double gamma;
    std::vector<int> sign;
};

std::vector<OraclePlane> oracle_compress(const Tensor& delta, int bits) {
    std::vector<double> r(delta.data().begin(), delta.data().end());
    std::vector<OraclePlane> out;
    for (int k = 0; k < bits; ++k) {
        OraclePlane p;
        double sum = 0;
        for (double v : r) {
            p.sign.push_back(v >= 0 ? 1 : -1);
            sum += std::abs(v);
        }
        p.gamma = sum / double(r.size());
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= p.gamma * p.sign[i];
        out.push_back(std::move(p));
    }
    return out;
}

double oracle_error(const Tensor& delta, const std::vector<OraclePlane>& planes) {
    double e = 0;
    for (std::size_t i = 0; i < delta.numel(); ++i) {
        double approx = 0;
        for (const auto& p : planes) approx += p.gamma * p.sign[i];
        e += (delta[i] - approx) * (delta[i] - approx);
    }
    return std::sqrt(e);
}

Checkpoint model(std::uint64_t seed) {
    Rng rng(seed);
    return init_model(dgtest::tiny_arch(), rng);
}

} // namespace

TEST_SUITE("delta-compress") {

TEST_CASE("sign and gamma worked examples") {
    auto m = Tensor::matrix(2, 2, {1.0f, -3.0f, 2.0f, -2.0f});
    auto s = sign(m);
    CHECK(s.unpack() == Tensor::matrix(2, 2, {1, -1, 1, -1}));
    CHECK(gamma_init(m) == 2.0f);
    auto zero = Tensor::zeros({3, 5});
    CHECK(sign(zero).unpack() == Tensor({3, 5}, std::vector<float>(15, 1.0f)));
    CHECK(gamma_init(zero) == 0.0f);
    CHECK(gamma_init(Tensor::matrix(1, 1, {-5.0f})) == 5.0f);
    CHECK_THROWS_AS(sign(Tensor({4})), InputError);
    CHECK_THROWS_AS(sign(Tensor({2, 2, 2})), InputError);

    auto wide = sign(Tensor({1, 70}, std::vector<float>(70, 1.0f)));
    CHECK(wide.words_per_row() == 2);
    CHECK(wide.words().size() == 2);
    CHECK(wide.words()[1] == (std::uint64_t{1} << 6) - 1); // 6 data bits, 58 zero padding bits
    CHECK(wide.padding_clear());
}

TEST_CASE("two-plane exact example") {
    auto d = Tensor::matrix(1, 2, {2.0f, -1.0f});
    auto planes = compress_matrix(d, 2);
    REQUIRE(planes.size() == 2);
    CHECK(planes[0].scale == 1.5f);
    CHECK(planes[0].signs.unpack() == Tensor::matrix(1, 2, {1, -1}));
    CHECK(planes[1].scale == 0.5f);
    CHECK(planes[1].signs.unpack() == Tensor::matrix(1, 2, {1, 1}));
    CHECK(expand_planes(planes) == d);
}

TEST_CASE("sign pack round-trip on ragged widths") {
    Rng rng(1);
    for (std::size_t cols : {1u, 63u, 64u, 65u, 127u, 128u, 200u}) {
        for (std::size_t rows : {1u, 3u, 17u}) {
            std::vector<float> v(rows * cols);
            for (auto& x : v) x = rng.below(2) ? 1.0f : -1.0f;
            Tensor s({rows, cols}, v);
            auto p = PackedSignMatrix::pack(s);
            CHECK(p.words().size() == rows * ((cols + 63) / 64));
            CHECK(p.padding_clear());
            CHECK(p.unpack() == s);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) CHECK(p.sign(i, j) == s[i * cols + j]);
        }
    }
}

TEST_CASE("compress_matrix matches the dense oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        std::size_t n = 1 + rng.below(40), m = 1 + rng.below(150);
        auto d = rng_normal(rng, {n, m}, 0.01f);
        auto planes = compress_matrix(d, 4);
        auto oracle = oracle_compress(d, 4);
        for (int k = 0; k < 4; ++k) {
            CHECK(planes[k].scale == doctest::Approx(oracle[k].gamma).epsilon(1e-5));
            // Signs agree except where the f32 residual straddles zero differently.
            std::size_t diff = 0;
            for (std::size_t i = 0; i < n * m; ++i)
                diff += planes[k].signs.sign(i / m, i % m) != static_cast<float>(oracle[k].sign[i]);
            CHECK(diff <= (k == 0 ? 0u : 2u));
        }
    }
}

TEST_CASE("scale is the least-squares optimum for its sign plane") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t n = 1 + rng.below(8), m = 1 + rng.below(8);
        auto r = rng_normal(rng, {n, m}, 1.0f);
        double g = gamma_init(r);
        auto err = [&](double gamma) {
            double e = 0;
            for (float v : r.data()) e += std::pow(v - gamma * (v >= 0 ? 1 : -1), 2);
            return e;
        };
        // 1-D scan around the closed form.
        double best = g, best_e = err(g);
        for (int i = -2000; i <= 2000; ++i) {
            double c = g + i * 1e-4;
            if (err(c) < best_e) best_e = err(c), best = c;
        }
        CHECK(std::abs(best - g) <= 1e-6);
    }
}

TEST_CASE("reconstruction error is non-increasing in bits") {
    Rng rng(4);
    auto base = model(5);
    auto ft = dgtest::perturbed(base, 6, 0.003f);
    std::map<std::string, double> prev;
    for (int b = 1; b <= 8; ++b) {
        auto rec = reconstruct(base, compress(base, ft, b));
        for (const auto& [name, t] : ft.tensors) {
            Tensor diff(t.shape());
            for (std::size_t i = 0; i < t.numel(); ++i) diff[i] = t[i] - rec.at(name)[i];
            double e = frobenius_norm(diff.data());
            if (prev.count(name)) CHECK(e <= prev[name] * (1 + 1e-6) + 1e-9);
            prev[name] = e;
        }
    }
}

TEST_CASE("matrix reconstruction error tracks the oracle and never grows") {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        auto d = rng_normal(rng, {1 + rng.below(30), 1 + rng.below(90)}, 0.02f);
        double prev = frobenius_norm(d.data());
        for (int b = 1; b <= 8; ++b) {
            auto rec = expand_planes(compress_matrix(d, b));
            double e = 0;
            for (std::size_t i = 0; i < d.numel(); ++i) e += std::pow(double(d[i]) - rec[i], 2);
            e = std::sqrt(e);
            double want = oracle_error(d, oracle_compress(d, b));
            CHECK(e == doctest::Approx(want).epsilon(1e-3).scale(frobenius_norm(d.data())));
            CHECK(e <= prev * (1 + 1e-6));
            prev = e;
        }
    }
}

TEST_CASE("compress splits matrices and passthrough tensors") {
    auto base = model(7);
    auto ft = dgtest::perturbed(base, 8, 0.01f);
    auto cd = compress(base, ft, 2);
    CHECK(cd.bits == 2);
    for (const auto& p : param_layout(base.arch)) {
        if (p.compressible) {
            REQUIRE(cd.entries.count(p.name));
            CHECK(cd.entries.at(p.name).size() == 2);
            CHECK_FALSE(cd.passthrough.count(p.name));
        } else {
            REQUIRE(cd.passthrough.count(p.name));
            for (std::size_t i = 0; i < p.shape[0]; ++i)
                CHECK(cd.passthrough.at(p.name)[i] == ft.at(p.name)[i] - base.at(p.name)[i]);
        }
    }
    CHECK(cd.entries.size() == 6 * 2);
    CHECK(cd.passthrough.count(pname::kUnembed));
    CHECK(cd.passthrough.count(pname::kTokEmb));
}

TEST_CASE("zero delta and purity") {
    auto base = model(9);
    auto copy = base;
    auto cd = compress(base, base, 3);
    for (const auto& [name, planes] : cd.entries)
        for (const auto& p : planes) CHECK(p.scale == 0.0f);
    auto rec = reconstruct(base, cd);
    for (const auto& [name, t] : base.tensors) CHECK(bit_equal(rec.at(name), t));
    CHECK(bit_equal(base, copy));
    auto ft = dgtest::perturbed(base, 10, 0.01f);
    auto ft_copy = ft;
    compress(base, ft, 2);
    CHECK(bit_equal(ft, ft_copy));
    CHECK(bit_equal(base, copy));
}

TEST_CASE("reconstruct worked example") {
    Checkpoint base;
    base.arch = dgtest::tiny_arch(1);
    Rng rng(0);
    base = init_model(base.arch, rng);
    for (auto& v : base.at(pname::layer(0, "wq")).data()) v = 0.0f;
    auto cd = compress(base, base, 1);
    auto& plane = cd.entries.at(pname::layer(0, "wq"))[0];
    plane.scale = 2.0f;
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j) plane.signs.set(i, j, j % 2 == 0);
    auto rec = reconstruct(base, cd);
    const auto& w = rec.at(pname::layer(0, "wq"));
    CHECK(w[0] == 2.0f);
    CHECK(w[1] == -2.0f);
    CHECK(w[16] == 2.0f);
    CHECK(w[17] == -2.0f);
}

TEST_CASE("mismatched checkpoints are rejected") {
    auto base = model(11);
    Rng rng(1);
    auto other = init_model(dgtest::tiny_arch(3), rng);
    CHECK_THROWS_WITH_AS(compress(base, other, 1), doctest::Contains("checkpoint mismatch"), MismatchError);
    CHECK_THROWS_AS(compress(base, base, 0), InputError);
    auto cd = compress(base, base, 1);
    CHECK_THROWS_WITH_AS(reconstruct(other, cd), doctest::Contains("checkpoint mismatch"), MismatchError);
    auto broken = base;
    broken.tensors.erase(pname::layer(1, "w2"));
    CHECK_THROWS_AS(compress(base, broken, 1), MismatchError);
}

TEST_CASE("delta file round-trip is bit-exact") {
    dgtest::TempDir dir;
    auto base = model(12);
    for (int b : {1, 3}) {
        auto cd = compress(base, dgtest::perturbed(base, 13, 0.01f), b);
        save_delta(cd, dir / "d.dgdl");
        auto back = load_delta(dir / "d.dgdl");
        CHECK(back == cd);
        for (const auto& [name, t] : cd.passthrough) CHECK(bit_equal(back.passthrough.at(name), t));
    }
}

TEST_CASE("delta file size for a lone 1024x1024 matrix") {
    dgtest::TempDir dir;
    Rng rng(14);
    CompressedDelta cd;
    cd.bits = 1;
    cd.entries["w"] = compress_matrix(rng_normal(rng, {1024, 1024}, 1.0f), 1);
    save_delta(cd, dir / "w.dgdl");
    auto bytes = dgtest::read_bytes(dir / "w.dgdl");
    std::uint64_t hlen;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    // Packed signs: 1024 * 1024 / 8 bytes. The scale lives in the JSON header.
    CHECK(bytes.size() - binio::kPreambleBytes - hlen == 131072);
    auto fp = footprint(cd);
    CHECK(fp.delta_bytes == 131072 + 4);
    CHECK(fp.dense_bytes == 4194304);
    CHECK(fp.ratio == doctest::Approx((131072.0 + 4) / 4194304.0));
    CHECK(fp.ratio == doctest::Approx(0.03125).epsilon(1e-4));
    CHECK(load_delta(dir / "w.dgdl") == cd);
}

TEST_CASE("footprint arithmetic") {
    Rng rng(15);
    CompressedDelta cd;
    cd.bits = 32;
    cd.entries["w"] = compress_matrix(rng_normal(rng, {64, 130}, 1.0f), 32);
    auto fp = footprint(cd);
    // Ragged width pads each row to 3 words.
    CHECK(fp.delta_bytes == 64 * 3 * 8 * 32 + 4 * 32);
    CHECK(fp.dense_bytes == 64 * 130 * 4);

    CompressedDelta square;
    square.bits = 32;
    square.entries["w"] = compress_matrix(rng_normal(rng, {64, 128}, 1.0f), 32);
    CHECK(footprint(square).ratio == doctest::Approx(1.0).epsilon(0.01));

    // Toy architecture at one bit: embedding, unembedding and gains stay f32.
    auto base = model(16);
    Rng r0(0);
    auto big = init_model(ArchConfig{}, r0);
    auto cdt = compress(big, big, 1);
    auto f = footprint(cdt);
    const std::size_t d = 64, ff = 256, V = 260, L = 4;
    std::size_t matrices = L * (4 * d * d / 8 + 2 * d * ff / 8 + 6 * 4);
    std::size_t passthrough = 4 * (2 * V * d + d + L * 2 * d);
    CHECK(f.delta_bytes == matrices + passthrough);
    CHECK(f.dense_bytes == 4 * param_count(big.arch));
    CHECK(f.ratio < 0.20);
}

TEST_CASE("corrupt delta files are rejected") {
    dgtest::TempDir dir;
    auto base = model(17);
    auto cd = compress(base, dgtest::perturbed(base, 18, 0.01f), 1);
    save_delta(cd, dir / "d.dgdl");
    auto bytes = dgtest::read_bytes(dir / "d.dgdl");

    auto truncated = bytes;
    truncated.resize(bytes.size() - 100);
    dgtest::write_bytes(dir / "t.dgdl", truncated);
    CHECK_THROWS_WITH_AS(load_delta(dir / "t.dgdl"), doctest::Contains("corrupt delta file"), FormatError);

    // Rewrite the header with a sign offset pointing past the payload.
    std::uint64_t hlen;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    auto header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(hlen));
    header["entries"][0]["sign_offsets"][0] = 1u << 30;
    std::vector<std::uint8_t> payload(bytes.begin() + 16 + static_cast<long>(hlen), bytes.end());
    binio::write_container(dir / "o.dgdl", "DGDL", 1, header, payload);
    CHECK_THROWS_WITH_AS(load_delta(dir / "o.dgdl"), doctest::Contains("corrupt delta file"), FormatError);

    auto magic = bytes;
    magic[1] = 'X';
    dgtest::write_bytes(dir / "m.dgdl", magic);
    CHECK_THROWS_WITH_AS(load_delta(dir / "m.dgdl"), doctest::Contains("unsupported format"), FormatError);
}

TEST_CASE("fused view agrees with the reconstructed checkpoint") {
    auto base = model(19);
    auto ft = dgtest::perturbed(base, 20, 0.02f);
    std::vector<int> toks{tok::kBos, 'a', 'b', 'c', tok::kSepAsst};
    for (int b : {1, 2, 4}) {
        auto cd = compress(base, ft, b);
        auto dense = forward(reconstruct(base, cd), toks, false).logits;
        auto view = fused_view(base, cd);
        CHECK(view.has_planes());
        auto fused = forward(view, toks, false).logits;
        CHECK(max_abs_diff(dense, fused) < 1e-3f);
    }
}

} // TEST_SUITE
