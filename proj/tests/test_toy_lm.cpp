#include <cmath>

#include <doctest.h>

#include "dg/error.hpp"
#include "dg/model.hpp"
#include "dg/reference.hpp"
#include "support.hpp"

using namespace dg;

namespace {

std::vector<int> random_tokens(Rng& rng, std::size_t n, int vocab) {
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    return t;
}

} // namespace

TEST_SUITE("toy-lm") {

TEST_CASE("default architecture parameter count") {
    // Layout arithmetic, summed independently of param_layout:
    // per layer 4*d*d (attention) + ff*d + d*ff (MLP) + 2*d (norm gains),
    // plus token embedding and unembedding (2*V*d) and the final norm gain (d).
    const std::size_t d = 64, L = 4, ff = 256, V = 260;
    const std::size_t expected = L * (4 * d * d + ff * d + d * ff + 2 * d) + 2 * V * d + d;
    CHECK(expected == 230464);
    CHECK(param_count(ArchConfig{}) == expected);

    Rng rng(0);
    auto c = init_model(ArchConfig{}, rng);
    std::size_t total = 0;
    for (const auto& [name, t] : c.tensors) total += t.numel();
    CHECK(total == expected);
    c.check_layout();
}

TEST_CASE("init is seeded, gains start at one and weights at std 0.02") {
    Rng a(11), b(11);
    auto c1 = init_model(ArchConfig{}, a);
    auto c2 = init_model(ArchConfig{}, b);
    CHECK(bit_equal(c1, c2));
    for (float g : c1.at(pname::kFinalNorm).data()) CHECK(g == 1.0f);
    for (float g : c1.at(pname::layer(2, "attn_norm")).data()) CHECK(g == 1.0f);
    const auto& e = c1.at(pname::kTokEmb);
    double sq = 0;
    for (float v : e.data()) sq += double(v) * v;
    CHECK(std::sqrt(sq / double(e.numel())) == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("architecture validation") {
    ArchConfig a;
    a.d_model = 63;
    CHECK_THROWS_AS(a.validate(), InputError);
    ArchConfig z;
    z.n_layers = 0;
    CHECK_THROWS_AS(z.validate(), InputError);
    ArchConfig{}.validate();
}

TEST_CASE("forward shapes and input validation") {
    Rng rng(3);
    auto c = init_model(dgtest::tiny_arch(), rng);
    std::vector<int> one{65};
    auto tr = forward(c, one, true);
    CHECK(tr.logits.shape() == Shape{1, 260});
    CHECK(tr.hidden_states.size() == 3);
    CHECK(tr.hidden_states[0].shape() == Shape{1, 16});
    CHECK(forward(c, one, false).hidden_states.empty());
    CHECK_THROWS_AS(forward(c, std::vector<int>{260}, false), InputError);
    CHECK_THROWS_AS(forward(c, std::vector<int>{-1}, false), InputError);
    CHECK_THROWS_AS(forward(c, std::vector<int>(65, 1), false), InputError);
    CHECK_THROWS_AS(forward(c, std::vector<int>{}, false), InputError);
}

TEST_CASE("capture does not change logits and activations stay finite") {
    Rng rng(4);
    auto c = init_model(dgtest::tiny_arch(), rng);
    auto toks = random_tokens(rng, 64, 260);
    auto a = forward(c, toks, true), b = forward(c, toks, false);
    CHECK(bit_equal(a.logits, b.logits));
    CHECK(a.logits.all_finite());
    for (const auto& h : a.hidden_states) CHECK(h.all_finite());
}

TEST_CASE("forward matches the double-precision reference") {
    Rng rng(5);
    auto c = dgtest::perturbed(init_model(dgtest::tiny_arch(), rng), 6, 0.05f);
    auto toks = random_tokens(rng, 40, 260);
    auto got = forward(c, toks, false).logits;
    auto ref = reference::logits(c.arch, reference::to_f64(c), toks);
    REQUIRE(ref.size() == got.numel());
    double worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - got[i]));
    CHECK(worst < 1e-4);
}

TEST_CASE("causality: later tokens never change earlier logits") {
    Rng rng(7);
    auto c = dgtest::perturbed(init_model(dgtest::tiny_arch(), rng), 8, 0.05f);
    auto toks = random_tokens(rng, 30, 260);
    auto base = forward(c, toks, false).logits;
    for (std::size_t cut : {0u, 5u, 17u, 28u}) {
        auto edited = toks;
        for (std::size_t t = cut + 1; t < edited.size(); ++t) edited[t] = (edited[t] + 97) % 260;
        auto l = forward(c, edited, false).logits;
        float worst = 0;
        for (std::size_t t = 0; t <= cut; ++t)
            for (std::size_t v = 0; v < 260; ++v) worst = std::max(worst, std::abs(l[t * 260 + v] - base[t * 260 + v]));
        CHECK(worst <= 1e-6f);
    }
}

TEST_CASE("permuting whole attention heads leaves logits unchanged") {
    Rng rng(9);
    auto arch = dgtest::tiny_arch();
    arch.n_heads = 4;
    auto c = dgtest::perturbed(init_model(arch, rng), 10, 0.05f);
    auto toks = random_tokens(rng, 20, 260);
    auto before = forward(c, toks, false).logits;

    const std::size_t d = arch.d_model, hd = arch.head_dim();
    const std::vector<std::size_t> perm{2, 0, 3, 1}; // new head h takes old head perm[h]
    auto p = c;
    for (int l = 0; l < arch.n_layers; ++l) {
        for (const char* w : {"wq", "wk", "wv"}) {
            const auto& src = c.at(pname::layer(l, w));
            auto& dst = p.at(pname::layer(l, w));
            for (std::size_t h = 0; h < perm.size(); ++h)
                for (std::size_t r = 0; r < hd; ++r)
                    for (std::size_t j = 0; j < d; ++j) dst[(h * hd + r) * d + j] = src[(perm[h] * hd + r) * d + j];
        }
        const auto& src = c.at(pname::layer(l, "wo"));
        auto& dst = p.at(pname::layer(l, "wo"));
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t h = 0; h < perm.size(); ++h)
                for (std::size_t r = 0; r < hd; ++r) dst[i * d + h * hd + r] = src[i * d + perm[h] * hd + r];
    }
    auto after = forward(p, toks, false).logits;
    CHECK(max_abs_diff(before, after) < 1e-5f);
}

TEST_CASE("degenerate network reduces to embedding times unembedding") {
    auto arch = dgtest::tiny_arch();
    Rng rng(0);
    auto c = init_model(arch, rng);
    for (auto& [name, t] : c.tensors)
        if (name.find("norm") == std::string::npos)
            for (auto& v : t.data()) v = 0.0f;
    const std::size_t d = arch.d_model, V = arch.vocab_size;
    // Token t embeds to 4 * e_(t mod 16): RMS exactly 1, so the final norm is (nearly) the identity.
    auto& E = c.at(pname::kTokEmb);
    for (std::size_t t = 0; t < V; ++t) E[t * d + t % d] = 4.0f;
    // Unembedding row v reads coordinate v mod 16 with weight (v / 16 + 1).
    auto& U = c.at(pname::kUnembed);
    for (std::size_t v = 0; v < V; ++v) U[v * d + v % d] = static_cast<float>(v / d + 1);

    std::vector<int> toks{3, 40, 7};
    auto logits = forward(c, toks, false).logits;
    const double norm = 4.0 / std::sqrt(16.0 / 16.0 + 1e-5);
    for (std::size_t p = 0; p < toks.size(); ++p)
        for (std::size_t v = 0; v < V; ++v) {
            double expected = (v % d == static_cast<std::size_t>(toks[p]) % d) ? norm * double(v / d + 1) : 0.0;
            CHECK(logits[p * V + v] == doctest::Approx(expected).epsilon(1e-5));
        }
}

TEST_CASE("incremental decoder matches full forward") {
    Rng rng(12);
    auto c = dgtest::perturbed(init_model(dgtest::tiny_arch(), rng), 13, 0.05f);
    auto toks = random_tokens(rng, 50, 260);
    auto full = forward(c, toks, false).logits;
    auto view = ModelView::of(c);
    Decoder dec(view);
    float worst = 0;
    for (std::size_t t = 0; t < toks.size(); ++t) {
        auto l = dec.step(toks[t]);
        for (std::size_t v = 0; v < 260; ++v) worst = std::max(worst, std::abs(l[v] - full[t * 260 + v]));
    }
    CHECK(worst < 1e-5f);
}

TEST_CASE("generate is greedy and deterministic") {
    Rng rng(14);
    auto c = dgtest::perturbed(init_model(dgtest::tiny_arch(), rng), 15, 0.1f);
    std::vector<int> prompt{tok::kBos, 'h', 'i'};
    CHECK(generate(c, prompt, 0) == prompt);
    auto a = generate(c, prompt, 10), b = generate(c, prompt, 10);
    CHECK(a == b);
    REQUIRE(a.size() > prompt.size());
    CHECK(std::equal(prompt.begin(), prompt.end(), a.begin()));
    // Each generated token is the argmax of a full forward over the prefix.
    for (std::size_t i = prompt.size(); i < a.size(); ++i) {
        std::vector<int> prefix(a.begin(), a.begin() + static_cast<long>(i));
        auto l = forward(c, prefix, false).logits;
        CHECK(argmax(l.row(i - 1)) == a[i]);
    }
    CHECK_THROWS_AS(generate(c, std::vector<int>{}, 3), InputError);
}

TEST_CASE("argmax breaks ties to the lowest index") {
    std::vector<float> v{1, 3, 3, 2};
    CHECK(argmax(v) == 1);
}

} // TEST_SUITE
