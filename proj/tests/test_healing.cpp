#include <cmath>

#include <doctest.h>

#include "dg/error.hpp"
#include "dg/healing.hpp"
#include "support.hpp"

using namespace dg;

namespace {

std::vector<ConversationExample> calib_examples(int n) {
    std::vector<ConversationExample> out;
    for (int i = 0; i < n; ++i)
        out.push_back({"be nice", "LOOKUP k" + std::to_string(i), "v" + std::to_string(i * 7 % 10)});
    return out;
}

struct Fixture {
    Checkpoint base, finetuned;
    CompressedDelta cd;
    std::vector<ConversationExample> calib = calib_examples(16);
};

Fixture make_fixture(std::uint64_t seed, int bits) {
    Rng rng(seed);
    Fixture f;
    f.base = dgtest::perturbed(init_model(dgtest::tiny_arch(), rng), seed + 1, 0.05f);
    f.finetuned = dgtest::perturbed(f.base, seed + 2, 0.01f);
    f.cd = compress(f.base, f.finetuned, bits);
    return f;
}

/// Fine-tuned model whose delta is exactly c * S on a single matrix.
Fixture representable(std::uint64_t seed, float c) {
    Rng rng(seed);
    Fixture f;
    f.base = dgtest::perturbed(init_model(dgtest::tiny_arch(), rng), seed + 1, 0.05f);
    f.cd = compress(f.base, f.base, 1);
    auto& plane = f.cd.entries.at(pname::layer(1, "w1"))[0];
    Rng srng(seed + 3);
    for (std::size_t i = 0; i < plane.signs.rows(); ++i)
        for (std::size_t j = 0; j < plane.signs.cols(); ++j) plane.signs.set(i, j, srng.below(2) == 1);
    plane.scale = c;
    f.finetuned = reconstruct(f.base, f.cd);
    return f;
}

double mean_sq_logit_diff(const Checkpoint& a, const Checkpoint& b, const std::vector<ConversationExample>& ex) {
    double total = 0;
    for (const auto& e : ex) {
        auto toks = render_conversation(e, a.arch.max_seq).tokens;
        auto la = forward(a, toks, false).logits, lb = forward(b, toks, false).logits;
        double s = 0;
        for (std::size_t i = 0; i < la.numel(); ++i) s += std::pow(double(la[i]) - lb[i], 2);
        total += s / double(la.numel());
    }
    return total / double(ex.size());
}

} // namespace

TEST_SUITE("healing") {

TEST_CASE("calibration loss is zero for an exact reconstruction") {
    auto f = make_fixture(1, 2);
    auto exact = reconstruct(f.base, f.cd);
    CHECK(calib_loss(f.base, exact, f.cd, f.calib) == 0.0f);
}

TEST_CASE("calibration loss matches an independent logit MSE") {
    auto f = make_fixture(2, 1);
    double want = mean_sq_logit_diff(f.finetuned, reconstruct(f.base, f.cd), f.calib);
    CHECK(calib_loss(f.base, f.finetuned, f.cd, f.calib) == doctest::Approx(want).epsilon(1e-4));

    // All scales zero and no passthrough change: the loss is the base-vs-finetuned gap.
    auto zero = f.cd;
    set_scales(zero, std::vector<float>(get_scales(zero).size(), 0.0f));
    for (auto& [name, t] : zero.passthrough)
        for (auto& v : t.data()) v = 0.0f;
    double gap = mean_sq_logit_diff(f.finetuned, f.base, f.calib);
    CHECK(calib_loss(f.base, f.finetuned, zero, f.calib) == doctest::Approx(gap).epsilon(1e-4));
}

TEST_CASE("calibration loss ignores example order") {
    auto f = make_fixture(3, 1);
    auto rev = f.calib;
    std::reverse(rev.begin(), rev.end());
    CHECK(calib_loss(f.base, f.finetuned, f.cd, f.calib) ==
          doctest::Approx(calib_loss(f.base, f.finetuned, f.cd, rev)).epsilon(1e-6));
    CHECK_THROWS_AS(calib_loss(f.base, f.finetuned, f.cd, {}), InputError);
}

TEST_CASE("scales are read and written in canonical order") {
    auto f = make_fixture(4, 3);
    auto s = get_scales(f.cd);
    CHECK(s.size() == f.cd.entries.size() * 3);
    std::size_t i = 0;
    for (const auto& [name, planes] : f.cd.entries)
        for (const auto& p : planes) CHECK(p.scale == s[i++]);
    auto mod = f.cd;
    std::vector<float> twice(s);
    for (auto& v : twice) v *= 2;
    set_scales(mod, twice);
    CHECK(get_scales(mod) == twice);
    CHECK_THROWS_AS(set_scales(mod, std::vector<float>(s.size() - 1)), InputError);
    CHECK_THROWS_AS(set_scales(mod, std::vector<float>(s.size() + 1)), InputError);
}

TEST_CASE("analytic scale gradients match double-precision differences") {
    auto f = make_fixture(5, 2);
    auto calib = make_calib_set(f.finetuned, f.calib);
    CHECK(heal_gradient_check(f.base, f.finetuned, f.cd, calib, 24, 1) < 1e-3f);
}

TEST_CASE("finite-difference gradients agree with analytic gradients") {
    auto f = make_fixture(6, 1);
    std::vector<ConversationExample> few(f.calib.begin(), f.calib.begin() + 4);
    auto calib = make_calib_set(f.finetuned, few);
    std::vector<float> ga, gf;
    float la = calib_loss_and_scale_grad(f.base, f.cd, calib, ga);
    float lf = calib_loss_and_scale_grad_fd(f.base, f.cd, calib, 1e-3f, gf);
    CHECK(la == doctest::Approx(lf).epsilon(1e-5));
    REQUIRE(ga.size() == gf.size());
    float scale = 0;
    for (float g : ga) scale = std::max(scale, std::abs(g));
    for (std::size_t i = 0; i < ga.size(); ++i) CHECK(std::abs(ga[i] - gf[i]) <= 0.05f * scale);
}

TEST_CASE("healing never increases the calibration loss") {
    for (std::uint64_t seed : {10u, 11u, 12u}) {
        auto f = make_fixture(seed, 1);
        HealConfig cfg;
        cfg.steps = 30;
        auto r = heal(f.base, f.finetuned, f.cd, cfg, f.calib);
        CHECK(r.final_loss <= r.initial_loss);
        CHECK(r.final_loss < r.initial_loss);
        CHECK(r.history.size() == 31);
        CHECK(r.final_loss == doctest::Approx(calib_loss(f.base, f.finetuned, r.delta, f.calib)).epsilon(1e-5));

        // Only scales move.
        for (const auto& [name, planes] : f.cd.entries)
            for (std::size_t k = 0; k < planes.size(); ++k)
                CHECK(r.delta.entries.at(name)[k].signs == planes[k].signs);
        for (const auto& [name, t] : f.cd.passthrough) CHECK(bit_equal(r.delta.passthrough.at(name), t));
    }
}

TEST_CASE("keep-best guard rejects a harmful step size") {
    auto f = make_fixture(13, 1);
    HealConfig cfg;
    cfg.steps = 5;
    cfg.learning_rate = 0.5f;
    auto r = heal(f.base, f.finetuned, f.cd, cfg, f.calib);
    CHECK(r.final_loss <= r.initial_loss);
    if (r.best_step == 0) CHECK(get_scales(r.delta) == get_scales(f.cd));
}

TEST_CASE("zero steps returns the input unchanged") {
    auto f = make_fixture(14, 2);
    HealConfig cfg;
    cfg.steps = 0;
    auto r = heal(f.base, f.finetuned, f.cd, cfg, f.calib);
    CHECK(r.delta == f.cd);
    CHECK(r.best_step == 0);
    CHECK(r.final_loss == r.initial_loss);
}

TEST_CASE("exactly representable delta heals back to its scale") {
    const float c = 0.05f;
    auto f = representable(15, c);
    auto start = f.cd;
    start.entries.at(pname::layer(1, "w1"))[0].scale = 0.5f * c;
    auto calib = make_calib_set(f.finetuned, f.calib);

    // Stationarity at the true scale.
    std::vector<float> g;
    calib_loss_and_scale_grad(f.base, f.cd, calib, g);
    for (float v : g) CHECK(std::abs(v) < 1e-6f);

    HealConfig cfg;
    cfg.steps = 200;
    auto r = heal(f.base, start, calib, cfg);
    float healed = r.delta.entries.at(pname::layer(1, "w1"))[0].scale;
    CHECK(std::abs(healed - c) < 1e-3f);
    auto rec = reconstruct(f.base, r.delta);
    for (const auto& e : f.calib) {
        auto toks = render_conversation(e, 64).tokens;
        CHECK(max_abs_diff(forward(rec, toks, false).logits, forward(f.finetuned, toks, false).logits) < 1e-4f);
    }
}

TEST_CASE("finite-difference healing also descends") {
    auto f = make_fixture(16, 1);
    HealConfig cfg;
    cfg.steps = 5;
    cfg.gradient = HealGradient::FiniteDifference;
    cfg.n_calib = 4;
    auto r = heal(f.base, f.finetuned, f.cd, cfg, f.calib);
    CHECK(r.final_loss < r.initial_loss);
}

TEST_CASE("heal config validation and JSON") {
    HealConfig c;
    c.steps = -1;
    CHECK_THROWS_AS(c.validate(), InputError);
    HealConfig d;
    d.fd_step = 0;
    CHECK_THROWS_AS(d.validate(), InputError);
    HealConfig e;
    e.gradient = HealGradient::FiniteDifference;
    e.learning_rate = 1e-4f;
    nlohmann::json j = e;
    CHECK(j.at("gradient") == "finite_difference");
    auto back = j.get<HealConfig>();
    CHECK(back.gradient == HealGradient::FiniteDifference);
    CHECK(back.learning_rate == 1e-4f);
    j["gradient"] = "magic";
    CHECK_THROWS_AS(j.get<HealConfig>(), InputError);
    auto f = make_fixture(17, 1);
    CHECK_THROWS_AS(make_calib_set(f.finetuned, {}), InputError);
    CHECK_THROWS_AS(heal(f.base, f.finetuned, f.cd, HealConfig{}, {}), InputError);
}

} // TEST_SUITE
