#include "dg/healing.hpp"

#include <algorithm>
#include <cmath>

#include "dg/error.hpp"
#include "dg/kernels.hpp"
#include "dg/reference.hpp"
#include "dg/rng.hpp"

namespace dg {

CalibSet make_calib_set(const Checkpoint& finetuned, const std::vector<ConversationExample>& examples) {
    if (examples.empty()) throw InputError("healing: empty calibration set");
    CalibSet c;
    for (const auto& ex : examples) {
        auto r = render_conversation(ex, finetuned.arch.max_seq);
        c.targets.push_back(forward(finetuned, r.tokens, false).logits);
        c.tokens.push_back(std::move(r.tokens));
    }
    return c;
}

namespace {

/// Squared error of one example, normalised by its element count; writes dL/dz into `d` when given.
double example_mse(const Tensor& pred, const Tensor& target, double weight, float* d) {
    const std::size_t n = pred.numel();
    const double inv = 1.0 / static_cast<double>(n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double e = static_cast<double>(pred[i]) - target[i];
        s += e * e;
        if (d) d[i] = static_cast<float>(2.0 * e * inv * weight);
    }
    return s * inv;
}

void require_calib(const CalibSet& calib) {
    if (calib.tokens.empty() || calib.tokens.size() != calib.targets.size())
        throw InputError("healing: empty or inconsistent calibration set");
}

} // namespace

float calib_loss(const ModelView& model, const CalibSet& calib) {
    require_calib(calib);
    double total = 0.0;
    for (std::size_t e = 0; e < calib.tokens.size(); ++e)
        total += example_mse(forward(model, calib.tokens[e], false).logits, calib.targets[e], 1.0, nullptr);
    return static_cast<float>(total / static_cast<double>(calib.tokens.size()));
}

float calib_loss(const Checkpoint& base, const Checkpoint& finetuned, const CompressedDelta& cd,
                 const std::vector<ConversationExample>& calib) {
    auto set = make_calib_set(finetuned, calib);
    return calib_loss(ModelView::of(reconstruct(base, cd)), set);
}

void HealConfig::validate() const {
    if (steps < 0) throw InputError("heal: steps must be >= 0");
    if (!(learning_rate > 0.0f)) throw InputError("heal: learning_rate must be > 0");
    if (n_calib < 1) throw InputError("heal: n_calib must be >= 1");
    if (!(fd_step > 0.0f)) throw InputError("heal: fd_step must be > 0");
}

void to_json(nlohmann::json& j, const HealConfig& c) {
    j = {{"steps", c.steps},
         {"learning_rate", c.learning_rate},
         {"n_calib", c.n_calib},
         {"gradient", c.gradient == HealGradient::Analytic ? "analytic" : "finite_difference"},
         {"fd_step", c.fd_step},
         {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2},
         {"adam_eps", c.adam_eps},
         {"keep_best", c.keep_best}};
}

void from_json(const nlohmann::json& j, HealConfig& c) {
    HealConfig d;
    c.steps = j.value("steps", d.steps);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.n_calib = j.value("n_calib", d.n_calib);
    auto g = j.value("gradient", std::string("analytic"));
    if (g == "analytic")
        c.gradient = HealGradient::Analytic;
    else if (g == "finite_difference")
        c.gradient = HealGradient::FiniteDifference;
    else
        throw InputError("heal: unknown gradient mode '" + g + "'");
    c.fd_step = j.value("fd_step", d.fd_step);
    c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.keep_best = j.value("keep_best", d.keep_best);
}

std::vector<float> get_scales(const CompressedDelta& cd) {
    std::vector<float> s;
    for (const auto& [name, planes] : cd.entries)
        for (const auto& p : planes) s.push_back(p.scale);
    return s;
}

void set_scales(CompressedDelta& cd, std::span<const float> scales) {
    std::size_t i = 0;
    for (auto& [name, planes] : cd.entries)
        for (auto& p : planes) {
            if (i >= scales.size()) throw InputError("set_scales: too few scales");
            p.scale = scales[i++];
        }
    if (i != scales.size()) throw InputError("set_scales: too many scales");
}

float calib_loss_and_scale_grad(const Checkpoint& base, const CompressedDelta& cd, const CalibSet& calib,
                                std::vector<float>& grad) {
    require_calib(calib);
    Checkpoint merged = reconstruct(base, cd);
    auto model = ModelView::of(merged);
    const double w = 1.0 / static_cast<double>(calib.tokens.size());
    TensorMap grads;
    ForwardCache cache;
    double total = 0.0;
    for (std::size_t e = 0; e < calib.tokens.size(); ++e) {
        Tensor logits = forward_train(model, calib.tokens[e], cache);
        Tensor dlogits(logits.shape());
        total += example_mse(logits, calib.targets[e], w, dlogits.ptr());
        backward(model, cache, dlogits, grads);
    }

    // d/dgamma_k of L(W_b + sum gamma S) = sum_ij dL/dW_ij * S_k,ij.
    const auto& kt = simd::active();
    grad.clear();
    for (const auto& [name, planes] : cd.entries) {
        const Tensor& g = grads.at(name);
        const std::size_t n = g.dim(0), m = g.dim(1);
        for (const auto& p : planes) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const float* row = g.ptr() + i * m;
                float all = 0.0f;
                for (std::size_t j = 0; j < m; ++j) all += row[j];
                acc += 2.0 * kt.masked_sum(row, p.signs.row_words(i), m) - all;
            }
            grad.push_back(static_cast<float>(acc));
        }
    }
    return static_cast<float>(total * w);
}

float calib_loss_and_scale_grad_fd(const Checkpoint& base, const CompressedDelta& cd, const CalibSet& calib,
                                   float h, std::vector<float>& grad) {
    require_calib(calib);
    float l0 = calib_loss(ModelView::of(reconstruct(base, cd)), calib);
    CompressedDelta probe = cd;
    auto scales = get_scales(cd);
    grad.assign(scales.size(), 0.0f);
    for (std::size_t i = 0; i < scales.size(); ++i) {
        auto s = scales;
        s[i] = scales[i] + h;
        set_scales(probe, s);
        Checkpoint plus = reconstruct(base, probe);
        float lp = calib_loss(ModelView::of(plus), calib);
        s[i] = scales[i] - h;
        set_scales(probe, s);
        Checkpoint minus = reconstruct(base, probe);
        float lm = calib_loss(ModelView::of(minus), calib);
        grad[i] = (lp - lm) / (2.0f * h);
    }
    return l0;
}

HealResult heal(const Checkpoint& base, const CompressedDelta& cd, const CalibSet& calib, const HealConfig& cfg) {
    cfg.validate();
    require_compatible(base, cd);
    HealResult r;
    r.delta = cd;
    auto scales = get_scales(cd);
    std::vector<float> m1(scales.size(), 0.0f), m2(scales.size(), 0.0f), grad;
    std::vector<float> best = scales;
    float best_loss = INFINITY;

    auto eval = [&](bool with_grad) {
        if (!with_grad) return calib_loss(ModelView::of(reconstruct(base, r.delta)), calib);
        return cfg.gradient == HealGradient::Analytic
                   ? calib_loss_and_scale_grad(base, r.delta, calib, grad)
                   : calib_loss_and_scale_grad_fd(base, r.delta, calib, cfg.fd_step, grad);
    };

    for (int step = 0; step <= cfg.steps; ++step) {
        // The last iteration only scores the final scales.
        bool last = step == cfg.steps;
        float l = eval(!last);
        if (step == 0) r.initial_loss = l;
        r.history.push_back(l);
        if (!std::isfinite(l)) throw DivergenceError("healing diverged at step " + std::to_string(step));
        if (l < best_loss) {
            best_loss = l;
            best = scales;
            r.best_step = step;
        }
        if (last) break;
        const float b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
        float bc1 = 1.0f - std::pow(b1, static_cast<float>(step + 1));
        float bc2 = 1.0f - std::pow(b2, static_cast<float>(step + 1));
        for (std::size_t i = 0; i < scales.size(); ++i) {
            m1[i] = b1 * m1[i] + (1.0f - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0f - b2) * grad[i] * grad[i];
            scales[i] -= cfg.learning_rate * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg.adam_eps);
        }
        set_scales(r.delta, scales);
    }
    if (cfg.keep_best) {
        set_scales(r.delta, best);
        r.final_loss = best_loss;
    } else {
        r.final_loss = r.history.back();
        r.best_step = cfg.steps;
    }
    return r;
}

HealResult heal(const Checkpoint& base, const Checkpoint& finetuned, const CompressedDelta& cd,
                const HealConfig& cfg, const std::vector<ConversationExample>& calib) {
    cfg.validate();
    if (calib.empty()) throw InputError("healing: empty calibration set");
    auto n = std::min(calib.size(), static_cast<std::size_t>(cfg.n_calib));
    std::vector<ConversationExample> used(calib.begin(), calib.begin() + static_cast<std::ptrdiff_t>(n));
    return heal(base, cd, make_calib_set(finetuned, used), cfg);
}

float heal_gradient_check(const Checkpoint& base, const Checkpoint& finetuned, const CompressedDelta& cd,
                          const CalibSet& calib, int n_probes, std::uint64_t seed, double h) {
    if (n_probes < 1) throw InputError("heal_gradient_check: n_probes must be >= 1");
    std::vector<float> analytic;
    calib_loss_and_scale_grad(base, cd, calib, analytic);

    const auto& arch = base.arch;
    auto params = reference::to_f64(base);
    for (const auto& [name, d] : cd.passthrough) {
        auto& p = params.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] += d[i];
    }
    // Signs expanded to +-1 per plane, in get_scales order.
    std::vector<std::pair<std::string, std::vector<double>>> planes;
    for (const auto& [name, ps] : cd.entries)
        for (const auto& p : ps) {
            Tensor s = p.signs.unpack();
            planes.emplace_back(name, std::vector<double>(s.data().begin(), s.data().end()));
            auto& w = params.at(name);
            for (std::size_t i = 0; i < w.size(); ++i) w[i] += static_cast<double>(p.scale) * planes.back().second[i];
        }

    auto fparams = reference::to_f64(finetuned);
    std::vector<std::vector<double>> targets;
    for (const auto& t : calib.tokens) targets.push_back(reference::logits(arch, fparams, t));

    auto loss = [&]() {
        double total = 0.0;
        for (std::size_t e = 0; e < calib.tokens.size(); ++e) {
            auto z = reference::logits(arch, params, calib.tokens[e]);
            double s = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) s += (z[i] - targets[e][i]) * (z[i] - targets[e][i]);
            total += s / static_cast<double>(z.size());
        }
        return total / static_cast<double>(calib.tokens.size());
    };

    Rng rng(seed);
    float worst = 0.0f;
    for (int p = 0; p < n_probes; ++p) {
        std::size_t k = rng.below(planes.size());
        auto& [name, s] = planes[k];
        auto& w = params.at(name);
        auto orig = w;
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = orig[i] + h * s[i];
        double lp = loss();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = orig[i] - h * s[i];
        double lm = loss();
        w = orig;
        double numeric = (lp - lm) / (2.0 * h);
        double a = analytic[k];
        double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
        worst = std::max(worst, static_cast<float>(std::abs(a - numeric) / denom));
    }
    return worst;
}

} // namespace dg
