#include "dg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dg/error.hpp"
#include "dg/kernels.hpp"
#include "dg/reference.hpp"
#include "dg/rng.hpp"

namespace dg {

void to_json(nlohmann::json& j, const ConversationExample& e) {
    j = nlohmann::json{{"system", e.system}, {"user", e.user}, {"assistant", e.assistant}};
}

void from_json(const nlohmann::json& j, ConversationExample& e) {
    for (const char* key : {"system", "user", "assistant"})
        if (!j.contains(key)) throw InputError(std::string("dataset record missing key '") + key + "'");
    j.at("system").get_to(e.system);
    j.at("user").get_to(e.user);
    j.at("assistant").get_to(e.assistant);
}

std::vector<ConversationExample> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<ConversationExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(nlohmann::json::parse(line).get<ConversationExample>());
        } catch (const std::exception& e) {
            throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void save_jsonl(const std::vector<ConversationExample>& data, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    for (const auto& e : data) out << nlohmann::json(e).dump() << '\n';
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<int> bytes_to_tokens(const std::string& s) {
    std::vector<int> out;
    out.reserve(s.size());
    for (unsigned char c : s) out.push_back(c);
    return out;
}

std::string tokens_to_text(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
        if (t < 0 || t > 255) break;
        out.push_back(static_cast<char>(t));
    }
    return out;
}

std::vector<int> render_prompt(const std::string& system, const std::string& user) {
    std::vector<int> out{tok::kBos};
    for (unsigned char c : system) out.push_back(c);
    out.push_back(tok::kSepUser);
    for (unsigned char c : user) out.push_back(c);
    out.push_back(tok::kSepAsst);
    return out;
}

RenderedExample render_conversation(const ConversationExample& ex, int max_seq) {
    if (ex.assistant.empty()) throw InputError("conversation has an empty assistant response");
    RenderedExample r;
    r.tokens = render_prompt(ex.system, ex.user);
    r.mask.assign(r.tokens.size(), 0);
    for (unsigned char c : ex.assistant) {
        r.tokens.push_back(c);
        r.mask.push_back(1);
    }
    r.tokens.push_back(tok::kEos);
    r.mask.push_back(1);
    if (r.tokens.size() > static_cast<std::size_t>(max_seq))
        throw InputError("conversation renders to " + std::to_string(r.tokens.size()) + " tokens (max_seq " +
                         std::to_string(max_seq) + "): user '" + ex.user.substr(0, 40) + "'");
    return r;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0f)) throw InputError("train: learning_rate must be > 0");
    if (epochs < 1) throw InputError("train: epochs must be >= 1");
    if (batch_size < 1) throw InputError("train: batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate}, {"epochs", c.epochs},
                       {"batch_size", c.batch_size},       {"adam_beta1", c.adam_beta1},
                       {"adam_beta2", c.adam_beta2},       {"adam_eps", c.adam_eps},
                       {"weight_decay", c.weight_decay},   {"grad_clip", c.grad_clip},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
    if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("adam_beta1")) j.at("adam_beta1").get_to(c.adam_beta1);
    if (j.contains("adam_beta2")) j.at("adam_beta2").get_to(c.adam_beta2);
    if (j.contains("adam_eps")) j.at("adam_eps").get_to(c.adam_eps);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("grad_clip")) j.at("grad_clip").get_to(c.grad_clip);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

namespace {

std::size_t masked_count(std::span<const RenderedExample> batch) {
    std::size_t n = 0;
    for (const auto& ex : batch)
        for (std::size_t t = 1; t < ex.tokens.size(); ++t) n += ex.mask[t];
    return n;
}

/// Writes softmax(row) - onehot(target), scaled, into drow; returns -log p(target).
float xent_row(const float* row, std::size_t V, int target, float scale, float* drow) {
    float mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t i = 0; i < V; ++i) z += std::exp(static_cast<double>(row[i] - mx));
    double logz = std::log(z);
    if (drow) {
        for (std::size_t i = 0; i < V; ++i) drow[i] = static_cast<float>(std::exp(row[i] - mx - logz)) * scale;
        drow[target] -= scale;
    }
    return static_cast<float>(logz + mx - row[target]);
}

} // namespace

float loss(const Checkpoint& ckpt, std::span<const RenderedExample> batch) {
    if (batch.empty()) throw InputError("loss: empty batch");
    auto model = ModelView::of(ckpt);
    std::size_t count = masked_count(batch);
    if (count == 0) return 0.0f;
    const std::size_t V = ckpt.arch.vocab_size;
    double total = 0.0;
    for (const auto& ex : batch) {
        auto logits = forward(model, ex.tokens, false).logits;
        for (std::size_t t = 1; t < ex.tokens.size(); ++t)
            if (ex.mask[t]) total += xent_row(logits.ptr() + (t - 1) * V, V, ex.tokens[t], 0.0f, nullptr);
    }
    return static_cast<float>(total / static_cast<double>(count));
}

float loss_and_grad(const ModelView& model, std::span<const RenderedExample> batch, TensorMap& grads) {
    if (batch.empty()) throw InputError("loss: empty batch");
    for (auto& [name, g] : grads) std::fill(g.data().begin(), g.data().end(), 0.0f);
    std::size_t count = masked_count(batch);
    if (count == 0) return 0.0f;
    const std::size_t V = model.arch.vocab_size;
    const float scale = 1.0f / static_cast<float>(count);
    double total = 0.0;
    ForwardCache cache;
    for (const auto& ex : batch) {
        Tensor logits = forward_train(model, ex.tokens, cache);
        Tensor dlogits(logits.shape());
        bool any = false;
        for (std::size_t t = 1; t < ex.tokens.size(); ++t) {
            if (!ex.mask[t]) continue;
            any = true;
            total += xent_row(logits.ptr() + (t - 1) * V, V, ex.tokens[t], scale, dlogits.ptr() + (t - 1) * V);
        }
        if (any) backward(model, cache, dlogits, grads);
    }
    return static_cast<float>(total / static_cast<double>(count));
}

int optimizer_steps(std::size_t n_examples, const TrainConfig& cfg) {
    auto per_epoch = (n_examples + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size);
    return static_cast<int>(per_epoch) * cfg.epochs;
}

Trainer::Trainer(Checkpoint init, TrainConfig cfg) : ckpt_(std::move(init)), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    for (const auto& [name, t] : ckpt_.tensors) {
        grads_.emplace(name, Tensor(t.shape()));
        m1_.emplace(name, Tensor(t.shape()));
        m2_.emplace(name, Tensor(t.shape()));
    }
}

void Trainer::run_epoch(const std::vector<RenderedExample>& data, const StepCallback& on_step) {
    if (data.empty()) throw InputError("finetune: empty dataset");
    auto model = ModelView::of(ckpt_);
    const auto& kt = simd::active();
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle(rng_, order.begin(), order.end());
    std::vector<RenderedExample> batch;
    for (std::size_t start = 0; start < order.size(); start += bs) {
        batch.clear();
        for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(data[order[i]]);
        float l = loss_and_grad(model, batch, grads_);
        ++step_;
        if (!std::isfinite(l)) throw DivergenceError("training diverged at step " + std::to_string(step_));

        double sq = 0.0;
        for (const auto& [name, g] : grads_) sq += kt.dot(g.ptr(), g.ptr(), g.numel());
        float norm = static_cast<float>(std::sqrt(sq));
        float clip = (cfg_.grad_clip > 0.0f && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0f;

        const float b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
        float bc1 = 1.0f - std::pow(b1, static_cast<float>(step_));
        float bc2 = 1.0f - std::pow(b2, static_cast<float>(step_));
        for (auto& [name, w] : ckpt_.tensors) {
            float* wp = w.ptr();
            const float* gp = grads_.at(name).ptr();
            float* mp = m1_.at(name).ptr();
            float* vp = m2_.at(name).ptr();
            for (std::size_t i = 0; i < w.numel(); ++i) {
                float g = gp[i] * clip;
                mp[i] = b1 * mp[i] + (1.0f - b1) * g;
                vp[i] = b2 * vp[i] + (1.0f - b2) * g * g;
                float mhat = mp[i] / bc1;
                float vhat = vp[i] / bc2;
                wp[i] -= cfg_.learning_rate * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + cfg_.weight_decay * wp[i]);
            }
        }
        if (on_step) on_step({step_, epoch_, l});
    }
    ++epoch_;
    ckpt_.meta["train_seed"] = std::to_string(cfg_.seed);
    ckpt_.meta["train_steps"] = std::to_string(step_);
}

Checkpoint finetune_rendered(const Checkpoint& base, const std::vector<RenderedExample>& data,
                             const TrainConfig& cfg, const StepCallback& on_step) {
    if (data.empty()) throw InputError("finetune: empty dataset");
    Trainer tr(base, cfg);
    for (int e = 0; e < cfg.epochs; ++e) tr.run_epoch(data, on_step);
    return std::move(tr).take();
}

Checkpoint finetune(const Checkpoint& base, const std::vector<ConversationExample>& data, const TrainConfig& cfg,
                    const StepCallback& on_step) {
    if (data.empty()) throw InputError("finetune: empty dataset");
    std::vector<RenderedExample> rendered;
    rendered.reserve(data.size());
    for (const auto& ex : data) rendered.push_back(render_conversation(ex, base.arch.max_seq));
    return finetune_rendered(base, rendered, cfg, on_step);
}

float grad_check(const Checkpoint& ckpt, const RenderedExample& example, int n_probes, std::uint64_t seed, float h) {
    if (n_probes < 1) throw InputError("grad_check: n_probes must be >= 1");
    auto model = ModelView::of(ckpt);
    TensorMap grads;
    std::span<const RenderedExample> one(&example, 1);
    loss_and_grad(model, one, grads);

    auto params = reference::to_f64(ckpt);
    std::vector<std::string> names;
    for (const auto& [name, t] : ckpt.tensors) names.push_back(name);
    std::size_t total = param_count(ckpt.arch);

    Rng rng(seed);
    float worst = 0.0f;
    for (int p = 0; p < n_probes; ++p) {
        // Uniform over all parameters.
        std::size_t flat = rng.below(total);
        std::string name;
        for (const auto& n : names) {
            auto sz = ckpt.at(n).numel();
            if (flat < sz) {
                name = n;
                break;
            }
            flat -= sz;
        }
        double analytic = grads.count(name) ? grads.at(name)[flat] : 0.0;
        auto& w = params.at(name)[flat];
        double orig = w;
        w = orig + h;
        double lp = reference::masked_xent(ckpt.arch, params, example.tokens, example.mask);
        w = orig - h;
        double lm = reference::masked_xent(ckpt.arch, params, example.tokens, example.mask);
        w = orig;
        double numeric = (lp - lm) / (2.0 * h);
        double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
        worst = std::max(worst, static_cast<float>(std::abs(analytic - numeric) / denom));
    }
    return worst;
}

} // namespace dg
