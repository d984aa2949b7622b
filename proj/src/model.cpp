#include "dg/model.hpp"

#include <algorithm>
#include <cmath>

#include "dg/binary_gemm.hpp"
#include "dg/error.hpp"
#include "dg/kernels.hpp"

namespace dg {

namespace {

constexpr float kNormEps = 1e-5f;
constexpr double kRopeBase = 10000.0;
constexpr float kInitStd = 0.02f;

using Vec = std::vector<float>;

const float* tensor_ptr(const Checkpoint& ckpt, const std::string& name) { return ckpt.at(name).ptr(); }

LinearRef linear_of(const Checkpoint& ckpt, const std::string& name) {
    const auto& t = ckpt.at(name);
    return LinearRef{t.ptr(), t.dim(0), t.dim(1), {}};
}

void linear(const LinearRef& w, const float* x, std::size_t rows, float* y) {
    dense_linear(x, rows, w.in, w.weight, w.out, y);
    add_sign_planes(x, rows, w.in, w.planes, w.out, y);
}

/// y = x * inv_rms(x) * g; returns inv_rms.
float rmsnorm(const float* x, const float* g, std::size_t d, float* y) {
    const auto& k = simd::active();
    float inv = 1.0f / std::sqrt(k.dot(x, x, d) / static_cast<float>(d) + kNormEps);
    for (std::size_t i = 0; i < d; ++i) y[i] = x[i] * inv * g[i];
    return inv;
}

/// dx += d(rmsnorm)/dx^T dy; dg += dy * x * inv.
void rmsnorm_backward(const float* x, const float* g, float inv, const float* dy, std::size_t d, float* dx,
                      float* dg) {
    float s = 0.0f;
    for (std::size_t i = 0; i < d; ++i) {
        s += dy[i] * g[i] * x[i];
        dg[i] += dy[i] * x[i] * inv;
    }
    float c = s * inv * inv * inv / static_cast<float>(d);
    for (std::size_t i = 0; i < d; ++i) dx[i] += inv * g[i] * dy[i] - x[i] * c;
}

/// cos/sin for positions [0, n) and each rotary pair of a head.
struct RopeTable {
    std::size_t first = 0;
    std::size_t half = 0;
    Vec cos, sin;

    /// Rows for positions [first, first + n).
    RopeTable(std::size_t first, std::size_t n, std::size_t head_dim)
        : first(first), half(head_dim / 2), cos(n * half), sin(n * half) {
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t i = 0; i < half; ++i) {
                double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
                double ang = static_cast<double>(first + p) * freq;
                cos[p * half + i] = static_cast<float>(std::cos(ang));
                sin[p * half + i] = static_cast<float>(std::sin(ang));
            }
    }

    /// Rotates each (2i, 2i+1) pair of every head in v[d] by the angle for `pos`;
    /// `inverse` applies the transpose rotation.
    void apply(float* v, std::size_t pos, std::size_t d, bool inverse = false) const {
        const float* c = cos.data() + (pos - first) * half;
        const float* s = sin.data() + (pos - first) * half;
        for (std::size_t base = 0; base < d; base += 2 * half)
            for (std::size_t i = 0; i < half; ++i) {
                float x0 = v[base + 2 * i], x1 = v[base + 2 * i + 1];
                float sn = inverse ? -s[i] : s[i];
                v[base + 2 * i] = x0 * c[i] - x1 * sn;
                v[base + 2 * i + 1] = x0 * sn + x1 * c[i];
            }
    }
};

float sigmoid(float u) { return 1.0f / (1.0f + std::exp(-u)); }

void check_tokens(const ArchConfig& arch, std::span<const int> tokens) {
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(arch.max_seq))
        throw InputError("forward: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                         std::to_string(arch.max_seq));
    for (int t : tokens)
        if (t < 0 || t >= arch.vocab_size) throw InputError("forward: token id " + std::to_string(t) + " out of range");
}

/// Causal attention for all heads. q, k, v, o are [T, d]; probs (optional) is [H, T, T].
void attention(const float* q, const float* k, const float* v, std::size_t T, std::size_t d, std::size_t H,
               float* o, float* probs, Vec& scratch) {
    const auto& kt = simd::active();
    std::size_t hd = d / H;
    float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    scratch.resize(T);
    std::fill(o, o + T * d, 0.0f);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t) {
            const float* qt = q + t * d + h * hd;
            float mx = -INFINITY;
            for (std::size_t s = 0; s <= t; ++s) {
                scratch[s] = kt.dot(qt, k + s * d + h * hd, hd) * scale;
                mx = std::max(mx, scratch[s]);
            }
            float z = 0.0f;
            for (std::size_t s = 0; s <= t; ++s) {
                scratch[s] = std::exp(scratch[s] - mx);
                z += scratch[s];
            }
            float* ot = o + t * d + h * hd;
            for (std::size_t s = 0; s <= t; ++s) {
                float p = scratch[s] / z;
                if (probs) probs[(h * T + t) * T + s] = p;
                kt.axpy(p, v + s * d + h * hd, ot, hd);
            }
        }
}

/// Shared forward. Fills `cache` when given (dense views only) and `hidden` when given.
Tensor forward_impl(const ModelView& m, std::span<const int> tokens, ForwardCache* cache,
                    std::vector<Tensor>* hidden) {
    const auto& arch = m.arch;
    check_tokens(arch, tokens);
    const std::size_t T = tokens.size(), d = arch.d_model, ff = arch.d_ff, H = arch.n_heads,
                      V = arch.vocab_size;
    RopeTable rope(0, T, arch.head_dim());

    Vec x(T * d), a(T * d), q(T * d), k(T * d), v(T * d), o(T * d), tmp(T * d), u(T * ff), hbuf(T * ff), scratch;
    Vec inv_a(T), inv_m(T), probs;
    for (std::size_t t = 0; t < T; ++t)
        std::copy_n(m.tok_emb + static_cast<std::size_t>(tokens[t]) * d, d, x.begin() + t * d);
    if (hidden) hidden->emplace_back(Shape{T, d}, x);
    if (cache) {
        cache->tokens.assign(tokens.begin(), tokens.end());
        cache->layers.assign(m.layers.size(), {});
    }

    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& L = m.layers[l];
        for (std::size_t t = 0; t < T; ++t) inv_a[t] = rmsnorm(&x[t * d], L.attn_norm, d, &a[t * d]);
        linear(L.wq, a.data(), T, q.data());
        linear(L.wk, a.data(), T, k.data());
        linear(L.wv, a.data(), T, v.data());
        for (std::size_t t = 0; t < T; ++t) {
            rope.apply(&q[t * d], t, d);
            rope.apply(&k[t * d], t, d);
        }
        if (cache) probs.assign(H * T * T, 0.0f);
        attention(q.data(), k.data(), v.data(), T, d, H, o.data(), cache ? probs.data() : nullptr, scratch);
        linear(L.wo, o.data(), T, tmp.data());
        if (cache) {
            auto& C = cache->layers[l];
            C.x_in = x;
            C.attn_inv = inv_a;
            C.a = a;
            C.q = q;
            C.k = k;
            C.v = v;
            C.probs = std::move(probs);
            C.o = o;
        }
        for (std::size_t i = 0; i < T * d; ++i) x[i] += tmp[i];

        for (std::size_t t = 0; t < T; ++t) inv_m[t] = rmsnorm(&x[t * d], L.mlp_norm, d, &a[t * d]);
        linear(L.w1, a.data(), T, u.data());
        for (std::size_t i = 0; i < T * ff; ++i) hbuf[i] = u[i] * sigmoid(u[i]);
        linear(L.w2, hbuf.data(), T, tmp.data());
        if (cache) {
            auto& C = cache->layers[l];
            C.x_mid = x;
            C.mlp_inv = inv_m;
            C.m = a;
            C.u = u;
            C.h = hbuf;
        }
        for (std::size_t i = 0; i < T * d; ++i) x[i] += tmp[i];
        if (hidden) hidden->emplace_back(Shape{T, d}, x);
    }

    Vec f(T * d);
    Vec inv_f(T);
    for (std::size_t t = 0; t < T; ++t) inv_f[t] = rmsnorm(&x[t * d], m.final_norm, d, &f[t * d]);
    Tensor logits({T, V});
    dense_linear(f.data(), T, d, m.unembed, V, logits.ptr());
    if (cache) {
        cache->x_final = std::move(x);
        cache->final_inv = std::move(inv_f);
        cache->f = std::move(f);
    }
    return logits;
}

} // namespace

Tensor readout(const ModelView& m, const float* hidden, std::size_t rows) {
    const std::size_t d = m.arch.d_model, V = m.arch.vocab_size;
    Vec f(rows * d);
    for (std::size_t t = 0; t < rows; ++t) rmsnorm(hidden + t * d, m.final_norm, d, &f[t * d]);
    Tensor logits({rows, V});
    dense_linear(f.data(), rows, d, m.unembed, V, logits.ptr());
    return logits;
}

namespace {

float* grad_ptr(TensorMap& grads, const std::string& name, Shape shape) {
    auto it = grads.find(name);
    if (it == grads.end()) it = grads.emplace(name, Tensor(std::move(shape))).first;
    return it->second.ptr();
}

/// dW[out, in] += dY^T X ; dX[T, in] += dY W. Rows of dY that are zero are skipped.
void linear_backward(const LinearRef& w, const float* x, const float* dy, std::size_t T, float* dw, float* dx) {
    const auto& k = simd::active();
    for (std::size_t t = 0; t < T; ++t) {
        const float* dyt = dy + t * w.out;
        const float* xt = x + t * w.in;
        float* dxt = dx + t * w.in;
        for (std::size_t o = 0; o < w.out; ++o) {
            float g = dyt[o];
            if (g == 0.0f) continue;
            k.axpy(g, xt, dw + o * w.in, w.in);
            k.axpy(g, w.weight + o * w.in, dxt, w.in);
        }
    }
}

} // namespace

ModelView ModelView::of(const Checkpoint& ckpt) {
    ckpt.arch.validate();
    ModelView m;
    m.arch = ckpt.arch;
    m.tok_emb = tensor_ptr(ckpt, pname::kTokEmb);
    m.final_norm = tensor_ptr(ckpt, pname::kFinalNorm);
    m.unembed = tensor_ptr(ckpt, pname::kUnembed);
    for (int l = 0; l < ckpt.arch.n_layers; ++l) {
        LayerRef L;
        L.attn_norm = tensor_ptr(ckpt, pname::layer(l, "attn_norm"));
        L.mlp_norm = tensor_ptr(ckpt, pname::layer(l, "mlp_norm"));
        L.wq = linear_of(ckpt, pname::layer(l, "wq"));
        L.wk = linear_of(ckpt, pname::layer(l, "wk"));
        L.wv = linear_of(ckpt, pname::layer(l, "wv"));
        L.wo = linear_of(ckpt, pname::layer(l, "wo"));
        L.w1 = linear_of(ckpt, pname::layer(l, "w1"));
        L.w2 = linear_of(ckpt, pname::layer(l, "w2"));
        m.layers.push_back(L);
    }
    return m;
}

bool ModelView::has_planes() const {
    for (const auto& L : layers)
        for (const auto* w : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1, &L.w2})
            if (!w->planes.empty()) return true;
    return false;
}

Checkpoint init_model(const ArchConfig& arch, Rng& rng) {
    Checkpoint ckpt;
    ckpt.arch = arch;
    for (const auto& p : param_layout(arch)) {
        if (p.shape.size() == 1) {
            Tensor g(p.shape);
            std::fill(g.data().begin(), g.data().end(), 1.0f);
            ckpt.tensors.emplace(p.name, std::move(g));
        } else {
            ckpt.tensors.emplace(p.name, rng_normal(rng, p.shape, kInitStd));
        }
    }
    ckpt.meta["init_seed"] = std::to_string(rng.seed());
    return ckpt;
}

ForwardTrace forward(const ModelView& model, std::span<const int> tokens, bool capture) {
    ForwardTrace tr;
    tr.logits = forward_impl(model, tokens, nullptr, capture ? &tr.hidden_states : nullptr);
    return tr;
}

ForwardTrace forward(const Checkpoint& ckpt, std::span<const int> tokens, bool capture) {
    return forward(ModelView::of(ckpt), tokens, capture);
}

Tensor forward_train(const ModelView& model, std::span<const int> tokens, ForwardCache& cache) {
    if (model.has_planes()) throw InputError("forward_train: fused views are inference-only");
    return forward_impl(model, tokens, &cache, nullptr);
}

int argmax(std::span<const float> v) {
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

Decoder::Decoder(const ModelView& model) : model_(model) {
    const auto& a = model.arch;
    std::size_t d = a.d_model;
    keys_.assign(model.layers.size(), Vec(static_cast<std::size_t>(a.max_seq) * d));
    values_.assign(model.layers.size(), Vec(static_cast<std::size_t>(a.max_seq) * d));
    x_.resize(d);
    a_.resize(d);
    q_.resize(d);
    k_.resize(d);
    v_.resize(d);
    o_.resize(d);
    tmp_.resize(d);
    u_.resize(static_cast<std::size_t>(a.d_ff) * 2);
    logits_.resize(static_cast<std::size_t>(a.vocab_size));
    scores_.resize(static_cast<std::size_t>(a.max_seq));
}

std::span<const float> Decoder::step(int token) {
    const auto& arch = model_.arch;
    if (pos_ >= static_cast<std::size_t>(arch.max_seq)) throw InputError("decoder: sequence exceeds max_seq");
    if (token < 0 || token >= arch.vocab_size) throw InputError("decoder: token id " + std::to_string(token) + " out of range");
    const auto& kt = simd::active();
    const std::size_t d = arch.d_model, ff = arch.d_ff, H = arch.n_heads, hd = arch.head_dim();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    RopeTable rope(pos_, 1, hd);

    std::copy_n(model_.tok_emb + static_cast<std::size_t>(token) * d, d, x_.begin());
    for (std::size_t l = 0; l < model_.layers.size(); ++l) {
        const auto& L = model_.layers[l];
        rmsnorm(x_.data(), L.attn_norm, d, a_.data());
        linear(L.wq, a_.data(), 1, q_.data());
        linear(L.wk, a_.data(), 1, k_.data());
        linear(L.wv, a_.data(), 1, v_.data());
        rope.apply(q_.data(), pos_, d);
        rope.apply(k_.data(), pos_, d);
        float* K = keys_[l].data();
        float* Vv = values_[l].data();
        std::copy(k_.begin(), k_.end(), K + pos_ * d);
        std::copy(v_.begin(), v_.end(), Vv + pos_ * d);
        std::fill(o_.begin(), o_.end(), 0.0f);
        for (std::size_t h = 0; h < H; ++h) {
            float mx = -INFINITY;
            for (std::size_t s = 0; s <= pos_; ++s) {
                scores_[s] = kt.dot(q_.data() + h * hd, K + s * d + h * hd, hd) * scale;
                mx = std::max(mx, scores_[s]);
            }
            float z = 0.0f;
            for (std::size_t s = 0; s <= pos_; ++s) {
                scores_[s] = std::exp(scores_[s] - mx);
                z += scores_[s];
            }
            for (std::size_t s = 0; s <= pos_; ++s) kt.axpy(scores_[s] / z, Vv + s * d + h * hd, o_.data() + h * hd, hd);
        }
        linear(L.wo, o_.data(), 1, tmp_.data());
        for (std::size_t i = 0; i < d; ++i) x_[i] += tmp_[i];
        rmsnorm(x_.data(), L.mlp_norm, d, a_.data());
        linear(L.w1, a_.data(), 1, u_.data());
        for (std::size_t i = 0; i < ff; ++i) u_[ff + i] = u_[i] * sigmoid(u_[i]);
        linear(L.w2, u_.data() + ff, 1, tmp_.data());
        for (std::size_t i = 0; i < d; ++i) x_[i] += tmp_[i];
    }
    rmsnorm(x_.data(), model_.final_norm, d, a_.data());
    dense_linear(a_.data(), 1, d, model_.unembed, logits_.size(), logits_.data());
    ++pos_;
    return logits_;
}

std::vector<int> generate(const ModelView& model, std::span<const int> prompt, int max_new) {
    if (prompt.empty()) throw InputError("generate: empty prompt");
    check_tokens(model.arch, prompt);
    std::vector<int> out(prompt.begin(), prompt.end());
    if (max_new <= 0) return out;
    Decoder dec(model);
    std::span<const float> logits;
    for (int t : prompt) logits = dec.step(t);
    for (int i = 0; i < max_new; ++i) {
        int next = argmax(logits);
        out.push_back(next);
        if (next == tok::kEos || i + 1 == max_new) break;
        if (out.size() >= static_cast<std::size_t>(model.arch.max_seq)) break;
        logits = dec.step(next);
    }
    return out;
}

std::vector<int> generate(const Checkpoint& ckpt, std::span<const int> prompt, int max_new) {
    return generate(ModelView::of(ckpt), prompt, max_new);
}

void backward(const ModelView& m, const ForwardCache& cache, const Tensor& dlogits, TensorMap& grads) {
    if (m.has_planes()) throw InputError("backward: fused views are inference-only");
    const auto& arch = m.arch;
    const auto& kt = simd::active();
    const std::size_t T = cache.tokens.size(), d = arch.d_model, ff = arch.d_ff, H = arch.n_heads,
                      hd = arch.head_dim(), V = arch.vocab_size;
    if (dlogits.rank() != 2 || dlogits.dim(0) != T || dlogits.dim(1) != V)
        throw InputError("backward: dlogits shape does not match cached sequence");
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    RopeTable rope(0, T, hd);
    auto G = [&](const std::string& name, Shape s) { return grad_ptr(grads, name, std::move(s)); };

    // Unembedding and final norm.
    Vec df(T * d, 0.0f), dx(T * d, 0.0f);
    {
        float* dU = G(pname::kUnembed, {V, d});
        LinearRef U{m.unembed, V, d, {}};
        linear_backward(U, cache.f.data(), dlogits.ptr(), T, dU, df.data());
        float* dg = G(pname::kFinalNorm, {d});
        for (std::size_t t = 0; t < T; ++t)
            rmsnorm_backward(&cache.x_final[t * d], m.final_norm, cache.final_inv[t], &df[t * d], d, &dx[t * d], dg);
    }

    Vec dtmp(T * d), dh(T * ff), du(T * ff), dq(T * d), dk(T * d), dv(T * d), da(T * d), dP(T);
    for (std::size_t li = m.layers.size(); li-- > 0;) {
        const auto& L = m.layers[li];
        const auto& C = cache.layers[li];
        auto name = [&](const char* w) { return pname::layer(static_cast<int>(li), w); };

        // MLP: x_out = x_mid + w2(silu(w1(norm(x_mid))))
        std::fill(dh.begin(), dh.end(), 0.0f);
        linear_backward(L.w2, C.h.data(), dx.data(), T, G(name("w2"), {d, ff}), dh.data());
        for (std::size_t i = 0; i < T * ff; ++i) {
            float s = sigmoid(C.u[i]);
            du[i] = dh[i] * s * (1.0f + C.u[i] * (1.0f - s));
        }
        std::fill(da.begin(), da.end(), 0.0f);
        linear_backward(L.w1, C.m.data(), du.data(), T, G(name("w1"), {ff, d}), da.data());
        {
            float* dg = G(name("mlp_norm"), {d});
            for (std::size_t t = 0; t < T; ++t)
                rmsnorm_backward(&C.x_mid[t * d], L.mlp_norm, C.mlp_inv[t], &da[t * d], d, &dx[t * d], dg);
        }

        // Attention: x_mid = x_in + wo(attn(rope(wq a), rope(wk a), wv a)), a = norm(x_in)
        std::fill(dtmp.begin(), dtmp.end(), 0.0f); // d(o)
        linear_backward(L.wo, C.o.data(), dx.data(), T, G(name("wo"), {d, d}), dtmp.data());
        std::fill(dq.begin(), dq.end(), 0.0f);
        std::fill(dk.begin(), dk.end(), 0.0f);
        std::fill(dv.begin(), dv.end(), 0.0f);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t t = 0; t < T; ++t) {
                const float* P = &C.probs[(h * T + t) * T];
                const float* dot_ = &dtmp[t * d + h * hd];
                bool any = false;
                for (std::size_t i = 0; i < hd; ++i) any |= dot_[i] != 0.0f;
                if (!any) continue;
                float sum = 0.0f;
                for (std::size_t s = 0; s <= t; ++s) {
                    dP[s] = kt.dot(dot_, &C.v[s * d + h * hd], hd);
                    kt.axpy(P[s], dot_, &dv[s * d + h * hd], hd);
                    sum += P[s] * dP[s];
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    float ds = P[s] * (dP[s] - sum) * scale;
                    if (ds == 0.0f) continue;
                    kt.axpy(ds, &C.k[s * d + h * hd], &dq[t * d + h * hd], hd);
                    kt.axpy(ds, &C.q[t * d + h * hd], &dk[s * d + h * hd], hd);
                }
            }
        for (std::size_t t = 0; t < T; ++t) {
            rope.apply(&dq[t * d], t, d, true);
            rope.apply(&dk[t * d], t, d, true);
        }
        std::fill(da.begin(), da.end(), 0.0f);
        linear_backward(L.wq, C.a.data(), dq.data(), T, G(name("wq"), {d, d}), da.data());
        linear_backward(L.wk, C.a.data(), dk.data(), T, G(name("wk"), {d, d}), da.data());
        linear_backward(L.wv, C.a.data(), dv.data(), T, G(name("wv"), {d, d}), da.data());
        {
            float* dg = G(name("attn_norm"), {d});
            for (std::size_t t = 0; t < T; ++t)
                rmsnorm_backward(&C.x_in[t * d], L.attn_norm, C.attn_inv[t], &da[t * d], d, &dx[t * d], dg);
        }
    }

    float* dE = G(pname::kTokEmb, {V, d});
    for (std::size_t t = 0; t < T; ++t)
        kt.axpy(1.0f, &dx[t * d], dE + static_cast<std::size_t>(cache.tokens[t]) * d, d);
}

} // namespace dg
