#include "dg/reference.hpp"

#include <algorithm>
#include <cmath>

namespace dg::reference {

namespace {

using Mat = std::vector<double>;

// y[T, out] = x[T, in] * W^T
Mat matmul_t(const Mat& x, std::size_t T, std::size_t in, const Mat& w, std::size_t out) {
    Mat y(T * out, 0.0);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t o = 0; o < out; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < in; ++i) s += x[t * in + i] * w[o * in + i];
            y[t * out + o] = s;
        }
    return y;
}

Mat rms(const Mat& x, std::size_t T, std::size_t d, const Mat& g) {
    Mat y(T * d);
    for (std::size_t t = 0; t < T; ++t) {
        double ss = 0.0;
        for (std::size_t i = 0; i < d; ++i) ss += x[t * d + i] * x[t * d + i];
        double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + 1e-5);
        for (std::size_t i = 0; i < d; ++i) y[t * d + i] = x[t * d + i] * inv * g[i];
    }
    return y;
}

void rotate(Mat& x, std::size_t T, std::size_t d, std::size_t hd) {
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t h = 0; h < d / hd; ++h)
            for (std::size_t i = 0; i < hd / 2; ++i) {
                double ang = static_cast<double>(t) * std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
                double c = std::cos(ang), s = std::sin(ang);
                double& a = x[t * d + h * hd + 2 * i];
                double& b = x[t * d + h * hd + 2 * i + 1];
                double a0 = a, b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
}

const Mat& P(const ParamsF64& p, const std::string& name) { return p.at(name); }

} // namespace

ParamsF64 to_f64(const Checkpoint& ckpt) {
    ParamsF64 out;
    for (const auto& [name, t] : ckpt.tensors) out[name] = std::vector<double>(t.data().begin(), t.data().end());
    return out;
}

std::vector<double> logits(const ArchConfig& arch, const ParamsF64& params, std::span<const int> tokens) {
    const std::size_t T = tokens.size(), d = arch.d_model, ff = arch.d_ff, H = arch.n_heads, hd = d / H,
                      V = arch.vocab_size;
    const auto& emb = P(params, pname::kTokEmb);
    Mat x(T * d);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d; ++i) x[t * d + i] = emb[static_cast<std::size_t>(tokens[t]) * d + i];

    for (int l = 0; l < arch.n_layers; ++l) {
        auto name = [&](const char* w) { return pname::layer(l, w); };
        Mat a = rms(x, T, d, P(params, name("attn_norm")));
        Mat q = matmul_t(a, T, d, P(params, name("wq")), d);
        Mat k = matmul_t(a, T, d, P(params, name("wk")), d);
        Mat v = matmul_t(a, T, d, P(params, name("wv")), d);
        rotate(q, T, d, hd);
        rotate(k, T, d, hd);
        Mat o(T * d, 0.0);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> sc(t + 1);
                for (std::size_t s = 0; s <= t; ++s) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) dot += q[t * d + h * hd + i] * k[s * d + h * hd + i];
                    sc[s] = dot / std::sqrt(static_cast<double>(hd));
                }
                double mx = *std::max_element(sc.begin(), sc.end());
                double z = 0.0;
                for (auto& s : sc) z += (s = std::exp(s - mx));
                for (std::size_t s = 0; s <= t; ++s)
                    for (std::size_t i = 0; i < hd; ++i) o[t * d + h * hd + i] += sc[s] / z * v[s * d + h * hd + i];
            }
        Mat attn = matmul_t(o, T, d, P(params, name("wo")), d);
        for (std::size_t i = 0; i < T * d; ++i) x[i] += attn[i];
        Mat m = rms(x, T, d, P(params, name("mlp_norm")));
        Mat u = matmul_t(m, T, d, P(params, name("w1")), ff);
        for (auto& e : u) e = e / (1.0 + std::exp(-e));
        Mat y = matmul_t(u, T, ff, P(params, name("w2")), d);
        for (std::size_t i = 0; i < T * d; ++i) x[i] += y[i];
    }
    Mat f = rms(x, T, d, P(params, pname::kFinalNorm));
    return matmul_t(f, T, d, P(params, pname::kUnembed), V);
}

double masked_xent(const ArchConfig& arch, const ParamsF64& params, std::span<const int> tokens,
                   std::span<const std::uint8_t> mask) {
    auto z = logits(arch, params, tokens);
    const std::size_t V = arch.vocab_size;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        if (!mask[t]) continue;
        const double* row = z.data() + (t - 1) * V;
        double mx = *std::max_element(row, row + V);
        double s = 0.0;
        for (std::size_t i = 0; i < V; ++i) s += std::exp(row[i] - mx);
        total += mx + std::log(s) - row[tokens[t]];
        ++count;
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

} // namespace dg::reference
