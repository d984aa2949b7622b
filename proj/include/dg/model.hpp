#pragma once

// Decoder-only toy transformer: byte embeddings, pre-norm RMSNorm blocks with
// rotary causal self-attention and a two-layer SiLU MLP, final RMSNorm and an
// untied unembedding.

#include <memory>
#include <span>
#include <vector>

#include "dg/checkpoint.hpp"
#include "dg/packed_sign.hpp"
#include "dg/rng.hpp"

namespace dg {

struct ForwardTrace {
    Tensor logits;                     // [seq, vocab]
    std::vector<Tensor> hidden_states; // n_layers + 1 entries of [seq, d_model] when captured
};

/// A linear map y = x W^T (+ sum_k gamma_k x S_k^T when planes are attached).
struct LinearRef {
    const float* weight = nullptr; // [out, in]
    std::size_t out = 0;
    std::size_t in = 0;
    std::span<const ScaledSigns> planes;
};

struct LayerRef {
    const float* attn_norm = nullptr;
    LinearRef wq, wk, wv, wo;
    const float* mlp_norm = nullptr;
    LinearRef w1, w2;
};

/// Read-only view of model parameters. Built from a dense checkpoint, or from
/// a base checkpoint plus compressed delta (see fused_view in delta.hpp).
struct ModelView {
    ArchConfig arch;
    const float* tok_emb = nullptr;
    std::vector<LayerRef> layers;
    const float* final_norm = nullptr;
    const float* unembed = nullptr;
    /// Storage kept alive for views that own materialised tensors.
    std::shared_ptr<const void> keepalive;

    static ModelView of(const Checkpoint& ckpt);
    bool has_planes() const;
};

Checkpoint init_model(const ArchConfig& arch, Rng& rng);

ForwardTrace forward(const Checkpoint& ckpt, std::span<const int> tokens, bool capture);
ForwardTrace forward(const ModelView& model, std::span<const int> tokens, bool capture);

/// Final RMSNorm followed by the unembedding, applied to `rows` residual
/// vectors of width d_model. Uses the same arithmetic as the last step of forward.
Tensor readout(const ModelView& model, const float* hidden, std::size_t rows);

/// Greedy decoding; stops after EOS (included in the result) or max_new tokens.
std::vector<int> generate(const Checkpoint& ckpt, std::span<const int> prompt, int max_new);
std::vector<int> generate(const ModelView& model, std::span<const int> prompt, int max_new);

/// Incremental decoder with a per-layer key/value cache.
class Decoder {
  public:
    explicit Decoder(const ModelView& model);
    /// Appends one token and returns the next-token logits [vocab].
    std::span<const float> step(int token);
    std::size_t position() const noexcept { return pos_; }

  private:
    const ModelView& model_;
    std::size_t pos_ = 0;
    std::vector<std::vector<float>> keys_, values_; // per layer [max_seq * d]
    std::vector<float> x_, a_, q_, k_, v_, o_, tmp_, u_, logits_, scores_;
};

/// Activations retained for backpropagation.
struct ForwardCache {
    struct Layer {
        std::vector<float> x_in, attn_inv, a, q, k, v, probs, o, x_mid, mlp_inv, m, u, h;
    };
    std::vector<int> tokens;
    std::vector<Layer> layers;
    std::vector<float> x_final, final_inv, f;
};

/// Dense forward pass that records everything `backward` needs. Returns logits [seq, vocab].
Tensor forward_train(const ModelView& model, std::span<const int> tokens, ForwardCache& cache);

/// Accumulates dLoss/dParam into `grads` (same names and shapes as the
/// checkpoint; missing entries are created as zeros). Rows of `dlogits` that
/// are entirely zero are skipped. Views with sign planes are not differentiable.
void backward(const ModelView& model, const ForwardCache& cache, const Tensor& dlogits, TensorMap& grads);

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const float> v);

} // namespace dg
