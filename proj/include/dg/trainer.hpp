#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dg/checkpoint.hpp"
#include "dg/model.hpp"
#include "dg/rng.hpp"

namespace dg {

/// One (system, user, assistant) conversation.
struct ConversationExample {
    std::string system;
    std::string user;
    std::string assistant;

    friend bool operator==(const ConversationExample&, const ConversationExample&) = default;
};

void to_json(nlohmann::json& j, const ConversationExample& e);
void from_json(const nlohmann::json& j, ConversationExample& e);

/// JSON Lines with keys "system", "user", "assistant".
std::vector<ConversationExample> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::vector<ConversationExample>& data, const std::filesystem::path& path);

struct RenderedExample {
    std::vector<int> tokens;
    std::vector<std::uint8_t> mask; // 1 where the token is a training target
};

/// BOS system SEP_USER user SEP_ASST assistant EOS; the mask covers the
/// assistant bytes and EOS. Throws InputError if the result exceeds max_seq.
RenderedExample render_conversation(const ConversationExample& ex, int max_seq);
/// Prompt prefix only (through SEP_ASST), used for generation.
std::vector<int> render_prompt(const std::string& system, const std::string& user);

std::vector<int> bytes_to_tokens(const std::string& s);
/// Bytes of the ids < 256, stopping at the first special token.
std::string tokens_to_text(std::span<const int> tokens);

struct TrainConfig {
    float learning_rate = 3e-4f;
    int epochs = 3;
    int batch_size = 8;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    float weight_decay = 0.01f;
    float grad_clip = 1.0f;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Learning rates used for the 7B targets in the original study; kept for reference runs.
namespace lr_preset {
inline constexpr float kLlama = 2e-5f;
inline constexpr float kMistralQwen = 5e-6f;
} // namespace lr_preset

/// Mean next-token cross-entropy over masked target positions of the batch.
/// The target at position t is predicted from logits at t-1.
float loss(const Checkpoint& ckpt, std::span<const RenderedExample> batch);

/// Loss and its gradient w.r.t. every parameter (accumulated into `grads`, which is cleared first).
float loss_and_grad(const ModelView& model, std::span<const RenderedExample> batch, TensorMap& grads);

struct TrainStep {
    int step = 0;
    int epoch = 0;
    float loss = 0.0f;
};

using StepCallback = std::function<void(const TrainStep&)>;

/// Stateful AdamW loop so training can be resumed epoch by epoch with the
/// same result as one uninterrupted run.
class Trainer {
  public:
    Trainer(Checkpoint init, TrainConfig cfg);

    /// One seeded shuffle and pass over `data`.
    void run_epoch(const std::vector<RenderedExample>& data, const StepCallback& on_step = {});

    const Checkpoint& model() const noexcept { return ckpt_; }
    Checkpoint take() && { return std::move(ckpt_); }
    int steps() const noexcept { return step_; }
    int epochs_done() const noexcept { return epoch_; }

  private:
    Checkpoint ckpt_;
    TrainConfig cfg_;
    Rng rng_;
    TensorMap grads_, m1_, m2_;
    int step_ = 0;
    int epoch_ = 0;
};

/// AdamW with decoupled weight decay, global-norm clipping, constant LR and
/// seeded per-epoch shuffling. Returns the fine-tuned checkpoint; `base` is untouched.
Checkpoint finetune(const Checkpoint& base, const std::vector<ConversationExample>& data, const TrainConfig& cfg,
                    const StepCallback& on_step = {});

/// Same as finetune over pre-rendered examples.
Checkpoint finetune_rendered(const Checkpoint& base, const std::vector<RenderedExample>& data,
                             const TrainConfig& cfg, const StepCallback& on_step = {});

int optimizer_steps(std::size_t n_examples, const TrainConfig& cfg);

/// Compares analytic gradients with central differences at `n_probes`
/// randomly chosen parameters (step h). Returns the max relative error,
/// |a - n| / max(|a|, |n|, 1e-4). The finite differences run through the
/// double-precision reference forward so f32 rounding does not swamp them.
float grad_check(const Checkpoint& ckpt, const RenderedExample& example, int n_probes, std::uint64_t seed,
                 float h = 1e-3f);

} // namespace dg
