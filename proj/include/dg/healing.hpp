#pragma once

// Post-compression "healing": the sign planes stay fixed while the per-plane
// scales are tuned with Adam so that the compressed model's logits match the
// fine-tuned model's logits on a small calibration set.

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "dg/delta.hpp"
#include "dg/trainer.hpp"

namespace dg {

/// Calibration token sequences with the fine-tuned model's logits as targets.
struct CalibSet {
    std::vector<std::vector<int>> tokens;
    std::vector<Tensor> targets; // [seq, vocab] each
};

CalibSet make_calib_set(const Checkpoint& finetuned, const std::vector<ConversationExample>& examples);

/// Mean over examples of the mean squared logit error over all positions and vocabulary entries.
float calib_loss(const ModelView& model, const CalibSet& calib);

/// Same loss built directly from checkpoints and conversations.
float calib_loss(const Checkpoint& base, const Checkpoint& finetuned, const CompressedDelta& cd,
                 const std::vector<ConversationExample>& calib);

enum class HealGradient { Analytic, FiniteDifference };

struct HealConfig {
    int steps = 100;
    float learning_rate = 1e-3f;
    int n_calib = 16;
    HealGradient gradient = HealGradient::Analytic;
    float fd_step = 1e-4f; // central-difference step on each scale
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    /// Return the scales with the lowest calibration loss seen, not the last ones.
    bool keep_best = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const HealConfig& c);
void from_json(const nlohmann::json& j, HealConfig& c);

struct HealResult {
    CompressedDelta delta;
    float initial_loss = 0.0f;
    float final_loss = 0.0f; // loss of the returned delta
    int best_step = 0;       // 0 means the unhealed scales were kept
    std::vector<float> history;
};

/// Scales in canonical order: entries by name, then plane index.
std::vector<float> get_scales(const CompressedDelta& cd);
void set_scales(CompressedDelta& cd, std::span<const float> scales);

/// Calibration loss and its gradient w.r.t. every scale, through one dense
/// forward/backward pass of the reconstructed model per example.
float calib_loss_and_scale_grad(const Checkpoint& base, const CompressedDelta& cd, const CalibSet& calib,
                                std::vector<float>& grad);

/// Central differences of the f32 calibration loss, two forward passes per scale.
float calib_loss_and_scale_grad_fd(const Checkpoint& base, const CompressedDelta& cd, const CalibSet& calib,
                                   float h, std::vector<float>& grad);

HealResult heal(const Checkpoint& base, const CompressedDelta& cd, const CalibSet& calib, const HealConfig& cfg);

/// Convenience overload: builds the calibration targets from `finetuned`,
/// using the first cfg.n_calib examples.
HealResult heal(const Checkpoint& base, const Checkpoint& finetuned, const CompressedDelta& cd,
                const HealConfig& cfg, const std::vector<ConversationExample>& calib);

/// Max relative error |a - n| / max(|a|, |n|, 1e-4) between analytic scale
/// gradients and double-precision central differences at `n_probes`
/// randomly chosen scales.
float heal_gradient_check(const Checkpoint& base, const Checkpoint& finetuned, const CompressedDelta& cd,
                          const CalibSet& calib, int n_probes, std::uint64_t seed, double h = 1e-5);

} // namespace dg
