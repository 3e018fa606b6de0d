#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "enclab/tensor.hpp"

namespace enclab {

enum class DecayKind { trapezoidal, linear, one_sqrt_delayed };

std::string decay_name(DecayKind d);
DecayKind decay_from_name(const std::string& s);

/// Token-denominated training plan. The main run never decays: the decay leg
/// of the trapezoid is applied only by branched cooldowns, so every saved
/// checkpoint can be cooled independently.
struct TrainPlan {
  Index total_tokens = 0;
  Index batch_tokens = 0;
  Index max_len = 0;
  Scalar peak_lr = 8e-4;
  Index warmup_tokens = 0;
  DecayKind decay = DecayKind::trapezoidal;
  Index decay_delay_tokens = 0;  // one_sqrt_delayed only
  Scalar weight_decay = 1e-5;
  Scalar beta1 = 0.90;
  Scalar beta2 = 0.98;
  Scalar adam_eps = 1e-6;
  Index checkpoint_every_tokens = 0;
  Index cooldown_tokens = 0;
  Scalar clip_norm = 1.0;
  std::uint64_t seed = 0;
};

/// Throws ConfigError naming the violated constraint. Token quantities must
/// be whole numbers of batches so accounting and resume stay exact.
void validate(const TrainPlan& plan);

nlohmann::json plan_to_json(const TrainPlan& plan);
TrainPlan plan_from_json(const nlohmann::json& j);

/// Warmup-stable: linear 0 -> peak over warmup_tokens, then constant peak.
Scalar wsd_lr(Index tokens_seen, const TrainPlan& plan);

/// Constant peak until `delay` tokens into the phase, then
/// peak * (1 - sqrt((t - delay) / (phase_total - delay))); zero at phase end.
Scalar one_sqrt_lr(Index tokens_into_phase, Index delay, Index phase_total,
                   Scalar peak);

/// Linear lr0 -> 0 over cooldown_tokens.
Scalar cooldown_lr(Index tokens_into_cooldown, Scalar lr0,
                   Index cooldown_tokens);

}  // namespace enclab
