#include "enclab/schedule.hpp"

#include <cmath>

#include "enclab/errors.hpp"

namespace enclab {

std::string decay_name(DecayKind d) {
  switch (d) {
    case DecayKind::trapezoidal: return "trapezoidal";
    case DecayKind::linear: return "linear";
    case DecayKind::one_sqrt_delayed: return "one_sqrt_delayed";
  }
  return "?";
}

DecayKind decay_from_name(const std::string& s) {
  if (s == "trapezoidal") return DecayKind::trapezoidal;
  if (s == "linear") return DecayKind::linear;
  if (s == "one_sqrt_delayed") return DecayKind::one_sqrt_delayed;
  throw ConfigError("unknown decay kind: " + s);
}

void validate(const TrainPlan& p) {
  auto fail = [](const std::string& what) {
    throw ConfigError("invalid train plan: " + what);
  };
  if (p.total_tokens < 1) fail("total_tokens must be >= 1");
  if (p.max_len < 1) fail("max_len must be >= 1");
  if (p.batch_tokens < p.max_len) fail("batch_tokens must be >= max_len");
  if (p.batch_tokens % p.max_len != 0)
    fail("batch_tokens must be a multiple of max_len");
  if (p.total_tokens % p.batch_tokens != 0)
    fail("total_tokens must be a multiple of batch_tokens");
  if (p.warmup_tokens < 0 || p.warmup_tokens >= p.total_tokens)
    fail("warmup_tokens must be in [0, total_tokens)");
  if (p.peak_lr <= 0) fail("peak_lr must be positive");
  if (!(p.beta1 > 0 && p.beta1 < 1 && p.beta2 > 0 && p.beta2 < 1))
    fail("betas must be in (0, 1)");
  if (p.adam_eps <= 0) fail("adam_eps must be positive");
  if (p.weight_decay < 0) fail("weight_decay must be >= 0");
  if (p.checkpoint_every_tokens > 0 &&
      p.checkpoint_every_tokens % p.batch_tokens != 0)
    fail("checkpoint_every_tokens must be a multiple of batch_tokens");
  if (p.cooldown_tokens > 0 && p.cooldown_tokens % p.batch_tokens != 0)
    fail("cooldown_tokens must be a multiple of batch_tokens");
  if (p.decay == DecayKind::one_sqrt_delayed && p.decay_delay_tokens < 0)
    fail("decay_delay_tokens must be >= 0");
  if (p.clip_norm <= 0) fail("clip_norm must be positive");
}

nlohmann::json plan_to_json(const TrainPlan& p) {
  return nlohmann::json{{"total_tokens", p.total_tokens},
                        {"batch_tokens", p.batch_tokens},
                        {"max_len", p.max_len},
                        {"peak_lr", p.peak_lr},
                        {"warmup_tokens", p.warmup_tokens},
                        {"decay", decay_name(p.decay)},
                        {"decay_delay_tokens", p.decay_delay_tokens},
                        {"weight_decay", p.weight_decay},
                        {"beta1", p.beta1},
                        {"beta2", p.beta2},
                        {"adam_eps", p.adam_eps},
                        {"checkpoint_every_tokens", p.checkpoint_every_tokens},
                        {"cooldown_tokens", p.cooldown_tokens},
                        {"clip_norm", p.clip_norm},
                        {"seed", p.seed}};
}

TrainPlan plan_from_json(const nlohmann::json& j) {
  TrainPlan p;
  p.total_tokens = j.at("total_tokens").get<Index>();
  p.batch_tokens = j.at("batch_tokens").get<Index>();
  p.max_len = j.at("max_len").get<Index>();
  p.peak_lr = j.at("peak_lr").get<Scalar>();
  p.warmup_tokens = j.at("warmup_tokens").get<Index>();
  p.decay = decay_from_name(j.value("decay", "trapezoidal"));
  p.decay_delay_tokens = j.value("decay_delay_tokens", Index{0});
  p.weight_decay = j.value("weight_decay", 1e-5);
  p.beta1 = j.value("beta1", 0.90);
  p.beta2 = j.value("beta2", 0.98);
  p.adam_eps = j.value("adam_eps", 1e-6);
  p.checkpoint_every_tokens = j.value("checkpoint_every_tokens", Index{0});
  p.cooldown_tokens = j.value("cooldown_tokens", Index{0});
  p.clip_norm = j.value("clip_norm", 1.0);
  p.seed = j.value("seed", std::uint64_t{0});
  return p;
}

Scalar wsd_lr(Index tokens_seen, const TrainPlan& plan) {
  if (tokens_seen < 0) throw ContractError("wsd_lr: negative tokens_seen");
  if (plan.warmup_tokens > 0 && tokens_seen < plan.warmup_tokens)
    return plan.peak_lr * static_cast<Scalar>(tokens_seen) /
           static_cast<Scalar>(plan.warmup_tokens);
  return plan.peak_lr;
}

Scalar one_sqrt_lr(Index tokens_into_phase, Index delay, Index phase_total,
                   Scalar peak) {
  if (tokens_into_phase < 0 || tokens_into_phase > phase_total)
    throw ContractError("one_sqrt_lr: tokens out of [0, phase_total]");
  if (delay >= phase_total)
    throw ContractError("one_sqrt_lr: delay must be < phase_total");
  if (tokens_into_phase < delay) return peak;
  const Scalar frac = static_cast<Scalar>(tokens_into_phase - delay) /
                      static_cast<Scalar>(phase_total - delay);
  return peak * (1.0 - std::sqrt(frac));
}

Scalar cooldown_lr(Index tokens_into_cooldown, Scalar lr0,
                   Index cooldown_tokens) {
  if (cooldown_tokens < 1)
    throw ContractError("cooldown_lr: cooldown_tokens must be >= 1");
  if (tokens_into_cooldown < 0 || tokens_into_cooldown > cooldown_tokens)
    throw ContractError("cooldown_lr: tokens out of [0, cooldown_tokens]");
  return lr0 * (1.0 - static_cast<Scalar>(tokens_into_cooldown) /
                          static_cast<Scalar>(cooldown_tokens));
}

}  // namespace enclab
