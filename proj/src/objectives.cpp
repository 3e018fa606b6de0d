#include "enclab/objectives.hpp"

#include <cmath>

#include "enclab/errors.hpp"

namespace enclab {

namespace {

void check_policy(const MaskPolicy& p) {
  if (!(p.rate > 0.0 && p.rate < 1.0))
    throw ContractError("mask policy: rate must be in (0, 1), got " +
                        std::to_string(p.rate));
  const Scalar s = p.mask_p + p.random_p + p.keep_p;
  if (std::abs(s - 1.0) > 1e-12)
    throw ContractError("mask policy: mask/random/keep must sum to 1");
}

Index draw_random_token(Index vocab_size, const SpecialIds& specials,
                        RngStream& rng) {
  // Uniform over non-special ids.
  Index id;
  do {
    id = rng.uniform_int(0, vocab_size);
  } while (specials.is_special(id));
  return id;
}

}  // namespace

MaskedBatch mlm_mask(std::span<const Index> ids, const SpecialIds& specials,
                     Index vocab_size, const MaskPolicy& policy,
                     RngStream& rng) {
  check_policy(policy);
  if (vocab_size <= SpecialIds::count)
    throw ContractError("mlm_mask: vocab too small");
  MaskedBatch out;
  out.input_ids.assign(ids.begin(), ids.end());
  out.labels.assign(ids.size(), kIgnoreLabel);
  out.kinds.assign(ids.size(), CorruptKind::none);

  Index corrupted = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (specials.is_special(ids[i])) continue;
    if (!rng.bernoulli(policy.rate)) continue;
    out.labels[i] = ids[i];
    const Scalar u = rng.uniform();
    if (u < policy.mask_p) {
      out.kinds[i] = CorruptKind::mask_tok;
      out.input_ids[i] = specials.mask;
    } else if (u < policy.mask_p + policy.random_p) {
      out.kinds[i] = CorruptKind::random_tok;
      out.input_ids[i] = draw_random_token(vocab_size, specials, rng);
    } else {
      out.kinds[i] = CorruptKind::keep;
    }
    ++corrupted;
  }
  if (corrupted == 0)
    throw DegenerateBatchError("mlm_mask: no position was corrupted");
  return out;
}

RtdBatch rtd_corrupt(std::span<const Index> ids,
                     std::span<const Index> doc_lengths,
                     const EncoderModel& generator, const Tensor& gen_emb,
                     const SpecialIds& specials, const MaskPolicy& policy,
                     RngStream& rng, RngStream* dropout_rng,
                     Tensor* gen_logits_out) {
  const Index vocab = generator.spec.vocab;
  MaskedBatch masked = mlm_mask(ids, specials, vocab, policy, rng);

  Tensor logits;
  if (gen_logits_out) {
    Tensor h = forward(generator, masked.input_ids, doc_lengths,
                       /*train_mode=*/true, dropout_rng, &gen_emb);
    logits = tied_mlm_logits(h, gen_emb);
    *gen_logits_out = logits;
  } else {
    NoGradGuard ng;
    Tensor h = forward(generator, masked.input_ids, doc_lengths,
                       /*train_mode=*/false, nullptr, &gen_emb);
    logits = tied_mlm_logits(h, gen_emb);
  }

  RtdBatch out;
  out.corrupted_ids.assign(ids.begin(), ids.end());
  out.gen_input_ids = masked.input_ids;
  out.gen_labels = masked.labels;
  out.replaced.assign(ids.size(), 0);
  out.candidate.assign(ids.size(), 0);

  const auto lv = logits.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.candidate[i] = specials.is_special(ids[i]) ? 0 : 1;
    if (masked.kinds[i] == CorruptKind::none) continue;
    // Sample the replacement from the generator softmax at this position.
    const Index base = static_cast<Index>(i) * vocab;
    Scalar mx = lv[base];
    for (Index j = 1; j < vocab; ++j) mx = std::max(mx, lv[base + j]);
    Scalar z = 0.0;
    for (Index j = 0; j < vocab; ++j) z += std::exp(lv[base + j] - mx);
    Scalar u = rng.uniform() * z;
    Index sampled = vocab - 1;
    for (Index j = 0; j < vocab; ++j) {
      u -= std::exp(lv[base + j] - mx);
      if (u < 0) {
        sampled = j;
        break;
      }
    }
    out.corrupted_ids[i] = sampled;
  }
  // A position is replaced exactly when the corrupted id differs from the
  // truth, including the generator sampling the original token.
  for (std::size_t i = 0; i < ids.size(); ++i)
    out.replaced[i] = out.corrupted_ids[i] != ids[i] ? 1 : 0;
  return out;
}

RtdLosses rtd_losses(const Tensor& gen_logits, const Tensor& disc_logits,
                     const RtdBatch& batch, Scalar lambda) {
  if (lambda <= 0.0)
    throw ContractError("rtd_losses: lambda must be positive");
  RtdLosses out;
  out.gen_loss =
      cross_entropy(gen_logits, batch.gen_labels, batch.ignore_label);
  out.disc_loss = bce_with_logits(disc_logits, batch.replaced, batch.candidate);
  out.total = add(out.gen_loss, scale(out.disc_loss, lambda));
  return out;
}

Tensor GdesEmbeddings::effective_discriminator() const {
  return add(shared.detach(), delta);
}

GdesReport gdes_step_check(const GdesEmbeddings& emb, WhichLoss which) {
  auto max_abs = [](const Tensor& t) -> Scalar {
    if (!t.has_grad()) return 0.0;
    Scalar m = 0.0;
    for (Scalar v : t.grad()) m = std::max(m, std::abs(v));
    return m;
  };
  GdesReport rep;
  rep.which = which;
  rep.shared_grad_max_abs = max_abs(emb.shared);
  rep.delta_grad_max_abs = max_abs(emb.delta);
  if (which == WhichLoss::gen && rep.delta_grad_max_abs != 0.0)
    throw NumericError(
        "gdes_step_check: generator loss leaked gradient into the delta "
        "table (max |g| = " +
        std::to_string(rep.delta_grad_max_abs) + ")");
  if (which == WhichLoss::disc && rep.shared_grad_max_abs != 0.0)
    throw NumericError(
        "gdes_step_check: discriminator loss leaked gradient into the shared "
        "table (max |g| = " +
        std::to_string(rep.shared_grad_max_abs) + ")");
  return rep;
}

}  // namespace enclab
