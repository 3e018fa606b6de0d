#pragma once

#include <span>
#include <vector>

#include "enclab/corpus.hpp"
#include "enclab/model.hpp"
#include "enclab/tensor.hpp"

namespace enclab {

constexpr Index kIgnoreLabel = -100;

struct MaskPolicy {
  Scalar rate = 0.30;
  Scalar mask_p = 0.8;
  Scalar random_p = 0.1;
  Scalar keep_p = 0.1;
};

enum class CorruptKind : uint8_t { none, mask_tok, random_tok, keep };

struct MaskedBatch {
  std::vector<Index> input_ids;        // post-corruption
  std::vector<Index> labels;           // original id where corrupted, else ignore
  std::vector<CorruptKind> kinds;      // per position
  Index ignore_label = kIgnoreLabel;
};

/// Independently corrupts each non-special position with probability
/// policy.rate: mask / random / keep split per policy. Fresh randomness on
/// every call (dynamic masking). Throws DegenerateBatchError when nothing
/// was corrupted (all-special sequence or a rate-zero draw).
MaskedBatch mlm_mask(std::span<const Index> ids, const SpecialIds& specials,
                     Index vocab_size, const MaskPolicy& policy,
                     RngStream& rng);

struct RtdBatch {
  std::vector<Index> corrupted_ids;   // discriminator input
  std::vector<uint8_t> replaced;      // 1 where corrupted id != original id
  std::vector<uint8_t> candidate;     // 1 at non-special positions
  std::vector<Index> gen_input_ids;   // generator's corrupted view
  std::vector<Index> gen_labels;      // original id at selected positions
  Index ignore_label = kIgnoreLabel;
};

/// Selects positions as mlm_mask does, runs the generator on the corrupted
/// view, samples replacements from the generator softmax, and labels each
/// position replaced/original by comparing against the truth. When
/// gen_logits_out is non-null the generator runs in train mode and its
/// logits (with tape) are stored there for the generator loss.
RtdBatch rtd_corrupt(std::span<const Index> ids,
                     std::span<const Index> doc_lengths,
                     const EncoderModel& generator, const Tensor& gen_emb,
                     const SpecialIds& specials, const MaskPolicy& policy,
                     RngStream& rng, RngStream* dropout_rng = nullptr,
                     Tensor* gen_logits_out = nullptr);

struct RtdLosses {
  Tensor gen_loss;
  Tensor disc_loss;
  Tensor total;  // gen_loss + lambda * disc_loss
};

RtdLosses rtd_losses(const Tensor& gen_logits, const Tensor& disc_logits,
                     const RtdBatch& batch, Scalar lambda);

/// Generator and discriminator share one embedding table; the discriminator
/// sees stop_gradient(shared) + delta, so its loss can never update the
/// shared table.
struct GdesEmbeddings {
  Tensor shared;  // [V x d], generator embedding
  Tensor delta;   // [V x d], discriminator-only additive table

  Tensor effective_discriminator() const;
};

enum class WhichLoss { gen, disc };

struct GdesReport {
  WhichLoss which;
  Scalar shared_grad_max_abs = 0.0;
  Scalar delta_grad_max_abs = 0.0;
};

/// Validates gradient routing after a single-loss backward pass: a gen loss
/// must leave delta untouched, a disc loss must leave shared untouched.
/// Throws NumericError naming the leaking table on violation.
GdesReport gdes_step_check(const GdesEmbeddings& emb, WhichLoss which);

}  // namespace enclab
