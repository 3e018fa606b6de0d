#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>

#include "enclab/checkpoint.hpp"
#include "enclab/corpus.hpp"
#include "enclab/objectives.hpp"
#include "enclab/packing.hpp"
#include "enclab/schedule.hpp"

namespace enclab {

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::mlm;
  MaskPolicy mask;
  Scalar rtd_lambda = 50.0;
  int gen_layers = 0;      // 0 = half of the discriminator's layers
  bool gdes_check = true;  // bit-exact routing enforcement on every step
};

struct MetricRecord {
  std::string run_id;
  std::uint64_t step = 0;
  Index tokens = 0;
  Scalar lr = 0;
  Scalar loss = 0;
  double wallclock_s = 0;
};

using MetricSink = std::function<void(const MetricRecord&)>;
using CheckpointSink = std::function<void(const Checkpoint&)>;

/// Wraps each document in cls/sep, truncates to max_len (documents are never
/// split), and repeats records per the source upsampling factors.
std::vector<TokenizedDoc> prepare_training_docs(
    const std::vector<DocumentRecord>& corpus, const Vocab& vocab,
    Index max_len, const std::map<std::string, int>& upsampling = {});

/// Runs the main warmup-stable phase for plan.total_tokens, emitting a
/// checkpoint every checkpoint_every_tokens and a metric record every step.
/// Deterministic under plan.seed; the batch at step s is a pure function of
/// (corpus, seed, s), so resuming from a checkpoint reproduces the
/// uninterrupted loss trace bit-exactly.
Checkpoint train(const EncoderSpec& spec, const ObjectiveConfig& obj,
                 const TrainPlan& plan, const std::vector<TokenizedDoc>& docs,
                 const Vocab& vocab, const std::string& run_id,
                 const MetricSink& metrics, const CheckpointSink& checkpoints,
                 const Checkpoint* resume = nullptr);

/// Branches a wsd checkpoint and decays the learning rate linearly from its
/// current schedule value to zero over cooldown_tokens. The input checkpoint
/// is untouched; the result is tagged cooled.
Checkpoint cooldown(const Checkpoint& ckpt, Index cooldown_tokens,
                    const ObjectiveConfig& obj, const TrainPlan& plan,
                    const std::vector<TokenizedDoc>& docs, const Vocab& vocab,
                    const std::string& run_id, const MetricSink& metrics);

struct ExtendPlan {
  Index new_max_len = 0;
  Index batch_tokens = 0;    // multiple of new_max_len
  Index phase1_tokens = 0;   // constant lr
  Index phase2_tokens = 0;   // decay to zero
  Scalar lr = 3e-4;
  DecayKind decay = DecayKind::linear;  // linear or one_sqrt_delayed
  Index decay_delay_tokens = 0;
  std::optional<Scalar> rope_theta_global;
  std::optional<Scalar> rope_theta_local;
};

/// Context extension: constant-lr training on the long corpus, then a decay
/// phase to zero. Modern models extrapolate through RoPE (thetas optionally
/// raised); roberta models get their position table re-initialized at the
/// new length; the deberta family is refused.
Checkpoint extend_context(const Checkpoint& ckpt, const ExtendPlan& extend,
                          const ObjectiveConfig& obj, const TrainPlan& plan,
                          const std::vector<TokenizedDoc>& long_docs,
                          const Vocab& vocab, const std::string& run_id,
                          const MetricSink& metrics);

/// Reconstructs the evaluation-facing encoder: the model itself for MLM
/// runs, the discriminator with the materialized shared+delta embedding for
/// RTD runs.
EncoderModel eval_encoder(const Checkpoint& ckpt);

}  // namespace enclab
