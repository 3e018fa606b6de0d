#include "enclab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "enclab/errors.hpp"
#include "enclab/optimizer.hpp"

namespace enclab {

std::vector<TokenizedDoc> prepare_training_docs(
    const std::vector<DocumentRecord>& corpus, const Vocab& vocab,
    Index max_len, const std::map<std::string, int>& upsampling) {
  if (max_len < 3)
    throw ConfigError("prepare_training_docs: max_len must fit cls + sep");
  std::vector<TokenizedDoc> out;
  for (const DocumentRecord& rec : corpus) {
    std::vector<Index> body = tokenize(rec.text, vocab);
    // Truncate, never split.
    if (static_cast<Index>(body.size()) > max_len - 2)
      body.resize(static_cast<std::size_t>(max_len - 2));
    std::vector<Index> tokens;
    tokens.reserve(body.size() + 2);
    tokens.push_back(vocab.specials.cls);
    tokens.insert(tokens.end(), body.begin(), body.end());
    tokens.push_back(vocab.specials.sep);
    int reps = 1;
    auto it = upsampling.find(rec.source);
    if (it != upsampling.end()) {
      if (it->second < 1)
        throw ConfigError("upsampling factor must be >= 1 for source " +
                          rec.source);
      reps = it->second;
    }
    for (int r = 0; r < reps; ++r) {
      TokenizedDoc d;
      d.id = r == 0 ? rec.id : rec.id + "#" + std::to_string(r);
      d.tokens = tokens;
      out.push_back(std::move(d));
    }
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

std::vector<Scalar> grad_snapshot(const Tensor& t) {
  if (!t.has_grad()) return {};
  return {t.grad().begin(), t.grad().end()};
}

bool grad_equals(const Tensor& t, const std::vector<Scalar>& snap) {
  if (!t.has_grad()) return snap.empty();
  if (snap.empty()) {
    for (Scalar g : t.grad())
      if (g != 0.0) return false;
    return true;
  }
  const auto g = t.grad();
  if (g.size() != snap.size()) return false;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] != snap[i]) return false;
  return true;
}

/// All mutable training state for one run. Sub-models hold handles into
/// `trainables`, so the optimizer update is visible everywhere.
struct Core {
  EncoderSpec spec;
  ObjectiveConfig obj;
  TrainPlan plan;
  const Vocab* vocab = nullptr;
  std::string run_id;
  std::uint64_t seed = 0;

  std::vector<PackedBatch> packs;
  Index packs_per_step = 0;

  std::map<std::string, Tensor> trainables;
  AdamState adam;
  EncoderModel model;  // MLM
  EncoderModel gen, disc;  // RTD
  Tensor head_w, head_b;
  GdesEmbeddings gdes;

  Index tokens_seen = 0;
  std::uint64_t step = 0;
  Phase phase = Phase::wsd;

  std::int64_t cached_epoch = -1;
  std::vector<Index> epoch_order;

  Clock::time_point started = Clock::now();

  const PackedBatch& pick(std::uint64_t global_idx, std::uint64_t& epoch,
                          std::uint64_t& idx) {
    const auto n = static_cast<std::uint64_t>(packs.size());
    epoch = global_idx / n;
    idx = global_idx % n;
    if (static_cast<std::int64_t>(epoch) != cached_epoch) {
      epoch_order.resize(packs.size());
      std::iota(epoch_order.begin(), epoch_order.end(), Index{0});
      RngStream rng = derive_stream(seed, "order", epoch);
      for (std::size_t i = epoch_order.size(); i > 1; --i)
        std::swap(epoch_order[i - 1],
                  epoch_order[static_cast<std::size_t>(
                      rng.uniform_int(0, static_cast<Index>(i)))]);
      cached_epoch = static_cast<std::int64_t>(epoch);
    }
    return packs[static_cast<std::size_t>(epoch_order[idx])];
  }

  void adopt(const EncoderModel& m, const std::string& prefix) {
    for (const auto& [name, t] : m.params) trainables.emplace(prefix + name, t);
  }

  Scalar step_mlm(std::uint64_t g) {
    std::uint64_t epoch, idx;
    const PackedBatch& pb = pick(g, epoch, idx);
    RngStream rng_mask = derive_stream(seed, "mask", epoch, idx);
    RngStream rng_drop = derive_stream(seed, "drop", epoch, idx);
    MaskedBatch masked = mlm_mask(pb.ids, vocab->specials, spec.vocab,
                                  obj.mask, rng_mask);
    Tensor h = forward(model, masked.input_ids, pb.doc_lengths,
                       /*train_mode=*/true, &rng_drop);
    Tensor logits = tied_mlm_logits(h, model.param("emb.tok"));
    Tensor loss = cross_entropy(logits, masked.labels, masked.ignore_label);
    backward(scale(loss, 1.0 / static_cast<Scalar>(packs_per_step)));
    return loss.value();
  }

  Scalar step_rtd(std::uint64_t g) {
    std::uint64_t epoch, idx;
    const PackedBatch& pb = pick(g, epoch, idx);
    RngStream rng_rtd = derive_stream(seed, "rtd", epoch, idx);
    RngStream rng_gdrop = derive_stream(seed, "gdrop", epoch, idx);
    RngStream rng_ddrop = derive_stream(seed, "ddrop", epoch, idx);

    Tensor gen_logits;
    RtdBatch batch =
        rtd_corrupt(pb.ids, pb.doc_lengths, gen, gdes.shared, vocab->specials,
                    obj.mask, rng_rtd, &rng_gdrop, &gen_logits);
    Tensor gen_loss =
        cross_entropy(gen_logits, batch.gen_labels, batch.ignore_label);

    const Scalar inv = 1.0 / static_cast<Scalar>(packs_per_step);
    std::vector<Scalar> delta_before;
    if (obj.gdes_check) delta_before = grad_snapshot(gdes.delta);
    backward(scale(gen_loss, inv));
    if (obj.gdes_check && !grad_equals(gdes.delta, delta_before))
      throw NumericError(
          "gdes routing: generator loss moved the delta table at step " +
          std::to_string(step));

    Tensor eff = gdes.effective_discriminator();
    Tensor dh = forward(disc, batch.corrupted_ids, pb.doc_lengths,
                        /*train_mode=*/true, &rng_ddrop, &eff);
    Tensor dlogits = add_rowvec(matmul(dh, head_w), head_b);
    Tensor disc_loss =
        bce_with_logits(dlogits, batch.replaced, batch.candidate);

    std::vector<Scalar> shared_before;
    if (obj.gdes_check) shared_before = grad_snapshot(gdes.shared);
    backward(scale(disc_loss, obj.rtd_lambda * inv));
    if (obj.gdes_check && !grad_equals(gdes.shared, shared_before))
      throw NumericError(
          "gdes routing: discriminator loss moved the shared table at step " +
          std::to_string(step));

    return gen_loss.value() + obj.rtd_lambda * disc_loss.value();
  }

  Scalar train_step(Scalar lr) {
    for (auto& [name, t] : trainables) {
      t.ensure_grad();
      t.zero_grad();
    }
    Scalar loss_acc = 0.0;
    for (Index b = 0; b < packs_per_step; ++b) {
      const std::uint64_t g =
          step * static_cast<std::uint64_t>(packs_per_step) +
          static_cast<std::uint64_t>(b);
      loss_acc += (obj.kind == ObjectiveKind::mlm ? step_mlm(g) : step_rtd(g)) /
                  static_cast<Scalar>(packs_per_step);
    }
    if (!std::isfinite(loss_acc))
      throw NumericError("train: non-finite loss at step " +
                         std::to_string(step) + "; last checkpoint preserved");
    clip_global_norm(trainables, plan.clip_norm);
    adamw_step(trainables, adam, lr, plan);
    step += 1;
    tokens_seen += plan.batch_tokens;
    return loss_acc;
  }

  Checkpoint snapshot() const {
    Checkpoint c;
    c.spec = spec;
    c.objective = obj.kind;
    c.phase = phase;
    c.tokens_seen = tokens_seen;
    c.step = step;
    c.run_seed = seed;
    for (const auto& [name, t] : trainables) c.params.emplace(name, t.clone());
    c.adam.t = adam.t;
    for (const auto& [name, t] : adam.m) c.adam.m.emplace(name, t.clone());
    for (const auto& [name, t] : adam.v) c.adam.v.emplace(name, t.clone());
    return c;
  }

  void restore(const Checkpoint& c) {
    if (checkpoint_spec_hash(c.spec, c.objective) !=
        checkpoint_spec_hash(spec, obj.kind))
      throw DataError("restore: checkpoint spec hash " +
                      std::to_string(checkpoint_spec_hash(c.spec, c.objective)) +
                      " does not match run spec hash " +
                      std::to_string(checkpoint_spec_hash(spec, obj.kind)));
    for (auto& [name, t] : trainables) {
      auto it = c.params.find(name);
      if (it == c.params.end())
        throw DataError("restore: checkpoint missing parameter " + name);
      if (it->second.shape() != t.shape())
        throw DataError("restore: shape mismatch for " + name);
      std::copy(it->second.values().begin(), it->second.values().end(),
                t.values().begin());
    }
    adam = AdamState{};
    adam.t = c.adam.t;
    for (const auto& [name, t] : c.adam.m) adam.m.emplace(name, t.clone());
    for (const auto& [name, t] : c.adam.v) adam.v.emplace(name, t.clone());
    tokens_seen = c.tokens_seen;
    step = c.step;
    phase = c.phase;
    seed = c.run_seed;
  }
};

Core make_core(const EncoderSpec& spec, const ObjectiveConfig& obj,
               const TrainPlan& plan, const std::vector<TokenizedDoc>& docs,
               const Vocab& vocab, const std::string& run_id) {
  validate(spec);
  validate(plan);
  if (spec.vocab != vocab.size())
    throw ConfigError("train: spec vocab " + std::to_string(spec.vocab) +
                      " != vocabulary size " + std::to_string(vocab.size()));
  if (plan.max_len > spec.max_len)
    throw ConfigError("train: plan max_len exceeds model max_len");

  Core core;
  core.spec = spec;
  core.obj = obj;
  core.plan = plan;
  core.vocab = &vocab;
  core.run_id = run_id;
  core.seed = plan.seed;
  {
    RngStream rng = derive_stream(plan.seed, "pack");
    core.packs = pack(docs, plan.max_len, rng);
  }
  core.packs_per_step = plan.batch_tokens / plan.max_len;

  if (obj.kind == ObjectiveKind::mlm) {
    core.model = build(spec, derive_stream(plan.seed, "init-model").next_u64());
    core.adopt(core.model, "model.");
  } else {
    core.disc = build(spec, derive_stream(plan.seed, "init-disc").next_u64());
    EncoderSpec gen_spec = spec;
    gen_spec.layers =
        obj.gen_layers > 0 ? obj.gen_layers : std::max(1, spec.layers / 2);
    core.gen =
        build(gen_spec, derive_stream(plan.seed, "init-gen").next_u64());
    // GDES: the generator embedding is the shared table; the discriminator
    // slot becomes the zero-initialized delta table.
    Tensor& delta = core.disc.param("emb.tok");
    std::fill(delta.values().begin(), delta.values().end(), 0.0);
    core.gdes.shared = core.gen.param("emb.tok");
    core.gdes.delta = delta;
    RngStream hrng = derive_stream(plan.seed, "init-head");
    core.head_w = Tensor::zeros({spec.hidden, 1}, true);
    for (auto& v : core.head_w.values()) v = 0.02 * hrng.normal();
    core.head_b = Tensor::zeros({1}, true);
    core.adopt(core.gen, "gen.");
    core.adopt(core.disc, "disc.");
    core.trainables.emplace("head.w", core.head_w);
    core.trainables.emplace("head.b", core.head_b);
  }
  return core;
}

void run_phase(Core& core, Index n_steps,
               const std::function<Scalar(Index)>& lr_at,
               const MetricSink& metrics, const CheckpointSink& checkpoints,
               Index checkpoint_every) {
  for (Index s = 0; s < n_steps; ++s) {
    const Scalar lr = lr_at(core.tokens_seen);
    const Scalar loss = core.train_step(lr);
    if (metrics) {
      MetricRecord rec;
      rec.run_id = core.run_id;
      rec.step = core.step;
      rec.tokens = core.tokens_seen;
      rec.lr = lr;
      rec.loss = loss;
      rec.wallclock_s =
          std::chrono::duration<double>(Clock::now() - core.started).count();
      metrics(rec);
    }
    if (checkpoints && checkpoint_every > 0 &&
        core.tokens_seen % checkpoint_every == 0)
      checkpoints(core.snapshot());
  }
}

}  // namespace

Checkpoint train(const EncoderSpec& spec, const ObjectiveConfig& obj,
                 const TrainPlan& plan, const std::vector<TokenizedDoc>& docs,
                 const Vocab& vocab, const std::string& run_id,
                 const MetricSink& metrics, const CheckpointSink& checkpoints,
                 const Checkpoint* resume) {
  Core core = make_core(spec, obj, plan, docs, vocab, run_id);
  if (resume) {
    if (resume->phase != Phase::wsd)
      throw ContractError("train: cannot resume from a cooled checkpoint");
    core.restore(*resume);
    if (core.tokens_seen % plan.batch_tokens != 0)
      throw DataError("train: checkpoint token count is not batch-aligned");
  }
  if (core.tokens_seen > plan.total_tokens)
    throw ConfigError("train: checkpoint already past total_tokens");
  const Index remaining =
      (plan.total_tokens - core.tokens_seen) / plan.batch_tokens;
  run_phase(
      core, remaining, [&plan](Index tokens) { return wsd_lr(tokens, plan); },
      metrics, checkpoints, plan.checkpoint_every_tokens);
  return core.snapshot();
}

Checkpoint cooldown(const Checkpoint& ckpt, Index cooldown_tokens,
                    const ObjectiveConfig& obj, const TrainPlan& plan,
                    const std::vector<TokenizedDoc>& docs, const Vocab& vocab,
                    const std::string& run_id, const MetricSink& metrics) {
  if (ckpt.phase != Phase::wsd)
    throw ContractError("cooldown: checkpoint is already cooled");
  if (cooldown_tokens < 1 || cooldown_tokens % plan.batch_tokens != 0)
    throw ConfigError(
        "cooldown: cooldown_tokens must be a positive multiple of "
        "batch_tokens");
  Core core = make_core(ckpt.spec, obj, plan, docs, vocab, run_id);
  core.restore(ckpt);
  const Index branch_tokens = core.tokens_seen;
  const Scalar lr0 = wsd_lr(branch_tokens, plan);
  run_phase(
      core, cooldown_tokens / plan.batch_tokens,
      [&](Index tokens) {
        return cooldown_lr(tokens - branch_tokens, lr0, cooldown_tokens);
      },
      metrics, nullptr, 0);
  core.phase = Phase::cooled;
  return core.snapshot();
}

Checkpoint extend_context(const Checkpoint& ckpt, const ExtendPlan& extend,
                          const ObjectiveConfig& obj, const TrainPlan& plan,
                          const std::vector<TokenizedDoc>& long_docs,
                          const Vocab& vocab, const std::string& run_id,
                          const MetricSink& metrics) {
  if (ckpt.spec.family == Family::deberta)
    throw ContractError(
        "extend_context: deberta family is unsupported at extended length");
  if (extend.new_max_len <= ckpt.spec.max_len)
    throw ConfigError("extend_context: new_max_len must exceed current");
  if (extend.batch_tokens < extend.new_max_len ||
      extend.batch_tokens % extend.new_max_len != 0)
    throw ConfigError(
        "extend_context: batch_tokens must be a positive multiple of "
        "new_max_len");
  if (extend.phase1_tokens % extend.batch_tokens != 0 ||
      extend.phase2_tokens % extend.batch_tokens != 0 ||
      extend.phase2_tokens < 1)
    throw ConfigError(
        "extend_context: phase tokens must be multiples of batch_tokens");
  if (extend.decay != DecayKind::linear &&
      extend.decay != DecayKind::one_sqrt_delayed)
    throw ConfigError("extend_context: decay must be linear or one_sqrt");

  // The extended run is a fresh plan over the long corpus.
  EncoderSpec new_spec = ckpt.spec;
  new_spec.max_len = extend.new_max_len;
  if (new_spec.family == Family::modern) {
    if (extend.rope_theta_global)
      new_spec.rope_theta_global = *extend.rope_theta_global;
    if (extend.rope_theta_local)
      new_spec.rope_theta_local = *extend.rope_theta_local;
  }
  TrainPlan ext_plan = plan;
  ext_plan.max_len = extend.new_max_len;
  ext_plan.batch_tokens = extend.batch_tokens;
  ext_plan.total_tokens = extend.phase1_tokens + extend.phase2_tokens;
  ext_plan.warmup_tokens = 0;
  ext_plan.peak_lr = extend.lr;
  ext_plan.checkpoint_every_tokens = 0;
  ext_plan.cooldown_tokens = 0;

  Core core = make_core(new_spec, obj, ext_plan, long_docs, vocab, run_id);

  // Restore against the old spec: copy parameters by name, resizing learned
  // position tables for the new length.
  for (auto& [name, t] : core.trainables) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end())
      throw DataError("extend_context: checkpoint missing parameter " + name);
    if (it->second.shape() == t.shape()) {
      std::copy(it->second.values().begin(), it->second.values().end(),
                t.values().begin());
      continue;
    }
    const bool is_pos = name.size() > 7 &&
                        name.compare(name.size() - 7, 7, "emb.pos") == 0;
    if (!is_pos)
      throw DataError("extend_context: shape mismatch for " + name);
    // Keep the learned prefix, re-initialize the new rows.
    RngStream rng = derive_stream(ckpt.run_seed, "extend-pos");
    const Index d = t.dim(1);
    auto dst = t.values();
    const auto src = it->second.values();
    const Index old_rows = it->second.dim(0);
    for (Index r = 0; r < t.dim(0); ++r)
      for (Index c = 0; c < d; ++c)
        dst[r * d + c] =
            r < old_rows ? src[r * d + c] : 0.02 * rng.normal();
  }
  core.adam.t = ckpt.adam.t;
  for (const auto& [name, t] : ckpt.adam.m) {
    auto pit = core.trainables.find(name);
    if (pit != core.trainables.end() && pit->second.shape() == t.shape()) {
      core.adam.m.emplace(name, t.clone());
      core.adam.v.emplace(name, ckpt.adam.v.at(name).clone());
    }
  }
  core.tokens_seen = ckpt.tokens_seen;
  core.step = ckpt.step;
  core.seed = ckpt.run_seed;

  const Index start_tokens = core.tokens_seen;
  run_phase(
      core, extend.phase1_tokens / extend.batch_tokens,
      [&extend](Index) { return extend.lr; }, metrics, nullptr, 0);
  const Index phase2_start = start_tokens + extend.phase1_tokens;
  run_phase(
      core, extend.phase2_tokens / extend.batch_tokens,
      [&](Index tokens) {
        const Index u = tokens - phase2_start;
        if (extend.decay == DecayKind::linear)
          return cooldown_lr(u, extend.lr, extend.phase2_tokens);
        return one_sqrt_lr(u, extend.decay_delay_tokens, extend.phase2_tokens,
                           extend.lr);
      },
      metrics, nullptr, 0);
  core.phase = Phase::cooled;
  return core.snapshot();
}

EncoderModel eval_encoder(const Checkpoint& ckpt) {
  EncoderModel m = build(ckpt.spec, 0);
  const std::string prefix =
      ckpt.objective == ObjectiveKind::mlm ? "model." : "disc.";
  for (auto& [name, t] : m.params) {
    auto it = ckpt.params.find(prefix + name);
    if (it == ckpt.params.end())
      throw DataError("eval_encoder: checkpoint missing " + prefix + name);
    if (it->second.shape() != t.shape())
      throw DataError("eval_encoder: shape mismatch for " + prefix + name);
    std::copy(it->second.values().begin(), it->second.values().end(),
              t.values().begin());
  }
  if (ckpt.objective == ObjectiveKind::rtd) {
    // Materialize the effective discriminator embedding: shared + delta.
    const Tensor& shared = ckpt.params.at("gen.emb.tok");
    Tensor& emb = m.param("emb.tok");
    auto ev = emb.values();
    const auto sv = shared.values();
    for (std::size_t i = 0; i < ev.size(); ++i) ev[i] += sv[i];
  }
  return m;
}

}  // namespace enclab
