#include "enclab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

#include "enclab/errors.hpp"
#include "enclab/synth.hpp"
#include "enclab/util.hpp"

namespace enclab {

const char* kCodeVersion = "encoderlab 1.0.0";

namespace {

using Clock = std::chrono::steady_clock;

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object())
    throw ConfigError("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key \"" + key + "\" in " + where);
}

ObjectiveConfig objective_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"kind", "mask_rate", "mask_p", "random_p", "keep_p",
              "rtd_lambda", "gen_layers", "gdes_check"},
             "objective");
  ObjectiveConfig o;
  o.kind = objective_from_name(j.value("kind", "mlm"));
  o.mask.rate = j.value("mask_rate", 0.30);
  o.mask.mask_p = j.value("mask_p", 0.8);
  o.mask.random_p = j.value("random_p", 0.1);
  o.mask.keep_p = j.value("keep_p", 0.1);
  o.rtd_lambda = j.value("rtd_lambda", 50.0);
  o.gen_layers = j.value("gen_layers", 0);
  o.gdes_check = j.value("gdes_check", true);
  return o;
}

nlohmann::json objective_to_json(const ObjectiveConfig& o) {
  return {{"kind", objective_name(o.kind)},   {"mask_rate", o.mask.rate},
          {"mask_p", o.mask.mask_p},          {"random_p", o.mask.random_p},
          {"keep_p", o.mask.keep_p},          {"rtd_lambda", o.rtd_lambda},
          {"gen_layers", o.gen_layers},       {"gdes_check", o.gdes_check}};
}

ExtendPlan extend_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"new_max_len", "batch_tokens", "phase1_tokens", "phase2_tokens",
              "lr", "decay", "decay_delay_tokens", "rope_theta_global",
              "rope_theta_local"},
             "extend");
  ExtendPlan e;
  e.new_max_len = j.at("new_max_len").get<Index>();
  e.batch_tokens = j.at("batch_tokens").get<Index>();
  e.phase1_tokens = j.at("phase1_tokens").get<Index>();
  e.phase2_tokens = j.at("phase2_tokens").get<Index>();
  e.lr = j.value("lr", 3e-4);
  e.decay = decay_from_name(j.value("decay", "linear"));
  e.decay_delay_tokens = j.value("decay_delay_tokens", Index{0});
  if (j.contains("rope_theta_global"))
    e.rope_theta_global = j["rope_theta_global"].get<Scalar>();
  if (j.contains("rope_theta_local"))
    e.rope_theta_local = j["rope_theta_local"].get<Scalar>();
  return e;
}

nlohmann::json extend_to_json(const ExtendPlan& e) {
  nlohmann::json j{{"new_max_len", e.new_max_len},
                   {"batch_tokens", e.batch_tokens},
                   {"phase1_tokens", e.phase1_tokens},
                   {"phase2_tokens", e.phase2_tokens},
                   {"lr", e.lr},
                   {"decay", decay_name(e.decay)},
                   {"decay_delay_tokens", e.decay_delay_tokens}};
  if (e.rope_theta_global) j["rope_theta_global"] = *e.rope_theta_global;
  if (e.rope_theta_local) j["rope_theta_local"] = *e.rope_theta_local;
  return j;
}

std::string checkpoint_name(Index tokens) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "ckpt-%013lld.bin",
                static_cast<long long>(tokens));
  return buf;
}

}  // namespace

RunConfig parse_config(const nlohmann::json& j) {
  check_keys(j,
             {"experiment", "seed", "out_dir", "model", "plan", "objective",
              "corpus", "probes", "extend"},
             "config");
  RunConfig c;
  c.experiment = j.at("experiment").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.out_dir = j.at("out_dir").get<std::string>();

  check_keys(j.at("model"),
             {"family", "vocab", "layers", "hidden", "heads", "intermediate",
              "glu", "pre_norm", "bias", "global_every", "half_window",
              "rope_theta_global", "rope_theta_local", "rel_k", "max_len",
              "norm_eps", "dropout_attn_out", "dropout_other"},
             "model");
  c.spec = spec_from_json(j.at("model"));

  check_keys(j.at("plan"),
             {"total_tokens", "batch_tokens", "max_len", "peak_lr",
              "warmup_tokens", "decay", "decay_delay_tokens", "weight_decay",
              "beta1", "beta2", "adam_eps", "checkpoint_every_tokens",
              "cooldown_tokens", "clip_norm"},
             "plan");
  c.plan = plan_from_json(j.at("plan"));
  c.plan.seed = c.seed;

  c.objective = j.contains("objective") ? objective_from_json(j.at("objective"))
                                        : ObjectiveConfig{};

  {
    const auto& cj = j.at("corpus");
    check_keys(cj,
               {"paths", "upsampling", "vocab_size", "long_context"},
               "corpus");
    c.corpus.paths = cj.at("paths").get<std::vector<std::string>>();
    if (cj.contains("upsampling"))
      c.corpus.upsampling =
          cj["upsampling"].get<std::map<std::string, int>>();
    c.corpus.vocab_size = cj.value("vocab_size", Index{512});
    if (cj.contains("long_context")) {
      check_keys(cj["long_context"], {"threshold_tokens", "short_keep_prob"},
                 "corpus.long_context");
      c.corpus.apply_long_context = true;
      c.corpus.long_threshold_tokens =
          cj["long_context"].at("threshold_tokens").get<Index>();
      c.corpus.short_keep_prob =
          cj["long_context"].value("short_keep_prob", 0.1);
    }
  }

  if (j.contains("probes")) {
    const auto& pj = j.at("probes");
    check_keys(pj,
               {"suite", "seeds", "epochs", "lrs", "max_items",
                "retrieval_docs", "retrieval_queries"},
               "probes");
    if (pj.contains("suite"))
      c.probes.suite = pj["suite"].get<std::vector<std::string>>();
    c.probes.seeds = pj.value("seeds", 3);
    c.probes.epochs = pj.value("epochs", 3);
    if (pj.contains("lrs"))
      c.probes.lrs = pj["lrs"].get<std::vector<Scalar>>();
    c.probes.max_items = pj.value("max_items", Index{200});
    c.probes.retrieval_docs = pj.value("retrieval_docs", Index{100});
    c.probes.retrieval_queries = pj.value("retrieval_queries", Index{50});
  }

  if (j.contains("extend")) c.extend = extend_from_json(j.at("extend"));

  // Fail fast on every nested invariant before any work starts.
  validate(c.spec);
  validate(c.plan);
  if (c.spec.vocab != c.corpus.vocab_size)
    throw ConfigError("config: model.vocab must equal corpus.vocab_size");
  if (c.plan.max_len > c.spec.max_len)
    throw ConfigError("config: plan.max_len exceeds model.max_len");
  if (c.corpus.paths.empty())
    throw ConfigError("config: corpus.paths is empty");
  if (c.probes.seeds < 1) throw ConfigError("config: probes.seeds must be >= 1");
  for (const std::string& task : c.probes.suite) {
    static const std::set<std::string> known = {
        "token_cls", "span_qa", "seq_cls", "pair_cls", "nli", "retrieval"};
    if (!known.count(task))
      throw ConfigError("config: unknown probe task \"" + task + "\"");
  }
  if (c.experiment.empty()) throw ConfigError("config: experiment name empty");
  if (c.out_dir.empty()) throw ConfigError("config: out_dir empty");
  return c;
}

RunConfig load_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: cannot parse " + path + ": " + e.what());
  }
  return parse_config(j);
}

nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json plan_json = plan_to_json(c.plan);
  plan_json.erase("seed");  // the root seed is authoritative
  nlohmann::json j{{"experiment", c.experiment},
                   {"seed", c.seed},
                   {"out_dir", c.out_dir},
                   {"model", spec_to_json(c.spec)},
                   {"plan", plan_json},
                   {"objective", objective_to_json(c.objective)},
                   {"corpus",
                    {{"paths", c.corpus.paths},
                     {"upsampling", c.corpus.upsampling},
                     {"vocab_size", c.corpus.vocab_size}}},
                   {"probes",
                    {{"suite", c.probes.suite},
                     {"seeds", c.probes.seeds},
                     {"epochs", c.probes.epochs},
                     {"lrs", c.probes.lrs},
                     {"max_items", c.probes.max_items},
                     {"retrieval_docs", c.probes.retrieval_docs},
                     {"retrieval_queries", c.probes.retrieval_queries}}}};
  if (c.corpus.apply_long_context)
    j["corpus"]["long_context"] = {
        {"threshold_tokens", c.corpus.long_threshold_tokens},
        {"short_keep_prob", c.corpus.short_keep_prob}};
  if (c.extend) j["extend"] = extend_to_json(*c.extend);
  return j;
}

std::uint64_t config_hash(const RunConfig& c) {
  return fnv1a64(config_to_json(c).dump());
}

std::uint64_t corpus_artifact_hash(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const std::string& path : c.corpus.paths) {
    const std::string content = read_file(path);
    h = fnv1a64(content.data(), content.size(), h);
  }
  return h;
}

nlohmann::json manifest_to_json(const ExperimentManifest& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const StageRecord& s : m.stages) {
    nlohmann::json arts = nlohmann::json::array();
    for (const auto& [path, hash] : s.artifacts)
      arts.push_back({{"path", path}, {"hash", hash}});
    stages.push_back({{"name", s.name},
                      {"artifacts", arts},
                      {"wallclock_s", s.wallclock_s}});
  }
  return {{"config_hash", m.config_hash},
          {"code_version", m.code_version},
          {"stages", stages}};
}

ExperimentManifest manifest_from_json(const nlohmann::json& j) {
  ExperimentManifest m;
  m.config_hash = j.at("config_hash").get<std::uint64_t>();
  m.code_version = j.at("code_version").get<std::string>();
  for (const auto& sj : j.at("stages")) {
    StageRecord s;
    s.name = sj.at("name").get<std::string>();
    for (const auto& aj : sj.at("artifacts"))
      s.artifacts.emplace_back(aj.at("path").get<std::string>(),
                               aj.at("hash").get<std::uint64_t>());
    s.wallclock_s = sj.value("wallclock_s", 0.0);
    m.stages.push_back(std::move(s));
  }
  return m;
}

void verify_manifest(const ExperimentManifest& m) {
  for (const StageRecord& s : m.stages)
    for (const auto& [path, hash] : s.artifacts) {
      if (!file_exists(path))
        throw DataError("manifest: missing artifact " + path);
      const std::uint64_t actual = file_fnv(path);
      if (actual != hash)
        throw DataError("manifest: artifact " + path + " hash " +
                        std::to_string(actual) + " != recorded " +
                        std::to_string(hash));
    }
}

nlohmann::json FilterReport::to_json() const {
  return {{"ingested", ingested},
          {"dedup_removed", dedup_removed},
          {"rule_discarded", rule_discarded},
          {"curate_dropped", curate_dropped},
          {"quarantined", quarantined},
          {"selected", selected},
          {"discarded", discarded()}};
}

namespace {

class StageWriter {
 public:
  StageWriter(const RunConfig& config, const std::string& stage)
      : config_(config), started_(Clock::now()) {
    stage_.name = stage;
    manifest_path_ = config.out_dir + "/manifest.json";
    if (file_exists(manifest_path_)) {
      manifest_ =
          manifest_from_json(nlohmann::json::parse(read_file(manifest_path_)));
      if (manifest_.config_hash != config_hash(config))
        throw ConfigError("manifest: output directory " + config.out_dir +
                          " belongs to a different config (hash " +
                          std::to_string(manifest_.config_hash) + " vs " +
                          std::to_string(config_hash(config)) + ")");
    } else {
      manifest_.config_hash = config_hash(config);
      manifest_.code_version = kCodeVersion;
    }
  }

  void artifact(const std::string& path) {
    stage_.artifacts.emplace_back(path, file_fnv(path));
  }

  void commit() {
    stage_.wallclock_s =
        std::chrono::duration<double>(Clock::now() - started_).count();
    manifest_.stages.push_back(stage_);
    write_file(manifest_path_,
               manifest_to_json(manifest_).dump(2) + "\n");
  }

 private:
  const RunConfig& config_;
  Clock::time_point started_;
  StageRecord stage_;
  ExperimentManifest manifest_;
  std::string manifest_path_;
};

void write_config_copy(const RunConfig& config) {
  write_file(config.out_dir + "/config.json",
             config_to_json(config).dump(2) + "\n");
}

std::vector<DocumentRecord> read_input_corpus(const RunConfig& config) {
  std::vector<DocumentRecord> docs;
  for (const std::string& path : config.corpus.paths) {
    std::vector<DocumentRecord> part = read_corpus_jsonl(path);
    docs.insert(docs.end(), std::make_move_iterator(part.begin()),
                std::make_move_iterator(part.end()));
  }
  return docs;
}

Index word_count(const std::string& text) {
  Index n = 0;
  bool in_word = false;
  for (unsigned char ch : text) {
    const bool space = std::isspace(ch) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

struct MetricFile {
  std::ofstream out;
  explicit MetricFile(const std::string& path) : out(path, std::ios::app) {
    if (!out) throw DataError("cannot open metrics file: " + path);
  }
  void operator()(const MetricRecord& r) {
    out << nlohmann::json{{"run_id", r.run_id},
                          {"step", r.step},
                          {"tokens", r.tokens},
                          {"lr", r.lr},
                          {"loss", r.loss},
                          {"wallclock_s", r.wallclock_s}}
               .dump()
        << "\n";
  }
};

}  // namespace

FilterReport cmd_filter(const RunConfig& config) {
  ensure_dir(config.out_dir);
  DirLock lock(config.out_dir);
  StageWriter stage(config, "filter");
  write_config_copy(config);

  std::vector<DocumentRecord> docs = read_input_corpus(config);
  FilterReport report;
  report.ingested = static_cast<Index>(docs.size());
  for (DocumentRecord& rec : docs) rec.token_count = word_count(rec.text);

  DedupResult dd = dedup(docs);
  report.dedup_removed = static_cast<Index>(dd.removed_ids.size());

  std::vector<DocumentRecord> kept;
  for (const DocumentRecord& rec : dd.docs) {
    switch (select(rec)) {
      case SelectDecision::keep: kept.push_back(rec); break;
      case SelectDecision::discard: ++report.rule_discarded; break;
      case SelectDecision::quarantine: ++report.quarantined; break;
    }
  }

  if (config.corpus.apply_long_context) {
    RngStream rng = derive_stream(config.seed, "curate");
    const std::size_t before = kept.size();
    kept = curate_long_context(kept, config.corpus.long_threshold_tokens,
                               config.corpus.short_keep_prob, rng);
    report.curate_dropped = static_cast<Index>(before - kept.size());
  }
  report.selected = static_cast<Index>(kept.size());

  const std::string out_path = config.out_dir + "/filtered.jsonl";
  write_corpus_jsonl(out_path, kept);
  write_file(config.out_dir + "/filter_report.json",
             report.to_json().dump(2) + "\n");
  stage.artifact(out_path);
  stage.artifact(config.out_dir + "/filter_report.json");
  stage.commit();
  return report;
}

Checkpoint cmd_pretrain(const RunConfig& config, bool resume) {
  ensure_dir(config.out_dir);
  DirLock lock(config.out_dir);
  StageWriter stage(config, resume ? "pretrain-resume" : "pretrain");
  write_config_copy(config);
  const std::string ckpt_dir = config.out_dir + "/checkpoints";
  ensure_dir(ckpt_dir);

  std::vector<DocumentRecord> corpus = read_input_corpus(config);
  Vocab vocab = build_vocab(corpus, config.corpus.vocab_size);
  std::vector<TokenizedDoc> docs = prepare_training_docs(
      corpus, vocab, config.plan.max_len, config.corpus.upsampling);

  MetricFile metrics(config.out_dir + "/metrics.jsonl");
  std::vector<std::string> saved;
  auto on_checkpoint = [&ckpt_dir, &saved](const Checkpoint& c) {
    const std::string path = ckpt_dir + "/" + checkpoint_name(c.tokens_seen);
    save_checkpoint(c, path);
    saved.push_back(path);
  };

  Checkpoint resumed;
  const Checkpoint* resume_ptr = nullptr;
  if (resume) {
    const auto files = list_files(ckpt_dir, ".bin");
    if (files.empty())
      throw DataError("pretrain --resume: no checkpoints in " + ckpt_dir);
    resumed = load_checkpoint(
        files.back(), checkpoint_spec_hash(config.spec, config.objective.kind));
    resume_ptr = &resumed;
  }

  Checkpoint final = train(config.spec, config.objective, config.plan, docs,
                           vocab, config.experiment, std::ref(metrics),
                           on_checkpoint, resume_ptr);
  const std::string final_path = config.out_dir + "/final.bin";
  save_checkpoint(final, final_path);
  stage.artifact(final_path);
  for (const std::string& p : saved) stage.artifact(p);
  stage.commit();
  return final;
}

std::vector<std::string> cmd_cooldown(const RunConfig& config) {
  ensure_dir(config.out_dir);
  DirLock lock(config.out_dir);
  StageWriter stage(config, "cooldown");
  const std::string ckpt_dir = config.out_dir + "/checkpoints";
  const std::string cooled_dir = config.out_dir + "/cooled";
  ensure_dir(cooled_dir);
  if (config.plan.cooldown_tokens < 1)
    throw ConfigError("cooldown: plan.cooldown_tokens must be positive");

  std::vector<DocumentRecord> corpus = read_input_corpus(config);
  Vocab vocab = build_vocab(corpus, config.corpus.vocab_size);
  std::vector<TokenizedDoc> docs = prepare_training_docs(
      corpus, vocab, config.plan.max_len, config.corpus.upsampling);

  const auto files = list_files(ckpt_dir, ".bin");
  if (files.empty())
    throw DataError("cooldown: no checkpoints in " + ckpt_dir);

  MetricFile metrics(config.out_dir + "/metrics_cooldown.jsonl");
  std::vector<std::string> cooled_paths;
  for (const std::string& path : files) {
    Checkpoint ckpt = load_checkpoint(
        path, checkpoint_spec_hash(config.spec, config.objective.kind));
    Checkpoint cooled = cooldown(ckpt, config.plan.cooldown_tokens,
                                 config.objective, config.plan, docs, vocab,
                                 config.experiment + "-cooldown",
                                 std::ref(metrics));
    char buf[48];
    std::snprintf(buf, sizeof(buf), "cooled-%013lld.bin",
                  static_cast<long long>(ckpt.tokens_seen));
    const std::string out_path = cooled_dir + "/" + buf;
    save_checkpoint(cooled, out_path);
    cooled_paths.push_back(out_path);
    stage.artifact(out_path);
  }
  stage.commit();
  return cooled_paths;
}

Checkpoint cmd_extend(const RunConfig& config) {
  if (!config.extend)
    throw ConfigError("extend: config has no extend section");
  ensure_dir(config.out_dir);
  DirLock lock(config.out_dir);
  StageWriter stage(config, "extend");
  const std::string final_path = config.out_dir + "/final.bin";
  if (!file_exists(final_path))
    throw DataError("extend: missing " + final_path + "; run pretrain first");

  std::vector<DocumentRecord> corpus = read_input_corpus(config);
  Vocab vocab = build_vocab(corpus, config.corpus.vocab_size);

  // Long-context curation per the configured threshold and retention.
  std::vector<DocumentRecord> long_corpus;
  if (config.corpus.apply_long_context) {
    for (DocumentRecord& rec : corpus)
      if (rec.token_count == 0) rec.token_count = word_count(rec.text);
    RngStream rng = derive_stream(config.seed, "curate-extend");
    long_corpus =
        curate_long_context(corpus, config.corpus.long_threshold_tokens,
                            config.corpus.short_keep_prob, rng);
  } else {
    long_corpus = corpus;
  }
  std::vector<TokenizedDoc> docs = prepare_training_docs(
      long_corpus, vocab, config.extend->new_max_len, config.corpus.upsampling);

  Checkpoint ckpt = load_checkpoint(
      final_path, checkpoint_spec_hash(config.spec, config.objective.kind));
  MetricFile metrics(config.out_dir + "/metrics_extend.jsonl");
  Checkpoint extended =
      extend_context(ckpt, *config.extend, config.objective, config.plan, docs,
                     vocab, config.experiment + "-extend", std::ref(metrics));
  const std::string out_path = config.out_dir + "/extended.bin";
  save_checkpoint(extended, out_path);
  stage.artifact(out_path);
  stage.commit();
  return extended;
}

namespace {

std::vector<ProbeResult> run_probe_suite(
    const EncoderModel& model, Index tokens, const RunConfig& config,
    const TokenClsSet& token_set, const SpanQaSet& qa_set,
    const SeqClsSet& seq_set, const SeqClsSet& pair_set,
    const SeqClsSet& nli_set, const RetrievalSet& retrieval_set) {
  ProbeRecipe recipe;
  recipe.epochs = config.probes.epochs;
  recipe.lrs = config.probes.lrs;
  recipe.max_items = static_cast<std::size_t>(config.probes.max_items);

  std::vector<ProbeResult> out;
  for (const std::string& task : config.probes.suite) {
    if (task == "retrieval") {
      out.push_back(retrieval_eval(model, retrieval_set, tokens).result);
      continue;
    }
    for (int s = 0; s < config.probes.seeds; ++s) {
      const std::uint64_t seed =
          derive_stream(config.seed, "probes", static_cast<std::uint64_t>(s))
              .next_u64();
      if (task == "token_cls") {
        out.push_back(probe_token_cls(model, token_set, seed, recipe, tokens));
      } else if (task == "span_qa") {
        auto r = probe_span_qa(model, qa_set, seed, recipe, tokens);
        out.insert(out.end(), r.begin(), r.end());
      } else if (task == "seq_cls") {
        out.push_back(
            probe_seq_cls(model, seq_set, "seq_cls", seed, recipe, tokens));
      } else if (task == "pair_cls") {
        out.push_back(
            probe_seq_cls(model, pair_set, "pair_cls", seed, recipe, tokens));
      } else if (task == "nli") {
        out.push_back(
            probe_seq_cls(model, nli_set, "nli", seed, recipe, tokens));
      }
    }
  }
  return out;
}

}  // namespace

std::vector<ProbeResult> cmd_evaluate(const RunConfig& config) {
  ensure_dir(config.out_dir);
  DirLock lock(config.out_dir);
  StageWriter stage(config, "evaluate");

  std::vector<DocumentRecord> corpus = read_input_corpus(config);
  Vocab vocab = build_vocab(corpus, config.corpus.vocab_size);
  const std::size_t max_items =
      static_cast<std::size_t>(config.probes.max_items);
  const Index max_len = config.spec.max_len;
  TokenClsSet token_set = make_token_cls(corpus, vocab, max_items, max_len);
  SpanQaSet qa_set = make_span_qa(corpus, vocab, max_items, max_len);
  SeqClsSet seq_set = make_seq_cls(corpus, vocab, max_items, max_len);
  SeqClsSet pair_set = make_pair_cls(corpus, vocab, max_items, max_len);
  SeqClsSet nli_set = make_nli(corpus, vocab, max_items, max_len);
  RetrievalSet retrieval_set = make_retrieval(
      corpus, vocab, static_cast<std::size_t>(config.probes.retrieval_docs),
      static_cast<std::size_t>(config.probes.retrieval_queries), max_len);

  const auto files = list_files(config.out_dir + "/cooled", ".bin");
  if (files.empty())
    throw DataError("evaluate: no cooled checkpoints in " + config.out_dir +
                    "/cooled; run cooldown first");
  std::vector<Checkpoint> checkpoints;
  for (const std::string& path : files)
    checkpoints.push_back(load_checkpoint(
        path, checkpoint_spec_hash(config.spec, config.objective.kind)));
  std::sort(checkpoints.begin(), checkpoints.end(),
            [](const Checkpoint& a, const Checkpoint& b) {
              return a.tokens_seen < b.tokens_seen;
            });

  std::vector<ProbeResult> results = probe_checkpoints(
      checkpoints,
      [&](const EncoderModel& model, Index tokens) {
        return run_probe_suite(model, tokens, config, token_set, qa_set,
                               seq_set, pair_set, nli_set, retrieval_set);
      });

  const std::string results_path = config.out_dir + "/probe_results.jsonl";
  {
    std::ofstream out(results_path, std::ios::trunc);
    for (const ProbeResult& r : results)
      out << nlohmann::json{{"task", r.task},
                            {"metric", r.metric},
                            {"value", r.value},
                            {"seed", r.seed},
                            {"checkpoint_tokens", r.checkpoint_tokens},
                            {"diverged", r.diverged}}
                 .dump()
          << "\n";
  }
  // One curve per (task, metric).
  const std::string curves_path = config.out_dir + "/curves.jsonl";
  {
    std::ofstream out(curves_path, std::ios::trunc);
    std::set<std::pair<std::string, std::string>> keys;
    for (const ProbeResult& r : results) keys.emplace(r.task, r.metric);
    for (const auto& [task, metric] : keys) {
      std::vector<ProbeResult> slice;
      for (const ProbeResult& r : results)
        if (r.task == task && r.metric == metric) slice.push_back(r);
      for (const CurvePoint& p : efficiency_curve(slice))
        out << nlohmann::json{{"task", task},
                              {"metric", metric},
                              {"tokens", p.tokens},
                              {"mean", p.mean},
                              {"std", p.stddev},
                              {"n", p.n}}
                   .dump()
            << "\n";
    }
  }
  stage.artifact(results_path);
  stage.artifact(curves_path);
  stage.commit();
  return results;
}

namespace {

struct Cell {
  Scalar mean = 0, stddev = 0;
  int n = 0;
};

Cell summarize(const std::vector<ProbeResult>& results, const std::string& task,
               const std::string& metric, Index tokens) {
  std::vector<Scalar> vals;
  for (const ProbeResult& r : results)
    if (r.task == task && r.metric == metric && r.checkpoint_tokens == tokens &&
        !r.diverged)
      vals.push_back(r.value);
  Cell c;
  c.n = static_cast<int>(vals.size());
  if (vals.empty()) return c;
  for (Scalar v : vals) c.mean += v;
  c.mean /= static_cast<Scalar>(vals.size());
  for (Scalar v : vals) c.stddev += (v - c.mean) * (v - c.mean);
  c.stddev = std::sqrt(c.stddev / static_cast<Scalar>(vals.size()));
  return c;
}

nlohmann::json cell_json(const Cell& c) {
  return {{"mean", c.mean}, {"std", c.stddev}, {"n", c.n}};
}

}  // namespace

CompareReport cmd_compare(const std::vector<std::string>& config_paths,
                          const std::string& out_dir) {
  if (config_paths.size() < 2)
    throw ConfigError("compare: need at least two configs");
  std::vector<RunConfig> configs;
  for (const std::string& path : config_paths)
    configs.push_back(load_config(path));

  // The controlled-comparison guarantee: identical corpus artifact or refusal.
  const std::uint64_t ref_hash = corpus_artifact_hash(configs[0]);
  for (std::size_t i = 1; i < configs.size(); ++i) {
    const std::uint64_t h = corpus_artifact_hash(configs[i]);
    if (h != ref_hash)
      throw ConfigError(
          "compare: corpus hash mismatch: " + configs[0].experiment + " has " +
          std::to_string(ref_hash) + " but " + configs[i].experiment + " has " +
          std::to_string(h) + "; comparisons must share the training data");
  }

  ensure_dir(out_dir);
  CompareReport report;
  nlohmann::json rows = nlohmann::json::array();
  std::string table;
  table +=
      "model                    NER-F1      QA-F1       QA-EM       CLS-Acc "
      "    PAWSX-Acc   XNLI-Acc    Retr-Avg\n";

  for (const RunConfig& config : configs) {
    cmd_pretrain(config);
    cmd_cooldown(config);
    std::vector<ProbeResult> results = cmd_evaluate(config);
    report.experiments.push_back(config.experiment);

    Index final_tokens = 0;
    for (const ProbeResult& r : results)
      final_tokens = std::max(final_tokens, r.checkpoint_tokens);

    const Cell ner = summarize(results, "token_cls", "F1", final_tokens);
    const Cell qaf1 = summarize(results, "span_qa", "F1", final_tokens);
    const Cell qaem = summarize(results, "span_qa", "EM", final_tokens);
    const Cell cls = summarize(results, "seq_cls", "Acc", final_tokens);
    const Cell paws = summarize(results, "pair_cls", "Acc", final_tokens);
    const Cell nli = summarize(results, "nli", "Acc", final_tokens);
    const Cell retr = summarize(results, "retrieval", "NDCG@10", final_tokens);

    rows.push_back({{"model", config.experiment},
                    {"family", family_name(config.spec.family)},
                    {"tokens", final_tokens},
                    {"ner_f1", cell_json(ner)},
                    {"qa_f1", cell_json(qaf1)},
                    {"qa_em", cell_json(qaem)},
                    {"cls_acc", cell_json(cls)},
                    {"pawsx_acc", cell_json(paws)},
                    {"xnli_acc", cell_json(nli)},
                    {"retrieval_avg", cell_json(retr)}});

    char line[256];
    std::snprintf(line, sizeof(line),
                  "%-24s %5.3f±%.3f %5.3f±%.3f %5.3f±%.3f %5.3f±%.3f "
                  "%5.3f±%.3f %5.3f±%.3f %5.3f±%.3f\n",
                  config.experiment.c_str(), ner.mean, ner.stddev, qaf1.mean,
                  qaf1.stddev, qaem.mean, qaem.stddev, cls.mean, cls.stddev,
                  paws.mean, paws.stddev, nli.mean, nli.stddev, retr.mean,
                  retr.stddev);
    table += line;

    // Curve data per family for the sample-efficiency figures.
    std::set<std::pair<std::string, std::string>> keys;
    for (const ProbeResult& r : results) keys.emplace(r.task, r.metric);
    std::ofstream curves(out_dir + "/curves-" + config.experiment + ".jsonl",
                         std::ios::trunc);
    for (const auto& [task, metric] : keys) {
      std::vector<ProbeResult> slice;
      for (const ProbeResult& r : results)
        if (r.task == task && r.metric == metric) slice.push_back(r);
      for (const CurvePoint& p : efficiency_curve(slice))
        curves << nlohmann::json{{"model", config.experiment},
                                 {"task", task},
                                 {"metric", metric},
                                 {"tokens", p.tokens},
                                 {"mean", p.mean},
                                 {"std", p.stddev},
                                 {"n", p.n}}
                      .dump()
               << "\n";
    }
  }

  report.summary = {{"corpus_hash", ref_hash},
                    {"columns",
                     {"NER-F1", "QA-F1", "QA-EM", "CLS-Acc", "PAWSX-Acc",
                      "XNLI-Acc", "Retr-Avg"}},
                    {"rows", rows}};
  write_file(out_dir + "/summary.json", report.summary.dump(2) + "\n");
  write_file(out_dir + "/summary.txt", table);
  return report;
}

BenchReport cmd_bench(const RunConfig& config, double duration_s) {
  ensure_dir(config.out_dir);
  DirLock lock(config.out_dir);
  StageWriter stage(config, "bench");

  std::vector<DocumentRecord> corpus = read_input_corpus(config);
  Vocab vocab = build_vocab(corpus, config.corpus.vocab_size);
  std::vector<TokenizedDoc> docs = prepare_training_docs(
      corpus, vocab, config.plan.max_len, config.corpus.upsampling);

  EncoderModel model =
      build(config.spec, derive_stream(config.seed, "init-model").next_u64());
  BenchReport rep;
  rep.family = family_name(config.spec.family);
  rep.packed = throughput_bench(model, docs, BatchMode::packed, duration_s,
                                config.plan.max_len, vocab.specials.pad);
  rep.padded = throughput_bench(model, docs, BatchMode::padded, duration_s,
                                config.plan.max_len, vocab.specials.pad);

  auto tj = [](const ThroughputReport& t) {
    return nlohmann::json{{"mode", t.mode},
                          {"tokens_per_sec", t.tokens_per_sec},
                          {"pad_frac", t.pad_frac},
                          {"iterations", t.iterations},
                          {"wall_s", t.wall_s},
                          {"non_pad_tokens", t.non_pad_tokens}};
  };
  const std::string path = config.out_dir + "/bench.json";
  write_file(path, nlohmann::json{{"family", rep.family},
                                  {"packed", tj(rep.packed)},
                                  {"padded", tj(rep.padded)}}
                           .dump(2) +
                       "\n");
  stage.artifact(path);
  stage.commit();
  return rep;
}

}  // namespace enclab
