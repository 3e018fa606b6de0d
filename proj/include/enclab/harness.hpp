#pragma once

#include <optional>
#include <string>
#include <vector>

#include "enclab/eval.hpp"
#include "enclab/trainer.hpp"

namespace enclab {

extern const char* kCodeVersion;

struct CorpusConfig {
  std::vector<std::string> paths;
  std::map<std::string, int> upsampling;
  Index vocab_size = 512;
  bool apply_long_context = false;
  Index long_threshold_tokens = 0;
  Scalar short_keep_prob = 0.1;
};

struct ProbeConfig {
  std::vector<std::string> suite = {"token_cls", "span_qa", "seq_cls",
                                    "pair_cls", "nli", "retrieval"};
  int seeds = 3;
  int epochs = 3;
  std::vector<Scalar> lrs = {3e-3, 1e-2};
  Index max_items = 200;
  Index retrieval_docs = 100;
  Index retrieval_queries = 50;
};

/// One experiment, fully specified. Every nested invariant is validated
/// before any work starts; a verbatim copy of the config file is written
/// into the output directory.
struct RunConfig {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string out_dir;
  EncoderSpec spec;
  TrainPlan plan;
  ObjectiveConfig objective;
  CorpusConfig corpus;
  ProbeConfig probes;
  std::optional<ExtendPlan> extend;
};

/// Strict parse: unknown keys anywhere in the file are rejected, so a typo
/// in a hyperparameter name cannot silently corrupt a comparison.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
nlohmann::json config_to_json(const RunConfig& config);
std::uint64_t config_hash(const RunConfig& config);

/// Content hash over the corpus files a config references, in path order.
/// This is the identity cmd_compare enforces across families.
std::uint64_t corpus_artifact_hash(const RunConfig& config);

struct StageRecord {
  std::string name;
  std::vector<std::pair<std::string, std::uint64_t>> artifacts;  // path, hash
  double wallclock_s = 0;
};

struct ExperimentManifest {
  std::uint64_t config_hash = 0;
  std::string code_version;
  std::vector<StageRecord> stages;
};

nlohmann::json manifest_to_json(const ExperimentManifest& m);
ExperimentManifest manifest_from_json(const nlohmann::json& j);

/// Re-hashes every referenced artifact; throws DataError on a mismatch.
void verify_manifest(const ExperimentManifest& m);

struct FilterReport {
  Index ingested = 0;
  Index dedup_removed = 0;
  Index rule_discarded = 0;
  Index curate_dropped = 0;
  Index quarantined = 0;
  Index selected = 0;

  Index discarded() const {
    return dedup_removed + rule_discarded + curate_dropped;
  }
  nlohmann::json to_json() const;
};

// ---------------------------------------------------------------------------
// Commands. Each acquires the output-directory lock, validates before
// touching the filesystem, and appends a manifest stage on success.

FilterReport cmd_filter(const RunConfig& config);
Checkpoint cmd_pretrain(const RunConfig& config, bool resume = false);
std::vector<std::string> cmd_cooldown(const RunConfig& config);  // cooled paths
Checkpoint cmd_extend(const RunConfig& config);
std::vector<ProbeResult> cmd_evaluate(const RunConfig& config);

struct CompareReport {
  std::vector<std::string> experiments;
  nlohmann::json summary;  // one row per family, Table-1 column pairing
};

CompareReport cmd_compare(const std::vector<std::string>& config_paths,
                          const std::string& out_dir);

struct BenchReport {
  ThroughputReport packed;
  ThroughputReport padded;
  std::string family;
};

BenchReport cmd_bench(const RunConfig& config, double duration_s = 2.0);

}  // namespace enclab
