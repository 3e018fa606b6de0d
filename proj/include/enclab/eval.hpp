#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "enclab/corpus.hpp"
#include "enclab/packing.hpp"
#include "enclab/trainer.hpp"

namespace enclab {

struct ProbeResult {
  std::string task;    // token_cls | span_qa | seq_cls | pair_cls | nli | retrieval
  std::string metric;  // F1 | EM | Acc | NDCG@10
  Scalar value = 0.0;
  std::uint64_t seed = 0;
  Index checkpoint_tokens = 0;
  bool diverged = false;
};

struct CurvePoint {
  Index tokens = 0;
  Scalar mean = 0.0;
  Scalar stddev = 0.0;
  int n = 0;
};

// ---------------------------------------------------------------------------
// Probe datasets built from synthetic-corpus annotations. Each carries its
// own train/test split (test = items past n_train).

struct TokenClsSet {
  std::vector<std::vector<Index>> ids;
  std::vector<std::vector<int>> labels;  // BIO over per/loc/org; 0 = O
  std::size_t n_train = 0;
  int n_labels = 7;
};

struct SpanQaItem {
  std::vector<Index> ids;  // [cls] question [sep] context [sep]
  Index ctx_begin = 0, ctx_end = 0;
  Index answer_start = 0, answer_end = 0;  // inclusive token indices into ids
};

struct SpanQaSet {
  std::vector<SpanQaItem> items;
  std::size_t n_train = 0;
};

struct SeqClsSet {
  std::vector<std::vector<Index>> ids;
  std::vector<int> labels;
  std::size_t n_train = 0;
  int n_labels = 0;
};

struct RetrievalSet {
  std::vector<std::pair<std::string, std::vector<Index>>> docs;
  std::vector<std::pair<std::string, std::vector<Index>>> queries;
  std::map<std::string, std::map<std::string, Scalar>> qrels;  // qid -> doc gains
};

TokenClsSet make_token_cls(const std::vector<DocumentRecord>& corpus,
                           const Vocab& vocab, std::size_t max_items,
                           Index max_len);
SpanQaSet make_span_qa(const std::vector<DocumentRecord>& corpus,
                       const Vocab& vocab, std::size_t max_items,
                       Index max_len);
SeqClsSet make_seq_cls(const std::vector<DocumentRecord>& corpus,
                       const Vocab& vocab, std::size_t max_items,
                       Index max_len);
SeqClsSet make_pair_cls(const std::vector<DocumentRecord>& corpus,
                        const Vocab& vocab, std::size_t max_items,
                        Index max_len);
SeqClsSet make_nli(const std::vector<DocumentRecord>& corpus,
                   const Vocab& vocab, std::size_t max_items, Index max_len);
RetrievalSet make_retrieval(const std::vector<DocumentRecord>& corpus,
                            const Vocab& vocab, std::size_t max_docs,
                            std::size_t max_queries, Index max_len);

// ---------------------------------------------------------------------------
// Pure metric functions.

using Span = std::tuple<Index, Index, int>;  // start, end (exclusive), type

/// Entity-level F1 by exact span-and-type match.
Scalar span_set_f1(const std::set<Span>& predicted, const std::set<Span>& gold);

/// EM and token-overlap F1 for inclusive index ranges.
struct QaScore {
  Scalar em = 0, f1 = 0;
};
QaScore qa_em_f1(Index pred_start, Index pred_end, Index gold_start,
                 Index gold_end);

/// NDCG with gain / log2(rank + 1) discount over the top k, normalized by
/// the ideal ordering. Throws on duplicate ranked ids or empty gains.
Scalar ndcg_at_k(const std::vector<std::string>& ranked,
                 const std::map<std::string, Scalar>& gains, int k);

// ---------------------------------------------------------------------------
// Probes. The encoder is frozen; a linear head is trained on its states
// (recipe: epochs, learning-rate grid, linear decay). Heads whose loss goes
// non-finite mark the result diverged instead of dropping it.

struct ProbeRecipe {
  int epochs = 3;
  std::vector<Scalar> lrs = {3e-3, 1e-2};
  std::size_t max_items = 200;
};

ProbeResult probe_token_cls(const EncoderModel& model, const TokenClsSet& data,
                            std::uint64_t seed, const ProbeRecipe& recipe,
                            Index checkpoint_tokens);

/// Returns two results: token-overlap F1 and exact match.
std::vector<ProbeResult> probe_span_qa(const EncoderModel& model,
                                       const SpanQaSet& data,
                                       std::uint64_t seed,
                                       const ProbeRecipe& recipe,
                                       Index checkpoint_tokens);
ProbeResult probe_seq_cls(const EncoderModel& model, const SeqClsSet& data,
                          const std::string& task, std::uint64_t seed,
                          const ProbeRecipe& recipe, Index checkpoint_tokens);

/// Mean of the document's token states, L2-normalized.
std::vector<Scalar> mean_pool(const EncoderModel& model,
                              std::span<const Index> ids);

struct RetrievalReport {
  ProbeResult result;
  std::size_t skipped_queries = 0;  // queries with no qrels
};

/// Cosine ranking of mean-pooled embeddings; mean NDCG@10 over queries.
RetrievalReport retrieval_eval(const EncoderModel& model,
                               const RetrievalSet& data,
                               Index checkpoint_tokens);

/// Aggregates probe results into (tokens, mean, std) points sorted by
/// tokens_seen.
std::vector<CurvePoint> efficiency_curve(
    const std::vector<ProbeResult>& results);

/// Probes every checkpoint in the list; refuses uncooled checkpoints, which
/// would break the fair-comparison protocol the cooldown branches exist for.
std::vector<ProbeResult> probe_checkpoints(
    const std::vector<Checkpoint>& checkpoints,
    const std::function<std::vector<ProbeResult>(const EncoderModel&, Index)>&
        probe);

// ---------------------------------------------------------------------------
// Throughput.

enum class BatchMode { packed, padded };

std::string batch_mode_name(BatchMode m);

struct ThroughputReport {
  std::string mode;
  Scalar tokens_per_sec = 0;   // non-pad tokens / wallclock
  Scalar pad_frac = 0;
  int iterations = 0;
  double wall_s = 0;
  Index non_pad_tokens = 0;
};

/// Forward-pass throughput over the corpus in the given batching mode.
/// Padded mode runs one document per max_len sequence, spending compute on
/// the pad tail; packed mode runs first-fit-decreasing packs. Warmup
/// iterations are excluded; fewer than 10 timed iterations inside the
/// duration budget is a measurement error.
ThroughputReport throughput_bench(const EncoderModel& model,
                                  const std::vector<TokenizedDoc>& docs,
                                  BatchMode mode, double duration_s,
                                  Index max_len, Index pad_id);

}  // namespace enclab
