#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "enclab/rng.hpp"
#include "enclab/tensor.hpp"

namespace enclab {

enum class Bucket { head, middle, tail, unknown };
enum class QualityLabel { low, medium, high, unknown };

std::string bucket_name(Bucket b);
Bucket bucket_from_name(const std::string& s);
std::string quality_name(QualityLabel q);
QualityLabel quality_from_name(const std::string& s);

/// One corpus unit. token_count is the whitespace word count, which equals
/// the word-level tokenizer's output length.
struct DocumentRecord {
  std::string id;
  std::string text;
  std::string source;
  Bucket bucket = Bucket::unknown;
  QualityLabel label = QualityLabel::unknown;
  Index token_count = 0;
  nlohmann::json annotations;  // probe-task ground truth, optional
};

std::vector<DocumentRecord> read_corpus_jsonl(const std::string& path);
void write_corpus_jsonl(const std::string& path,
                        const std::vector<DocumentRecord>& docs);

/// Collapses whitespace runs to single spaces and trims the ends.
std::string normalize_whitespace(const std::string& text);

/// Renders the quality-annotation prompt with {input} substituted once.
std::string render_quality_prompt(const std::string& text);

/// Scans for the last "Quality score:" line; the label is matched
/// case-insensitively against the closed set {low, medium, high}.
QualityLabel parse_quality_response(const std::string& response);

enum class SelectDecision { keep, discard, quarantine };

/// Keep a document if it is from the head bucket or carries a high quality
/// label, unless it is from the tail bucket or labeled low (discard wins).
/// Unknown bucket or label routes to quarantine.
SelectDecision select(const DocumentRecord& rec);

struct DedupResult {
  std::vector<DocumentRecord> docs;
  std::vector<std::string> removed_ids;
};

/// Removes exact duplicates (whitespace-normalized text); the first
/// occurrence survives. Output order is a subsequence of input order.
DedupResult dedup(const std::vector<DocumentRecord>& docs);

/// Keeps every document with token_count > threshold_tokens; shorter ones
/// survive independently with short_keep_prob.
std::vector<DocumentRecord> curate_long_context(
    const std::vector<DocumentRecord>& docs, Index threshold_tokens,
    Scalar short_keep_prob, RngStream& rng);

struct SpecialIds {
  Index pad = 0, cls = 1, sep = 2, mask = 3, unk = 4;
  bool is_special(Index id) const {
    return id == pad || id == cls || id == sep || id == mask || id == unk;
  }
  static constexpr Index count = 5;
};

struct Vocab {
  std::vector<std::string> id_to_token;  // dense, specials first
  std::unordered_map<std::string, Index> token_to_id;
  SpecialIds specials;

  Index size() const { return static_cast<Index>(id_to_token.size()); }
};

/// Frequency-ranked word vocabulary (ties broken lexicographically) capped
/// at `size` entries including the specials.
Vocab build_vocab(const std::vector<DocumentRecord>& docs, Index size);

/// Deterministic word-level tokenization with unk fallback. No cls/sep
/// wrapping here.
std::vector<Index> tokenize(const std::string& text, const Vocab& vocab);

std::string detokenize(std::span<const Index> ids, const Vocab& vocab);

}  // namespace enclab
