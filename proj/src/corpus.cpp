#include "enclab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "enclab/errors.hpp"

namespace enclab {

std::string bucket_name(Bucket b) {
  switch (b) {
    case Bucket::head: return "head";
    case Bucket::middle: return "middle";
    case Bucket::tail: return "tail";
    case Bucket::unknown: return "unknown";
  }
  return "unknown";
}

Bucket bucket_from_name(const std::string& s) {
  if (s == "head") return Bucket::head;
  if (s == "middle") return Bucket::middle;
  if (s == "tail") return Bucket::tail;
  return Bucket::unknown;
}

std::string quality_name(QualityLabel q) {
  switch (q) {
    case QualityLabel::low: return "low";
    case QualityLabel::medium: return "medium";
    case QualityLabel::high: return "high";
    case QualityLabel::unknown: return "unknown";
  }
  return "unknown";
}

QualityLabel quality_from_name(const std::string& s) {
  if (s == "low") return QualityLabel::low;
  if (s == "medium") return QualityLabel::medium;
  if (s == "high") return QualityLabel::high;
  return QualityLabel::unknown;
}

std::vector<DocumentRecord> read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::vector<DocumentRecord> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": malformed record: " + e.what());
    }
    DocumentRecord rec;
    rec.id = j.value("id", "");
    rec.text = j.value("text", "");
    rec.source = j.value("source", "");
    rec.bucket = bucket_from_name(j.value("perplexity_bucket", "unknown"));
    rec.label = quality_from_name(j.value("quality_label", "unknown"));
    rec.token_count = j.value("token_count", Index{0});
    if (j.contains("annotations")) rec.annotations = j["annotations"];
    if (rec.id.empty())
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": record has no id");
    docs.push_back(std::move(rec));
  }
  return docs;
}

void write_corpus_jsonl(const std::string& path,
                        const std::vector<DocumentRecord>& docs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write corpus file: " + path);
  for (const DocumentRecord& rec : docs) {
    nlohmann::json j{{"id", rec.id},
                     {"text", rec.text},
                     {"source", rec.source},
                     {"perplexity_bucket", bucket_name(rec.bucket)},
                     {"quality_label", quality_name(rec.label)},
                     {"token_count", rec.token_count}};
    if (!rec.annotations.is_null()) j["annotations"] = rec.annotations;
    out << j.dump() << "\n";
  }
}

std::string normalize_whitespace(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = false;
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      in_space = !out.empty();
      continue;
    }
    if (in_space) out.push_back(' ');
    in_space = false;
    out.push_back(static_cast<char>(ch));
  }
  return out;
}

namespace {

constexpr const char* kQualityPromptTemplate =
    R"(Below is an extract from a web page. Evaluate the quality of the content based on the following factors:

    1. Content Accuracy: Assess the correctness and reliability of the information presented. Consider the factual accuracy, use of credible sources (if mentioned), and absence of misinformation.
    2. Clarity: Evaluate how well the information is communicated. Look for clear explanations, well-defined terms, and logical flow of ideas.
    3. Coherence: Analyze the overall structure and organization of the content. Consider how well ideas are connected and if the content follows a logical progression.
    4. Grammar and Language: Assess the quality of writing, including correct grammar, spelling, and punctuation. Consider the appropriateness of language for the intended audience.
    5. Depth of Information: Evaluate the level of detail and thoroughness of the content. Consider whether it provides surface-level information or delves into more comprehensive explanations.
    6. Overall Usefulness: Assess the practical value and relevance of the information for a general audience. Consider how applicable or helpful the content would be for someone seeking information on the topic.

Based on these factors, give an overall quality score of low, medium, or high.

The extract:
    {input}

After examining the extract:
- Briefly justify your quality classification, up to 100 words on one line using the format: "Explanation: <justification>"
- Conclude with the quality classification using the format: "Quality score: <classification>" (on a separate line)

Remember to assess from the AI Assistant perspective, utilizing web search knowledge as necessary. Evaluate the content based on the quality factors outlined above.)";

constexpr const char* kInputSlot = "{input}";
constexpr const char* kScorePrefix = "Quality score:";

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

std::string render_quality_prompt(const std::string& text) {
  if (text.empty())
    throw ContractError("render_quality_prompt: empty extract");
  const std::string tmpl = kQualityPromptTemplate;
  const std::size_t pos = tmpl.find(kInputSlot);
  std::string out = tmpl;
  out.replace(pos, std::string(kInputSlot).size(), text);
  return out;
}

QualityLabel parse_quality_response(const std::string& response) {
  std::istringstream in(response);
  std::string line, last_match;
  bool found = false;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.rfind(kScorePrefix, 0) == 0) {
      last_match = t;
      found = true;
    }
  }
  if (!found)
    throw DataError("parse_quality_response: no \"Quality score:\" line in: " +
                    response);
  const std::string label =
      lower(trim(last_match.substr(std::string(kScorePrefix).size())));
  if (label == "low") return QualityLabel::low;
  if (label == "medium") return QualityLabel::medium;
  if (label == "high") return QualityLabel::high;
  throw DataError("parse_quality_response: unknown label in line: " +
                  last_match);
}

SelectDecision select(const DocumentRecord& rec) {
  if (rec.bucket == Bucket::unknown || rec.label == QualityLabel::unknown)
    return SelectDecision::quarantine;
  // Discard takes precedence over keep for (head, low) and (tail, high).
  if (rec.bucket == Bucket::tail || rec.label == QualityLabel::low)
    return SelectDecision::discard;
  if (rec.bucket == Bucket::head || rec.label == QualityLabel::high)
    return SelectDecision::keep;
  return SelectDecision::discard;
}

DedupResult dedup(const std::vector<DocumentRecord>& docs) {
  DedupResult result;
  std::unordered_map<std::string, bool> seen;
  seen.reserve(docs.size());
  for (const DocumentRecord& rec : docs) {
    const std::string key = normalize_whitespace(rec.text);
    auto [it, inserted] = seen.emplace(key, true);
    if (inserted)
      result.docs.push_back(rec);
    else
      result.removed_ids.push_back(rec.id);
  }
  return result;
}

std::vector<DocumentRecord> curate_long_context(
    const std::vector<DocumentRecord>& docs, Index threshold_tokens,
    Scalar short_keep_prob, RngStream& rng) {
  if (short_keep_prob < 0.0 || short_keep_prob > 1.0)
    throw ContractError("curate_long_context: short_keep_prob out of [0, 1]");
  std::vector<DocumentRecord> out;
  for (const DocumentRecord& rec : docs) {
    if (rec.token_count > threshold_tokens) {
      out.push_back(rec);
    } else if (rng.bernoulli(short_keep_prob)) {
      out.push_back(rec);
    }
  }
  return out;
}

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(normalize_whitespace(text));
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

}  // namespace

Vocab build_vocab(const std::vector<DocumentRecord>& docs, Index size) {
  if (size <= SpecialIds::count)
    throw ConfigError("build_vocab: size must exceed the " +
                      std::to_string(SpecialIds::count) + " special tokens");
  std::unordered_map<std::string, Index> counts;
  for (const DocumentRecord& rec : docs)
    for (const std::string& w : split_words(rec.text)) ++counts[w];

  std::vector<std::pair<std::string, Index>> ranked(counts.begin(),
                                                    counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  v.id_to_token = {"<pad>", "<cls>", "<sep>", "<mask>", "<unk>"};
  const std::size_t cap = static_cast<std::size_t>(size);
  for (const auto& [word, count] : ranked) {
    if (v.id_to_token.size() >= cap) break;
    v.id_to_token.push_back(word);
  }
  // Pad to the requested size so embedding shapes depend only on config.
  for (std::size_t u = 0; v.id_to_token.size() < cap; ++u)
    v.id_to_token.push_back("<unused" + std::to_string(u) + ">");
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i)
    v.token_to_id.emplace(v.id_to_token[i], static_cast<Index>(i));
  return v;
}

std::vector<Index> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<Index> ids;
  for (const std::string& w : split_words(text)) {
    auto it = vocab.token_to_id.find(w);
    ids.push_back(it != vocab.token_to_id.end() ? it->second
                                                : vocab.specials.unk);
  }
  return ids;
}

std::string detokenize(std::span<const Index> ids, const Vocab& vocab) {
  std::string out;
  for (Index id : ids) {
    if (id < 0 || id >= vocab.size())
      throw ContractError("detokenize: id " + std::to_string(id) +
                          " out of range");
    if (!out.empty()) out.push_back(' ');
    out += vocab.id_to_token[static_cast<std::size_t>(id)];
  }
  return out;
}

}  // namespace enclab
