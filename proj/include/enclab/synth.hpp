#pragma once

#include <map>
#include <string>
#include <vector>

#include "enclab/corpus.hpp"

namespace enclab {

struct LengthDist {
  Index min_sentences = 2;
  Index max_sentences = 6;
};

/// Knobs of the template grammar. Entity-type emission frequencies follow
/// from the topic weights; expected_entity_fractions() derives them so tests
/// can recount against the configuration.
struct SynthParams {
  std::vector<Scalar> topic_weights = {1.0, 1.0, 1.0};  // travel, work, commerce
  int n_persons = 40;
  int n_families = 20;
  int n_locations = 24;
  int n_orgs = 16;
  int n_objects = 20;
  int n_jobs = 10;
  int n_numbers = 30;
  Scalar two_token_person_prob = 0.3;
};

/// Expected fraction of entity instances per NER type (per/loc/org), implied
/// by the template grammar and topic weights.
std::map<std::string, Scalar> expected_entity_fractions(const SynthParams& p);

/// Template-grammar documents with known ground truth for every probe task:
/// entity spans, QA pairs, topic labels, paraphrase/NLI pairs, and a
/// retrieval query per document. Deterministic under seed.
///
/// Annotation schema (JSON):
///   topic: int
///   entities: [{start, end, type}]          token spans, end exclusive
///   qa: {question, answer_start, answer_end} span in document tokens
///   pair: {text2, label}                     1 = paraphrase
///   nli: {hypothesis, label}                 0 entail, 1 neutral, 2 contradict
///   query: string                            retrieval query, relevant = this doc
std::vector<DocumentRecord> generate_synthetic_corpus(
    std::uint64_t seed, Index n_docs, const LengthDist& length_dist,
    const SynthParams& params = {});

}  // namespace enclab
