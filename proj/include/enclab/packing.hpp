#pragma once

#include <string>
#include <vector>

#include "enclab/rng.hpp"
#include "enclab/tensor.hpp"

namespace enclab {

struct TokenizedDoc {
  std::string id;
  std::vector<Index> tokens;
};

/// One packed sequence: concatenated documents, never split, plus the pad
/// count up to max_len (pad tokens are not materialized).
struct PackedBatch {
  std::vector<Index> ids;
  std::vector<Index> doc_lengths;
  std::vector<std::string> doc_ids;
  Index pad = 0;
};

/// Greedy first-fit-decreasing packing. Documents longer than max_len are a
/// contract violation (truncate upstream); an empty corpus is degenerate.
/// The emitted pack order is shuffled by rng; pack contents are
/// deterministic.
std::vector<PackedBatch> pack(const std::vector<TokenizedDoc>& docs,
                              Index max_len, RngStream& rng);

/// Fraction of slots lost to padding across all packs.
Scalar pad_fraction(const std::vector<PackedBatch>& packs, Index max_len);

}  // namespace enclab
