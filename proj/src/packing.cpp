#include "enclab/packing.hpp"

#include <algorithm>
#include <numeric>

#include "enclab/errors.hpp"

namespace enclab {

std::vector<PackedBatch> pack(const std::vector<TokenizedDoc>& docs,
                              Index max_len, RngStream& rng) {
  if (docs.empty()) throw DegenerateBatchError("pack: empty corpus");
  if (max_len < 1) throw ContractError("pack: max_len must be >= 1");
  for (const TokenizedDoc& d : docs) {
    if (d.tokens.empty())
      throw ContractError("pack: document " + d.id + " is empty");
    if (static_cast<Index>(d.tokens.size()) > max_len)
      throw ContractError("pack: document " + d.id + " has " +
                          std::to_string(d.tokens.size()) +
                          " tokens > max_len " + std::to_string(max_len));
  }

  // First-fit-decreasing: longest first, ties by input order.
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&docs](std::size_t a, std::size_t b) {
                     return docs[a].tokens.size() > docs[b].tokens.size();
                   });

  std::vector<PackedBatch> packs;
  std::vector<Index> room;  // remaining slots per pack
  for (std::size_t di : order) {
    const TokenizedDoc& d = docs[di];
    const Index need = static_cast<Index>(d.tokens.size());
    std::size_t target = packs.size();
    for (std::size_t p = 0; p < packs.size(); ++p) {
      if (room[p] >= need) {
        target = p;
        break;
      }
    }
    if (target == packs.size()) {
      packs.emplace_back();
      room.push_back(max_len);
    }
    PackedBatch& pb = packs[target];
    pb.ids.insert(pb.ids.end(), d.tokens.begin(), d.tokens.end());
    pb.doc_lengths.push_back(need);
    pb.doc_ids.push_back(d.id);
    room[target] -= need;
  }
  for (std::size_t p = 0; p < packs.size(); ++p) packs[p].pad = room[p];

  // Fisher-Yates over the emitted order; contents stay fixed.
  for (std::size_t i = packs.size(); i > 1; --i) {
    const std::size_t j =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<Index>(i)));
    std::swap(packs[i - 1], packs[j]);
  }
  return packs;
}

Scalar pad_fraction(const std::vector<PackedBatch>& packs, Index max_len) {
  if (packs.empty()) return 0.0;
  Index padded = 0;
  for (const PackedBatch& p : packs) padded += p.pad;
  return static_cast<Scalar>(padded) /
         static_cast<Scalar>(max_len * static_cast<Index>(packs.size()));
}

}  // namespace enclab
