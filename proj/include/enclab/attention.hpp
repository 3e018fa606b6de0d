#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "enclab/tensor.hpp"

namespace enclab {

enum class MaskKind { global, local };

/// Symmetric [L x L] allowance matrix for a packed sequence: block-diagonal
/// by document, optionally intersected with a |i - j| <= half_window band.
struct AttentionMask {
  Index len = 0;
  std::vector<uint8_t> allowed;  // row-major L x L
  // provenance
  std::vector<Index> doc_lengths;
  MaskKind kind = MaskKind::global;
  Index half_window = 0;

  bool at(Index i, Index j) const { return allowed[i * len + j] != 0; }
};

AttentionMask build_mask(std::span<const Index> doc_lengths, MaskKind kind,
                         Index half_window);

/// Additive pre-softmax bias: 0 where allowed, -1e30 where not. Constant
/// (never carries gradient), so disallowed pairs get exactly zero weight
/// after softmax underflow.
Tensor mask_bias(const AttentionMask& mask);

struct RopeParams {
  Scalar theta = 10000.0;
  Index head_dim = 0;  // even
};

/// Rotates consecutive pairs within each head_dim block of the last
/// dimension by pos * theta^(-2i/head_dim); positions indexed by the first
/// axis. Norm of each pair is preserved.
Tensor rope_apply(const Tensor& x, std::span<const Index> positions,
                  const RopeParams& params);

/// Relative-position embedding over 2k clamped-distance buckets.
struct RelPosBuckets {
  Index k = 0;
  Tensor table;  // [2k x d]
};

/// bucket(i, j) = clamp(i - j, -k, k - 1) + k, in [0, 2k).
Index bucket(Index i, Index j, Index k);

struct AttnWeights {
  Tensor wq, wk, wv, wo;  // [d x d]
  Tensor bq, bk, bv, bo;  // [d] each; undefined when the spec says no bias
};

/// Standard bidirectional multi-head attention with an additive mask.
/// When rope is non-null, queries and keys are rotated per head before
/// the score product.
Tensor mha(const Tensor& x, const AttnWeights& w, int heads,
           const AttentionMask& mask, const RopeParams* rope = nullptr,
           std::span<const Index> positions = {});

/// Disentangled attention: scores decompose into content-content,
/// content-position, and position-content terms over the shared relative
/// bucket table, scaled by 1/sqrt(3 * head_dim).
Tensor disentangled_attention(const Tensor& x, const RelPosBuckets& rel,
                              const AttnWeights& w, int heads,
                              const AttentionMask& mask);

}  // namespace enclab
