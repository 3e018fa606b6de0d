#pragma once

// Test-only oracles, independent of the implementation paths they check:
// central finite differences, literal nested-loop attention, brute-force
// masks, exhaustive-permutation NDCG, and quadratic dedup.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "enclab/attention.hpp"
#include "enclab/corpus.hpp"
#include "enclab/rng.hpp"
#include "enclab/tensor.hpp"

namespace oracles {

using enclab::Index;
using enclab::Scalar;
using enclab::Tensor;

inline Tensor random_tensor(enclab::Shape shape, enclab::RngStream& rng,
                            Scalar scale = 1.0, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.values()) v = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

/// Central finite differences of a scalar-valued recomputation against the
/// analytic gradient of `input`. Returns the max relative error, with
/// rel = |a - f| / max(1, |a|, |f|).
inline Scalar fd_max_rel_err(const std::function<Tensor()>& loss_fn,
                             Tensor input, Scalar step = 1e-3) {
  Tensor loss = loss_fn();
  input.ensure_grad();
  input.zero_grad();
  enclab::backward(loss);
  std::vector<Scalar> analytic(input.grad().begin(), input.grad().end());

  Scalar max_rel = 0.0;
  auto xv = input.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Scalar keep = xv[i];
    enclab::NoGradGuard ng;
    xv[i] = keep + step;
    const Scalar up = loss_fn().value();
    xv[i] = keep - step;
    const Scalar down = loss_fn().value();
    xv[i] = keep;
    const Scalar fd = (up - down) / (2.0 * step);
    const Scalar rel = std::abs(analytic[i] - fd) /
                       std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

/// Literal four-nested-loop multi-head attention, no shared code with the
/// library path. Weights as plain row-major matrices.
struct LoopAttnInputs {
  Index l, d;
  int heads;
  std::vector<Scalar> x;                    // [l x d]
  std::vector<Scalar> wq, wk, wv, wo;       // [d x d]
  std::vector<Scalar> bq, bk, bv, bo;       // [d] or empty
  std::vector<uint8_t> allowed;             // [l x l]
  // disentangled extras
  Index rel_k = 0;
  std::vector<Scalar> rel_table;            // [2k x d]
};

inline std::vector<Scalar> loop_project(const std::vector<Scalar>& x, Index rows,
                                        Index d, const std::vector<Scalar>& w,
                                        const std::vector<Scalar>& b) {
  std::vector<Scalar> y(rows * d, 0.0);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < d; ++j) {
      Scalar acc = b.empty() ? 0.0 : b[j];
      for (Index k = 0; k < d; ++k) acc += x[i * d + k] * w[k * d + j];
      y[i * d + j] = acc;
    }
  return y;
}

inline std::vector<Scalar> loop_mha(const LoopAttnInputs& in) {
  const Index l = in.l, d = in.d;
  const Index dh = d / in.heads;
  const auto q = loop_project(in.x, l, d, in.wq, in.bq);
  const auto k = loop_project(in.x, l, d, in.wk, in.bk);
  const auto v = loop_project(in.x, l, d, in.wv, in.bv);
  std::vector<Scalar> ctx(l * d, 0.0);
  for (int h = 0; h < in.heads; ++h) {
    for (Index i = 0; i < l; ++i) {
      std::vector<Scalar> scores(l);
      for (Index j = 0; j < l; ++j) {
        Scalar s = 0.0;
        for (Index c = 0; c < dh; ++c)
          s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        s /= std::sqrt(static_cast<Scalar>(dh));
        if (!in.allowed[i * l + j]) s += -1e30;
        scores[j] = s;
      }
      Scalar mx = scores[0];
      for (Scalar s : scores) mx = std::max(mx, s);
      Scalar z = 0.0;
      std::vector<Scalar> w(l);
      for (Index j = 0; j < l; ++j) {
        w[j] = std::exp(scores[j] - mx);
        z += w[j];
      }
      for (Index j = 0; j < l; ++j) w[j] /= z;
      for (Index c = 0; c < dh; ++c) {
        Scalar acc = 0.0;
        for (Index j = 0; j < l; ++j) acc += w[j] * v[j * d + h * dh + c];
        ctx[i * d + h * dh + c] = acc;
      }
    }
  }
  return loop_project(ctx, l, d, in.wo, in.bo);
}

inline Index loop_bucket(Index i, Index j, Index k) {
  Index rel = i - j;
  if (rel < -k) rel = -k;
  if (rel > k - 1) rel = k - 1;
  return rel + k;
}

/// Triple-term disentangled attention scores evaluated with literal loops:
/// (c2c + c2p + p2c) / sqrt(3 dh) with the positional projections taken
/// through the content weight matrices, no bias.
inline std::vector<Scalar> loop_disentangled(const LoopAttnInputs& in) {
  const Index l = in.l, d = in.d;
  const Index dh = d / in.heads;
  const Index buckets = 2 * in.rel_k;
  const auto q = loop_project(in.x, l, d, in.wq, in.bq);
  const auto k = loop_project(in.x, l, d, in.wk, in.bk);
  const auto v = loop_project(in.x, l, d, in.wv, in.bv);
  const auto qr = loop_project(in.rel_table, buckets, d, in.wq, {});
  const auto kr = loop_project(in.rel_table, buckets, d, in.wk, {});
  std::vector<Scalar> ctx(l * d, 0.0);
  for (int h = 0; h < in.heads; ++h) {
    for (Index i = 0; i < l; ++i) {
      std::vector<Scalar> scores(l);
      for (Index j = 0; j < l; ++j) {
        Scalar c2c = 0.0, c2p = 0.0, p2c = 0.0;
        const Index bij = loop_bucket(i, j, in.rel_k);
        const Index bji = loop_bucket(j, i, in.rel_k);
        for (Index c = 0; c < dh; ++c) {
          c2c += q[i * d + h * dh + c] * k[j * d + h * dh + c];
          c2p += q[i * d + h * dh + c] * kr[bij * d + h * dh + c];
          p2c += k[j * d + h * dh + c] * qr[bji * d + h * dh + c];
        }
        Scalar s = (c2c + c2p + p2c) / std::sqrt(3.0 * static_cast<Scalar>(dh));
        if (!in.allowed[i * l + j]) s += -1e30;
        scores[j] = s;
      }
      Scalar mx = scores[0];
      for (Scalar s : scores) mx = std::max(mx, s);
      Scalar z = 0.0;
      std::vector<Scalar> w(l);
      for (Index j = 0; j < l; ++j) {
        w[j] = std::exp(scores[j] - mx);
        z += w[j];
      }
      for (Index j = 0; j < l; ++j) w[j] /= z;
      for (Index c = 0; c < dh; ++c) {
        Scalar acc = 0.0;
        for (Index j = 0; j < l; ++j) acc += w[j] * v[j * d + h * dh + c];
        ctx[i * d + h * dh + c] = acc;
      }
    }
  }
  return loop_project(ctx, l, d, in.wo, in.bo);
}

/// Double-loop mask construction evaluating both conditions directly.
inline std::vector<uint8_t> loop_mask(const std::vector<Index>& doc_lengths,
                                      bool local, Index half_window) {
  Index total = 0;
  for (Index dl : doc_lengths) total += dl;
  std::vector<Index> doc_of(total);
  {
    Index pos = 0;
    for (std::size_t di = 0; di < doc_lengths.size(); ++di)
      for (Index t = 0; t < doc_lengths[di]; ++t)
        doc_of[pos++] = static_cast<Index>(di);
  }
  std::vector<uint8_t> allowed(total * total, 0);
  for (Index i = 0; i < total; ++i)
    for (Index j = 0; j < total; ++j) {
      const bool same_doc = doc_of[i] == doc_of[j];
      const bool in_band = std::abs(i - j) <= half_window;
      allowed[i * total + j] = (same_doc && (!local || in_band)) ? 1 : 0;
    }
  return allowed;
}

/// Exhaustive-permutation NDCG: evaluates the DCG formula over every
/// permutation of the candidate ids to certify the normalizer.
struct PermutationNdcg {
  Scalar value;         // dcg(ranked)/max dcg
  Scalar max_over_perms;  // max normalized value = 1 when ranking optimal
};

inline Scalar plain_dcg(const std::vector<std::string>& ranked,
                        const std::map<std::string, Scalar>& gains, int k) {
  Scalar dcg = 0.0;
  for (std::size_t r = 0; r < ranked.size() && r < static_cast<std::size_t>(k);
       ++r) {
    auto it = gains.find(ranked[r]);
    if (it != gains.end())
      dcg += it->second / std::log2(static_cast<Scalar>(r) + 2.0);
  }
  return dcg;
}

inline PermutationNdcg permutation_ndcg(const std::vector<std::string>& ranked,
                                        const std::map<std::string, Scalar>& gains,
                                        int k) {
  std::vector<std::string> ids = ranked;
  std::sort(ids.begin(), ids.end());
  Scalar best = 0.0;
  do {
    best = std::max(best, plain_dcg(ids, gains, k));
  } while (std::next_permutation(ids.begin(), ids.end()));
  PermutationNdcg out;
  out.value = plain_dcg(ranked, gains, k) / best;
  Scalar best_norm = 0.0;
  std::sort(ids.begin(), ids.end());
  do {
    best_norm = std::max(best_norm, plain_dcg(ids, gains, k) / best);
  } while (std::next_permutation(ids.begin(), ids.end()));
  out.max_over_perms = best_norm;
  return out;
}

/// Quadratic pairwise dedup: keep record i iff no earlier record has equal
/// whitespace-normalized text.
inline std::vector<std::string> quadratic_dedup_survivors(
    const std::vector<enclab::DocumentRecord>& docs) {
  std::vector<std::string> survivors;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    bool dup = false;
    for (std::size_t j = 0; j < i && !dup; ++j)
      if (enclab::normalize_whitespace(docs[i].text) ==
          enclab::normalize_whitespace(docs[j].text))
        dup = true;
    if (!dup) survivors.push_back(docs[i].id);
  }
  return survivors;
}

}  // namespace oracles
