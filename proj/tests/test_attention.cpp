#include <doctest.h>

#include <cmath>

#include "enclab/attention.hpp"
#include "enclab/errors.hpp"
#include "enclab/rng.hpp"
#include "oracles.hpp"

using namespace enclab;
using oracles::random_tensor;

namespace {

AttnWeights random_weights(Index d, bool bias, RngStream& rng) {
  AttnWeights w;
  w.wq = random_tensor({d, d}, rng, 0.5);
  w.wk = random_tensor({d, d}, rng, 0.5);
  w.wv = random_tensor({d, d}, rng, 0.5);
  w.wo = random_tensor({d, d}, rng, 0.5);
  if (bias) {
    w.bq = random_tensor({d}, rng, 0.2);
    w.bk = random_tensor({d}, rng, 0.2);
    w.bv = random_tensor({d}, rng, 0.2);
    w.bo = random_tensor({d}, rng, 0.2);
  }
  return w;
}

oracles::LoopAttnInputs to_loop(const Tensor& x, const AttnWeights& w,
                                int heads, const AttentionMask& mask) {
  oracles::LoopAttnInputs in;
  in.l = x.dim(0);
  in.d = x.dim(1);
  in.heads = heads;
  auto grab = [](const Tensor& t) {
    return std::vector<Scalar>(t.values().begin(), t.values().end());
  };
  in.x = grab(x);
  in.wq = grab(w.wq);
  in.wk = grab(w.wk);
  in.wv = grab(w.wv);
  in.wo = grab(w.wo);
  if (w.bq.defined()) {
    in.bq = grab(w.bq);
    in.bk = grab(w.bk);
    in.bv = grab(w.bv);
    in.bo = grab(w.bo);
  }
  in.allowed = mask.allowed;
  return in;
}

}  // namespace

TEST_CASE("bucket: center, clamp floor, full-table enumeration") {
  CHECK(bucket(5, 5, 4) == 4);
  CHECK(bucket(0, 4 + 7, 4) == 0);  // i - j = -11 clamps to -k
  const Index k = 3;
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j) {
      Index rel = i - j;
      rel = std::max<Index>(-k, std::min<Index>(k - 1, rel));
      CHECK(bucket(i, j, k) == rel + k);
      CHECK(bucket(i, j, k) >= 0);
      CHECK(bucket(i, j, k) < 2 * k);
    }
}

TEST_CASE("build_mask: single document, two blocks, local band oracle") {
  std::vector<Index> one = {4};
  AttentionMask m1 = build_mask(one, MaskKind::global, 0);
  for (uint8_t a : m1.allowed) CHECK(a == 1);

  std::vector<Index> two = {2, 2};
  AttentionMask m2 = build_mask(two, MaskKind::global, 0);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j)
      CHECK(m2.at(i, j) == ((i < 2) == (j < 2)));

  std::vector<Index> docs = {5, 3};
  AttentionMask local = build_mask(docs, MaskKind::local, 1);
  const auto oracle = oracles::loop_mask({5, 3}, true, 1);
  CHECK(local.allowed == oracle);

  std::vector<Index> bad = {3, 0};
  CHECK_THROWS_AS(build_mask(bad, MaskKind::global, 0), ContractError);
}

TEST_CASE("masks for packed sequences match brute force up to L=64") {
  RngStream rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Index> docs;
    Index total = 0;
    while (total < 64) {
      const Index len = 1 + rng.uniform_int(0, 16);
      if (total + len > 64) break;
      docs.push_back(len);
      total += len;
    }
    if (docs.empty()) docs.push_back(1);
    const Index hw = 1 + rng.uniform_int(0, 8);
    CHECK(build_mask(docs, MaskKind::global, 0).allowed ==
          oracles::loop_mask(docs, false, 0));
    CHECK(build_mask(docs, MaskKind::local, hw).allowed ==
          oracles::loop_mask(docs, true, hw));
    // Local = document-block mask intersected with the band mask.
    const auto block = oracles::loop_mask(docs, false, 0);
    const AttentionMask band_local = build_mask(docs, MaskKind::local, hw);
    Index pos = 0;
    for (Index i = 0; i < band_local.len; ++i)
      for (Index j = 0; j < band_local.len; ++j, ++pos)
        CHECK(band_local.allowed[pos] ==
              (block[pos] && std::abs(i - j) <= hw ? 1 : 0));
  }
}

TEST_CASE("mask symmetry (bidirectional encoder)") {
  std::vector<Index> docs = {3, 4, 2};
  for (MaskKind kind : {MaskKind::global, MaskKind::local}) {
    AttentionMask m = build_mask(docs, kind, 2);
    for (Index i = 0; i < m.len; ++i)
      for (Index j = 0; j < m.len; ++j) CHECK(m.at(i, j) == m.at(j, i));
  }
}

TEST_CASE("rope: zero position identity and pair-norm preservation") {
  RngStream rng(7);
  Tensor x = random_tensor({3, 8}, rng, 1.0, false);
  RopeParams params{10000.0, 8};
  std::vector<Index> zeros_pos = {0, 0, 0};
  Tensor same = rope_apply(x, zeros_pos, params);
  for (std::size_t i = 0; i < same.values().size(); ++i)
    CHECK(same.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));

  std::vector<Index> pos = {1, 17, 403};
  Tensor rotated = rope_apply(x, pos, params);
  for (Index r = 0; r < 3; ++r)
    for (Index p = 0; p < 4; ++p) {
      const Scalar before = std::hypot(x.values()[r * 8 + 2 * p],
                                       x.values()[r * 8 + 2 * p + 1]);
      const Scalar after = std::hypot(rotated.values()[r * 8 + 2 * p],
                                      rotated.values()[r * 8 + 2 * p + 1]);
      CHECK(std::abs(before - after) < 1e-9);
    }

  RopeParams odd{10000.0, 7};
  CHECK_THROWS_AS(rope_apply(x, pos, odd), ContractError);
}

TEST_CASE("rope: attention scores depend only on relative position") {
  RngStream rng(19);
  RopeParams params{160000.0, 8};
  for (int trial = 0; trial < 30; ++trial) {
    Tensor q = random_tensor({1, 8}, rng, 1.0, false);
    Tensor k = random_tensor({1, 8}, rng, 1.0, false);
    const Index m = rng.uniform_int(0, 100);
    const Index n = rng.uniform_int(0, 100);
    const Index shift = rng.uniform_int(0, 1000);
    auto dot_at = [&](Index pm, Index pn) {
      std::vector<Index> pos_q = {pm}, pos_k = {pn};
      Tensor rq = rope_apply(q, pos_q, params);
      Tensor rk = rope_apply(k, pos_k, params);
      Scalar d = 0;
      for (int c = 0; c < 8; ++c) d += rq.values()[c] * rk.values()[c];
      return d;
    };
    CHECK(std::abs(dot_at(m, n) - dot_at(m + shift, n + shift)) < 1e-8);
  }
}

TEST_CASE("rope gradients match finite differences") {
  RngStream rng(23);
  Tensor x = random_tensor({4, 8}, rng);
  Tensor w = random_tensor({4, 8}, rng, 1.0, false);
  RopeParams params{10000.0, 4};
  std::vector<Index> pos = {0, 3, 9, 2};
  auto loss = [&] { return sum(mul(rope_apply(x, pos, params), w)); };
  CHECK(oracles::fd_max_rel_err(loss, x) < 1e-4);
}

TEST_CASE("mha: single token equals its value projection") {
  RngStream rng(29);
  const Index d = 6;
  AttnWeights w = random_weights(d, true, rng);
  Tensor x = random_tensor({1, d}, rng, 1.0, false);
  std::vector<Index> docs = {1};
  AttentionMask mask = build_mask(docs, MaskKind::global, 0);
  Tensor out = mha(x, w, 2, mask);
  // softmax over one element is 1, so out = (x Wv + bv) Wo + bo.
  Tensor expect =
      add_rowvec(matmul(add_rowvec(matmul(x, w.wv), w.bv), w.wo), w.bo);
  for (int c = 0; c < d; ++c)
    CHECK(out.values()[c] == doctest::Approx(expect.values()[c]).epsilon(1e-12));
}

TEST_CASE("mha: self-only mask makes each row depend on its own token") {
  RngStream rng(31);
  const Index d = 8, l = 4;
  AttnWeights w = random_weights(d, false, rng);
  // Each token is its own document: the block mask is the identity.
  std::vector<Index> docs = {1, 1, 1, 1};
  AttentionMask mask = build_mask(docs, MaskKind::global, 0);
  Tensor x = random_tensor({l, d}, rng, 1.0, false);
  Tensor base = mha(x, w, 2, mask);
  Tensor x2 = x.clone();
  for (int c = 0; c < d; ++c) x2.values()[2 * d + c] += 1.5;  // perturb row 2
  Tensor out = mha(x2, w, 2, mask);
  for (Index r = 0; r < l; ++r)
    for (int c = 0; c < d; ++c) {
      if (r == 2) continue;
      CHECK(out.values()[r * d + c] == base.values()[r * d + c]);
    }
}

TEST_CASE("mha matches the four-nested-loop oracle") {
  RngStream rng(37);
  for (int trial = 0; trial < 10; ++trial) {
    const Index l = 2 + rng.uniform_int(0, 7);  // up to 8
    const Index d = 8;
    const bool bias = trial % 2 == 0;
    AttnWeights w = random_weights(d, bias, rng);
    Tensor x = random_tensor({l, d}, rng, 1.0, false);
    std::vector<Index> docs;
    Index left = l;
    while (left > 0) {
      const Index len = 1 + rng.uniform_int(0, left);
      docs.push_back(len);
      left -= len;
    }
    AttentionMask mask = build_mask(docs, MaskKind::global, 0);
    Tensor out = mha(x, w, 2, mask);
    const auto oracle = oracles::loop_mha(to_loop(x, w, 2, mask));
    for (std::size_t i = 0; i < oracle.size(); ++i)
      CHECK(std::abs(out.values()[i] - oracle[i]) < 1e-8);
  }
}

TEST_CASE("attention weights: allowed rows sum to 1, disallowed get zero") {
  RngStream rng(43);
  std::vector<Index> docs = {3, 5};
  AttentionMask mask = build_mask(docs, MaskKind::global, 0);
  Tensor scores = random_tensor({8, 8}, rng, 3.0, false);
  Tensor attn = softmax_rows(add(scores, mask_bias(mask)));
  for (Index i = 0; i < 8; ++i) {
    Scalar total = 0;
    for (Index j = 0; j < 8; ++j) {
      const Scalar v = attn.values()[i * 8 + j];
      if (!mask.at(i, j)) CHECK(v < 1e-12);
      total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("disentangled attention with zero tables reduces to scaled mha") {
  RngStream rng(47);
  const Index d = 8, l = 5;
  AttnWeights w = random_weights(d, false, rng);
  Tensor x = random_tensor({l, d}, rng, 1.0, false);
  std::vector<Index> docs = {l};
  AttentionMask mask = build_mask(docs, MaskKind::global, 0);
  RelPosBuckets rel{4, Tensor::zeros({8, d})};
  Tensor dis = disentangled_attention(x, rel, w, 2, mask);

  // Content-only attention with the 1/sqrt(3 dh) scale, via the loop oracle
  // with zero positional tables.
  oracles::LoopAttnInputs in = to_loop(x, w, 2, mask);
  in.rel_k = 4;
  in.rel_table.assign(8 * d, 0.0);
  const auto oracle = oracles::loop_disentangled(in);
  for (std::size_t i = 0; i < oracle.size(); ++i)
    CHECK(std::abs(dis.values()[i] - oracle[i]) < 1e-8);
}

TEST_CASE("bucket clamp collapses distant pairs") {
  // k = 2: j = 5 and j = 9 from i = 0 land in the same bucket.
  CHECK(bucket(0, 5, 2) == bucket(0, 9, 2));
}

TEST_CASE("disentangled attention matches the triple-term loop oracle") {
  RngStream rng(53);
  for (int trial = 0; trial < 10; ++trial) {
    const Index l = 3 + rng.uniform_int(0, 6);
    const Index d = 8;
    const Index k = 1 + rng.uniform_int(0, 4);
    const bool bias = trial % 2 == 1;
    AttnWeights w = random_weights(d, bias, rng);
    Tensor x = random_tensor({l, d}, rng, 1.0, false);
    Tensor table = random_tensor({2 * k, d}, rng, 1.0, false);
    std::vector<Index> docs = {l};
    AttentionMask mask = build_mask(docs, MaskKind::global, 0);
    RelPosBuckets rel{k, table};
    Tensor out = disentangled_attention(x, rel, w, 2, mask);

    oracles::LoopAttnInputs in = to_loop(x, w, 2, mask);
    in.rel_k = k;
    in.rel_table.assign(table.values().begin(), table.values().end());
    const auto oracle = oracles::loop_disentangled(in);
    for (std::size_t i = 0; i < oracle.size(); ++i)
      CHECK(std::abs(out.values()[i] - oracle[i]) < 1e-8);
  }
}

TEST_CASE("all three mechanisms are covariant under document reorderings") {
  RngStream rng(59);
  const Index d = 8;
  const std::vector<Index> docs = {3, 2};  // swap -> {2, 3}
  const Index l = 5;
  AttnWeights w = random_weights(d, false, rng);
  Tensor x = random_tensor({l, d}, rng, 1.0, false);
  Tensor table = random_tensor({6, d}, rng, 1.0, false);

  // Permutation moving doc A (rows 0..2) after doc B (rows 3..4).
  const std::vector<Index> perm = {3, 4, 0, 1, 2};  // new row r = old perm[r]
  Tensor px = Tensor::zeros({l, d});
  for (Index r = 0; r < l; ++r)
    for (Index c = 0; c < d; ++c)
      px.values()[r * d + c] = x.values()[perm[r] * d + c];

  const std::vector<Index> swapped = {2, 3};
  // Within-document positions restart, consistent with the permutation.
  const std::vector<Index> pos = {0, 1, 2, 0, 1};
  const std::vector<Index> ppos = {0, 1, 0, 1, 2};

  for (int mechanism = 0; mechanism < 3; ++mechanism) {
    for (MaskKind kind : {MaskKind::global, MaskKind::local}) {
      if (mechanism != 1 && kind == MaskKind::local) continue;
      AttentionMask mask = build_mask(docs, kind, 1);
      AttentionMask pmask = build_mask(swapped, kind, 1);
      Tensor out, pout;
      if (mechanism == 0) {
        out = mha(x, w, 2, mask);
        pout = mha(px, w, 2, pmask);
      } else if (mechanism == 1) {
        RopeParams rope{10000.0, 4};
        out = mha(x, w, 2, mask, &rope, pos);
        pout = mha(px, w, 2, pmask, &rope, ppos);
      } else {
        RelPosBuckets rel{3, table};
        out = disentangled_attention(x, rel, w, 2, mask);
        pout = disentangled_attention(px, rel, w, 2, pmask);
      }
      for (Index r = 0; r < l; ++r)
        for (Index c = 0; c < d; ++c)
          CHECK(pout.values()[r * d + c] ==
                doctest::Approx(out.values()[perm[r] * d + c]).epsilon(1e-10));
    }
  }
}

TEST_CASE("head divisibility violations raise config errors") {
  RngStream rng(61);
  AttnWeights w = random_weights(6, false, rng);
  Tensor x = random_tensor({2, 6}, rng, 1.0, false);
  std::vector<Index> docs = {2};
  AttentionMask mask = build_mask(docs, MaskKind::global, 0);
  CHECK_THROWS_AS(mha(x, w, 4, mask), ConfigError);
}
