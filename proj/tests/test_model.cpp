#include <doctest.h>

#include <cmath>

#include "enclab/errors.hpp"
#include "enclab/model.hpp"
#include "oracles.hpp"

using namespace enclab;

namespace {

EncoderSpec tiny_spec(Family family) {
  EncoderSpec s;
  s.family = family;
  s.vocab = 64;
  s.layers = 2;
  s.hidden = 16;
  s.heads = 2;
  s.intermediate = 24;
  s.max_len = 32;
  s.norm_eps = 1e-5;
  switch (family) {
    case Family::roberta:
      s.glu = false;
      s.pre_norm = false;
      s.bias = true;
      break;
    case Family::modern:
      s.glu = true;
      s.pre_norm = true;
      s.bias = false;
      s.global_every = 3;
      s.half_window = 2;
      break;
    case Family::deberta:
      s.glu = false;
      s.pre_norm = true;
      s.bias = true;
      s.rel_k = 4;
      break;
  }
  return s;
}

std::vector<Index> range_ids(Index n, Index lo, Index hi, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<Index> ids(n);
  for (auto& id : ids) id = rng.uniform_int(lo, hi);
  return ids;
}

}  // namespace

TEST_CASE("layer kinds: first layer global, every third thereafter") {
  EncoderSpec s = tiny_spec(Family::modern);
  s.layers = 3;
  EncoderModel m = build(s, 1);
  REQUIRE(m.layer_kinds.size() == 3);
  CHECK(m.layer_kinds[0] == LayerKind::global);
  CHECK(m.layer_kinds[1] == LayerKind::local);
  CHECK(m.layer_kinds[2] == LayerKind::local);

  s.layers = 7;
  EncoderModel m7 = build(s, 1);
  for (int i = 0; i < 7; ++i)
    CHECK(m7.layer_kinds[i] ==
          (i % 3 == 0 ? LayerKind::global : LayerKind::local));
}

TEST_CASE("build is deterministic under the seed") {
  const EncoderSpec s = tiny_spec(Family::modern);
  EncoderModel a = build(s, 12345);
  EncoderModel b = build(s, 12345);
  EncoderModel c = build(s, 54321);
  REQUIRE(a.params.size() == b.params.size());
  bool any_diff = false;
  for (const auto& [name, t] : a.params) {
    const auto& tb = b.param(name);
    const auto& tc = c.param(name);
    for (std::size_t i = 0; i < t.values().size(); ++i) {
      CHECK(t.values()[i] == tb.values()[i]);
      if (t.values()[i] != tc.values()[i]) any_diff = true;
    }
  }
  CHECK(any_diff);
}

TEST_CASE("megatron-style init: output projections carry 1/sqrt(2L) scale") {
  EncoderSpec s = tiny_spec(Family::roberta);
  s.layers = 8;
  s.hidden = 64;
  s.heads = 4;
  EncoderModel m = build(s, 7);
  auto stddev = [](const Tensor& t) {
    Scalar mean = 0;
    for (Scalar v : t.values()) mean += v;
    mean /= static_cast<Scalar>(t.size());
    Scalar var = 0;
    for (Scalar v : t.values()) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<Scalar>(t.size()));
  };
  const Scalar base = stddev(m.param("layer00.attn.wq"));
  const Scalar scaled = stddev(m.param("layer00.attn.wo"));
  CHECK(base == doctest::Approx(0.02).epsilon(0.25));
  CHECK(scaled == doctest::Approx(0.02 / std::sqrt(16.0)).epsilon(0.25));
}

TEST_CASE("count_params: closed-form vs independent summation vs enumeration") {
  // Spec from the counting example: V=100, L=2, d=16, heads=2,
  // intermediate=32, glu, no bias.
  EncoderSpec s;
  s.family = Family::modern;
  s.vocab = 100;
  s.layers = 2;
  s.hidden = 16;
  s.heads = 2;
  s.intermediate = 32;
  s.glu = true;
  s.pre_norm = true;
  s.bias = false;
  s.global_every = 3;
  s.half_window = 2;
  s.max_len = 32;

  // Independent hand summation: embedding + emb norm + per layer
  // (4 d^2 attention + 2 norms + GLU up d x 2I + down I x d) + final norm.
  const Index d = 16, inter = 32, v = 100;
  const Index per_layer = 4 * d * d + 2 * d + d * (2 * inter) + inter * d;
  const Index expect = v * d + d + 2 * per_layer + d;
  CHECK(count_params(s) == expect);

  // Enumeration of the built model's tensors.
  EncoderModel m = build(s, 3);
  Index total = 0;
  for (const auto& [name, t] : m.params) total += t.size();
  CHECK(total == expect);
}

TEST_CASE("count_params: zero layers leaves embeddings and final norm") {
  EncoderSpec s = tiny_spec(Family::modern);
  s.layers = 0;
  CHECK(count_params(s) == s.vocab * s.hidden + s.hidden + s.hidden);
}

TEST_CASE("count_params: bias toggles exactly the bias slots") {
  EncoderSpec s = tiny_spec(Family::deberta);
  s.bias = true;
  const Index with_bias = count_params(s);
  EncoderSpec nb = s;
  nb.bias = false;
  // Bias slots: emb norm, per layer 4 attn + 2 norms + ffn (inter + d),
  // final norm.
  const Index slots =
      s.hidden +
      s.layers * (4 * s.hidden + 2 * s.hidden + s.intermediate + s.hidden) +
      s.hidden;
  CHECK(with_bias - count_params(nb) == slots);
}

TEST_CASE("invalid specs are refused with the failed constraint") {
  EncoderSpec s = tiny_spec(Family::modern);
  s.heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_WITH_AS(build(s, 1), doctest::Contains("divisible"),
                       ConfigError);
  EncoderSpec b = tiny_spec(Family::modern);
  b.bias = true;
  CHECK_THROWS_WITH_AS(build(b, 1), doctest::Contains("bias"), ConfigError);
  EncoderSpec k = tiny_spec(Family::deberta);
  k.rel_k = 0;
  CHECK_THROWS_AS(build(k, 1), ConfigError);
}

TEST_CASE("forward: output shape and eval determinism for all families") {
  for (Family family : {Family::roberta, Family::modern, Family::deberta}) {
    EncoderSpec s = tiny_spec(family);
    EncoderModel m = build(s, 11);
    const std::vector<Index> doc_lengths = {5, 7};
    const std::vector<Index> ids = range_ids(12, 5, s.vocab, 99);
    NoGradGuard ng;
    Tensor h1 = forward(m, ids, doc_lengths, false);
    Tensor h2 = forward(m, ids, doc_lengths, false);
    REQUIRE(h1.shape() == Shape{12, s.hidden});
    for (std::size_t i = 0; i < h1.values().size(); ++i)
      CHECK(h1.values()[i] == h2.values()[i]);
  }
}

TEST_CASE("forward: length and vocabulary violations") {
  EncoderSpec s = tiny_spec(Family::roberta);
  EncoderModel m = build(s, 1);
  const std::vector<Index> long_ids = range_ids(40, 5, s.vocab, 1);
  const std::vector<Index> long_docs = {40};
  CHECK_THROWS_AS(forward(m, long_ids, long_docs, false), ContractError);
  const std::vector<Index> bad_ids = {5, 6, 999};
  const std::vector<Index> docs = {3};
  CHECK_THROWS_WITH_AS(forward(m, bad_ids, docs, false),
                       doctest::Contains("999"), ContractError);
}

TEST_CASE("packed documents are isolated: values and exact-zero gradients") {
  for (Family family : {Family::roberta, Family::modern, Family::deberta}) {
    CAPTURE(family_name(family));
    EncoderSpec s = tiny_spec(family);
    EncoderModel m = build(s, 21);

    // Disjoint token ranges per document so embedding rows identify docs.
    std::vector<Index> ids = range_ids(6, 5, 20, 2);
    std::vector<Index> ids2 = range_ids(4, 20, 40, 3);
    std::vector<Index> packed = ids;
    packed.insert(packed.end(), ids2.begin(), ids2.end());
    const std::vector<Index> docs = {6, 4};

    // Perturbing doc 2 leaves doc 1 outputs unchanged.
    {
      NoGradGuard ng;
      Tensor base = forward(m, packed, docs, false);
      std::vector<Index> perturbed = packed;
      perturbed[7] = 41;
      perturbed[9] = 42;
      Tensor out = forward(m, perturbed, docs, false);
      for (Index r = 0; r < 6; ++r)
        for (Index c = 0; c < s.hidden; ++c)
          CHECK(std::abs(out.values()[r * s.hidden + c] -
                         base.values()[r * s.hidden + c]) < 1e-9);
    }

    // Doc-1 loss puts exactly zero gradient on doc-2 embedding rows.
    Tensor& emb = m.param("emb.tok");
    emb.ensure_grad();
    emb.zero_grad();
    Tensor h = forward(m, packed, docs, false);
    Tensor doc1 = slice_cols(transpose(h), 0, 6);  // columns 0..5 = doc 1 rows
    backward(sum(doc1));
    const Index d = s.hidden;
    for (Index tok : ids2)
      for (Index c = 0; c < d; ++c) CHECK(emb.grad()[tok * d + c] == 0.0);
    bool doc1_nonzero = false;
    for (Index tok : ids)
      for (Index c = 0; c < d; ++c)
        if (emb.grad()[tok * d + c] != 0.0) doc1_nonzero = true;
    CHECK(doc1_nonzero);
  }
}

TEST_CASE("modern family: rope theta follows the layer kind") {
  EncoderSpec s = tiny_spec(Family::modern);
  s.layers = 4;
  EncoderModel m = build(s, 5);
  for (int i = 0; i < s.layers; ++i) {
    const bool global = m.layer_kinds[i] == LayerKind::global;
    const Scalar theta = global ? s.rope_theta_global : s.rope_theta_local;
    CHECK(theta == (i % 3 == 0 ? 160000.0 : 10000.0));
  }
}

TEST_CASE("train-mode dropout changes outputs; eval mode does not use rng") {
  EncoderSpec s = tiny_spec(Family::roberta);
  s.dropout_attn_out = 0.2;
  EncoderModel m = build(s, 31);
  const std::vector<Index> ids = range_ids(8, 5, s.vocab, 4);
  const std::vector<Index> docs = {8};
  NoGradGuard ng;
  RngStream r1(100), r2(100), r3(200);
  Tensor a = forward(m, ids, docs, true, &r1);
  Tensor b = forward(m, ids, docs, true, &r2);
  Tensor c = forward(m, ids, docs, true, &r3);
  bool same_seed_equal = true, diff_seed_equal = true;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    same_seed_equal &= a.values()[i] == b.values()[i];
    diff_seed_equal &= a.values()[i] == c.values()[i];
  }
  CHECK(same_seed_equal);
  CHECK_FALSE(diff_seed_equal);
}

TEST_CASE("forward stays finite over random seeds") {
  for (Family family : {Family::roberta, Family::modern, Family::deberta}) {
    EncoderSpec s = tiny_spec(family);
    s.layers = 1;
    EncoderModel m = build(s, 41);
    NoGradGuard ng;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const std::vector<Index> ids = range_ids(10, 5, s.vocab, seed);
      const std::vector<Index> docs = {4, 6};
      Tensor h = forward(m, ids, docs, false);
      for (Scalar v : h.values()) CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("spec json round trip and hash stability") {
  for (Family family : {Family::roberta, Family::modern, Family::deberta}) {
    const EncoderSpec s = tiny_spec(family);
    const EncoderSpec back = spec_from_json(spec_to_json(s));
    CHECK(spec_hash(back) == spec_hash(s));
    CHECK(back.family == s.family);
    CHECK(back.max_len == s.max_len);
  }
  EncoderSpec a = tiny_spec(Family::modern);
  EncoderSpec b = a;
  b.half_window = 7;
  CHECK(spec_hash(a) != spec_hash(b));
}

TEST_CASE("desk default specs validate and follow the family presets") {
  for (Family family : {Family::roberta, Family::modern, Family::deberta}) {
    const EncoderSpec s = desk_spec(family);
    CHECK_NOTHROW(validate(s));
    CHECK(s.vocab == 2048);
    CHECK(s.layers == 6);
    CHECK(s.hidden == 128);
  }
  CHECK(desk_spec(Family::modern).bias == false);
  CHECK(desk_spec(Family::modern).glu == true);
  CHECK(desk_spec(Family::roberta).pre_norm == false);
  CHECK(desk_spec(Family::deberta).rel_k == 32);
}
