#include <doctest.h>

#include <cmath>

#include "enclab/errors.hpp"
#include "enclab/objectives.hpp"
#include "oracles.hpp"

using namespace enclab;

namespace {

SpecialIds specials;

std::vector<Index> content_ids(Index n, Index vocab, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<Index> ids(n);
  for (auto& id : ids) id = rng.uniform_int(SpecialIds::count, vocab);
  return ids;
}

EncoderSpec tiny_gen_spec(Index vocab) {
  EncoderSpec s;
  s.family = Family::roberta;
  s.vocab = vocab;
  s.layers = 1;
  s.hidden = 8;
  s.heads = 2;
  s.intermediate = 12;
  s.max_len = 64;
  s.glu = false;
  s.pre_norm = false;
  s.bias = true;
  return s;
}

}  // namespace

TEST_CASE("mlm_mask: degenerate sequences are refused") {
  MaskPolicy policy;
  RngStream rng(1);
  std::vector<Index> all_special = {specials.cls, specials.sep, specials.pad};
  CHECK_THROWS_AS(mlm_mask(all_special, specials, 64, policy, rng),
                  DegenerateBatchError);

  // A vanishing rate drives the corrupted count to zero, which is the same
  // degenerate outcome.
  MaskPolicy tiny = policy;
  tiny.rate = 1e-12;
  std::vector<Index> ids = content_ids(16, 64, 2);
  CHECK_THROWS_AS(mlm_mask(ids, specials, 64, tiny, rng),
                  DegenerateBatchError);
}

TEST_CASE("mlm_mask: corrupted fraction concentrates at the configured rate") {
  MaskPolicy policy;  // rate 0.30
  RngStream rng(3);
  const std::vector<Index> ids = content_ids(100000, 512, 4);
  MaskedBatch batch = mlm_mask(ids, specials, 512, policy, rng);
  Index corrupted = 0;
  for (CorruptKind k : batch.kinds)
    if (k != CorruptKind::none) ++corrupted;
  const Scalar frac = static_cast<Scalar>(corrupted) / 100000.0;
  CHECK(frac > 0.285);
  CHECK(frac < 0.315);
}

TEST_CASE("mlm_mask: labels set exactly at corrupted positions; keeps stay") {
  MaskPolicy policy;
  RngStream rng(5);
  const std::vector<Index> ids = content_ids(4000, 128, 6);
  MaskedBatch batch = mlm_mask(ids, specials, 128, policy, rng);
  int keeps = 0, masks = 0, randoms = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (batch.kinds[i] == CorruptKind::none) {
      CHECK(batch.labels[i] == batch.ignore_label);
      CHECK(batch.input_ids[i] == ids[i]);
      continue;
    }
    CHECK(batch.labels[i] == ids[i]);
    switch (batch.kinds[i]) {
      case CorruptKind::mask_tok:
        CHECK(batch.input_ids[i] == specials.mask);
        ++masks;
        break;
      case CorruptKind::random_tok:
        CHECK_FALSE(specials.is_special(batch.input_ids[i]));
        ++randoms;
        break;
      case CorruptKind::keep:
        CHECK(batch.input_ids[i] == ids[i]);
        ++keeps;
        break;
      default: break;
    }
  }
  // 80/10/10 split, loosely checked on ~1200 corrupted positions.
  CHECK(masks > 8 * keeps / 2);
  CHECK(keeps > 0);
  CHECK(randoms > 0);
}

TEST_CASE("mlm_mask: special positions are never corruption candidates") {
  MaskPolicy policy;
  policy.rate = 0.9;
  RngStream rng(7);
  std::vector<Index> ids = content_ids(64, 64, 8);
  ids[0] = specials.cls;
  ids[31] = specials.sep;
  ids[63] = specials.pad;
  MaskedBatch batch = mlm_mask(ids, specials, 64, policy, rng);
  CHECK(batch.kinds[0] == CorruptKind::none);
  CHECK(batch.kinds[31] == CorruptKind::none);
  CHECK(batch.kinds[63] == CorruptKind::none);
}

TEST_CASE("mlm_mask: independence of masking decisions (chi-square on pairs)") {
  MaskPolicy policy;  // rate 0.30
  RngStream rng(9);
  const std::vector<Index> ids = content_ids(100001, 512, 10);
  MaskedBatch batch = mlm_mask(ids, specials, 512, policy, rng);
  // 2x2 contingency over adjacent position pairs.
  double n00 = 0, n01 = 0, n10 = 0, n11 = 0;
  for (std::size_t i = 0; i + 1 < ids.size(); i += 2) {
    const bool a = batch.kinds[i] != CorruptKind::none;
    const bool b = batch.kinds[i + 1] != CorruptKind::none;
    (a ? (b ? n11 : n10) : (b ? n01 : n00)) += 1;
  }
  const double n = n00 + n01 + n10 + n11;
  const double pa = (n10 + n11) / n, pb = (n01 + n11) / n;
  auto cell = [n](double observed, double expected) {
    return (observed - n * expected) * (observed - n * expected) /
           (n * expected);
  };
  const double chi2 = cell(n00, (1 - pa) * (1 - pb)) +
                      cell(n01, (1 - pa) * pb) + cell(n10, pa * (1 - pb)) +
                      cell(n11, pa * pb);
  // df = 1; p > 0.001 corresponds to chi2 below 10.828.
  CHECK(chi2 < 10.828);
}

TEST_CASE("rtd_corrupt: labels equal the elementwise comparison oracle") {
  const Index vocab = 32;
  EncoderModel gen = build(tiny_gen_spec(vocab), 11);
  MaskPolicy policy;
  const std::vector<Index> ids = content_ids(24, vocab, 12);
  const std::vector<Index> docs = {10, 14};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RngStream rng(100 + seed);
    RtdBatch batch = rtd_corrupt(ids, docs, gen, gen.param("emb.tok"),
                                 specials, policy, rng);
    REQUIRE(batch.corrupted_ids.size() == ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      CHECK(batch.replaced[i] == (batch.corrupted_ids[i] != ids[i] ? 1 : 0));
      CHECK(batch.candidate[i] == (specials.is_special(ids[i]) ? 0 : 1));
      // Unselected positions pass through unchanged.
      if (batch.gen_labels[i] == batch.ignore_label && batch.candidate[i])
        CHECK(batch.corrupted_ids[i] == ids[i]);
    }
  }
}

TEST_CASE("rtd_corrupt: a generator locked to one token labels all selected "
          "positions replaced") {
  // Zero-layer model with a huge near-identity embedding: the tied logits
  // at masked positions saturate on the mask token itself, so the sampler
  // returns a constant wrong token.
  const Index vocab = 8;
  EncoderSpec s = tiny_gen_spec(vocab);
  s.layers = 0;
  s.hidden = vocab;
  s.heads = 1;
  EncoderModel gen = build(s, 13);
  Tensor& emb = gen.param("emb.tok");
  std::fill(emb.values().begin(), emb.values().end(), 0.0);
  for (Index i = 0; i < vocab; ++i) emb.values()[i * vocab + i] = 1e3;

  MaskPolicy policy;
  policy.rate = 0.5;
  policy.mask_p = 1.0;  // every selected position becomes the mask token
  policy.random_p = 0.0;
  policy.keep_p = 0.0;
  const std::vector<Index> ids = {5, 6, 7, 5, 6, 7, 5, 6, 7, 5, 6, 7};
  const std::vector<Index> docs = {12};
  RngStream rng(14);
  RtdBatch batch =
      rtd_corrupt(ids, docs, gen, emb, specials, policy, rng);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (batch.gen_labels[i] == batch.ignore_label) continue;
    CHECK(batch.corrupted_ids[i] == specials.mask);
    CHECK(batch.replaced[i] == 1);
  }
}

TEST_CASE("rtd_losses: uninformative and saturated discriminators") {
  RtdBatch batch;
  batch.replaced = {1, 0, 1, 0};
  batch.candidate = {1, 1, 1, 1};
  batch.gen_labels = {7, kIgnoreLabel, 9, kIgnoreLabel};
  Tensor gen_logits = Tensor::zeros({4, 16});
  Tensor flat = Tensor::zeros({4, 1});
  RtdLosses l = rtd_losses(gen_logits, flat, batch, 50.0);
  CHECK(l.disc_loss.value() == doctest::Approx(std::log(2.0)));
  CHECK(l.gen_loss.value() == doctest::Approx(std::log(16.0)));
  CHECK(l.total.value() ==
        doctest::Approx(l.gen_loss.value() + 50.0 * l.disc_loss.value()));

  Tensor sharp = Tensor::from_values({4, 1}, {40, -40, 40, -40});
  RtdLosses l2 = rtd_losses(gen_logits, sharp, batch, 50.0);
  CHECK(l2.disc_loss.value() == doctest::Approx(0.0));

  // Random instance against an extended-precision recomputation.
  RngStream rng(15);
  Tensor logits = oracles::random_tensor({4, 1}, rng, 2.0, false);
  RtdLosses l3 = rtd_losses(gen_logits, logits, batch, 50.0);
  long double total = 0.0L;
  for (int i = 0; i < 4; ++i) {
    const long double x = logits.values()[i];
    const long double t = batch.replaced[i];
    total += logl(1.0L + expl(-x)) * t + logl(1.0L + expl(x)) * (1.0L - t);
  }
  CHECK(std::abs(l3.disc_loss.value() - static_cast<Scalar>(total / 4.0L)) <
        1e-6);

  CHECK_THROWS_AS(rtd_losses(gen_logits, flat, batch, 0.0), ContractError);
}

TEST_CASE("gdes: routing is exact for single-loss backward passes") {
  const Index vocab = 16, d = 8;
  RngStream rng(17);
  GdesEmbeddings emb;
  emb.shared = oracles::random_tensor({vocab, d}, rng);
  emb.delta = Tensor::zeros({vocab, d}, true);
  const std::vector<Index> ids = {5, 6, 7, 8};

  // Generator-style loss touches only the shared table.
  emb.shared.ensure_grad();
  emb.delta.ensure_grad();
  emb.shared.zero_grad();
  emb.delta.zero_grad();
  backward(sum(embedding_lookup(emb.shared, ids)));
  GdesReport gen_rep = gdes_step_check(emb, WhichLoss::gen);
  CHECK(gen_rep.delta_grad_max_abs == 0.0);
  CHECK(gen_rep.shared_grad_max_abs > 0.0);

  // Discriminator-style loss through the effective embedding reaches only
  // the delta table.
  emb.shared.zero_grad();
  emb.delta.zero_grad();
  backward(sum(embedding_lookup(emb.effective_discriminator(), ids)));
  GdesReport disc_rep = gdes_step_check(emb, WhichLoss::disc);
  CHECK(disc_rep.shared_grad_max_abs == 0.0);
  CHECK(disc_rep.delta_grad_max_abs > 0.0);

  // A leak is an invariant breach.
  emb.shared.grad()[0] = 1.0;
  CHECK_THROWS_WITH_AS(gdes_step_check(emb, WhichLoss::disc),
                       doctest::Contains("shared"), NumericError);
}

TEST_CASE("gdes: joint loss decomposes into the two single-loss passes") {
  const Index vocab = 12, d = 6;
  RngStream rng(19);
  Tensor shared = oracles::random_tensor({vocab, d}, rng);
  Tensor delta = oracles::random_tensor({vocab, d}, rng, 0.1);
  GdesEmbeddings emb{shared, delta};
  const std::vector<Index> ids = {5, 6, 7};
  const Scalar lambda = 50.0;

  auto gen_loss = [&] { return sum(embedding_lookup(shared, ids)); };
  auto disc_loss = [&] {
    Tensor eff = emb.effective_discriminator();
    return sum(mul(embedding_lookup(eff, ids), embedding_lookup(eff, ids)));
  };

  // Two-pass recomputation oracle.
  shared.ensure_grad();
  delta.ensure_grad();
  shared.zero_grad();
  delta.zero_grad();
  backward(gen_loss());
  std::vector<Scalar> shared_gen(shared.grad().begin(), shared.grad().end());
  shared.zero_grad();
  delta.zero_grad();
  backward(disc_loss());
  std::vector<Scalar> delta_disc(delta.grad().begin(), delta.grad().end());

  // Joint pass.
  shared.zero_grad();
  delta.zero_grad();
  backward(add(gen_loss(), scale(disc_loss(), lambda)));
  for (std::size_t i = 0; i < shared_gen.size(); ++i) {
    CHECK(shared.grad()[i] == shared_gen[i]);
    CHECK(delta.grad()[i] == doctest::Approx(lambda * delta_disc[i]));
  }
}

TEST_CASE("gdes: one shared table object is visible to both sides") {
  RngStream rng(21);
  Tensor shared = oracles::random_tensor({4, 3}, rng);
  GdesEmbeddings emb{shared, Tensor::zeros({4, 3}, true)};
  CHECK(emb.shared.data_id() == shared.data_id());
  shared.values()[0] = 123.0;
  CHECK(emb.shared.values()[0] == 123.0);
  // Effective embedding starts equal to shared while delta is zero.
  Tensor eff = emb.effective_discriminator();
  for (std::size_t i = 0; i < eff.values().size(); ++i)
    CHECK(eff.values()[i] == shared.values()[i]);
}
