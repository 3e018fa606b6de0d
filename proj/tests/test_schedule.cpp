#include <doctest.h>

#include <cmath>

#include "enclab/errors.hpp"
#include "enclab/optimizer.hpp"
#include "enclab/packing.hpp"
#include "enclab/schedule.hpp"
#include "oracles.hpp"

using namespace enclab;

namespace {

TrainPlan base_plan() {
  TrainPlan p;
  p.total_tokens = 1 << 20;
  p.batch_tokens = 1 << 10;
  p.max_len = 1 << 8;
  p.peak_lr = 8e-4;
  p.warmup_tokens = 1 << 16;
  p.checkpoint_every_tokens = 1 << 18;
  p.cooldown_tokens = 1 << 16;
  p.seed = 7;
  return p;
}

}  // namespace

TEST_CASE("wsd schedule: zero start, linear warmup, stable peak") {
  TrainPlan p = base_plan();
  CHECK(wsd_lr(0, p) == 0.0);
  CHECK(wsd_lr(p.warmup_tokens, p) == p.peak_lr);
  CHECK(wsd_lr(p.warmup_tokens / 2, p) == p.peak_lr / 2);
  CHECK(wsd_lr(p.total_tokens, p) == p.peak_lr);  // no decay in the main run

  // Closed-form agreement on a dense sample of points.
  for (int i = 0; i <= 1000; ++i) {
    const Index t = static_cast<Index>(
        static_cast<double>(p.total_tokens) * i / 1000.0);
    const Scalar expect =
        t < p.warmup_tokens
            ? p.peak_lr * static_cast<Scalar>(t) / p.warmup_tokens
            : p.peak_lr;
    CHECK(std::abs(wsd_lr(t, p) - expect) <= 1e-12);
  }
}

TEST_CASE("one-sqrt schedule: delay, endpoint, quarter point") {
  const Index total = 1000000, delay = 200000;
  const Scalar peak = 3e-4;
  CHECK(one_sqrt_lr(0, delay, total, peak) == peak);
  CHECK(one_sqrt_lr(delay - 1, delay, total, peak) == peak);
  CHECK(one_sqrt_lr(total, delay, total, peak) == doctest::Approx(0.0));
  // At delay + (total - delay)/4 the value is peak * (1 - sqrt(1/4)).
  const Index quarter = delay + (total - delay) / 4;
  CHECK(one_sqrt_lr(quarter, delay, total, peak) ==
        doctest::Approx(peak / 2).epsilon(1e-12));

  for (int i = 0; i <= 1000; ++i) {
    const Index t = static_cast<Index>(static_cast<double>(total) * i / 1000.0);
    const Scalar expect =
        t < delay ? peak
                  : peak * (1.0 - std::sqrt(static_cast<Scalar>(t - delay) /
                                            static_cast<Scalar>(total - delay)));
    CHECK(std::abs(one_sqrt_lr(t, delay, total, peak) - expect) <= 1e-12);
  }
  CHECK_THROWS_AS(one_sqrt_lr(total + 1, delay, total, peak), ContractError);
  CHECK_THROWS_AS(one_sqrt_lr(0, total, total, peak), ContractError);
}

TEST_CASE("cooldown: continuous at the branch point, zero at the end") {
  TrainPlan p = base_plan();
  const Index branch = p.warmup_tokens * 3;
  const Scalar lr0 = wsd_lr(branch, p);
  CHECK(cooldown_lr(0, lr0, p.cooldown_tokens) == lr0);
  CHECK(cooldown_lr(p.cooldown_tokens, lr0, p.cooldown_tokens) == 0.0);
  for (int i = 0; i <= 1000; ++i) {
    const Index t = static_cast<Index>(
        static_cast<double>(p.cooldown_tokens) * i / 1000.0);
    const Scalar expect =
        lr0 * (1.0 - static_cast<Scalar>(t) / p.cooldown_tokens);
    CHECK(std::abs(cooldown_lr(t, lr0, p.cooldown_tokens) - expect) <= 1e-12);
  }
}

TEST_CASE("plan validation names the violated constraint") {
  TrainPlan p = base_plan();
  p.batch_tokens = p.max_len - 1;
  CHECK_THROWS_WITH_AS(validate(p), doctest::Contains("batch_tokens"),
                       ConfigError);
  TrainPlan q = base_plan();
  q.warmup_tokens = q.total_tokens;
  CHECK_THROWS_AS(validate(q), ConfigError);
  TrainPlan r = base_plan();
  r.beta2 = 1.0;
  CHECK_THROWS_AS(validate(r), ConfigError);
  CHECK_NOTHROW(validate(base_plan()));
}

TEST_CASE("adamw: zero gradients leave parameters untouched at zero decay") {
  TrainPlan p = base_plan();
  p.weight_decay = 0.0;
  std::map<std::string, Tensor> params;
  params.emplace("w", Tensor::from_values({3}, {1.0, -2.0, 0.5}, true));
  params.at("w").ensure_grad();
  AdamState st;
  adamw_step(params, st, 0.1, p);
  CHECK(params.at("w").values()[0] == 1.0);
  CHECK(params.at("w").values()[1] == -2.0);
  CHECK(params.at("w").values()[2] == 0.5);
}

TEST_CASE("adamw: single-step hand-evaluated update") {
  // p = 1, g = 1, lr = 0.1, betas (0.9, 0.98), eps 1e-6, wd 0.
  TrainPlan plan = base_plan();
  plan.beta1 = 0.9;
  plan.beta2 = 0.98;
  plan.adam_eps = 1e-6;
  plan.weight_decay = 0.0;
  std::map<std::string, Tensor> params;
  params.emplace("p", Tensor::from_values({1}, {1.0}, true));
  params.at("p").ensure_grad();
  params.at("p").grad()[0] = 1.0;
  AdamState st;
  adamw_step(params, st, 0.1, plan);
  // m = 0.1, v = 0.02; mhat = 1, vhat = 1; p' = 1 - 0.1 * 1 / (1 + 1e-6).
  const Scalar expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-6));
  CHECK(params.at("p").values()[0] == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("adamw: decoupled decay is a pure multiplicative shrink") {
  TrainPlan plan = base_plan();
  plan.weight_decay = 0.01;
  const Scalar lr = 0.05;
  std::map<std::string, Tensor> params;
  params.emplace("w", Tensor::from_values({2}, {3.0, -4.0}, true));
  params.at("w").ensure_grad();
  AdamState st;
  const int n = 17;
  for (int i = 0; i < n; ++i) {
    params.at("w").zero_grad();
    adamw_step(params, st, lr, plan);
  }
  const Scalar factor = std::pow(1.0 - lr * plan.weight_decay, n);
  CHECK(std::abs(params.at("w").values()[0] - 3.0 * factor) < 1e-12);
  CHECK(std::abs(params.at("w").values()[1] + 4.0 * factor) < 1e-12);
  // Parameter norm follows norm * (1 - lr wd)^n.
  const Scalar norm = std::hypot(params.at("w").values()[0],
                                 params.at("w").values()[1]);
  CHECK(std::abs(norm - 5.0 * factor) < 1e-12);
}

TEST_CASE("adamw: non-finite gradients abort with step and tensor name") {
  TrainPlan plan = base_plan();
  std::map<std::string, Tensor> params;
  params.emplace("bad_tensor", Tensor::from_values({1}, {1.0}, true));
  params.at("bad_tensor").ensure_grad();
  params.at("bad_tensor").grad()[0] = std::nan("");
  AdamState st;
  CHECK_THROWS_WITH_AS(adamw_step(params, st, 0.1, plan),
                       doctest::Contains("bad_tensor"), NumericError);
}

TEST_CASE("clip_global_norm: rescales only above the threshold") {
  std::map<std::string, Tensor> params;
  params.emplace("a", Tensor::from_values({2}, {3.0, 0.0}, true));
  params.emplace("b", Tensor::from_values({1}, {4.0}, true));
  for (auto& [n, t] : params) {
    t.ensure_grad();
    auto g = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = t.values()[i];
  }
  const Scalar norm = clip_global_norm(params, 1.0);  // norm = 5
  CHECK(norm == doctest::Approx(5.0));
  CHECK(params.at("a").grad()[0] == doctest::Approx(0.6));
  CHECK(params.at("b").grad()[0] == doctest::Approx(0.8));
  // Below the threshold nothing changes.
  const Scalar small = clip_global_norm(params, 10.0);
  CHECK(small == doctest::Approx(1.0));
  CHECK(params.at("a").grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("pack: first-fit-decreasing worked example") {
  std::vector<TokenizedDoc> docs(3);
  docs[0] = {"a", std::vector<Index>(600, 9)};
  docs[1] = {"b", std::vector<Index>(600, 9)};
  docs[2] = {"c", std::vector<Index>(400, 9)};
  RngStream rng(1);
  auto packs = pack(docs, 1024, rng);
  REQUIRE(packs.size() == 2);
  // One pack holds 600 + 400, the other 600 with pad 424.
  std::vector<Index> sizes;
  for (const auto& p : packs)
    sizes.push_back(static_cast<Index>(p.ids.size()));
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes[0] == 600);
  CHECK(sizes[1] == 1000);
  for (const auto& p : packs) {
    if (p.ids.size() == 600) CHECK(p.pad == 424);
    if (p.ids.size() == 1000) CHECK(p.pad == 24);
  }
}

TEST_CASE("pack: full single document and unit documents") {
  RngStream rng(2);
  std::vector<TokenizedDoc> one(1);
  one[0] = {"full", std::vector<Index>(128, 3)};
  auto packs = pack(one, 128, rng);
  REQUIRE(packs.size() == 1);
  CHECK(packs[0].pad == 0);

  std::vector<TokenizedDoc> units(300);
  for (int i = 0; i < 300; ++i)
    units[i] = {"u" + std::to_string(i), {Index(7)}};
  auto upacks = pack(units, 64, rng);
  CHECK(upacks.size() == (300 + 63) / 64);
}

TEST_CASE("pack: conservation, uniqueness, and the naive-padding bound") {
  RngStream seedrng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<TokenizedDoc> docs;
    Index total = 0;
    const Index n = 20 + seedrng.uniform_int(0, 40);
    for (Index i = 0; i < n; ++i) {
      const Index len = 1 + seedrng.uniform_int(0, 64);
      docs.push_back({"d" + std::to_string(i),
                      std::vector<Index>(static_cast<std::size_t>(len), 5)});
      total += len;
    }
    RngStream rng(trial);
    auto packs = pack(docs, 64, rng);
    Index packed_total = 0;
    std::set<std::string> seen;
    for (const auto& p : packs) {
      packed_total += static_cast<Index>(p.ids.size());
      Index doc_sum = 0;
      for (Index dl : p.doc_lengths) doc_sum += dl;
      CHECK(doc_sum + p.pad == 64);
      CHECK(doc_sum == static_cast<Index>(p.ids.size()));
      for (const auto& id : p.doc_ids) CHECK(seen.insert(id).second);
    }
    CHECK(packed_total == total);
    CHECK(seen.size() == docs.size());
    // FFD never pads more than one-doc-per-pack batching.
    const Scalar ffd_pad = pad_fraction(packs, 64);
    const Scalar naive_pad =
        1.0 - static_cast<Scalar>(total) / (64.0 * static_cast<Scalar>(n));
    CHECK(ffd_pad <= naive_pad + 1e-12);
  }
}

TEST_CASE("pack: contract violations") {
  RngStream rng(4);
  std::vector<TokenizedDoc> empty;
  CHECK_THROWS_AS(pack(empty, 64, rng), DegenerateBatchError);
  std::vector<TokenizedDoc> overlong(1);
  overlong[0] = {"big", std::vector<Index>(65, 1)};
  CHECK_THROWS_WITH_AS(pack(overlong, 64, rng), doctest::Contains("big"),
                       ContractError);
}
