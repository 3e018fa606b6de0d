#include "enclab/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "enclab/errors.hpp"
#include "enclab/optimizer.hpp"

namespace enclab {

namespace {

std::vector<Index> wrap(const std::vector<Index>& body, const Vocab& v) {
  std::vector<Index> ids;
  ids.reserve(body.size() + 2);
  ids.push_back(v.specials.cls);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(v.specials.sep);
  return ids;
}

int entity_type_index(const std::string& type) {
  if (type == "per") return 0;
  if (type == "loc") return 1;
  if (type == "org") return 2;
  throw DataError("unknown entity type: " + type);
}

std::size_t train_cut(std::size_t n) { return (n * 3) / 5; }

}  // namespace

TokenClsSet make_token_cls(const std::vector<DocumentRecord>& corpus,
                           const Vocab& vocab, std::size_t max_items,
                           Index max_len) {
  TokenClsSet set;
  for (const DocumentRecord& rec : corpus) {
    if (set.ids.size() >= max_items) break;
    if (!rec.annotations.contains("entities")) continue;
    std::vector<Index> body = tokenize(rec.text, vocab);
    if (static_cast<Index>(body.size()) + 2 > max_len) continue;
    std::vector<Index> ids = wrap(body, vocab);
    std::vector<int> labels(ids.size(), 0);
    for (const auto& e : rec.annotations["entities"]) {
      const Index s = e.at("start").get<Index>() + 1;  // shift past cls
      const Index t = e.at("end").get<Index>() + 1;
      const int ti = entity_type_index(e.at("type").get<std::string>());
      if (t > static_cast<Index>(ids.size()) - 1)
        throw DataError("entity span outside document in " + rec.id);
      labels[static_cast<std::size_t>(s)] = 1 + 2 * ti;  // B-
      for (Index k = s + 1; k < t; ++k)
        labels[static_cast<std::size_t>(k)] = 2 + 2 * ti;  // I-
    }
    set.ids.push_back(std::move(ids));
    set.labels.push_back(std::move(labels));
  }
  set.n_train = train_cut(set.ids.size());
  return set;
}

SpanQaSet make_span_qa(const std::vector<DocumentRecord>& corpus,
                       const Vocab& vocab, std::size_t max_items,
                       Index max_len) {
  SpanQaSet set;
  for (const DocumentRecord& rec : corpus) {
    if (set.items.size() >= max_items) break;
    if (!rec.annotations.contains("qa")) continue;
    const auto& qa = rec.annotations["qa"];
    std::vector<Index> q = tokenize(qa.at("question").get<std::string>(), vocab);
    std::vector<Index> ctx = tokenize(rec.text, vocab);
    const Index total = static_cast<Index>(q.size() + ctx.size()) + 3;
    if (total > max_len) continue;
    SpanQaItem item;
    item.ids.push_back(vocab.specials.cls);
    item.ids.insert(item.ids.end(), q.begin(), q.end());
    item.ids.push_back(vocab.specials.sep);
    item.ctx_begin = static_cast<Index>(item.ids.size());
    item.ids.insert(item.ids.end(), ctx.begin(), ctx.end());
    item.ctx_end = static_cast<Index>(item.ids.size());
    item.ids.push_back(vocab.specials.sep);
    const Index a0 = qa.at("answer_start").get<Index>();
    const Index a1 = qa.at("answer_end").get<Index>();  // exclusive
    item.answer_start = item.ctx_begin + a0;
    item.answer_end = item.ctx_begin + a1 - 1;
    if (item.answer_start < item.ctx_begin || item.answer_end >= item.ctx_end ||
        item.answer_start > item.answer_end)
      throw DataError("qa answer span outside context in " + rec.id);
    set.items.push_back(std::move(item));
  }
  set.n_train = train_cut(set.items.size());
  return set;
}

namespace {

SeqClsSet make_single_or_pair(const std::vector<DocumentRecord>& corpus,
                              const Vocab& vocab, std::size_t max_items,
                              Index max_len, const char* anno_key,
                              const char* text_key, const char* label_key,
                              int n_labels) {
  SeqClsSet set;
  set.n_labels = n_labels;
  for (const DocumentRecord& rec : corpus) {
    if (set.ids.size() >= max_items) break;
    std::vector<Index> ids;
    int label;
    if (anno_key == nullptr) {
      if (!rec.annotations.contains("topic")) continue;
      ids = wrap(tokenize(rec.text, vocab), vocab);
      label = rec.annotations["topic"].get<int>();
    } else {
      if (!rec.annotations.contains(anno_key)) continue;
      const auto& a = rec.annotations[anno_key];
      std::vector<Index> s1 = tokenize(rec.text, vocab);
      std::vector<Index> s2 = tokenize(a.at(text_key).get<std::string>(), vocab);
      ids.push_back(vocab.specials.cls);
      ids.insert(ids.end(), s1.begin(), s1.end());
      ids.push_back(vocab.specials.sep);
      ids.insert(ids.end(), s2.begin(), s2.end());
      ids.push_back(vocab.specials.sep);
      label = a.at(label_key).get<int>();
    }
    if (static_cast<Index>(ids.size()) > max_len) continue;
    if (label < 0 || label >= n_labels)
      throw DataError("label out of range in " + rec.id);
    set.ids.push_back(std::move(ids));
    set.labels.push_back(label);
  }
  set.n_train = train_cut(set.ids.size());
  return set;
}

}  // namespace

SeqClsSet make_seq_cls(const std::vector<DocumentRecord>& corpus,
                       const Vocab& vocab, std::size_t max_items,
                       Index max_len) {
  return make_single_or_pair(corpus, vocab, max_items, max_len, nullptr,
                             nullptr, nullptr, 3);
}

SeqClsSet make_pair_cls(const std::vector<DocumentRecord>& corpus,
                        const Vocab& vocab, std::size_t max_items,
                        Index max_len) {
  return make_single_or_pair(corpus, vocab, max_items, max_len, "pair",
                             "text2", "label", 2);
}

SeqClsSet make_nli(const std::vector<DocumentRecord>& corpus,
                   const Vocab& vocab, std::size_t max_items, Index max_len) {
  return make_single_or_pair(corpus, vocab, max_items, max_len, "nli",
                             "hypothesis", "label", 3);
}

RetrievalSet make_retrieval(const std::vector<DocumentRecord>& corpus,
                            const Vocab& vocab, std::size_t max_docs,
                            std::size_t max_queries, Index max_len) {
  RetrievalSet set;
  for (const DocumentRecord& rec : corpus) {
    if (set.docs.size() >= max_docs) break;
    std::vector<Index> ids = wrap(tokenize(rec.text, vocab), vocab);
    if (static_cast<Index>(ids.size()) > max_len) continue;
    set.docs.emplace_back(rec.id, std::move(ids));
    if (set.queries.size() < max_queries && rec.annotations.contains("query")) {
      std::vector<Index> qids = wrap(
          tokenize(rec.annotations["query"].get<std::string>(), vocab), vocab);
      const std::string qid = "q-" + rec.id;
      set.queries.emplace_back(qid, std::move(qids));
      set.qrels[qid][rec.id] = 1.0;
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Metrics

Scalar span_set_f1(const std::set<Span>& predicted,
                   const std::set<Span>& gold) {
  if (predicted.empty() && gold.empty()) return 1.0;
  if (predicted.empty() || gold.empty()) return 0.0;
  std::size_t tp = 0;
  for (const Span& s : predicted) tp += gold.count(s);
  const Scalar p = static_cast<Scalar>(tp) / predicted.size();
  const Scalar r = static_cast<Scalar>(tp) / gold.size();
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

QaScore qa_em_f1(Index ps, Index pe, Index gs, Index ge) {
  if (ps > pe || gs > ge) throw ContractError("qa_em_f1: inverted span");
  QaScore s;
  s.em = (ps == gs && pe == ge) ? 1.0 : 0.0;
  const Index overlap = std::max<Index>(0, std::min(pe, ge) - std::max(ps, gs) + 1);
  if (overlap == 0) {
    s.f1 = 0.0;
    return s;
  }
  const Scalar plen = static_cast<Scalar>(pe - ps + 1);
  const Scalar glen = static_cast<Scalar>(ge - gs + 1);
  s.f1 = 2.0 * static_cast<Scalar>(overlap) / (plen + glen);
  return s;
}

Scalar ndcg_at_k(const std::vector<std::string>& ranked,
                 const std::map<std::string, Scalar>& gains, int k) {
  if (k < 1) throw ContractError("ndcg_at_k: k must be >= 1");
  if (gains.empty()) throw ContractError("ndcg_at_k: empty gain set");
  {
    std::set<std::string> seen;
    for (const std::string& id : ranked)
      if (!seen.insert(id).second)
        throw ContractError("ndcg_at_k: duplicate id in ranking: " + id);
  }
  Scalar dcg = 0.0;
  const std::size_t top = std::min<std::size_t>(ranked.size(), k);
  for (std::size_t r = 0; r < top; ++r) {
    auto it = gains.find(ranked[r]);
    if (it != gains.end())
      dcg += it->second / std::log2(static_cast<Scalar>(r) + 2.0);
  }
  std::vector<Scalar> g;
  g.reserve(gains.size());
  for (const auto& [id, gain] : gains) g.push_back(gain);
  std::sort(g.begin(), g.end(), std::greater<>());
  Scalar idcg = 0.0;
  for (std::size_t r = 0; r < std::min<std::size_t>(g.size(), k); ++r)
    idcg += g[r] / std::log2(static_cast<Scalar>(r) + 2.0);
  if (idcg <= 0.0) throw ContractError("ndcg_at_k: no positive gains");
  return dcg / idcg;
}

// ---------------------------------------------------------------------------
// Probe head machinery

namespace {

std::vector<Tensor> extract_features(const EncoderModel& model,
                                     const std::vector<std::vector<Index>>& ids) {
  NoGradGuard ng;
  std::vector<Tensor> feats;
  feats.reserve(ids.size());
  for (const auto& seq : ids) {
    const std::vector<Index> lens = {static_cast<Index>(seq.size())};
    feats.push_back(forward(model, seq, lens, /*train_mode=*/false));
  }
  return feats;
}

TrainPlan head_plan() {
  TrainPlan p;
  p.total_tokens = 1;
  p.batch_tokens = 1;
  p.max_len = 1;
  p.warmup_tokens = 0;
  p.beta1 = 0.9;
  p.beta2 = 0.999;
  p.adam_eps = 1e-8;
  p.weight_decay = 0.0;
  p.clip_norm = 1e9;
  return p;
}

struct HeadTrainer {
  std::map<std::string, Tensor> params;
  AdamState adam;
  TrainPlan plan = head_plan();
  bool diverged = false;
  Index total_steps = 0;
  Index taken = 0;
  Scalar lr = 0;

  void add(const std::string& name, Shape shape, RngStream& rng,
           bool zero_init = false) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    if (!zero_init)
      for (auto& v : t.values()) v = 0.02 * rng.normal();
    params.emplace(name, std::move(t));
  }

  // One example per update with linearly decayed lr.
  void step(const Tensor& loss) {
    if (diverged) return;
    if (!std::isfinite(loss.value())) {
      diverged = true;
      return;
    }
    for (auto& [n, t] : params) {
      t.ensure_grad();
      t.zero_grad();
    }
    backward(loss);
    const Scalar decayed =
        lr * (1.0 - static_cast<Scalar>(taken) /
                        static_cast<Scalar>(std::max<Index>(1, total_steps)));
    adamw_step(params, adam, decayed, plan);
    ++taken;
  }
};

std::vector<std::size_t> shuffled(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(
                                rng.uniform_int(0, static_cast<Index>(i)))]);
  return order;
}

std::set<Span> decode_bio(const std::vector<int>& labels) {
  std::set<Span> spans;
  std::size_t i = 0;
  while (i < labels.size()) {
    if (labels[i] == 0) {
      ++i;
      continue;
    }
    const int type = (labels[i] - 1) / 2;
    const std::size_t start = i;
    ++i;
    while (i < labels.size() && labels[i] == 2 + 2 * type) ++i;
    spans.emplace(static_cast<Index>(start), static_cast<Index>(i), type);
  }
  return spans;
}

}  // namespace

ProbeResult probe_token_cls(const EncoderModel& model, const TokenClsSet& data,
                            std::uint64_t seed, const ProbeRecipe& recipe,
                            Index checkpoint_tokens) {
  if (data.ids.empty()) throw DataError("probe_token_cls: empty dataset");
  const Index d = model.spec.hidden;
  std::vector<Tensor> feats = extract_features(model, data.ids);

  Scalar best = -1.0;
  bool all_diverged = true;
  for (Scalar lr : recipe.lrs) {
    RngStream rng = derive_stream(seed, "probe-token", std::uint64_t(lr * 1e9));
    HeadTrainer head;
    head.lr = lr;
    head.total_steps =
        static_cast<Index>(recipe.epochs) * static_cast<Index>(data.n_train);
    head.add("w", {d, data.n_labels}, rng);
    head.add("b", {static_cast<Index>(data.n_labels)}, rng, true);
    for (int e = 0; e < recipe.epochs && !head.diverged; ++e) {
      for (std::size_t i : shuffled(data.n_train, rng)) {
        std::vector<Index> lbl(data.labels[i].begin(), data.labels[i].end());
        Tensor logits = add_rowvec(matmul(feats[i], head.params.at("w")),
                                   head.params.at("b"));
        head.step(cross_entropy(logits, lbl, kIgnoreLabel));
        if (head.diverged) break;
      }
    }
    if (head.diverged) continue;
    all_diverged = false;

    std::size_t tp = 0, fp = 0, fn = 0;
    {
      NoGradGuard ng;
      for (std::size_t i = data.n_train; i < data.ids.size(); ++i) {
        Tensor logits = add_rowvec(matmul(feats[i], head.params.at("w")),
                                   head.params.at("b"));
        const auto lv = logits.values();
        std::vector<int> pred(data.ids[i].size(), 0);
        for (std::size_t r = 0; r < pred.size(); ++r) {
          int arg = 0;
          for (int c = 1; c < data.n_labels; ++c)
            if (lv[r * data.n_labels + c] > lv[r * data.n_labels + arg])
              arg = c;
          pred[r] = arg;
        }
        const std::set<Span> p = decode_bio(pred);
        const std::set<Span> g = decode_bio(data.labels[i]);
        for (const Span& s : p)
          g.count(s) ? ++tp : ++fp;
        for (const Span& s : g)
          if (!p.count(s)) ++fn;
      }
    }
    const Scalar f1 =
        (2 * tp + fp + fn) == 0
            ? 1.0
            : 2.0 * static_cast<Scalar>(tp) / static_cast<Scalar>(2 * tp + fp + fn);
    best = std::max(best, f1);
  }

  ProbeResult res;
  res.task = "token_cls";
  res.metric = "F1";
  res.seed = seed;
  res.checkpoint_tokens = checkpoint_tokens;
  res.diverged = all_diverged;
  res.value = all_diverged ? 0.0 : best;
  return res;
}

std::vector<ProbeResult> probe_span_qa(const EncoderModel& model,
                                       const SpanQaSet& data,
                                       std::uint64_t seed,
                                       const ProbeRecipe& recipe,
                                       Index checkpoint_tokens) {
  if (data.items.empty()) throw DataError("probe_span_qa: empty dataset");
  const Index d = model.spec.hidden;
  std::vector<std::vector<Index>> all_ids;
  all_ids.reserve(data.items.size());
  for (const auto& item : data.items) all_ids.push_back(item.ids);
  std::vector<Tensor> feats = extract_features(model, all_ids);

  Scalar best_f1 = -1.0, best_em = -1.0;
  bool all_diverged = true;
  for (Scalar lr : recipe.lrs) {
    RngStream rng = derive_stream(seed, "probe-qa",
                                  std::uint64_t(lr * 1e9));
    HeadTrainer head;
    head.lr = lr;
    head.total_steps =
        static_cast<Index>(recipe.epochs) * static_cast<Index>(data.n_train);
    head.add("ws", {d, 1}, rng);
    head.add("we", {d, 1}, rng);
    for (int e = 0; e < recipe.epochs && !head.diverged; ++e) {
      for (std::size_t i : shuffled(data.n_train, rng)) {
        const SpanQaItem& item = data.items[i];
        Tensor ls = transpose(matmul(feats[i], head.params.at("ws")));
        Tensor le = transpose(matmul(feats[i], head.params.at("we")));
        const std::vector<Index> s_label = {item.answer_start};
        const std::vector<Index> e_label = {item.answer_end};
        Tensor loss = add(cross_entropy(ls, s_label, kIgnoreLabel),
                          cross_entropy(le, e_label, kIgnoreLabel));
        head.step(loss);
        if (head.diverged) break;
      }
    }
    if (head.diverged) continue;
    all_diverged = false;

    Scalar f1_sum = 0, em_sum = 0;
    std::size_t n_test = 0;
    {
      NoGradGuard ng;
      for (std::size_t i = data.n_train; i < data.items.size(); ++i) {
        const SpanQaItem& item = data.items[i];
        Tensor ls = matmul(feats[i], head.params.at("ws"));
        Tensor le = matmul(feats[i], head.params.at("we"));
        const auto sv = ls.values();
        const auto ev = le.values();
        // Best (start, end) pair with end in [start, start + 8).
        Index bs = item.ctx_begin, be = item.ctx_begin;
        Scalar best_score = -1e300;
        for (Index s = item.ctx_begin; s < item.ctx_end; ++s)
          for (Index t = s; t < std::min(item.ctx_end, s + 8); ++t) {
            const Scalar sc = sv[s] + ev[t];
            if (sc > best_score) {
              best_score = sc;
              bs = s;
              be = t;
            }
          }
        const QaScore q = qa_em_f1(bs, be, item.answer_start, item.answer_end);
        f1_sum += q.f1;
        em_sum += q.em;
        ++n_test;
      }
    }
    if (n_test > 0) {
      best_f1 = std::max(best_f1, f1_sum / static_cast<Scalar>(n_test));
      best_em = std::max(best_em, em_sum / static_cast<Scalar>(n_test));
    }
  }

  ProbeResult f1res;
  f1res.task = "span_qa";
  f1res.metric = "F1";
  f1res.seed = seed;
  f1res.checkpoint_tokens = checkpoint_tokens;
  f1res.diverged = all_diverged;
  f1res.value = all_diverged ? 0.0 : best_f1;
  ProbeResult emres = f1res;
  emres.metric = "EM";
  emres.value = all_diverged ? 0.0 : best_em;
  return {f1res, emres};
}

ProbeResult probe_seq_cls(const EncoderModel& model, const SeqClsSet& data,
                          const std::string& task, std::uint64_t seed,
                          const ProbeRecipe& recipe, Index checkpoint_tokens) {
  if (data.ids.empty()) throw DataError("probe_seq_cls: empty dataset");
  const Index d = model.spec.hidden;
  std::vector<Tensor> feats = extract_features(model, data.ids);

  Scalar best = -1.0;
  bool all_diverged = true;
  for (Scalar lr : recipe.lrs) {
    RngStream rng = derive_stream(seed, "probe-seq", std::uint64_t(lr * 1e9));
    HeadTrainer head;
    head.lr = lr;
    head.total_steps =
        static_cast<Index>(recipe.epochs) * static_cast<Index>(data.n_train);
    head.add("w", {d, data.n_labels}, rng);
    head.add("b", {static_cast<Index>(data.n_labels)}, rng, true);
    for (int e = 0; e < recipe.epochs && !head.diverged; ++e) {
      for (std::size_t i : shuffled(data.n_train, rng)) {
        // First-token pooled representation.
        Tensor pooled = slice_cols(transpose(feats[i]), 0, 1);
        Tensor logits = add_rowvec(matmul(transpose(pooled), head.params.at("w")),
                                   head.params.at("b"));
        const std::vector<Index> lbl = {data.labels[i]};
        head.step(cross_entropy(logits, lbl, kIgnoreLabel));
        if (head.diverged) break;
      }
    }
    if (head.diverged) continue;
    all_diverged = false;

    std::size_t correct = 0, total = 0;
    {
      NoGradGuard ng;
      for (std::size_t i = data.n_train; i < data.ids.size(); ++i) {
        Tensor pooled = slice_cols(transpose(feats[i]), 0, 1);
        Tensor logits = add_rowvec(matmul(transpose(pooled), head.params.at("w")),
                                   head.params.at("b"));
        const auto lv = logits.values();
        int arg = 0;
        for (int c = 1; c < data.n_labels; ++c)
          if (lv[c] > lv[arg]) arg = c;
        correct += arg == data.labels[i] ? 1 : 0;
        ++total;
      }
    }
    if (total > 0)
      best = std::max(best, static_cast<Scalar>(correct) /
                                static_cast<Scalar>(total));
  }

  ProbeResult res;
  res.task = task;
  res.metric = "Acc";
  res.seed = seed;
  res.checkpoint_tokens = checkpoint_tokens;
  res.diverged = all_diverged;
  res.value = all_diverged ? 0.0 : best;
  return res;
}

std::vector<Scalar> mean_pool(const EncoderModel& model,
                              std::span<const Index> ids) {
  if (ids.empty()) throw ContractError("mean_pool: empty document");
  NoGradGuard ng;
  const std::vector<Index> lens = {static_cast<Index>(ids.size())};
  Tensor h = forward(model, ids, lens, /*train_mode=*/false);
  const Index d = h.dim(1);
  const Index l = h.dim(0);
  std::vector<Scalar> pooled(static_cast<std::size_t>(d), 0.0);
  const auto hv = h.values();
  for (Index r = 0; r < l; ++r)
    for (Index c = 0; c < d; ++c) pooled[c] += hv[r * d + c];
  Scalar norm = 0.0;
  for (Scalar& v : pooled) {
    v /= static_cast<Scalar>(l);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm == 0.0) throw ContractError("mean_pool: zero representation");
  for (Scalar& v : pooled) v /= norm;
  return pooled;
}

RetrievalReport retrieval_eval(const EncoderModel& model,
                               const RetrievalSet& data,
                               Index checkpoint_tokens) {
  if (data.docs.empty() || data.queries.empty())
    throw DataError("retrieval_eval: empty doc or query set");
  std::vector<std::vector<Scalar>> doc_emb;
  doc_emb.reserve(data.docs.size());
  for (const auto& [id, ids] : data.docs)
    doc_emb.push_back(mean_pool(model, ids));

  Scalar total = 0.0;
  std::size_t evaluated = 0, skipped = 0;
  for (const auto& [qid, qids] : data.queries) {
    auto qit = data.qrels.find(qid);
    if (qit == data.qrels.end() || qit->second.empty()) {
      ++skipped;
      continue;
    }
    const std::vector<Scalar> q = mean_pool(model, qids);
    std::vector<std::pair<Scalar, std::string>> scored;
    scored.reserve(data.docs.size());
    for (std::size_t i = 0; i < data.docs.size(); ++i) {
      Scalar dot = 0.0;
      for (std::size_t c = 0; c < q.size(); ++c) dot += q[c] * doc_emb[i][c];
      scored.emplace_back(dot, data.docs[i].first);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<std::string> ranked;
    ranked.reserve(scored.size());
    for (const auto& [s, id] : scored) ranked.push_back(id);
    total += ndcg_at_k(ranked, qit->second, 10);
    ++evaluated;
  }
  if (evaluated == 0) throw DataError("retrieval_eval: no evaluable queries");

  RetrievalReport rep;
  rep.result.task = "retrieval";
  rep.result.metric = "NDCG@10";
  rep.result.value = total / static_cast<Scalar>(evaluated);
  rep.result.checkpoint_tokens = checkpoint_tokens;
  rep.skipped_queries = skipped;
  return rep;
}

std::vector<CurvePoint> efficiency_curve(
    const std::vector<ProbeResult>& results) {
  std::map<Index, std::vector<Scalar>> groups;
  for (const ProbeResult& r : results)
    if (!r.diverged) groups[r.checkpoint_tokens].push_back(r.value);
  std::vector<CurvePoint> curve;
  for (const auto& [tokens, values] : groups) {
    CurvePoint p;
    p.tokens = tokens;
    p.n = static_cast<int>(values.size());
    for (Scalar v : values) p.mean += v;
    p.mean /= static_cast<Scalar>(values.size());
    for (Scalar v : values) p.stddev += (v - p.mean) * (v - p.mean);
    p.stddev = std::sqrt(p.stddev / static_cast<Scalar>(values.size()));
    curve.push_back(p);
  }
  return curve;  // std::map iteration is already sorted by tokens
}

std::vector<ProbeResult> probe_checkpoints(
    const std::vector<Checkpoint>& checkpoints,
    const std::function<std::vector<ProbeResult>(const EncoderModel&, Index)>&
        probe) {
  std::vector<ProbeResult> all;
  for (const Checkpoint& ckpt : checkpoints) {
    if (ckpt.phase != Phase::cooled)
      throw ContractError(
          "probe_checkpoints: checkpoint at " +
          std::to_string(ckpt.tokens_seen) +
          " tokens is not cooled; intermediate checkpoints must be cooled "
          "before evaluation so comparisons across checkpoints are fair");
    EncoderModel model = eval_encoder(ckpt);
    std::vector<ProbeResult> res = probe(model, ckpt.tokens_seen);
    all.insert(all.end(), res.begin(), res.end());
  }
  return all;
}

// ---------------------------------------------------------------------------
// Throughput

std::string batch_mode_name(BatchMode m) {
  return m == BatchMode::packed ? "packed" : "padded";
}

ThroughputReport throughput_bench(const EncoderModel& model,
                                  const std::vector<TokenizedDoc>& docs,
                                  BatchMode mode, double duration_s,
                                  Index max_len, Index pad_id) {
  using Clock = std::chrono::steady_clock;
  if (docs.empty()) throw DataError("throughput_bench: empty corpus");
  if (max_len > model.spec.max_len)
    throw ConfigError("throughput_bench: max_len exceeds model max_len");

  struct Seq {
    std::vector<Index> ids;
    std::vector<Index> doc_lengths;
    Index non_pad = 0;
    Index pad = 0;
  };
  std::vector<Seq> seqs;
  if (mode == BatchMode::packed) {
    RngStream rng = derive_stream(0, "bench-pack");
    for (const PackedBatch& pb : pack(docs, max_len, rng)) {
      Seq s;
      s.ids = pb.ids;
      s.doc_lengths = pb.doc_lengths;
      s.non_pad = static_cast<Index>(pb.ids.size());
      s.pad = pb.pad;
      seqs.push_back(std::move(s));
    }
  } else {
    for (const TokenizedDoc& d : docs) {
      const Index len = static_cast<Index>(d.tokens.size());
      if (len > max_len)
        throw ContractError("throughput_bench: document " + d.id +
                            " longer than max_len");
      Seq s;
      s.ids = d.tokens;
      s.doc_lengths = {len};
      if (len < max_len) {
        // The pad tail rides along as a pseudo-document: compute is spent
        // on it, which is exactly what packed batching eliminates.
        s.ids.resize(static_cast<std::size_t>(max_len), pad_id);
        s.doc_lengths.push_back(max_len - len);
      }
      s.non_pad = len;
      s.pad = max_len - len;
      seqs.push_back(std::move(s));
    }
  }

  NoGradGuard ng;
  auto run_one = [&model](const Seq& s) {
    forward(model, s.ids, s.doc_lengths, /*train_mode=*/false);
  };
  // Warmup, excluded from timing.
  for (std::size_t w = 0; w < 2; ++w) run_one(seqs[w % seqs.size()]);

  const auto start = Clock::now();
  int iterations = 0;
  Index non_pad = 0, pad = 0;
  std::size_t cursor = 0;
  double elapsed = 0;
  while (elapsed < duration_s) {
    const Seq& s = seqs[cursor];
    run_one(s);
    non_pad += s.non_pad;
    pad += s.pad;
    ++iterations;
    cursor = (cursor + 1) % seqs.size();
    elapsed = std::chrono::duration<double>(Clock::now() - start).count();
  }
  if (iterations < 10)
    throw MeasurementError("throughput_bench: only " +
                           std::to_string(iterations) +
                           " iterations fit in " + std::to_string(duration_s) +
                           "s; need at least 10");

  ThroughputReport rep;
  rep.mode = batch_mode_name(mode);
  rep.iterations = iterations;
  rep.wall_s = elapsed;
  rep.non_pad_tokens = non_pad;
  rep.tokens_per_sec = static_cast<Scalar>(non_pad) / elapsed;
  rep.pad_frac = static_cast<Scalar>(pad) /
                 static_cast<Scalar>(std::max<Index>(1, pad + non_pad));
  return rep;
}

}  // namespace enclab
