#include "enclab/synth.hpp"

#include <cstdio>
#include <numeric>
#include <sstream>

#include "enclab/errors.hpp"

namespace enclab {

namespace {

std::string pool_word(const char* prefix, int i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%s%02d", prefix, i);
  return buf;
}

struct Slots {
  std::string per_given, per_family;  // family empty for one-token mentions
  std::string loc, org, obj, job, num;
};

struct Entity {
  Index start, end;  // token span, end exclusive
  std::string type;
};

struct Sentence {
  std::vector<std::string> tokens;
  std::vector<Entity> entities;
  // relation target for QA: span of the answer entity
  Index answer_start = -1, answer_end = -1;
  int topic = 0;
  int tmpl = 0;  // 0 or 1 within the topic
  Slots slots;
};

// Two templates per topic; every sentence mentions one person plus one
// location-or-organization entity, so entity-type fractions follow directly
// from the topic weights.
Sentence render(int topic, int tmpl, const Slots& s) {
  Sentence out;
  out.topic = topic;
  out.tmpl = tmpl;
  out.slots = s;
  auto put = [&out](const std::string& w) { out.tokens.push_back(w); };
  auto put_entity = [&out, &put](const std::string& word,
                                 const std::string& family,
                                 const std::string& type) {
    const Index start = static_cast<Index>(out.tokens.size());
    put(word);
    if (!family.empty()) put(family);
    out.entities.push_back({start, static_cast<Index>(out.tokens.size()), type});
  };
  auto put_answer = [&out, &put](const std::string& word) {
    out.answer_start = static_cast<Index>(out.tokens.size());
    put(word);
    out.answer_end = out.answer_start + 1;
  };

  if (topic == 0) {
    put_entity(s.per_given, s.per_family, "per");
    if (tmpl == 0) {
      put("visited");
      out.entities.push_back({static_cast<Index>(out.tokens.size()),
                              static_cast<Index>(out.tokens.size()) + 1,
                              "loc"});
      put_answer(s.loc);
      put("on");
      put("day");
      put(s.num);
    } else {
      put("traveled");
      put("to");
      out.entities.push_back({static_cast<Index>(out.tokens.size()),
                              static_cast<Index>(out.tokens.size()) + 1,
                              "loc"});
      put_answer(s.loc);
      put("during");
      put("month");
      put(s.num);
    }
  } else if (topic == 1) {
    put_entity(s.per_given, s.per_family, "per");
    if (tmpl == 0) {
      put("works");
      put("at");
      out.entities.push_back({static_cast<Index>(out.tokens.size()),
                              static_cast<Index>(out.tokens.size()) + 1,
                              "org"});
      put_answer(s.org);
      put("as");
      put("a");
      put(s.job);
    } else {
      put("is");
      put("employed");
      put("by");
      out.entities.push_back({static_cast<Index>(out.tokens.size()),
                              static_cast<Index>(out.tokens.size()) + 1,
                              "org"});
      put_answer(s.org);
      put("since");
      put("year");
      put(s.num);
    }
  } else {
    put_entity(s.per_given, s.per_family, "per");
    if (tmpl == 0) {
      put("bought");
      put("a");
      put_answer(s.obj);
      put("from");
      out.entities.push_back({static_cast<Index>(out.tokens.size()),
                              static_cast<Index>(out.tokens.size()) + 1,
                              "org"});
      put(s.org);
    } else {
      put("purchased");
      put("a");
      put_answer(s.obj);
      put("at");
      out.entities.push_back({static_cast<Index>(out.tokens.size()),
                              static_cast<Index>(out.tokens.size()) + 1,
                              "loc"});
      put(s.loc);
    }
  }
  put(".");
  return out;
}

std::string question_for(const Sentence& s) {
  std::string per = s.slots.per_given;
  if (!s.slots.per_family.empty()) per += " " + s.slots.per_family;
  switch (s.topic) {
    case 0: return "where did " + per + " go ?";
    case 1: return "where does " + per + " work ?";
    default: return "what did " + per + " buy ?";
  }
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const std::string& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

Slots draw_slots(const SynthParams& p, RngStream& rng) {
  Slots s;
  s.per_given = pool_word("per", static_cast<int>(rng.uniform_int(0, p.n_persons)));
  s.per_family = rng.bernoulli(p.two_token_person_prob)
                     ? pool_word("fam", static_cast<int>(rng.uniform_int(0, p.n_families)))
                     : "";
  s.loc = pool_word("loc", static_cast<int>(rng.uniform_int(0, p.n_locations)));
  s.org = pool_word("org", static_cast<int>(rng.uniform_int(0, p.n_orgs)));
  s.obj = pool_word("obj", static_cast<int>(rng.uniform_int(0, p.n_objects)));
  s.job = pool_word("job", static_cast<int>(rng.uniform_int(0, p.n_jobs)));
  s.num = pool_word("n", static_cast<int>(rng.uniform_int(0, p.n_numbers)));
  return s;
}

int draw_topic(const SynthParams& p, RngStream& rng) {
  const Scalar total =
      std::accumulate(p.topic_weights.begin(), p.topic_weights.end(), 0.0);
  Scalar u = rng.uniform() * total;
  for (std::size_t t = 0; t < p.topic_weights.size(); ++t) {
    u -= p.topic_weights[t];
    if (u < 0) return static_cast<int>(t);
  }
  return static_cast<int>(p.topic_weights.size()) - 1;
}

const char* draw_source(RngStream& rng) {
  const Scalar u = rng.uniform();
  if (u < 0.7) return "web";
  if (u < 0.9) return "academic";
  return "wiki";
}

Bucket draw_bucket(RngStream& rng) {
  const Scalar u = rng.uniform();
  if (u < 0.3) return Bucket::head;
  if (u < 0.8) return Bucket::middle;
  return Bucket::tail;
}

QualityLabel draw_label(RngStream& rng) {
  const Scalar u = rng.uniform();
  if (u < 0.2) return QualityLabel::low;
  if (u < 0.7) return QualityLabel::medium;
  return QualityLabel::high;
}

/// Re-renders the sentence through the partner template, keeping the slots
/// that both templates mention and redrawing the rest.
Sentence paraphrase(const Sentence& s, const SynthParams& p, RngStream& rng) {
  Slots slots = s.slots;
  slots.num = pool_word("n", static_cast<int>(rng.uniform_int(0, p.n_numbers)));
  if (s.topic == 2) {
    // The partner template swaps the org/loc tail slot.
    if (s.tmpl == 0)
      slots.loc = pool_word("loc", static_cast<int>(rng.uniform_int(0, p.n_locations)));
    else
      slots.org = pool_word("org", static_cast<int>(rng.uniform_int(0, p.n_orgs)));
  }
  return render(s.topic, 1 - s.tmpl, slots);
}

Sentence contradiction(const Sentence& s, const SynthParams& p, RngStream& rng) {
  Slots slots = s.slots;
  // Same shape, different target entity.
  switch (s.topic) {
    case 0:
      slots.loc = pool_word("loc", static_cast<int>(rng.uniform_int(0, p.n_locations)));
      break;
    case 1:
      slots.org = pool_word("org", static_cast<int>(rng.uniform_int(0, p.n_orgs)));
      break;
    default:
      slots.obj = pool_word("obj", static_cast<int>(rng.uniform_int(0, p.n_objects)));
      break;
  }
  return render(s.topic, s.tmpl, slots);
}

}  // namespace

std::map<std::string, Scalar> expected_entity_fractions(const SynthParams& p) {
  if (p.topic_weights.size() != 3)
    throw ConfigError("expected_entity_fractions: need 3 topic weights");
  const Scalar total =
      std::accumulate(p.topic_weights.begin(), p.topic_weights.end(), 0.0);
  const Scalar w0 = p.topic_weights[0] / total;
  const Scalar w1 = p.topic_weights[1] / total;
  const Scalar w2 = p.topic_weights[2] / total;
  // Every sentence carries one person and one loc-or-org entity: loc from
  // both travel templates and the second commerce template, org otherwise.
  return {{"per", 0.5},
          {"loc", (w0 + 0.5 * w2) / 2.0},
          {"org", (w1 + 0.5 * w2) / 2.0}};
}

std::vector<DocumentRecord> generate_synthetic_corpus(
    std::uint64_t seed, Index n_docs, const LengthDist& length_dist,
    const SynthParams& params) {
  if (n_docs < 1) throw ContractError("generate_synthetic_corpus: n_docs < 1");
  if (length_dist.min_sentences < 1 ||
      length_dist.max_sentences < length_dist.min_sentences)
    throw ContractError("generate_synthetic_corpus: bad length distribution");

  std::vector<DocumentRecord> docs;
  docs.reserve(static_cast<std::size_t>(n_docs));
  for (Index d = 0; d < n_docs; ++d) {
    RngStream rng = derive_stream(seed, "synth", static_cast<std::uint64_t>(d));
    const int topic = draw_topic(params, rng);
    const Index n_sent = length_dist.min_sentences +
                         rng.uniform_int(0, length_dist.max_sentences -
                                                length_dist.min_sentences + 1);

    std::vector<std::string> tokens;
    nlohmann::json entities = nlohmann::json::array();
    std::vector<Sentence> sentences;
    for (Index si = 0; si < n_sent; ++si) {
      Sentence s = render(topic, static_cast<int>(rng.uniform_int(0, 2)),
                          draw_slots(params, rng));
      const Index base = static_cast<Index>(tokens.size());
      for (const Entity& e : s.entities)
        entities.push_back({{"start", base + e.start},
                            {"end", base + e.end},
                            {"type", e.type}});
      s.answer_start += base;
      s.answer_end += base;
      tokens.insert(tokens.end(), s.tokens.begin(), s.tokens.end());
      sentences.push_back(std::move(s));
    }

    const Sentence& first = sentences.front();
    nlohmann::json qa{{"question", question_for(first)},
                      {"answer_start", first.answer_start},
                      {"answer_end", first.answer_end}};

    // Paraphrase-pair task: positive = partner-template rendering of the
    // first sentence, negative = an unrelated sentence.
    nlohmann::json pair;
    if (rng.bernoulli(0.5)) {
      pair = {{"text2", join(paraphrase(first, params, rng).tokens)},
              {"label", 1}};
    } else {
      Sentence other = render(draw_topic(params, rng),
                              static_cast<int>(rng.uniform_int(0, 2)),
                              draw_slots(params, rng));
      pair = {{"text2", join(other.tokens)}, {"label", 0}};
    }

    nlohmann::json nli;
    {
      const auto pick = rng.uniform_int(0, 3);
      if (pick == 0) {
        nli = {{"hypothesis", join(paraphrase(first, params, rng).tokens)},
               {"label", 0}};
      } else if (pick == 1) {
        Sentence other = render(draw_topic(params, rng),
                                static_cast<int>(rng.uniform_int(0, 2)),
                                draw_slots(params, rng));
        nli = {{"hypothesis", join(other.tokens)}, {"label", 1}};
      } else {
        nli = {{"hypothesis", join(contradiction(first, params, rng).tokens)},
               {"label", 2}};
      }
    }

    // Retrieval query: paraphrase of a random sentence of this document.
    const Sentence& q_src =
        sentences[static_cast<std::size_t>(rng.uniform_int(0, n_sent))];
    const std::string query = join(paraphrase(q_src, params, rng).tokens);

    DocumentRecord rec;
    char idbuf[24];
    std::snprintf(idbuf, sizeof(idbuf), "doc%08lld",
                  static_cast<long long>(d));
    rec.id = idbuf;
    rec.text = join(tokens);
    rec.source = draw_source(rng);
    rec.bucket = draw_bucket(rng);
    rec.label = draw_label(rng);
    rec.token_count = static_cast<Index>(tokens.size());
    rec.annotations = {{"topic", topic},
                       {"entities", entities},
                       {"qa", qa},
                       {"pair", pair},
                       {"nli", nli},
                       {"query", query}};
    docs.push_back(std::move(rec));
  }
  return docs;
}

}  // namespace enclab
