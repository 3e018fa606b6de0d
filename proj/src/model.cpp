#include "enclab/model.hpp"

#include <cmath>
#include <cstdio>

#include "enclab/errors.hpp"

namespace enclab {

namespace {

constexpr Scalar kBaseStd = 0.02;

std::string layer_prefix(int i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "layer%02d.", i);
  return buf;
}

}  // namespace

std::string family_name(Family f) {
  switch (f) {
    case Family::roberta: return "roberta";
    case Family::modern: return "modern";
    case Family::deberta: return "deberta";
  }
  return "?";
}

Family family_from_name(const std::string& name) {
  if (name == "roberta") return Family::roberta;
  if (name == "modern") return Family::modern;
  if (name == "deberta") return Family::deberta;
  throw ConfigError("unknown model family: " + name);
}

void validate(const EncoderSpec& spec) {
  auto fail = [](const std::string& what) {
    throw ConfigError("invalid encoder spec: " + what);
  };
  if (spec.vocab < 6) fail("vocab must cover the special tokens");
  if (spec.layers < 0) fail("layers must be >= 0");
  if (spec.hidden < 1) fail("hidden must be >= 1");
  if (spec.heads < 1) fail("heads must be >= 1");
  if (spec.hidden % spec.heads != 0) fail("hidden not divisible by heads");
  if (spec.intermediate < 1) fail("intermediate must be >= 1");
  if (spec.max_len < 1) fail("max_len must be >= 1");
  if (spec.norm_eps <= 0) fail("norm_eps must be positive");
  if (spec.dropout_attn_out < 0 || spec.dropout_attn_out >= 1)
    fail("dropout_attn_out must be in [0, 1)");
  if (spec.dropout_other < 0 || spec.dropout_other >= 1)
    fail("dropout_other must be in [0, 1)");
  if (spec.family == Family::modern) {
    if (spec.global_every < 1) fail("modern family requires global_every >= 1");
    if (spec.half_window < 1) fail("modern family requires half_window >= 1");
    if (spec.rope_theta_global <= 0 || spec.rope_theta_local <= 0)
      fail("rope theta must be positive");
    if ((spec.hidden / spec.heads) % 2 != 0)
      fail("modern family requires even per-head dim for rotary embeddings");
    if (spec.bias) fail("modern family requires bias=false");
    if (!spec.glu) fail("modern family requires glu=true");
    if (!spec.pre_norm) fail("modern family requires pre_norm=true");
  }
  if (spec.family == Family::deberta && spec.rel_k < 1)
    fail("deberta family requires rel_k >= 1");
}

nlohmann::json spec_to_json(const EncoderSpec& s) {
  return nlohmann::json{{"family", family_name(s.family)},
                        {"vocab", s.vocab},
                        {"layers", s.layers},
                        {"hidden", s.hidden},
                        {"heads", s.heads},
                        {"intermediate", s.intermediate},
                        {"glu", s.glu},
                        {"pre_norm", s.pre_norm},
                        {"bias", s.bias},
                        {"global_every", s.global_every},
                        {"half_window", s.half_window},
                        {"rope_theta_global", s.rope_theta_global},
                        {"rope_theta_local", s.rope_theta_local},
                        {"rel_k", s.rel_k},
                        {"max_len", s.max_len},
                        {"norm_eps", s.norm_eps},
                        {"dropout_attn_out", s.dropout_attn_out},
                        {"dropout_other", s.dropout_other}};
}

EncoderSpec spec_from_json(const nlohmann::json& j) {
  EncoderSpec s;
  s.family = family_from_name(j.at("family").get<std::string>());
  s.vocab = j.at("vocab").get<Index>();
  s.layers = j.at("layers").get<int>();
  s.hidden = j.at("hidden").get<Index>();
  s.heads = j.at("heads").get<int>();
  s.intermediate = j.at("intermediate").get<Index>();
  s.glu = j.at("glu").get<bool>();
  s.pre_norm = j.at("pre_norm").get<bool>();
  s.bias = j.at("bias").get<bool>();
  s.global_every = j.value("global_every", 3);
  s.half_window = j.value("half_window", Index{0});
  s.rope_theta_global = j.value("rope_theta_global", 160000.0);
  s.rope_theta_local = j.value("rope_theta_local", 10000.0);
  s.rel_k = j.value("rel_k", Index{0});
  s.max_len = j.at("max_len").get<Index>();
  s.norm_eps = j.value("norm_eps", 1e-5);
  s.dropout_attn_out = j.value("dropout_attn_out", 0.0);
  s.dropout_other = j.value("dropout_other", 0.0);
  return s;
}

std::uint64_t spec_hash(const EncoderSpec& spec) {
  return fnv1a64(spec_to_json(spec).dump());
}

EncoderSpec desk_spec(Family family) {
  EncoderSpec s;
  s.family = family;
  s.vocab = 2048;
  s.layers = 6;
  s.hidden = 128;
  s.heads = 4;
  s.intermediate = 192;
  s.max_len = 256;
  s.norm_eps = 1e-5;
  s.dropout_attn_out = 0.1;
  s.dropout_other = 0.0;
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
      // Window 128 of max_len 1024 scales to 32 of 256; half of it per side.
      s.half_window = 16;
      s.rope_theta_global = 160000.0;
      s.rope_theta_local = 10000.0;
      break;
    case Family::deberta:
      s.glu = false;
      s.pre_norm = true;
      s.bias = true;
      s.rel_k = 32;
      break;
  }
  return s;
}

Tensor& EncoderModel::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end())
    throw ContractError("unknown parameter: " + name);
  return it->second;
}

const Tensor& EncoderModel::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end())
    throw ContractError("unknown parameter: " + name);
  return it->second;
}

namespace {

Tensor init_normal(Shape shape, Scalar stdev, RngStream& rng) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  for (auto& v : t.values()) v = stdev * rng.normal();
  return t;
}

struct SlotSpec {
  std::string name;
  Shape shape;
  enum class Init { normal, normal_scaled, ones, zeros } init;
};

/// Single source of truth for the parameter layout; build() materializes it
/// and count_params() sums it.
std::vector<SlotSpec> param_slots(const EncoderSpec& s) {
  using Init = SlotSpec::Init;
  std::vector<SlotSpec> slots;
  const Index d = s.hidden;
  slots.push_back({"emb.tok", {s.vocab, d}, Init::normal});
  if (s.family == Family::roberta)
    slots.push_back({"emb.pos", {s.max_len, d}, Init::normal});
  if (s.family == Family::deberta)
    slots.push_back({"rel.table", {2 * s.rel_k, d}, Init::normal});
  slots.push_back({"emb.norm.gain", {d}, Init::ones});
  if (s.bias) slots.push_back({"emb.norm.bias", {d}, Init::zeros});
  const Index ffn_in = s.glu ? 2 * s.intermediate : s.intermediate;
  for (int i = 0; i < s.layers; ++i) {
    const std::string p = layer_prefix(i);
    slots.push_back({p + "attn.wq", {d, d}, Init::normal});
    slots.push_back({p + "attn.wk", {d, d}, Init::normal});
    slots.push_back({p + "attn.wv", {d, d}, Init::normal});
    slots.push_back({p + "attn.wo", {d, d}, Init::normal_scaled});
    if (s.bias) {
      slots.push_back({p + "attn.bq", {d}, Init::zeros});
      slots.push_back({p + "attn.bk", {d}, Init::zeros});
      slots.push_back({p + "attn.bv", {d}, Init::zeros});
      slots.push_back({p + "attn.bo", {d}, Init::zeros});
    }
    slots.push_back({p + "norm1.gain", {d}, Init::ones});
    if (s.bias) slots.push_back({p + "norm1.bias", {d}, Init::zeros});
    slots.push_back({p + "ffn.w1", {d, ffn_in}, Init::normal});
    slots.push_back({p + "ffn.w2", {s.intermediate, d}, Init::normal_scaled});
    if (s.bias) {
      slots.push_back({p + "ffn.b1", {ffn_in}, Init::zeros});
      slots.push_back({p + "ffn.b2", {d}, Init::zeros});
    }
    slots.push_back({p + "norm2.gain", {d}, Init::ones});
    if (s.bias) slots.push_back({p + "norm2.bias", {d}, Init::zeros});
  }
  if (s.pre_norm) {
    slots.push_back({"final.norm.gain", {d}, Init::ones});
    if (s.bias) slots.push_back({"final.norm.bias", {d}, Init::zeros});
  }
  return slots;
}

}  // namespace

EncoderModel build(const EncoderSpec& spec, std::uint64_t init_seed) {
  validate(spec);
  EncoderModel m;
  m.spec = spec;
  const Scalar scaled_std =
      spec.layers > 0 ? kBaseStd / std::sqrt(2.0 * spec.layers) : kBaseStd;
  for (const SlotSpec& slot : param_slots(spec)) {
    // Each slot draws from its own named stream, so layout changes in one
    // family never shift another family's draws.
    RngStream rng = derive_stream(init_seed, slot.name);
    Tensor t;
    switch (slot.init) {
      case SlotSpec::Init::normal:
        t = init_normal(slot.shape, kBaseStd, rng);
        break;
      case SlotSpec::Init::normal_scaled:
        t = init_normal(slot.shape, scaled_std, rng);
        break;
      case SlotSpec::Init::ones:
        t = Tensor::full(slot.shape, 1.0, true);
        break;
      case SlotSpec::Init::zeros:
        t = Tensor::zeros(slot.shape, true);
        break;
    }
    m.params.emplace(slot.name, std::move(t));
  }
  m.layer_kinds.resize(spec.layers, LayerKind::global);
  if (spec.family == Family::modern)
    for (int i = 0; i < spec.layers; ++i)
      m.layer_kinds[i] =
          i % spec.global_every == 0 ? LayerKind::global : LayerKind::local;
  return m;
}

Index count_params(const EncoderSpec& spec) {
  validate(spec);
  Index total = 0;
  for (const SlotSpec& slot : param_slots(spec)) total += shape_numel(slot.shape);
  return total;
}

namespace {

Tensor apply_norm(const EncoderModel& m, const std::string& prefix,
                  const Tensor& x) {
  Tensor y = layer_norm(x, m.param(prefix + ".gain"), m.spec.norm_eps);
  auto it = m.params.find(prefix + ".bias");
  if (it != m.params.end()) y = add_rowvec(y, it->second);
  return y;
}

Tensor ffn(const EncoderModel& m, const std::string& p, const Tensor& x) {
  Tensor h = matmul(x, m.param(p + "ffn.w1"));
  auto b1 = m.params.find(p + "ffn.b1");
  if (b1 != m.params.end()) h = add_rowvec(h, b1->second);
  h = m.spec.glu ? geglu(h) : gelu(h);
  h = matmul(h, m.param(p + "ffn.w2"));
  auto b2 = m.params.find(p + "ffn.b2");
  if (b2 != m.params.end()) h = add_rowvec(h, b2->second);
  return h;
}

AttnWeights layer_attn_weights(const EncoderModel& m, const std::string& p) {
  AttnWeights w;
  w.wq = m.param(p + "attn.wq");
  w.wk = m.param(p + "attn.wk");
  w.wv = m.param(p + "attn.wv");
  w.wo = m.param(p + "attn.wo");
  if (m.spec.bias) {
    w.bq = m.param(p + "attn.bq");
    w.bk = m.param(p + "attn.bk");
    w.bv = m.param(p + "attn.bv");
    w.bo = m.param(p + "attn.bo");
  }
  return w;
}

}  // namespace

Tensor forward(const EncoderModel& model, std::span<const Index> ids,
               std::span<const Index> doc_lengths, bool train_mode,
               RngStream* rng, const Tensor* emb_override) {
  const EncoderSpec& s = model.spec;
  Index total = 0;
  for (Index d : doc_lengths) total += d;
  if (total != static_cast<Index>(ids.size()))
    throw ContractError("forward: ids length " + std::to_string(ids.size()) +
                        " != sum of doc lengths " + std::to_string(total));
  if (total > s.max_len)
    throw ContractError("forward: packed length " + std::to_string(total) +
                        " exceeds max_len " + std::to_string(s.max_len));
  if (train_mode && (s.dropout_attn_out > 0 || s.dropout_other > 0) && !rng)
    throw ContractError("forward: train mode with dropout needs an rng");

  // Positions restart at each document boundary.
  std::vector<Index> positions(ids.size());
  {
    Index pos = 0, rem = 0, doc = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (rem == 0) {
        rem = doc_lengths[doc++];
        pos = 0;
      }
      positions[i] = pos++;
      --rem;
    }
  }

  const AttentionMask global_mask =
      build_mask(doc_lengths, MaskKind::global, 0);
  AttentionMask local_mask;
  if (s.family == Family::modern)
    local_mask = build_mask(doc_lengths, MaskKind::local, s.half_window);

  const Tensor& emb_table =
      emb_override ? *emb_override : model.param("emb.tok");
  Tensor h = embedding_lookup(emb_table, ids);
  if (s.family == Family::roberta)
    h = add(h, embedding_lookup(model.param("emb.pos"), positions));
  h = apply_norm(model, "emb.norm", h);
  if (train_mode && s.dropout_other > 0)
    h = dropout(h, s.dropout_other, *rng, true);

  RelPosBuckets rel;
  if (s.family == Family::deberta) {
    rel.k = s.rel_k;
    rel.table = model.param("rel.table");
  }

  for (int i = 0; i < s.layers; ++i) {
    const std::string p = layer_prefix(i);
    const bool is_global = model.layer_kinds[i] == LayerKind::global;
    const AttentionMask& mask =
        (s.family == Family::modern && !is_global) ? local_mask : global_mask;
    const AttnWeights w = layer_attn_weights(model, p);

    Tensor attn_in = s.pre_norm ? apply_norm(model, p + "norm1", h) : h;
    Tensor attn_out;
    if (s.family == Family::deberta) {
      attn_out = disentangled_attention(attn_in, rel, w, s.heads, mask);
    } else if (s.family == Family::modern) {
      RopeParams rope{is_global ? s.rope_theta_global : s.rope_theta_local,
                      s.hidden / s.heads};
      attn_out = mha(attn_in, w, s.heads, mask, &rope, positions);
    } else {
      attn_out = mha(attn_in, w, s.heads, mask);
    }
    if (train_mode && s.dropout_attn_out > 0)
      attn_out = dropout(attn_out, s.dropout_attn_out, *rng, true);
    h = add(h, attn_out);
    if (!s.pre_norm) h = apply_norm(model, p + "norm1", h);

    Tensor ffn_in = s.pre_norm ? apply_norm(model, p + "norm2", h) : h;
    Tensor ffn_out = ffn(model, p, ffn_in);
    if (train_mode && s.dropout_other > 0)
      ffn_out = dropout(ffn_out, s.dropout_other, *rng, true);
    h = add(h, ffn_out);
    if (!s.pre_norm) h = apply_norm(model, p + "norm2", h);
  }

  if (s.pre_norm) h = apply_norm(model, "final.norm", h);
  return h;
}

Tensor tied_mlm_logits(const Tensor& h, const Tensor& emb_table) {
  return matmul(h, transpose(emb_table));
}

}  // namespace enclab
