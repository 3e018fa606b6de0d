#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "enclab/attention.hpp"
#include "enclab/rng.hpp"
#include "enclab/tensor.hpp"

namespace enclab {

enum class Family { roberta, modern, deberta };

std::string family_name(Family f);
Family family_from_name(const std::string& name);

/// Full architectural configuration for one encoder family.
struct EncoderSpec {
  Family family = Family::roberta;
  Index vocab = 0;
  int layers = 0;
  Index hidden = 0;
  int heads = 1;
  Index intermediate = 0;
  bool glu = false;
  bool pre_norm = false;
  bool bias = true;
  // modern only
  int global_every = 3;
  Index half_window = 0;
  Scalar rope_theta_global = 160000.0;
  Scalar rope_theta_local = 10000.0;
  // deberta only
  Index rel_k = 0;
  Index max_len = 0;
  Scalar norm_eps = 1e-5;
  Scalar dropout_attn_out = 0.0;
  Scalar dropout_other = 0.0;
};

/// Throws ConfigError naming the first violated constraint.
void validate(const EncoderSpec& spec);

nlohmann::json spec_to_json(const EncoderSpec& spec);
EncoderSpec spec_from_json(const nlohmann::json& j);
std::uint64_t spec_hash(const EncoderSpec& spec);

/// Scaled-down defaults mirroring the base-model ratios.
EncoderSpec desk_spec(Family family);

enum class LayerKind { global, local };

struct EncoderModel {
  EncoderSpec spec;
  std::map<std::string, Tensor> params;  // name -> tensor, deterministic order
  std::vector<LayerKind> layer_kinds;

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
};

/// Builds and initializes a model: normal(0, base_std) weights with output
/// projections scaled by 1/sqrt(2 * layers), unit norm gains, zero biases.
/// Deterministic under init_seed.
EncoderModel build(const EncoderSpec& spec, std::uint64_t init_seed);

Index count_params(const EncoderSpec& spec);

/// Encodes a packed sequence of documents. ids.size() must equal
/// sum(doc_lengths) and be <= spec.max_len. Positions restart at each
/// document boundary; attention never crosses document boundaries.
/// When emb_override is non-null it replaces the model's token embedding
/// table (used for gradient-disentangled sharing).
Tensor forward(const EncoderModel& model, std::span<const Index> ids,
               std::span<const Index> doc_lengths, bool train_mode,
               RngStream* rng = nullptr, const Tensor* emb_override = nullptr);

/// Vocabulary logits tied to the embedding table: h @ table^T.
Tensor tied_mlm_logits(const Tensor& h, const Tensor& emb_table);

}  // namespace enclab
