#include "enclab/attention.hpp"

#include <cmath>
#include <memory>

#include "enclab/errors.hpp"

namespace enclab {

AttentionMask build_mask(std::span<const Index> doc_lengths, MaskKind kind,
                         Index half_window) {
  if (doc_lengths.empty())
    throw ContractError("build_mask: empty document list");
  Index total = 0;
  for (Index d : doc_lengths) {
    if (d <= 0)
      throw ContractError("build_mask: nonpositive document length " +
                          std::to_string(d));
    total += d;
  }
  if (kind == MaskKind::local && half_window <= 0)
    throw ContractError("build_mask: local mask needs half_window >= 1");

  AttentionMask m;
  m.len = total;
  m.allowed.assign(static_cast<std::size_t>(total * total), 0);
  m.doc_lengths.assign(doc_lengths.begin(), doc_lengths.end());
  m.kind = kind;
  m.half_window = kind == MaskKind::local ? half_window : 0;

  Index start = 0;
  for (Index d : doc_lengths) {
    for (Index i = start; i < start + d; ++i)
      for (Index j = start; j < start + d; ++j) {
        if (kind == MaskKind::local && std::abs(i - j) > half_window) continue;
        m.allowed[i * total + j] = 1;
      }
    start += d;
  }
  return m;
}

Tensor mask_bias(const AttentionMask& mask) {
  const Index l = mask.len;
  Tensor bias = Tensor::zeros({l, l});
  auto bv = bias.values();
  for (Index i = 0; i < l * l; ++i)
    if (!mask.allowed[i]) bv[i] = -1e30;
  return bias;
}

Tensor rope_apply(const Tensor& x, std::span<const Index> positions,
                  const RopeParams& params) {
  if (params.head_dim <= 0 || params.head_dim % 2 != 0)
    throw ContractError("rope_apply: head_dim must be even and positive, got " +
                        std::to_string(params.head_dim));
  if (params.theta <= 0.0)
    throw ContractError("rope_apply: theta must be positive");
  const Index row_width = x.size() / x.dim(0);
  if (row_width % params.head_dim != 0)
    throw ContractError("rope_apply: row width " + std::to_string(row_width) +
                        " is not a multiple of head_dim " +
                        std::to_string(params.head_dim));
  const Index l = x.dim(0);
  if (static_cast<Index>(positions.size()) != l)
    throw ContractError("rope_apply: " + std::to_string(positions.size()) +
                        " positions for " + std::to_string(l) + " rows");

  const Index d = params.head_dim;
  const Index half = d / 2;
  const Index blocks = row_width / d;

  // Per-pair frequencies theta^(-2i/d) are position-independent.
  std::vector<Scalar> freq(half);
  for (Index i = 0; i < half; ++i)
    freq[i] = std::pow(params.theta,
                       -2.0 * static_cast<Scalar>(i) / static_cast<Scalar>(d));

  auto cs = std::make_shared<std::vector<Scalar>>(l * half);
  auto sn = std::make_shared<std::vector<Scalar>>(l * half);
  for (Index r = 0; r < l; ++r)
    for (Index i = 0; i < half; ++i) {
      const Scalar ang = static_cast<Scalar>(positions[r]) * freq[i];
      (*cs)[r * half + i] = std::cos(ang);
      (*sn)[r * half + i] = std::sin(ang);
    }

  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto ov = out.values();
  for (Index r = 0; r < l; ++r)
    for (Index b = 0; b < blocks; ++b)
      for (Index i = 0; i < half; ++i) {
        const Index base = r * row_width + b * d + 2 * i;
        const Scalar c = (*cs)[r * half + i];
        const Scalar s = (*sn)[r * half + i];
        ov[base] = xv[base] * c - xv[base + 1] * s;
        ov[base + 1] = xv[base] * s + xv[base + 1] * c;
      }
  attach_node(
      out, {x},
      [l, row_width, blocks, d, half, cs, sn](const Tensor& o,
                                              std::vector<Tensor>& in) {
        const auto og = o.grad();
        auto g = in[0].grad();
        // Rotation is orthogonal: the adjoint rotates by the negative angle.
        for (Index r = 0; r < l; ++r)
          for (Index b = 0; b < blocks; ++b)
            for (Index i = 0; i < half; ++i) {
              const Index base = r * row_width + b * d + 2 * i;
              const Scalar c = (*cs)[r * half + i];
              const Scalar s = (*sn)[r * half + i];
              g[base] += og[base] * c + og[base + 1] * s;
              g[base + 1] += -og[base] * s + og[base + 1] * c;
            }
      },
      "rope_apply");
  return out;
}

Index bucket(Index i, Index j, Index k) {
  if (k < 1) throw ContractError("bucket: k must be >= 1");
  Index rel = i - j;
  if (rel < -k) rel = -k;
  if (rel > k - 1) rel = k - 1;
  return rel + k;
}

namespace {

void check_attn_inputs(const Tensor& x, const AttnWeights& w, int heads,
                       const AttentionMask& mask, const char* op) {
  if (x.rank() != 2)
    throw ContractError(std::string(op) + ": x must be [L x d], got " +
                        shape_str(x.shape()));
  const Index d = x.dim(1);
  if (heads <= 0 || d % heads != 0)
    throw ConfigError(std::string(op) + ": hidden " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  if (w.wq.dim(0) != d || w.wq.dim(1) != d)
    throw ContractError(std::string(op) + ": weight shape mismatch");
  if (mask.len != x.dim(0))
    throw ContractError(std::string(op) + ": mask length " +
                        std::to_string(mask.len) + " != sequence length " +
                        std::to_string(x.dim(0)));
}

Tensor project(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add_rowvec(y, b);
  return y;
}

}  // namespace

Tensor mha(const Tensor& x, const AttnWeights& w, int heads,
           const AttentionMask& mask, const RopeParams* rope,
           std::span<const Index> positions) {
  check_attn_inputs(x, w, heads, mask, "mha");
  const Index d = x.dim(1);
  const Index dh = d / heads;
  if (rope && rope->head_dim != dh)
    throw ContractError("mha: rope head_dim " + std::to_string(rope->head_dim) +
                        " != per-head dim " + std::to_string(dh));

  Tensor q = project(x, w.wq, w.bq);
  Tensor k = project(x, w.wk, w.bk);
  Tensor v = project(x, w.wv, w.bv);
  const Tensor bias = mask_bias(mask);
  const Scalar inv_scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));

  std::vector<Tensor> ctx;
  ctx.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    if (rope) {
      qh = rope_apply(qh, positions, *rope);
      kh = rope_apply(kh, positions, *rope);
    }
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_scale);
    Tensor attn = softmax_rows(add(scores, bias));
    ctx.push_back(matmul(attn, vh));
  }
  return project(concat_cols(ctx), w.wo, w.bo);
}

Tensor disentangled_attention(const Tensor& x, const RelPosBuckets& rel,
                              const AttnWeights& w, int heads,
                              const AttentionMask& mask) {
  check_attn_inputs(x, w, heads, mask, "disentangled_attention");
  const Index d = x.dim(1);
  const Index dh = d / heads;
  const Index l = x.dim(0);
  if (!rel.table.defined() || rel.table.rank() != 2 ||
      rel.table.dim(0) != 2 * rel.k || rel.table.dim(1) != d)
    throw ContractError("disentangled_attention: bucket table must be [2k x d]");

  Tensor qc = project(x, w.wq, w.bq);
  Tensor kc = project(x, w.wk, w.bk);
  Tensor vc = project(x, w.wv, w.bv);
  // Relative-position queries/keys reuse the layer's content projections,
  // without bias so a zeroed table makes both positional terms vanish.
  Tensor qr = matmul(rel.table, w.wq);
  Tensor kr = matmul(rel.table, w.wk);

  // idx_fwd(i, j) = bucket(i, j); idx_rev(j, i) = bucket(j, i).
  std::vector<Index> idx_fwd(l * l), idx_rev(l * l);
  for (Index i = 0; i < l; ++i)
    for (Index j = 0; j < l; ++j) {
      idx_fwd[i * l + j] = bucket(i, j, rel.k);
      idx_rev[j * l + i] = bucket(j, i, rel.k);
    }

  const Tensor bias = mask_bias(mask);
  const Scalar inv_scale = 1.0 / std::sqrt(3.0 * static_cast<Scalar>(dh));

  std::vector<Tensor> ctx;
  ctx.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(qc, h * dh, dh);
    Tensor kh = slice_cols(kc, h * dh, dh);
    Tensor vh = slice_cols(vc, h * dh, dh);
    Tensor qrh = slice_cols(qr, h * dh, dh);
    Tensor krh = slice_cols(kr, h * dh, dh);

    Tensor c2c = matmul(qh, transpose(kh));
    // c2p(i, j) = q_i . k_r[bucket(i, j)]
    Tensor c2p = gather_cols(matmul(qh, transpose(krh)), idx_fwd, l);
    // p2c(i, j) = k_j . q_r[bucket(j, i)], built row-wise over j then flipped.
    Tensor p2c = transpose(gather_cols(matmul(kh, transpose(qrh)), idx_rev, l));

    Tensor scores = scale(add(add(c2c, c2p), p2c), inv_scale);
    Tensor attn = softmax_rows(add(scores, bias));
    ctx.push_back(matmul(attn, vh));
  }
  return project(concat_cols(ctx), w.wo, w.bo);
}

}  // namespace enclab
