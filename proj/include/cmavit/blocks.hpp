#pragma once

// Pre-norm transformer building blocks shared by the image encoder and
// the text context encoder. Attention projections are bias-free; the
// optional per-head additive bias realizes the meteorological term, and
// the optional key mask realizes context padding.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cmavit/rng.hpp"
#include "cmavit/tensor.hpp"

namespace cmavit {

using Params = std::map<std::string, Tensor>;

struct BlockDims {
  std::size_t d = 64;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 128;
  double dropout_rate = 0.3;
};

inline const Tensor& param(const Params& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range("missing parameter: " + name);
  return it->second;
}

// Multi-head scaled dot-product self-attention over x (L x d).
// logit_bias, when given, holds one L x L additive bias per head.
inline Tensor multi_head_attention(const Tensor& x, const Params& p, const std::string& pfx,
                                   const BlockDims& bd,
                                   const std::vector<Tensor>* logit_bias = nullptr,
                                   const std::vector<char>* key_keep = nullptr) {
  const std::size_t d_head = bd.d / bd.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
  const Tensor q = matmul(x, param(p, pfx + ".wq"));
  const Tensor k = matmul(x, param(p, pfx + ".wk"));
  const Tensor v = matmul(x, param(p, pfx + ".wv"));
  std::vector<Tensor> heads;
  heads.reserve(bd.n_heads);
  for (std::size_t h = 0; h < bd.n_heads; ++h) {
    const Tensor qh = slice_cols(q, h * d_head, d_head);
    const Tensor kh = slice_cols(k, h * d_head, d_head);
    const Tensor vh = slice_cols(v, h * d_head, d_head);
    Tensor logits = scale(matmul_nt(qh, kh), inv_sqrt);
    if (logit_bias) logits = add(logits, (*logit_bias)[h]);
    const Tensor attn = key_keep ? masked_softmax_rows(logits, *key_keep)
                                 : softmax_rows(logits);
    heads.push_back(matmul(attn, vh));
  }
  return matmul(concat_cols(heads), param(p, pfx + ".wo"));
}

inline Tensor mlp_block(const Tensor& x, const Params& p, const std::string& pfx) {
  const Tensor h = gelu(linear(x, param(p, pfx + ".w1"), param(p, pfx + ".b1")));
  return linear(h, param(p, pfx + ".w2"), param(p, pfx + ".b2"));
}

// One pre-norm encoder block: x + Drop(MHA(LN(x))), then + Drop(MLP(LN(.))).
inline Tensor encoder_block(const Tensor& x, const Params& p, const std::string& pfx,
                            const BlockDims& bd, Rng& rng, bool training,
                            const std::vector<Tensor>* logit_bias = nullptr,
                            const std::vector<char>* key_keep = nullptr) {
  const Tensor normed = layer_norm(x, param(p, pfx + ".ln1.g"), param(p, pfx + ".ln1.b"));
  const Tensor att = multi_head_attention(normed, p, pfx + ".attn", bd, logit_bias, key_keep);
  const Tensor h = add(x, dropout(att, bd.dropout_rate, rng, training));
  const Tensor normed2 = layer_norm(h, param(p, pfx + ".ln2.g"), param(p, pfx + ".ln2.b"));
  const Tensor ff = mlp_block(normed2, p, pfx + ".mlp");
  return add(h, dropout(ff, bd.dropout_rate, rng, training));
}

// ---- parameter initialization helpers --------------------------------------

inline Tensor init_weight(std::vector<std::size_t> shape, Rng& rng, double stddev = 0.02) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.data()) v = rng.truncated_normal(stddev);
  return t;
}

inline Tensor init_zeros(std::vector<std::size_t> shape) {
  return Tensor::zeros(std::move(shape), true);
}

inline Tensor init_ones(std::vector<std::size_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.data()) v = 1.0;
  return t;
}

inline void init_encoder_block(Params& p, const std::string& pfx, const BlockDims& bd,
                               Rng& rng) {
  p.emplace(pfx + ".ln1.g", init_ones({bd.d}));
  p.emplace(pfx + ".ln1.b", init_zeros({bd.d}));
  p.emplace(pfx + ".attn.wq", init_weight({bd.d, bd.d}, rng));
  p.emplace(pfx + ".attn.wk", init_weight({bd.d, bd.d}, rng));
  p.emplace(pfx + ".attn.wv", init_weight({bd.d, bd.d}, rng));
  p.emplace(pfx + ".attn.wo", init_weight({bd.d, bd.d}, rng));
  p.emplace(pfx + ".ln2.g", init_ones({bd.d}));
  p.emplace(pfx + ".ln2.b", init_zeros({bd.d}));
  p.emplace(pfx + ".mlp.w1", init_weight({bd.d, bd.mlp_hidden}, rng));
  p.emplace(pfx + ".mlp.b1", init_zeros({bd.mlp_hidden}));
  p.emplace(pfx + ".mlp.w2", init_weight({bd.mlp_hidden, bd.d}, rng));
  p.emplace(pfx + ".mlp.b2", init_zeros({bd.d}));
}

}  // namespace cmavit
