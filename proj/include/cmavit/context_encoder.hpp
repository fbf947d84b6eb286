#pragma once

// Vanilla self-attention encoder over tokenized management text.
// Embedding lookup + learned positions, pre-norm blocks with pad-key
// masking, final layer norm. Pad positions are never attended to, so
// only real-token embeddings receive gradient.

#include <string>
#include <vector>

#include "cmavit/blocks.hpp"
#include "cmavit/tokenizer.hpp"

namespace cmavit {

struct ContextEmbedding {
  Tensor tokens;               // L_c x d
  std::vector<char> keep;      // true where a real (non-pad) token sits
};

struct ContextConfig {
  BlockDims dims;
  std::size_t n_layers = 3;
  std::size_t vocab_size = kDefaultVocabSize;
  std::size_t max_len = 32;
};

inline void init_context_params(Params& p, const ContextConfig& cfg, Rng& rng) {
  p.emplace("ctx.embed", init_weight({cfg.vocab_size, cfg.dims.d}, rng));
  p.emplace("ctx.pos", init_weight({cfg.max_len, cfg.dims.d}, rng));
  p.emplace("ctx.null", init_weight({1, cfg.dims.d}, rng));
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    init_encoder_block(p, "ctx." + std::to_string(l), cfg.dims, rng);
  p.emplace("ctx.final_ln.g", init_ones({cfg.dims.d}));
  p.emplace("ctx.final_ln.b", init_zeros({cfg.dims.d}));
}

inline ContextEmbedding encode_context(const TokenIds& ids, const Params& p,
                                       const ContextConfig& cfg, Rng& rng, bool training) {
  if (ids.max_len != cfg.max_len)
    throw std::invalid_argument("encode_context: token length does not match config");
  for (const std::size_t id : ids.ids)
    if (id >= cfg.vocab_size) throw std::out_of_range("encode_context: id out of vocab");
  const std::vector<char> keep = token_keep_mask(ids);
  Tensor x = add(gather_rows(param(p, "ctx.embed"), ids.ids), param(p, "ctx.pos"));
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    x = encoder_block(x, p, "ctx." + std::to_string(l), cfg.dims, rng, training,
                      nullptr, &keep);
  x = layer_norm(x, param(p, "ctx.final_ln.g"), param(p, "ctx.final_ln.b"));
  return {x, keep};
}

}  // namespace cmavit
