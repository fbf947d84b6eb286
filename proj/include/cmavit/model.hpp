#pragma once

// The CMAViT network. Image crops become patch tokens with a CLS vector
// and a learned temporal embedding; encoder blocks add a meteorological
// attention bias computed per layer from the climate tokens; a
// cross-attention step pulls in context-text tokens; a per-patch linear
// head decodes weekly pixel yield maps.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmavit/blocks.hpp"
#include "cmavit/checkpoint.hpp"
#include "cmavit/context_encoder.hpp"
#include "cmavit/dataset.hpp"

namespace cmavit {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 3;
  std::size_t mlp_hidden = 128;
  double dropout_rate = 0.3;
  std::size_t patch_px = 8;       // spatial patch edge; crop 16 -> 4 tokens per week
  std::size_t crop_px = 16;
  std::size_t channels = kNumChannels;
  std::size_t T = 15;
  std::size_t n_met = kNumClimateVars;
  std::size_t vocab_size = kDefaultVocabSize;
  std::size_t max_context_len = 32;
  bool use_climate = true;
  bool use_context = true;

  std::size_t patches_per_week() const {
    const std::size_t per_edge = crop_px / patch_px;
    return per_edge * per_edge;
  }
  std::size_t seq_len() const { return T * patches_per_week() + 1; }
  std::size_t patch_dim() const { return channels * patch_px * patch_px; }

  void validate() const {
    if (d == 0 || n_heads == 0 || d % n_heads != 0)
      throw std::invalid_argument("ModelConfig: d must be a positive multiple of n_heads");
    if (patch_px == 0 || crop_px % patch_px != 0)
      throw std::invalid_argument("ModelConfig: patch_px must divide crop edge");
    if (T < 1) throw std::invalid_argument("ModelConfig: T must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw std::invalid_argument("ModelConfig: dropout rate must be in [0,1)");
  }

  BlockDims block_dims() const { return {d, n_heads, mlp_hidden, dropout_rate}; }
  ContextConfig context_config() const {
    return {block_dims(), n_layers, vocab_size, max_context_len};
  }

  // full-size configuration from the reference setup
  static ModelConfig paper_scale() {
    ModelConfig c;
    c.d = 768;
    c.n_heads = 8;
    c.n_layers = 6;
    c.mlp_hidden = 2048;
    c.max_context_len = 128;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d", c.d},
       {"n_heads", c.n_heads},
       {"n_layers", c.n_layers},
       {"mlp_hidden", c.mlp_hidden},
       {"dropout_rate", c.dropout_rate},
       {"patch_px", c.patch_px},
       {"crop_px", c.crop_px},
       {"channels", c.channels},
       {"T", c.T},
       {"n_met", c.n_met},
       {"vocab_size", c.vocab_size},
       {"max_context_len", c.max_context_len},
       {"use_climate", c.use_climate},
       {"use_context", c.use_context}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("d").get_to(c.d);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_layers").get_to(c.n_layers);
  j.at("mlp_hidden").get_to(c.mlp_hidden);
  j.at("dropout_rate").get_to(c.dropout_rate);
  j.at("patch_px").get_to(c.patch_px);
  j.at("crop_px").get_to(c.crop_px);
  j.at("channels").get_to(c.channels);
  j.at("T").get_to(c.T);
  j.at("n_met").get_to(c.n_met);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_context_len").get_to(c.max_context_len);
  j.at("use_climate").get_to(c.use_climate);
  j.at("use_context").get_to(c.use_context);
}

struct Model {
  ModelConfig config;
  Params params;
  NormStats norm;
};

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  Rng rng = Rng(seed).split("model-init");
  const BlockDims bd = cfg.block_dims();
  m.params.emplace("patch_proj.w", init_weight({cfg.patch_dim(), cfg.d}, rng));
  m.params.emplace("patch_proj.b", init_zeros({cfg.d}));
  // the met bias is a product of three fresh maps; a larger scale keeps
  // the pathway trainable instead of starting near zero
  m.params.emplace("met_proj.w", init_weight({cfg.n_met, cfg.d}, rng, 0.3));
  m.params.emplace("met_proj.b", init_zeros({cfg.d}));
  m.params.emplace("cls", init_weight({1, cfg.d}, rng));
  m.params.emplace("e_tmp", init_zeros({cfg.T + 1, cfg.d}));  // row 0 belongs to CLS
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pfx = "enc." + std::to_string(l);
    init_encoder_block(m.params, pfx, bd, rng);
    m.params.emplace(pfx + ".attn.met_wq", init_weight({cfg.d, cfg.d}, rng, 0.3));
    m.params.emplace(pfx + ".attn.met_wk", init_weight({cfg.d, cfg.d}, rng, 0.3));
  }
  m.params.emplace("cross.wq", init_weight({cfg.d, cfg.d}, rng));
  m.params.emplace("cross.wk", init_weight({cfg.d, cfg.d}, rng));
  m.params.emplace("cross.wv", init_weight({cfg.d, cfg.d}, rng));
  init_context_params(m.params, cfg.context_config(), rng);
  m.params.emplace("head.w", init_weight({cfg.d, cfg.patch_px * cfg.patch_px}, rng));
  m.params.emplace("head.b", init_zeros({cfg.patch_px * cfg.patch_px}));
  m.norm.image_mean.assign(cfg.channels, 0.0);
  m.norm.image_sd.assign(cfg.channels, 1.0);
  m.norm.climate_mean.assign(cfg.n_met, 0.0);
  m.norm.climate_sd.assign(cfg.n_met, 1.0);
  return m;
}

// ---- input staging ---------------------------------------------------------

// (T*Np) x (C*p*p) patch matrix from the standardized image stack.
// Patch order is row-major over the patch grid within each week.
inline Tensor patch_matrix(const FieldSample& s, const ModelConfig& cfg,
                           const NormStats& norm) {
  if (s.t != cfg.T || s.c != cfg.channels || s.h != cfg.crop_px || s.w != cfg.crop_px)
    throw std::invalid_argument("patch_matrix: sample does not match model config");
  const std::size_t p = cfg.patch_px, per_edge = cfg.crop_px / p, np = cfg.patches_per_week();
  Tensor out = Tensor::zeros({cfg.T * np, cfg.patch_dim()});
  for (std::size_t t = 0; t < cfg.T; ++t)
    for (std::size_t py = 0; py < per_edge; ++py)
      for (std::size_t px = 0; px < per_edge; ++px) {
        const std::size_t row = t * np + py * per_edge + px;
        for (std::size_t c = 0; c < cfg.channels; ++c)
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx)
              out.at(row, c * p * p + dy * p + dx) =
                  (s.img(t, c, py * p + dy, px * p + dx) - norm.image_mean[c]) /
                  norm.image_sd[c];
      }
  return out;
}

inline Tensor climate_matrix(const FieldSample& s, const ModelConfig& cfg,
                             const NormStats& norm) {
  if (s.climate.size() != cfg.T * cfg.n_met)
    throw std::invalid_argument("climate_matrix: climate series does not match config");
  Tensor out = Tensor::zeros({cfg.T, cfg.n_met});
  for (std::size_t t = 0; t < cfg.T; ++t)
    for (std::size_t v = 0; v < cfg.n_met; ++v)
      out.at(t, v) = (s.climate[t * cfg.n_met + v] - norm.climate_mean[v]) /
                     norm.climate_sd[v];
  return out;
}

// ---- model stages ----------------------------------------------------------

struct TokenSequence {
  Tensor tokens;                        // (T*Np + 1) x d, CLS at row 0
  std::vector<std::size_t> timestep;    // per token; CLS gets index 0 of e_tmp
};

inline TokenSequence embed_patches(const Tensor& patches, const ModelConfig& cfg,
                                   const Params& p) {
  const std::size_t np = cfg.patches_per_week();
  if (patches.rows() != cfg.T * np || patches.cols() != cfg.patch_dim())
    throw std::invalid_argument("embed_patches: patch matrix shape mismatch");
  const Tensor projected = linear(patches, param(p, "patch_proj.w"), param(p, "patch_proj.b"));
  const Tensor with_cls = concat_rows({param(p, "cls"), projected});
  std::vector<std::size_t> idx(cfg.seq_len());
  idx[0] = 0;  // CLS row of e_tmp
  for (std::size_t t = 0; t < cfg.T; ++t)
    for (std::size_t i = 0; i < np; ++i) idx[1 + t * np + i] = 1 + t;
  TokenSequence seq;
  seq.tokens = add(with_cls, gather_rows(param(p, "e_tmp"), idx));
  seq.timestep = std::move(idx);
  return seq;
}

// climate rows projected to one met token per timestep
inline Tensor embed_met(const Tensor& climate, const Params& p) {
  return linear(climate, param(p, "met_proj.w"), param(p, "met_proj.b"));
}

// Single-head reference form of the biased attention: the T x T met
// product is expanded over patch pairs (CLS row/column zero) and added
// to the image logits before the softmax.
inline Tensor stmm_attention(const Tensor& qs, const Tensor& ks, const Tensor& vs,
                             const Tensor& qm, const Tensor& km, std::size_t n_patches) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(qs.cols()));
  if (qs.rows() != 1 + qm.rows() * n_patches)
    throw std::invalid_argument("stmm_attention: timestep count mismatch");
  const Tensor bias = expand_met_bias(scale(matmul_nt(qm, km), inv_sqrt), n_patches);
  const Tensor logits = add(scale(matmul_nt(qs, ks), inv_sqrt), bias);
  return matmul(softmax_rows(logits), vs);
}

// met-bias terms for one encoder layer, one expanded L x L bias per head
inline std::vector<Tensor> met_bias_per_head(const Tensor& met_tokens, const Params& p,
                                             const std::string& layer_pfx,
                                             const ModelConfig& cfg) {
  const std::size_t d_head = cfg.d / cfg.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
  const Tensor qm = matmul(met_tokens, param(p, layer_pfx + ".attn.met_wq"));
  const Tensor km = matmul(met_tokens, param(p, layer_pfx + ".attn.met_wk"));
  std::vector<Tensor> biases;
  biases.reserve(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const Tensor qmh = slice_cols(qm, h * d_head, d_head);
    const Tensor kmh = slice_cols(km, h * d_head, d_head);
    biases.push_back(
        expand_met_bias(scale(matmul_nt(qmh, kmh), inv_sqrt), cfg.patches_per_week()));
  }
  return biases;
}

// met_tokens may be undefined when the climate modality is masked out
inline TokenSequence stmm_encoder(const TokenSequence& seq, const Tensor& met_tokens,
                                  const ModelConfig& cfg, const Params& p, Rng& rng,
                                  bool training) {
  const BlockDims bd = cfg.block_dims();
  Tensor x = seq.tokens;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pfx = "enc." + std::to_string(l);
    if (met_tokens.defined()) {
      const auto biases = met_bias_per_head(met_tokens, p, pfx, cfg);
      x = encoder_block(x, p, pfx, bd, rng, training, &biases);
    } else {
      x = encoder_block(x, p, pfx, bd, rng, training);
    }
  }
  return {x, seq.timestep};
}

// queries from the image-token stream, keys/values from context tokens;
// plain residual around the (single-head) cross-attention
inline TokenSequence cross_fuse(const TokenSequence& seq, const ContextEmbedding& ctx,
                                const ModelConfig& cfg, const Params& p) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  const Tensor qx = matmul(seq.tokens, param(p, "cross.wq"));
  const Tensor kt = matmul(ctx.tokens, param(p, "cross.wk"));
  const Tensor vt = matmul(ctx.tokens, param(p, "cross.wv"));
  const Tensor attn = masked_softmax_rows(scale(matmul_nt(qx, kt), inv_sqrt), ctx.keep);
  return {add(seq.tokens, matmul(attn, vt)), seq.timestep};
}

// (T*Np) x p^2 normalized yield values; CLS is dropped, each patch token
// decodes only its own pixels
inline Tensor decode_yield(const TokenSequence& seq, const ModelConfig& cfg,
                           const Params& p) {
  const Tensor body = slice_rows(seq.tokens, 1, seq.tokens.rows() - 1);
  return linear(body, param(p, "head.w"), param(p, "head.b"));
}

// ---- end-to-end forward ----------------------------------------------------

// Predictions in normalized target units, shape (T*Np) x p^2; the graph
// reaches every parameter in use.
inline Tensor forward(const FieldSample& s, const Model& m, Rng& rng, bool training) {
  const ModelConfig& cfg = m.config;
  TokenSequence seq = embed_patches(patch_matrix(s, cfg, m.norm), cfg, m.params);
  Tensor met;
  if (cfg.use_climate) met = embed_met(climate_matrix(s, cfg, m.norm), m.params);
  seq = stmm_encoder(seq, met, cfg, m.params, rng, training);
  ContextEmbedding ctx;
  if (cfg.use_context) {
    const TokenIds ids = tokenize(s.context_text, cfg.max_context_len, cfg.vocab_size);
    ctx = encode_context(ids, m.params, cfg.context_config(), rng, training);
  } else {
    // masked modality: a single learned null token stands in for the text
    ctx.tokens = param(m.params, "ctx.null");
    ctx.keep = {1};
  }
  seq = cross_fuse(seq, ctx, cfg, m.params);
  return decode_yield(seq, cfg, m.params);
}

// flatten normalized patch output into T x H x W maps in t/ha
inline std::vector<double> assemble_maps(const Tensor& decoded, const ModelConfig& cfg,
                                         const NormStats& norm) {
  const std::size_t p = cfg.patch_px, per_edge = cfg.crop_px / p, np = cfg.patches_per_week();
  std::vector<double> maps(cfg.T * cfg.crop_px * cfg.crop_px);
  for (std::size_t t = 0; t < cfg.T; ++t)
    for (std::size_t py = 0; py < per_edge; ++py)
      for (std::size_t px = 0; px < per_edge; ++px) {
        const std::size_t row = t * np + py * per_edge + px;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            maps[(t * cfg.crop_px + py * p + dy) * cfg.crop_px + px * p + dx] =
                norm.target_mean + norm.target_sd * decoded.at(row, dy * p + dx);
      }
  return maps;
}

// the ground-truth map arranged to match one week of decoder output rows
inline Tensor target_patch_matrix(const FieldSample& s, const ModelConfig& cfg,
                                  const NormStats& norm) {
  const std::size_t p = cfg.patch_px, per_edge = cfg.crop_px / p;
  Tensor out = Tensor::zeros({cfg.patches_per_week(), p * p});
  for (std::size_t py = 0; py < per_edge; ++py)
    for (std::size_t px = 0; px < per_edge; ++px)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          out.at(py * per_edge + px, dy * p + dx) =
              (s.target[(py * p + dy) * cfg.crop_px + px * p + dx] - norm.target_mean) /
              norm.target_sd;
  return out;
}

// ---- checkpoint directory --------------------------------------------------

inline void save_model(const std::string& dir, const Model& m) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::map<std::string, Tensor> archive = m.params;
  archive.emplace("norm.image_mean", Tensor::from({m.norm.image_mean.size()}, m.norm.image_mean));
  archive.emplace("norm.image_sd", Tensor::from({m.norm.image_sd.size()}, m.norm.image_sd));
  archive.emplace("norm.climate_mean",
                  Tensor::from({m.norm.climate_mean.size()}, m.norm.climate_mean));
  archive.emplace("norm.climate_sd",
                  Tensor::from({m.norm.climate_sd.size()}, m.norm.climate_sd));
  archive.emplace("norm.target", Tensor::from({2}, {m.norm.target_mean, m.norm.target_sd}));
  save_archive((fs::path(dir) / "params.bin").string(), archive);
  std::ofstream os(fs::path(dir) / "config.json");
  os << nlohmann::json(m.config).dump(2) << "\n";
  if (!os) throw std::runtime_error("save_model: write failed in " + dir);
}

inline Model load_model(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "config.json");
  if (!is) throw std::runtime_error("load_model: missing config.json in " + dir);
  Model m;
  m.config = nlohmann::json::parse(is).get<ModelConfig>();
  auto archive = load_archive((fs::path(dir) / "params.bin").string());
  for (auto& [name, t] : archive) {
    if (name.rfind("norm.", 0) == 0) continue;
    t.set_requires_grad(true);
    m.params.emplace(name, t);
  }
  m.norm.image_mean = archive.at("norm.image_mean").data();
  m.norm.image_sd = archive.at("norm.image_sd").data();
  m.norm.climate_mean = archive.at("norm.climate_mean").data();
  m.norm.climate_sd = archive.at("norm.climate_sd").data();
  m.norm.target_mean = archive.at("norm.target").data()[0];
  m.norm.target_sd = archive.at("norm.target").data()[1];
  return m;
}

}  // namespace cmavit
