#pragma once

// Training loop: MSE against the harvest map (broadcast over the T
// weekly predictions), plain or weighted batch sampling, the YieldZone
// conditional-training transform, AdamW with gradient clipping, and
// early stopping on validation MSE.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmavit/dataset.hpp"
#include "cmavit/model.hpp"
#include "cmavit/optim.hpp"

namespace cmavit {

// Raised when a loss or gradient goes non-finite mid-training.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Strategy { kPlain, kCsr, kYieldZone, kYieldZoneCsr };

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "plain") return Strategy::kPlain;
  if (s == "csr") return Strategy::kCsr;
  if (s == "yieldzone") return Strategy::kYieldZone;
  if (s == "yieldzone+csr") return Strategy::kYieldZoneCsr;
  throw std::invalid_argument("unknown strategy: " + s);
}

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.98;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  std::size_t max_epochs = 300;
  std::size_t early_stop_patience = 50;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::kPlain;
  double grad_clip = 1.0;
  ZoneThresholds zones;

  void validate() const {
    if (early_stop_patience > max_epochs)
      throw std::invalid_argument("TrainConfig: patience exceeds max_epochs");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mape = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::uint64_t seed = 0;
};

// Mean over all T*H*W squared errors; target is one week's worth of
// values broadcast across the T weekly prediction blocks.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (target.size() == 0 || pred.size() % target.size() != 0)
    throw std::invalid_argument("mse_loss: prediction is not a whole number of target maps");
  const std::size_t n = pred.size(), per = target.size();
  auto node = detail::make_node({1, 1}, {pred.ptr()});
  auto tgt = std::make_shared<std::vector<double>>(target.data());
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = pred.data()[i] - (*tgt)[i % per];
    acc += e * e;
  }
  node->value[0] = acc / static_cast<double>(n);
  node->pullback = [tgt, n, per](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = 2.0 * self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      p.grad[i] += g * (p.value[i] - (*tgt)[i % per]);
  };
  return Tensor(node);
}

// i.i.d. draws with replacement; weighted when weights are given
inline std::vector<std::size_t> sample_batch(std::size_t n_samples,
                                             const std::vector<double>* weights,
                                             std::size_t batch_size, Rng& rng) {
  if (n_samples == 0) throw std::invalid_argument("sample_batch: empty sample set");
  std::vector<std::size_t> batch(batch_size);
  if (!weights) {
    for (auto& b : batch) b = rng.next_below(n_samples);
    return batch;
  }
  if (weights->size() != n_samples)
    throw std::invalid_argument("sample_batch: weight length mismatch");
  std::vector<double> cdf(n_samples);
  double acc = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    acc += (*weights)[i];
    cdf[i] = acc;
  }
  for (auto& b : batch) {
    const double u = rng.uniform() * acc;
    b = static_cast<std::size_t>(
        std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    if (b >= n_samples) b = n_samples - 1;
  }
  return batch;
}

// Z = X0 (.) zone labels, every channel and timestep; training-time only
inline FieldSample apply_yieldzone(const FieldSample& s, const ZoneMap& zm) {
  if (zm.h != s.h || zm.w != s.w)
    throw std::invalid_argument("apply_yieldzone: zone map does not match sample");
  FieldSample z = s;
  for (std::size_t t = 0; t < s.t; ++t)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x)
          z.img(t, c, y, x) = s.img(t, c, y, x) *
                              static_cast<double>(zm.labels[y * s.w + x]);
  return z;
}

namespace detail {

inline double eval_mse_and_mape(const Model& m, const std::vector<const FieldSample*>& split,
                                double* out_mape) {
  Rng rng(0);  // inference path draws nothing
  double loss = 0.0, ape = 0.0;
  std::size_t n_ape = 0;
  for (const FieldSample* s : split) {
    const Tensor pred = forward(*s, m, rng, /*training=*/false);
    const Tensor tgt = target_patch_matrix(*s, m.config, m.norm);
    loss += mse_loss(pred, tgt).item();
    const auto maps = assemble_maps(pred, m.config, m.norm);
    const std::size_t hw = m.config.crop_px * m.config.crop_px;
    for (std::size_t t = 0; t < m.config.T; ++t)
      for (std::size_t i = 0; i < hw; ++i) {
        const double y = s->target[i];
        if (std::abs(y) < 1e-6) continue;
        ape += std::abs((maps[t * hw + i] - y) / y);
        ++n_ape;
      }
  }
  if (out_mape) *out_mape = n_ape ? 100.0 * ape / static_cast<double>(n_ape) : 0.0;
  return loss / static_cast<double>(split.size());
}

inline std::map<std::string, std::vector<double>> snapshot(const Params& p) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : p) out[name] = t.data();
  return out;
}

inline void restore(Params& p, const std::map<std::string, std::vector<double>>& snap) {
  for (auto& [name, t] : p) t.data() = snap.at(name);
}

}  // namespace detail

// Trains in place; returns the history and leaves the best-epoch
// parameters in the model.
inline TrainHistory train(Model& model, const std::vector<FieldSample>& train_set,
                          const std::vector<const FieldSample*>& val_set,
                          const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty() || val_set.empty())
    throw std::invalid_argument("train: empty train or val split");

  const bool use_csr =
      cfg.strategy == Strategy::kCsr || cfg.strategy == Strategy::kYieldZoneCsr;
  const bool use_yz =
      cfg.strategy == Strategy::kYieldZone || cfg.strategy == Strategy::kYieldZoneCsr;

  std::vector<double> weights;
  if (use_csr) weights = csr_weights(train_set, cfg.zones);

  std::vector<ZoneMap> zone_maps;
  if (use_yz) {
    zone_maps.reserve(train_set.size());
    for (const auto& s : train_set)
      zone_maps.push_back(classify_yield_zones(s.target, s.h, s.w, cfg.zones));
  }

  AdamWConfig opt{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay};
  AdamWState opt_state;
  Rng rng = Rng(cfg.seed).split("train");

  TrainHistory hist;
  hist.seed = cfg.seed;
  double best_val = std::numeric_limits<double>::infinity();
  auto best_params = detail::snapshot(model.params);
  std::size_t since_best = 0;

  const std::size_t steps =
      (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto batch = sample_batch(train_set.size(), use_csr ? &weights : nullptr,
                                      cfg.batch_size, rng);
      zero_grads(model.params);
      double batch_loss = 0.0;
      for (const std::size_t idx : batch) {
        const FieldSample* s = &train_set[idx];
        FieldSample zoned;
        if (use_yz) {
          zoned = apply_yieldzone(*s, zone_maps[idx]);
          s = &zoned;
        }
        const Tensor pred = forward(*s, model, rng, /*training=*/true);
        const Tensor tgt = target_patch_matrix(*s, model.config, model.norm);
        const Tensor loss = scale(mse_loss(pred, tgt),
                                  1.0 / static_cast<double>(batch.size()));
        backward(loss);
        batch_loss += loss.item() * static_cast<double>(batch.size());
      }
      batch_loss /= static_cast<double>(batch.size());
      if (!std::isfinite(batch_loss)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(step));
      }
      for (const auto& [name, p] : model.params)
        for (const double g : p.node().grad)
          if (!std::isfinite(g))
            throw NumericError("train: non-finite gradient in '" + name + "' at epoch " +
                               std::to_string(epoch) + ", batch " + std::to_string(step));
      clip_grad_norm(model.params, cfg.grad_clip);
      adamw_step(model.params, opt_state, opt);
      epoch_loss += batch_loss;
      ++n_batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(n_batches);
    rec.val_loss = detail::eval_mse_and_mape(model, val_set, &rec.val_mape);
    hist.epochs.push_back(rec);

    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best_params = detail::snapshot(model.params);
      hist.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    // patience 0 degenerates to a single epoch
    if (since_best >= cfg.early_stop_patience) break;
  }

  detail::restore(model.params, best_params);
  return hist;
}

inline void write_history_csv(const std::string& path, const TrainHistory& hist) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_history_csv: cannot open " + path);
  os << "epoch,train_loss,val_loss,val_mape\n";
  os.precision(17);
  for (const auto& r : hist.epochs)
    os << r.epoch << "," << r.train_loss << "," << r.val_loss << "," << r.val_mape << "\n";
}

}  // namespace cmavit
