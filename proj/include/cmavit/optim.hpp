#pragma once

// AdamW with decoupled weight decay: the decay term is applied to the
// parameter directly and never enters the moment estimates.

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmavit/tensor.hpp"

namespace cmavit {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.98;  // as printed in the source configuration; beta2 < beta1
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::map<std::string, std::vector<double>> m;  // first moment per parameter
  std::map<std::string, std::vector<double>> v;  // second moment, elementwise >= 0
  std::size_t t = 0;                             // completed steps
};

// One update over a named parameter set. Gradients are read from each
// tensor's grad buffer; the caller zeroes them afterwards.
inline void adamw_step(std::map<std::string, Tensor>& params, AdamWState& state,
                       const AdamWConfig& cfg) {
  if (cfg.lr < 0.0) throw std::invalid_argument("adamw_step: negative learning rate");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p.size()) m.assign(p.size(), 0.0);
    if (v.size() != p.size()) v.assign(p.size(), 0.0);
    auto& theta = p.data();
    auto& g = p.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
      theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Scale all grads so their global l2 norm is at most max_norm.
inline double clip_grad_norm(std::map<std::string, Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params)
    for (const double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& [name, p] : params)
      for (double& g : p.grad()) g *= s;
  }
  return norm;
}

inline void zero_grads(std::map<std::string, Tensor>& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

}  // namespace cmavit
