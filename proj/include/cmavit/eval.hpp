#pragma once

// Metrics (R2, MAE, RMSE, MAPE), yield-range bucketed reports, per-week
// series, the modality-maskout experiment, and prediction export.
// Bucket membership goes by observed (truth) yield. MAPE excludes truth
// values below 1e-6 t/ha and reports how many were excluded.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmavit/dataset.hpp"
#include "cmavit/model.hpp"
#include "cmavit/train.hpp"

namespace cmavit {

struct Metrics {
  double r2 = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;          // percent
  std::size_t n = 0;          // scored points
  std::size_t mape_excluded = 0;
};

inline Metrics compute_metrics(const std::vector<double>& pred,
                               const std::vector<double>& truth) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("compute_metrics: length mismatch");
  if (pred.size() < 2)
    throw std::invalid_argument("compute_metrics: need at least 2 points");
  const std::size_t n = pred.size();
  double mean_y = 0.0;
  for (const double y : truth) mean_y += y;
  mean_y /= static_cast<double>(n);
  double ss_res = 0.0, ss_tot = 0.0, abs_err = 0.0, ape = 0.0;
  std::size_t n_ape = 0, excluded = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = pred[i] - truth[i];
    ss_res += e * e;
    ss_tot += (truth[i] - mean_y) * (truth[i] - mean_y);
    abs_err += std::abs(e);
    if (std::abs(truth[i]) < 1e-6) {
      ++excluded;
    } else {
      ape += std::abs(e / truth[i]);
      ++n_ape;
    }
  }
  if (ss_tot == 0.0)
    throw std::invalid_argument("compute_metrics: zero-variance truth, r2 undefined");
  Metrics m;
  m.n = n;
  m.r2 = 1.0 - ss_res / ss_tot;
  m.mae = abs_err / static_cast<double>(n);
  m.rmse = std::sqrt(ss_res / static_cast<double>(n));
  m.mape = n_ape ? 100.0 * ape / static_cast<double>(n_ape) : 0.0;
  m.mape_excluded = excluded;
  return m;
}

// one entry per populated bucket; keys "ALL", "LER", "CR", "HER"
inline std::map<std::string, Metrics> bucket_metrics(const std::vector<double>& pred,
                                                     const std::vector<double>& truth,
                                                     const ZoneThresholds& th = {}) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> buckets;
  buckets["ALL"] = {pred, truth};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int z = yield_zone_of(truth[i], th);
    const std::string key = z == 1 ? "LER" : z == 2 ? "CR" : "HER";
    buckets[key].first.push_back(pred[i]);
    buckets[key].second.push_back(truth[i]);
  }
  std::map<std::string, Metrics> out;
  for (auto& [key, pv] : buckets) {
    if (pv.first.empty()) continue;  // empty bucket stays absent
    Metrics m;
    m.n = pv.first.size();
    double mean_y = 0.0;
    for (const double y : pv.second) mean_y += y;
    mean_y /= static_cast<double>(m.n);
    double ss_res = 0.0, ss_tot = 0.0, ae = 0.0, ape = 0.0;
    std::size_t n_ape = 0;
    for (std::size_t i = 0; i < pv.first.size(); ++i) {
      const double e = pv.first[i] - pv.second[i];
      ss_res += e * e;
      ss_tot += (pv.second[i] - mean_y) * (pv.second[i] - mean_y);
      ae += std::abs(e);
      if (std::abs(pv.second[i]) >= 1e-6) {
        ape += std::abs(e / pv.second[i]);
        ++n_ape;
      } else {
        ++m.mape_excluded;
      }
    }
    m.mae = ae / static_cast<double>(m.n);
    m.rmse = std::sqrt(ss_res / static_cast<double>(m.n));
    m.mape = n_ape ? 100.0 * ape / static_cast<double>(n_ape) : 0.0;
    m.r2 = (m.n >= 2 && ss_tot > 0.0) ? 1.0 - ss_res / ss_tot
                                      : std::numeric_limits<double>::quiet_NaN();
    out[key] = m;
  }
  return out;
}

// ---- model-level evaluation ------------------------------------------------

namespace detail {

// week-15-only (harvest) predictions pooled across samples, plus
// per-week pools for the time-series report
struct PredictionPool {
  std::vector<double> pred_final, truth_final;
  std::vector<std::vector<double>> pred_week, truth_week;  // T entries
};

inline PredictionPool collect_predictions(const Model& m,
                                          const std::vector<const FieldSample*>& split) {
  PredictionPool pool;
  pool.pred_week.resize(m.config.T);
  pool.truth_week.resize(m.config.T);
  Rng rng(0);
  const std::size_t hw = m.config.crop_px * m.config.crop_px;
  for (const FieldSample* s : split) {
    const Tensor out = forward(*s, m, rng, /*training=*/false);
    const auto maps = assemble_maps(out, m.config, m.norm);
    for (std::size_t t = 0; t < m.config.T; ++t)
      for (std::size_t i = 0; i < hw; ++i) {
        pool.pred_week[t].push_back(maps[t * hw + i]);
        pool.truth_week[t].push_back(s->target[i]);
      }
    for (std::size_t i = 0; i < hw; ++i) {
      pool.pred_final.push_back(maps[(m.config.T - 1) * hw + i]);
      pool.truth_final.push_back(s->target[i]);
    }
  }
  return pool;
}

}  // namespace detail

struct EvalReport {
  std::string split;
  Metrics overall;                            // final-week predictions
  std::map<std::string, Metrics> per_bucket;  // ALL / LER / CR / HER
  std::vector<Metrics> per_week;              // T rows
};

inline EvalReport evaluate_split(const Model& m, const std::vector<const FieldSample*>& split,
                                 const std::string& name, const ZoneThresholds& th = {}) {
  if (split.empty()) throw std::invalid_argument("evaluate_split: empty split " + name);
  const auto pool = detail::collect_predictions(m, split);
  EvalReport rep;
  rep.split = name;
  rep.overall = compute_metrics(pool.pred_final, pool.truth_final);
  rep.per_bucket = bucket_metrics(pool.pred_final, pool.truth_final, th);
  for (std::size_t t = 0; t < m.config.T; ++t)
    rep.per_week.push_back(compute_metrics(pool.pred_week[t], pool.truth_week[t]));
  return rep;
}

// metrics of week-t predictions against harvest truth, t = 1..T
inline std::vector<Metrics> weekly_eval(const Model& m,
                                        const std::vector<const FieldSample*>& split) {
  return evaluate_split(m, split, "weekly").per_week;
}

// ---- modality maskout ------------------------------------------------------

struct MaskoutRow {
  std::string variant;  // full / mngm-maskout / climate-maskout / mngm-climate-maskout
  std::map<std::string, Metrics> by_split;  // train / val / test
  bool failed = false;
  std::string error;
};

struct MaskoutReport {
  std::vector<MaskoutRow> rows;
};

// Retrains one model per modality variant under a shared seed and
// identical budgets, then evaluates each on all three splits.
inline MaskoutReport run_maskout(const Dataset& ds, const ModelConfig& base_config,
                                 const TrainConfig& tc) {
  struct Variant {
    const char* name;
    bool climate, context;
  };
  const Variant variants[] = {{"full", true, true},
                              {"mngm-maskout", true, false},
                              {"climate-maskout", false, true},
                              {"mngm-climate-maskout", false, false}};

  const auto train_ptrs = ds.split("train");
  const auto val_ptrs = ds.split("val");
  const auto test_ptrs = ds.split("test");
  std::vector<FieldSample> train_set;
  for (const FieldSample* s : train_ptrs) train_set.push_back(*s);

  MaskoutReport report;
  for (const auto& v : variants) {
    MaskoutRow row;
    row.variant = v.name;
    try {
      ModelConfig cfg = base_config;
      cfg.use_climate = v.climate;
      cfg.use_context = v.context;
      Model model = init_model(cfg, tc.seed);
      model.norm = compute_norm_stats(train_set);
      train(model, train_set, val_ptrs, tc);
      row.by_split["train"] = evaluate_split(model, train_ptrs, "train", tc.zones).overall;
      row.by_split["val"] = evaluate_split(model, val_ptrs, "val", tc.zones).overall;
      row.by_split["test"] = evaluate_split(model, test_ptrs, "test", tc.zones).overall;
    } catch (const std::exception& e) {
      // a failed training aborts this row only
      row.failed = true;
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---- report serialization --------------------------------------------------

inline nlohmann::json metrics_to_json(const Metrics& m) {
  return {{"r2", m.r2},       {"mae", m.mae},
          {"rmse", m.rmse},   {"mape", m.mape},
          {"n", m.n},         {"mape_excluded", m.mape_excluded}};
}

inline void write_eval_report(const std::string& dir, const EvalReport& rep) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json j;
  j["split"] = rep.split;
  j["overall"] = metrics_to_json(rep.overall);
  for (const auto& [bucket, m] : rep.per_bucket) j["buckets"][bucket] = metrics_to_json(m);
  std::ofstream os(fs::path(dir) / ("eval_" + rep.split + ".json"));
  os.precision(17);
  os << j.dump(2) << "\n";
  std::ofstream csv(fs::path(dir) / ("weekly_" + rep.split + ".csv"));
  csv.precision(17);
  csv << "week,r2,mae,rmse,mape\n";
  for (std::size_t t = 0; t < rep.per_week.size(); ++t) {
    const Metrics& m = rep.per_week[t];
    csv << (t + 1) << "," << m.r2 << "," << m.mae << "," << m.rmse << "," << m.mape << "\n";
  }
  if (!csv) throw std::runtime_error("write_eval_report: write failed in " + dir);
}

inline void write_maskout_csv(const std::string& path, const MaskoutReport& rep) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_maskout_csv: cannot open " + path);
  os.precision(17);
  os << "variant,split,r2,mae,rmse,mape\n";
  for (const auto& row : rep.rows) {
    if (row.failed) {
      os << row.variant << ",error,,,,\n";
      continue;
    }
    for (const char* split : {"train", "val", "test"}) {
      const Metrics& m = row.by_split.at(split);
      os << row.variant << "," << split << "," << m.r2 << "," << m.mae << "," << m.rmse
         << "," << m.mape << "\n";
    }
  }
}

// per sample: CSV of (week,row,col,pred,truth) plus a JSON metric summary
inline void predict_export(const Model& m, const std::vector<const FieldSample*>& samples,
                           const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Rng rng(0);
  const std::size_t hw = m.config.crop_px * m.config.crop_px;
  for (std::size_t si = 0; si < samples.size(); ++si) {
    const FieldSample& s = *samples[si];
    const auto maps = assemble_maps(forward(s, m, rng, false), m.config, m.norm);
    char stem[64];
    std::snprintf(stem, sizeof(stem), "pred_%05zu", si);
    std::ofstream csv(fs::path(out_dir) / (std::string(stem) + ".csv"));
    if (!csv) throw std::runtime_error("predict_export: cannot write in " + out_dir);
    csv.precision(17);
    csv << "week,row,col,pred_t_ha,truth_t_ha\n";
    nlohmann::json weeks = nlohmann::json::array();
    for (std::size_t t = 0; t < m.config.T; ++t) {
      std::vector<double> pw, tw;
      for (std::size_t y = 0; y < m.config.crop_px; ++y)
        for (std::size_t x = 0; x < m.config.crop_px; ++x) {
          const double pv = maps[t * hw + y * m.config.crop_px + x];
          const double tv = s.target[y * m.config.crop_px + x];
          csv << (t + 1) << "," << y << "," << x << "," << pv << "," << tv << "\n";
          pw.push_back(pv);
          tw.push_back(tv);
        }
      weeks.push_back(metrics_to_json(compute_metrics(pw, tw)));
    }
    nlohmann::json j;
    j["sample"] = {{"block_id", s.block_id}, {"cultivar", s.cultivar}, {"year", s.year}};
    j["per_week"] = weeks;
    std::ofstream js(fs::path(out_dir) / (std::string(stem) + ".json"));
    js.precision(17);
    js << j.dump(2) << "\n";
  }
}

}  // namespace cmavit
