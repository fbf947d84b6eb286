#pragma once

// Synthetic vineyard dataset. Each block carries three independent
// latent factors, one per modality: fertility (only recoverable from the
// management text), a seasonal climate anomaly (only in the climate
// series), and a canopy-vigor level (only in the image channels). The
// target yield map mixes all three plus a smooth spatial field, so every
// modality contributes predictive signal.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmavit/checkpoint.hpp"
#include "cmavit/rng.hpp"
#include "cmavit/tensor.hpp"

namespace cmavit {

// Fixed channel order of the image stack.
enum Channel : std::size_t { kS2R = 0, kS2G, kS2B, kS2NIR, kS1VV, kS1VH, kDOY };
inline constexpr std::size_t kNumChannels = 7;
inline constexpr std::size_t kNumClimateVars = 4;  // Tmin, Tmax, Prcp, VP

// sin(2*pi*day/365), marking acquisition date within the season cycle
inline double encode_doy(int day_of_year) {
  if (day_of_year < 1 || day_of_year > 365)
    throw std::invalid_argument("encode_doy: day must be in 1..365");
  return std::sin(2.0 * 3.14159265358979323846 * static_cast<double>(day_of_year) / 365.0);
}

struct FieldSample {
  std::size_t t = 0, c = 0, h = 0, w = 0;
  std::vector<double> image;    // t*c*h*w, row-major [t][c][y][x]
  std::vector<double> climate;  // t*4
  std::string context_text;
  std::vector<double> target;   // h*w, t/ha
  std::string block_id;
  std::string cultivar;
  int year = 0;
  double latent_fertility = 0.0;  // generator internal, not persisted

  double& img(std::size_t ti, std::size_t ci, std::size_t y, std::size_t x) {
    return image[((ti * c + ci) * h + y) * w + x];
  }
  double img(std::size_t ti, std::size_t ci, std::size_t y, std::size_t x) const {
    return image[((ti * c + ci) * h + y) * w + x];
  }
};

struct GenConfig {
  std::size_t n_cultivars = 4;
  std::size_t blocks_per_cultivar = 3;
  std::size_t n_years = 3;
  std::size_t T = 15;
  std::size_t field_h = 16;
  std::size_t field_w = 16;
  double yield_base = 36.0;     // t/ha; latents push the mean across [10, 65]
  double fertility_gain = 12.0;
  double climate_gain = 8.0;
  double vigor_gain = 10.0;
  double spatial_sd = 4.0;
  double noise_sd = 0.8;
};

struct ZoneThresholds {
  double low = 22.0;   // below: LER (class 1)
  double high = 54.0;  // above: HER (class 3); [low, high] closed -> CR (class 2)
};

struct ZoneMap {
  std::size_t h = 0, w = 0;
  std::vector<int> labels;  // 1 = LER, 2 = CR, 3 = HER
};

inline ZoneMap classify_yield_zones(const std::vector<double>& target, std::size_t h,
                                    std::size_t w, const ZoneThresholds& th = {}) {
  ZoneMap zm{h, w, std::vector<int>(h * w)};
  for (std::size_t i = 0; i < target.size(); ++i)
    zm.labels[i] = target[i] < th.low ? 1 : (target[i] > th.high ? 3 : 2);
  return zm;
}

inline int yield_zone_of(double y, const ZoneThresholds& th = {}) {
  return y < th.low ? 1 : (y > th.high ? 3 : 2);
}

namespace detail {

// 15 acquisition dates spaced uniformly April 1 (day 91) to July 15 (day 196)
inline std::vector<int> observation_days(std::size_t t) {
  std::vector<int> days(t);
  for (std::size_t i = 0; i < t; ++i) {
    const double frac = t > 1 ? static_cast<double>(i) / static_cast<double>(t - 1) : 0.0;
    days[i] = static_cast<int>(std::lround(91.0 + frac * (196.0 - 91.0)));
  }
  return days;
}

// smooth zero-mean field: 4x4 white noise grid, bilinearly upsampled
inline std::vector<double> smooth_field(Rng& rng, std::size_t h, std::size_t w, double sd) {
  constexpr std::size_t kGrid = 4;
  std::array<double, kGrid * kGrid> grid;
  for (double& g : grid) g = rng.normal();
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const double gy = static_cast<double>(y) / static_cast<double>(h) * (kGrid - 1);
    const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(gy), kGrid - 2);
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double gx = static_cast<double>(x) / static_cast<double>(w) * (kGrid - 1);
      const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(gx), kGrid - 2);
      const double fx = gx - static_cast<double>(x0);
      const double v00 = grid[y0 * kGrid + x0], v01 = grid[y0 * kGrid + x0 + 1];
      const double v10 = grid[(y0 + 1) * kGrid + x0], v11 = grid[(y0 + 1) * kGrid + x0 + 1];
      out[y * w + x] = sd * ((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11));
    }
  }
  return out;
}

inline const char* vigor_word(int level) {
  switch (level) {
    case 1: return "verylow";
    case 2: return "low";
    case 3: return "medium";
    case 4: return "high";
    default: return "veryhigh";
  }
}

}  // namespace detail

// Deterministic synthetic data: identical seed -> identical samples.
inline std::vector<FieldSample> generate_blocks(std::uint64_t seed, const GenConfig& cfg) {
  if (cfg.n_cultivars == 0 || cfg.blocks_per_cultivar == 0 || cfg.n_years == 0)
    throw std::invalid_argument("generate_blocks: degenerate config");
  if (cfg.field_h < 1 || cfg.field_w < 1 || cfg.T < 1)
    throw std::invalid_argument("generate_blocks: degenerate dimensions");

  static const char* kCultivarNames[] = {"cs", "ch", "me", "syr", "ries", "mb", "moa", "sym"};
  const auto days = detail::observation_days(cfg.T);
  Rng root(seed);
  std::vector<FieldSample> out;

  for (std::size_t ci = 0; ci < cfg.n_cultivars; ++ci) {
    const std::string cultivar =
        ci < 8 ? kCultivarNames[ci] : "cv" + std::to_string(ci);
    for (std::size_t bi = 0; bi < cfg.blocks_per_cultivar; ++bi) {
      const std::string block_id = cultivar + "-b" + std::to_string(bi);
      Rng block_rng = Rng(seed).split(block_id);

      // text-only latent: fertility level 1..5
      const int fert_level = 1 + static_cast<int>(block_rng.next_below(5));
      const double fert = (static_cast<double>(fert_level) - 3.0) / 2.0;  // in [-1, 1]
      const double soil_ph = 5.5 + 0.4 * fert_level + 0.05 * block_rng.normal();
      std::ostringstream text;
      text << "cultivar " << cultivar << " block " << bi
           << " trellis quadrilateral row spacing 3.3 m"
           << " soil ph " << static_cast<int>(soil_ph * 10.0) / 10.0
           << " vigor " << detail::vigor_word(fert_level)
           << " fertility class " << detail::vigor_word(fert_level);

      for (std::size_t yi = 0; yi < cfg.n_years; ++yi) {
        Rng rng = block_rng.split(yi);
        const int year = 2016 + static_cast<int>(yi);

        // climate-only latent: seasonal anomaly in [-1, 1]
        const double climate_anom = rng.uniform(-1.0, 1.0);
        // image-only latent: canopy vigor in [-1, 1]
        const double canopy = rng.uniform(-1.0, 1.0);

        FieldSample s;
        s.t = cfg.T;
        s.c = kNumChannels;
        s.h = cfg.field_h;
        s.w = cfg.field_w;
        s.block_id = block_id;
        s.cultivar = cultivar;
        s.year = year;
        s.context_text = text.str();
        s.latent_fertility = fert;
        s.image.assign(cfg.T * kNumChannels * cfg.field_h * cfg.field_w, 0.0);
        s.climate.assign(cfg.T * kNumClimateVars, 0.0);

        // target: base + modality latents + smooth spatial field + noise
        auto spatial = detail::smooth_field(rng, cfg.field_h, cfg.field_w, cfg.spatial_sd);
        s.target.assign(cfg.field_h * cfg.field_w, 0.0);
        const double mean_yield = cfg.yield_base + cfg.fertility_gain * fert +
                                  cfg.climate_gain * climate_anom + cfg.vigor_gain * canopy;
        for (std::size_t i = 0; i < s.target.size(); ++i)
          s.target[i] = std::max(0.0, mean_yield + spatial[i] + cfg.noise_sd * rng.normal());

        // climate rows: seasonal ramp shifted by the anomaly; Tmin <= Tmax
        for (std::size_t ti = 0; ti < cfg.T; ++ti) {
          const double season = static_cast<double>(ti) / static_cast<double>(cfg.T - 1);
          const double tmin = 8.0 + 10.0 * season + 2.5 * climate_anom + 0.3 * rng.normal();
          const double tmax = tmin + 9.0 + 3.0 * season + 2.0 * climate_anom +
                              0.5 * std::abs(rng.normal());
          const double prcp =
              std::max(0.0, 3.0 + 4.0 * climate_anom * (1.0 - season) + 0.8 * rng.normal());
          const double vp = 1.0 + 0.6 * season + 0.25 * climate_anom + 0.05 * rng.normal();
          s.climate[ti * 4 + 0] = tmin;
          s.climate[ti * 4 + 1] = tmax;
          s.climate[ti * 4 + 2] = prcp;
          s.climate[ti * 4 + 3] = vp;
        }

        // image stack: NDVI-like trajectory whose late-season amplitude
        // encodes canopy vigor and the target's spatial anomaly
        for (std::size_t ti = 0; ti < cfg.T; ++ti) {
          const double season = static_cast<double>(ti) / static_cast<double>(cfg.T - 1);
          const double ramp = season * season;  // signal concentrates late in the season
          const double doy_val = encode_doy(days[ti]);
          for (std::size_t y = 0; y < cfg.field_h; ++y) {
            for (std::size_t x = 0; x < cfg.field_w; ++x) {
              const double pixel_vigor =
                  canopy + spatial[y * cfg.field_w + x] / cfg.spatial_sd * 0.5;
              const double v = ramp * (0.5 + 0.35 * pixel_vigor);
              const double tex = 0.015 * rng.normal();
              auto clamp01 = [](double z) { return std::clamp(z, 0.0, 1.0); };
              s.img(ti, kS2R, y, x) = clamp01(0.26 - 0.10 * v + tex);
              s.img(ti, kS2G, y, x) = clamp01(0.30 + 0.04 * v + 0.015 * rng.normal());
              s.img(ti, kS2B, y, x) = clamp01(0.20 - 0.03 * v + 0.015 * rng.normal());
              s.img(ti, kS2NIR, y, x) = clamp01(0.38 + 0.30 * v + 0.015 * rng.normal());
              s.img(ti, kS1VV, y, x) = clamp01(0.30 + 0.12 * v + 0.02 * rng.normal());
              s.img(ti, kS1VH, y, x) = clamp01(0.24 + 0.09 * v + 0.02 * rng.normal());
              s.img(ti, kDOY, y, x) = doy_val;
            }
          }
        }
        out.push_back(std::move(s));
      }
    }
  }
  (void)root;
  return out;
}

// Non-overlapping row-major 16x16 tiling; remainder rows/cols dropped.
inline std::vector<FieldSample> make_patches(const FieldSample& field, std::size_t size = 16) {
  if (field.h < size || field.w < size)
    throw std::invalid_argument("make_patches: field smaller than crop size");
  const std::size_t ny = field.h / size, nx = field.w / size;
  std::vector<FieldSample> crops;
  for (std::size_t by = 0; by < ny; ++by) {
    for (std::size_t bx = 0; bx < nx; ++bx) {
      FieldSample c;
      c.t = field.t;
      c.c = field.c;
      c.h = size;
      c.w = size;
      c.block_id = field.block_id;
      c.cultivar = field.cultivar;
      c.year = field.year;
      c.context_text = field.context_text;
      c.latent_fertility = field.latent_fertility;
      c.image.assign(field.t * field.c * size * size, 0.0);
      c.climate = field.climate;
      c.target.assign(size * size, 0.0);
      for (std::size_t ti = 0; ti < field.t; ++ti)
        for (std::size_t ci = 0; ci < field.c; ++ci)
          for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x)
              c.img(ti, ci, y, x) = field.img(ti, ci, by * size + y, bx * size + x);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          c.target[y * size + x] = field.target[(by * size + y) * field.w + bx * size + x];
      crops.push_back(std::move(c));
    }
  }
  return crops;
}

struct SplitManifest {
  std::vector<std::string> train, val, test;
  std::map<std::string, std::string> assignment;  // block_id -> split name
  std::vector<std::string> excluded;              // single-block cultivars
};

// Block-hold-out: per cultivar with n blocks, ceil(n/3) go to train and
// the remainder alternates val/test (a lone remainder goes to test, so
// n=2 yields 1 train / 1 test). Single-block cultivars are excluded.
inline SplitManifest split_bho(const std::vector<std::pair<std::string, std::string>>& blocks,
                               std::uint64_t seed) {
  std::map<std::string, std::vector<std::string>> by_cultivar;
  for (const auto& [id, cultivar] : blocks) by_cultivar[cultivar].push_back(id);

  SplitManifest m;
  for (auto& [cultivar, ids] : by_cultivar) {
    if (ids.size() < 2) {
      m.excluded.insert(m.excluded.end(), ids.begin(), ids.end());
      continue;
    }
    std::sort(ids.begin(), ids.end());
    Rng rng = Rng(seed).split(cultivar);
    for (std::size_t i = ids.size(); i > 1; --i)
      std::swap(ids[i - 1], ids[rng.next_below(i)]);

    const std::size_t n_train = (ids.size() + 2) / 3;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      std::string split;
      if (i < n_train) {
        split = "train";
      } else if (ids.size() - n_train == 1) {
        split = "test";
      } else {
        split = ((i - n_train) % 2 == 0) ? "val" : "test";
      }
      m.assignment[ids[i]] = split;
      (split == "train" ? m.train : split == "val" ? m.val : m.test).push_back(ids[i]);
    }
  }
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.val.begin(), m.val.end());
  std::sort(m.test.begin(), m.test.end());
  return m;
}

// Inverse-bucket-frequency sampling weights at the crop level, buckets
// taken from the zone of each sample's mean target. Normalized to sum 1.
inline std::vector<double> csr_weights(const std::vector<FieldSample>& samples,
                                       const ZoneThresholds& th = {}) {
  if (samples.empty()) throw std::invalid_argument("csr_weights: no samples");
  std::array<std::size_t, 4> counts{};
  std::vector<int> zones(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double mean = 0.0;
    for (const double v : samples[i].target) mean += v;
    mean /= static_cast<double>(samples[i].target.size());
    zones[i] = yield_zone_of(mean, th);
    counts[zones[i]] += 1;
  }
  std::vector<double> w(samples.size());
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    w[i] = 1.0 / static_cast<double>(counts[zones[i]]);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// ---- per-channel normalization (train-split statistics) --------------------

struct NormStats {
  std::vector<double> image_mean, image_sd;      // per channel
  std::vector<double> climate_mean, climate_sd;  // per variable
  double target_mean = 0.0, target_sd = 1.0;
};

inline NormStats compute_norm_stats(const std::vector<FieldSample>& train) {
  if (train.empty()) throw std::invalid_argument("compute_norm_stats: empty train split");
  const std::size_t c = train[0].c;
  NormStats st;
  st.image_mean.assign(c, 0.0);
  st.image_sd.assign(c, 0.0);
  st.climate_mean.assign(kNumClimateVars, 0.0);
  st.climate_sd.assign(kNumClimateVars, 0.0);
  std::vector<double> n_img(c, 0.0);
  double n_cli = 0.0, n_tgt = 0.0;
  for (const auto& s : train) {
    for (std::size_t ti = 0; ti < s.t; ++ti)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < s.h; ++y)
          for (std::size_t x = 0; x < s.w; ++x) {
            st.image_mean[ci] += s.img(ti, ci, y, x);
            n_img[ci] += 1.0;
          }
    for (std::size_t ti = 0; ti < s.t; ++ti)
      for (std::size_t v = 0; v < kNumClimateVars; ++v)
        st.climate_mean[v] += s.climate[ti * 4 + v];
    n_cli += static_cast<double>(s.t);
    for (const double v : s.target) st.target_mean += v;
    n_tgt += static_cast<double>(s.target.size());
  }
  for (std::size_t ci = 0; ci < c; ++ci) st.image_mean[ci] /= n_img[ci];
  for (std::size_t v = 0; v < kNumClimateVars; ++v) st.climate_mean[v] /= n_cli;
  st.target_mean /= n_tgt;
  for (const auto& s : train) {
    for (std::size_t ti = 0; ti < s.t; ++ti)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < s.h; ++y)
          for (std::size_t x = 0; x < s.w; ++x) {
            const double d = s.img(ti, ci, y, x) - st.image_mean[ci];
            st.image_sd[ci] += d * d;
          }
    for (std::size_t ti = 0; ti < s.t; ++ti)
      for (std::size_t v = 0; v < kNumClimateVars; ++v) {
        const double d = s.climate[ti * 4 + v] - st.climate_mean[v];
        st.climate_sd[v] += d * d;
      }
    for (const double v : s.target) {
      const double d = v - st.target_mean;
      st.target_sd += d * d;
    }
  }
  auto finish = [](double ss, double n) { return std::max(std::sqrt(ss / n), 1e-8); };
  for (std::size_t ci = 0; ci < c; ++ci) st.image_sd[ci] = finish(st.image_sd[ci], n_img[ci]);
  for (std::size_t v = 0; v < kNumClimateVars; ++v)
    st.climate_sd[v] = finish(st.climate_sd[v], n_cli);
  st.target_sd = finish(st.target_sd, n_tgt);
  return st;
}

// ---- directory persistence -------------------------------------------------

struct Dataset {
  std::vector<FieldSample> samples;
  SplitManifest splits;
  std::uint64_t seed = 0;

  std::vector<const FieldSample*> split(const std::string& name) const {
    const auto& ids = name == "train" ? splits.train : name == "val" ? splits.val : splits.test;
    std::vector<const FieldSample*> out;
    for (const auto& s : samples)
      if (std::find(ids.begin(), ids.end(), s.block_id) != ids.end()) out.push_back(&s);
    return out;
  }
};

inline void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  fs::create_directories(fs::path(dir) / "context");
  nlohmann::json manifest;
  manifest["seed"] = ds.seed;
  manifest["splits"] = {{"train", ds.splits.train},
                        {"val", ds.splits.val},
                        {"test", ds.splits.test},
                        {"excluded", ds.splits.excluded}};
  nlohmann::json sample_list = nlohmann::json::array();
  std::map<std::string, std::string> contexts;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.bin", i);
    std::map<std::string, Tensor> rec;
    rec.emplace("image", Tensor::from({s.t, s.c, s.h, s.w}, s.image));
    rec.emplace("climate", Tensor::from({s.t, kNumClimateVars}, s.climate));
    rec.emplace("target", Tensor::from({s.h, s.w}, s.target));
    save_archive((fs::path(dir) / name).string(), rec);
    sample_list.push_back({{"file", name},
                           {"block_id", s.block_id},
                           {"cultivar", s.cultivar},
                           {"year", s.year}});
    contexts[s.block_id] = s.context_text;
  }
  manifest["samples"] = sample_list;
  for (const auto& [block, text] : contexts) {
    std::ofstream os(fs::path(dir) / "context" / (block + ".txt"));
    os << text;
  }
  std::ofstream os(fs::path(dir) / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw std::runtime_error("save_dataset: write failed in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw std::runtime_error("load_dataset: missing manifest.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(is);
  Dataset ds;
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.splits.train = manifest.at("splits").at("train").get<std::vector<std::string>>();
  ds.splits.val = manifest.at("splits").at("val").get<std::vector<std::string>>();
  ds.splits.test = manifest.at("splits").at("test").get<std::vector<std::string>>();
  ds.splits.excluded = manifest.at("splits").at("excluded").get<std::vector<std::string>>();
  for (const auto& entry : manifest.at("samples")) {
    auto rec = load_archive((fs::path(dir) / entry.at("file").get<std::string>()).string());
    FieldSample s;
    const Tensor& img = rec.at("image");
    s.t = img.shape()[0];
    s.c = img.shape()[1];
    s.h = img.shape()[2];
    s.w = img.shape()[3];
    s.image = img.data();
    s.climate = rec.at("climate").data();
    s.target = rec.at("target").data();
    s.block_id = entry.at("block_id").get<std::string>();
    s.cultivar = entry.at("cultivar").get<std::string>();
    s.year = entry.at("year").get<int>();
    std::ifstream ctx(fs::path(dir) / "context" / (s.block_id + ".txt"));
    std::stringstream buf;
    buf << ctx.rdbuf();
    s.context_text = buf.str();
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace cmavit
