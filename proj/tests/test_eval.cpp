#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "cmavit/eval.hpp"

using namespace cmavit;

TEST_CASE("compute_metrics") {
  SUBCASE("perfect prediction") {
    const std::vector<double> y = {1, 2, 3, 4};
    const Metrics m = compute_metrics(y, y);
    CHECK(m.r2 == 1.0);
    CHECK(m.mae == 0.0);
    CHECK(m.rmse == 0.0);
    CHECK(m.mape == 0.0);
    CHECK(m.n == 4);
  }
  SUBCASE("predicting the mean gives r2 of zero") {
    const std::vector<double> truth = {1, 2, 3, 4, 10};
    const std::vector<double> pred(truth.size(), 4.0);  // mean of truth
    CHECK(compute_metrics(pred, truth).r2 == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("hand-computed values") {
    const std::vector<double> pred = {11, 19, 32, 41};
    const std::vector<double> truth = {10, 20, 30, 40};
    const Metrics m = compute_metrics(pred, truth);
    CHECK(m.mae == doctest::Approx((1 + 1 + 2 + 1) / 4.0).epsilon(1e-15));
    CHECK(m.rmse == doctest::Approx(std::sqrt((1 + 1 + 4 + 1) / 4.0)).epsilon(1e-15));
    CHECK(m.mape ==
          doctest::Approx(100.0 * (0.1 + 0.05 + 2.0 / 30 + 0.025) / 4).epsilon(1e-12));
  }
  SUBCASE("near-zero truth values are excluded from mape only") {
    const std::vector<double> pred = {1.0, 0.5, 21.0};
    const std::vector<double> truth = {0.0, 1.0, 20.0};
    const Metrics m = compute_metrics(pred, truth);
    CHECK(m.mape_excluded == 1);
    CHECK(m.mape == doctest::Approx(100.0 * (0.5 + 0.05) / 2).epsilon(1e-12));
    CHECK(m.n == 3);  // other metrics still use every point
    CHECK(m.mae == doctest::Approx((1.0 + 0.5 + 1.0) / 3).epsilon(1e-15));
  }
  SUBCASE("rmse is never below mae") {
    Rng rng(77);
    std::vector<double> pred(10000), truth(10000);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      truth[i] = 30 + 5 * rng.normal();
      pred[i] = truth[i] + 2 * rng.normal();
    }
    const Metrics m = compute_metrics(pred, truth);
    CHECK(m.rmse >= m.mae);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(compute_metrics({1, 2}, {1}), std::invalid_argument);
    CHECK_THROWS_AS(compute_metrics({1}, {1}), std::invalid_argument);
    CHECK_THROWS_AS(compute_metrics({1, 2}, {5, 5}), std::invalid_argument);
  }
}

TEST_CASE("bucket_metrics partitions by observed yield") {
  // truths straddle both thresholds (22 and 54)
  const std::vector<double> truth = {10, 15, 30, 40, 50, 60, 70, 22, 54};
  std::vector<double> pred = truth;
  Rng rng(5);
  for (double& p : pred) p += rng.normal();
  const auto buckets = bucket_metrics(pred, truth);
  REQUIRE(buckets.count("ALL") == 1);
  REQUIRE(buckets.count("LER") == 1);
  REQUIRE(buckets.count("CR") == 1);
  REQUIRE(buckets.count("HER") == 1);
  CHECK(buckets.at("LER").n == 2);   // 10, 15
  CHECK(buckets.at("CR").n == 5);    // 30, 40, 50 plus both boundary values
  CHECK(buckets.at("HER").n == 2);   // 60, 70
  CHECK(buckets.at("ALL").n == truth.size());

  SUBCASE("bucket errors recombine to the overall sums") {
    double sae = 0.0, sse = 0.0;
    for (const char* key : {"LER", "CR", "HER"}) {
      const Metrics& m = buckets.at(key);
      sae += m.mae * static_cast<double>(m.n);
      sse += m.rmse * m.rmse * static_cast<double>(m.n);
    }
    const Metrics& all = buckets.at("ALL");
    CHECK(sae == doctest::Approx(all.mae * static_cast<double>(all.n)).epsilon(1e-12));
    CHECK(sse ==
          doctest::Approx(all.rmse * all.rmse * static_cast<double>(all.n)).epsilon(1e-12));
  }
  SUBCASE("empty buckets are absent, single-point buckets have nan r2") {
    const std::vector<double> low_truth = {10, 12, 30};
    const std::vector<double> low_pred = {11, 11, 29};
    const auto b = bucket_metrics(low_pred, low_truth);
    CHECK(b.count("HER") == 0);
    REQUIRE(b.count("CR") == 1);
    CHECK(b.at("CR").n == 1);
    CHECK(std::isnan(b.at("CR").r2));
    CHECK(b.at("CR").mae == doctest::Approx(1.0));
  }
}

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.mlp_hidden = 16;
  cfg.dropout_rate = 0.0;
  cfg.patch_px = 8;
  cfg.crop_px = 16;
  cfg.T = 2;
  cfg.vocab_size = 32;
  cfg.max_context_len = 4;
  return cfg;
}

FieldSample make_sample(const ModelConfig& cfg, std::uint64_t seed) {
  FieldSample s;
  s.t = cfg.T;
  s.c = cfg.channels;
  s.h = cfg.crop_px;
  s.w = cfg.crop_px;
  s.image.resize(s.t * s.c * s.h * s.w);
  Rng rng(seed);
  for (double& v : s.image) v = rng.normal();
  s.climate.resize(cfg.T * cfg.n_met);
  for (double& v : s.climate) v = rng.normal();
  s.target.resize(s.h * s.w);
  for (double& v : s.target) v = 30.0 + 5.0 * rng.normal();
  s.context_text = "vigor mid";
  s.block_id = "blk" + std::to_string(seed);
  s.cultivar = "c0";
  s.year = 2021;
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("evaluate_split and weekly series") {
  const ModelConfig cfg = tiny_config();
  Model m = init_model(cfg, 3);
  m.norm.target_mean = 30.0;
  m.norm.target_sd = 5.0;
  std::vector<FieldSample> samples = {make_sample(cfg, 1), make_sample(cfg, 2),
                                      make_sample(cfg, 3)};
  std::vector<const FieldSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);

  const EvalReport rep = evaluate_split(m, ptrs, "test");
  CHECK(rep.split == "test");
  CHECK(rep.overall.n == samples.size() * cfg.crop_px * cfg.crop_px);
  CHECK(rep.per_week.size() == cfg.T);
  for (const Metrics& w : rep.per_week) {
    CHECK(std::isfinite(w.mae));
    CHECK(w.n == rep.overall.n);
  }
  // the overall report scores the final week
  CHECK(rep.overall.mae == rep.per_week.back().mae);
  CHECK(rep.overall.r2 == rep.per_week.back().r2);

  SUBCASE("weekly_eval returns the same series") {
    const auto weeks = weekly_eval(m, ptrs);
    REQUIRE(weeks.size() == cfg.T);
    for (std::size_t t = 0; t < cfg.T; ++t) {
      CHECK(weeks[t].mae == rep.per_week[t].mae);
      CHECK(weeks[t].rmse == rep.per_week[t].rmse);
    }
  }
  SUBCASE("report files") {
    const std::string dir = "/tmp/cmavit_test_eval_report";
    std::filesystem::remove_all(dir);
    write_eval_report(dir, rep);
    const auto j = nlohmann::json::parse(slurp(std::filesystem::path(dir) / "eval_test.json"));
    CHECK(j.at("split") == "test");
    CHECK(j.at("overall").at("mae").get<double>() == rep.overall.mae);
    CHECK(j.at("buckets").contains("ALL"));
    std::ifstream csv(std::filesystem::path(dir) / "weekly_test.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    CHECK(line == "week,r2,mae,rmse,mape");
    while (std::getline(csv, line))
      if (!line.empty()) ++rows;
    CHECK(rows == cfg.T);
  }
}

TEST_CASE("predict_export") {
  const ModelConfig cfg = tiny_config();
  Model m = init_model(cfg, 9);
  m.norm.target_mean = 30.0;
  m.norm.target_sd = 5.0;
  std::vector<FieldSample> samples = {make_sample(cfg, 4), make_sample(cfg, 5)};
  std::vector<const FieldSample*> ptrs = {&samples[0], &samples[1]};

  const std::string dir = "/tmp/cmavit_test_predict";
  std::filesystem::remove_all(dir);
  predict_export(m, ptrs, dir);

  for (const char* stem : {"pred_00000", "pred_00001"}) {
    const auto csv_path = std::filesystem::path(dir) / (std::string(stem) + ".csv");
    REQUIRE(std::filesystem::exists(csv_path));
    std::ifstream csv(csv_path);
    std::string line;
    std::getline(csv, line);
    CHECK(line == "week,row,col,pred_t_ha,truth_t_ha");
    std::size_t rows = 0;
    while (std::getline(csv, line))
      if (!line.empty()) ++rows;
    CHECK(rows == cfg.T * cfg.crop_px * cfg.crop_px);  // 512 for the small setup
  }

  SUBCASE("csv and json mape agree") {
    std::ifstream csv(std::filesystem::path(dir) / "pred_00000.csv");
    std::string line;
    std::getline(csv, line);  // header
    std::vector<std::vector<double>> pw(cfg.T), tw(cfg.T);
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string f;
      std::getline(ss, f, ',');
      const std::size_t week = std::stoul(f) - 1;
      std::getline(ss, f, ',');
      std::getline(ss, f, ',');
      std::getline(ss, f, ',');
      pw[week].push_back(std::stod(f));
      std::getline(ss, f, ',');
      tw[week].push_back(std::stod(f));
    }
    const auto j = nlohmann::json::parse(slurp(std::filesystem::path(dir) / "pred_00000.json"));
    REQUIRE(j.at("per_week").size() == cfg.T);
    for (std::size_t t = 0; t < cfg.T; ++t) {
      const Metrics m2 = compute_metrics(pw[t], tw[t]);
      CHECK(std::abs(j.at("per_week")[t].at("mape").get<double>() - m2.mape) < 1e-9);
      CHECK(std::abs(j.at("per_week")[t].at("mae").get<double>() - m2.mae) < 1e-9);
    }
  }
  SUBCASE("re-export is byte identical") {
    const std::string first = slurp(std::filesystem::path(dir) / "pred_00000.csv");
    const std::string dir2 = "/tmp/cmavit_test_predict2";
    std::filesystem::remove_all(dir2);
    predict_export(m, ptrs, dir2);
    CHECK(slurp(std::filesystem::path(dir2) / "pred_00000.csv") == first);
    CHECK(slurp(std::filesystem::path(dir2) / "pred_00000.json") ==
          slurp(std::filesystem::path(dir) / "pred_00000.json"));
  }
}

TEST_CASE("maskout csv layout survives a failed row") {
  MaskoutReport rep;
  MaskoutRow ok;
  ok.variant = "full";
  Metrics m;
  m.r2 = 0.5;
  m.mae = 1.0;
  m.rmse = 1.5;
  m.mape = 4.0;
  m.n = 10;
  ok.by_split = {{"train", m}, {"val", m}, {"test", m}};
  MaskoutRow bad;
  bad.variant = "climate-maskout";
  bad.failed = true;
  bad.error = "synthetic failure";
  rep.rows = {ok, bad};

  const std::string path = "/tmp/cmavit_test_maskout.csv";
  write_maskout_csv(path, rep);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "variant,split,r2,mae,rmse,mape");
  std::vector<std::string> lines;
  while (std::getline(is, line))
    if (!line.empty()) lines.push_back(line);
  REQUIRE(lines.size() == 4);  // three splits plus one error row
  CHECK(lines[0].rfind("full,train,", 0) == 0);
  CHECK(lines[3] == "climate-maskout,error,,,,");
}
