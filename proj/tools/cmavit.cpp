// Command-line driver: synthetic data generation, training, evaluation,
// weekly series, modality maskout, and prediction export.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmavit/dataset.hpp"
#include "cmavit/eval.hpp"
#include "cmavit/model.hpp"
#include "cmavit/train.hpp"

namespace {

using nlohmann::json;

struct CliOptions {
  std::uint64_t seed = 0;
  std::string config_path;
  std::string dataset_dir;
  std::string ckpt_dir;
  std::string out_dir;
  std::string split = "test";
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config file not found: " + path);
  return json::parse(is);
}

cmavit::GenConfig gen_config_from(const json& j) {
  cmavit::GenConfig g;
  if (!j.contains("gen")) return g;
  const json& s = j.at("gen");
  g.n_cultivars = s.value("n_cultivars", g.n_cultivars);
  g.blocks_per_cultivar = s.value("blocks_per_cultivar", g.blocks_per_cultivar);
  g.n_years = s.value("n_years", g.n_years);
  g.T = s.value("T", g.T);
  g.field_h = s.value("field_h", g.field_h);
  g.field_w = s.value("field_w", g.field_w);
  return g;
}

cmavit::ModelConfig model_config_from(const json& j) {
  cmavit::ModelConfig m;
  if (j.contains("model")) {
    if (j.at("model").value("paper_scale", false)) m = cmavit::ModelConfig::paper_scale();
    json merged = json(m);
    merged.merge_patch(j.at("model"));
    merged.erase("paper_scale");
    m = merged.get<cmavit::ModelConfig>();
  }
  return m;
}

cmavit::TrainConfig train_config_from(const json& j, std::uint64_t seed) {
  cmavit::TrainConfig t;
  t.seed = seed;
  if (!j.contains("train")) return t;
  const json& s = j.at("train");
  t.lr = s.value("lr", t.lr);
  t.beta1 = s.value("beta1", t.beta1);
  t.beta2 = s.value("beta2", t.beta2);
  t.weight_decay = s.value("weight_decay", t.weight_decay);
  t.max_epochs = s.value("max_epochs", t.max_epochs);
  t.early_stop_patience = s.value("early_stop_patience", t.early_stop_patience);
  t.batch_size = s.value("batch_size", t.batch_size);
  t.grad_clip = s.value("grad_clip", t.grad_clip);
  t.seed = s.value("seed", t.seed);
  t.strategy = cmavit::strategy_from_string(s.value("strategy", std::string("plain")));
  t.zones.low = s.value("zone_low", t.zones.low);
  t.zones.high = s.value("zone_high", t.zones.high);
  return t;
}

int cmd_synth(const CliOptions& opt) {
  const json cfg = load_config(opt.config_path);
  const cmavit::GenConfig gen = gen_config_from(cfg);
  auto fields = cmavit::generate_blocks(opt.seed, gen);

  cmavit::Dataset ds;
  ds.seed = opt.seed;
  std::vector<std::pair<std::string, std::string>> blocks;
  for (const auto& f : fields)
    if (blocks.empty() || blocks.back().first != f.block_id)
      blocks.emplace_back(f.block_id, f.cultivar);
  ds.splits = cmavit::split_bho(blocks, opt.seed);
  for (const auto& f : fields)
    for (auto& crop : cmavit::make_patches(f)) ds.samples.push_back(std::move(crop));

  cmavit::save_dataset(opt.out_dir, ds);
  std::cout << "wrote " << ds.samples.size() << " crops ("
            << ds.splits.train.size() << " train / " << ds.splits.val.size() << " val / "
            << ds.splits.test.size() << " test blocks) to " << opt.out_dir << "\n";
  for (const auto& ex : ds.splits.excluded)
    std::cerr << "warning: block " << ex << " excluded (single-block cultivar)\n";
  return 0;
}

int cmd_train(const CliOptions& opt) {
  const json cfg = load_config(opt.config_path);
  const cmavit::Dataset ds = cmavit::load_dataset(opt.dataset_dir);
  const cmavit::TrainConfig tc = train_config_from(cfg, opt.seed);
  cmavit::ModelConfig mc = model_config_from(cfg);
  if (!ds.samples.empty()) mc.T = ds.samples[0].t;

  std::vector<cmavit::FieldSample> train_set;
  for (const cmavit::FieldSample* s : ds.split("train")) train_set.push_back(*s);
  const auto val_set = ds.split("val");

  cmavit::Model model = cmavit::init_model(mc, tc.seed);
  model.norm = cmavit::compute_norm_stats(train_set);
  const cmavit::TrainHistory hist = cmavit::train(model, train_set, val_set, tc);

  std::filesystem::create_directories(opt.out_dir);
  cmavit::save_model(opt.out_dir, model);
  cmavit::write_history_csv(
      (std::filesystem::path(opt.out_dir) / "history.csv").string(), hist);
  std::cout << "trained " << hist.epochs.size() << " epochs, best epoch "
            << hist.best_epoch << ", val loss "
            << hist.epochs[hist.best_epoch].val_loss << "\n";
  return 0;
}

int cmd_eval(const CliOptions& opt) {
  const cmavit::Dataset ds = cmavit::load_dataset(opt.dataset_dir);
  const cmavit::Model model = cmavit::load_model(opt.ckpt_dir);
  for (const char* split : {"train", "val", "test"}) {
    const auto samples = ds.split(split);
    if (samples.empty()) continue;
    const auto rep = cmavit::evaluate_split(model, samples, split);
    cmavit::write_eval_report(opt.out_dir, rep);
    std::cout << split << ": r2=" << rep.overall.r2 << " mae=" << rep.overall.mae
              << " rmse=" << rep.overall.rmse << " mape=" << rep.overall.mape << "\n";
  }
  return 0;
}

int cmd_weekly(const CliOptions& opt) {
  const cmavit::Dataset ds = cmavit::load_dataset(opt.dataset_dir);
  const cmavit::Model model = cmavit::load_model(opt.ckpt_dir);
  const auto samples = ds.split(opt.split);
  if (samples.empty()) throw std::runtime_error("weekly: empty split " + opt.split);
  const auto series = cmavit::weekly_eval(model, samples);
  std::filesystem::create_directories(opt.out_dir);
  std::ofstream csv(std::filesystem::path(opt.out_dir) / "weekly.csv");
  csv.precision(17);
  csv << "week,r2,mae,rmse,mape\n";
  for (std::size_t t = 0; t < series.size(); ++t)
    csv << (t + 1) << "," << series[t].r2 << "," << series[t].mae << ","
        << series[t].rmse << "," << series[t].mape << "\n";
  std::cout << "wrote " << series.size() << "-week series for split " << opt.split << "\n";
  return 0;
}

int cmd_maskout(const CliOptions& opt) {
  const json cfg = load_config(opt.config_path);
  const cmavit::Dataset ds = cmavit::load_dataset(opt.dataset_dir);
  cmavit::ModelConfig mc = model_config_from(cfg);
  if (!ds.samples.empty()) mc.T = ds.samples[0].t;
  const cmavit::TrainConfig tc = train_config_from(cfg, opt.seed);
  const auto report = cmavit::run_maskout(ds, mc, tc);
  std::filesystem::create_directories(opt.out_dir);
  cmavit::write_maskout_csv(
      (std::filesystem::path(opt.out_dir) / "maskout.csv").string(), report);
  for (const auto& row : report.rows) {
    if (row.failed) {
      std::cout << row.variant << ": FAILED (" << row.error << ")\n";
    } else {
      std::cout << row.variant << ": test r2=" << row.by_split.at("test").r2 << "\n";
    }
  }
  return 0;
}

int cmd_predict(const CliOptions& opt) {
  const cmavit::Dataset ds = cmavit::load_dataset(opt.dataset_dir);
  const cmavit::Model model = cmavit::load_model(opt.ckpt_dir);
  const auto samples = ds.split(opt.split);
  if (samples.empty()) throw std::runtime_error("predict: empty split " + opt.split);
  cmavit::predict_export(model, samples, opt.out_dir);
  std::cout << "exported " << samples.size() << " samples to " << opt.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CMAViT pixel-yield regression toolkit"};
  app.require_subcommand(1);

  CliOptions opt;
  app.add_option("--seed", opt.seed, "global RNG seed");
  app.add_option("--config", opt.config_path, "JSON config file");
  app.add_option("--dataset", opt.dataset_dir, "dataset directory");
  app.add_option("--ckpt", opt.ckpt_dir, "checkpoint directory");
  app.add_option("--out", opt.out_dir, "output directory");
  app.add_option("--split", opt.split, "dataset split (weekly/predict)");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  auto* train = app.add_subcommand("train", "train a model");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on all splits");
  auto* weekly = app.add_subcommand("weekly", "per-week metric series");
  auto* maskout = app.add_subcommand("maskout", "modality maskout experiment");
  auto* predict = app.add_subcommand("predict", "export predictions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(opt);
    if (train->parsed()) return cmd_train(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (weekly->parsed()) return cmd_weekly(opt);
    if (maskout->parsed()) return cmd_maskout(opt);
    if (predict->parsed()) return cmd_predict(opt);
  } catch (const cmavit::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
