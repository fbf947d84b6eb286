#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "cmavit/dataset.hpp"
#include "cmavit/train.hpp"

using namespace cmavit;

TEST_CASE("encode_doy") {
  CHECK(std::abs(encode_doy(365)) < 1e-12);  // sin(2*pi)
  CHECK(encode_doy(91) == doctest::Approx(std::sin(2 * M_PI * 91.0 / 365.0)));
  CHECK(encode_doy(91) == doctest::Approx(0.99997).epsilon(1e-4));
  CHECK(encode_doy(274) == doctest::Approx(-0.99990).epsilon(1e-4));
  CHECK_THROWS_AS(encode_doy(0), std::invalid_argument);
  CHECK_THROWS_AS(encode_doy(366), std::invalid_argument);
}

TEST_CASE("generate_blocks invariants") {
  GenConfig cfg;
  auto samples = generate_blocks(1, cfg);
  CHECK(samples.size() == cfg.n_cultivars * cfg.blocks_per_cultivar * cfg.n_years);

  std::set<std::pair<std::string, int>> block_years;
  for (const auto& s : samples) {
    CHECK(s.t == cfg.T);
    CHECK(s.c == kNumChannels);
    block_years.insert({s.block_id, s.year});
    // DOY channel spatially constant per timestep, in [-1, 1]
    for (std::size_t t = 0; t < s.t; ++t) {
      const double v = s.img(t, kDOY, 0, 0);
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) CHECK(s.img(t, kDOY, y, x) == v);
      // Tmin <= Tmax
      CHECK(s.climate[t * 4 + 0] <= s.climate[t * 4 + 1]);
    }
    for (const double v : s.target) CHECK(v >= 0.0);
    CHECK(!s.context_text.empty());
  }
  CHECK(block_years.size() == samples.size());
}

TEST_CASE("generate_blocks determinism") {
  GenConfig cfg;
  cfg.n_cultivars = 2;
  cfg.blocks_per_cultivar = 2;
  cfg.n_years = 1;
  auto a = generate_blocks(7, cfg);
  auto b = generate_blocks(7, cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].climate == b[i].climate);
    CHECK(a[i].target == b[i].target);
    CHECK(a[i].context_text == b[i].context_text);
  }
  auto c = generate_blocks(8, cfg);
  CHECK(a[0].target != c[0].target);
}

TEST_CASE("generate_blocks degenerate config") {
  GenConfig cfg;
  cfg.blocks_per_cultivar = 0;
  CHECK_THROWS_AS(generate_blocks(1, cfg), std::invalid_argument);
}

TEST_CASE("latent fertility explains mean yield (OLS oracle)") {
  GenConfig cfg;
  cfg.n_cultivars = 8;
  cfg.blocks_per_cultivar = 9;
  cfg.n_years = 3;
  auto samples = generate_blocks(3, cfg);
  REQUIRE(samples.size() >= 200);
  // ordinary least squares of mean target on the latent
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(samples.size());
  std::vector<double> xs, ys;
  for (const auto& s : samples) {
    double mean = 0;
    for (const double v : s.target) mean += v;
    mean /= static_cast<double>(s.target.size());
    xs.push_back(s.latent_fertility);
    ys.push_back(mean);
    sx += s.latent_fertility;
    sy += mean;
    sxx += s.latent_fertility * s.latent_fertility;
    sxy += s.latent_fertility * mean;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double intercept = (sy - slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double fit = intercept + slope * xs[i];
    ss_res += (ys[i] - fit) * (ys[i] - fit);
    ss_tot += (ys[i] - sy / n) * (ys[i] - sy / n);
  }
  CHECK(1.0 - ss_res / ss_tot > 0.5);
}

TEST_CASE("make_patches") {
  GenConfig cfg;
  cfg.n_cultivars = 1;
  cfg.blocks_per_cultivar = 1;
  cfg.n_years = 1;

  SUBCASE("exact crop is the identity") {
    auto fields = generate_blocks(1, cfg);
    auto crops = make_patches(fields[0]);
    REQUIRE(crops.size() == 1);
    CHECK(crops[0].image == fields[0].image);
    CHECK(crops[0].target == fields[0].target);
  }
  SUBCASE("48x32 tiles into 6 crops") {
    cfg.field_h = 48;
    cfg.field_w = 32;
    auto fields = generate_blocks(1, cfg);
    auto crops = make_patches(fields[0]);
    CHECK(crops.size() == 6);
    // crop order row-major: crop 1 is the tile to the right of crop 0
    CHECK(crops[1].target[0] == fields[0].target[16]);
    CHECK(crops[2].target[0] == fields[0].target[16 * 32]);
  }
  SUBCASE("remainder rows dropped") {
    cfg.field_h = 17;
    cfg.field_w = 16;
    auto fields = generate_blocks(1, cfg);
    auto crops = make_patches(fields[0]);
    REQUIRE(crops.size() == 1);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        CHECK(crops[0].target[y * 16 + x] == fields[0].target[y * 16 + x]);
  }
  SUBCASE("too small is an error") {
    cfg.field_h = 8;
    auto fields = generate_blocks(1, cfg);
    CHECK_THROWS_AS(make_patches(fields[0]), std::invalid_argument);
  }
}

TEST_CASE("split_bho") {
  SUBCASE("3 blocks -> 1/1/1") {
    auto m = split_bho({{"a", "cv"}, {"b", "cv"}, {"c", "cv"}}, 5);
    CHECK(m.train.size() == 1);
    CHECK(m.val.size() == 1);
    CHECK(m.test.size() == 1);
  }
  SUBCASE("9 blocks -> 3/3/3") {
    std::vector<std::pair<std::string, std::string>> blocks;
    for (int i = 0; i < 9; ++i) blocks.push_back({"b" + std::to_string(i), "ch"});
    auto m = split_bho(blocks, 5);
    CHECK(m.train.size() == 3);
    CHECK(m.val.size() == 3);
    CHECK(m.test.size() == 3);
  }
  SUBCASE("2 blocks -> 1 train 1 test") {
    auto m = split_bho({{"a", "cv"}, {"b", "cv"}}, 5);
    CHECK(m.train.size() == 1);
    CHECK(m.val.empty());
    CHECK(m.test.size() == 1);
  }
  SUBCASE("singleton cultivar excluded") {
    auto m = split_bho({{"a", "cv"}, {"b", "cv"}, {"solo", "rare"}}, 5);
    REQUIRE(m.excluded.size() == 1);
    CHECK(m.excluded[0] == "solo");
  }
  SUBCASE("deterministic and a partition") {
    std::vector<std::pair<std::string, std::string>> blocks;
    for (int i = 0; i < 7; ++i) blocks.push_back({"x" + std::to_string(i), "a"});
    for (int i = 0; i < 4; ++i) blocks.push_back({"y" + std::to_string(i), "b"});
    auto m1 = split_bho(blocks, 9);
    auto m2 = split_bho(blocks, 9);
    CHECK(m1.train == m2.train);
    CHECK(m1.val == m2.val);
    CHECK(m1.test == m2.test);
    std::set<std::string> all;
    for (const auto& v : {m1.train, m1.val, m1.test}) all.insert(v.begin(), v.end());
    CHECK(all.size() == m1.train.size() + m1.val.size() + m1.test.size());  // disjoint
    CHECK(all.size() == blocks.size());                                     // complete
  }
}

TEST_CASE("classify_yield_zones") {
  std::vector<double> target{10.0, 30.0, 60.0, 22.0, 54.0, 0.0};
  auto zm = classify_yield_zones(target, 2, 3);
  CHECK(zm.labels == std::vector<int>{1, 2, 3, 2, 2, 1});
  // idempotent partition: every pixel exactly one class in {1,2,3}
  for (const int l : zm.labels) CHECK((l >= 1 && l <= 3));
}

namespace {

FieldSample sample_with_mean_yield(double y) {
  FieldSample s;
  s.t = 1;
  s.c = 1;
  s.h = 2;
  s.w = 2;
  s.image.assign(4, 0.0);
  s.climate.assign(4, 0.0);
  s.target.assign(4, y);
  return s;
}

}  // namespace

TEST_CASE("csr_weights") {
  SUBCASE("single bucket is uniform") {
    std::vector<FieldSample> samples(5, sample_with_mean_yield(30.0));
    auto w = csr_weights(samples);
    for (const double v : w) CHECK(v == doctest::Approx(0.2));
  }
  SUBCASE("90/10 imbalance gives 9x weight") {
    std::vector<FieldSample> samples;
    for (int i = 0; i < 90; ++i) samples.push_back(sample_with_mean_yield(30.0));
    for (int i = 0; i < 10; ++i) samples.push_back(sample_with_mean_yield(10.0));
    auto w = csr_weights(samples);
    CHECK(w[99] / w[0] == doctest::Approx(9.0));
    double total = 0;
    for (const double v : w) total += v;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  SUBCASE("weighted draws equalize bucket exposure") {
    std::vector<FieldSample> samples;
    for (int i = 0; i < 80; ++i) samples.push_back(sample_with_mean_yield(30.0));
    for (int i = 0; i < 20; ++i) samples.push_back(sample_with_mean_yield(60.0));
    auto w = csr_weights(samples);
    Rng rng(123);
    const int draws = 100000;
    auto batch = sample_batch(samples.size(), &w, draws, rng);
    int cr = 0;
    for (const auto idx : batch)
      if (idx < 80) ++cr;
    CHECK(std::abs(static_cast<double>(cr) / draws - 0.5) < 0.02);
  }
}

TEST_CASE("dataset directory round-trip") {
  GenConfig cfg;
  cfg.n_cultivars = 2;
  cfg.blocks_per_cultivar = 2;
  cfg.n_years = 1;
  Dataset ds;
  ds.seed = 11;
  auto fields = generate_blocks(11, cfg);
  std::vector<std::pair<std::string, std::string>> blocks;
  for (const auto& f : fields) blocks.push_back({f.block_id, f.cultivar});
  ds.splits = split_bho({{fields[0].block_id, fields[0].cultivar},
                         {fields[1].block_id, fields[1].cultivar},
                         {fields[2].block_id, fields[2].cultivar},
                         {fields[3].block_id, fields[3].cultivar}},
                        11);
  ds.samples = fields;

  const std::string dir = (std::filesystem::temp_directory_path() / "cmavit_ds_test").string();
  std::filesystem::remove_all(dir);
  save_dataset(dir, ds);
  Dataset back = load_dataset(dir);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].image == ds.samples[i].image);
    CHECK(back.samples[i].climate == ds.samples[i].climate);
    CHECK(back.samples[i].target == ds.samples[i].target);
    CHECK(back.samples[i].context_text == ds.samples[i].context_text);
    CHECK(back.samples[i].block_id == ds.samples[i].block_id);
  }
  CHECK(back.splits.train == ds.splits.train);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint archive round-trip is bit-exact") {
  std::map<std::string, Tensor> t;
  Rng rng(5);
  Tensor a = Tensor::zeros({3, 4});
  for (double& v : a.data()) v = rng.normal();
  t.emplace("layer.weight", a);
  t.emplace("scalar", Tensor::scalar(-0.0));
  const std::string path =
      (std::filesystem::temp_directory_path() / "cmavit_arch_test.bin").string();
  save_archive(path, t);
  auto back = load_archive(path);
  REQUIRE(back.size() == 2);
  CHECK(back.at("layer.weight").shape() == a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    // bit-exact, not just approximately equal
    CHECK(std::memcmp(&back.at("layer.weight").data()[i], &a.data()[i], sizeof(double)) == 0);
  }
  CHECK(std::signbit(back.at("scalar").data()[0]));
  std::filesystem::remove(path);
}
