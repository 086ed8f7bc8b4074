#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "mlvae/synthdata.hpp"

using namespace mlvae;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mlvae_synthdata_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& data) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  REQUIRE(f.good());
}

GenConfig small_cfg(int n) {
  GenConfig cfg;
  cfg.n_utterances = n;
  return cfg;
}

bool same_utterance(const Utterance& a, const Utterance& b) {
  if (a.id != b.id || a.c != b.c) return false;
  if (a.x.rows() != b.x.rows() || a.x.cols() != b.x.cols()) return false;
  if (a.x != b.x) return false;  // bit-exact, no tolerance
  if (a.truth.has_value() != b.truth.has_value()) return false;
  if (a.truth) {
    if (a.truth->pronounced != b.truth->pronounced) return false;
    if (a.truth->boundaries != b.truth->boundaries) return false;
    if (a.truth->mismatch != b.truth->mismatch) return false;
  }
  return true;
}

// Oracle for the floor-then-distribute split rule.
SplitSizes expected_split(int total) {
  SplitSizes s{total * 6 / 10, total * 2 / 10, total * 2 / 10};
  int leftover = total - s.train - s.valid - s.test;
  if (leftover >= 1) ++s.train;
  if (leftover >= 2) ++s.valid;
  return s;
}

}  // namespace

TEST_CASE("split sizes honor 60:20:20 with leftovers to train then valid") {
  SplitSizes s = split_sizes(3000);
  CHECK(s.train == 1800);
  CHECK(s.valid == 600);
  CHECK(s.test == 600);

  s = split_sizes(5);
  CHECK(s.train == 3);
  CHECK(s.valid == 1);
  CHECK(s.test == 1);

  s = split_sizes(7);  // one leftover
  CHECK(s.train == 5);
  CHECK(s.valid == 1);
  CHECK(s.test == 1);

  s = split_sizes(9);  // two leftovers
  CHECK(s.train == 6);
  CHECK(s.valid == 2);
  CHECK(s.test == 1);

  for (int total = 5; total <= 200; ++total) {
    SplitSizes got = split_sizes(total);
    SplitSizes want = expected_split(total);
    CHECK(got.train == want.train);
    CHECK(got.valid == want.valid);
    CHECK(got.test == want.test);
    CHECK(got.train + got.valid + got.test == total);
  }
}

TEST_CASE("digit inventory is uniform") {
  PhonemeInventory inv = digit_inventory(10);
  REQUIRE(inv.size() == 10);
  CHECK(inv.symbols.front() == "0");
  CHECK(inv.symbols.back() == "9");
  for (int i = 0; i < 10; ++i) {
    CHECK(inv.prior[i] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(inv.zeta[i] == doctest::Approx(0.1).epsilon(1e-12));
  }
}

TEST_CASE("symbol model means are separated and deterministic") {
  SymbolModel a = SymbolModel::make(10, 8, 4.0, 5, 20, 99);
  SymbolModel b = SymbolModel::make(10, 8, 4.0, 5, 20, 99);
  CHECK(a.mean == b.mean);
  CHECK(a.var == b.var);
  CHECK(a.d_min == 5);
  CHECK(a.d_max == 20);
  a.validate();
  for (int i = 0; i < a.symbols(); ++i)
    for (int j = i + 1; j < a.symbols(); ++j)
      CHECK((a.mean.row(i) - a.mean.row(j)).norm() >= 4.0);

  SymbolModel c = SymbolModel::make(10, 8, 4.0, 5, 20, 100);
  CHECK(a.mean != c.mean);
}

TEST_CASE("symbol model validation rejects bad shapes") {
  SymbolModel sm = SymbolModel::make(3, 4, 2.0, 5, 10, 1);
  sm.mean.row(1) = sm.mean.row(0);  // collapse two means
  CHECK_THROWS_AS(sm.validate(), ValidationError);

  SymbolModel short_dur = SymbolModel::make(3, 4, 2.0, 5, 10, 1);
  short_dur.d_min = 2;
  CHECK_THROWS_AS(short_dur.validate(), ValidationError);

  SymbolModel bad_var = SymbolModel::make(3, 4, 2.0, 5, 10, 1);
  bad_var.var(0, 0) = 0.0;
  CHECK_THROWS_AS(bad_var.validate(), ValidationError);
}

TEST_CASE("zero mismatch rate leaves every label faithful") {
  SymbolModel sm = SymbolModel::make(10, 8, 4.0, 5, 20, 7);
  Rng rng(derive_seed(7, "utt", 0));
  for (int rep = 0; rep < 50; ++rep) {
    Utterance u = gen_utterance(sm, rng, 0.0);
    u.id = "u";
    u.validate(10);
    REQUIRE(u.truth.has_value());
    CHECK(u.truth->pronounced == u.c);
    for (uint8_t m : u.truth->mismatch) CHECK(m == 0);
    CHECK(u.labels() >= 3);
    CHECK(u.labels() <= 7);
  }
}

TEST_CASE("generated utterances satisfy the structural invariants") {
  SymbolModel sm = SymbolModel::make(10, 8, 4.0, 5, 20, 11);
  Rng rng(derive_seed(11, "utt", 1));
  int mismatched = 0;
  for (int rep = 0; rep < 200; ++rep) {
    Utterance u = gen_utterance(sm, rng, 0.5);
    u.id = "u";
    u.validate(10);
    const auto& tr = *u.truth;
    const int L = u.labels();
    for (int l = 0; l < L; ++l) {
      int end = (l + 1 < L) ? tr.boundaries[l + 1] : u.frames();
      int dur = end - tr.boundaries[l];
      CHECK(dur >= 5);
      CHECK(dur <= 20);
      if (tr.mismatch[l]) {
        ++mismatched;
        CHECK(u.c[l] != tr.pronounced[l]);
      } else {
        CHECK(u.c[l] == tr.pronounced[l]);
      }
    }
  }
  CHECK(mismatched > 100);  // rate 0.5 over ~1000 labels
}

TEST_CASE("mismatched fraction tracks the configured rate") {
  GenConfig cfg = small_cfg(3000);
  Dataset ds = gen_dataset(cfg, 1234);
  REQUIRE(static_cast<int>(ds.train.size()) == 1800);
  REQUIRE(static_cast<int>(ds.valid.size()) == 600);
  REQUIRE(static_cast<int>(ds.test.size()) == 600);

  long total = 0, mismatched = 0;
  for (const auto* split : {&ds.train, &ds.valid, &ds.test}) {
    for (const Utterance& u : *split) {
      for (uint8_t m : u.truth->mismatch) {
        ++total;
        mismatched += m;
      }
    }
  }
  const double frac = static_cast<double>(mismatched) / total;
  CHECK(std::abs(frac - 0.201) <= 0.01);
}

TEST_CASE("digit counts are uniform over 3..7") {
  GenConfig cfg = small_cfg(10000);
  cfg.feat_dim = 2;  // count statistics do not depend on the feature dim
  Dataset ds = gen_dataset(cfg, 321);

  long counts[5] = {0, 0, 0, 0, 0};
  for (const auto* split : {&ds.train, &ds.valid, &ds.test}) {
    for (const Utterance& u : *split) {
      REQUIRE(u.labels() >= 3);
      REQUIRE(u.labels() <= 7);
      ++counts[u.labels() - 3];
    }
  }
  const double expected = 10000.0 / 5.0;
  double chi2 = 0.0;
  for (long c : counts) {
    const double d = c - expected;
    chi2 += d * d / expected;
  }
  // 1% critical value of chi-squared with 4 degrees of freedom.
  CHECK(chi2 < 13.2767);
}

TEST_CASE("empirical feature means converge to the symbol means") {
  const uint64_t seed = 4242;
  GenConfig cfg = small_cfg(200);
  Dataset ds = gen_dataset(cfg, seed);
  SymbolModel sm =
      SymbolModel::make(cfg.n_symbols, cfg.feat_dim, cfg.sep, cfg.d_min,
                        cfg.d_max, seed);

  Matrix sums = Matrix::Zero(cfg.n_symbols, cfg.feat_dim);
  Eigen::VectorXi n = Eigen::VectorXi::Zero(cfg.n_symbols);
  for (const auto* split : {&ds.train, &ds.valid, &ds.test}) {
    for (const Utterance& u : *split) {
      const auto& tr = *u.truth;
      const int L = u.labels();
      for (int l = 0; l < L; ++l) {
        int end = (l + 1 < L) ? tr.boundaries[l + 1] : u.frames();
        for (int t = tr.boundaries[l]; t < end; ++t) {
          sums.row(tr.pronounced[l]) += u.x.row(t);
          ++n[tr.pronounced[l]];
        }
      }
    }
  }
  for (int j = 0; j < cfg.n_symbols; ++j) {
    REQUIRE(n[j] > 100);
    Vector emp = (sums.row(j) / n[j]).transpose();
    const double err = (emp - sm.mean.row(j).transpose()).norm();
    CHECK(err <= 3.0 * std::sqrt(static_cast<double>(cfg.feat_dim) / n[j]));
  }
}

TEST_CASE("per-utterance rng streams make generation order irrelevant") {
  const uint64_t seed = 77;
  GenConfig cfg = small_cfg(20);
  Dataset ds = gen_dataset(cfg, seed);
  SymbolModel sm =
      SymbolModel::make(cfg.n_symbols, cfg.feat_dim, cfg.sep, cfg.d_min,
                        cfg.d_max, seed);

  // Utterance 7 standalone, skipping the first seven streams entirely.
  Rng rng(derive_seed(seed, "utt", 7));
  Utterance u = gen_utterance(sm, rng, cfg.mismatch_rate);
  u.id = "utt-000007";
  CHECK(same_utterance(u, ds.train[7]));
}

TEST_CASE("dataset writes are bit-identical across runs and round-trip") {
  GenConfig cfg = small_cfg(30);
  Dataset ds1 = gen_dataset(cfg, 2024);
  Dataset ds2 = gen_dataset(cfg, 2024);

  fs::path dir1 = fresh_dir("bitident_a");
  fs::path dir2 = fresh_dir("bitident_b");
  write_dataset(dir1, ds1, cfg, 2024);
  write_dataset(dir2, ds2, cfg, 2024);
  for (const char* split : {"train", "valid", "test"}) {
    CHECK(slurp(dir1 / split / "manifest.jsonl") ==
          slurp(dir2 / split / "manifest.jsonl"));
    CHECK(slurp(dir1 / split / "records.bin") ==
          slurp(dir2 / split / "records.bin"));
  }

  Dataset back = read_dataset(dir1);
  REQUIRE(back.train.size() == ds1.train.size());
  REQUIRE(back.valid.size() == ds1.valid.size());
  REQUIRE(back.test.size() == ds1.test.size());
  for (size_t i = 0; i < ds1.train.size(); ++i)
    CHECK(same_utterance(back.train[i], ds1.train[i]));
  for (size_t i = 0; i < ds1.valid.size(); ++i)
    CHECK(same_utterance(back.valid[i], ds1.valid[i]));
  for (size_t i = 0; i < ds1.test.size(); ++i)
    CHECK(same_utterance(back.test[i], ds1.test[i]));

  // Writing what was read reproduces the original files byte for byte.
  fs::path dir3 = fresh_dir("bitident_c");
  write_dataset(dir3, back, cfg, 2024);
  for (const char* split : {"train", "valid", "test"}) {
    CHECK(slurp(dir1 / split / "records.bin") ==
          slurp(dir3 / split / "records.bin"));
  }
}

TEST_CASE("manifest reports the split metadata") {
  GenConfig cfg = small_cfg(10);
  Dataset ds = gen_dataset(cfg, 5);
  fs::path dir = fresh_dir("manifest_meta");
  write_split(dir, "train", ds.train, cfg.feat_dim, cfg.mismatch_rate, 5);

  DatasetManifest m = read_manifest(dir);
  CHECK(m.split == "train");
  CHECK(m.count == static_cast<int>(ds.train.size()));
  CHECK(m.feat_dim == 8);
  CHECK(m.mismatch_rate == doctest::Approx(0.201).epsilon(1e-12));
  CHECK(m.seed == 5);
  REQUIRE(m.entries.size() == ds.train.size());
  CHECK(m.entries[0].offset == 0);
  for (size_t i = 1; i < m.entries.size(); ++i)
    CHECK(m.entries[i].offset > m.entries[i - 1].offset);
}

TEST_CASE("truncated records fail with a byte offset, not a crash") {
  GenConfig cfg = small_cfg(8);
  Dataset ds = gen_dataset(cfg, 9);
  fs::path dir = fresh_dir("truncate");
  write_split(dir, "test", ds.test, cfg.feat_dim, cfg.mismatch_rate, 9);

  std::string bytes = slurp(dir / "records.bin");
  spit(dir / "records.bin", bytes.substr(0, bytes.size() - 5));
  try {
    read_split(dir);
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
}

TEST_CASE("manifest count mismatch is a validation error") {
  GenConfig cfg = small_cfg(8);
  Dataset ds = gen_dataset(cfg, 9);
  fs::path dir = fresh_dir("count_mismatch");
  write_split(dir, "valid", ds.valid, cfg.feat_dim, cfg.mismatch_rate, 9);

  std::string manifest = slurp(dir / "manifest.jsonl");
  auto pos = manifest.find("\"count\":");
  REQUIRE(pos != std::string::npos);
  pos += 8;
  auto end = manifest.find_first_not_of("0123456789", pos);
  manifest.replace(pos, end - pos, "999");
  spit(dir / "manifest.jsonl", manifest);
  CHECK_THROWS_AS(read_split(dir), ValidationError);
}

TEST_CASE("malformed manifest lines name the line number") {
  GenConfig cfg = small_cfg(8);
  Dataset ds = gen_dataset(cfg, 9);
  fs::path dir = fresh_dir("bad_json");
  write_split(dir, "valid", ds.valid, cfg.feat_dim, cfg.mismatch_rate, 9);

  std::string manifest = slurp(dir / "manifest.jsonl");
  manifest += "{not json\n";
  spit(dir / "manifest.jsonl", manifest);
  try {
    read_manifest(dir);
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line") != std::string::npos);
  }
}

TEST_CASE("missing files and bad writes surface the path") {
  CHECK_THROWS_AS(read_split(fs::temp_directory_path() / "mlvae_nonexistent"),
                  DataError);

  Utterance no_truth;
  no_truth.id = "u0";
  no_truth.x = Matrix::Zero(4, 2);
  no_truth.c = {0};
  fs::path dir = fresh_dir("no_truth");
  CHECK_THROWS_AS(write_split(dir, "train", {no_truth}, 2, 0.0, 1),
                  ValidationError);
}

TEST_CASE("config validation rejects out-of-range settings") {
  GenConfig cfg;
  cfg.n_utterances = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = GenConfig{};
  cfg.mismatch_rate = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = GenConfig{};
  cfg.d_min = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = GenConfig{};
  cfg.min_labels = 5;
  cfg.max_labels = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  GenConfig{}.validate();  // defaults are fine
}
