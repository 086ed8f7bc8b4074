#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <fstream>
#include <string>
#include <vector>

#include "mlvae/synthdata.hpp"
#include "mlvae/training.hpp"

using namespace mlvae;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mlvae_training_" + name);
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

Dataset tiny_corpus(int n, uint64_t seed, double rate = 0.201) {
  GenConfig g;
  g.n_utterances = n;
  g.feat_dim = 6;
  g.mismatch_rate = rate;
  return gen_dataset(g, seed);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 6;
  c.batch_size = 8;
  c.warmup_epochs = 2;
  c.realign_every = 2;
  c.patience = 10;
  c.seed = 7;
  c.net.context = 2;
  c.net.hidden = {16};
  c.net.latent_dim = 4;
  c.net.n_variants = 2;
  return c;
}

std::vector<std::string> run_epochs(Trainer& tr, int n) {
  std::vector<std::string> lines;
  for (int i = 0; i < n; ++i) lines.push_back(tr.step_epoch().to_json().dump());
  return lines;
}

std::vector<double> param_copy(Trainer& tr) {
  std::vector<double> out;
  for (const TensorRef& p : tr.model_tensors())
    out.insert(out.end(), p.value, p.value + p.size);
  return out;
}

}  // namespace

TEST_CASE("variant and ablation names round-trip") {
  CHECK(variant_from("ml-vae") == Variant::MlVae);
  CHECK(variant_from("ml-vae-rl") == Variant::MlVaeRl);
  CHECK(to_string(Variant::MlVaeRl) == "ml-vae-rl");
  CHECK_THROWS_AS(variant_from("mlvae"), ConfigError);

  CHECK(ablation_from("") == Ablation::None);
  CHECK(ablation_from("none") == Ablation::None);
  CHECK(ablation_from("bhat-align") == Ablation::BhatAlign);
  CHECK(ablation_from("joint") == Ablation::Joint);
  CHECK(ablation_from("separate-e") == Ablation::SeparateE);
  CHECK(to_string(Ablation::SeparateE) == "separate-e");
  CHECK_THROWS_AS(ablation_from("bhat"), ConfigError);
}

TEST_CASE("config json round-trips and rejects unknown keys") {
  TrainConfig c = tiny_config();
  c.variant = Variant::MlVaeRl;
  c.ablation = Ablation::SeparateE;
  c.lr = 0.00325;
  c.rl.n_mc = 7;
  c.rl.baseline_hidden = {9, 5};
  c.weights.lambda_l = 0.125;
  c.seed = 0xdeadbeefcafe1234ull;

  TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.variant == c.variant);
  CHECK(back.ablation == c.ablation);
  CHECK(back.epochs == c.epochs);
  CHECK(back.batch_size == c.batch_size);
  CHECK(back.lr == c.lr);
  CHECK(back.grad_clip == c.grad_clip);
  CHECK(back.warmup_epochs == c.warmup_epochs);
  CHECK(back.realign_every == c.realign_every);
  CHECK(back.patience == c.patience);
  CHECK(back.seed == c.seed);
  CHECK(back.gamma_pi == c.gamma_pi);
  CHECK(back.weights.lambda_l == c.weights.lambda_l);
  CHECK(back.rl.n_mc == c.rl.n_mc);
  CHECK(back.rl.baseline_hidden == c.rl.baseline_hidden);
  CHECK(back.net.hidden == c.net.hidden);
  CHECK(back.to_json() == c.to_json());

  SUBCASE("unknown top-level key is named") {
    json j = c.to_json();
    j["learning_rate"] = 0.1;
    try {
      TrainConfig::from_json(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
    }
  }

  SUBCASE("unknown nested key carries its path") {
    json j = c.to_json();
    j["weights"]["lambda_x"] = 1.0;
    try {
      TrainConfig::from_json(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("weights.lambda_x") !=
            std::string::npos);
    }
  }

  SUBCASE("wrong value type is a config error") {
    json j = c.to_json();
    j["epochs"] = "many";
    CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
  }

  SUBCASE("out-of-range values fail validation") {
    json j = c.to_json();
    j["gamma_pi"] = 1.5;
    CHECK_THROWS_AS(TrainConfig::from_json(j), ValidationError);
  }
}

TEST_CASE("inventory estimation applies add-one smoothing") {
  Utterance a;
  a.id = "a";
  a.x = Matrix::Zero(6, 2);
  a.c = {0, 0, 1};
  Utterance b;
  b.id = "b";
  b.x = Matrix::Zero(4, 2);
  b.c = {1, 1};
  std::vector<Utterance> utts{a, b};

  PhonemeInventory inv = estimate_inventory(utts, 4);
  REQUIRE(inv.size() == 4);
  CHECK(inv.symbols[3] == "3");
  // counts 2,3,0,0 plus one each over 5 + 4 observations
  CHECK(inv.prior[0] == doctest::Approx(3.0 / 9.0).epsilon(1e-12));
  CHECK(inv.prior[1] == doctest::Approx(4.0 / 9.0).epsilon(1e-12));
  CHECK(inv.prior[2] == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
  CHECK(inv.zeta == inv.prior);
  CHECK_THROWS_AS(estimate_inventory(utts, 1), ValidationError);
}

TEST_CASE("prior estimation centers the boundary rate") {
  Utterance a;
  a.id = "a";
  a.x = Matrix::Zero(30, 2);
  a.c = {0, 1, 2};
  Utterance b;
  b.id = "b";
  b.x = Matrix::Zero(20, 2);
  b.c = {1, 0};
  std::vector<Utterance> utts{a, b};

  Priors p = estimate_priors(utts, 0.15);
  const double rate = 5.0 / 50.0;
  CHECK(p.alpha == doctest::Approx(20.0 * rate).epsilon(1e-12));
  CHECK(p.beta == doctest::Approx(20.0 * (1.0 - rate)).epsilon(1e-12));
  CHECK(p.gamma_pi == 0.15);
  CHECK(p.alpha / (p.alpha + p.beta) == doctest::Approx(rate).epsilon(1e-12));
}

TEST_CASE("identical seeds give identical epoch logs") {
  Dataset ds = tiny_corpus(50, 21);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 4;

  Trainer a = Trainer::make(cfg, ds.train, ds.valid);
  Trainer b = Trainer::make(cfg, ds.train, ds.valid);
  CHECK(run_epochs(a, 4) == run_epochs(b, 4));
}

TEST_CASE("warmup phoneme loss is non-increasing") {
  Dataset ds = tiny_corpus(50, 33);
  TrainConfig cfg = tiny_config();
  cfg.warmup_epochs = 6;
  cfg.epochs = 6;

  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
  std::vector<double> lp;
  for (int i = 0; i < 6; ++i) {
    EpochLog lg = tr.step_epoch();
    REQUIRE(lg.phase == "warmup");
    REQUIRE(lg.loss_p.has_value());
    lp.push_back(*lg.loss_p);
  }
  for (size_t i = 1; i < lp.size(); ++i) CHECK(lp[i] <= lp[i - 1] + 1e-6);
}

TEST_CASE("decoding leaves parameters untouched and training leaves the alignment untouched") {
  Dataset ds = tiny_corpus(30, 5);
  TrainConfig cfg = tiny_config();
  cfg.realign_every = 100;  // only the first main epoch refreshes
  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);

  std::vector<double> before = param_copy(tr);
  for (int i = 0; i < 3; ++i) {
    const Utterance& utt = tr.train[i];
    Matrix xwin = tr.model.embed(utt.x);
    (void)argmax_rows(phoneme_posterior(tr.model.fp, xwin));
    (void)best_path(frame_scores(tr.model, utt));
    (void)localize_with(tr.model, utt, Ablation::None);
  }
  CHECK(param_copy(tr) == before);

  // epochs 1-2 warm up, epoch 3 realigns once, epoch 4 must not move bbar
  for (int i = 0; i < 3; ++i) (void)tr.step_epoch();
  std::vector<BoundarySeq> bb = tr.bbar;
  EpochLog lg = tr.step_epoch();
  CHECK_FALSE(lg.realigned);
  REQUIRE(tr.bbar.size() == bb.size());
  for (size_t i = 0; i < bb.size(); ++i) CHECK(tr.bbar[i].b == bb[i].b);
}

TEST_CASE("checkpoint save-load-save is byte-identical") {
  Dataset ds = tiny_corpus(30, 11);
  TrainConfig cfg = tiny_config();
  cfg.variant = Variant::MlVaeRl;  // exercises baseline state too
  cfg.epochs = 4;
  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
  (void)run_epochs(tr, 4);

  fs::path dir = fresh_dir("roundtrip");
  tr.save(dir / "a.ckpt");
  Trainer back = Trainer::load(dir / "a.ckpt", ds.train, ds.valid);
  back.save(dir / "b.ckpt");
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

  CHECK(back.epoch == tr.epoch);
  CHECK(back.best_f1 == tr.best_f1);
  CHECK(back.best_epoch == tr.best_epoch);
  CHECK(back.stall == tr.stall);
  CHECK(param_copy(back) == param_copy(tr));

  SUBCASE("bundle loader reproduces the trained model") {
    ModelBundle mb = load_model(dir / "a.ckpt");
    CorpusScore want = evaluate_localization(tr.model, ds.valid, cfg.ablation);
    CorpusScore got = evaluate_localization(mb.model, ds.valid, mb.cfg.ablation);
    CHECK(got.metrics.f1_ml == want.metrics.f1_ml);
    CHECK(got.counts.tp == want.counts.tp);
  }
}

TEST_CASE("corrupted checkpoints fail with named errors") {
  Dataset ds = tiny_corpus(20, 13);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;
  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
  fs::path dir = fresh_dir("corrupt");
  tr.save(dir / "good.ckpt");
  std::string bytes = slurp(dir / "good.ckpt");

  SUBCASE("bad magic names the expected bytes") {
    std::string bad = bytes;
    bad[0] = 'X';
    spit(dir / "bad.ckpt", bad);
    try {
      (void)load_model(dir / "bad.ckpt");
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("MLVAECP1") != std::string::npos);
    }
  }

  SUBCASE("unsupported version is rejected") {
    // rebuild the file with a bumped version and the original payload
    size_t hlen = 0;
    for (int i = 0; i < 4; ++i)
      hlen |= static_cast<size_t>(static_cast<uint8_t>(bytes[8 + i]))
              << (8 * i);
    json full = json::parse(bytes.substr(12, hlen));
    full["version"] = 2;
    std::string hdr = full.dump();
    std::string out = bytes.substr(0, 8);
    for (int i = 0; i < 4; ++i)
      out.push_back(static_cast<char>((hdr.size() >> (8 * i)) & 0xff));
    out += hdr;
    out += bytes.substr(12 + hlen);
    spit(dir / "v2.ckpt", out);
    try {
      (void)load_model(dir / "v2.ckpt");
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("version 2") != std::string::npos);
    }
  }

  SUBCASE("truncated payload is detected") {
    spit(dir / "trunc.ckpt", bytes.substr(0, bytes.size() - 17));
    CHECK_THROWS_AS((void)Trainer::load(dir / "trunc.ckpt", ds.train, ds.valid),
                    CheckpointError);
  }

  SUBCASE("dataset size mismatch is detected") {
    std::vector<Utterance> fewer(ds.train.begin(), ds.train.end() - 1);
    CHECK_THROWS_AS((void)Trainer::load(dir / "good.ckpt", fewer, ds.valid),
                    CheckpointError);
  }
}

TEST_CASE("resume reproduces the uninterrupted run") {
  Dataset ds = tiny_corpus(40, 17);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 6;

  Trainer full = Trainer::make(cfg, ds.train, ds.valid);
  std::vector<std::string> all = run_epochs(full, 6);

  fs::path dir = fresh_dir("resume");
  Trainer first = Trainer::make(cfg, ds.train, ds.valid);
  (void)run_epochs(first, 3);
  first.save(dir / "mid.ckpt");
  Trainer second = Trainer::load(dir / "mid.ckpt", ds.train, ds.valid);
  std::vector<std::string> tail = run_epochs(second, 3);

  REQUIRE(tail.size() == 3);
  CHECK(tail[0] == all[3]);
  CHECK(tail[1] == all[4]);
  CHECK(tail[2] == all[5]);

  full.save(dir / "full.ckpt");
  second.save(dir / "resumed.ckpt");
  CHECK(slurp(dir / "full.ckpt") == slurp(dir / "resumed.ckpt"));
}

TEST_CASE("score-function estimator is unbiased under a constant reward") {
  Dataset ds = tiny_corpus(20, 3);
  TrainConfig cfg = tiny_config();
  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
  (void)run_epochs(tr, 3);  // past warmup so the posterior is shaped

  const Utterance& utt = tr.train[0];
  Matrix xwin = tr.model.embed(utt.x);
  std::vector<int> yhat = argmax_rows(phoneme_posterior(tr.model.fp, xwin));
  Vector q1 =
      correctness_posterior(tr.model.fh, xwin, yhat, tr.model.priors.gamma_pi);
  const int t_n = utt.frames();

  // With a constant calibrated reward the per-frame score coefficient is
  // pi_t - q_t, whose mean over samples must vanish.
  const int n = 10000;
  Rng rng(derive_seed(99, "unbiased"));
  Vector sum = Vector::Zero(t_n);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < t_n; ++t)
      sum[t] += (rng.bernoulli(q1[t]) ? 1.0 : 0.0) - q1[t];
  for (int t = 0; t < t_n; ++t) {
    const double se = std::sqrt(q1[t] * (1.0 - q1[t]) / n);
    CHECK(std::abs(sum[t] / n) <= 3.0 * se + 1e-12);
  }
}

TEST_CASE("baseline reduces reward variance") {
  Dataset ds = tiny_corpus(40, 29);
  TrainConfig cfg = tiny_config();
  cfg.variant = Variant::MlVaeRl;
  cfg.epochs = 6;
  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
  (void)run_epochs(tr, 6);

  std::vector<RewardSample> samples = reward_samples(tr, ds.valid, 1);
  REQUIRE(samples.size() == ds.valid.size() * 4);
  double sr = 0, sr2 = 0, sh = 0, sh2 = 0;
  for (const RewardSample& s : samples) {
    sr += s.reward;
    sr2 += s.reward * s.reward;
    sh += s.calibrated;
    sh2 += s.calibrated * s.calibrated;
  }
  const double n = static_cast<double>(samples.size());
  const double var_r = sr2 / n - (sr / n) * (sr / n);
  const double var_h = sh2 / n - (sh / n) * (sh / n);
  CHECK(var_h <= var_r);
}

TEST_CASE("non-finite rewards skip the batch instead of diverging") {
  Dataset ds = tiny_corpus(24, 41);
  TrainConfig cfg = tiny_config();
  cfg.variant = Variant::MlVaeRl;
  cfg.warmup_epochs = 1;
  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
  (void)tr.step_epoch();  // warmup
  (void)tr.step_epoch();  // first main epoch seeds the mixture from alignments

  // An infinite decoder bias sends every reconstruction reward non-finite
  // while leaving the posteriors and the boundary/phoneme losses intact.
  tr.model.fh.decoder.layers.back().b.setConstant(
      std::numeric_limits<double>::infinity());
  std::vector<double> fh_before;
  for (const TensorRef& p : tr.model.tensors_fh())
    fh_before.insert(fh_before.end(), p.value, p.value + p.size);

  EpochLog lg = tr.step_epoch();
  const int n_batches =
      (static_cast<int>(ds.train.size()) + cfg.batch_size - 1) /
      cfg.batch_size;
  CHECK(lg.skipped == n_batches);
  CHECK(tr.skipped_batches == n_batches);
  CHECK_FALSE(lg.loss_h.has_value());

  std::vector<double> fh_after;
  for (const TensorRef& p : tr.model.tensors_fh())
    fh_after.insert(fh_after.end(), p.value, p.value + p.size);
  CHECK(fh_after == fh_before);
}

TEST_CASE("non-finite losses abort with a diagnostic checkpoint") {
  Dataset ds = tiny_corpus(24, 43);
  TrainConfig cfg = tiny_config();
  cfg.warmup_epochs = 1;
  cfg.epochs = 4;
  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
  (void)tr.step_epoch();
  tr.model.fh.decoder.layers.back().b.setConstant(
      std::numeric_limits<double>::infinity());

  fs::path dir = fresh_dir("diverge");
  CHECK_THROWS_AS(tr.run(dir), DivergenceError);
  CHECK(fs::exists(dir / "diverged.ckpt"));
}

TEST_CASE("ablations train and log their own shapes") {
  Dataset ds = tiny_corpus(30, 55);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 4;

  SUBCASE("decoded-boundary targets never refresh the alignment") {
    cfg.ablation = Ablation::BhatAlign;
    Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
    for (int i = 0; i < 4; ++i) {
      EpochLog lg = tr.step_epoch();
      CHECK_FALSE(lg.realigned);
      if (lg.phase == "main") CHECK(lg.loss_h.has_value());
    }
  }

  SUBCASE("joint optimization logs only the joint objective") {
    cfg.ablation = Ablation::Joint;
    Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
    for (int i = 0; i < 2; ++i) (void)tr.step_epoch();  // warmup
    EpochLog lg = tr.step_epoch();
    CHECK(lg.phase == "main");
    CHECK_FALSE(lg.realigned);
    CHECK_FALSE(lg.loss_b.has_value());
    CHECK_FALSE(lg.loss_p.has_value());
    REQUIRE(lg.loss_h.has_value());
    CHECK(std::isfinite(*lg.loss_h));
  }

  SUBCASE("two-stage estimation decodes every epoch") {
    cfg.ablation = Ablation::SeparateE;
    Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
    std::vector<std::string> lines = run_epochs(tr, 4);
    CHECK(lines.size() == 4);
    json last = json::parse(lines.back());
    CHECK(last.at("phase") == "main");
    CHECK(std::isfinite(last.at("val_f1").get<double>()));
  }
}

TEST_CASE("run writes the log and restores the best parameters") {
  Dataset ds = tiny_corpus(30, 61);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 5;
  fs::path dir = fresh_dir("run");

  Trainer tr = Trainer::make(cfg, ds.train, ds.valid);
  tr.run(dir);

  REQUIRE(fs::exists(dir / "train_log.jsonl"));
  REQUIRE(fs::exists(dir / "last.ckpt"));
  REQUIRE(fs::exists(dir / "best.ckpt"));

  std::ifstream log(dir / "train_log.jsonl");
  std::string line;
  std::vector<json> lines;
  while (std::getline(log, line)) lines.push_back(json::parse(line));
  REQUIRE(lines.size() == 5);
  CHECK(lines[0].at("phase") == "warmup");
  CHECK(lines.back().at("epoch") == 5);

  // the best checkpoint scores exactly the best logged validation F1
  ModelBundle mb = load_model(dir / "best.ckpt");
  CorpusScore cs = evaluate_localization(mb.model, ds.valid, mb.cfg.ablation);
  CHECK(cs.metrics.f1_ml ==
        lines.back().at("best_f1").get<double>());
}
