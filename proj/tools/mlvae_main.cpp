// Command-line front end: dataset generation, training, decoding, baselines,
// and evaluation. Every command is deterministic given its seed and config.
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mlvae/synthdata.hpp"
#include "mlvae/training.hpp"

using namespace mlvae;
using nlohmann::json;

namespace {

bool quiet() {
  const char* v = std::getenv("MLVAE_LOG");
  return v != nullptr && std::string(v) == "quiet";
}

const std::vector<Utterance>& pick_split(const Dataset& ds,
                                         const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "valid") return ds.valid;
  if (split == "test") return ds.test;
  throw ConfigError("unknown split \"" + split +
                    "\"; expected train, valid, or test");
}

json result_to_json(const std::string& id, const LocalizationResult& r) {
  json segs = json::array();
  for (const SegmentLabel& s : r.segments)
    segs.push_back({{"phoneme", s.phoneme},
                    {"mismatch", s.mismatch},
                    {"start", s.start},
                    {"end", s.end}});
  return json{{"id", id}, {"log_score", r.log_score}, {"segments", segs}};
}

LocalizationResult result_from_json(const json& j) {
  LocalizationResult r;
  r.log_score = j.at("log_score").get<double>();
  for (const json& s : j.at("segments")) {
    SegmentLabel seg;
    seg.phoneme = s.at("phoneme").get<int>();
    seg.mismatch = s.at("mismatch").get<bool>();
    seg.start = s.at("start").get<int>();
    seg.end = s.at("end").get<int>();
    r.segments.push_back(seg);
  }
  return r;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  return f;
}

int cmd_gen_data(const std::string& out, int num_utts, double mismatch_rate,
                 uint64_t seed, int dim, double sep, int dur_min,
                 int dur_max) {
  GenConfig g;
  g.n_utterances = num_utts;
  g.mismatch_rate = mismatch_rate;
  g.feat_dim = dim;
  g.sep = sep;
  g.d_min = dur_min;
  g.d_max = dur_max;
  g.validate();

  Dataset ds = gen_dataset(g, seed);
  write_dataset(out, ds, g, seed);

  long labels = 0, mismatched = 0;
  for (const std::vector<Utterance>* split : {&ds.train, &ds.valid, &ds.test})
    for (const Utterance& u : *split) {
      labels += u.labels();
      for (bool m : u.truth->mismatch) mismatched += m ? 1 : 0;
    }
  json manifest{{"out", out},
                {"seed", seed},
                {"train", ds.train.size()},
                {"valid", ds.valid.size()},
                {"test", ds.test.size()},
                {"labels", labels},
                {"mismatch_fraction",
                 labels > 0 ? static_cast<double>(mismatched) / labels : 0.0}};
  std::cout << manifest.dump() << "\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& config,
              const std::string& out, const std::string& variant,
              const std::string& ablation, uint64_t seed, bool seed_set,
              const std::string& resume) {
  Dataset ds = read_dataset(data);

  Trainer tr = [&] {
    if (!resume.empty()) {
      if (!config.empty() || !variant.empty() || !ablation.empty() ||
          seed_set)
        throw ConfigError(
            "--resume restores the checkpoint's config; drop --config, "
            "--variant, --ablation, and --seed");
      return Trainer::load(resume, ds.train, ds.valid);
    }
    TrainConfig cfg;
    if (!config.empty()) {
      std::ifstream f(config);
      if (!f) throw DataError("cannot read " + config);
      json j = json::parse(f, nullptr, true, false);
      if (j.is_discarded())
        throw ConfigError("config file " + config + " is not valid JSON");
      cfg = TrainConfig::from_json(j);
    }
    if (!variant.empty()) cfg.variant = variant_from(variant);
    if (!ablation.empty()) cfg.ablation = ablation_from(ablation);
    if (seed_set) cfg.seed = seed;
    return Trainer::make(cfg, ds.train, ds.valid);
  }();

  tr.run(out, [](const EpochLog& lg) {
    if (!quiet()) std::cerr << lg.to_json().dump() << "\n";
  });

  json summary{{"out", out},
               {"epochs", tr.epoch},
               {"best_f1", tr.best_f1},
               {"best_epoch", tr.best_epoch},
               {"skipped_batches", tr.skipped_batches}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_localize(const std::string& model, const std::string& data,
                 const std::string& out, const std::string& split) {
  ModelBundle mb = load_model(model);
  Dataset ds = read_dataset(data);
  std::ofstream f = open_out(out);
  for (const Utterance& u : pick_split(ds, split))
    f << result_to_json(u.id, localize_with(mb.model, u, mb.cfg.ablation))
             .dump()
      << "\n";
  if (!quiet()) std::cerr << "wrote " << out << "\n";
  return 0;
}

int cmd_align(const std::string& model, const std::string& data,
              const std::string& out, const std::string& split) {
  ModelBundle mb = load_model(model);
  Dataset ds = read_dataset(data);
  std::ofstream f = open_out(out);

  std::vector<UtteranceScore> scores;
  bool all_truth = true;
  for (const Utterance& u : pick_split(ds, split)) {
    LocalizationResult r = fa_localize(mb.model, u);
    std::vector<Segment> segs;
    for (const SegmentLabel& s : r.segments) segs.push_back({s.start, s.end});
    json b = json::array();
    for (uint8_t v : segments_to_boundaries(segs).b)
      b.push_back(static_cast<int>(v));
    f << json{{"id", u.id}, {"b", b}}.dump() << "\n";
    if (u.truth)
      scores.push_back(score_utterance(r, u));
    else
      all_truth = false;
  }
  if (all_truth && !scores.empty()) {
    CorpusScore cs = aggregate(scores);
    json summary{{"utterances", cs.utterances},
                 {"alignment_avg_iou", cs.alignment_avg_iou},
                 {"boundary_accuracy", cs.boundary_accuracy}};
    std::cout << summary.dump() << "\n";
  }
  if (!quiet()) std::cerr << "wrote " << out << "\n";
  return 0;
}

int cmd_baseline(const std::string& which, const std::string& model,
                 const std::string& data, const std::string& out,
                 const std::string& split) {
  if (which != "fa" && which != "two-pass")
    throw ConfigError("unknown baseline \"" + which +
                      "\"; expected fa or two-pass");
  ModelBundle mb = load_model(model);
  Dataset ds = read_dataset(data);
  std::ofstream f = open_out(out);
  for (const Utterance& u : pick_split(ds, split)) {
    LocalizationResult r = which == "fa" ? fa_localize(mb.model, u)
                                         : two_pass_localize(mb.model, u);
    f << result_to_json(u.id, r).dump() << "\n";
  }
  if (!quiet()) std::cerr << "wrote " << out << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred, const std::string& data,
                 const std::string& out, const std::string& split) {
  std::ifstream pf(pred);
  if (!pf) throw DataError("cannot read " + pred);
  std::map<std::string, LocalizationResult> by_id;
  std::string line;
  while (std::getline(pf, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, true, false);
    if (j.is_discarded())
      throw DataError("prediction file " + pred + " has a malformed line");
    by_id[j.at("id").get<std::string>()] = result_from_json(j);
  }

  Dataset ds = read_dataset(data);
  std::vector<UtteranceScore> scores;
  for (const Utterance& u : pick_split(ds, split)) {
    auto it = by_id.find(u.id);
    if (it == by_id.end())
      throw DataError("no prediction for utterance " + u.id);
    if (!u.truth)
      throw DataError("utterance " + u.id + " has no ground truth to score");
    it->second.validate(u.frames());
    scores.push_back(score_utterance(it->second, u));
  }

  std::string report = report_json(scores);
  std::ofstream f = open_out(out);
  f << report << "\n";
  std::cout << report << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mismatch localization on synthetic speech"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_out;
  int gd_num = 3000;
  double gd_rate = 0.201;
  uint64_t gd_seed = 0;
  int gd_dim = 8, gd_dur_min = 5, gd_dur_max = 20;
  double gd_sep = 4.0;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  gen->add_option("--out", gd_out, "output directory")->required();
  gen->add_option("--num-utts", gd_num, "total utterances across splits");
  gen->add_option("--mismatch-rate", gd_rate, "per-label mismatch probability");
  gen->add_option("--seed", gd_seed, "generator seed");
  gen->add_option("--dim", gd_dim, "feature dimension");
  gen->add_option("--sep", gd_sep, "pairwise symbol-mean separation in sigma");
  gen->add_option("--dur-min", gd_dur_min, "minimum segment duration");
  gen->add_option("--dur-max", gd_dur_max, "maximum segment duration");

  // train
  std::string tr_data, tr_config, tr_out, tr_variant, tr_ablation, tr_resume;
  uint64_t tr_seed = 0;
  CLI::App* train = app.add_subcommand("train", "train a localization model");
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--config", tr_config, "JSON training config");
  train->add_option("--out", tr_out, "output directory")->required();
  train->add_option("--variant", tr_variant, "ml-vae or ml-vae-rl");
  train->add_option("--ablation", tr_ablation,
                    "bhat-align, joint, or separate-e");
  train->add_option("--seed", tr_seed, "training seed");
  train->add_option("--resume", tr_resume, "checkpoint to continue from");

  // localize / align / baseline / evaluate
  std::string lo_model, lo_data, lo_out, lo_split = "test";
  CLI::App* loc = app.add_subcommand("localize", "decode mismatch locations");
  loc->add_option("--model", lo_model, "checkpoint")->required();
  loc->add_option("--data", lo_data, "dataset directory")->required();
  loc->add_option("--out", lo_out, "output file")->required();
  loc->add_option("--split", lo_split, "train, valid, or test");

  std::string al_model, al_data, al_out, al_split = "test";
  CLI::App* align = app.add_subcommand("align", "forced-align boundaries");
  align->add_option("--model", al_model, "checkpoint")->required();
  align->add_option("--data", al_data, "dataset directory")->required();
  align->add_option("--out", al_out, "output file")->required();
  align->add_option("--split", al_split, "train, valid, or test");

  std::string ba_which, ba_model, ba_data, ba_out, ba_split = "test";
  CLI::App* base = app.add_subcommand("baseline", "run a reference decoder");
  base->add_option("--which", ba_which, "fa or two-pass")->required();
  base->add_option("--model", ba_model, "checkpoint")->required();
  base->add_option("--data", ba_data, "dataset directory")->required();
  base->add_option("--out", ba_out, "output file")->required();
  base->add_option("--split", ba_split, "train, valid, or test");

  std::string ev_pred, ev_data, ev_out, ev_split = "test";
  CLI::App* ev = app.add_subcommand("evaluate", "score predictions");
  ev->add_option("--pred", ev_pred, "prediction file")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--out", ev_out, "report file")->required();
  ev->add_option("--split", ev_split, "train, valid, or test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gd_out, gd_num, gd_rate, gd_seed, gd_dim, gd_sep,
                          gd_dur_min, gd_dur_max);
    if (train->parsed())
      return cmd_train(tr_data, tr_config, tr_out, tr_variant, tr_ablation,
                       tr_seed, train->count("--seed") > 0, tr_resume);
    if (loc->parsed()) return cmd_localize(lo_model, lo_data, lo_out, lo_split);
    if (align->parsed()) return cmd_align(al_model, al_data, al_out, al_split);
    if (base->parsed())
      return cmd_baseline(ba_which, ba_model, ba_data, ba_out, ba_split);
    if (ev->parsed()) return cmd_evaluate(ev_pred, ev_data, ev_out, ev_split);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
