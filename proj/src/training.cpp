#include "mlvae/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace mlvae {

using nlohmann::json;

namespace {

constexpr double kPriorStrength = 20.0;

void require_keys(const json& j, std::initializer_list<const char*> known,
                  const std::string& prefix) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (item.key() == k) ok = true;
    if (!ok)
      throw ConfigError("unknown config key \"" + prefix + item.key() + "\"");
  }
}

std::vector<int> epoch_order(int n, uint64_t seed, int e) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "shuffle", static_cast<uint64_t>(e)));
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.bounded(static_cast<uint64_t>(i) + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

std::vector<TensorRef> all_model_tensors(Model& m) {
  std::vector<TensorRef> out = m.tensors_fb();
  auto fp = m.tensors_fp();
  out.insert(out.end(), fp.begin(), fp.end());
  auto fh = m.tensors_fh();
  out.insert(out.end(), fh.begin(), fh.end());
  return out;
}

std::vector<int> baseline_dims(int feat_dim, const TrainConfig& cfg) {
  std::vector<int> dims{feat_dim * (2 * cfg.net.context + 1)};
  dims.insert(dims.end(), cfg.rl.baseline_hidden.begin(),
              cfg.rl.baseline_hidden.end());
  dims.push_back(1);
  return dims;
}

void quantize_adam(Adam& o) {
  for (auto& x : o.m) quantize_f32(x);
  for (auto& x : o.v) quantize_f32(x);
}

// Parameters and moments stay exactly representable in 32-bit floats between
// epochs so serialization loses nothing.
void quantize_state(Trainer& tr) {
  auto mt = tr.model_tensors();
  quantize_f32(mt);
  auto bt = tr.baseline.tensors("base");
  quantize_f32(bt);
  quantize_adam(tr.opt_fb);
  quantize_adam(tr.opt_fp);
  quantize_adam(tr.opt_fh);
  quantize_adam(tr.opt_base);
}

std::vector<double> snapshot_params(Trainer& tr) {
  std::vector<double> out;
  for (const TensorRef& p : tr.model_tensors())
    out.insert(out.end(), p.value, p.value + p.size);
  return out;
}

struct EpochAcc {
  double lb = 0, lp = 0, lh = 0;
  long utts = 0;
  double sum_r = 0, sum_r2 = 0, sum_rh = 0, sum_rh2 = 0;
  long samples = 0;
  double mse = 0, ent = 0;
  long rl_utts = 0;
  int skipped = 0;
};

void merge(EpochAcc& a, const EpochAcc& b) {
  a.lb += b.lb;
  a.lp += b.lp;
  a.lh += b.lh;
  a.utts += b.utts;
  a.sum_r += b.sum_r;
  a.sum_r2 += b.sum_r2;
  a.sum_rh += b.sum_rh;
  a.sum_rh2 += b.sum_rh2;
  a.samples += b.samples;
  a.mse += b.mse;
  a.ent += b.ent;
  a.rl_utts += b.rl_utts;
}

struct HardAssign {
  std::vector<int> yhat;
  BestPath bp;
};

HardAssign estep(Trainer& tr, const Utterance& utt, const Matrix& xwin) {
  HardAssign ha;
  ha.yhat = argmax_rows(phoneme_posterior(tr.model.fp, xwin));
  FrameScores s = frame_scores(tr.model, utt);
  ha.bp = tr.cfg.ablation == Ablation::SeparateE
              ? separate_estimate(s, tr.model.priors.gamma_pi)
              : best_path(s);
  return ha;
}

void refresh_alignment(Trainer& tr) {
  for (size_t i = 0; i < tr.train.size(); ++i)
    tr.bbar[i] = forced_align(frame_scores(tr.model, tr.train[i]));
}

void warmup_step(Trainer& tr, const std::vector<int>& ids, EpochAcc& acc) {
  const double bn = static_cast<double>(ids.size());
  tr.model.fb.net.zero_grad();
  tr.model.fp.net.zero_grad();
  for (int u : ids) {
    const Utterance& utt = tr.train[u];
    Matrix xwin = tr.model.embed(utt.x);
    Vector row_w = Vector::Constant(utt.frames(), 1.0 / bn);
    const double lb =
        loss_boundary(tr.model.fb, xwin, tr.bbar[u].b, tr.model.priors,
                      tr.cfg.weights.lambda_b, row_w, true) *
        bn;
    const double lp = loss_phoneme(tr.model.fp, xwin,
                                   expand_phonemes(utt.c, tr.bbar[u]), row_w,
                                   true) *
                      bn;
    if (!std::isfinite(lb) || !std::isfinite(lp))
      throw DivergenceError("loss became non-finite during warmup");
    acc.lb += lb;
    acc.lp += lp;
    ++acc.utts;
  }
  auto pb = tr.model.tensors_fb();
  tr.opt_fb.step(pb);
  auto pp = tr.model.tensors_fp();
  tr.opt_fp.step(pp);
}

void joint_step(Trainer& tr, const std::vector<int>& ids, int e,
                EpochAcc& acc) {
  const double bn = static_cast<double>(ids.size());
  tr.model.fb.net.zero_grad();
  tr.model.fp.net.zero_grad();
  tr.model.fh.zero_grad();
  for (int u : ids) {
    Rng rng(derive_seed(tr.cfg.seed, "mstep-draws", static_cast<uint64_t>(e),
                        static_cast<uint64_t>(u)));
    ElboParts p = joint_elbo(tr.model, tr.train[u], rng, true, 1.0 / bn);
    if (!std::isfinite(p.elbo))
      throw DivergenceError("joint objective became non-finite at epoch " +
                            std::to_string(e));
    acc.lh += -p.elbo;
    ++acc.utts;
  }
  auto pb = tr.model.tensors_fb();
  tr.opt_fb.step(pb);
  auto pp = tr.model.tensors_fp();
  tr.opt_fp.step(pp);
  auto ph = tr.model.tensors_fh();
  tr.opt_fh.step(ph);
}

// One utterance of the reinforcement update. False means a non-finite reward
// turned up and the whole batch must be discarded.
bool rl_utterance(Trainer& tr, int e, int u, const Utterance& utt,
                  const Matrix& xwin, const HardAssign& ha, double bn,
                  EpochAcc& acc) {
  SpeechGenerator& g = tr.model.fh;
  const ReinforceConfig& rl = tr.cfg.rl;
  const double gamma = tr.model.priors.gamma_pi;
  const int t_n = utt.frames();
  Rng rng(derive_seed(tr.cfg.seed, "rl", static_cast<uint64_t>(e),
                      static_cast<uint64_t>(u)));

  // Common random numbers: one reparameterization draw plus a variant pick
  // for every frame, shared by both reward branches and the pathwise term.
  FhTargets all1{ha.yhat, std::vector<uint8_t>(t_n, 1)};
  FhDraws dall = draw_fh_noise(g, xwin, all1, rng);
  FhTargets all0{ha.yhat, std::vector<uint8_t>(t_n, 0)};
  FhDraws d0{dall.eps, std::vector<int>(t_n, 0)};

  // Per-frame rewards with the correctness flag forced each way; a sampled
  // sequence's reward is assembled by picking per frame.
  Vector r0 = fh_frame_losses(g, xwin, utt.x, all0, d0, tr.model.priors,
                              tr.cfg.weights);
  Vector r1 = fh_frame_losses(g, xwin, utt.x, all1, dall, tr.model.priors,
                              tr.cfg.weights);
  if (!r0.allFinite() || !r1.allFinite()) return false;

  // Pathwise gradient at the decoded correctness assignment.
  FhTargets that{ha.yhat, ha.bp.pi.pi};
  FhDraws dhat{dall.eps, std::vector<int>(t_n, 0)};
  for (int t = 0; t < t_n; ++t)
    if (that.mismatch[t]) dhat.variant[t] = dall.variant[t];
  Vector row_w = Vector::Constant(t_n, 1.0 / bn);
  FhLossParts path = fh_losses(g, xwin, utt.x, that, dhat, tr.model.priors,
                               tr.cfg.weights, row_w, true, true, true);
  const double lh = path.total(tr.cfg.weights.lambda_l) * bn;
  if (!std::isfinite(lh)) return false;

  Vector q1 = correctness_posterior(g, xwin, ha.yhat, gamma);
  Matrix bl = tr.baseline.forward(xwin);
  const double bsum = bl.col(0).sum();

  // Score-function term, averaged over samples, with the baseline subtracted
  // from each sample's reward.
  Vector rbar = Vector::Zero(t_n);
  Vector dg = Vector::Zero(t_n);
  std::vector<uint8_t> pis(t_n);
  for (int i = 0; i < rl.n_mc; ++i) {
    for (int t = 0; t < t_n; ++t) pis[t] = rng.bernoulli(q1[t]) ? 1 : 0;
    double ri = 0;
    for (int t = 0; t < t_n; ++t) {
      const double rt = pis[t] ? r1[t] : r0[t];
      ri += rt;
      rbar[t] += rt / rl.n_mc;
    }
    const double rhat = ri - bsum;
    if (!std::isfinite(rhat)) return false;
    for (int t = 0; t < t_n; ++t)
      dg[t] += rhat * ((pis[t] ? 1.0 : 0.0) - q1[t]);
    acc.sum_r += ri;
    acc.sum_r2 += ri * ri;
    acc.sum_rh += rhat;
    acc.sum_rh2 += rhat * rhat;
    ++acc.samples;
  }
  dg *= 1.0 / (bn * rl.n_mc);
  correctness_logit_backward(g, xwin, ha.yhat, dg);

  // The objective carries the negated entropy, so the applied update raises
  // it, keeping the sampler exploratory.
  double ent = 0;
  for (int t = 0; t < t_n; ++t) {
    const double q = q1[t];
    if (q > 0.0 && q < 1.0) ent -= q * std::log(q) + (1 - q) * std::log1p(-q);
  }
  acc.ent += ent;
  if (rl.entropy_weight != 0.0)
    correctness_entropy(g, xwin, ha.yhat, gamma,
                        Vector::Constant(t_n, -rl.entropy_weight / bn), true);

  // Baseline regresses toward the sample-averaged per-frame reward.
  Vector diff = bl.col(0) - rbar;
  acc.mse += diff.squaredNorm() / t_n;
  Matrix dbl(t_n, 1);
  dbl.col(0) = diff * (2.0 / (t_n * bn));
  tr.baseline.backward(dbl);

  acc.lh += lh;
  ++acc.rl_utts;
  return true;
}

void main_step(Trainer& tr, const std::vector<int>& ids, int e,
               EpochAcc& acc) {
  const double bn = static_cast<double>(ids.size());
  const bool is_rl = tr.cfg.variant == Variant::MlVaeRl;
  tr.model.fb.net.zero_grad();
  tr.model.fp.net.zero_grad();
  tr.model.fh.zero_grad();
  if (is_rl) tr.baseline.zero_grad();

  EpochAcc local;
  bool ok = true;
  for (int u : ids) {
    const Utterance& utt = tr.train[u];
    Matrix xwin = tr.model.embed(utt.x);
    Vector row_w = Vector::Constant(utt.frames(), 1.0 / bn);
    HardAssign ha = estep(tr, utt, xwin);

    const BoundarySeq& btar =
        tr.cfg.ablation == Ablation::BhatAlign ? ha.bp.b : tr.bbar[u];
    const double lb =
        loss_boundary(tr.model.fb, xwin, btar.b, tr.model.priors,
                      tr.cfg.weights.lambda_b, row_w, true) *
        bn;
    const double lp =
        loss_phoneme(tr.model.fp, xwin, expand_phonemes(utt.c, btar), row_w,
                     true) *
        bn;
    if (!std::isfinite(lb) || !std::isfinite(lp))
      throw DivergenceError("loss became non-finite at epoch " +
                            std::to_string(e));
    local.lb += lb;
    local.lp += lp;
    ++local.utts;

    if (is_rl) {
      if (!rl_utterance(tr, e, u, utt, xwin, ha, bn, local)) {
        ok = false;
        break;
      }
    } else {
      FhTargets tgt{ha.yhat, ha.bp.pi.pi};
      Rng rng(derive_seed(tr.cfg.seed, "mstep-draws", static_cast<uint64_t>(e),
                          static_cast<uint64_t>(u)));
      FhDraws draws = draw_fh_noise(tr.model.fh, xwin, tgt, rng);
      FhLossParts p =
          fh_losses(tr.model.fh, xwin, utt.x, tgt, draws, tr.model.priors,
                    tr.cfg.weights, row_w, true, true, true);
      const double lh = p.total(tr.cfg.weights.lambda_l) * bn;
      if (!std::isfinite(lh))
        throw DivergenceError("generator loss became non-finite at epoch " +
                              std::to_string(e));
      local.lh += lh;
    }
  }

  if (!ok) {
    ++acc.skipped;
    std::cerr << "warning: non-finite reward, skipping batch at epoch " << e
              << "\n";
    return;
  }
  merge(acc, local);
  auto pb = tr.model.tensors_fb();
  tr.opt_fb.step(pb);
  auto pp = tr.model.tensors_fp();
  tr.opt_fp.step(pp);
  auto ph = tr.model.tensors_fh();
  tr.opt_fh.step(ph);
  if (is_rl) {
    auto pl = tr.baseline.tensors("base");
    tr.opt_base.step(pl);
  }
}

// ---- checkpoint bytes ----

constexpr char kMagic[] = "MLVAECP1";

void append_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i)
    s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f32(std::string& s, double v) {
  append_u32(s, std::bit_cast<uint32_t>(static_cast<float>(v)));
}

struct PayloadReader {
  const std::string& s;
  size_t pos;
  std::string path;

  void need(size_t n) const {
    if (pos + n > s.size())
      throw CheckpointError("truncated checkpoint payload in " + path);
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(s[pos++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(s[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
};

struct RawCkpt {
  json header;
  std::string bytes;
  size_t payload_off = 0;
  std::string path;
};

RawCkpt read_ckpt(const std::filesystem::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + file.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  RawCkpt ck;
  ck.bytes = std::move(ss).str();
  ck.path = file.string();
  if (ck.bytes.size() < 12 || ck.bytes.compare(0, 8, kMagic) != 0)
    throw CheckpointError("bad checkpoint magic in " + ck.path +
                          "; expected MLVAECP1");
  uint32_t hlen = 0;
  for (int i = 0; i < 4; ++i)
    hlen |= static_cast<uint32_t>(static_cast<uint8_t>(ck.bytes[8 + i]))
            << (8 * i);
  if (12 + static_cast<size_t>(hlen) > ck.bytes.size())
    throw CheckpointError("truncated checkpoint header in " + ck.path);
  ck.header = json::parse(ck.bytes.substr(12, hlen), nullptr, false);
  if (ck.header.is_discarded())
    throw CheckpointError("malformed checkpoint header in " + ck.path);
  const int ver = ck.header.at("version").get<int>();
  if (ver != 1)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(ver) + " in " + ck.path +
                          "; this build reads version 1");
  ck.payload_off = 12 + static_cast<size_t>(hlen);
  return ck;
}

Vector vector_from(const json& j) {
  std::vector<double> v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json vector_to(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Model model_from_header(const json& h, const TrainConfig& cfg) {
  const json& ji = h.at("inventory");
  PhonemeInventory inv;
  inv.symbols = ji.at("symbols").get<std::vector<std::string>>();
  inv.prior = vector_from(ji.at("prior"));
  inv.zeta = vector_from(ji.at("zeta"));
  const json& jp = h.at("priors");
  Priors priors;
  priors.alpha = jp.at("alpha").get<double>();
  priors.beta = jp.at("beta").get<double>();
  priors.gamma_pi = jp.at("gamma_pi").get<double>();
  return Model::init(cfg.net, inv, priors, h.at("feat_dim").get<int>(),
                     cfg.seed);
}

void fill_group(PayloadReader& r, const json& manifest,
                std::vector<TensorRef> params) {
  if (manifest.size() != params.size())
    throw CheckpointError("checkpoint tensor layout mismatch in " + r.path);
  for (size_t i = 0; i < params.size(); ++i) {
    const json& m = manifest[i];
    if (m.at("name").get<std::string>() != params[i].name ||
        m.at("size").get<Eigen::Index>() != params[i].size)
      throw CheckpointError("checkpoint tensor layout mismatch in " + r.path +
                            " at " + params[i].name);
    for (Eigen::Index k = 0; k < params[i].size; ++k)
      params[i].value[k] = r.f32();
  }
}

json group_manifest(const std::vector<TensorRef>& params) {
  json out = json::array();
  for (const TensorRef& p : params)
    out.push_back({{"name", p.name}, {"size", p.size}});
  return out;
}

void append_adam(std::string& out, const Adam& o) {
  for (const Vector& x : o.m)
    for (Eigen::Index i = 0; i < x.size(); ++i) append_f32(out, x[i]);
  for (const Vector& x : o.v)
    for (Eigen::Index i = 0; i < x.size(); ++i) append_f32(out, x[i]);
}

void read_adam(PayloadReader& r, Adam& o) {
  for (Vector& x : o.m)
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = r.f32();
  for (Vector& x : o.v)
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = r.f32();
}

}  // namespace

// ---- names and config ----

Variant variant_from(const std::string& s) {
  if (s == "ml-vae") return Variant::MlVae;
  if (s == "ml-vae-rl") return Variant::MlVaeRl;
  throw ConfigError("unknown variant \"" + s +
                    "\"; expected ml-vae or ml-vae-rl");
}

std::string to_string(Variant v) {
  return v == Variant::MlVae ? "ml-vae" : "ml-vae-rl";
}

Ablation ablation_from(const std::string& s) {
  if (s.empty() || s == "none") return Ablation::None;
  if (s == "bhat-align") return Ablation::BhatAlign;
  if (s == "joint") return Ablation::Joint;
  if (s == "separate-e") return Ablation::SeparateE;
  throw ConfigError("unknown ablation \"" + s +
                    "\"; expected bhat-align, joint, or separate-e");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::BhatAlign: return "bhat-align";
    case Ablation::Joint: return "joint";
    case Ablation::SeparateE: return "separate-e";
  }
  return "none";
}

void ReinforceConfig::validate() const {
  if (n_mc < 1) throw ValidationError("rl.n_mc must be >= 1");
  if (!(entropy_weight >= 0) || !std::isfinite(entropy_weight))
    throw ValidationError("rl.entropy_weight must be finite and >= 0");
  if (!(baseline_lr > 0))
    throw ValidationError("rl.baseline_lr must be positive");
  for (int h : baseline_hidden)
    if (h < 1) throw ValidationError("rl.baseline_hidden sizes must be >= 1");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(lr > 0)) throw ValidationError("lr must be positive");
  if (!(grad_clip > 0)) throw ValidationError("grad_clip must be positive");
  if (warmup_epochs < 1) throw ValidationError("warmup_epochs must be >= 1");
  if (realign_every < 1) throw ValidationError("realign_every must be >= 1");
  if (patience < 1) throw ValidationError("patience must be >= 1");
  if (!(gamma_pi > 0 && gamma_pi < 1))
    throw ValidationError("gamma_pi must lie in (0, 1)");
  if (weights.lambda_b < 0 || weights.lambda_r < 0 || weights.lambda_l < 0)
    throw ValidationError("loss weights must be nonnegative");
  rl.validate();
  net.validate();
}

json TrainConfig::to_json() const {
  json j;
  j["variant"] = mlvae::to_string(variant);
  j["ablation"] = mlvae::to_string(ablation);
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["grad_clip"] = grad_clip;
  j["warmup_epochs"] = warmup_epochs;
  j["realign_every"] = realign_every;
  j["patience"] = patience;
  j["seed"] = seed;
  j["gamma_pi"] = gamma_pi;
  j["weights"] = {{"lambda_b", weights.lambda_b},
                  {"lambda_r", weights.lambda_r},
                  {"lambda_l", weights.lambda_l}};
  j["rl"] = {{"n_mc", rl.n_mc},
             {"entropy_weight", rl.entropy_weight},
             {"baseline_hidden", rl.baseline_hidden},
             {"baseline_lr", rl.baseline_lr}};
  j["net"] = {{"context", net.context},
              {"hidden", net.hidden},
              {"latent_dim", net.latent_dim},
              {"n_variants", net.n_variants}};
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  try {
    require_keys(j,
                 {"variant", "ablation", "epochs", "batch_size", "lr",
                  "grad_clip", "warmup_epochs", "realign_every", "patience",
                  "seed", "gamma_pi", "weights", "rl", "net"},
                 "");
    if (j.contains("variant"))
      c.variant = variant_from(j.at("variant").get<std::string>());
    if (j.contains("ablation"))
      c.ablation = ablation_from(j.at("ablation").get<std::string>());
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
    if (j.contains("warmup_epochs"))
      c.warmup_epochs = j.at("warmup_epochs").get<int>();
    if (j.contains("realign_every"))
      c.realign_every = j.at("realign_every").get<int>();
    if (j.contains("patience")) c.patience = j.at("patience").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("gamma_pi")) c.gamma_pi = j.at("gamma_pi").get<double>();
    if (j.contains("weights")) {
      const json& w = j.at("weights");
      require_keys(w, {"lambda_b", "lambda_r", "lambda_l"}, "weights.");
      if (w.contains("lambda_b"))
        c.weights.lambda_b = w.at("lambda_b").get<double>();
      if (w.contains("lambda_r"))
        c.weights.lambda_r = w.at("lambda_r").get<double>();
      if (w.contains("lambda_l"))
        c.weights.lambda_l = w.at("lambda_l").get<double>();
    }
    if (j.contains("rl")) {
      const json& r = j.at("rl");
      require_keys(r, {"n_mc", "entropy_weight", "baseline_hidden",
                       "baseline_lr"},
                   "rl.");
      if (r.contains("n_mc")) c.rl.n_mc = r.at("n_mc").get<int>();
      if (r.contains("entropy_weight"))
        c.rl.entropy_weight = r.at("entropy_weight").get<double>();
      if (r.contains("baseline_hidden"))
        c.rl.baseline_hidden =
            r.at("baseline_hidden").get<std::vector<int>>();
      if (r.contains("baseline_lr"))
        c.rl.baseline_lr = r.at("baseline_lr").get<double>();
    }
    if (j.contains("net")) {
      const json& n = j.at("net");
      require_keys(n, {"context", "hidden", "latent_dim", "n_variants"},
                   "net.");
      if (n.contains("context")) c.net.context = n.at("context").get<int>();
      if (n.contains("hidden"))
        c.net.hidden = n.at("hidden").get<std::vector<int>>();
      if (n.contains("latent_dim"))
        c.net.latent_dim = n.at("latent_dim").get<int>();
      if (n.contains("n_variants"))
        c.net.n_variants = n.at("n_variants").get<int>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- priors from data ----

PhonemeInventory estimate_inventory(const std::vector<Utterance>& utts,
                                    int n_symbols) {
  if (n_symbols < 1)
    throw ValidationError("inventory needs at least one symbol");
  Vector counts = Vector::Ones(n_symbols);  // add-one smoothing
  double total = n_symbols;
  for (const Utterance& u : utts)
    for (int c : u.c) {
      if (c < 0 || c >= n_symbols)
        throw ValidationError("label out of range for the inventory");
      counts[c] += 1;
      total += 1;
    }
  PhonemeInventory inv;
  inv.symbols.reserve(n_symbols);
  for (int i = 0; i < n_symbols; ++i) inv.symbols.push_back(std::to_string(i));
  inv.prior = counts / total;
  inv.zeta = inv.prior;
  inv.validate();
  return inv;
}

Priors estimate_priors(const std::vector<Utterance>& utts, double gamma_pi) {
  if (utts.empty())
    throw ValidationError("prior estimation needs at least one utterance");
  long labels = 0, frames = 0;
  for (const Utterance& u : utts) {
    labels += u.labels();
    frames += u.frames();
  }
  double rate = static_cast<double>(labels) / static_cast<double>(frames);
  rate = std::min(1.0 - 1e-3, std::max(1e-3, rate));
  Priors p;
  p.alpha = kPriorStrength * rate;
  p.beta = kPriorStrength * (1.0 - rate);
  p.gamma_pi = gamma_pi;
  p.validate();
  return p;
}

// ---- decoding ----

LocalizationResult localize_with(Model& m, const Utterance& utt, Ablation ab) {
  if (ab == Ablation::SeparateE)
    return result_from_path(
        separate_estimate(frame_scores(m, utt), m.priors.gamma_pi));
  return mlvae_localize(m, utt);
}

CorpusScore evaluate_localization(Model& m, const std::vector<Utterance>& utts,
                                  Ablation ab) {
  std::vector<UtteranceScore> scores;
  scores.reserve(utts.size());
  for (const Utterance& utt : utts)
    scores.push_back(score_utterance(localize_with(m, utt, ab), utt));
  return aggregate(scores);
}

// ---- epoch log ----

json EpochLog::to_json() const {
  json j;
  j["epoch"] = epoch;
  j["phase"] = phase;
  j["realigned"] = realigned;
  if (loss_b) j["loss_b"] = *loss_b;
  if (loss_p) j["loss_p"] = *loss_p;
  if (loss_h) j["loss_h"] = *loss_h;
  if (reward_mean) j["reward_mean"] = *reward_mean;
  if (reward_var) j["reward_var"] = *reward_var;
  if (rhat_var) j["rhat_var"] = *rhat_var;
  if (baseline_mse) j["baseline_mse"] = *baseline_mse;
  if (entropy) j["entropy"] = *entropy;
  j["skipped"] = skipped;
  j["val_f1"] = val_f1;
  j["val_pr"] = val_pr;
  j["val_re"] = val_re;
  j["val_boundary_acc"] = val_boundary_acc;
  j["val_align_iou"] = val_align_iou;
  if (best_f1) j["best_f1"] = *best_f1;
  if (best_epoch) j["best_epoch"] = *best_epoch;
  return j;
}

// ---- trainer ----

std::vector<TensorRef> Trainer::model_tensors() {
  return all_model_tensors(model);
}

Trainer Trainer::make(TrainConfig cfg, std::vector<Utterance> train_utts,
                      std::vector<Utterance> valid_utts) {
  cfg.validate();
  if (train_utts.empty()) throw ValidationError("training set is empty");
  if (valid_utts.empty()) throw ValidationError("validation set is empty");
  for (const Utterance& u : valid_utts)
    if (!u.truth.has_value())
      throw ValidationError(
          "validation utterances need ground truth for scoring");

  int n_symbols = 0;
  for (const auto* set : {&train_utts, &valid_utts})
    for (const Utterance& u : *set)
      for (int c : u.c) n_symbols = std::max(n_symbols, c + 1);

  Trainer tr;
  tr.cfg = cfg;
  tr.train = std::move(train_utts);
  tr.valid = std::move(valid_utts);

  PhonemeInventory inv = estimate_inventory(tr.train, n_symbols);
  Priors priors = estimate_priors(tr.train, cfg.gamma_pi);
  const int feat_dim = tr.train[0].feat_dim();
  tr.model = Model::init(cfg.net, inv, priors, feat_dim, cfg.seed);

  tr.bbar.reserve(tr.train.size());
  for (const Utterance& u : tr.train)
    tr.bbar.push_back(uniform_alignment(u.frames(), u.labels()));

  Rng brng(derive_seed(cfg.seed, "baseline-init"));
  tr.baseline =
      Mlp::make(baseline_dims(feat_dim, cfg), Act::Tanh, Act::Identity, brng);

  tr.opt_fb = Adam(cfg.lr, cfg.grad_clip);
  auto pb = tr.model.tensors_fb();
  tr.opt_fb.init(pb);
  tr.opt_fp = Adam(cfg.lr, cfg.grad_clip);
  auto pp = tr.model.tensors_fp();
  tr.opt_fp.init(pp);
  tr.opt_fh = Adam(cfg.lr, cfg.grad_clip);
  auto ph = tr.model.tensors_fh();
  tr.opt_fh.init(ph);
  tr.opt_base = Adam(cfg.rl.baseline_lr, cfg.grad_clip);
  auto pl = tr.baseline.tensors("base");
  tr.opt_base.init(pl);

  quantize_state(tr);
  return tr;
}

EpochLog Trainer::step_epoch() {
  const int e = epoch + 1;
  const bool warm = e <= cfg.warmup_epochs;
  EpochLog log;
  log.epoch = e;
  log.phase = warm ? "warmup" : "main";

  if (!warm) {
    const int main_idx = e - cfg.warmup_epochs;
    if (main_idx == 1)
      init_gmm_from_alignment(model, train, bbar,
                              derive_seed(cfg.seed, "gmm-init"));
    const bool uses_running = cfg.ablation != Ablation::BhatAlign &&
                              cfg.ablation != Ablation::Joint;
    if (uses_running && (main_idx - 1) % cfg.realign_every == 0) {
      refresh_alignment(*this);
      log.realigned = true;
    }
  }

  EpochAcc acc;
  const std::vector<int> order =
      epoch_order(static_cast<int>(train.size()), cfg.seed, e);
  for (size_t k = 0; k < order.size(); k += static_cast<size_t>(cfg.batch_size)) {
    const size_t end =
        std::min(order.size(), k + static_cast<size_t>(cfg.batch_size));
    std::vector<int> ids(order.begin() + k, order.begin() + end);
    if (warm)
      warmup_step(*this, ids, acc);
    else if (cfg.ablation == Ablation::Joint)
      joint_step(*this, ids, e, acc);
    else
      main_step(*this, ids, e, acc);
  }

  if (acc.utts > 0) {
    if (cfg.ablation != Ablation::Joint || warm) {
      log.loss_b = acc.lb / acc.utts;
      log.loss_p = acc.lp / acc.utts;
    }
    if (!warm) log.loss_h = acc.lh / acc.utts;
  }
  if (acc.samples > 0) {
    const double n = static_cast<double>(acc.samples);
    const double mr = acc.sum_r / n;
    const double mh = acc.sum_rh / n;
    log.reward_mean = mr;
    log.reward_var = std::max(0.0, acc.sum_r2 / n - mr * mr);
    log.rhat_var = std::max(0.0, acc.sum_rh2 / n - mh * mh);
  }
  if (acc.rl_utts > 0) {
    log.baseline_mse = acc.mse / acc.rl_utts;
    log.entropy = acc.ent / acc.rl_utts;
  }
  log.skipped = acc.skipped;
  skipped_batches += acc.skipped;

  // Freeze the state to 32-bit floats before scoring so the checkpoint
  // written after this epoch reproduces exactly what the log reports.
  quantize_state(*this);

  CorpusScore cs = evaluate_localization(model, valid, cfg.ablation);
  if (!std::isfinite(cs.metrics.f1_ml))
    throw DivergenceError("validation score became non-finite at epoch " +
                          std::to_string(e));
  log.val_f1 = cs.metrics.f1_ml;
  log.val_pr = cs.metrics.pr_ml;
  log.val_re = cs.metrics.re_ml;
  log.val_boundary_acc = cs.boundary_accuracy;
  log.val_align_iou = cs.alignment_avg_iou;

  if (!warm) {
    if (best_params.empty() || cs.metrics.f1_ml > best_f1) {
      best_f1 = cs.metrics.f1_ml;
      best_epoch = e;
      stall = 0;
      best_params = snapshot_params(*this);
    } else {
      ++stall;
    }
    log.best_f1 = best_f1;
    log.best_epoch = best_epoch;
  }

  epoch = e;
  return log;
}

void Trainer::run(const std::filesystem::path& out_dir,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  std::filesystem::create_directories(out_dir);
  const auto log_path = out_dir / "train_log.jsonl";
  std::ofstream logf(log_path, std::ios::app);
  if (!logf) throw DataError("cannot write " + log_path.string());
  try {
    while (epoch < cfg.epochs) {
      EpochLog lg = step_epoch();
      logf << lg.to_json().dump() << "\n";
      logf.flush();
      if (on_epoch) on_epoch(lg);
      save(out_dir / "last.ckpt");
      if (stall >= cfg.patience) break;
    }
  } catch (const DivergenceError&) {
    save(out_dir / "diverged.ckpt");
    throw;
  }
  restore_best();
  save(out_dir / "best.ckpt");
}

void Trainer::restore_best() {
  if (best_params.empty()) return;
  size_t off = 0;
  for (const TensorRef& p : model_tensors()) {
    if (off + static_cast<size_t>(p.size) > best_params.size())
      throw ValidationError("best snapshot does not match the model");
    std::copy(best_params.begin() + off,
              best_params.begin() + off + p.size, p.value);
    off += static_cast<size_t>(p.size);
  }
  if (off != best_params.size())
    throw ValidationError("best snapshot does not match the model");
}

void Trainer::save(const std::filesystem::path& file) {
  auto mt = model_tensors();
  auto bt = baseline.tensors("base");

  json h;
  h["version"] = 1;
  h["config"] = cfg.to_json();
  h["feat_dim"] = model.feat_dim;
  h["inventory"] = {{"symbols", model.inv.symbols},
                    {"prior", vector_to(model.inv.prior)},
                    {"zeta", vector_to(model.inv.zeta)}};
  h["priors"] = {{"alpha", model.priors.alpha},
                 {"beta", model.priors.beta},
                 {"gamma_pi", model.priors.gamma_pi}};
  h["epoch"] = epoch;
  h["best_f1"] = best_f1;
  h["best_epoch"] = best_epoch;
  h["stall"] = stall;
  h["skipped_batches"] = skipped_batches;
  h["n_train"] = train.size();
  h["n_valid"] = valid.size();
  h["tensors"] = group_manifest(mt);
  h["baseline"] = group_manifest(bt);
  h["has_best"] = !best_params.empty();
  h["adam_steps"] = {{"fb", opt_fb.steps},
                     {"fp", opt_fp.steps},
                     {"fh", opt_fh.steps},
                     {"base", opt_base.steps}};

  const std::string header = h.dump();
  std::string out;
  out.append(kMagic, 8);
  append_u32(out, static_cast<uint32_t>(header.size()));
  out += header;
  for (const TensorRef& p : mt)
    for (Eigen::Index i = 0; i < p.size; ++i) append_f32(out, p.value[i]);
  for (const TensorRef& p : bt)
    for (Eigen::Index i = 0; i < p.size; ++i) append_f32(out, p.value[i]);
  for (double v : best_params) append_f32(out, v);
  append_adam(out, opt_fb);
  append_adam(out, opt_fp);
  append_adam(out, opt_fh);
  append_adam(out, opt_base);
  append_u32(out, static_cast<uint32_t>(bbar.size()));
  for (const BoundarySeq& b : bbar) {
    append_u32(out, static_cast<uint32_t>(b.frames()));
    for (uint8_t v : b.b) out.push_back(static_cast<char>(v));
  }

  std::ofstream f(file, std::ios::binary | std::ios::trunc);
  if (!f || !f.write(out.data(), static_cast<std::streamsize>(out.size())))
    throw DataError("cannot write " + file.string());
}

Trainer Trainer::load(const std::filesystem::path& file,
                      std::vector<Utterance> train_utts,
                      std::vector<Utterance> valid_utts) {
  RawCkpt ck = read_ckpt(file);
  const json& h = ck.header;

  Trainer tr;
  tr.cfg = TrainConfig::from_json(h.at("config"));
  if (h.at("n_train").get<size_t>() != train_utts.size() ||
      h.at("n_valid").get<size_t>() != valid_utts.size())
    throw CheckpointError(
        "checkpoint " + ck.path +
        " was trained on a different number of utterances than supplied");
  tr.train = std::move(train_utts);
  tr.valid = std::move(valid_utts);
  tr.model = model_from_header(h, tr.cfg);

  Rng brng(derive_seed(tr.cfg.seed, "baseline-init"));
  tr.baseline = Mlp::make(baseline_dims(tr.model.feat_dim, tr.cfg), Act::Tanh,
                          Act::Identity, brng);

  PayloadReader r{ck.bytes, ck.payload_off, ck.path};
  fill_group(r, h.at("tensors"), tr.model_tensors());
  fill_group(r, h.at("baseline"), tr.baseline.tensors("base"));
  if (h.at("has_best").get<bool>()) {
    size_t total = 0;
    for (const TensorRef& p : tr.model_tensors())
      total += static_cast<size_t>(p.size);
    tr.best_params.resize(total);
    for (double& v : tr.best_params) v = r.f32();
  }

  const json& steps = h.at("adam_steps");
  tr.opt_fb = Adam(tr.cfg.lr, tr.cfg.grad_clip);
  auto pb = tr.model.tensors_fb();
  tr.opt_fb.init(pb);
  read_adam(r, tr.opt_fb);
  tr.opt_fb.steps = steps.at("fb").get<long>();
  tr.opt_fp = Adam(tr.cfg.lr, tr.cfg.grad_clip);
  auto pp = tr.model.tensors_fp();
  tr.opt_fp.init(pp);
  read_adam(r, tr.opt_fp);
  tr.opt_fp.steps = steps.at("fp").get<long>();
  tr.opt_fh = Adam(tr.cfg.lr, tr.cfg.grad_clip);
  auto ph = tr.model.tensors_fh();
  tr.opt_fh.init(ph);
  read_adam(r, tr.opt_fh);
  tr.opt_fh.steps = steps.at("fh").get<long>();
  tr.opt_base = Adam(tr.cfg.rl.baseline_lr, tr.cfg.grad_clip);
  auto pl = tr.baseline.tensors("base");
  tr.opt_base.init(pl);
  read_adam(r, tr.opt_base);
  tr.opt_base.steps = steps.at("base").get<long>();

  const uint32_t n = r.u32();
  if (n != tr.train.size())
    throw CheckpointError("alignment cache in " + ck.path + " covers " +
                          std::to_string(n) + " utterances; dataset has " +
                          std::to_string(tr.train.size()));
  tr.bbar.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    const uint32_t t_n = r.u32();
    if (static_cast<int>(t_n) != tr.train[i].frames())
      throw CheckpointError("alignment length mismatch for utterance " +
                            tr.train[i].id + " in " + ck.path);
    tr.bbar[i].b.resize(t_n);
    for (uint32_t t = 0; t < t_n; ++t) tr.bbar[i].b[t] = r.u8();
    tr.bbar[i].validate();
  }
  if (r.pos != ck.bytes.size())
    throw CheckpointError("trailing bytes in checkpoint " + ck.path);

  tr.epoch = h.at("epoch").get<int>();
  tr.best_f1 = h.at("best_f1").get<double>();
  tr.best_epoch = h.at("best_epoch").get<int>();
  tr.stall = h.at("stall").get<int>();
  tr.skipped_batches = h.at("skipped_batches").get<long>();
  return tr;
}

ModelBundle load_model(const std::filesystem::path& file) {
  RawCkpt ck = read_ckpt(file);
  ModelBundle mb;
  mb.cfg = TrainConfig::from_json(ck.header.at("config"));
  mb.model = model_from_header(ck.header, mb.cfg);
  PayloadReader r{ck.bytes, ck.payload_off, ck.path};
  fill_group(r, ck.header.at("tensors"), all_model_tensors(mb.model));
  return mb;
}

std::vector<RewardSample> reward_samples(Trainer& tr,
                                         const std::vector<Utterance>& utts,
                                         uint64_t salt) {
  std::vector<RewardSample> out;
  out.reserve(utts.size() * static_cast<size_t>(tr.cfg.rl.n_mc));
  SpeechGenerator& g = tr.model.fh;
  for (size_t u = 0; u < utts.size(); ++u) {
    const Utterance& utt = utts[u];
    Matrix xwin = tr.model.embed(utt.x);
    HardAssign ha = estep(tr, utt, xwin);
    const int t_n = utt.frames();
    Rng rng(derive_seed(tr.cfg.seed, "rl-eval", salt, u));
    FhTargets all1{ha.yhat, std::vector<uint8_t>(t_n, 1)};
    FhDraws dall = draw_fh_noise(g, xwin, all1, rng);
    FhTargets all0{ha.yhat, std::vector<uint8_t>(t_n, 0)};
    FhDraws d0{dall.eps, std::vector<int>(t_n, 0)};
    Vector r0 = fh_frame_losses(g, xwin, utt.x, all0, d0, tr.model.priors,
                                tr.cfg.weights);
    Vector r1 = fh_frame_losses(g, xwin, utt.x, all1, dall, tr.model.priors,
                                tr.cfg.weights);
    Vector q1 = correctness_posterior(g, xwin, ha.yhat, tr.model.priors.gamma_pi);
    const double bsum = tr.baseline.forward(xwin).col(0).sum();
    for (int i = 0; i < tr.cfg.rl.n_mc; ++i) {
      double ri = 0;
      for (int t = 0; t < t_n; ++t) ri += rng.bernoulli(q1[t]) ? r1[t] : r0[t];
      out.push_back({ri, ri - bsum});
    }
  }
  return out;
}

}  // namespace mlvae
