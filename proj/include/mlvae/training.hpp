#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include <json.hpp>

#include "mlvae/lattice.hpp"
#include "mlvae/metrics.hpp"

namespace mlvae {

enum class Variant { MlVae, MlVaeRl };

// Structural ablations, each swapping one piece of the standard procedure:
// BhatAlign trains the boundary and phoneme nets on the decoded segmentation
// instead of the running alignment, Joint descends the single-sample joint
// objective directly, SeparateE decodes boundaries first and picks each
// segment's lane independently.
enum class Ablation { None, BhatAlign, Joint, SeparateE };

Variant variant_from(const std::string& s);
std::string to_string(Variant v);
Ablation ablation_from(const std::string& s);
std::string to_string(Ablation a);

struct ReinforceConfig {
  int n_mc = 4;
  double entropy_weight = 1.0;
  std::vector<int> baseline_hidden = {32};
  double baseline_lr = 1e-3;
  void validate() const;
};

struct TrainConfig {
  Variant variant = Variant::MlVae;
  Ablation ablation = Ablation::None;
  int epochs = 50;
  int batch_size = 16;  // whole utterances per optimizer step
  double lr = 1e-3;
  double grad_clip = 5.0;
  int warmup_epochs = 5;
  int realign_every = 5;  // main epochs between alignment refreshes
  int patience = 10;      // main epochs without validation F1 improvement
  uint64_t seed = 0;
  double gamma_pi = 0.15;
  LossWeights weights;
  ReinforceConfig rl;
  NetSpec net;

  void validate() const;
  nlohmann::json to_json() const;
  // Strict parse: any key not named here is a ConfigError naming the key.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Label frequencies over the transcripts, add-one smoothed, used for both the
// decoder prior and the categorical draw.
PhonemeInventory estimate_inventory(const std::vector<Utterance>& utts,
                                    int n_symbols);

// Beta prior centered at the observed boundary rate (labels per frame) with a
// fixed pseudo-count strength; gamma_pi comes from the config.
Priors estimate_priors(const std::vector<Utterance>& utts, double gamma_pi);

// One localization decode honoring the ablation choice.
LocalizationResult localize_with(Model& m, const Utterance& utt, Ablation ab);
CorpusScore evaluate_localization(Model& m, const std::vector<Utterance>& utts,
                                  Ablation ab);

// One line of the per-epoch metric log. Optional fields are omitted from the
// JSON when absent so every emitted value is finite.
struct EpochLog {
  int epoch = 0;  // 1-based, counts completed epochs
  std::string phase;
  bool realigned = false;
  std::optional<double> loss_b, loss_p, loss_h;
  std::optional<double> reward_mean, reward_var, rhat_var;
  std::optional<double> baseline_mse, entropy;
  int skipped = 0;  // batches whose generator update was skipped this epoch
  double val_f1 = 0, val_pr = 0, val_re = 0;
  double val_boundary_acc = 0, val_align_iou = 0;
  std::optional<double> best_f1;
  std::optional<int> best_epoch;

  nlohmann::json to_json() const;
};

// Alternating trainer: boundary and phoneme warmup on a flat-start alignment,
// then per epoch a hard assignment pass (per-frame phoneme argmax plus a
// lattice decode of boundaries and correctness) followed by gradient steps on
// the three submodels. The reinforcement variant replaces the generator's
// correctness gradient with a baselined score-function estimate.
//
// All state is public and every epoch runs through step_epoch so tests can
// drive, inspect, and serialize the trainer at any point. Parameters and
// optimizer moments are kept exactly representable in 32-bit floats between
// epochs, which makes checkpoints lossless.
class Trainer {
 public:
  TrainConfig cfg;
  Model model;
  std::vector<Utterance> train, valid;
  std::vector<BoundarySeq> bbar;  // running alignment, one per train utterance
  Mlp baseline;                   // frame window -> scalar reward predictor
  Adam opt_fb, opt_fp, opt_fh, opt_base;
  int epoch = 0;  // completed epochs
  double best_f1 = -1.0;
  int best_epoch = 0;
  int stall = 0;  // main epochs since the last strict improvement
  long skipped_batches = 0;
  std::vector<double> best_params;  // flat snapshot, empty until first main epoch

  static Trainer make(TrainConfig cfg, std::vector<Utterance> train_utts,
                      std::vector<Utterance> valid_utts);

  // Runs epoch `epoch + 1`. Throws DivergenceError when any loss or
  // validation score comes out non-finite.
  EpochLog step_epoch();

  // Full loop: appends one JSON line per epoch to out_dir/train_log.jsonl,
  // rewrites out_dir/last.ckpt after every epoch, stops on the epoch budget
  // or patience, restores the best parameters and writes out_dir/best.ckpt.
  // On divergence the state is saved to out_dir/diverged.ckpt and the error
  // rethrown.
  void run(const std::filesystem::path& out_dir,
           const std::function<void(const EpochLog&)>& on_epoch = {});

  void save(const std::filesystem::path& file);
  static Trainer load(const std::filesystem::path& file,
                      std::vector<Utterance> train_utts,
                      std::vector<Utterance> valid_utts);

  // Copies the best snapshot back into the model; no-op when none was taken.
  void restore_best();

  std::vector<TensorRef> model_tensors();
};

// Checkpoint plus its stored configuration, enough to decode.
struct ModelBundle {
  TrainConfig cfg;
  Model model;
};
ModelBundle load_model(const std::filesystem::path& file);

// Raw and baseline-calibrated rewards over a batch, one entry per Monte Carlo
// sample per utterance, drawn exactly as the reinforcement step draws them.
// The variance-reduction check compares the spread of the two columns.
struct RewardSample {
  double reward = 0.0;
  double calibrated = 0.0;
};
std::vector<RewardSample> reward_samples(Trainer& tr,
                                         const std::vector<Utterance>& utts,
                                         uint64_t salt);

}  // namespace mlvae
