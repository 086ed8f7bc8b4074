#pragma once

#include <optional>

#include "mlvae/nnet.hpp"
#include "mlvae/probmath.hpp"

namespace mlvae {

// Positivity floor for the per-frame Beta parameters.
inline constexpr double kBetaHeadFloor = 1e-3;
// Constant multiplying the selector's scalar inside the component softmax.
inline constexpr double kSelectorEps = 1e-6;

struct NetSpec {
  int context = 5;
  std::vector<int> hidden = {64, 64};
  int latent_dim = 8;
  int n_variants = 3;
  void validate() const;
};

struct LossWeights {
  double lambda_b = 0.01;
  double lambda_r = 1.0;
  double lambda_l = 0.001;
};

struct BoundaryDetector {
  Mlp net;  // window -> 2 raw heads; softplus + floor gives (alpha, beta)
};

struct BoundaryPosterior {
  Vector alpha, beta;
  Vector qb;  // posterior mean, used as q(b_t=1|x_t)
};

struct PhonemeEstimator {
  Mlp net;  // window -> N logits
};

struct SpeechGenerator {
  Mlp encoder;      // window -> (mean, raw var) of q(h|x)
  Mlp decoder;      // latent -> (mean, raw var) of p(x|h)
  Matrix gmm_mean;  // K x latent
  Matrix gmm_rawvar;
  Matrix g_gmm_mean;
  Matrix g_gmm_rawvar;
  Mlp scale_net;    // window -> scalar in (0,1) feeding the selector softmax
  Mlp variant_net;  // window + phoneme one-hot -> variant logits
  int n_phonemes = 0;
  int n_variants = 0;
  int latent_dim = 0;

  int components() const { return n_phonemes * (n_variants + 1); }
  // variant 0 is the correctly pronounced component, 1..n_variants the
  // mispronunciation variants.
  int component_index(int phoneme, int variant) const;
  Matrix gmm_var() const;
  void zero_grad();
};

struct Model {
  NetSpec spec;
  PhonemeInventory inv;
  Priors priors;
  int feat_dim = 0;
  BoundaryDetector fb;
  PhonemeEstimator fp;
  SpeechGenerator fh;

  static Model init(const NetSpec& spec, const PhonemeInventory& inv,
                    const Priors& priors, int feat_dim, uint64_t seed);
  Matrix embed(const Matrix& x) const { return context_embed(x, spec.context); }
  std::vector<TensorRef> tensors_fb() { return fb.net.tensors("fb"); }
  std::vector<TensorRef> tensors_fp() { return fp.net.tensors("fp"); }
  std::vector<TensorRef> tensors_fh();
};

// ---- boundary detector ----

BoundaryPosterior boundary_posterior(BoundaryDetector& fb, const Matrix& xwin);

// Beta-Bernoulli likelihood of the alignment targets plus the weighted KL to
// the Beta prior, expectations in closed form. Accumulates gradients into the
// net when with_grad is set.
double loss_boundary(BoundaryDetector& fb, const Matrix& xwin,
                     const std::vector<uint8_t>& target, const Priors& priors,
                     double lambda_b, const Vector& row_w, bool with_grad);

// ---- phoneme estimator ----

Matrix phoneme_posterior(PhonemeEstimator& fp, const Matrix& xwin);

double loss_phoneme(PhonemeEstimator& fp, const Matrix& xwin,
                    const std::vector<int>& target, const Vector& row_w,
                    bool with_grad);

std::vector<int> argmax_rows(const Matrix& m);

// ---- speech generator ----

struct EncoderOut {
  Matrix mean, var;  // frames x latent
  Matrix raw;        // cached head output for the backward chain
};

EncoderOut encoder_forward(SpeechGenerator& g, const Matrix& xwin);

struct ComponentDraw {
  int hard_index = 0;  // selected mixture component
  Vector weights;      // selector output over all K components
  double scale = 0.0;  // the scalar the selector net produced
};

// Selector output for one frame: one-hot at the component determined by
// (phoneme, correctness), the mispronunciation variant drawn via
// Gumbel-softmax over the variant net's logits.
ComponentDraw component_weights(SpeechGenerator& g, const Vector& xwin_row,
                                int phoneme, bool mismatch, Rng& rng);

// Per-frame hard assignments the generator losses condition on.
struct FhTargets {
  std::vector<int> phoneme;
  std::vector<uint8_t> mismatch;
};

// Sampled noise consumed by the generator losses; frozen per training step so
// the losses are deterministic functions of the parameters.
struct FhDraws {
  Matrix eps;                // frames x latent, reparameterization noise
  std::vector<int> variant;  // 1..n_variants on mismatch frames, 0 elsewhere
};

FhDraws draw_fh_noise(SpeechGenerator& g, const Matrix& xwin,
                      const FhTargets& targets, Rng& rng);

struct FhLossParts {
  double recon = 0.0;    // negative reconstruction ELBO
  double correct = 0.0;  // correctness NLL
  double total(double lambda_l) const { return recon + lambda_l * correct; }
};

// Reconstruction loss (one reparameterized sample, selector-weighted mixture
// KL) and correctness NLL, sharing a single encoder pass. Gradients cover the
// encoder, decoder, mixture table, and variant net.
FhLossParts fh_losses(SpeechGenerator& g, const Matrix& xwin, const Matrix& x,
                      const FhTargets& targets, const FhDraws& draws,
                      const Priors& priors, const LossWeights& weights,
                      const Vector& row_w, bool do_recon, bool do_correct,
                      bool with_grad);

// Per-frame breakdown of the generator loss under the given assignments:
// reconstruction NLL plus the weighted mixture KL plus lambda_l times the
// correctness NLL, one entry per frame, no gradients. Summing the vector
// reproduces fh_losses' total under unit row weights.
Vector fh_frame_losses(SpeechGenerator& g, const Matrix& xwin, const Matrix& x,
                       const FhTargets& targets, const FhDraws& draws,
                       const Priors& priors, const LossWeights& weights);

// Backpropagates an externally supplied gradient on the per-frame correctness
// log-odds through the variant net, mixture table, and encoder. Score-function
// estimators compute their own per-frame coefficients and inject them here.
void correctness_logit_backward(SpeechGenerator& g, const Matrix& xwin,
                                const std::vector<int>& phoneme,
                                const Vector& dlogit);

// q(pi_t = 1 | x_t, y_t, b_t) via Bayes over the generator's correct
// component against its variant mixture.
Vector correctness_posterior(SpeechGenerator& g, const Matrix& xwin,
                             const std::vector<int>& phoneme, double gamma_pi);

// Same posterior for several hypothesis phonemes at once: column u holds
// q(pi=1 | y = hypotheses[u]) for every frame.
Matrix correctness_posterior_multi(SpeechGenerator& g, const Matrix& xwin,
                                   const std::vector<int>& hypotheses,
                                   double gamma_pi);

// Sum over frames of coeff_t * H[pi_t]; with_grad accumulates d/dtheta of
// that weighted entropy into the generator.
double correctness_entropy(SpeechGenerator& g, const Matrix& xwin,
                           const std::vector<int>& phoneme, double gamma_pi,
                           const Vector& coeff, bool with_grad);

// ---- diagnostics ----

struct ElboParts {
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;  // sum of all KL terms, nonnegative
};

// Single-sample estimate of the joint objective under the factorized
// posterior. Diagnostic by default; the joint-optimization ablation descends
// its negative, scaled by grad_scale.
ElboParts joint_elbo(Model& m, const Utterance& utt, Rng& rng,
                     bool with_grad = false, double grad_scale = 1.0);

// Mixture means anchored at per-phoneme empirical encoder statistics under a
// flat-start alignment; variant components jittered, variances at one.
void init_gmm_from_alignment(Model& m, const std::vector<Utterance>& utts,
                             const std::vector<BoundarySeq>& alignments,
                             uint64_t seed);

}  // namespace mlvae
