#include "mlvae/models.hpp"

#include <cmath>

namespace mlvae {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Matrix softplus_mat(const Matrix& m) {
  return m.unaryExpr([](double v) { return softplus(v); });
}

Matrix sigmoid_mat(const Matrix& m) {
  return m.unaryExpr([](double v) { return sigmoid(v); });
}

int sample_categorical(const Vector& probs, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size() - 1);
}

// Input rows for the variant net: context window next to a phoneme one-hot.
Matrix variant_input(const SpeechGenerator& g, const Matrix& xwin,
                     const std::vector<int>& phoneme) {
  Matrix vin = Matrix::Zero(xwin.rows(), xwin.cols() + g.n_phonemes);
  vin.leftCols(xwin.cols()) = xwin;
  for (Eigen::Index t = 0; t < xwin.rows(); ++t) {
    int j = phoneme[t];
    if (j < 0 || j >= g.n_phonemes)
      throw ValidationError("phoneme index out of range");
    vin(t, xwin.cols() + j) = 1.0;
  }
  return vin;
}

// Log-likelihoods of the encoder mean under the correct component and under
// the variant mixture, with everything needed to push gradients back.
struct HypoLik {
  Vector l0, l1;
  Matrix omega;  // frames x variants
  Matrix resp;   // responsibilities within the variant mixture
  std::vector<int> phoneme;
};

HypoLik hypothesis_likelihoods(SpeechGenerator& g, const EncoderOut& enc,
                               const Matrix& xwin,
                               const std::vector<int>& phoneme) {
  const Eigen::Index t_n = xwin.rows();
  const int nv = g.n_variants;
  HypoLik hl;
  hl.phoneme = phoneme;
  Matrix gv = g.gmm_var();

  const Matrix& vlogits = g.variant_net.forward(variant_input(g, xwin, phoneme));
  hl.omega.resize(t_n, nv);
  for (Eigen::Index t = 0; t < t_n; ++t)
    hl.omega.row(t) = softmax(vlogits.row(t).transpose()).transpose();

  hl.l0.resize(t_n);
  hl.l1.resize(t_n);
  hl.resp.resize(t_n, nv);
  Vector lik(t_n);
  Matrix lg(t_n, nv);
  for (Eigen::Index t = 0; t < t_n; ++t) {
    const int c0 = g.component_index(phoneme[t], 0);
    double acc = 0.0;
    for (Eigen::Index d = 0; d < enc.mean.cols(); ++d) {
      const double v = gv(c0, d) + enc.var(t, d);
      const double diff = enc.mean(t, d) - g.gmm_mean(c0, d);
      acc += kLog2Pi + std::log(v) + diff * diff / v;
    }
    hl.l0[t] = -0.5 * acc;
    for (int k = 1; k <= nv; ++k) {
      const int ck = g.component_index(phoneme[t], k);
      double a = 0.0;
      for (Eigen::Index d = 0; d < enc.mean.cols(); ++d) {
        const double v = gv(ck, d) + enc.var(t, d);
        const double diff = enc.mean(t, d) - g.gmm_mean(ck, d);
        a += kLog2Pi + std::log(v) + diff * diff / v;
      }
      lg(t, k - 1) = std::log(hl.omega(t, k - 1)) - 0.5 * a;
    }
    hl.l1[t] = log_sum_exp(lg.row(t).transpose());
    for (int k = 0; k < nv; ++k)
      hl.resp(t, k) = std::exp(lg(t, k) - hl.l1[t]);
  }
  return hl;
}

struct EncGrads {
  Matrix dmean, dvar;
};

// Distributes d(loss)/d(l0) and d(loss)/d(l1) into the encoder outputs, the
// mixture table, and (optionally) the variant net. Must directly follow the
// hypothesis_likelihoods call that produced hl.
void hypothesis_backward(SpeechGenerator& g, const HypoLik& hl,
                         const EncoderOut& enc, const Vector& dl0,
                         const Vector& dl1, EncGrads& eg, bool variant_grad) {
  const Eigen::Index t_n = enc.mean.rows();
  const int nv = g.n_variants;
  Matrix gv = g.gmm_var();
  Matrix dvlogits = Matrix::Zero(t_n, nv);

  for (Eigen::Index t = 0; t < t_n; ++t) {
    for (int k = 0; k <= nv; ++k) {
      const double coeff = (k == 0) ? dl0[t] : dl1[t] * hl.resp(t, k - 1);
      if (coeff == 0.0) continue;
      const int c = g.component_index(hl.phoneme[t], k);
      for (Eigen::Index d = 0; d < enc.mean.cols(); ++d) {
        const double v = gv(c, d) + enc.var(t, d);
        const double diff = enc.mean(t, d) - g.gmm_mean(c, d);
        const double dmu = -diff / v;               // d lnN / d enc mean
        const double dv = 0.5 * (diff * diff / (v * v) - 1.0 / v);
        eg.dmean(t, d) += coeff * dmu;
        eg.dvar(t, d) += coeff * dv;
        g.g_gmm_mean(c, d) += coeff * (diff / v);
        g.g_gmm_rawvar(c, d) += coeff * dv * sigmoid(g.gmm_rawvar(c, d));
      }
    }
    if (variant_grad) {
      for (int k = 0; k < nv; ++k)
        dvlogits(t, k) = dl1[t] * (hl.resp(t, k) - hl.omega(t, k));
    }
  }
  if (variant_grad) g.variant_net.backward(dvlogits);
}

Vector posterior_logits(const HypoLik& hl, double gamma_pi) {
  const double prior_shift = std::log(gamma_pi) - std::log1p(-gamma_pi);
  return (hl.l1 - hl.l0).array() + prior_shift;
}

}  // namespace

void NetSpec::validate() const {
  if (context < 0) throw ValidationError("context window must be nonnegative");
  if (hidden.empty()) throw ValidationError("need at least one hidden layer");
  for (int h : hidden)
    if (h < 1) throw ValidationError("hidden sizes must be >= 1");
  if (latent_dim < 1) throw ValidationError("latent dim must be >= 1");
  if (n_variants < 1) throw ValidationError("need at least one variant");
}

int SpeechGenerator::component_index(int phoneme, int variant) const {
  if (phoneme < 0 || phoneme >= n_phonemes)
    throw ValidationError("phoneme index out of range");
  if (variant < 0 || variant > n_variants)
    throw ValidationError("variant index out of range");
  return phoneme * (n_variants + 1) + variant;
}

Matrix SpeechGenerator::gmm_var() const {
  return softplus_mat(gmm_rawvar).array() + kVarFloor;
}

void SpeechGenerator::zero_grad() {
  encoder.zero_grad();
  decoder.zero_grad();
  scale_net.zero_grad();
  variant_net.zero_grad();
  g_gmm_mean.setZero();
  g_gmm_rawvar.setZero();
}

Model Model::init(const NetSpec& spec, const PhonemeInventory& inv,
                  const Priors& priors, int feat_dim, uint64_t seed) {
  spec.validate();
  inv.validate();
  priors.validate();
  if (feat_dim < 1) throw ValidationError("feature dim must be >= 1");

  Model m;
  m.spec = spec;
  m.inv = inv;
  m.priors = priors;
  m.feat_dim = feat_dim;
  const int win = feat_dim * (2 * spec.context + 1);
  const int n = inv.size();

  auto dims = [&](int in, int out) {
    std::vector<int> d{in};
    d.insert(d.end(), spec.hidden.begin(), spec.hidden.end());
    d.push_back(out);
    return d;
  };

  {
    Rng rng(derive_seed(seed, "init-fb"));
    m.fb.net = Mlp::make(dims(win, 2), Act::Tanh, Act::Identity, rng);
  }
  {
    Rng rng(derive_seed(seed, "init-fp"));
    m.fp.net = Mlp::make(dims(win, n), Act::Tanh, Act::Identity, rng);
  }
  SpeechGenerator& g = m.fh;
  g.n_phonemes = n;
  g.n_variants = spec.n_variants;
  g.latent_dim = spec.latent_dim;
  {
    Rng rng(derive_seed(seed, "init-fh-enc"));
    g.encoder = Mlp::make(dims(win, 2 * spec.latent_dim), Act::Tanh,
                          Act::Identity, rng);
  }
  {
    Rng rng(derive_seed(seed, "init-fh-dec"));
    g.decoder = Mlp::make(dims(spec.latent_dim, 2 * feat_dim), Act::Tanh,
                          Act::Identity, rng);
  }
  {
    Rng rng(derive_seed(seed, "init-fh-scale"));
    g.scale_net = Mlp::make({win, spec.hidden.front(), 1}, Act::Sigmoid,
                            Act::Sigmoid, rng);
  }
  {
    Rng rng(derive_seed(seed, "init-fh-variant"));
    g.variant_net = Mlp::make(dims(win + n, spec.n_variants), Act::Tanh,
                              Act::Identity, rng);
  }
  const int k = g.components();
  g.gmm_mean = Matrix::Zero(k, spec.latent_dim);
  g.gmm_rawvar =
      Matrix::Constant(k, spec.latent_dim, inv_softplus(1.0 - kVarFloor));
  g.g_gmm_mean = Matrix::Zero(k, spec.latent_dim);
  g.g_gmm_rawvar = Matrix::Zero(k, spec.latent_dim);
  return m;
}

std::vector<TensorRef> Model::tensors_fh() {
  std::vector<TensorRef> out = fh.encoder.tensors("fh.enc");
  auto dec = fh.decoder.tensors("fh.dec");
  out.insert(out.end(), dec.begin(), dec.end());
  out.push_back({"fh.gmm.mean", fh.gmm_mean.data(), fh.g_gmm_mean.data(),
                 fh.gmm_mean.size()});
  out.push_back({"fh.gmm.rawvar", fh.gmm_rawvar.data(), fh.g_gmm_rawvar.data(),
                 fh.gmm_rawvar.size()});
  auto sc = fh.scale_net.tensors("fh.scale");
  out.insert(out.end(), sc.begin(), sc.end());
  auto va = fh.variant_net.tensors("fh.variant");
  out.insert(out.end(), va.begin(), va.end());
  return out;
}

BoundaryPosterior boundary_posterior(BoundaryDetector& fb, const Matrix& xwin) {
  const Matrix& raw = fb.net.forward(xwin);
  BoundaryPosterior bp;
  bp.alpha = softplus_mat(raw.col(0)).array() + kBetaHeadFloor;
  bp.beta = softplus_mat(raw.col(1)).array() + kBetaHeadFloor;
  bp.qb = bp.alpha.array() / (bp.alpha.array() + bp.beta.array());
  return bp;
}

double loss_boundary(BoundaryDetector& fb, const Matrix& xwin,
                     const std::vector<uint8_t>& target, const Priors& priors,
                     double lambda_b, const Vector& row_w, bool with_grad) {
  const Eigen::Index t_n = xwin.rows();
  if (static_cast<Eigen::Index>(target.size()) != t_n ||
      row_w.size() != t_n)
    throw ValidationError("boundary target length mismatch");
  priors.validate();

  const Matrix& raw = fb.net.forward(xwin);
  Matrix draw = Matrix::Zero(t_n, 2);
  double loss = 0.0;
  const double a0 = priors.alpha, b0 = priors.beta;
  const double lb0 = log_beta_fn(a0, b0);
  for (Eigen::Index t = 0; t < t_n; ++t) {
    const double a = softplus(raw(t, 0)) + kBetaHeadFloor;
    const double b = softplus(raw(t, 1)) + kBetaHeadFloor;
    const double pa = digamma(a), pb = digamma(b), pab = digamma(a + b);
    const double bt = target[t] ? 1.0 : 0.0;
    const double expect = bt * (pa - pab) + (1.0 - bt) * (pb - pab);
    const double kl = lb0 - log_beta_fn(a, b) + (a - a0) * pa + (b - b0) * pb +
                      (a0 + b0 - a - b) * pab;
    loss += row_w[t] * (-expect + lambda_b * kl);
    if (with_grad) {
      const double ta = trigamma(a), tb = trigamma(b), tab = trigamma(a + b);
      const double de_da = bt * (ta - tab) + (1.0 - bt) * (-tab);
      const double de_db = bt * (-tab) + (1.0 - bt) * (tb - tab);
      const double dkl_da = (a - a0) * ta + (a0 + b0 - a - b) * tab;
      const double dkl_db = (b - b0) * tb + (a0 + b0 - a - b) * tab;
      draw(t, 0) = row_w[t] * (-de_da + lambda_b * dkl_da) * sigmoid(raw(t, 0));
      draw(t, 1) = row_w[t] * (-de_db + lambda_b * dkl_db) * sigmoid(raw(t, 1));
    }
  }
  if (with_grad) fb.net.backward(draw);
  return loss;
}

Matrix phoneme_posterior(PhonemeEstimator& fp, const Matrix& xwin) {
  const Matrix& logits = fp.net.forward(xwin);
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t)
    out.row(t) = softmax(logits.row(t).transpose()).transpose();
  return out;
}

double loss_phoneme(PhonemeEstimator& fp, const Matrix& xwin,
                    const std::vector<int>& target, const Vector& row_w,
                    bool with_grad) {
  const Eigen::Index t_n = xwin.rows();
  if (static_cast<Eigen::Index>(target.size()) != t_n || row_w.size() != t_n)
    throw ValidationError("phoneme target length mismatch");
  const Matrix& logits = fp.net.forward(xwin);
  Matrix dlogits;
  if (with_grad) dlogits.resize(t_n, logits.cols());
  double loss = 0.0;
  for (Eigen::Index t = 0; t < t_n; ++t) {
    if (target[t] < 0 || target[t] >= logits.cols())
      throw ValidationError("phoneme target out of range");
    Vector row = logits.row(t).transpose();
    const double lse = log_sum_exp(row);
    loss += row_w[t] * (lse - row[target[t]]);
    if (with_grad) {
      Vector q = (row.array() - lse).exp();
      q[target[t]] -= 1.0;
      dlogits.row(t) = (row_w[t] * q).transpose();
    }
  }
  if (with_grad) fp.net.backward(dlogits);
  return loss;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    Eigen::Index arg;
    m.row(t).maxCoeff(&arg);
    out[t] = static_cast<int>(arg);
  }
  return out;
}

EncoderOut encoder_forward(SpeechGenerator& g, const Matrix& xwin) {
  EncoderOut enc;
  enc.raw = g.encoder.forward(xwin);
  const Eigen::Index dh = g.latent_dim;
  enc.mean = enc.raw.leftCols(dh);
  enc.var = softplus_mat(enc.raw.rightCols(dh)).array() + kVarFloor;
  return enc;
}

ComponentDraw component_weights(SpeechGenerator& g, const Vector& xwin_row,
                                int phoneme, bool mismatch, Rng& rng) {
  ComponentDraw out;
  Matrix row = xwin_row.transpose();
  out.scale = g.scale_net.forward(row)(0, 0);
  int variant = 0;
  if (mismatch) {
    std::vector<int> ph{phoneme};
    const Matrix& logits = g.variant_net.forward(variant_input(g, row, ph));
    Vector s = gumbel_softmax_sample(logits.row(0).transpose(), 1.0, rng);
    Eigen::Index arg;
    s.maxCoeff(&arg);
    variant = static_cast<int>(arg) + 1;
  }
  out.hard_index = g.component_index(phoneme, variant);
  Vector logits = Vector::Constant(g.components(), out.scale * kSelectorEps);
  logits[out.hard_index] += 1.0;
  out.weights = softmax(logits);
  return out;
}

FhDraws draw_fh_noise(SpeechGenerator& g, const Matrix& xwin,
                      const FhTargets& targets, Rng& rng) {
  const Eigen::Index t_n = xwin.rows();
  if (targets.phoneme.size() != static_cast<size_t>(t_n) ||
      targets.mismatch.size() != static_cast<size_t>(t_n))
    throw ValidationError("target length mismatch");
  FhDraws draws;
  draws.eps.resize(t_n, g.latent_dim);
  draws.variant.assign(t_n, 0);
  const Matrix& logits =
      g.variant_net.forward(variant_input(g, xwin, targets.phoneme));
  for (Eigen::Index t = 0; t < t_n; ++t) {
    for (int d = 0; d < g.latent_dim; ++d) draws.eps(t, d) = rng.normal();
    if (targets.mismatch[t]) {
      Vector noisy = logits.row(t).transpose();
      for (Eigen::Index k = 0; k < noisy.size(); ++k) noisy[k] += rng.gumbel();
      Eigen::Index arg;
      noisy.maxCoeff(&arg);
      draws.variant[t] = static_cast<int>(arg) + 1;
    }
  }
  return draws;
}

FhLossParts fh_losses(SpeechGenerator& g, const Matrix& xwin, const Matrix& x,
                      const FhTargets& targets, const FhDraws& draws,
                      const Priors& priors, const LossWeights& weights,
                      const Vector& row_w, bool do_recon, bool do_correct,
                      bool with_grad) {
  const Eigen::Index t_n = xwin.rows();
  const Eigen::Index dh = g.latent_dim;
  const Eigen::Index df = x.cols();
  if (x.rows() != t_n || row_w.size() != t_n)
    throw ValidationError("fh loss shape mismatch");

  EncoderOut enc = encoder_forward(g, xwin);
  EncGrads eg{Matrix::Zero(t_n, dh), Matrix::Zero(t_n, dh)};
  FhLossParts parts;

  if (do_recon) {
    Matrix sd = enc.var.array().sqrt();
    Matrix h = enc.mean + sd.cwiseProduct(draws.eps);
    const Matrix& draw_out = g.decoder.forward(h);
    Matrix dmu = draw_out.leftCols(df);
    Matrix dvar = softplus_mat(draw_out.rightCols(df)).array() + kVarFloor;

    // frame negative log-likelihood of the observed features
    Vector nll(t_n);
    for (Eigen::Index t = 0; t < t_n; ++t) {
      double acc = 0.0;
      for (Eigen::Index d = 0; d < df; ++d) {
        const double diff = x(t, d) - dmu(t, d);
        acc += kLog2Pi + std::log(dvar(t, d)) + diff * diff / dvar(t, d);
      }
      nll[t] = 0.5 * acc;
    }

    // selector-weighted mixture KL; the selector softmax puts e/(e+K-1) on
    // the chosen component and 1/(e+K-1) elsewhere (the scalar term shifts
    // all logits equally, so it cancels and contributes no gradient)
    const int kc = g.components();
    const double w_other = 1.0 / (std::exp(1.0) + kc - 1);
    const double w_sel = std::exp(1.0) / (std::exp(1.0) + kc - 1);
    Matrix gv = g.gmm_var();
    Vector lnve_sum = enc.var.array().log().matrix().rowwise().sum();
    Matrix klk(t_n, kc);
    for (int k = 0; k < kc; ++k) {
      double lnvk_sum = 0.0;
      for (Eigen::Index d = 0; d < dh; ++d) lnvk_sum += std::log(gv(k, d));
      for (Eigen::Index t = 0; t < t_n; ++t) {
        double acc = lnvk_sum - lnve_sum[t] - dh;
        for (Eigen::Index d = 0; d < dh; ++d) {
          const double diff = enc.mean(t, d) - g.gmm_mean(k, d);
          acc += (enc.var(t, d) + diff * diff) / gv(k, d);
        }
        klk(t, k) = 0.5 * acc;
      }
    }
    std::vector<int> sel(t_n);
    for (Eigen::Index t = 0; t < t_n; ++t)
      sel[t] = g.component_index(targets.phoneme[t], draws.variant[t]);
    for (Eigen::Index t = 0; t < t_n; ++t) {
      const double klmix = w_other * klk.row(t).sum() +
                           (w_sel - w_other) * klk(t, sel[t]);
      parts.recon += row_w[t] * (nll[t] + weights.lambda_r * klmix);
    }

    if (with_grad) {
      Matrix ddec(t_n, 2 * df);
      for (Eigen::Index t = 0; t < t_n; ++t) {
        for (Eigen::Index d = 0; d < df; ++d) {
          const double diff = dmu(t, d) - x(t, d);
          ddec(t, d) = row_w[t] * diff / dvar(t, d);
          const double dv = 0.5 * row_w[t] *
                            (1.0 / dvar(t, d) - diff * diff / (dvar(t, d) * dvar(t, d)));
          ddec(t, df + d) = dv * sigmoid(draw_out(t, df + d));
        }
      }
      Matrix dho = g.decoder.backward_to_input(ddec);
      eg.dmean += dho;
      eg.dvar += (dho.array() * draws.eps.array() / (2.0 * sd.array())).matrix();

      for (int k = 0; k < kc; ++k) {
        for (Eigen::Index t = 0; t < t_n; ++t) {
          const double wk = w_other + ((sel[t] == k) ? (w_sel - w_other) : 0.0);
          const double coeff = weights.lambda_r * row_w[t] * wk;
          for (Eigen::Index d = 0; d < dh; ++d) {
            const double vk = gv(k, d);
            const double diff = enc.mean(t, d) - g.gmm_mean(k, d);
            eg.dmean(t, d) += coeff * diff / vk;
            eg.dvar(t, d) += coeff * 0.5 * (1.0 / vk - 1.0 / enc.var(t, d));
            g.g_gmm_mean(k, d) += coeff * (-diff / vk);
            g.g_gmm_rawvar(k, d) +=
                coeff * 0.5 * (1.0 / vk - (enc.var(t, d) + diff * diff) / (vk * vk)) *
                sigmoid(g.gmm_rawvar(k, d));
          }
        }
      }
    }
  }

  if (do_correct) {
    HypoLik hl = hypothesis_likelihoods(g, enc, xwin, targets.phoneme);
    Vector gpost = posterior_logits(hl, priors.gamma_pi);
    Vector dg(t_n);
    for (Eigen::Index t = 0; t < t_n; ++t) {
      const double q1 = sigmoid(gpost[t]);
      const bool hit = targets.mismatch[t] != 0;
      parts.correct += row_w[t] * (hit ? softplus(-gpost[t]) : softplus(gpost[t]));
      dg[t] = weights.lambda_l * row_w[t] * (q1 - (hit ? 1.0 : 0.0));
    }
    if (with_grad) {
      Vector dl0 = -dg;
      hypothesis_backward(g, hl, enc, dl0, dg, eg, true);
    }
  }

  if (with_grad) {
    Matrix denc(t_n, 2 * dh);
    denc.leftCols(dh) = eg.dmean;
    denc.rightCols(dh) =
        (eg.dvar.array() * sigmoid_mat(enc.raw.rightCols(dh)).array()).matrix();
    g.encoder.backward(denc);
  }
  return parts;
}

Vector fh_frame_losses(SpeechGenerator& g, const Matrix& xwin, const Matrix& x,
                       const FhTargets& targets, const FhDraws& draws,
                       const Priors& priors, const LossWeights& weights) {
  const Eigen::Index t_n = xwin.rows();
  const Eigen::Index dh = g.latent_dim;
  const Eigen::Index df = x.cols();
  if (x.rows() != t_n || targets.phoneme.size() != static_cast<size_t>(t_n) ||
      targets.mismatch.size() != static_cast<size_t>(t_n))
    throw ValidationError("fh loss shape mismatch");

  EncoderOut enc = encoder_forward(g, xwin);
  Matrix sd = enc.var.array().sqrt();
  Matrix h = enc.mean + sd.cwiseProduct(draws.eps);
  const Matrix& draw_out = g.decoder.forward(h);
  Matrix dmu = draw_out.leftCols(df);
  Matrix dvar = softplus_mat(draw_out.rightCols(df)).array() + kVarFloor;

  const int kc = g.components();
  const double w_other = 1.0 / (std::exp(1.0) + kc - 1);
  const double w_sel = std::exp(1.0) / (std::exp(1.0) + kc - 1);
  Matrix gv = g.gmm_var();
  Vector lnve_sum = enc.var.array().log().matrix().rowwise().sum();
  Matrix klk(t_n, kc);
  for (int k = 0; k < kc; ++k) {
    double lnvk_sum = 0.0;
    for (Eigen::Index d = 0; d < dh; ++d) lnvk_sum += std::log(gv(k, d));
    for (Eigen::Index t = 0; t < t_n; ++t) {
      double acc = lnvk_sum - lnve_sum[t] - dh;
      for (Eigen::Index d = 0; d < dh; ++d) {
        const double diff = enc.mean(t, d) - g.gmm_mean(k, d);
        acc += (enc.var(t, d) + diff * diff) / gv(k, d);
      }
      klk(t, k) = 0.5 * acc;
    }
  }

  HypoLik hl = hypothesis_likelihoods(g, enc, xwin, targets.phoneme);
  Vector gpost = posterior_logits(hl, priors.gamma_pi);

  Vector out(t_n);
  for (Eigen::Index t = 0; t < t_n; ++t) {
    double acc = 0.0;
    for (Eigen::Index d = 0; d < df; ++d) {
      const double diff = x(t, d) - dmu(t, d);
      acc += kLog2Pi + std::log(dvar(t, d)) + diff * diff / dvar(t, d);
    }
    const double nll = 0.5 * acc;
    const int sel = g.component_index(targets.phoneme[t], draws.variant[t]);
    const double klmix =
        w_other * klk.row(t).sum() + (w_sel - w_other) * klk(t, sel);
    const double correct =
        targets.mismatch[t] ? softplus(-gpost[t]) : softplus(gpost[t]);
    out[t] = nll + weights.lambda_r * klmix + weights.lambda_l * correct;
  }
  return out;
}

void correctness_logit_backward(SpeechGenerator& g, const Matrix& xwin,
                                const std::vector<int>& phoneme,
                                const Vector& dlogit) {
  const Eigen::Index t_n = xwin.rows();
  const Eigen::Index dh = g.latent_dim;
  if (phoneme.size() != static_cast<size_t>(t_n) || dlogit.size() != t_n)
    throw ValidationError("logit gradient shape mismatch");

  EncoderOut enc = encoder_forward(g, xwin);
  HypoLik hl = hypothesis_likelihoods(g, enc, xwin, phoneme);
  EncGrads eg{Matrix::Zero(t_n, dh), Matrix::Zero(t_n, dh)};
  Vector dl0 = -dlogit;
  hypothesis_backward(g, hl, enc, dl0, dlogit, eg, true);

  Matrix denc(t_n, 2 * dh);
  denc.leftCols(dh) = eg.dmean;
  denc.rightCols(dh) =
      (eg.dvar.array() * sigmoid_mat(enc.raw.rightCols(dh)).array()).matrix();
  g.encoder.backward(denc);
}

Vector correctness_posterior(SpeechGenerator& g, const Matrix& xwin,
                             const std::vector<int>& phoneme, double gamma_pi) {
  if (phoneme.size() != static_cast<size_t>(xwin.rows()))
    throw ValidationError("hypothesis length mismatch");
  EncoderOut enc = encoder_forward(g, xwin);
  HypoLik hl = hypothesis_likelihoods(g, enc, xwin, phoneme);
  Vector gpost = posterior_logits(hl, gamma_pi);
  return gpost.unaryExpr([](double v) { return sigmoid(v); });
}

Matrix correctness_posterior_multi(SpeechGenerator& g, const Matrix& xwin,
                                   const std::vector<int>& hypotheses,
                                   double gamma_pi) {
  EncoderOut enc = encoder_forward(g, xwin);
  Matrix out(xwin.rows(), static_cast<Eigen::Index>(hypotheses.size()));
  for (size_t u = 0; u < hypotheses.size(); ++u) {
    std::vector<int> ph(xwin.rows(), hypotheses[u]);
    HypoLik hl = hypothesis_likelihoods(g, enc, xwin, ph);
    Vector gpost = posterior_logits(hl, gamma_pi);
    out.col(static_cast<Eigen::Index>(u)) =
        gpost.unaryExpr([](double v) { return sigmoid(v); });
  }
  return out;
}

double correctness_entropy(SpeechGenerator& g, const Matrix& xwin,
                           const std::vector<int>& phoneme, double gamma_pi,
                           const Vector& coeff, bool with_grad) {
  const Eigen::Index t_n = xwin.rows();
  if (coeff.size() != t_n) throw ValidationError("entropy coeff length mismatch");
  EncoderOut enc = encoder_forward(g, xwin);
  HypoLik hl = hypothesis_likelihoods(g, enc, xwin, phoneme);
  Vector gpost = posterior_logits(hl, gamma_pi);
  double out = 0.0;
  Vector dg = Vector::Zero(t_n);
  for (Eigen::Index t = 0; t < t_n; ++t) {
    const double q1 = sigmoid(gpost[t]);
    const double q0 = 1.0 - q1;
    double h = 0.0;
    if (q1 > 0.0 && q0 > 0.0) h = -q1 * std::log(q1) - q0 * std::log(q0);
    out += coeff[t] * h;
    // dH/dg with g the posterior log-odds
    if (with_grad && q1 > 0.0 && q0 > 0.0)
      dg[t] = coeff[t] * q1 * q0 * (std::log(q0) - std::log(q1));
  }
  if (with_grad) {
    EncGrads eg{Matrix::Zero(t_n, g.latent_dim), Matrix::Zero(t_n, g.latent_dim)};
    Vector dl0 = -dg;
    hypothesis_backward(g, hl, enc, dl0, dg, eg, true);
    Matrix denc(t_n, 2 * g.latent_dim);
    denc.leftCols(g.latent_dim) = eg.dmean;
    denc.rightCols(g.latent_dim) =
        (eg.dvar.array() *
         sigmoid_mat(enc.raw.rightCols(g.latent_dim)).array())
            .matrix();
    g.encoder.backward(denc);
  }
  return out;
}

ElboParts joint_elbo(Model& m, const Utterance& utt, Rng& rng, bool with_grad,
                     double grad_scale) {
  SpeechGenerator& g = m.fh;
  const Matrix xwin = m.embed(utt.x);
  const Eigen::Index t_n = xwin.rows();
  const Eigen::Index dh = g.latent_dim;
  const Eigen::Index df = utt.x.cols();

  Matrix qy = phoneme_posterior(m.fp, xwin);
  BoundaryPosterior bp = boundary_posterior(m.fb, xwin);
  EncoderOut enc = encoder_forward(g, xwin);

  // sampled hard assignments under the factorized posterior
  std::vector<int> ys(t_n);
  for (Eigen::Index t = 0; t < t_n; ++t)
    ys[t] = sample_categorical(qy.row(t).transpose(), rng);

  HypoLik hl = hypothesis_likelihoods(g, enc, xwin, ys);
  Vector gpost = posterior_logits(hl, m.priors.gamma_pi);
  std::vector<uint8_t> pis(t_n);
  for (Eigen::Index t = 0; t < t_n; ++t)
    pis[t] = rng.bernoulli(sigmoid(gpost[t])) ? 1 : 0;

  std::vector<int> zsel(t_n);
  const Matrix& vlogits_all = g.variant_net.layers.back().y;  // cached by hl
  for (Eigen::Index t = 0; t < t_n; ++t) {
    int variant = 0;
    if (pis[t]) {
      Vector noisy = vlogits_all.row(t).transpose();
      for (Eigen::Index k = 0; k < noisy.size(); ++k) noisy[k] += rng.gumbel();
      Eigen::Index arg;
      noisy.maxCoeff(&arg);
      variant = static_cast<int>(arg) + 1;
    }
    zsel[t] = g.component_index(ys[t], variant);
  }

  Matrix eps(t_n, dh);
  for (Eigen::Index t = 0; t < t_n; ++t)
    for (Eigen::Index d = 0; d < dh; ++d) eps(t, d) = rng.normal();

  Matrix sd = enc.var.array().sqrt();
  Matrix h = enc.mean + sd.cwiseProduct(eps);
  const Matrix& draw_out = g.decoder.forward(h);
  Matrix dmu = draw_out.leftCols(df);
  Matrix dvar = softplus_mat(draw_out.rightCols(df)).array() + kVarFloor;

  // The sampled component's posterior is taken equal to its conditional
  // prior, so the z terms cancel and the bound decomposes into a sampled
  // reconstruction term minus closed-form KLs.
  ElboParts parts;
  Matrix gv = g.gmm_var();
  const double pb = m.priors.alpha / (m.priors.alpha + m.priors.beta);
  const double lpb1 = std::log(pb), lpb0 = std::log1p(-pb);
  const double lg1 = std::log(m.priors.gamma_pi);
  const double lg0 = std::log1p(-m.priors.gamma_pi);

  Vector kl_h(t_n), kl_y(t_n), kl_b(t_n), kl_pi(t_n), recon(t_n);
  for (Eigen::Index t = 0; t < t_n; ++t) {
    double acc = 0.0;
    for (Eigen::Index d = 0; d < df; ++d) {
      const double diff = utt.x(t, d) - dmu(t, d);
      acc += kLog2Pi + std::log(dvar(t, d)) + diff * diff / dvar(t, d);
    }
    recon[t] = -0.5 * acc;

    double klh = 0.0;
    const int z = zsel[t];
    for (Eigen::Index d = 0; d < dh; ++d) {
      const double diff = enc.mean(t, d) - g.gmm_mean(z, d);
      klh += 0.5 * (std::log(gv(z, d) / enc.var(t, d)) +
                    (enc.var(t, d) + diff * diff) / gv(z, d) - 1.0);
    }
    kl_h[t] = klh;

    double kly = 0.0;
    for (Eigen::Index j = 0; j < qy.cols(); ++j)
      kly += qy(t, j) * (std::log(qy(t, j) + 1e-300) - std::log(m.inv.zeta[j]));
    kl_y[t] = std::max(0.0, kly);

    const double qb = bp.qb[t];
    kl_b[t] = qb * (std::log(qb) - lpb1) + (1.0 - qb) * (std::log1p(-qb) - lpb0);

    const double q1 = sigmoid(gpost[t]);
    kl_pi[t] = q1 * (std::log(q1 + 1e-300) - lg1) +
               (1.0 - q1) * (std::log1p(-q1 + 1e-300) - lg0);

    parts.recon += recon[t];
    parts.kl += kl_h[t] + kl_y[t] + kl_b[t] + kl_pi[t];
  }
  parts.elbo = parts.recon - parts.kl;

  if (!with_grad) return parts;

  // descend -elbo: reconstruction NLL plus all KLs
  EncGrads eg{Matrix::Zero(t_n, dh), Matrix::Zero(t_n, dh)};

  Matrix ddec(t_n, 2 * df);
  for (Eigen::Index t = 0; t < t_n; ++t) {
    for (Eigen::Index d = 0; d < df; ++d) {
      const double diff = dmu(t, d) - utt.x(t, d);
      ddec(t, d) = grad_scale * diff / dvar(t, d);
      const double dv = 0.5 * grad_scale *
                        (1.0 / dvar(t, d) - diff * diff / (dvar(t, d) * dvar(t, d)));
      ddec(t, df + d) = dv * sigmoid(draw_out(t, df + d));
    }
  }
  Matrix dho = g.decoder.backward_to_input(ddec);
  eg.dmean += dho;
  eg.dvar += (dho.array() * eps.array() / (2.0 * sd.array())).matrix();

  for (Eigen::Index t = 0; t < t_n; ++t) {
    const int z = zsel[t];
    for (Eigen::Index d = 0; d < dh; ++d) {
      const double vk = gv(z, d);
      const double diff = enc.mean(t, d) - g.gmm_mean(z, d);
      eg.dmean(t, d) += grad_scale * diff / vk;
      eg.dvar(t, d) += grad_scale * 0.5 * (1.0 / vk - 1.0 / enc.var(t, d));
      g.g_gmm_mean(z, d) += grad_scale * (-diff / vk);
      g.g_gmm_rawvar(z, d) +=
          grad_scale * 0.5 *
          (1.0 / vk - (enc.var(t, d) + diff * diff) / (vk * vk)) *
          sigmoid(g.gmm_rawvar(z, d));
    }
  }

  // KL(q(pi)||prior) through the posterior log-odds
  Vector dg_pi(t_n);
  for (Eigen::Index t = 0; t < t_n; ++t) {
    const double q1 = sigmoid(gpost[t]);
    const double dkl_dq = (std::log(q1 + 1e-300) - lg1) -
                          (std::log1p(-q1 + 1e-300) - lg0);
    dg_pi[t] = grad_scale * dkl_dq * q1 * (1.0 - q1);
  }
  {
    Vector dl0 = -dg_pi;
    hypothesis_backward(g, hl, enc, dl0, dg_pi, eg, true);
  }

  Matrix denc(t_n, 2 * dh);
  denc.leftCols(dh) = eg.dmean;
  denc.rightCols(dh) =
      (eg.dvar.array() * sigmoid_mat(enc.raw.rightCols(dh)).array()).matrix();
  g.encoder.backward(denc);

  // phoneme posterior KL
  {
    Matrix dlogits(t_n, qy.cols());
    for (Eigen::Index t = 0; t < t_n; ++t) {
      for (Eigen::Index j = 0; j < qy.cols(); ++j) {
        const double u = std::log(qy(t, j) + 1e-300) - std::log(m.inv.zeta[j]);
        dlogits(t, j) = grad_scale * qy(t, j) * (u - kl_y[t]);
      }
    }
    m.fp.net.backward(dlogits);
  }

  // boundary posterior KL through the Beta mean
  {
    const Matrix& raw = m.fb.net.layers.back().y;
    Matrix draw = Matrix::Zero(t_n, 2);
    for (Eigen::Index t = 0; t < t_n; ++t) {
      const double qb = bp.qb[t];
      const double dkl_dq = (std::log(qb) - lpb1) - (std::log1p(-qb) - lpb0);
      const double a = bp.alpha[t], b = bp.beta[t];
      const double denom = (a + b) * (a + b);
      draw(t, 0) = grad_scale * dkl_dq * (b / denom) * sigmoid(raw(t, 0));
      draw(t, 1) = grad_scale * dkl_dq * (-a / denom) * sigmoid(raw(t, 1));
    }
    m.fb.net.backward(draw);
  }

  return parts;
}

void init_gmm_from_alignment(Model& m, const std::vector<Utterance>& utts,
                             const std::vector<BoundarySeq>& alignments,
                             uint64_t seed) {
  if (utts.size() != alignments.size())
    throw ValidationError("alignment count mismatch");
  SpeechGenerator& g = m.fh;
  const int n = g.n_phonemes;
  Matrix sums = Matrix::Zero(n, g.latent_dim);
  Vector counts = Vector::Zero(n);
  for (size_t u = 0; u < utts.size(); ++u) {
    const Matrix xwin = m.embed(utts[u].x);
    EncoderOut enc = encoder_forward(g, xwin);
    std::vector<int> labels = expand_phonemes(utts[u].c, alignments[u]);
    for (Eigen::Index t = 0; t < enc.mean.rows(); ++t) {
      sums.row(labels[t]) += enc.mean.row(t);
      counts[labels[t]] += 1.0;
    }
  }
  Rng rng(derive_seed(seed, "gmm-init"));
  for (int j = 0; j < n; ++j) {
    Vector mean = Vector::Zero(g.latent_dim);
    if (counts[j] > 0) mean = (sums.row(j) / counts[j]).transpose();
    g.gmm_mean.row(g.component_index(j, 0)) = mean.transpose();
    for (int k = 1; k <= g.n_variants; ++k) {
      Vector jitter(g.latent_dim);
      for (Eigen::Index d = 0; d < jitter.size(); ++d) jitter[d] = rng.normal();
      g.gmm_mean.row(g.component_index(j, k)) = (mean + jitter).transpose();
    }
  }
  g.gmm_rawvar.setConstant(inv_softplus(1.0 - kVarFloor));
}

}  // namespace mlvae
