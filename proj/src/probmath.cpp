#include "mlvae/probmath.hpp"

#include <cmath>
#include <numbers>

namespace mlvae {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

// Recurrence lift to x >= 6, then the asymptotic series; accurate to ~1e-12
// for positive arguments.
double digamma(double x) {
  if (!(x > 0.0)) throw ValidationError("digamma requires x > 0");
  double acc = 0.0;
  while (x < 6.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  double series = std::log(x) - 0.5 * inv;
  double p = inv2;
  series -= p * (1.0 / 12.0);
  p *= inv2;
  series += p * (1.0 / 120.0);
  p *= inv2;
  series -= p * (1.0 / 252.0);
  p *= inv2;
  series += p * (1.0 / 240.0);
  p *= inv2;
  series -= p * (1.0 / 132.0);
  p *= inv2;
  series += p * (691.0 / 32760.0);
  p *= inv2;
  series -= p * (1.0 / 12.0);
  return acc + series;
}

double trigamma(double x) {
  if (!(x > 0.0)) throw ValidationError("trigamma requires x > 0");
  double acc = 0.0;
  while (x < 6.0) {
    acc += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  double series = inv * (1.0 + 0.5 * inv);
  double p = inv * inv2;
  series += p * (1.0 / 6.0);
  p *= inv2;
  series -= p * (1.0 / 30.0);
  p *= inv2;
  series += p * (1.0 / 42.0);
  p *= inv2;
  series -= p * (1.0 / 30.0);
  p *= inv2;
  series += p * (5.0 / 66.0);
  p *= inv2;
  series -= p * (691.0 / 2730.0);
  p *= inv2;
  series += p * (7.0 / 6.0);
  return acc + series;
}

double log_beta_fn(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

double gaussian_logpdf(const Vector& x, const GaussianParams& p) {
  if (x.size() != p.mean.size() || x.size() != p.var.size())
    throw ValidationError("gaussian_logpdf dimension mismatch");
  double out = 0.0;
  for (Eigen::Index d = 0; d < x.size(); ++d) {
    const double v = p.var[d];
    const double diff = x[d] - p.mean[d];
    out += -0.5 * (kLog2Pi + std::log(v) + diff * diff / v);
  }
  return out;
}

double gaussian_kl(const GaussianParams& q, const GaussianParams& p) {
  if (q.mean.size() != p.mean.size() || q.var.size() != p.var.size())
    throw ValidationError("gaussian_kl dimension mismatch");
  double out = 0.0;
  for (Eigen::Index d = 0; d < q.mean.size(); ++d) {
    const double vq = q.var[d];
    const double vp = p.var[d];
    const double diff = q.mean[d] - p.mean[d];
    out += 0.5 * (std::log(vp / vq) + (vq + diff * diff) / vp - 1.0);
  }
  return out;
}

double beta_kl(const BetaParams& q, const BetaParams& p) {
  if (!(q.a > 0.0 && q.b > 0.0 && p.a > 0.0 && p.b > 0.0))
    throw ValidationError("beta_kl requires positive parameters");
  return log_beta_fn(p.a, p.b) - log_beta_fn(q.a, q.b) +
         (q.a - p.a) * digamma(q.a) + (q.b - p.b) * digamma(q.b) +
         (p.a + p.b - q.a - q.b) * digamma(q.a + q.b);
}

std::pair<double, double> beta_expect_log(const BetaParams& p) {
  if (!(p.a > 0.0 && p.b > 0.0))
    throw ValidationError("beta_expect_log requires positive parameters");
  const double dab = digamma(p.a + p.b);
  return {digamma(p.a) - dab, digamma(p.b) - dab};
}

Vector gumbel_softmax_sample(const Vector& logits, double temperature, Rng& rng) {
  if (!(temperature > 0.0))
    throw ValidationError("gumbel softmax temperature must be positive");
  Vector noisy(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    noisy[i] = (logits[i] + rng.gumbel()) / temperature;
  return softmax(noisy);
}

double log_sum_exp(const Vector& v) {
  if (v.size() == 0) throw ValidationError("log_sum_exp of empty vector");
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf stays -inf
  return m + std::log((v.array() - m).exp().sum());
}

Vector softmax(const Vector& v) {
  if (v.size() == 0) throw ValidationError("softmax of empty vector");
  const double m = v.maxCoeff();
  Vector e = (v.array() - m).exp();
  return e / e.sum();
}

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double inv_softplus(double y) {
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace mlvae
