#pragma once

#include <utility>

#include "mlvae/core.hpp"
#include "mlvae/rng.hpp"

namespace mlvae {

// Floors applied everywhere a variance or probability feeds a log or a
// division. Keeps EM away from degenerate components and the decoder's
// likelihood ratios finite.
inline constexpr double kVarFloor = 1e-4;
inline constexpr double kProbFloor = 1e-10;

struct GaussianParams {
  Vector mean;
  Vector var;  // diagonal
};

struct BetaParams {
  double a = 1.0;
  double b = 1.0;
};

double digamma(double x);
double trigamma(double x);
double log_beta_fn(double a, double b);

double gaussian_logpdf(const Vector& x, const GaussianParams& p);
double gaussian_kl(const GaussianParams& q, const GaussianParams& p);

double beta_kl(const BetaParams& q, const BetaParams& p);
// (E[ln eta], E[ln(1-eta)]) under Beta(a, b).
std::pair<double, double> beta_expect_log(const BetaParams& p);

Vector gumbel_softmax_sample(const Vector& logits, double temperature, Rng& rng);

double log_sum_exp(const Vector& v);
Vector softmax(const Vector& v);
double softplus(double x);
double inv_softplus(double y);
double sigmoid(double x);

}  // namespace mlvae
