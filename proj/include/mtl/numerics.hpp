#pragma once

#include <numbers>
#include <span>

namespace mtl {

// Entropy ceiling of a Bernoulli variable, in nats.
inline constexpr double kLn2 = std::numbers::ln2;

// Probabilities entering the log terms of the recognition loss are clamped
// to [kProbClamp, 1 - kProbClamp].
inline constexpr double kProbClamp = 1e-7;

// A probability in [0, 1]. Construction from anything else throws InvalidArgument.
class Prob {
 public:
  explicit Prob(double value);
  double value() const noexcept { return value_; }
  operator double() const noexcept { return value_; }

 private:
  double value_;
};

/// Logistic function, evaluated without overflow for any finite input.
Prob sigmoid(double x);

/// Unchecked sigmoid for hot loops; caller guarantees finite x.
inline double sigmoid_unchecked(double x) noexcept;

/// Bernoulli entropy in nats with 0 ln 0 = 0.
double binary_entropy(Prob p);
double binary_entropy_unchecked(double p) noexcept;

/// a.b / (|a| |b|). Throws DegenerateVectorError for a zero-norm argument.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Jensen-Shannon divergence between Bernoulli(p1) and Bernoulli(p2), in nats.
double js_bernoulli(Prob p1, Prob p2);
double js_bernoulli_unchecked(double p1, double p2) noexcept;

double logit(double p) noexcept;

}  // namespace mtl

#include <cmath>

inline double mtl::sigmoid_unchecked(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
