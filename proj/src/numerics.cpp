#include "mtl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mtl/error.hpp"

namespace mtl {

Prob::Prob(double value) : value_(value) {
  if (!(value >= 0.0 && value <= 1.0)) {
    throw InvalidArgument("probability out of [0,1]: " + std::to_string(value));
  }
}

Prob sigmoid(double x) {
  if (!std::isfinite(x)) throw InvalidArgument("sigmoid of non-finite value");
  return Prob(sigmoid_unchecked(x));
}

double binary_entropy_unchecked(double p) noexcept {
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

double binary_entropy(Prob p) { return binary_entropy_unchecked(p.value()); }

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw ShapeError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw DegenerateVectorError("cosine_similarity: zero-norm vector");
  return std::clamp(dot / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

double js_bernoulli_unchecked(double p1, double p2) noexcept {
  const double mid = (p1 + p2) / 2.0;
  const double js =
      binary_entropy_unchecked(mid) -
      (binary_entropy_unchecked(p1) + binary_entropy_unchecked(p2)) / 2.0;
  // Concavity makes this non-negative; rounding can leave a few ulps below zero.
  return std::max(js, 0.0);
}

double js_bernoulli(Prob p1, Prob p2) { return js_bernoulli_unchecked(p1.value(), p2.value()); }

double logit(double p) noexcept {
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return std::log(p) - std::log1p(-p);
}

}  // namespace mtl
