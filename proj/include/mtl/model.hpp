#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mtl/matrix.hpp"

namespace mtl {

enum class Activation : std::uint32_t { kTanh = 0, kIdentity = 1 };

// Fully connected layer: out = weight * in + bias, weight is out x in.
struct Dense {
  RealMatrix weight;
  std::vector<double> bias;

  Dense() = default;
  Dense(std::size_t in, std::size_t out) : weight(out, in), bias(out, 0.0) {}

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }
  std::size_t parameter_count() const noexcept { return weight.size() + bias.size(); }

  friend bool operator==(const Dense&, const Dense&) = default;
};

struct FeatureExtractor {
  std::vector<Dense> layers;
  Activation activation = Activation::kTanh;

  std::size_t input_dim() const noexcept { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t output_dim() const noexcept { return layers.empty() ? 0 : layers.back().out_dim(); }
  // input dim, then each layer's output dim
  std::vector<std::size_t> layer_dims() const;

  friend bool operator==(const FeatureExtractor&, const FeatureExtractor&) = default;
};

// One linear classifier per task on top of a view's features. Row j of
// head.weight is w_j and head.bias[j] is b_j.
struct ClassifierBank {
  int view_index = 1;
  Dense head;

  std::size_t task_count() const noexcept { return head.out_dim(); }
  std::size_t feature_dim() const noexcept { return head.in_dim(); }
  // [w_j, b_j]
  std::vector<double> augmented(std::size_t task) const;

  friend bool operator==(const ClassifierBank&, const ClassifierBank&) = default;
};

struct TwoViewModel {
  std::array<FeatureExtractor, 2> extractors;
  std::array<ClassifierBank, 2> banks;

  std::size_t task_count() const noexcept { return banks[0].task_count(); }
  std::size_t feature_dim() const noexcept { return banks[0].feature_dim(); }
  std::size_t input_dim() const noexcept { return extractors[0].input_dim(); }
  std::size_t parameter_count() const noexcept;

  // Throws ShapeError/InvalidArgument when views disagree on dims or a
  // parameter is not finite.
  void validate() const;

  friend bool operator==(const TwoViewModel&, const TwoViewModel&) = default;
};

struct ModelShape {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims{32};
  std::size_t feature_dim = 16;
  std::size_t task_count = 1;
  Activation activation = Activation::kTanh;
};

// Glorot-uniform weights, zero extractor biases, classifier biases in
// (-0.01, 0.01) so every augmented classifier vector is nonzero.
TwoViewModel make_model(const ModelShape& shape, std::uint64_t seed);

// Same layout as the model parameters, used for gradients and momentum.
struct ModelGradients {
  std::array<std::vector<Dense>, 2> extractors;
  std::array<Dense, 2> banks;

  static ModelGradients zeros_like(const TwoViewModel& model);
};

// Visits every Dense block in declaration order: extractor 1 layers,
// extractor 2 layers, bank 1, bank 2.
template <typename F>
void for_each_dense(TwoViewModel& m, F&& f) {
  for (auto& e : m.extractors)
    for (auto& l : e.layers) f(l);
  for (auto& b : m.banks) f(b.head);
}
template <typename F>
void for_each_dense(const TwoViewModel& m, F&& f) {
  for (const auto& e : m.extractors)
    for (const auto& l : e.layers) f(l);
  for (const auto& b : m.banks) f(b.head);
}
template <typename F>
void for_each_dense(ModelGradients& g, F&& f) {
  for (auto& e : g.extractors)
    for (auto& l : e) f(l);
  for (auto& b : g.banks) f(b);
}
template <typename F>
void for_each_dense(const ModelGradients& g, F&& f) {
  for (const auto& e : g.extractors)
    for (const auto& l : e) f(l);
  for (const auto& b : g.banks) f(b);
}

std::vector<double> flatten(const TwoViewModel& model);
void unflatten(std::span<const double> values, TwoViewModel& model);
std::vector<double> flatten(const ModelGradients& grads);

enum class Backend { kSerial, kParallel };

struct PredictionBatch {
  RealMatrix p1;
  RealMatrix p2;
  RealMatrix fused;
};

PredictionBatch forward(const TwoViewModel& model, const RealMatrix& features,
                        Backend backend = Backend::kParallel);

struct LossWeights {
  double mv = 1.0;
  double cr = 1.0;
  // Penalize |cos| instead of the signed cosine, so the optimum is exact
  // orthogonality rather than anti-alignment.
  bool mv_absolute = false;
};

struct LossBreakdown {
  double l_rec1 = 0.0;
  double l_rec2 = 0.0;
  double l_mv = 0.0;  // NaN when weights.mv == 0 and a classifier vector is zero
  double l_cr = 0.0;
  double total = 0.0;
  LossWeights weights;
};

// Recognition masks for view 1 and view 2.
using ViewMasks = std::array<BitMatrix, 2>;

double loss_multiview(const ClassifierBank& bank1, const ClassifierBank& bank2,
                      bool absolute = false);
double loss_coreg(const PredictionBatch& pred);
double loss_recognition(const RealMatrix& probs, const BitMatrix& labels, const BitMatrix& mask);

LossBreakdown total_loss(const TwoViewModel& model, const RealMatrix& features,
                         const BitMatrix& labels, const ViewMasks& masks,
                         const LossWeights& weights, Backend backend = Backend::kParallel);

struct GradientResult {
  LossBreakdown loss;
  ModelGradients grads;
};

GradientResult gradients(const TwoViewModel& model, const RealMatrix& features,
                         const BitMatrix& labels, const ViewMasks& masks,
                         const LossWeights& weights, Backend backend = Backend::kParallel);

// Flat little-endian parameter layout used inside checkpoint files.
std::vector<std::uint8_t> serialize_model(const TwoViewModel& model);
TwoViewModel deserialize_model(std::span<const std::uint8_t> bytes);

}  // namespace mtl
