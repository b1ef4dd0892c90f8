#include "mtl/model.hpp"

#include <cmath>
#include <limits>

#include "mtl/binary_io.hpp"
#include "mtl/kernels.hpp"
#include "mtl/numerics.hpp"
#include "mtl/rng.hpp"

namespace mtl {

std::vector<std::size_t> FeatureExtractor::layer_dims() const {
  std::vector<std::size_t> dims;
  if (layers.empty()) return dims;
  dims.push_back(layers.front().in_dim());
  for (const auto& l : layers) dims.push_back(l.out_dim());
  return dims;
}

std::vector<double> ClassifierBank::augmented(std::size_t task) const {
  const auto w = head.weight.row(task);
  std::vector<double> out(w.begin(), w.end());
  out.push_back(head.bias[task]);
  return out;
}

std::size_t TwoViewModel::parameter_count() const noexcept {
  std::size_t n = 0;
  for_each_dense(*this, [&](const Dense& d) { n += d.parameter_count(); });
  return n;
}

void TwoViewModel::validate() const {
  for (std::size_t v = 0; v < 2; ++v) {
    const auto& ext = extractors[v];
    if (ext.layers.empty()) throw ShapeError("extractor has no layers");
    for (std::size_t l = 0; l < ext.layers.size(); ++l) {
      const auto& layer = ext.layers[l];
      if (layer.bias.size() != layer.out_dim()) throw ShapeError("layer bias size mismatch");
      if (l > 0 && layer.in_dim() != ext.layers[l - 1].out_dim()) {
        throw ShapeError("extractor layer dims do not chain");
      }
    }
    if (banks[v].head.bias.size() != banks[v].task_count()) {
      throw ShapeError("bank bias size mismatch");
    }
    if (banks[v].feature_dim() != ext.output_dim()) {
      throw ShapeError("bank input dim != extractor output dim");
    }
  }
  if (extractors[0].input_dim() != extractors[1].input_dim()) {
    throw ShapeError("views disagree on input dim");
  }
  if (banks[0].task_count() != banks[1].task_count() ||
      banks[0].feature_dim() != banks[1].feature_dim()) {
    throw ShapeError("banks disagree on task count or feature dim");
  }
  for_each_dense(*this, [](const Dense& d) {
    for (double v : d.weight.data())
      if (!std::isfinite(v)) throw InvalidArgument("non-finite model parameter");
    for (double v : d.bias)
      if (!std::isfinite(v)) throw InvalidArgument("non-finite model parameter");
  });
}

TwoViewModel make_model(const ModelShape& shape, std::uint64_t seed) {
  if (shape.input_dim == 0 || shape.feature_dim == 0 || shape.task_count == 0) {
    throw InvalidArgument("model dims must be positive");
  }
  std::vector<std::size_t> dims{shape.input_dim};
  dims.insert(dims.end(), shape.hidden_dims.begin(), shape.hidden_dims.end());
  dims.push_back(shape.feature_dim);
  for (auto d : dims)
    if (d == 0) throw InvalidArgument("model dims must be positive");

  auto glorot = [](Dense& layer, CounterRng& rng) {
    const double limit =
        std::sqrt(6.0 / static_cast<double>(layer.in_dim() + layer.out_dim()));
    for (double& w : layer.weight.data()) w = rng.uniform(-limit, limit);
  };

  TwoViewModel model;
  for (std::size_t v = 0; v < 2; ++v) {
    CounterRng rng = CounterRng::substream(seed, v + 1);
    auto& ext = model.extractors[v];
    ext.activation = shape.activation;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      Dense layer(dims[l], dims[l + 1]);
      glorot(layer, rng);
      ext.layers.push_back(std::move(layer));
    }
    auto& bank = model.banks[v];
    bank.view_index = static_cast<int>(v + 1);
    bank.head = Dense(shape.feature_dim, shape.task_count);
    glorot(bank.head, rng);
    for (double& b : bank.head.bias) {
      do {
        b = rng.uniform(-0.01, 0.01);
      } while (b == 0.0);
    }
  }
  return model;
}

ModelGradients ModelGradients::zeros_like(const TwoViewModel& model) {
  ModelGradients g;
  for (std::size_t v = 0; v < 2; ++v) {
    for (const auto& l : model.extractors[v].layers) g.extractors[v].emplace_back(l.in_dim(), l.out_dim());
    g.banks[v] = Dense(model.banks[v].feature_dim(), model.banks[v].task_count());
  }
  return g;
}

namespace {
template <typename M>
std::vector<double> flatten_impl(const M& m) {
  std::vector<double> out;
  for_each_dense(m, [&](const Dense& d) {
    out.insert(out.end(), d.weight.data().begin(), d.weight.data().end());
    out.insert(out.end(), d.bias.begin(), d.bias.end());
  });
  return out;
}
}  // namespace

std::vector<double> flatten(const TwoViewModel& model) { return flatten_impl(model); }
std::vector<double> flatten(const ModelGradients& grads) { return flatten_impl(grads); }

void unflatten(std::span<const double> values, TwoViewModel& model) {
  if (values.size() != model.parameter_count()) throw ShapeError("unflatten: size mismatch");
  std::size_t pos = 0;
  for_each_dense(model, [&](Dense& d) {
    for (double& w : d.weight.data()) w = values[pos++];
    for (double& b : d.bias) b = values[pos++];
  });
}

namespace {

void check_input(const TwoViewModel& model, const RealMatrix& features) {
  if (features.rows() == 0) throw ShapeError("forward: empty batch");
  if (features.cols() != model.input_dim()) {
    throw ShapeError("forward: feature width " + std::to_string(features.cols()) +
                     " != model input dim " + std::to_string(model.input_dim()));
  }
}

RealMatrix to_probs(const RealMatrix& logits) {
  RealMatrix p(logits.rows(), logits.cols());
  for (std::size_t k = 0; k < logits.size(); ++k) p.data()[k] = sigmoid_unchecked(logits.data()[k]);
  return p;
}

RealMatrix average(const RealMatrix& a, const RealMatrix& b) {
  RealMatrix out(a.rows(), a.cols());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = (a.data()[k] + b.data()[k]) / 2.0;
  return out;
}

struct ForwardState {
  std::array<kernels::ViewTrace, 2> traces;
  PredictionBatch pred;
};

ForwardState run_forward(const TwoViewModel& model, const RealMatrix& features, Backend backend) {
  check_input(model, features);
  ForwardState s;
  for (std::size_t v = 0; v < 2; ++v) {
    kernels::forward_view(backend, model.extractors[v], model.banks[v], features, s.traces[v]);
    for (double z : s.traces[v].logits.data()) {
      if (!std::isfinite(z)) throw InvalidArgument("forward: non-finite logit");
    }
  }
  s.pred.p1 = to_probs(s.traces[0].logits);
  s.pred.p2 = to_probs(s.traces[1].logits);
  s.pred.fused = average(s.pred.p1, s.pred.p2);
  return s;
}

std::size_t mask_count(const BitMatrix& mask) {
  std::size_t n = 0;
  for (auto m : mask.data()) n += m != 0;
  return n;
}

double clamp_prob(double p) { return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp); }

}  // namespace

PredictionBatch forward(const TwoViewModel& model, const RealMatrix& features, Backend backend) {
  return run_forward(model, features, backend).pred;
}

double loss_multiview(const ClassifierBank& bank1, const ClassifierBank& bank2, bool absolute) {
  if (bank1.task_count() != bank2.task_count() || bank1.feature_dim() != bank2.feature_dim()) {
    throw ShapeError("loss_multiview: banks differ in shape");
  }
  if (bank1.task_count() == 0) throw ShapeError("loss_multiview: no tasks");
  double sum = 0.0;
  for (std::size_t j = 0; j < bank1.task_count(); ++j) {
    const double c = cosine_similarity(bank1.augmented(j), bank2.augmented(j));
    sum += absolute ? std::abs(c) : c;
  }
  return sum / static_cast<double>(bank1.task_count());
}

double loss_coreg(const PredictionBatch& pred) {
  require_same_shape(pred.p1, pred.p2, "loss_coreg");
  if (pred.p1.empty()) throw ShapeError("loss_coreg: empty batch");
  double sum = 0.0;
  for (std::size_t k = 0; k < pred.p1.size(); ++k) {
    sum += js_bernoulli(Prob(pred.p1.data()[k]), Prob(pred.p2.data()[k]));
  }
  return sum / static_cast<double>(pred.p1.size());
}

double loss_recognition(const RealMatrix& probs, const BitMatrix& labels, const BitMatrix& mask) {
  require_same_shape(probs, labels, "loss_recognition labels");
  require_same_shape(probs, mask, "loss_recognition mask");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (!mask.data()[k]) continue;
    const double p = clamp_prob(probs.data()[k]);
    sum -= labels.data()[k] ? std::log(p) : std::log1p(-p);
    ++count;
  }
  if (count == 0) throw EmptySelectionError("loss_recognition: mask selects no entries");
  return sum / static_cast<double>(count);
}

namespace {

LossBreakdown combine(const TwoViewModel& model, const PredictionBatch& pred,
                      const BitMatrix& labels, const ViewMasks& masks, const LossWeights& w) {
  if (w.mv < 0.0 || w.cr < 0.0) throw InvalidArgument("loss weights must be >= 0");
  LossBreakdown out;
  out.weights = w;
  out.l_rec1 = loss_recognition(pred.p1, labels, masks[0]);
  out.l_rec2 = loss_recognition(pred.p2, labels, masks[1]);
  out.l_cr = loss_coreg(pred);
  out.total = out.l_rec1 + out.l_rec2 + w.cr * out.l_cr;
  if (w.mv != 0.0) {
    out.l_mv = loss_multiview(model.banks[0], model.banks[1], w.mv_absolute);
    out.total += w.mv * out.l_mv;
  } else {
    // Reported for monitoring only; undefined (NaN) when a classifier vector is zero.
    try {
      out.l_mv = loss_multiview(model.banks[0], model.banks[1], w.mv_absolute);
    } catch (const DegenerateVectorError&) {
      out.l_mv = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return out;
}

}  // namespace

LossBreakdown total_loss(const TwoViewModel& model, const RealMatrix& features,
                         const BitMatrix& labels, const ViewMasks& masks,
                         const LossWeights& weights, Backend backend) {
  const auto state = run_forward(model, features, backend);
  return combine(model, state.pred, labels, masks, weights);
}

GradientResult gradients(const TwoViewModel& model, const RealMatrix& features,
                         const BitMatrix& labels, const ViewMasks& masks,
                         const LossWeights& weights, Backend backend) {
  const auto state = run_forward(model, features, backend);
  GradientResult result;
  result.loss = combine(model, state.pred, labels, masks, weights);
  result.grads = ModelGradients::zeros_like(model);

  const std::size_t rows = features.rows();
  const std::size_t tasks = model.task_count();
  const std::array<const RealMatrix*, 2> probs{&state.pred.p1, &state.pred.p2};
  const double cr_scale = weights.cr / static_cast<double>(rows * tasks);

  for (std::size_t v = 0; v < 2; ++v) {
    const RealMatrix& p = *probs[v];
    const RealMatrix& z = state.traces[v].logits;
    const double rec_scale = 1.0 / static_cast<double>(mask_count(masks[v]));
    RealMatrix dlogits(rows, tasks);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double pk = p.data()[k];
      double g = 0.0;
      // d BCE(clamp(p)) / dz = p - y inside the clamp window, 0 outside.
      if (masks[v].data()[k] && pk >= kProbClamp && pk <= 1.0 - kProbClamp) {
        g += rec_scale * (pk - static_cast<double>(labels.data()[k]));
      }
      // d JS / dz_v = p_v (1 - p_v) / 2 * (ln((1-m)/m) + z_v), m = fused.
      const double m = state.pred.fused.data()[k];
      const double slope = pk * (1.0 - pk);
      if (weights.cr != 0.0 && slope > 0.0 && m > 0.0 && m < 1.0) {
        g += cr_scale * 0.5 * slope * (std::log1p(-m) - std::log(m) + z.data()[k]);
      }
      dlogits.data()[k] = g;
    }
    kernels::backward_view(backend, model.extractors[v], model.banks[v], features,
                           state.traces[v], dlogits, result.grads.extractors[v],
                           result.grads.banks[v]);
  }

  if (weights.mv != 0.0) {
    const double mv_scale = weights.mv / static_cast<double>(tasks);
    const std::size_t dim = model.feature_dim();
    for (std::size_t j = 0; j < tasks; ++j) {
      const auto a = model.banks[0].augmented(j);
      const auto b = model.banks[1].augmented(j);
      double dot = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t i = 0; i <= dim; ++i) {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
      }
      const double na = std::sqrt(aa), nb = std::sqrt(bb);
      const double cos = dot / (na * nb);
      const double sign = weights.mv_absolute ? (cos < 0.0 ? -1.0 : 1.0) : 1.0;
      const double s = mv_scale * sign;
      // d cos / da = b / (|a||b|) - cos a / |a|^2, symmetric for b.
      for (std::size_t i = 0; i <= dim; ++i) {
        const double ga = s * (b[i] / (na * nb) - cos * a[i] / aa);
        const double gb = s * (a[i] / (na * nb) - cos * b[i] / bb);
        if (i < dim) {
          result.grads.banks[0].weight(j, i) += ga;
          result.grads.banks[1].weight(j, i) += gb;
        } else {
          result.grads.banks[0].bias[j] += ga;
          result.grads.banks[1].bias[j] += gb;
        }
      }
    }
  }
  return result;
}

namespace {
constexpr std::string_view kModelMagic = "MTLM";
constexpr std::uint32_t kModelVersion = 1;
constexpr std::uint64_t kMaxDim = 1u << 24;
}  // namespace

// Layout: "MTLM", u32 version, u32 activation, u64 C, u64 d, u64 layer count L,
// u64 dims[L+1], then f64 parameters in declaration order (weights row-major,
// then biases, per Dense block).
std::vector<std::uint8_t> serialize_model(const TwoViewModel& model) {
  model.validate();
  if (model.extractors[0].layer_dims() != model.extractors[1].layer_dims() ||
      model.extractors[0].activation != model.extractors[1].activation) {
    throw ShapeError("serialize_model: both extractors must share an architecture");
  }
  ByteWriter out;
  out.magic(kModelMagic);
  out.u32(kModelVersion);
  out.u32(static_cast<std::uint32_t>(model.extractors[0].activation));
  out.u64(model.task_count());
  out.u64(model.feature_dim());
  const auto dims = model.extractors[0].layer_dims();
  out.u64(dims.size() - 1);
  for (auto d : dims) out.u64(d);
  for_each_dense(model, [&](const Dense& d) {
    out.f64s(d.weight.data());
    out.f64s(d.bias);
  });
  return std::move(out.buffer());
}

TwoViewModel deserialize_model(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.expect_magic(kModelMagic);
  if (const auto v = in.u32(); v != kModelVersion) {
    throw ParseError("unsupported model version " + std::to_string(v));
  }
  const auto act = in.u32();
  if (act > 1) throw ParseError("unknown activation");
  const auto tasks = in.count(kMaxDim, "task count");
  const auto feat = in.count(kMaxDim, "feature dim");
  const auto depth = in.count(64, "layer count");
  if (depth == 0 || tasks == 0) throw ParseError("empty model");
  std::vector<std::size_t> dims(depth + 1);
  for (auto& d : dims) {
    d = in.count(kMaxDim, "layer dim");
    if (d == 0) throw ParseError("zero layer dim");
  }
  if (dims.back() != feat) throw ParseError("feature dim does not match last layer");

  TwoViewModel model;
  for (std::size_t v = 0; v < 2; ++v) {
    model.extractors[v].activation = static_cast<Activation>(act);
    for (std::size_t l = 0; l < depth; ++l) model.extractors[v].layers.emplace_back(dims[l], dims[l + 1]);
    model.banks[v].view_index = static_cast<int>(v + 1);
    model.banks[v].head = Dense(feat, tasks);
  }
  if (in.remaining() != model.parameter_count() * sizeof(double)) {
    throw ParseError("model parameter block has wrong size");
  }
  for_each_dense(model, [&](Dense& d) {
    in.f64s(d.weight.data());
    in.f64s(d.bias);
  });
  model.validate();
  return model;
}

}  // namespace mtl
