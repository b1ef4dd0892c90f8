#include <algorithm>
#include <cmath>
#include <span>

#include "mtl/kernels.hpp"

namespace mtl::kernels::parallel {
namespace {

void zero_like(const Dense& src, Dense& dst) {
  dst.weight = RealMatrix(src.weight.rows(), src.weight.cols());
  dst.bias.assign(src.bias.size(), 0.0);
}

void add_into(const Dense& src, Dense& dst) {
  auto& w = dst.weight.data();
  const auto& sw = src.weight.data();
  for (std::size_t k = 0; k < w.size(); ++k) w[k] += sw[k];
  for (std::size_t k = 0; k < dst.bias.size(); ++k) dst.bias[k] += src.bias[k];
}

// One row through a Dense layer and the activation.
void row_affine(const Dense& layer, std::span<const double> in, std::span<double> out) {
  for (std::size_t o = 0; o < layer.out_dim(); ++o) {
    const auto w = layer.weight.row(o);
    double acc = layer.bias[o];
    for (std::size_t i = 0; i < in.size(); ++i) acc += w[i] * in[i];
    out[o] = acc;
  }
}

// grad += delta (x) in; back = W^T delta.
void row_backward(const Dense& layer, std::span<const double> in, std::span<const double> delta,
                  Dense& grad, std::span<double> back) {
  std::fill(back.begin(), back.end(), 0.0);
  for (std::size_t o = 0; o < layer.out_dim(); ++o) {
    const double d = delta[o];
    grad.bias[o] += d;
    auto gw = grad.weight.row(o);
    const auto w = layer.weight.row(o);
    for (std::size_t i = 0; i < in.size(); ++i) {
      gw[i] += d * in[i];
      back[i] += d * w[i];
    }
  }
}

}  // namespace

void forward_view(const FeatureExtractor& extractor, const ClassifierBank& bank,
                  const RealMatrix& input, ViewTrace& trace) {
  const std::size_t rows = input.rows();
  trace.hidden.resize(extractor.layers.size());
  for (std::size_t l = 0; l < extractor.layers.size(); ++l) {
    trace.hidden[l] = RealMatrix(rows, extractor.layers[l].out_dim());
  }
  trace.logits = RealMatrix(rows, bank.task_count());
  const bool squash = extractor.activation == Activation::kTanh;
  const auto n_rows = static_cast<std::ptrdiff_t>(rows);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t n = 0; n < n_rows; ++n) {
    std::span<const double> prev = input.row(n);
    for (std::size_t l = 0; l < extractor.layers.size(); ++l) {
      auto out = trace.hidden[l].row(n);
      row_affine(extractor.layers[l], prev, out);
      if (squash) {
        for (double& v : out) v = std::tanh(v);
      }
      prev = out;
    }
    row_affine(bank.head, prev, trace.logits.row(n));
  }
}

void backward_view(const FeatureExtractor& extractor, const ClassifierBank& bank,
                   const RealMatrix& input, const ViewTrace& trace, const RealMatrix& dlogits,
                   std::vector<Dense>& ext_grad, Dense& bank_grad) {
  const std::size_t rows = input.rows();
  const std::size_t depth = extractor.layers.size();
  const std::size_t chunks = (rows + kRowChunk - 1) / kRowChunk;
  std::size_t widest = bank.feature_dim();
  for (const auto& l : extractor.layers) widest = std::max({widest, l.in_dim(), l.out_dim()});

  std::vector<std::vector<Dense>> ext_part(chunks, std::vector<Dense>(depth));
  std::vector<Dense> bank_part(chunks);
  const bool squash = extractor.activation == Activation::kTanh;
  const auto n_chunks = static_cast<std::ptrdiff_t>(chunks);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < n_chunks; ++c) {
    auto& eg = ext_part[c];
    for (std::size_t l = 0; l < depth; ++l) zero_like(extractor.layers[l], eg[l]);
    zero_like(bank.head, bank_part[c]);
    std::vector<double> upper(widest), lower(widest);

    const std::size_t begin = static_cast<std::size_t>(c) * kRowChunk;
    const std::size_t end = std::min(rows, begin + kRowChunk);
    for (std::size_t n = begin; n < end; ++n) {
      std::span<double> dh(upper.data(), bank.feature_dim());
      row_backward(bank.head, trace.hidden.back().row(n), dlogits.row(n), bank_part[c], dh);
      for (std::size_t l = depth; l-- > 0;) {
        const auto h = trace.hidden[l].row(n);
        if (squash) {
          for (std::size_t k = 0; k < dh.size(); ++k) dh[k] *= 1.0 - h[k] * h[k];
        }
        const auto below = l == 0 ? input.row(n) : trace.hidden[l - 1].row(n);
        std::span<double> back(lower.data(), below.size());
        row_backward(extractor.layers[l], below, dh, eg[l], back);
        std::swap(upper, lower);
        dh = std::span<double>(upper.data(), below.size());
      }
    }
  }

  for (std::size_t c = 0; c < chunks; ++c) {
    for (std::size_t l = 0; l < depth; ++l) add_into(ext_part[c][l], ext_grad[l]);
    add_into(bank_part[c], bank_grad);
  }
}

}  // namespace mtl::kernels::parallel
