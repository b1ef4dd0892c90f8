#include <cmath>

#include "mtl/kernels.hpp"

namespace mtl::kernels::serial {
namespace {

// out = in * W^T + b, row by row.
RealMatrix affine(const RealMatrix& in, const Dense& layer) {
  RealMatrix out(in.rows(), layer.out_dim());
  for (std::size_t n = 0; n < in.rows(); ++n) {
    for (std::size_t o = 0; o < layer.out_dim(); ++o) {
      double acc = layer.bias[o];
      for (std::size_t i = 0; i < layer.in_dim(); ++i) acc += layer.weight(o, i) * in(n, i);
      out(n, o) = acc;
    }
  }
  return out;
}

// grad.weight += delta^T * in, grad.bias += column sums of delta,
// returns delta * W.
RealMatrix accumulate_dense(const Dense& layer, const RealMatrix& in, const RealMatrix& delta,
                            Dense& grad) {
  for (std::size_t n = 0; n < in.rows(); ++n) {
    for (std::size_t o = 0; o < layer.out_dim(); ++o) {
      const double d = delta(n, o);
      grad.bias[o] += d;
      for (std::size_t i = 0; i < layer.in_dim(); ++i) grad.weight(o, i) += d * in(n, i);
    }
  }
  RealMatrix back(in.rows(), layer.in_dim());
  for (std::size_t n = 0; n < in.rows(); ++n) {
    for (std::size_t i = 0; i < layer.in_dim(); ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < layer.out_dim(); ++o) acc += delta(n, o) * layer.weight(o, i);
      back(n, i) = acc;
    }
  }
  return back;
}

}  // namespace

void forward_view(const FeatureExtractor& extractor, const ClassifierBank& bank,
                  const RealMatrix& input, ViewTrace& trace) {
  trace.hidden.clear();
  const RealMatrix* prev = &input;
  for (const auto& layer : extractor.layers) {
    RealMatrix h = affine(*prev, layer);
    if (extractor.activation == Activation::kTanh) {
      for (auto& v : h.data()) v = std::tanh(v);
    }
    trace.hidden.push_back(std::move(h));
    prev = &trace.hidden.back();
  }
  trace.logits = affine(*prev, bank.head);
}

void backward_view(const FeatureExtractor& extractor, const ClassifierBank& bank,
                   const RealMatrix& input, const ViewTrace& trace, const RealMatrix& dlogits,
                   std::vector<Dense>& ext_grad, Dense& bank_grad) {
  const std::size_t depth = extractor.layers.size();
  RealMatrix dh = accumulate_dense(bank.head, trace.hidden.back(), dlogits, bank_grad);
  for (std::size_t l = depth; l-- > 0;) {
    const RealMatrix& h = trace.hidden[l];
    if (extractor.activation == Activation::kTanh) {
      for (std::size_t k = 0; k < dh.size(); ++k) {
        const double v = h.data()[k];
        dh.data()[k] *= 1.0 - v * v;
      }
    }
    const RealMatrix& below = l == 0 ? input : trace.hidden[l - 1];
    dh = accumulate_dense(extractor.layers[l], below, dh, ext_grad[l]);
  }
}

}  // namespace mtl::kernels::serial
