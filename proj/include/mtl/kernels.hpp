#pragma once

// Batch forward/backward kernels for one view (extractor + classifier bank).
//
// serial:: is the straightforward layer-at-a-time reference. parallel:: fuses
// all layers per row and splits the batch with OpenMP. Its reductions run
// over fixed-size row chunks that are summed in chunk order, so results do
// not depend on the number of threads.

#include <vector>

#include "mtl/matrix.hpp"
#include "mtl/model.hpp"

namespace mtl::kernels {

// Post-activation outputs of every extractor layer (the last one is the view
// feature f) and the classifier logits.
struct ViewTrace {
  std::vector<RealMatrix> hidden;
  RealMatrix logits;
};

inline constexpr std::size_t kRowChunk = 32;

namespace serial {
void forward_view(const FeatureExtractor& extractor, const ClassifierBank& bank,
                  const RealMatrix& input, ViewTrace& trace);
// Adds d(loss)/d(params) to ext_grad/bank_grad given d(loss)/d(logits).
void backward_view(const FeatureExtractor& extractor, const ClassifierBank& bank,
                   const RealMatrix& input, const ViewTrace& trace, const RealMatrix& dlogits,
                   std::vector<Dense>& ext_grad, Dense& bank_grad);
}  // namespace serial

namespace parallel {
void forward_view(const FeatureExtractor& extractor, const ClassifierBank& bank,
                  const RealMatrix& input, ViewTrace& trace);
void backward_view(const FeatureExtractor& extractor, const ClassifierBank& bank,
                   const RealMatrix& input, const ViewTrace& trace, const RealMatrix& dlogits,
                   std::vector<Dense>& ext_grad, Dense& bank_grad);
}  // namespace parallel

inline void forward_view(Backend backend, const FeatureExtractor& extractor,
                         const ClassifierBank& bank, const RealMatrix& input, ViewTrace& trace) {
  if (backend == Backend::kSerial) {
    serial::forward_view(extractor, bank, input, trace);
  } else {
    parallel::forward_view(extractor, bank, input, trace);
  }
}

inline void backward_view(Backend backend, const FeatureExtractor& extractor,
                          const ClassifierBank& bank, const RealMatrix& input,
                          const ViewTrace& trace, const RealMatrix& dlogits,
                          std::vector<Dense>& ext_grad, Dense& bank_grad) {
  if (backend == Backend::kSerial) {
    serial::backward_view(extractor, bank, input, trace, dlogits, ext_grad, bank_grad);
  } else {
    parallel::backward_view(extractor, bank, input, trace, dlogits, ext_grad, bank_grad);
  }
}

}  // namespace mtl::kernels
