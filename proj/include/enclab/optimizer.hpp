#pragma once

#include <map>
#include <string>

#include "enclab/schedule.hpp"
#include "enclab/tensor.hpp"

namespace enclab {

/// First/second moment buffers per parameter, plus the shared step count.
struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  Index t = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm. Parameters without an allocated gradient are
/// treated as zero.
Scalar clip_global_norm(std::map<std::string, Tensor>& params,
                        Scalar max_norm);

/// One decoupled-AdamW update over every parameter, in name order.
/// Weight decay shrinks the parameter before the bias-corrected Adam delta.
/// Throws NumericError naming the tensor on a non-finite gradient.
void adamw_step(std::map<std::string, Tensor>& params, AdamState& state,
                Scalar lr, const TrainPlan& plan);

}  // namespace enclab
