#pragma once

#include "tpmamba/autograd.hpp"

namespace tpmamba {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// AdamW with decoupled weight decay. Only trainable parameters are touched;
/// parameters that received no gradient this step are skipped.
template <typename S>
class AdamW {
 public:
  AdamW(ParameterList<S> params, const AdamWOptions& opt = {});

  /// Applies one update. Throws NumericError naming the parameter if any
  /// gradient is non-finite, in which case no parameter is modified.
  void step(double lr);
  Index steps() const { return t_; }

 private:
  struct Slot {
    Parameter<S>* param;
    Eigen::Array<S, Eigen::Dynamic, 1> m, v;
  };
  std::vector<Slot> slots_;
  AdamWOptions opt_;
  Index t_ = 0;
};

/// Linear decay from lr_start at epoch 0 to lr_end at epoch `epochs`.
double lr_schedule(Index epoch, Index epochs, double lr_start, double lr_end = 0.0);

}  // namespace tpmamba
