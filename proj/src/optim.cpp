#include "tpmamba/optim.hpp"

#include <cmath>

namespace tpmamba {

template <typename S>
AdamW<S>::AdamW(ParameterList<S> params, const AdamWOptions& opt) : opt_(opt) {
  for (Parameter<S>* p : params) {
    if (!p->trainable) continue;
    const Index n = p->value().size();
    slots_.push_back({p, Eigen::Array<S, Eigen::Dynamic, 1>::Zero(n), Eigen::Array<S, Eigen::Dynamic, 1>::Zero(n)});
  }
}

template <typename S>
void AdamW<S>::step(double lr) {
  for (const Slot& s : slots_) {
    if (s.param->var.has_grad() && !s.param->var.grad().array().isFinite().all()) {
      throw NumericError("AdamW: non-finite gradient in " + s.param->name);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const S b1 = static_cast<S>(opt_.beta1), b2 = static_cast<S>(opt_.beta2);
  const S step_size = static_cast<S>(lr / c1), decay = static_cast<S>(1.0 - lr * opt_.weight_decay);
  const S inv_sqrt_c2 = static_cast<S>(1.0 / std::sqrt(c2)), eps = static_cast<S>(opt_.eps);
  for (Slot& s : slots_) {
    if (!s.param->var.has_grad()) continue;
    auto& p = s.param->value().array();
    const auto& g = s.param->var.grad().array();
    s.m = b1 * s.m + (S(1) - b1) * g;
    s.v = b2 * s.v + (S(1) - b2) * g * g;
    p *= decay;
    p -= step_size * s.m / (s.v.sqrt() * inv_sqrt_c2 + eps);
  }
}

double lr_schedule(Index epoch, Index epochs, double lr_start, double lr_end) {
  if (epochs <= 0 || epoch < 0 || epoch > epochs) {
    throw ConfigError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(epochs) + "]");
  }
  return lr_end + (lr_start - lr_end) * (1.0 - static_cast<double>(epoch) / static_cast<double>(epochs));
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace tpmamba
