#include "enclab/optimizer.hpp"

#include <cmath>

#include "enclab/errors.hpp"

namespace enclab {

Scalar clip_global_norm(std::map<std::string, Tensor>& params,
                        Scalar max_norm) {
  Scalar sq = 0.0;
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (Scalar g : p.grad()) sq += g * g;
  }
  const Scalar norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const Scalar s = max_norm / norm;
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (Scalar& g : p.grad()) g *= s;
    }
  }
  return norm;
}

void adamw_step(std::map<std::string, Tensor>& params, AdamState& state,
                Scalar lr, const TrainPlan& plan) {
  state.t += 1;
  const Scalar bc1 = 1.0 - std::pow(plan.beta1, static_cast<Scalar>(state.t));
  const Scalar bc2 = 1.0 - std::pow(plan.beta2, static_cast<Scalar>(state.t));
  for (auto& [name, p] : params) {
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Tensor::zeros(p.shape())).first;
      state.v.emplace(name, Tensor::zeros(p.shape()));
    }
    Tensor& m = mit->second;
    Tensor& v = state.v.at(name);
    p.ensure_grad();
    auto pv = p.values();
    auto g = p.grad();
    auto mv = m.values();
    auto vv = v.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("adamw_step: non-finite gradient in " + name +
                           " at step " + std::to_string(state.t));
      // Decoupled weight decay first, then the Adam delta.
      pv[i] -= lr * plan.weight_decay * pv[i];
      mv[i] = plan.beta1 * mv[i] + (1.0 - plan.beta1) * g[i];
      vv[i] = plan.beta2 * vv[i] + (1.0 - plan.beta2) * g[i] * g[i];
      const Scalar mhat = mv[i] / bc1;
      const Scalar vhat = vv[i] / bc2;
      pv[i] -= lr * mhat / (std::sqrt(vhat) + plan.adam_eps);
    }
  }
}

}  // namespace enclab
