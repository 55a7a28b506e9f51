#pragma once

#include <cmath>
#include <stdexcept>

#include "rigidreg/tensor.hpp"

namespace rigidreg::ad {

// Adam moments per parameter plus the shared step counter.
struct AdamState {
  TensorMap m;  // first moments
  TensorMap v;  // second moments
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState init(const TensorMap& params) {
    AdamState s;
    for (const auto& [name, t] : params) {
      s.m[name] = Tensor::zeros(t.dims);
      s.v[name] = Tensor::zeros(t.dims);
    }
    return s;
  }
};

// Standard bias-corrected update, in place. Gradients must cover exactly the
// parameters the state was initialized with.
inline void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state, double lr) {
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("adam_step: missing gradient for " + name);
    const Tensor& g = git->second;
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    if (!g.same_shape(p) || !m.same_shape(p))
      throw std::invalid_argument("adam_step: shape mismatch for " + name);
    for (size_t i = 0; i < p.data.size(); ++i) {
      double gi = g.data[i];
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * gi;
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * gi * gi;
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace rigidreg::ad
