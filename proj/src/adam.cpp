#include "fuselm/adam.hpp"

#include <cmath>

#include "fuselm/error.hpp"

namespace fuselm::nn {

void adam_step(std::span<const std::span<double>> params, const std::vector<std::vector<double>>& grads,
               AdamState& state) {
  if (params.size() != grads.size()) throw Error(ErrorCode::ShapeError, "parameter/gradient count mismatch");
  if (state.t == 0 && state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw Error(ErrorCode::ShapeError, "optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].size() != grads[i].size() || state.m[i].size() != params[i].size())
      throw Error(ErrorCode::ShapeError, "tensor " + std::to_string(i) + " shape mismatch");

  const AdamConfig& c = state.config;
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    auto p = params[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

}  // namespace fuselm::nn
