#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace fuselm::nn {

struct AdamConfig {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update over every tensor. Moment buffers are sized on the first call.
void adam_step(std::span<const std::span<double>> params, const std::vector<std::vector<double>>& grads,
               AdamState& state);

}  // namespace fuselm::nn
