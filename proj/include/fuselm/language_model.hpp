#pragma once

#include <span>
#include <string>
#include <vector>

#include "fuselm/core.hpp"

namespace fuselm {

/// Next-token probability vector over the shared vocabulary.
struct Distribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }
  double& operator[](std::size_t i) { return probs[i]; }
};

/// Checks nonnegativity and |sum - 1| <= tol.
bool is_valid_distribution(std::span<const double> probs, double tol);

using ContextView = std::span<const TokenId>;

/// Anything that can score full next-token distributions. Implementations are immutable
/// once constructed, so `next_dists` may be called concurrently.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual std::string describe() const = 0;

  /// One distribution per context, in request order.
  virtual std::vector<Distribution> next_dists(std::span<const ContextView> contexts) const = 0;

  Distribution next_dist(ContextView context) const {
    auto out = next_dists(std::span<const ContextView>(&context, 1));
    return std::move(out.front());
  }
};

}  // namespace fuselm
