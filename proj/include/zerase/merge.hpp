// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "zerase/model.hpp"

namespace zerase {

class MergeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Weighted sum of adapters realized by factor concatenation:
//   down = [w_1·s_1·down_1 | … | w_N·s_N·down_N],  up = [up_1; …; up_N],  scale = 1,
// so the merged delta equals Σ w_i·s_i·down_i·up_i exactly. Default weights
// are 1/N. Ranks may differ; the merged rank is their sum.
GatedLoRA merge(std::span<const GatedLoRA> loras, std::optional<std::vector<double>> weights = std::nullopt);

}  // namespace zerase
