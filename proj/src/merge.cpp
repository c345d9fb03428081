// SPDX-License-Identifier: Apache-2.0
#include "zerase/merge.hpp"

#include <string>

namespace zerase {

GatedLoRA merge(std::span<const GatedLoRA> loras, std::optional<std::vector<double>> weights) {
  if (loras.empty()) throw ContractError("merge: no adapters given");
  const std::size_t n = loras.size();
  std::vector<double> w = weights.value_or(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  if (w.size() != n)
    throw MergeError("merge: " + std::to_string(w.size()) + " weights for " + std::to_string(n) + " adapters");
  for (double v : w)
    if (!(v >= 0.0)) throw MergeError("merge: weights must be non-negative");

  const GatedLoRA& ref = loras.front();
  for (std::size_t i = 1; i < n; ++i) {
    const GatedLoRA& l = loras[i];
    if (l.d_model != ref.d_model)
      throw MergeError("merge: adapter " + std::to_string(i) + " has d_model " + std::to_string(l.d_model) +
                       ", expected " + std::to_string(ref.d_model));
    if (l.layers.size() != ref.layers.size())
      throw MergeError("merge: adapter " + std::to_string(i) + " covers " + std::to_string(l.layers.size()) +
                       " layers, expected " + std::to_string(ref.layers.size()) + " (first missing layer " +
                       std::to_string(std::min(l.layers.size(), ref.layers.size())) + ")");
  }

  NoGradGuard guard;
  GatedLoRA out;
  out.d_model = ref.d_model;
  out.scale = 1.0;
  out.rank = 0;
  for (const GatedLoRA& l : loras) out.rank += l.rank;
  static const char* kProj[] = {"q", "k", "v"};
  for (std::size_t layer = 0; layer < ref.layers.size(); ++layer) {
    std::array<LoraAdapter, 3> merged;
    for (std::size_t p = 0; p < 3; ++p) {
      std::vector<Tensor> downs, ups;
      for (std::size_t i = 0; i < n; ++i) {
        const LoraAdapter& ad = loras[i].layers[layer][p];
        if (ad.down.rows() != out.d_model || ad.up.cols() != out.d_model || ad.down.cols() != ad.up.rows())
          throw MergeError("merge: adapter " + std::to_string(i) + " layer " + std::to_string(layer) + " " +
                           kProj[p] + " has incompatible factor shapes " + shape_str(ad.down.shape()) + " and " +
                           shape_str(ad.up.shape()));
        downs.push_back(scale(ad.down, w[i] * loras[i].scale));
        ups.push_back(ad.up);
      }
      const Tensor d = concat_cols(downs), u = concat_rows(ups);
      merged[p].down = Tensor::from(d.shape(), {d.data().begin(), d.data().end()});
      merged[p].up = Tensor::from(u.shape(), {u.data().begin(), u.data().end()});
    }
    out.layers.push_back(std::move(merged));
  }
  return out;
}

}  // namespace zerase
