// SPDX-License-Identifier: Apache-2.0
#include "zerase/metrics.hpp"

#include <cmath>

namespace zerase {

namespace {

double mean_pairwise(std::span<const double> x, std::span<const double> y, std::size_t dim) {
  const std::size_t n = x.size() / dim, m = y.size() / dim;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = x.data() + i * dim;
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double* b = y.data() + j * dim;
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double t = a[k] - b[k];
        d2 += t * t;
      }
      row += std::sqrt(d2);
    }
    s += row;
  }
  return s / (static_cast<double>(n) * static_cast<double>(m));
}

std::vector<double> draw(const SingleStreamModel& m, Concept c, const GatedLoRA* lora, std::uint64_t seed,
                         const EvalConfig& cfg) {
  SampleRequest req;
  req.cond = c;
  req.count = cfg.samples;
  req.steps = cfg.sampler_steps;
  req.seed = seed;
  req.lora = lora;
  return sample_batch(m, req);
}

}  // namespace

double energy_distance(std::span<const double> x, std::span<const double> y, std::size_t dim) {
  if (dim == 0) throw DimensionError("energy_distance: dim must be >= 1");
  if (x.empty() || y.empty()) throw ContractError("energy_distance: empty sample set");
  if (x.size() % dim != 0 || y.size() % dim != 0)
    throw DimensionError("energy_distance: sample size is not a multiple of dim " + std::to_string(dim));
  return 2.0 * mean_pairwise(x, y, dim) - mean_pairwise(x, x, dim) - mean_pairwise(y, y, dim);
}

std::string to_string(ConceptRole r) {
  switch (r) {
    case ConceptRole::kErase: return "erase";
    case ConceptRole::kPreserve: return "preserve";
    case ConceptRole::kUnconditional: return "unconditional";
  }
  return "preserve";
}

const ConceptEval& EvalReport::get(Concept c) const {
  for (const auto& e : concepts)
    if (e.concept_id == c) return e;
  throw ContractError("EvalReport: concept not evaluated");
}

const std::vector<double>& BaseSampleCache::get(Concept c, std::uint64_t seed) {
  for (const auto& e : entries_)
    if (e.c == c && e.seed == seed) return e.x;
  entries_.push_back({c, seed, draw(*base_, c, nullptr, seed, cfg_)});
  return entries_.back().x;
}

EvalReport eval_erasure(BaseSampleCache& cache, const GatedLoRA* lora, std::span<const std::size_t> erase_set,
                        std::span<const std::size_t> preserve_set) {
  const EvalConfig& cfg = cache.config();
  const std::size_t dim = cache.base().config().d_data;
  std::vector<std::pair<Concept, ConceptRole>> items;
  for (std::size_t c : erase_set) items.push_back({c, ConceptRole::kErase});
  for (std::size_t c : preserve_set) items.push_back({c, ConceptRole::kPreserve});
  items.push_back({kUnconditional, ConceptRole::kUnconditional});

  EvalReport r;
  for (const auto& [c, role] : items) {
    const std::vector<double> base_eval = cache.get(c, cfg.eval_seed);
    const std::vector<double> base_ref = cache.get(c, cfg.ref_seed);
    const std::vector<double> uncond_ref = cache.get(kUnconditional, cfg.ref_seed);
    const std::vector<double> adapted = lora ? draw(cache.base(), c, lora, cfg.eval_seed, cfg) : base_eval;
    ConceptEval e;
    e.concept_id = c;
    e.role = role;
    e.noise_floor = energy_distance(base_eval, base_ref, dim);
    e.to_original = energy_distance(adapted, base_ref, dim);
    e.before_after = lora ? energy_distance(adapted, base_eval, dim) : 0.0;
    e.to_unconditional = energy_distance(adapted, uncond_ref, dim);
    r.concepts.push_back(e);
  }
  return r;
}

EvalReport eval_erasure(const SingleStreamModel& base, const GatedLoRA* lora, std::span<const std::size_t> erase_set,
                        std::span<const std::size_t> preserve_set, const EvalConfig& cfg) {
  BaseSampleCache cache(base, cfg);
  return eval_erasure(cache, lora, erase_set, preserve_set);
}

}  // namespace zerase
