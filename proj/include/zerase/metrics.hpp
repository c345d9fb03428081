// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zerase/flow.hpp"
#include "zerase/model.hpp"

namespace zerase {

// V-statistic energy distance 2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖ between two point
// clouds stored row-major with `dim` columns.
double energy_distance(std::span<const double> x, std::span<const double> y, std::size_t dim);

struct EvalConfig {
  std::size_t samples = 400;
  std::size_t sampler_steps = 9;
  std::uint64_t eval_seed = 1001;  // shared by the before/after sets
  std::uint64_t ref_seed = 2002;   // independent reference draw of the base model
};

enum class ConceptRole { kErase, kPreserve, kUnconditional };
std::string to_string(ConceptRole r);

struct ConceptEval {
  Concept concept_id;
  ConceptRole role = ConceptRole::kPreserve;
  // Base model at eval_seed vs base model at ref_seed.
  double noise_floor = 0.0;
  // Adapted model at eval_seed vs base model at ref_seed.
  double to_original = 0.0;
  // Adapted vs base, both at eval_seed.
  double before_after = 0.0;
  // Adapted model vs the base unconditional distribution (ref_seed).
  double to_unconditional = 0.0;

  double efficacy_ratio() const { return noise_floor > 0.0 ? to_original / noise_floor : 0.0; }
  double preservation_ratio() const { return noise_floor > 0.0 ? before_after / noise_floor : 0.0; }
};

struct EvalReport {
  std::vector<ConceptEval> concepts;
  const ConceptEval& get(Concept c) const;
};

// Samples every erased concept, every preserved concept and ∅ with and
// without the adapter.
EvalReport eval_erasure(const SingleStreamModel& base, const GatedLoRA* lora, std::span<const std::size_t> erase_set,
                        std::span<const std::size_t> preserve_set, const EvalConfig& cfg);

// Reusable base-model sample sets for repeated evaluations of one checkpoint.
class BaseSampleCache {
 public:
  BaseSampleCache(const SingleStreamModel& base, EvalConfig cfg) : base_(&base), cfg_(cfg) {}
  const std::vector<double>& get(Concept c, std::uint64_t seed);
  const EvalConfig& config() const { return cfg_; }
  const SingleStreamModel& base() const { return *base_; }

 private:
  struct Entry {
    Concept c;
    std::uint64_t seed;
    std::vector<double> x;
  };
  const SingleStreamModel* base_;
  EvalConfig cfg_;
  std::vector<Entry> entries_;
};

EvalReport eval_erasure(BaseSampleCache& cache, const GatedLoRA* lora, std::span<const std::size_t> erase_set,
                        std::span<const std::size_t> preserve_set);

}  // namespace zerase
