// SPDX-License-Identifier: Apache-2.0
//
// Inference-time attention interventions and attention-based concept
// localization on a frozen model.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "zerase/flow.hpp"
#include "zerase/model.hpp"

namespace zerase {

struct ZeroingSpec {
  std::size_t target = 0;    // vocabulary id whose columns are removed
  std::vector<bool> layers;  // empty = every layer
  bool renormalize = true;
};

// Text positions whose token id equals spec.target exactly, as one absolute
// span per sample. Samples without a contiguous match stay unresolved (empty).
std::vector<TokenSpan> resolve_zeroing(const ZeroingSpec& spec, const UnifiedSequence& seq);

// nullopt when nothing resolves, so the forward pass runs unmodified.
std::optional<AttentionIntervention> make_intervention(const ZeroingSpec& spec, const UnifiedSequence& seq);

ForwardResult zeroed_forward(const SingleStreamModel& model, const UnifiedSequence& seq, const ZeroingSpec& spec,
                             const GatedLoRA* lora = nullptr);

struct BypassConfig {
  std::size_t samples = 400;
  std::size_t steps = 9;
  std::uint64_t seed = 0;
  std::uint64_t ref_seed = 7;  // seed of the reference plain/unconditional sets
  bool renormalize = true;
};

struct BypassReport {
  std::size_t concept_id = 0;
  std::size_t perturbed_id = 0;
  std::vector<double> plain;      // conditional on the concept
  std::vector<double> zeroed;     // conditional on the concept, columns zeroed
  std::vector<double> perturbed;  // conditional on the perturbed id, same zeroing rule
  double zeroed_to_plain = 0.0;
  double perturbed_to_plain = 0.0;
  double zeroed_to_uncond = 0.0;
  double perturbed_to_uncond = 0.0;
  double plain_to_uncond = 0.0;
  double plain_noise_floor = 0.0;  // plain at seed vs plain at ref_seed

  bool bypass_ordering() const { return perturbed_to_plain < zeroed_to_plain; }
};

// Distances to "plain" are measured against an independent plain draw at
// ref_seed so all three sets are compared on equal footing.
BypassReport bypass_demo(const SingleStreamModel& model, std::size_t concept_id, std::size_t perturbed_id,
                         const BypassConfig& cfg);

struct LocalizationProfile {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<double> mass;  // layer-major, image→concept-span attention mass

  double at(std::size_t layer, std::size_t head) const { return mass[layer * n_heads + head]; }
  // Tab-separated layer × head table with a header row.
  void write_tsv(std::ostream& os) const;
};

struct LocalizeConfig {
  std::size_t batches = 4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

// Probe inputs: mixture samples noised to uniform t.
LocalizationProfile localize(const SingleStreamModel& model, const ConceptDataset& ds, std::size_t concept_id,
                             const LocalizeConfig& cfg);
// Per-record mass of the given spans for an already computed forward pass.
LocalizationProfile localize_records(const ForwardResult& out, std::span<const TokenSpan> spans,
                                     std::size_t n_layers, std::size_t n_heads);

}  // namespace zerase
