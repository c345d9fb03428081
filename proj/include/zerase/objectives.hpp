// SPDX-License-Identifier: Apache-2.0
//
// Erasure and preservation losses evaluated against a frozen base model.
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "zerase/flow.hpp"
#include "zerase/model.hpp"
#include "zerase/rng.hpp"

namespace zerase {

enum class XtSource {
  kNoisedData,   // dataset samples moved along the linear path to a uniform t
  kTrajectory,   // partial Euler trajectories of the frozen model from t = 1
};

struct ErasureBatchConfig {
  std::size_t size = 16;
  double eta = 2.0;
  XtSource source = XtSource::kNoisedData;
  std::size_t trajectory_steps = 9;
};

struct ErasureBatch {
  std::size_t count = 0;
  std::size_t c_er = 0;
  std::size_t c_pr = 0;
  double eta = 2.0;
  std::vector<double> x_t;  // count·n_image·d_data
  std::vector<double> t;    // count
  // Frozen-model velocities at (x_t, t), no gradient path.
  std::vector<double> v_uncond;
  std::vector<double> v_er;
  std::vector<double> v_pr;
};

// Draws x_t (sample i comes from c_er when i is even, c_pr otherwise) and
// caches the frozen predictions. Deterministic in (seed, index).
ErasureBatch make_erasure_batch(const SingleStreamModel& frozen, const ConceptDataset& ds, std::size_t c_er,
                                std::size_t c_pr, const ErasureBatchConfig& cfg, std::uint64_t seed,
                                std::uint64_t index);

// Fills the frozen-velocity caches of a batch whose x_t/t are already set.
void cache_frozen_predictions(const SingleStreamModel& frozen, ErasureBatch& batch);

// E‖v_{θ+Δθ}(x_t, c_er) − (v_∅ − η(v_c − v_∅))‖², target detached.
Tensor erase_loss(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch);

// Attention mass on the concept span after shuffling the text tokens.
Tensor attn_loss(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch, Rng& rng,
                 const AttentionMassOptions& opts = {});

// E‖v_{θ+Δθ}(x_t, ∅) − v_θ(x_t, ∅)‖² + E‖v_{θ+Δθ}(x_t, c_pr) − v_θ(x_t, c_pr)‖².
Tensor preserve_loss(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch);

// erase_loss + attn_coef·attn_loss.
Tensor er_total(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch, Rng& rng,
                double attn_coef = 1.0);

struct ErasureLosses {
  Tensor erase;
  Tensor attn;
  Tensor er;  // erase + attn_coef·attn
  Tensor pr;
};

ErasureLosses compute_losses(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch,
                             Rng& rng, double attn_coef = 1.0);

}  // namespace zerase
