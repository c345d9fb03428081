// SPDX-License-Identifier: Apache-2.0
//
// Single-stream transformer over a unified image+text token sequence.
//
// A batch of B samples is stored as one row-stacked matrix: sample b owns rows
// [b·N, (b+1)·N) with N = n_image + n_text, image tokens first. Every block
// applies shared Q/K/V projections to all N tokens; the optional GatedLoRA adds
// its low-rank delta to text rows only, so image-row projection outputs are
// the frozen model's bit for bit.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "zerase/tensor.hpp"

namespace zerase {

// A concept-token id, or nullopt for the empty prompt.
using Concept = std::optional<std::size_t>;
inline constexpr Concept kUnconditional = std::nullopt;

class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PerturbedToken {
  std::size_t id = 0;      // vocabulary id of the near-duplicate
  std::size_t source = 0;  // id whose embedding it shadows
};

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t n_layers = 3;
  std::size_t n_image = 4;
  std::size_t n_text = 4;
  std::size_t vocab = 3;
  std::size_t time_embed_dim = 16;
  std::size_t d_data = 2;
  std::size_t ffn_hidden = 64;
  // Template slot (0-based within the text segment) holding the concept token.
  std::size_t concept_slot = 1;
  std::vector<PerturbedToken> perturbed;
  double perturb_sigma = 0.05;

  std::size_t d_k() const { return d_model / n_heads; }
  std::size_t seq_len() const { return n_image + n_text; }
  std::size_t pad_id() const { return vocab; }
  // Throws DomainError naming the first violated invariant.
  void validate() const;
};

// Inclusive range of absolute token indices; `empty` for the empty prompt.
struct TokenSpan {
  std::size_t first = 0;
  std::size_t last = 0;
  bool empty = true;

  static TokenSpan none() { return {}; }
  static TokenSpan of(std::size_t first, std::size_t last) { return {first, last, false}; }
  std::size_t size() const { return empty ? 0 : last - first + 1; }
  bool contains(std::size_t i) const { return !empty && i >= first && i <= last; }
  bool operator==(const TokenSpan&) const = default;
};

struct UnifiedSequence {
  Tensor h;  // [batch·seq_len × d_model]
  std::size_t batch = 0;
  std::size_t n_image = 0;
  std::size_t n_text = 0;
  std::vector<std::vector<std::size_t>> token_ids;  // per sample, n_text ids
  std::vector<TokenSpan> concept_spans;             // per sample

  std::size_t seq_len() const { return n_image + n_text; }
};

enum class Projection : std::size_t { kQuery = 0, kKey = 1, kValue = 2 };

struct LoraAdapter {
  Tensor down;  // [d_model × r]
  Tensor up;    // [r × d_model]
};

struct GatedLoRA {
  std::size_t d_model = 0;
  std::size_t rank = 0;
  double scale = 1.0;
  std::vector<std::array<LoraAdapter, 3>> layers;  // indexed by Projection

  // down ~ N(0, 0.02²), up = 0: the adapter starts as an exact identity.
  static GatedLoRA init(const ModelConfig& cfg, std::size_t rank, double scale, std::uint64_t seed);

  // Leaves in a fixed order: layer-major, then Q/K/V, then down before up.
  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  void set_trainable(bool on) const;
  void zero_grad() const;
  // Dense scale·down·up, detached.
  std::vector<double> effective_delta(std::size_t layer, Projection p) const;
  GatedLoRA clone() const;
};

enum class AttentionBlock { kImageImage, kImageText, kTextImage, kTextText };

struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t n_image = 0;
  std::size_t seq_len = 0;
  Tensor weights;  // [batch·seq_len × seq_len], post-softmax

  std::size_t batch() const { return weights.rows() / seq_len; }
  // Full seq_len × seq_len matrix of one sample.
  Tensor sample(std::size_t b) const;
  // One of the four modality sub-blocks of a sample, sliced at n_image.
  // kImageText holds image queries attending to text keys (A_{I←T}).
  Tensor block(std::size_t b, AttentionBlock which) const;
};

// Column intervention applied to post-softmax attention.
struct AttentionIntervention {
  std::vector<std::uint8_t> keep;  // per (sample, column), see mask_columns
  std::vector<bool> layers;        // empty = every layer
  bool renormalize = true;

  bool applies_to(std::size_t layer) const { return layers.empty() || layers.at(layer); }
};

struct ForwardOptions {
  const AttentionIntervention* intervention = nullptr;
  bool record_projections = false;
};

struct ForwardResult {
  Tensor velocity;  // [batch·n_image × d_data]
  std::vector<AttentionRecord> attention;            // layer-major, then head
  std::vector<std::array<Tensor, 3>> projections;    // per layer, if recorded
};

struct NamedTensor {
  std::string name;
  Tensor value;
  bool trainable = true;
};

class SingleStreamModel {
 public:
  SingleStreamModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // x_t holds batch·n_image·d_data values (row-major per sample), concepts and
  // t hold one entry per sample.
  UnifiedSequence embed(std::span<const double> x_t, std::span<const Concept> concepts,
                        std::span<const double> t) const;
  UnifiedSequence embed(std::span<const double> x_t, Concept cond, double t) const;

  ForwardResult forward(const UnifiedSequence& seq, const GatedLoRA* lora = nullptr,
                        const ForwardOptions& opts = {}) const;

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  const Tensor& param(const std::string& name) const;
  std::vector<Tensor> trainable_parameters() const;
  void set_trainable(bool on);
  void zero_grad();

  // Rewrites each perturbed token row as its source row plus the stored
  // fixed perturbation.
  void sync_perturbed_tokens();

  // Deep copy with independent leaves.
  SingleStreamModel clone() const;
  // FNV-1a over every parameter's raw bytes, in parameter order.
  std::uint64_t checksum() const;

 private:
  SingleStreamModel() = default;
  const Tensor& p(std::size_t idx) const { return params_[idx].value; }
  void index_params();

  ModelConfig cfg_;
  std::vector<NamedTensor> params_;
  struct LayerIdx {
    std::size_t wq, wk, wv, wo, w1, b1, w2, b2;
  };
  std::size_t in_w_ = 0, in_b_ = 0, pos_image_ = 0, pos_text_ = 0, tokens_ = 0, time_w_ = 0, time_b_ = 0,
              out_w_ = 0, out_b_ = 0, perturbation_ = 0;
  std::vector<LayerIdx> layers_;
};

// Sinusoidal timestep features of width dim.
std::vector<double> timestep_features(double t, std::size_t dim);

struct AttentionMassOptions {
  // Restrict query rows to the image segment (A_{I←T}); otherwise all rows.
  bool image_rows_only = true;
};

// Mean over records, samples and query rows of the attention flowing into the
// per-sample column span. Empty spans contribute zero; if every span is empty
// the result is a constant 0 with no gradient path.
Tensor attention_mass(std::span<const AttentionRecord> attn, std::span<const TokenSpan> spans,
                      const AttentionMassOptions& opts = {});

// Permutes the text rows of each sample: the concept block stays contiguous
// and lands at a uniformly drawn slot, padding fills the rest in random order.
UnifiedSequence shuffle_tokens(const UnifiedSequence& seq, class Rng& rng);
// Applies an explicit per-sample text permutation: new text slot j takes old
// slot perm[b][j].
UnifiedSequence permute_text(const UnifiedSequence& seq, std::span<const std::vector<std::size_t>> perm);

}  // namespace zerase
