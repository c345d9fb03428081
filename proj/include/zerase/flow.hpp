// SPDX-License-Identifier: Apache-2.0
//
// Conditional flow matching on synthetic concept distributions.
//
// Time convention: t ∈ [0, 1], data at t = 0 and standard normal noise at
// t = 1, linear path x_t = (1 − t)·x0 + t·x1 with target velocity x1 − x0.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zerase/model.hpp"

namespace zerase {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct ConceptDistribution {
  enum class Kind { kGaussian, kRing };
  std::string name;
  std::size_t id = 0;
  Kind kind = Kind::kGaussian;
  std::vector<double> center;  // d_data
  double stddev = 0.5;         // gaussian σ, or radial σ of the ring
  double radius = 0.0;         // ring only
};

class ConceptDataset {
 public:
  // d_data=2; A ~ N(+2·1, 0.25·I), B ~ N(−2·1, 0.25·I); id 2 is a perturbed A.
  static ConceptDataset two_gaussians();
  // A: ring of radius 2 (radial σ 0.15), B: N(0, 0.25·I); id 2 is a perturbed A.
  static ConceptDataset ring_vs_blob();
  // Three N(·, 0.25·I) components on a circle of radius 2.5; id 3 is a perturbed A.
  static ConceptDataset three_gaussians();
  static ConceptDataset by_name(const std::string& name);
  static std::vector<std::string> names();

  const std::string& name() const { return name_; }
  std::size_t d_data() const { return d_data_; }
  std::size_t n_image() const { return n_image_; }
  std::span<const ConceptDistribution> concepts() const { return concepts_; }
  const ConceptDistribution& concept_by_id(std::size_t id) const;
  const std::vector<std::size_t>& default_erase_set() const { return erase_; }
  const std::vector<std::size_t>& default_preserve_set() const { return preserve_; }
  // Model vocabulary/perturbation layout for this dataset.
  ModelConfig model_config() const;
  // Near-duplicate id of `id`, if one is defined.
  std::optional<std::size_t> perturbed_of(std::size_t id) const;

  // n_image·d_data values, i.i.d. rows, deterministic in (seed, index).
  std::vector<double> sample(std::size_t concept_id, std::uint64_t seed, std::uint64_t index) const;
  // Uniform mixture over the concepts.
  std::vector<double> sample_unconditional(std::uint64_t seed, std::uint64_t index) const;

 private:
  std::string name_;
  std::size_t d_data_ = 2;
  std::size_t n_image_ = 4;
  std::size_t vocab_ = 0;
  std::vector<ConceptDistribution> concepts_;
  std::vector<PerturbedToken> perturbed_;
  std::vector<std::size_t> erase_, preserve_;
};

struct FlowPath {
  std::vector<double> x0;
  std::vector<double> x1;
  double t = 0.0;
  std::vector<double> x_t;
  std::vector<double> v_target;

  static FlowPath make(std::vector<double> x0, std::vector<double> x1, double t);
};

struct TrainingExample {
  Concept label;
  FlowPath path;
};

// One base-training draw: uniform concept, label dropped to ∅ with
// probability `dropout`, x1 ~ N(0, I), t ~ U[0, 1].
TrainingExample draw_training_example(const ConceptDataset& ds, std::uint64_t seed, std::uint64_t index,
                                      double dropout);
bool label_dropped(std::uint64_t seed, std::uint64_t index, double dropout);

// Mean over samples of ‖v − v_target‖² (squared Frobenius norm per sample).
Tensor fm_loss(const SingleStreamModel& model, std::span<const FlowPath> batch, std::span<const Concept> labels,
               const GatedLoRA* lora = nullptr);

// Velocity field over a flattened state; used to plug models and analytic
// fields into the same integrator.
using VelocityField = std::function<std::vector<double>(std::span<const double> x, double t)>;

// Integrates dx/dt = v from t = 1 to t = 0 with `steps` uniform Euler steps.
std::vector<double> euler_integrate(const VelocityField& v, std::vector<double> x, std::size_t steps);

using InterventionFactory = std::function<std::optional<AttentionIntervention>(const UnifiedSequence&)>;

struct SampleRequest {
  Concept cond;
  std::size_t count = 1;
  std::size_t steps = 9;
  std::uint64_t seed = 0;
  const GatedLoRA* lora = nullptr;
  InterventionFactory intervention;  // optional
};

// Starting noise of sample i depends only on (seed, i).
std::vector<double> initial_noise(const ModelConfig& cfg, std::uint64_t seed, std::size_t index);

// count·n_image·d_data values, samples in order.
std::vector<double> sample_batch(const SingleStreamModel& model, const SampleRequest& req);
std::vector<double> euler_sample(const SingleStreamModel& model, Concept cond, std::size_t steps,
                                 const GatedLoRA* lora, std::uint64_t seed);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg);
  // Steps on the gradients stored in the parameters (missing = zero).
  void step();
  // Steps on an explicit flattened gradient in parameter order.
  void step(std::span<const double> flat_grad);
  std::size_t num_values() const;
  std::size_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

std::vector<double> flatten_grads(std::span<const Tensor> params);
std::vector<double> flatten_values(std::span<const Tensor> params);

struct BaseTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 64;
  AdamWConfig optim{.lr = 1e-3, .weight_decay = 0.0};
  double label_dropout = 0.1;
  std::uint64_t seed = 0;
};

struct BaseTrainResult {
  SingleStreamModel model;
  std::vector<double> loss_log;  // one entry per step
};

// Deterministic in (model config, dataset, cfg). Throws TrainingError with
// the step index if the loss stops being finite.
BaseTrainResult train_base(const ModelConfig& model_cfg, const ConceptDataset& ds, const BaseTrainConfig& cfg,
                           const std::function<void(std::size_t, double)>& on_step = {});

}  // namespace zerase
