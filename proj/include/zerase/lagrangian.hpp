// SPDX-License-Identifier: Apache-2.0
//
// Constrained erasure optimizer.
//
// Each step solves, to first order,
//   max_d  g_er·d − ½‖d‖²   s.t.  g_pr·d ≥ −ε
// whose solution is d = g_er + max(λ*, 0)·g_pr with
//   λ* = (−g_er·g_pr − ε) / ‖g_pr‖².
// The implicit controller replaces λ* by a dual ascent on the observed change
// of the preservation loss, g̃ = (L_pr(θ_{t−1}) − L_pr(θ_t))/α + ε, so only one
// backward pass is needed per step.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zerase/flow.hpp"
#include "zerase/model.hpp"
#include "zerase/objectives.hpp"
#include "zerase/rng.hpp"

namespace zerase {

class SingularityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct GradientPair {
  std::vector<double> g_er;
  std::vector<double> g_pr;
};

double dot(std::span<const double> a, std::span<const double> b);

// Throws SingularityError if ‖g_pr‖ = 0, DimensionError on length mismatch.
double lambda_star(const GradientPair& pair, double epsilon);
std::vector<double> surgery_direction(const GradientPair& pair, double epsilon);

struct DualUpdate {
  double lambda = 0.0;  // after the update
  double g_tilde = 0.0;
};

struct StepLog {
  std::size_t step = 0;  // 1-based
  double lambda = 0.0;   // weight applied to L_pr at this step
  std::optional<double> g_tilde;
  std::optional<double> lambda_star;
  double l_er = 0.0;
  double l_erase = 0.0;
  double l_attn = 0.0;
  double l_pr = 0.0;
  double d_norm2 = 0.0;
  double drift = 0.0;
  double bound = 0.0;
};

struct DualControllerState {
  double lambda = 0.0;
  double epsilon = 1e-3;
  double beta = 0.1;
  double alpha = 1e-3;
  std::optional<double> prev_pr_loss;
  std::vector<DualUpdate> updates;
  std::vector<StepLog> history;

  void validate() const;
};

double implicit_g_tilde(double pr_prev, double pr_curr, double alpha, double epsilon);

// g̃ from the observed change, then λ ← max(λ − β·g̃, 0). Throws ContractError
// when the state carries no previous preservation loss.
DualControllerState implicit_lambda_update(DualControllerState state, double pr_prev, double pr_curr);

struct ApproxGap {
  double g_true = 0.0;
  double g_tilde = 0.0;
  double bound = 0.0;
  double gap() const { return std::abs(g_tilde - g_true); }
};

// g = ∇L_pr(θ_{t−1})·d_{t−1} + ε against g̃ from the loss values, with the
// bound (G·α/2)‖d_{t−1}‖².
ApproxGap approximation_gap(std::span<const double> grad_pr_prev, std::span<const double> d_prev, double pr_prev,
                            double pr_curr, double alpha, double epsilon, double smoothness);

using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

// Running max of ‖∇f(θ₁) − ∇f(θ₂)‖/‖θ₁ − θ₂‖ over random pairs in the ball of
// the given radius around θ; one entry per sampled pair.
std::vector<double> smoothness_trace(const GradientFn& grad, std::span<const double> theta, std::size_t samples,
                                     double radius, Rng& rng);
double estimate_smoothness(const GradientFn& grad, std::span<const double> theta, std::size_t samples,
                           double radius, Rng& rng);

struct ConvergenceDiagnostics {
  double smoothness = 0.0;
  std::vector<double> stationarity;  // ‖d_t‖²
  std::vector<double> drift;         // L_pr(θ_t) − L_pr(θ_0)
  std::vector<double> bound;         // t·ε·α + (G·α²/2)·Σ_{s<t}‖d_s‖²
};

// Cumulative bound series for a stationarity series.
std::vector<double> drift_bound_series(std::span<const double> d_norm2, double epsilon, double alpha,
                                       double smoothness);

struct DriftRow {
  std::size_t step = 0;
  double drift = 0.0;
  double exact_bound = 0.0;
  double linear_bound = 0.0;  // t·ε·α
  bool violated = false;
};

struct DriftReport {
  std::vector<DriftRow> rows;
  std::size_t violations = 0;
};

DriftReport drift_report(const DualControllerState& state, const ConvergenceDiagnostics& diag);

// ---------------------------------------------------------------------------
// Quadratic testbed: L_er = ½(θ−a)ᵀP(θ−a), L_pr = ½(θ−b)ᵀQ(θ−b).

struct QuadraticProblem {
  std::size_t n = 2;
  std::vector<double> P, a, Q, b;  // P, Q row-major n×n, symmetric PSD
  std::vector<double> theta0;

  // P = I, a = (1.2, 3), Q = diag(3, 0.1), b = 0, θ₀ = (1, 0).
  static QuadraticProblem reference();

  double l_er(std::span<const double> th) const;
  double l_pr(std::span<const double> th) const;
  std::vector<double> grad_er(std::span<const double> th) const;
  std::vector<double> grad_pr(std::span<const double> th) const;
  // Largest eigenvalue of Q (the analytic smoothness constant of L_pr).
  double smoothness() const;
};

enum class DualMode { kImplicit, kExact };

struct QuadraticRunConfig {
  double alpha = 0.05;
  double beta = 0.1;
  double epsilon = 1e-3;
  std::size_t steps = 500;
  DualMode mode = DualMode::kImplicit;
};

struct QuadraticTrace {
  std::vector<double> lambda;       // weight used at each step
  std::vector<double> lambda_star;  // max(λ*, 0) at each iterate
  std::vector<double> d_norm2;
  std::vector<double> drift;        // after the step
  std::vector<double> bound;        // after the step
  std::vector<double> l_er, l_pr;   // before the step
  std::vector<ApproxGap> gaps;      // implicit mode, from step 2 on
  std::vector<double> gap_rounding; // fp allowance per gap entry
  double smoothness = 0.0;
};

// Plain descent θ ← θ − α·d. Implicit mode skips the λ update at the first step.
QuadraticTrace run_quadratic(const QuadraticProblem& qp, const QuadraticRunConfig& cfg);

// ---------------------------------------------------------------------------
// Erasure runs on the transformer.

enum class ErasureObjective { kFull, kErOnly, kPrOnly };

struct ErasureConfig {
  double alpha = 1e-3;
  double beta = 0.1;
  double epsilon = 1e-3;
  double attn_coef = 1.0;
  double weight_decay = 0.0;
  DualMode mode = DualMode::kImplicit;
  ErasureObjective objective = ErasureObjective::kFull;
  ErasureBatchConfig batch;
  std::vector<std::size_t> erase_set;     // empty = dataset default
  std::vector<std::size_t> preserve_set;  // empty = dataset default
  std::size_t lora_rank = 4;
  double lora_scale = 1.0;
  std::uint64_t seed = 0;
  bool probe_batch = false;  // fixed held-out batch for g̃
  std::size_t smoothness_samples = 4;
  double smoothness_radius = 1e-2;
};

std::string to_string(DualMode m);
std::string to_string(ErasureObjective o);
DualMode parse_dual_mode(const std::string& s);
ErasureObjective parse_objective(const std::string& s);

class ErasureRun {
 public:
  // Copies the base model and freezes it.
  ErasureRun(const SingleStreamModel& base, const ConceptDataset& ds, ErasureConfig cfg);

  // One iteration: draw batch, losses at θ_t, λ update (skipped at t = 1),
  // L_total = L_er + λ·L_pr, backward, AdamW step with learning rate α.
  const StepLog& step();
  void run(std::size_t steps, const std::function<void(const StepLog&)>& on_step = {});

  const GatedLoRA& lora() const { return lora_; }
  const DualControllerState& state() const { return state_; }
  const SingleStreamModel& frozen() const { return frozen_; }
  const ErasureConfig& config() const { return cfg_; }
  ConvergenceDiagnostics diagnostics() const;

 private:
  void init_smoothness();

  SingleStreamModel frozen_;
  const ConceptDataset* ds_;
  ErasureConfig cfg_;
  GatedLoRA lora_;
  std::vector<Tensor> lora_params_;
  AdamW opt_;
  DualControllerState state_;
  Rng shuffle_rng_;
  std::optional<ErasureBatch> probe_;
  double smoothness_ = 0.0;
  double d_norm2_sum_ = 0.0;
};

void set_flat_values(std::span<const Tensor> params, std::span<const double> values);

}  // namespace zerase
