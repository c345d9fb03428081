// SPDX-License-Identifier: Apache-2.0
#include "zerase/lagrangian.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace zerase {

namespace {

constexpr std::uint64_t kStreamShuffle = 0x53485546;
constexpr std::uint64_t kStreamLora = 0x4c4f5241;
constexpr std::uint64_t kStreamPick = 0x5049434b;
constexpr std::uint64_t kStreamSmooth = 0x534d4f4f;
constexpr std::uint64_t kProbeIndex = std::numeric_limits<std::uint64_t>::max();
constexpr std::uint64_t kSmoothIndex = kProbeIndex - 1;

void check_pair(const GradientPair& pair) {
  if (pair.g_er.size() != pair.g_pr.size())
    throw DimensionError("gradient pair lengths differ: " + std::to_string(pair.g_er.size()) + " vs " +
                         std::to_string(pair.g_pr.size()));
}

std::vector<double> matvec(const std::vector<double>& M, std::span<const double> x, std::span<const double> shift,
                           std::size_t n) {
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += M[i * n + j] * (x[j] - shift[j]);
  return out;
}

double quad_form(const std::vector<double>& M, std::span<const double> x, std::span<const double> shift,
                 std::size_t n) {
  const std::vector<double> mx = matvec(M, x, shift, n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (x[i] - shift[i]) * mx[i];
  return 0.5 * s;
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double lambda_star(const GradientPair& pair, double epsilon) {
  check_pair(pair);
  const double nn = dot(pair.g_pr, pair.g_pr);
  if (nn == 0.0) throw SingularityError("lambda_star: preservation gradient is zero");
  return (-dot(pair.g_er, pair.g_pr) - epsilon) / nn;
}

std::vector<double> surgery_direction(const GradientPair& pair, double epsilon) {
  const double lam = lambda_star(pair, epsilon);
  std::vector<double> d = pair.g_er;
  if (lam > 0.0)
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += lam * pair.g_pr[i];
  return d;
}

void DualControllerState::validate() const {
  if (!(epsilon > 0.0)) throw DomainError("epsilon must be > 0");
  if (!(beta > 0.0)) throw DomainError("beta must be > 0");
  if (!(alpha > 0.0)) throw DomainError("alpha must be > 0");
  if (!(lambda >= 0.0)) throw DomainError("lambda must be >= 0");
}

double implicit_g_tilde(double pr_prev, double pr_curr, double alpha, double epsilon) {
  return (pr_prev - pr_curr) / alpha + epsilon;
}

DualControllerState implicit_lambda_update(DualControllerState state, double pr_prev, double pr_curr) {
  if (!state.prev_pr_loss) throw ContractError("implicit_lambda_update: no previous preservation loss");
  const double g = implicit_g_tilde(pr_prev, pr_curr, state.alpha, state.epsilon);
  state.lambda = std::max(state.lambda - state.beta * g, 0.0);
  state.updates.push_back({state.lambda, g});
  return state;
}

ApproxGap approximation_gap(std::span<const double> grad_pr_prev, std::span<const double> d_prev, double pr_prev,
                            double pr_curr, double alpha, double epsilon, double smoothness) {
  ApproxGap g;
  g.g_true = dot(grad_pr_prev, d_prev) + epsilon;
  g.g_tilde = implicit_g_tilde(pr_prev, pr_curr, alpha, epsilon);
  g.bound = smoothness * alpha / 2.0 * dot(d_prev, d_prev);
  return g;
}

std::vector<double> smoothness_trace(const GradientFn& grad, std::span<const double> theta, std::size_t samples,
                                     double radius, Rng& rng) {
  if (!(radius > 0.0)) throw DomainError("estimate_smoothness: radius must be > 0");
  const std::size_t n = theta.size();
  auto point = [&] {
    std::vector<double> u(n);
    double nn = 0.0;
    for (double& v : u) {
      v = rng.normal();
      nn += v * v;
    }
    const double r = radius * rng.uniform() / std::max(std::sqrt(nn), 1e-300);
    for (std::size_t i = 0; i < n; ++i) u[i] = theta[i] + r * u[i];
    return u;
  };
  std::vector<double> trace;
  double best = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::vector<double> p1 = point(), p2 = point();
    const std::vector<double> g1 = grad(p1), g2 = grad(p2);
    double dg = 0.0, dp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dg += (g1[i] - g2[i]) * (g1[i] - g2[i]);
      dp += (p1[i] - p2[i]) * (p1[i] - p2[i]);
    }
    if (dp > 0.0) best = std::max(best, std::sqrt(dg / dp));
    trace.push_back(best);
  }
  return trace;
}

double estimate_smoothness(const GradientFn& grad, std::span<const double> theta, std::size_t samples,
                           double radius, Rng& rng) {
  const auto t = smoothness_trace(grad, theta, samples, radius, rng);
  return t.empty() ? 0.0 : t.back();
}

std::vector<double> drift_bound_series(std::span<const double> d_norm2, double epsilon, double alpha,
                                       double smoothness) {
  std::vector<double> out;
  out.reserve(d_norm2.size());
  double sum = 0.0;
  for (std::size_t t = 0; t < d_norm2.size(); ++t) {
    sum += d_norm2[t];
    out.push_back(static_cast<double>(t + 1) * epsilon * alpha + smoothness * alpha * alpha / 2.0 * sum);
  }
  return out;
}

DriftReport drift_report(const DualControllerState& state, const ConvergenceDiagnostics& diag) {
  if (diag.drift.size() != diag.stationarity.size())
    throw DimensionError("drift_report: drift and stationarity series differ in length");
  const auto bound = drift_bound_series(diag.stationarity, state.epsilon, state.alpha, diag.smoothness);
  DriftReport r;
  for (std::size_t t = 0; t < diag.drift.size(); ++t) {
    DriftRow row;
    row.step = t + 1;
    row.drift = diag.drift[t];
    row.exact_bound = bound[t];
    row.linear_bound = static_cast<double>(t + 1) * state.epsilon * state.alpha;
    row.violated = row.drift > row.exact_bound;
    r.violations += row.violated ? 1 : 0;
    r.rows.push_back(row);
  }
  return r;
}

// ---------------------------------------------------------------------------

QuadraticProblem QuadraticProblem::reference() {
  QuadraticProblem q;
  q.n = 2;
  q.P = {1.0, 0.0, 0.0, 1.0};
  q.a = {1.2, 3.0};
  q.Q = {3.0, 0.0, 0.0, 0.1};
  q.b = {0.0, 0.0};
  q.theta0 = {1.0, 0.0};
  return q;
}

double QuadraticProblem::l_er(std::span<const double> th) const { return quad_form(P, th, a, n); }
double QuadraticProblem::l_pr(std::span<const double> th) const { return quad_form(Q, th, b, n); }
std::vector<double> QuadraticProblem::grad_er(std::span<const double> th) const { return matvec(P, th, a, n); }
std::vector<double> QuadraticProblem::grad_pr(std::span<const double> th) const { return matvec(Q, th, b, n); }

double QuadraticProblem::smoothness() const {
  // Power iteration on the symmetric PSD matrix Q.
  std::vector<double> v(n, 1.0), zero(n, 0.0);
  double lam = 0.0;
  for (int it = 0; it < 1000; ++it) {
    std::vector<double> w = matvec(Q, v, zero, n);
    const double norm = std::sqrt(dot(w, w));
    if (norm == 0.0) return 0.0;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
    if (std::abs(norm - lam) <= 1e-15 * norm) {
      lam = norm;
      break;
    }
    lam = norm;
  }
  return lam;
}

QuadraticTrace run_quadratic(const QuadraticProblem& qp, const QuadraticRunConfig& cfg) {
  QuadraticTrace tr;
  tr.smoothness = qp.smoothness();
  const double G = tr.smoothness;
  std::vector<double> th = qp.theta0;
  const double pr0 = qp.l_pr(th);
  DualControllerState state;
  state.alpha = cfg.alpha;
  state.beta = cfg.beta;
  state.epsilon = cfg.epsilon;
  state.validate();
  std::vector<double> prev_th, prev_d;
  double sum_d = 0.0;
  constexpr double kUlp = std::numeric_limits<double>::epsilon();

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    GradientPair pair{qp.grad_er(th), qp.grad_pr(th)};
    const double nn = dot(pair.g_pr, pair.g_pr);
    const double ls = nn == 0.0 ? 0.0 : std::max(lambda_star(pair, cfg.epsilon), 0.0);
    tr.lambda_star.push_back(ls);
    const double cur = qp.l_pr(th);
    tr.l_er.push_back(qp.l_er(th));
    tr.l_pr.push_back(cur);

    std::vector<double> d;
    if (cfg.mode == DualMode::kExact) {
      d = nn == 0.0 ? pair.g_er : surgery_direction(pair, cfg.epsilon);
      tr.lambda.push_back(ls);
    } else {
      if (state.prev_pr_loss) {
        const double prev = *state.prev_pr_loss;
        tr.gaps.push_back(approximation_gap(qp.grad_pr(prev_th), prev_d, prev, cur, cfg.alpha, cfg.epsilon, G));
        tr.gap_rounding.push_back(8.0 * kUlp * (std::abs(prev) + std::abs(cur)) / cfg.alpha);
        state = implicit_lambda_update(std::move(state), prev, cur);
      }
      state.prev_pr_loss = cur;
      d = pair.g_er;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += state.lambda * pair.g_pr[i];
      tr.lambda.push_back(state.lambda);
    }
    const double dn = dot(d, d);
    tr.d_norm2.push_back(dn);
    sum_d += dn;
    prev_th = th;
    prev_d = d;
    for (std::size_t i = 0; i < th.size(); ++i) th[i] -= cfg.alpha * d[i];
    tr.drift.push_back(qp.l_pr(th) - pr0);
    tr.bound.push_back(static_cast<double>(t + 1) * cfg.epsilon * cfg.alpha + G * cfg.alpha * cfg.alpha / 2.0 * sum_d);
  }
  return tr;
}

// ---------------------------------------------------------------------------

std::string to_string(DualMode m) { return m == DualMode::kExact ? "exact" : "implicit"; }

std::string to_string(ErasureObjective o) {
  switch (o) {
    case ErasureObjective::kFull: return "full";
    case ErasureObjective::kErOnly: return "er-only";
    case ErasureObjective::kPrOnly: return "pr-only";
  }
  return "full";
}

DualMode parse_dual_mode(const std::string& s) {
  if (s == "implicit") return DualMode::kImplicit;
  if (s == "exact") return DualMode::kExact;
  throw DomainError("dual mode must be 'implicit' or 'exact', got '" + s + "'");
}

ErasureObjective parse_objective(const std::string& s) {
  if (s == "full") return ErasureObjective::kFull;
  if (s == "er-only") return ErasureObjective::kErOnly;
  if (s == "pr-only") return ErasureObjective::kPrOnly;
  throw DomainError("objective must be 'full', 'er-only' or 'pr-only', got '" + s + "'");
}

void set_flat_values(std::span<const Tensor> params, std::span<const double> values) {
  std::size_t off = 0;
  for (const Tensor& p : params) {
    Tensor t = p;
    auto w = t.mutable_data();
    if (off + w.size() > values.size()) throw DimensionError("set_flat_values: too few values");
    std::copy(values.begin() + off, values.begin() + off + w.size(), w.begin());
    off += w.size();
  }
  if (off != values.size()) throw DimensionError("set_flat_values: too many values");
}

namespace {

SingleStreamModel frozen_copy(const SingleStreamModel& base) {
  SingleStreamModel m = base.clone();
  m.set_trainable(false);
  return m;
}

ErasureConfig resolve(ErasureConfig cfg, const ConceptDataset& ds) {
  if (cfg.erase_set.empty()) cfg.erase_set = ds.default_erase_set();
  if (cfg.preserve_set.empty()) cfg.preserve_set = ds.default_preserve_set();
  if (cfg.lora_rank == 0) throw DomainError("lora_rank must be >= 1");
  if (cfg.attn_coef < 0.0) throw DomainError("attn_coef must be >= 0");
  for (std::size_t c : cfg.erase_set) (void)ds.concept_by_id(c);
  for (std::size_t c : cfg.preserve_set) (void)ds.concept_by_id(c);
  return cfg;
}

}  // namespace

ErasureRun::ErasureRun(const SingleStreamModel& base, const ConceptDataset& ds, ErasureConfig cfg)
    : frozen_(frozen_copy(base)),
      ds_(&ds),
      cfg_(resolve(std::move(cfg), ds)),
      lora_(GatedLoRA::init(base.config(), cfg_.lora_rank, cfg_.lora_scale, derive_seed(cfg_.seed, kStreamLora))),
      lora_params_(lora_.parameters()),
      opt_(lora_params_, AdamWConfig{.lr = cfg_.alpha, .weight_decay = cfg_.weight_decay}),
      shuffle_rng_(derive_seed(cfg_.seed, kStreamShuffle)) {
  state_.alpha = cfg_.alpha;
  state_.beta = cfg_.beta;
  state_.epsilon = cfg_.epsilon;
  state_.validate();
  lora_.set_trainable(true);
  if (cfg_.probe_batch)
    probe_ = make_erasure_batch(frozen_, ds, cfg_.erase_set.front(), cfg_.preserve_set.front(), cfg_.batch,
                                cfg_.seed, kProbeIndex);
  init_smoothness();
}

void ErasureRun::init_smoothness() {
  if (cfg_.smoothness_samples == 0) return;
  const ErasureBatch b = make_erasure_batch(frozen_, *ds_, cfg_.erase_set.front(), cfg_.preserve_set.front(),
                                            cfg_.batch, cfg_.seed, kSmoothIndex);
  const std::vector<double> saved = flatten_values(lora_params_);
  GradientFn grad = [&](std::span<const double> th) {
    set_flat_values(lora_params_, th);
    lora_.zero_grad();
    backward(preserve_loss(frozen_, &lora_, b));
    return flatten_grads(lora_params_);
  };
  Rng rng(derive_seed(cfg_.seed, kStreamSmooth));
  smoothness_ = estimate_smoothness(grad, saved, cfg_.smoothness_samples, cfg_.smoothness_radius, rng);
  set_flat_values(lora_params_, saved);
  lora_.zero_grad();
}

const StepLog& ErasureRun::step() {
  const std::size_t t = state_.history.size() + 1;
  Rng pick(derive_seed(cfg_.seed, kStreamPick, t));
  const std::size_t c_er = cfg_.erase_set[pick.below(cfg_.erase_set.size())];
  const std::size_t c_pr = cfg_.preserve_set[pick.below(cfg_.preserve_set.size())];
  const ErasureBatch batch = make_erasure_batch(frozen_, *ds_, c_er, c_pr, cfg_.batch, cfg_.seed, t);

  lora_.zero_grad();
  const ErasureLosses L = compute_losses(frozen_, &lora_, batch, shuffle_rng_, cfg_.attn_coef);
  StepLog log;
  log.step = t;
  log.l_erase = L.erase.item();
  log.l_attn = L.attn.item();
  log.l_er = L.er.item();
  log.l_pr = L.pr.item();
  if (!std::isfinite(log.l_er) || !std::isfinite(log.l_pr))
    throw TrainingError("erase_step: non-finite loss at step " + std::to_string(t) +
                            " (last finite lambda " + std::to_string(state_.lambda) + ")",
                        t);

  double pr_obs = log.l_pr;
  if (probe_) {
    NoGradGuard guard;
    pr_obs = preserve_loss(frozen_, &lora_, *probe_).item();
  }

  const bool dual_active = cfg_.objective == ErasureObjective::kFull;
  std::vector<double> direction;
  if (cfg_.mode == DualMode::kExact && dual_active) {
    backward(L.er);
    GradientPair pair;
    pair.g_er = flatten_grads(lora_params_);
    lora_.zero_grad();
    backward(L.pr);
    pair.g_pr = flatten_grads(lora_params_);
    lora_.zero_grad();
    double ls = 0.0;
    if (dot(pair.g_pr, pair.g_pr) > 0.0) ls = std::max(lambda_star(pair, cfg_.epsilon), 0.0);
    log.lambda_star = ls;
    log.lambda = ls;
    state_.lambda = ls;
    direction = pair.g_er;
    for (std::size_t i = 0; i < direction.size(); ++i) direction[i] += ls * pair.g_pr[i];
  } else {
    if (dual_active && state_.prev_pr_loss) {
      state_ = implicit_lambda_update(std::move(state_), *state_.prev_pr_loss, pr_obs);
      log.g_tilde = state_.updates.back().g_tilde;
    }
    Tensor total;
    switch (cfg_.objective) {
      case ErasureObjective::kFull:
        log.lambda = state_.lambda;
        total = state_.lambda > 0.0 ? add(L.er, scale(L.pr, state_.lambda)) : L.er;
        break;
      case ErasureObjective::kErOnly:
        total = L.er;
        break;
      case ErasureObjective::kPrOnly:
        total = L.pr;
        break;
    }
    backward(total);
    direction = flatten_grads(lora_params_);
    lora_.zero_grad();
  }
  state_.prev_pr_loss = pr_obs;

  for (double v : direction)
    if (!std::isfinite(v))
      throw TrainingError("erase_step: non-finite gradient at step " + std::to_string(t), t);
  opt_.step(direction);

  // Drift is observed before this step's update, i.e. after t − 1 updates.
  // The zero-initialized adapter reproduces the frozen model, so L_pr(θ_0) = 0.
  log.drift = pr_obs;
  log.bound = static_cast<double>(t - 1) * cfg_.epsilon * cfg_.alpha +
              smoothness_ * cfg_.alpha * cfg_.alpha / 2.0 * d_norm2_sum_;
  log.d_norm2 = dot(direction, direction);
  d_norm2_sum_ += log.d_norm2;
  state_.history.push_back(log);
  return state_.history.back();
}

void ErasureRun::run(std::size_t steps, const std::function<void(const StepLog&)>& on_step) {
  for (std::size_t i = 0; i < steps; ++i) {
    const StepLog& l = step();
    if (on_step) on_step(l);
  }
}

ConvergenceDiagnostics ErasureRun::diagnostics() const {
  ConvergenceDiagnostics d;
  d.smoothness = smoothness_;
  // Drift after k updates is logged at step k + 1.
  for (std::size_t k = 1; k < state_.history.size(); ++k) {
    d.stationarity.push_back(state_.history[k - 1].d_norm2);
    d.drift.push_back(state_.history[k].drift);
  }
  d.bound = drift_bound_series(d.stationarity, state_.epsilon, state_.alpha, d.smoothness);
  return d;
}

}  // namespace zerase
