// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion with its runtime
// and exits non-zero if any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"
#include "zerase/harness.hpp"
#include "zerase/merge.hpp"

using namespace zerase;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool passed = false;
  std::string detail;
  double seconds = 0.0;  // standalone cost, including reused shared work
  double limit = 0.0;
};

int g_failures = 0;

void report(int id, const std::string& title, const Outcome& o) {
  const bool in_time = o.seconds < o.limit;
  const bool ok = o.passed && in_time;
  if (!ok) ++g_failures;
  std::printf("[%s] criterion %d (%s): %s; runtime %.1fs (limit %.0fs%s)\n", ok ? "PASS" : "FAIL", id, title.c_str(),
              o.detail.c_str(), o.seconds, o.limit, in_time ? "" : ", exceeded");
  std::fflush(stdout);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

// --- 1 ----------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  Rng rng(20240101);
  double worst = 0.0;
  std::string worst_name;
  std::size_t cases = 0, instances = 0;
  auto run = [&](const std::vector<zt::GradCase>& cs) {
    for (const auto& c : cs) {
      ++cases;
      for (int i = 0; i < 100; ++i, ++instances) {
        const double e = c.run(rng);
        if (!(e <= worst)) {
          worst = e;
          worst_name = c.name;
        }
      }
    }
  };
  run(zt::primitive_cases());
  run(zt::loss_cases());
  bool detach_ok = true;
  for (int i = 0; i < 100; ++i) detach_ok = detach_ok && zt::detach_blocks_gradient(rng);
  Outcome o;
  o.passed = worst < 1e-5 && detach_ok;
  o.detail = std::to_string(cases) + " cases x 100 instances, max rel err " + fmt(worst) + " (" + worst_name +
             "), detach " + (detach_ok ? "exact" : "LEAKS");
  o.seconds = seconds_since(t0);
  o.limit = 60;
  return o;
}

// --- 2 ----------------------------------------------------------------------

Outcome gating() {
  const auto t0 = Clock::now();
  Rng rng(77);
  int img = 0, zero = 0;
  for (int i = 0; i < 100; ++i) {
    const auto g = zt::gating_trial(rng);
    img += g.image_rows_bitwise;
    zero += g.zero_down_bitwise;
  }
  Outcome o;
  o.passed = img == 100 && zero == 100;
  o.detail = "image rows bitwise " + std::to_string(img) + "/100, down=0 forward bitwise " + std::to_string(zero) + "/100";
  o.seconds = seconds_since(t0);
  o.limit = 10;
  return o;
}

// --- 3 ----------------------------------------------------------------------

Outcome closed_form_dual() {
  const auto t0 = Clock::now();
  Rng rng(3);
  double worst = 0.0, worst_kkt = 0.0;
  int active = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.below(8);
    const GradientPair p{zt::randn(rng, n), zt::randn(rng, n)};
    const double eps = std::pow(10.0, rng.uniform(-4.0, 0.0));
    const auto d = surgery_direction(p, eps);
    worst = std::max(worst, zt::rel_err(d, zt::qp_oracle(p.g_er, p.g_pr, eps)));
    if (lambda_star(p, eps) > 0.0) {
      ++active;
      worst_kkt = std::max(worst_kkt, std::abs(dot(p.g_pr, d) + eps) / eps);
    }
  }
  Outcome o;
  o.passed = worst < 1e-6 && worst_kkt < 1e-10;
  o.detail = "1000 pairs, max rel err vs QP " + fmt(worst) + ", " + std::to_string(active) +
             " active, max KKT rel err " + fmt(worst_kkt);
  o.seconds = seconds_since(t0);
  o.limit = 30;
  return o;
}

// --- 4, 5, 6, 12 ------------------------------------------------------------

struct QuadOutcomes {
  Outcome lemma, drift, stationarity, agreement;
};

QuadOutcomes quadratic() {
  RunConfig::Diagnose d;
  d.lemma_steps = 501;  // 500 gaps
  d.drift_steps = 500;
  d.stationarity_steps = 2000;
  d.agreement_steps = 200;
  d.epsilons = {1e-3, 1e-2};
  QuadOutcomes q;
  auto t0 = Clock::now();
  std::map<std::string, QuadraticCheck> by;
  for (auto& c : run_quadratic_suite(d)) by[c.name] = c;
  const double all = seconds_since(t0);
  auto to = [&](std::initializer_list<std::string> names, double limit) {
    Outcome o;
    o.passed = true;
    for (const auto& n : names) {
      const auto it = by.find(n);
      if (it == by.end()) {
        o.passed = false;
        o.detail += n + " missing; ";
        continue;
      }
      o.passed = o.passed && it->second.passed;
      o.detail += (o.detail.empty() ? "" : "; ") + n + ": " + it->second.detail;
    }
    o.seconds = all;
    o.limit = limit;
    return o;
  };
  q.lemma = to({"approximation_lemma"}, 10);
  q.drift = to({"drift_bound_eps_0.001", "drift_bound_eps_0.01"}, 10);
  q.stationarity = to({"pareto_stationarity"}, 10);
  q.agreement = to({"dual_agreement"}, 60);
  return q;
}

// --- shared transformer runs -------------------------------------------------

struct Base {
  RunConfig cfg;
  ConceptDataset ds;
  SingleStreamModel model;
  double seconds;
};

Base train(const std::string& dataset) {
  const auto t0 = Clock::now();
  RunConfig cfg = RunConfig::from_json({{"dataset", dataset}});
  cfg.validate();
  ConceptDataset ds = cfg.dataset_object();
  auto res = train_base(cfg.model_config(), ds, cfg.base);
  return Base{cfg, ds, std::move(res.model), seconds_since(t0)};
}

struct RunResult {
  GatedLoRA lora;
  double efficacy = 0.0;      // to_original of the erased concept
  double floor_er = 0.0;      // its pre-erasure self-distance
  double preservation = 0.0;  // before/after of the preserved concept
  double floor_pr = 0.0;
  double seconds = 0.0;
};

RunResult erase_and_eval(const Base& b, BaseSampleCache& cache, ErasureObjective obj, double eps, std::uint64_t seed,
                         std::vector<std::size_t> er, std::vector<std::size_t> pr, bool evaluate = true) {
  const auto t0 = Clock::now();
  ErasureConfig ec = b.cfg.erase;
  ec.objective = obj;
  ec.epsilon = eps;
  ec.seed = seed;
  ec.erase_set = er;
  ec.preserve_set = pr;
  ErasureRun run(b.model, b.ds, ec);
  run.run(b.cfg.erase_steps);
  RunResult r{run.lora().clone()};
  if (evaluate) {
    const auto rep = eval_erasure(cache, &r.lora, er, pr);
    r.efficacy = rep.get(Concept{er.front()}).to_original;
    r.floor_er = rep.get(Concept{er.front()}).noise_floor;
    r.preservation = rep.get(Concept{pr.front()}).before_after;
    r.floor_pr = rep.get(Concept{pr.front()}).noise_floor;
  }
  r.seconds = seconds_since(t0);
  return r;
}

}  // namespace

int main() {
  std::printf("zerase acceptance suite (%s)\n", code_version().c_str());
  std::fflush(stdout);

  report(1, "gradients", gradients());
  report(2, "stream gating", gating());
  report(3, "closed-form dual", closed_form_dual());
  const auto q = quadratic();
  report(4, "approximation lemma", q.lemma);
  report(5, "drift bound", q.drift);
  report(6, "stationarity", q.stationarity);

  // Two-Gaussians reference checkpoint shared by 7-10.
  const Base g2 = train("two-gaussians");
  std::printf("  base two-gaussians: %zu steps in %.1fs\n", g2.cfg.base.steps, g2.seconds);
  std::fflush(stdout);
  const auto er = g2.ds.default_erase_set(), pr = g2.ds.default_preserve_set();
  BaseSampleCache cache(g2.model, g2.cfg.eval);
  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  auto sweep = [&](ErasureObjective obj, double eps) {
    std::vector<RunResult> rs;
    for (auto s : seeds) rs.push_back(erase_and_eval(g2, cache, obj, eps, s, er, pr));
    return rs;
  };
  auto med = [](const std::vector<RunResult>& rs, double RunResult::*f) {
    std::vector<double> v;
    for (const auto& r : rs) v.push_back(r.*f);
    return median(v);
  };
  auto cost = [](const std::vector<RunResult>& rs) {
    double s = 0.0;
    for (const auto& r : rs) s += r.seconds;
    return s;
  };

  const auto full = sweep(ErasureObjective::kFull, 1e-3);
  {
    const double eff = med(full, &RunResult::efficacy), f_er = med(full, &RunResult::floor_er);
    const double pres = med(full, &RunResult::preservation), f_pr = med(full, &RunResult::floor_pr);
    Outcome o;
    o.passed = eff >= 10.0 * f_er && pres < 3.0 * f_pr;
    o.detail = "median efficacy " + fmt(eff) + " vs 10x floor " + fmt(10 * f_er) + " (ratio " + fmt(eff / f_er) +
               "), median preservation " + fmt(pres) + " vs 3x floor " + fmt(3 * f_pr) + " (ratio " +
               fmt(pres / f_pr) + ")";
    o.seconds = g2.seconds + cost(full);
    o.limit = 300;
    report(7, "end-to-end erasure", o);
  }
  {
    const auto lo = sweep(ErasureObjective::kFull, 1e-4);
    const auto hi = sweep(ErasureObjective::kFull, 1e-2);
    const double e[3] = {med(lo, &RunResult::efficacy), med(full, &RunResult::efficacy), med(hi, &RunResult::efficacy)};
    const double p[3] = {med(lo, &RunResult::preservation), med(full, &RunResult::preservation),
                         med(hi, &RunResult::preservation)};
    Outcome o;
    o.passed = e[0] <= e[1] && e[1] <= e[2] && p[0] <= p[1] && p[1] <= p[2];
    o.detail = "eps 1e-4/1e-3/1e-2: median efficacy " + fmt(e[0], 8) + " / " + fmt(e[1], 8) + " / " + fmt(e[2], 8) +
               ", median preservation " + fmt(p[0], 6) + " / " + fmt(p[1], 6) + " / " + fmt(p[2], 6);
    o.seconds = g2.seconds + cost(lo) + cost(full) + cost(hi);
    o.limit = 900;
    report(8, "epsilon monotonicity", o);
  }
  {
    const auto t0 = Clock::now();
    const auto pert = g2.ds.perturbed_of(g2.cfg.bypass.concept_id);
    BypassReport rep;
    Outcome o;
    if (pert) {
      rep = bypass_demo(g2.model, g2.cfg.bypass.concept_id, *pert, g2.cfg.bypass.cfg);
      o.passed = rep.bypass_ordering();
    }
    o.detail = "ED(perturbed-zeroed, plain) " + fmt(rep.perturbed_to_plain) + " vs ED(zeroed, plain) " +
               fmt(rep.zeroed_to_plain);
    o.seconds = g2.seconds + seconds_since(t0);
    o.limit = 60;
    report(9, "bypass", o);
  }
  {
    const auto er_only = sweep(ErasureObjective::kErOnly, 1e-3);
    const auto pr_only = sweep(ErasureObjective::kPrOnly, 1e-3);
    const double p_full = med(full, &RunResult::preservation), p_er = med(er_only, &RunResult::preservation);
    const double e_full = med(full, &RunResult::efficacy), e_pr = med(pr_only, &RunResult::efficacy);
    Outcome o;
    o.passed = p_er > p_full && e_pr < e_full;
    o.detail = "preservation er-only " + fmt(p_er) + " vs full " + fmt(p_full) + ", efficacy pr-only " + fmt(e_pr) +
               " vs full " + fmt(e_full);
    o.seconds = g2.seconds + cost(full) + cost(er_only) + cost(pr_only);
    o.limit = 600;
    report(10, "ablations", o);
  }
  {
    const Base g3 = train("three-gaussians");
    const auto t0 = Clock::now();
    BaseSampleCache c3(g3.model, g3.cfg.eval);
    const std::vector<std::size_t> keep{2};
    const auto a = erase_and_eval(g3, c3, ErasureObjective::kFull, 1e-3, 0, {0}, keep, false);
    const auto b = erase_and_eval(g3, c3, ErasureObjective::kFull, 1e-3, 0, {1}, keep, false);
    const std::vector<GatedLoRA> parts{a.lora, b.lora};
    const GatedLoRA merged = merge(parts, std::vector<double>{0.5, 0.5});
    const std::vector<std::size_t> both{0, 1};
    const auto rep = eval_erasure(c3, &merged, both, keep);
    const auto& ca = rep.get(Concept{0});
    const auto& cb = rep.get(Concept{1});
    const auto& cc = rep.get(Concept{2});
    Outcome o;
    o.passed = ca.efficacy_ratio() >= 2.0 && cb.efficacy_ratio() >= 2.0 && cc.preservation_ratio() < 3.0;
    o.detail = "merged w=1/2: efficacy ratio A " + fmt(ca.efficacy_ratio()) + ", B " + fmt(cb.efficacy_ratio()) +
               " (need >= 2), preservation ratio C " + fmt(cc.preservation_ratio()) + " (need < 3)";
    o.seconds = g3.seconds + seconds_since(t0);
    o.limit = 600;
    report(11, "merge", o);
  }
  report(12, "dual agreement", q.agreement);

  std::printf("%s: %d criteria failed\n", g_failures ? "FAIL" : "PASS", g_failures);
  return g_failures ? 1 : 0;
}
