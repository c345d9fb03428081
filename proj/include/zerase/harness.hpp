// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, run directories and the pipeline phases behind the CLI.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "zerase/flow.hpp"
#include "zerase/interventions.hpp"
#include "zerase/lagrangian.hpp"
#include "zerase/metrics.hpp"

namespace zerase {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string code_version();

struct RunConfig {
  std::string name = "default";
  std::string dataset = "two-gaussians";
  // Architecture keys of the model (d_model, n_heads, n_layers, n_text,
  // time_embed_dim, ffn_hidden, concept_slot, perturb_sigma); the data
  // layout and vocabulary come from the dataset.
  nlohmann::json model = nlohmann::json::object();

  BaseTrainConfig base;
  std::size_t base_log_every = 10;

  ErasureConfig erase;
  std::size_t erase_steps = 1000;
  std::vector<double> sweep_epsilons;  // non-empty: `erase` also runs an ε sweep
  std::vector<std::uint64_t> sweep_seeds{0};

  struct Sample {
    std::optional<std::size_t> concept_id;  // nullopt = unconditional
    std::size_t count = 400;
    std::size_t steps = 9;
    std::uint64_t seed = 1001;
    bool use_lora = true;
  } sample;

  EvalConfig eval;

  struct Merge {
    std::vector<std::string> inputs;
    std::vector<double> weights;  // empty = 1/N each
  } merge;

  struct Bypass {
    std::size_t concept_id = 0;
    std::optional<std::size_t> perturbed_id;  // nullopt = dataset's near-duplicate of concept_id
    BypassConfig cfg;
  } bypass;

  LocalizeConfig localize;

  struct Diagnose {
    double alpha = 0.05;
    double beta = 0.1;
    std::vector<double> epsilons{1e-3, 1e-2};
    std::size_t lemma_steps = 500;
    std::size_t drift_steps = 500;
    std::size_t stationarity_steps = 2000;
    std::size_t agreement_steps = 200;
    double agreement_band = 0.1;
  } diagnose;

  struct Paths {
    std::string run_dir;    // empty = <run root>/<name>
    std::string base_ckpt;  // empty = <run_dir>/base.ckpt
    std::string lora_ckpt;  // empty = <run_dir>/lora.ckpt
  } paths;

  // Parses a config document over the defaults. Unknown keys and type
  // mismatches throw ValidationError naming the key.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::filesystem::path& p);
  nlohmann::json to_json() const;
  void validate() const;
  // Hash of everything except `name` and `paths`.
  std::string hash() const;

  ConceptDataset dataset_object() const;
  ModelConfig model_config() const;

  std::filesystem::path run_dir() const;
  std::filesystem::path base_path() const;
  std::filesystem::path lora_path() const;
};

// Applies "a.b.c=value" overrides (value parsed as JSON, else taken as a string).
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Root for run directories: $ZERASE_RUN_ROOT if set, else "runs".
std::filesystem::path run_root();

// Creates the run directory and writes config.json.
std::filesystem::path prepare_run_dir(const RunConfig& cfg);

// Append-only JSON-lines writer stamping wall-clock and config hash.
class MetricsLog {
 public:
  MetricsLog(const std::filesystem::path& path, std::string config_hash);
  void append(nlohmann::json record);

 private:
  std::filesystem::path path_;
  std::string hash_;
};

struct PhaseResult {
  bool passed = true;
  nlohmann::json summary = nlohmann::json::object();
};

PhaseResult phase_train_base(const RunConfig& cfg, std::ostream& log);
PhaseResult phase_erase(const RunConfig& cfg, std::ostream& log);
PhaseResult phase_sample(const RunConfig& cfg, std::ostream& log);
PhaseResult phase_eval(const RunConfig& cfg, std::ostream& log);
PhaseResult phase_merge(const RunConfig& cfg, std::ostream& log);
PhaseResult phase_diagnose(const RunConfig& cfg, bool quadratic, std::ostream& log);
PhaseResult phase_bypass_demo(const RunConfig& cfg, std::ostream& log);
PhaseResult phase_plot(const RunConfig& cfg, std::ostream& log);

// Quadratic-testbed verification suite (also used by the acceptance binary).
struct QuadraticCheck {
  std::string name;
  bool passed = false;
  std::size_t violations = 0;
  std::string detail{};
};
std::vector<QuadraticCheck> run_quadratic_suite(const RunConfig::Diagnose& d);

// Writes samples as CSV with columns sample,row,x0,x1,...
void write_samples_csv(const std::filesystem::path& p, std::span<const double> x, std::size_t n_image,
                       std::size_t d_data);

// Plot emission for a run directory (needs metrics.jsonl).
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& run_dir);

}  // namespace zerase
