// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end over the C API.
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "zerase/zerase.h"

namespace {

constexpr int kExitCheckFailed = 10;

struct Common {
  std::string config;
  std::string run_dir;
  std::string name;
  std::vector<std::string> sets;
};

template <class T>
std::string to_text(const T& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Options that map onto config keys; only those the user gave are applied.
struct Mapped {
  std::vector<std::pair<std::string, std::function<std::optional<std::string>()>>> items;

  template <class T>
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto val = std::make_shared<std::optional<T>>();
    app->add_option(flag, *val, help);
    items.emplace_back(key, [val]() -> std::optional<std::string> {
      if (!*val) return std::nullopt;
      return to_text(**val);
    });
  }
  void add_string(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto val = std::make_shared<std::optional<std::string>>();
    app->add_option(flag, *val, help);
    items.emplace_back(key, [val]() -> std::optional<std::string> {
      if (!*val) return std::nullopt;
      return nlohmann_free_quote(**val);
    });
  }
  void add_flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& value,
                const std::string& help) {
    auto on = std::make_shared<bool>(false);
    app->add_flag(flag, *on, help);
    items.emplace_back(key, [on, value]() -> std::optional<std::string> {
      if (!*on) return std::nullopt;
      return value;
    });
  }

  static std::string nlohmann_free_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
      if (c == '"' || c == '\\') out.push_back('\\');
      out.push_back(c);
    }
    return out + "\"";
  }
};

void log_line(const char* line, void*) {
  std::cout << line << '\n' << std::flush;
}

int report(zr_status s) {
  std::cerr << "error (" << zr_status_name(s) << "): " << zr_last_error() << '\n';
  return static_cast<int>(s);
}

int run(const Common& c, const std::vector<std::string>& extra, zr_phase phase, bool print_config = false) {
  zr_session* s = nullptr;
  zr_status st = c.config.empty() ? zr_session_create(nullptr, &s) : zr_session_from_file(c.config.c_str(), &s);
  if (st != ZR_OK) return report(st);
  std::vector<std::string> sets;
  if (!c.name.empty()) sets.push_back("name=" + Mapped::nlohmann_free_quote(c.name));
  if (!c.run_dir.empty()) sets.push_back("paths.run_dir=" + Mapped::nlohmann_free_quote(c.run_dir));
  sets.insert(sets.end(), extra.begin(), extra.end());
  sets.insert(sets.end(), c.sets.begin(), c.sets.end());
  for (const auto& a : sets)
    if ((st = zr_session_set(s, a.c_str())) != ZR_OK) {
      zr_session_free(s);
      return report(st);
    }
  if (print_config) {
    char* j = nullptr;
    if ((st = zr_session_config(s, &j)) != ZR_OK) {
      zr_session_free(s);
      return report(st);
    }
    std::cout << j << '\n';
    zr_string_free(j);
    zr_session_free(s);
    return 0;
  }
  int passed = 1;
  st = zr_run_phase(s, phase, log_line, nullptr, &passed, nullptr);
  zr_session_free(s);
  if (st != ZR_OK) return report(st);
  return passed ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zerase: concept erasure for single-stream flow-matching transformers"};
  app.set_version_flag("--version", std::string(zr_version()));
  app.require_subcommand(1);

  Common common;
  struct Sub {
    CLI::App* app;
    zr_phase phase;
    Mapped mapped;
    bool print_config = false;
  };
  std::vector<std::unique_ptr<Sub>> subs;

  auto make = [&](const std::string& name, const std::string& help, zr_phase phase) -> Sub& {
    auto sub = std::make_unique<Sub>();
    sub->app = app.add_subcommand(name, help);
    sub->phase = phase;
    sub->app->add_option("-c,--config", common.config, "JSON run config")->check(CLI::ExistingFile);
    sub->app->add_option("--run-dir", common.run_dir, "run directory (default $ZERASE_RUN_ROOT/<name>)");
    sub->app->add_option("--name", common.name, "run name");
    sub->app->add_option("--set", common.sets, "config override key=value (repeatable)");
    sub->app->add_flag("--print-config", sub->print_config, "print the resolved config and exit");
    subs.push_back(std::move(sub));
    return *subs.back();
  };

  {
    Sub& s = make("train-base", "train the base velocity model", ZR_PHASE_TRAIN_BASE);
    s.mapped.add_string(s.app, "--dataset", "dataset", "two-gaussians | ring-vs-blob | three-gaussians");
    s.mapped.add<std::size_t>(s.app, "--steps", "base.steps", "training steps");
    s.mapped.add<std::uint64_t>(s.app, "--seed", "base.seed", "training seed");
    s.mapped.add<double>(s.app, "--lr", "base.lr", "learning rate");
  }
  {
    Sub& s = make("erase", "train an erasure adapter", ZR_PHASE_ERASE);
    s.mapped.add_string(s.app, "--dataset", "dataset", "dataset name");
    s.mapped.add<double>(s.app, "--alpha", "erase.alpha", "learning rate");
    s.mapped.add<double>(s.app, "--beta", "erase.beta", "dual step size");
    s.mapped.add<double>(s.app, "--epsilon", "erase.epsilon", "preservation slack");
    s.mapped.add<double>(s.app, "--eta", "erase.eta", "guidance strength of the erasure target");
    s.mapped.add<std::size_t>(s.app, "--steps", "erase.steps", "erasure steps");
    s.mapped.add<std::uint64_t>(s.app, "--seed", "erase.seed", "erasure seed");
    s.mapped.add<std::size_t>(s.app, "--rank", "erase.rank", "adapter rank");
    s.mapped.add_string(s.app, "--objective", "erase.objective", "full | er-only | pr-only");
    s.mapped.add_flag(s.app, "--exact-dual", "erase.mode", "\"exact\"", "use the closed-form dual (two backward passes)");
    s.mapped.add_string(s.app, "--base", "paths.base_ckpt", "base checkpoint");
    s.mapped.add_string(s.app, "--out", "paths.lora_ckpt", "adapter checkpoint to write");
  }
  {
    Sub& s = make("sample", "draw samples from the base model or an adapted model", ZR_PHASE_SAMPLE);
    s.mapped.add<std::size_t>(s.app, "--concept", "sample.concept", "concept id (omit for unconditional)");
    s.mapped.add<std::size_t>(s.app, "--count", "sample.count", "number of samples");
    s.mapped.add<std::size_t>(s.app, "--steps", "sample.steps", "Euler steps");
    s.mapped.add<std::uint64_t>(s.app, "--seed", "sample.seed", "noise seed");
    s.mapped.add_flag(s.app, "--no-lora", "sample.use_lora", "false", "ignore the run's adapter");
    s.mapped.add_string(s.app, "--base", "paths.base_ckpt", "base checkpoint");
    s.mapped.add_string(s.app, "--lora", "paths.lora_ckpt", "adapter checkpoint");
  }
  {
    Sub& s = make("eval", "efficacy and preservation metrics", ZR_PHASE_EVAL);
    s.mapped.add<std::size_t>(s.app, "--samples", "eval.samples", "samples per set");
    s.mapped.add<std::uint64_t>(s.app, "--seed", "eval.seed", "evaluation seed");
    s.mapped.add_string(s.app, "--base", "paths.base_ckpt", "base checkpoint");
    s.mapped.add_string(s.app, "--lora", "paths.lora_ckpt", "adapter checkpoint");
  }
  {
    Sub& s = make("merge", "merge adapters into one", ZR_PHASE_MERGE);
    auto inputs = std::make_shared<std::vector<std::string>>();
    auto weights = std::make_shared<std::vector<double>>();
    s.app->add_option("--inputs", *inputs, "adapter checkpoints");
    s.app->add_option("--weights", *weights, "merge weights (default 1/N)");
    s.mapped.items.emplace_back("merge.inputs", [inputs]() -> std::optional<std::string> {
      if (inputs->empty()) return std::nullopt;
      std::string j = "[";
      for (std::size_t i = 0; i < inputs->size(); ++i) j += (i ? "," : "") + Mapped::nlohmann_free_quote((*inputs)[i]);
      return j + "]";
    });
    s.mapped.items.emplace_back("merge.weights", [weights]() -> std::optional<std::string> {
      if (weights->empty()) return std::nullopt;
      std::string j = "[";
      for (std::size_t i = 0; i < weights->size(); ++i) j += (i ? "," : "") + to_text((*weights)[i]);
      return j + "]";
    });
    s.mapped.add_string(s.app, "--base", "paths.base_ckpt", "base checkpoint");
    s.mapped.add_string(s.app, "--out", "paths.lora_ckpt", "merged adapter to write");
  }
  Sub& diag = make("diagnose", "drift report for a run, or the quadratic verification suite", ZR_PHASE_DIAGNOSE);
  bool quadratic = false;
  diag.app->add_flag("--quadratic", quadratic, "run the quadratic-testbed suite (PASS/FAIL)");
  {
    Sub& s = make("bypass-demo", "attention zeroing vs a near-duplicate token", ZR_PHASE_BYPASS_DEMO);
    s.mapped.add<std::size_t>(s.app, "--concept", "bypass.concept", "concept id");
    s.mapped.add<std::size_t>(s.app, "--perturbed", "bypass.perturbed", "near-duplicate id");
    s.mapped.add<std::size_t>(s.app, "--samples", "bypass.samples", "samples per set");
    s.mapped.add_string(s.app, "--base", "paths.base_ckpt", "base checkpoint");
  }
  make("plot", "write SVG/CSV figures for a run directory", ZR_PHASE_PLOT);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ZR_ERR_USAGE);
  }

  for (const auto& s : subs) {
    if (!s->app->parsed()) continue;
    std::vector<std::string> extra;
    for (const auto& [key, get] : s->mapped.items)
      if (auto v = get()) extra.push_back(key + "=" + *v);
    zr_phase phase = s->phase;
    if (phase == ZR_PHASE_DIAGNOSE && quadratic) phase = ZR_PHASE_DIAGNOSE_QUADRATIC;
    return run(common, extra, phase, s->print_config);
  }
  return static_cast<int>(ZR_ERR_USAGE);
}
