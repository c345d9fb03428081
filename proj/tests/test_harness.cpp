// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "zerase/checkpoint.hpp"
#include "zerase/harness.hpp"

using namespace zerase;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string message_of(const json& j) {
  try {
    RunConfig::from_json(j).validate();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

json tiny_config(const fs::path& dir) {
  return json{{"name", "tiny"},
              {"model", {{"d_model", 8}, {"n_layers", 1}, {"ffn_hidden", 8}, {"time_embed_dim", 4}}},
              {"base", {{"steps", 20}, {"batch", 16}, {"log_every", 5}}},
              {"erase", {{"steps", 4}, {"batch", 4}, {"rank", 2}, {"smoothness_samples", 1}}},
              {"eval", {{"samples", 12}, {"sampler_steps", 2}}},
              {"sample", {{"count", 3}, {"steps", 2}, {"concept", 0}}},
              {"bypass", {{"samples", 8}, {"steps", 2}}},
              {"localize", {{"batches", 1}, {"batch_size", 4}}},
              {"paths", {{"run_dir", dir.string()}}}};
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const RunConfig d = RunConfig::from_json(json::object());
  EXPECT_NO_THROW(d.validate());
  const RunConfig again = RunConfig::from_json(d.to_json());
  EXPECT_EQ(again.to_json(), d.to_json());
  EXPECT_EQ(again.hash(), d.hash());
  EXPECT_EQ(d.erase.alpha, 1e-3);
  EXPECT_EQ(d.eval.eval_seed, 1001u);
}

TEST(Config, StrictKeysAndTypes) {
  EXPECT_NE(message_of({{"erase", {{"alpah", 1e-3}}}}).find("erase.alpah"), std::string::npos);
  EXPECT_NE(message_of({{"bogus", 1}}).find("bogus"), std::string::npos);
  EXPECT_NE(message_of({{"erase", {{"alpha", "big"}}}}).find("erase.alpha"), std::string::npos);
  EXPECT_NE(message_of({{"model", {{"vocab", 9}}}}).find("model.vocab"), std::string::npos);
  EXPECT_NE(message_of({{"dataset", "mnist"}}).find("mnist"), std::string::npos);
  EXPECT_FALSE(message_of({{"erase", {{"epsilon", 0.0}}}}).empty());
  EXPECT_FALSE(message_of({{"eval", {{"seed", 5}, {"ref_seed", 5}}}}).empty());
  EXPECT_FALSE(message_of({{"model", {{"n_heads", 3}}}}).empty());
}

TEST(Config, OverridesAndHash) {
  json doc = json::object();
  apply_override(doc, "erase.epsilon=0.01");
  apply_override(doc, "name=abc");
  apply_override(doc, "erase.mode=exact");
  apply_override(doc, "sweep.seeds=[1,2]");
  const auto c = RunConfig::from_json(doc);
  EXPECT_EQ(c.erase.epsilon, 0.01);
  EXPECT_EQ(c.name, "abc");
  EXPECT_EQ(c.erase.mode, DualMode::kExact);
  EXPECT_EQ(c.sweep_seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_THROW(apply_override(doc, "noequals"), ValidationError);

  // The hash ignores name and paths but sees everything else.
  json a = json::object(), b = {{"name", "other"}, {"paths", {{"run_dir", "/x"}}}}, e = {{"erase", {{"beta", 0.2}}}};
  EXPECT_EQ(RunConfig::from_json(a).hash(), RunConfig::from_json(b).hash());
  EXPECT_NE(RunConfig::from_json(a).hash(), RunConfig::from_json(e).hash());
}

TEST(Config, RunDirectoryResolution) {
  ::setenv("ZERASE_RUN_ROOT", "/tmp/zerase_root_test", 1);
  const auto c = RunConfig::from_json({{"name", "n1"}});
  EXPECT_EQ(c.run_dir(), fs::path("/tmp/zerase_root_test") / "n1");
  EXPECT_EQ(c.base_path(), c.run_dir() / "base.ckpt");
  ::unsetenv("ZERASE_RUN_ROOT");
  EXPECT_EQ(run_root(), fs::path("runs"));
  const auto p = RunConfig::from_json({{"paths", {{"run_dir", "/a"}, {"lora_ckpt", "/b/l.ckpt"}}}});
  EXPECT_EQ(p.run_dir(), fs::path("/a"));
  EXPECT_EQ(p.lora_path(), fs::path("/b/l.ckpt"));
}

TEST(Pipeline, TinyEndToEnd) {
  const fs::path dir = fs::temp_directory_path() / "zerase_pipeline_test";
  fs::remove_all(dir);
  const auto cfg = RunConfig::from_json(tiny_config(dir));
  std::ostringstream log;
  EXPECT_TRUE(phase_train_base(cfg, log).passed);
  ASSERT_TRUE(fs::exists(dir / "base.ckpt"));
  ASSERT_TRUE(fs::exists(dir / "config.json"));
  EXPECT_TRUE(phase_erase(cfg, log).passed);
  ASSERT_TRUE(fs::exists(dir / "lora.ckpt"));
  EXPECT_TRUE(phase_sample(cfg, log).passed);
  EXPECT_TRUE(fs::exists(dir / "samples_c0_lora.csv"));
  const auto ev = phase_eval(cfg, log);
  EXPECT_TRUE(fs::exists(dir / "eval.json"));
  EXPECT_TRUE(ev.summary.contains("concepts"));
  EXPECT_NO_THROW(phase_bypass_demo(cfg, log));
  EXPECT_NO_THROW(phase_diagnose(cfg, false, log));
  EXPECT_TRUE(fs::exists(dir / "drift_report.tsv"));
  EXPECT_TRUE(phase_plot(cfg, log).passed);
  EXPECT_TRUE(fs::exists(dir / "plots" / "lambda.svg"));

  // Every metrics record carries the config hash and a wall clock.
  std::ifstream f(dir / "metrics.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    const auto j = json::parse(line);
    EXPECT_EQ(j.at("config_hash"), cfg.hash());
    EXPECT_TRUE(j.contains("wall_clock"));
    ++n;
  }
  EXPECT_GT(n, 8u);

  // Merging an adapter with itself reproduces its delta.
  json mj = tiny_config(dir);
  mj["merge"] = {{"inputs", {(dir / "lora.ckpt").string(), (dir / "lora.ckpt").string()}}};
  mj["paths"]["lora_ckpt"] = (dir / "merged.ckpt").string();
  EXPECT_TRUE(phase_merge(RunConfig::from_json(mj), log).passed);
  const auto base = load_model(dir / "base.ckpt");
  const auto one = load_lora(dir / "lora.ckpt", base.model.config());
  const auto two = load_lora(dir / "merged.ckpt", base.model.config());
  const auto a = one.lora.effective_delta(0, Projection::kKey), b = two.lora.effective_delta(0, Projection::kKey);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);

  // A base trained for another architecture is refused.
  json other = tiny_config(dir);
  other["model"]["d_model"] = 16;
  EXPECT_THROW(phase_erase(RunConfig::from_json(other), log), ValidationError);
  fs::remove_all(dir);
}

TEST(Quadratic, SuitePasses) {
  RunConfig::Diagnose d;
  d.stationarity_steps = 2000;
  const auto checks = run_quadratic_suite(d);
  EXPECT_GE(checks.size(), 5u);
  for (const auto& c : checks) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
}

TEST(Config, NegativeCountsAreRejected) {
  EXPECT_NE(message_of({{"base", {{"steps", -5}}}}).find("base.steps"), std::string::npos);
  EXPECT_NE(message_of({{"erase", {{"erase_set", {0, -1}}}}}).find("erase.erase_set"), std::string::npos);
  EXPECT_NE(message_of({{"sample", {{"concept", -1}}}}).find("sample.concept"), std::string::npos);
  EXPECT_EQ(RunConfig::from_json({{"sample", {{"concept", 1}}}}).sample.concept_id, std::optional<std::size_t>(1));
}

TEST(Pipeline, BitReproducibleAndPlotNeedsMetrics) {
  std::ostringstream log;
  std::vector<std::vector<double>> deltas;
  std::vector<std::uint64_t> checksums;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path dir = fs::temp_directory_path() / ("zerase_repro_" + std::to_string(rep));
    fs::remove_all(dir);
    const auto cfg = RunConfig::from_json(tiny_config(dir));
    phase_train_base(cfg, log);
    phase_erase(cfg, log);
    const auto base = load_model(dir / "base.ckpt");
    checksums.push_back(base.model.checksum());
    deltas.push_back(load_lora(dir / "lora.ckpt", base.model.config()).lora.effective_delta(0, Projection::kValue));
    fs::remove_all(dir);
  }
  EXPECT_EQ(checksums[0], checksums[1]);
  EXPECT_EQ(deltas[0], deltas[1]);

  const fs::path empty = fs::temp_directory_path() / "zerase_empty_run";
  fs::remove_all(empty);
  fs::create_directories(empty);
  EXPECT_THROW(emit_plots(empty), ValidationError);
  fs::remove_all(empty);
}
