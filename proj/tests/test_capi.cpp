// SPDX-License-Identifier: Apache-2.0
// Exercises the shared library through its C interface only.
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "zerase/zerase.h"

namespace fs = std::filesystem;

namespace {

std::string take(char* s) {
  std::string r = s ? s : "";
  zr_string_free(s);
  return r;
}

void collect(const char* line, void* user) { static_cast<std::vector<std::string>*>(user)->push_back(line); }

}  // namespace

TEST(CApi, VersionAndStatusNames) {
  EXPECT_FALSE(std::string(zr_version()).empty());
  EXPECT_STREQ(zr_status_name(ZR_OK), "ok");
  EXPECT_STREQ(zr_status_name(ZR_ERR_CORRUPT), "corrupt");
}

TEST(CApi, NullArgumentsAreUsageErrors) {
  EXPECT_EQ(zr_session_create(nullptr, nullptr), ZR_ERR_USAGE);
  EXPECT_FALSE(std::string(zr_last_error()).empty());
  EXPECT_EQ(zr_model_load(nullptr, nullptr), ZR_ERR_USAGE);
  double d = 0;
  EXPECT_EQ(zr_energy_distance(nullptr, 1, nullptr, 1, 1, &d), ZR_ERR_USAGE);
  zr_session_free(nullptr);
  zr_model_free(nullptr);
  zr_lora_free(nullptr);
}

TEST(CApi, SessionConfigAndValidation) {
  zr_session* s = nullptr;
  ASSERT_EQ(zr_session_create(R"({"name":"capi","erase":{"epsilon":0.01}})", &s), ZR_OK);
  ASSERT_EQ(zr_session_set(s, "erase.beta=0.2"), ZR_OK);
  char* cfg = nullptr;
  ASSERT_EQ(zr_session_config(s, &cfg), ZR_OK);
  const std::string j = take(cfg);
  EXPECT_NE(j.find("\"beta\": 0.2"), std::string::npos);
  EXPECT_NE(j.find("\"epsilon\": 0.01"), std::string::npos);
  EXPECT_EQ(zr_session_set(s, "erase.nope=1"), ZR_ERR_VALIDATION);
  EXPECT_NE(std::string(zr_last_error()).find("erase.nope"), std::string::npos);
  zr_session_free(s);

  zr_session* bad = nullptr;
  EXPECT_EQ(zr_session_create("{not json", &bad), ZR_ERR_VALIDATION);
  EXPECT_EQ(bad, nullptr);
  EXPECT_EQ(zr_session_from_file("/nonexistent/cfg.json", &bad), ZR_ERR_IO);
  EXPECT_EQ(zr_model_load("/nonexistent/base.ckpt", nullptr), ZR_ERR_USAGE);
  zr_model* m = nullptr;
  EXPECT_EQ(zr_model_load("/nonexistent/base.ckpt", &m), ZR_ERR_IO);
}

TEST(CApi, TrainLoadSampleMeasure) {
  const fs::path dir = fs::temp_directory_path() / "zerase_capi_test";
  fs::remove_all(dir);
  const std::string cfg = R"({"name":"capi","model":{"d_model":8,"n_layers":1,"ffn_hidden":8,"time_embed_dim":4},)"
                          R"("base":{"steps":10,"batch":8,"log_every":5},)"
                          R"("erase":{"steps":3,"batch":4,"rank":2,"smoothness_samples":1},)"
                          R"("paths":{"run_dir":")" + dir.string() + R"("}})";
  zr_session* s = nullptr;
  ASSERT_EQ(zr_session_create(cfg.c_str(), &s), ZR_OK);
  std::vector<std::string> lines;
  int passed = 0;
  char* summary = nullptr;
  ASSERT_EQ(zr_run_phase(s, ZR_PHASE_TRAIN_BASE, collect, &lines, &passed, &summary), ZR_OK) << zr_last_error();
  EXPECT_EQ(passed, 1);
  EXPECT_FALSE(take(summary).empty());
  EXPECT_FALSE(lines.empty());
  ASSERT_EQ(zr_run_phase(s, ZR_PHASE_ERASE, nullptr, nullptr, nullptr, nullptr), ZR_OK) << zr_last_error();
  EXPECT_EQ(zr_run_phase(s, static_cast<zr_phase>(99), nullptr, nullptr, nullptr, nullptr), ZR_ERR_USAGE);
  char* rd = nullptr;
  ASSERT_EQ(zr_session_run_dir(s, &rd), ZR_OK);
  EXPECT_EQ(fs::path(take(rd)), dir);
  zr_session_free(s);

  zr_model* m = nullptr;
  ASSERT_EQ(zr_model_load((dir / "base.ckpt").c_str(), &m), ZR_OK);
  uint64_t ck = 0;
  ASSERT_EQ(zr_model_checksum(m, &ck), ZR_OK);
  EXPECT_NE(ck, 0u);
  size_t width = 0;
  ASSERT_EQ(zr_model_sample_width(m, &width), ZR_OK);
  EXPECT_GT(width, 0u);
  zr_lora* l = nullptr;
  ASSERT_EQ(zr_lora_load((dir / "lora.ckpt").c_str(), m, &l), ZR_OK);
  size_t rank = 0;
  ASSERT_EQ(zr_lora_rank(l, &rank), ZR_OK);
  EXPECT_EQ(rank, 2u);

  std::vector<double> a(4 * width), b(4 * width);
  ASSERT_EQ(zr_sample(m, nullptr, 0, 4, 3, 7, a.data(), a.size()), ZR_OK);
  ASSERT_EQ(zr_sample(m, l, 0, 4, 3, 7, b.data(), b.size()), ZR_OK);
  EXPECT_EQ(zr_sample(m, nullptr, 0, 4, 3, 7, a.data(), a.size() - 1), ZR_ERR_USAGE);
  EXPECT_EQ(zr_sample(m, nullptr, 99, 1, 3, 7, a.data(), a.size()), ZR_ERR_VALIDATION);
  ASSERT_EQ(zr_sample(m, nullptr, -1, 4, 3, 7, a.data(), a.size()), ZR_OK);
  double ed = -1;
  ASSERT_EQ(zr_energy_distance(a.data(), a.size() / 2, a.data(), a.size() / 2, 2, &ed), ZR_OK);
  EXPECT_NEAR(ed, 0.0, 1e-14);

  // A truncated checkpoint is reported as corrupt.
  const fs::path bad = dir / "bad.ckpt";
  fs::copy_file(dir / "base.ckpt", bad);
  fs::resize_file(bad, fs::file_size(bad) / 2);
  zr_model* m2 = nullptr;
  EXPECT_EQ(zr_model_load(bad.c_str(), &m2), ZR_ERR_CORRUPT);
  EXPECT_NE(std::string(zr_last_error()).find("truncated"), std::string::npos);

  zr_lora_free(l);
  zr_model_free(m);
  fs::remove_all(dir);
}
