// SPDX-License-Identifier: Apache-2.0
#include "zerase/zerase.h"

#include <cstring>
#include <fstream>
#include <memory>
#include <ostream>
#include <streambuf>
#include <string>

#include "zerase/checkpoint.hpp"
#include "zerase/harness.hpp"
#include "zerase/merge.hpp"

using nlohmann::json;

struct zr_session {
  json doc = json::object();
};
struct zr_model {
  zerase::SingleStreamModel model;
};
struct zr_lora {
  zerase::GatedLoRA lora;
};

namespace {

thread_local std::string g_last_error;

zr_status fail(zr_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <class F>
zr_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return ZR_OK;
  } catch (const zerase::ValidationError& e) {
    return fail(ZR_ERR_VALIDATION, e.what());
  } catch (const zerase::CompatibilityError& e) {
    return fail(ZR_ERR_VALIDATION, e.what());
  } catch (const zerase::MergeError& e) {
    return fail(ZR_ERR_VALIDATION, e.what());
  } catch (const zerase::DomainError& e) {
    return fail(ZR_ERR_VALIDATION, e.what());
  } catch (const json::exception& e) {
    return fail(ZR_ERR_VALIDATION, e.what());
  } catch (const zerase::IoError& e) {
    return fail(ZR_ERR_IO, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(ZR_ERR_IO, e.what());
  } catch (const zerase::CorruptionError& e) {
    return fail(ZR_ERR_CORRUPT, e.what());
  } catch (const zerase::TrainingError& e) {
    return fail(ZR_ERR_NUMERIC, std::string(e.what()) + " (step " + std::to_string(e.step()) + ")");
  } catch (const zerase::NumericError& e) {
    return fail(ZR_ERR_NUMERIC, e.what());
  } catch (const zerase::SingularityError& e) {
    return fail(ZR_ERR_NUMERIC, e.what());
  } catch (const zerase::ContractError& e) {
    return fail(ZR_ERR_CONTRACT, e.what());
  } catch (const zerase::DimensionError& e) {
    return fail(ZR_ERR_CONTRACT, e.what());
  } catch (const std::exception& e) {
    return fail(ZR_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(ZR_ERR_INTERNAL, "unknown exception");
  }
}

char* dup(const std::string& s) {
  char* p = new char[s.size() + 1];
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

// Line-buffered stream forwarding to a zr_log_fn.
class CallbackBuf : public std::streambuf {
 public:
  CallbackBuf(zr_log_fn fn, void* user) : fn_(fn), user_(user) {}
  ~CallbackBuf() override { flush_line(); }

 protected:
  int overflow(int c) override {
    if (c == traits_type::eof()) return 0;
    if (c == '\n')
      emit();
    else
      line_.push_back(static_cast<char>(c));
    return c;
  }
  int sync() override { return 0; }

 private:
  void emit() {
    if (fn_) fn_(line_.c_str(), user_);
    line_.clear();
  }
  void flush_line() {
    if (!line_.empty()) emit();
  }
  zr_log_fn fn_;
  void* user_;
  std::string line_;
};

zerase::RunConfig resolve(const zr_session* s) { return zerase::RunConfig::from_json(s->doc); }

#define ZR_REQUIRE(cond, what) \
  if (!(cond)) return fail(ZR_ERR_USAGE, what)

}  // namespace

extern "C" {

const char* zr_version(void) {
  static const std::string v = zerase::code_version();
  return v.c_str();
}

const char* zr_status_name(zr_status s) {
  switch (s) {
    case ZR_OK: return "ok";
    case ZR_ERR_VALIDATION: return "validation";
    case ZR_ERR_USAGE: return "usage";
    case ZR_ERR_IO: return "io";
    case ZR_ERR_CORRUPT: return "corrupt";
    case ZR_ERR_NUMERIC: return "numeric";
    case ZR_ERR_CONTRACT: return "contract";
    case ZR_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* zr_last_error(void) { return g_last_error.c_str(); }

void zr_string_free(char* s) { delete[] s; }

zr_status zr_session_create(const char* config_json, zr_session** out) {
  ZR_REQUIRE(out, "out is NULL");
  *out = nullptr;
  return guarded([&] {
    auto s = std::make_unique<zr_session>();
    if (config_json) {
      try {
        s->doc = json::parse(config_json);
      } catch (const json::exception& e) {
        throw zerase::ValidationError(std::string("config is not valid JSON: ") + e.what());
      }
    }
    (void)resolve(s.get());
    *out = s.release();
  });
}

zr_status zr_session_from_file(const char* path, zr_session** out) {
  ZR_REQUIRE(path && out, "path or out is NULL");
  *out = nullptr;
  return guarded([&] {
    std::ifstream f(path);
    if (!f) throw zerase::IoError(std::string("cannot read config file '") + path + "'");
    auto s = std::make_unique<zr_session>();
    try {
      s->doc = json::parse(f);
    } catch (const json::exception& e) {
      throw zerase::ValidationError(std::string("config file '") + path + "' is not valid JSON: " + e.what());
    }
    (void)resolve(s.get());
    *out = s.release();
  });
}

void zr_session_free(zr_session* s) { delete s; }

zr_status zr_session_set(zr_session* s, const char* assignment) {
  ZR_REQUIRE(s && assignment, "session or assignment is NULL");
  return guarded([&] {
    json next = s->doc;
    zerase::apply_override(next, assignment);
    (void)zerase::RunConfig::from_json(next);
    s->doc = std::move(next);
  });
}

zr_status zr_session_config(const zr_session* s, char** out_json) {
  ZR_REQUIRE(s && out_json, "session or out is NULL");
  return guarded([&] {
    const auto cfg = resolve(s);
    json j = cfg.to_json();
    j["config_hash"] = cfg.hash();
    *out_json = dup(j.dump(2));
  });
}

zr_status zr_session_run_dir(const zr_session* s, char** out_path) {
  ZR_REQUIRE(s && out_path, "session or out is NULL");
  return guarded([&] { *out_path = dup(resolve(s).run_dir().string()); });
}

zr_status zr_run_phase(zr_session* s, zr_phase phase, zr_log_fn log, void* user, int* passed, char** summary_json) {
  ZR_REQUIRE(s, "session is NULL");
  ZR_REQUIRE(phase >= ZR_PHASE_TRAIN_BASE && phase <= ZR_PHASE_PLOT, "unknown phase");
  return guarded([&] {
    const auto cfg = resolve(s);
    CallbackBuf buf(log, user);
    std::ostream os(&buf);
    zerase::PhaseResult r;
    switch (phase) {
      case ZR_PHASE_TRAIN_BASE: r = zerase::phase_train_base(cfg, os); break;
      case ZR_PHASE_ERASE: r = zerase::phase_erase(cfg, os); break;
      case ZR_PHASE_SAMPLE: r = zerase::phase_sample(cfg, os); break;
      case ZR_PHASE_EVAL: r = zerase::phase_eval(cfg, os); break;
      case ZR_PHASE_MERGE: r = zerase::phase_merge(cfg, os); break;
      case ZR_PHASE_DIAGNOSE: r = zerase::phase_diagnose(cfg, false, os); break;
      case ZR_PHASE_DIAGNOSE_QUADRATIC: r = zerase::phase_diagnose(cfg, true, os); break;
      case ZR_PHASE_BYPASS_DEMO: r = zerase::phase_bypass_demo(cfg, os); break;
      case ZR_PHASE_PLOT: r = zerase::phase_plot(cfg, os); break;
      default: throw zerase::ContractError("unknown phase " + std::to_string(static_cast<int>(phase)));
    }
    os.flush();
    if (passed) *passed = r.passed ? 1 : 0;
    if (summary_json) *summary_json = dup(r.summary.dump());
  });
}

zr_status zr_model_load(const char* path, zr_model** out) {
  ZR_REQUIRE(path && out, "path or out is NULL");
  *out = nullptr;
  return guarded([&] { *out = new zr_model{zerase::load_model(path).model}; });
}

void zr_model_free(zr_model* m) { delete m; }

zr_status zr_model_checksum(const zr_model* m, uint64_t* out) {
  ZR_REQUIRE(m && out, "model or out is NULL");
  return guarded([&] { *out = m->model.checksum(); });
}

zr_status zr_model_config(const zr_model* m, char** out_json) {
  ZR_REQUIRE(m && out_json, "model or out is NULL");
  return guarded([&] { *out_json = dup(zerase::to_json(m->model.config()).dump()); });
}

zr_status zr_model_sample_width(const zr_model* m, size_t* out) {
  ZR_REQUIRE(m && out, "model or out is NULL");
  *out = m->model.config().n_image * m->model.config().d_data;
  return ZR_OK;
}

zr_status zr_lora_load(const char* path, const zr_model* base, zr_lora** out) {
  ZR_REQUIRE(path && out, "path or out is NULL");
  *out = nullptr;
  return guarded([&] {
    auto l = base ? zerase::load_lora(path, base->model.config()) : zerase::load_lora_unchecked(path);
    *out = new zr_lora{std::move(l.lora)};
  });
}

void zr_lora_free(zr_lora* l) { delete l; }

zr_status zr_lora_rank(const zr_lora* l, size_t* out) {
  ZR_REQUIRE(l && out, "lora or out is NULL");
  *out = l->lora.rank;
  return ZR_OK;
}

zr_status zr_sample(const zr_model* m, const zr_lora* lora, int64_t concept_id, size_t count, size_t steps,
                    uint64_t seed, double* out, size_t out_len) {
  ZR_REQUIRE(m && out, "model or out is NULL");
  const auto& mc = m->model.config();
  ZR_REQUIRE(out_len >= count * mc.n_image * mc.d_data, "output buffer too small");
  ZR_REQUIRE(steps >= 1, "steps must be >= 1");
  return guarded([&] {
    zerase::SampleRequest req;
    if (concept_id >= 0) {
      if (static_cast<std::size_t>(concept_id) >= mc.vocab)
        throw zerase::ValidationError("concept id " + std::to_string(concept_id) + " is outside the vocabulary");
      req.cond = static_cast<std::size_t>(concept_id);
    }
    req.count = count;
    req.steps = steps;
    req.seed = seed;
    req.lora = lora ? &lora->lora : nullptr;
    const auto x = zerase::sample_batch(m->model, req);
    std::copy(x.begin(), x.end(), out);
  });
}

zr_status zr_energy_distance(const double* x, size_t nx, const double* y, size_t ny, size_t dim, double* out) {
  ZR_REQUIRE(x && y && out && dim > 0 && nx > 0 && ny > 0, "invalid energy_distance arguments");
  return guarded([&] {
    *out = zerase::energy_distance(std::span<const double>(x, nx * dim), std::span<const double>(y, ny * dim), dim);
  });
}

}  // extern "C"
