// SPDX-License-Identifier: Apache-2.0
#include "zerase/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "zerase/checkpoint.hpp"
#include "zerase/merge.hpp"

#ifndef ZERASE_VERSION
#define ZERASE_VERSION "0.0.0"
#endif

namespace zerase {

using nlohmann::json;
namespace fs = std::filesystem;

std::string code_version() { return ZERASE_VERSION; }

namespace {

const char* const kModelKeys[] = {"d_model",        "n_heads",    "n_layers",     "n_text",
                                  "time_embed_dim", "ffn_hidden", "concept_slot", "perturb_sigma"};

std::string xt_source_name(XtSource s) { return s == XtSource::kTrajectory ? "trajectory" : "noised-data"; }

XtSource parse_xt_source(const std::string& s) {
  if (s == "noised-data") return XtSource::kNoisedData;
  if (s == "trajectory") return XtSource::kTrajectory;
  throw ValidationError("erase.xt_source must be 'noised-data' or 'trajectory', got '" + s + "'");
}

json null_or(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }

json defaults_json() { return RunConfig{}.to_json(); }

void check_keys(const json& user, const json& defaults, const std::string& prefix) {
  if (!user.is_object()) throw ValidationError("'" + (prefix.empty() ? std::string("config") : prefix) + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (prefix.empty() && it.key() == "model") {
      if (!it->is_object()) throw ValidationError("'model' must be an object");
      for (auto m = it->begin(); m != it->end(); ++m)
        if (std::find(std::begin(kModelKeys), std::end(kModelKeys), m.key()) == std::end(kModelKeys))
          throw ValidationError("unknown config key 'model." + m.key() + "'");
      continue;
    }
    if (!defaults.contains(it.key())) throw ValidationError("unknown config key '" + key + "'");
    const json& d = defaults.at(it.key());
    if (d.is_object()) check_keys(*it, d, key);
  }
}

void deep_merge(json& base, const json& over) {
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object() && it.key() != "model")
      deep_merge(base[it.key()], *it);
    else
      base[it.key()] = *it;
  }
}

bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

template <class T>
constexpr bool kUnsignedInt = std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>;

template <class T>
struct IsVector : std::false_type {};
template <class U>
struct IsVector<std::vector<U>> : std::true_type {};

template <class T>
T get(const json& j, const std::string& section, const std::string& key) {
  const json& v = j.at(section).at(key);
  const std::string where = "config key '" + section + "." + key + "'";
  if constexpr (kUnsignedInt<T>) {
    if (!is_count(v)) throw ValidationError(where + " must be a non-negative integer");
  } else if constexpr (IsVector<T>::value) {
    if constexpr (kUnsignedInt<typename T::value_type>) {
      if (!v.is_array()) throw ValidationError(where + " must be an array of non-negative integers");
      for (const auto& e : v)
        if (!is_count(e)) throw ValidationError(where + " must be an array of non-negative integers");
    }
  }
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config key '" + section + "." + key + "' has the wrong type");
  }
}

std::optional<std::size_t> get_opt_id(const json& j, const std::string& section, const std::string& key) {
  const json& v = j.at(section).at(key);
  if (v.is_null()) return std::nullopt;
  if (!is_count(v)) throw ValidationError("config key '" + section + "." + key + "' must be null or a non-negative integer");
  return v.get<std::size_t>();
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  f << j.dump(2) << '\n';
}

json step_record(const StepLog& l) {
  json r{{"kind", "erase"},     {"step", l.step},       {"lambda", l.lambda},   {"L_er", l.l_er},
         {"L_erase", l.l_erase}, {"L_attn", l.l_attn},   {"L_pr", l.l_pr},       {"d_norm2", l.d_norm2},
         {"drift", l.drift},     {"bound", l.bound}};
  r["g_tilde"] = l.g_tilde ? json(*l.g_tilde) : json(nullptr);
  r["lambda_star"] = l.lambda_star ? json(*l.lambda_star) : json(nullptr);
  return r;
}

json eval_json(const EvalReport& r) {
  json out = json::array();
  for (const auto& e : r.concepts)
    out.push_back({{"concept", e.concept_id ? json(*e.concept_id) : json(nullptr)},
                   {"role", to_string(e.role)},
                   {"noise_floor", e.noise_floor},
                   {"to_original", e.to_original},
                   {"before_after", e.before_after},
                   {"to_unconditional", e.to_unconditional},
                   {"efficacy_ratio", e.efficacy_ratio()},
                   {"preservation_ratio", e.preservation_ratio()}});
  return out;
}

SingleStreamModel load_base(const RunConfig& cfg) {
  const fs::path p = cfg.base_path();
  if (!fs::exists(p)) throw ValidationError("base checkpoint '" + p.string() + "' does not exist; run train-base first");
  LoadedModel m = load_model(p);
  const std::string want = config_hash(cfg.model_config());
  const std::string have = config_hash(m.model.config());
  if (want != have)
    throw ValidationError("base checkpoint config hash " + have + " does not match the run config (" + want + ")");
  return std::move(m.model);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// --- RunConfig ------------------------------------------------------------------

json RunConfig::to_json() const {
  json j;
  j["name"] = name;
  j["dataset"] = dataset;
  j["model"] = model;
  j["base"] = {{"steps", base.steps},
               {"batch", base.batch},
               {"lr", base.optim.lr},
               {"weight_decay", base.optim.weight_decay},
               {"label_dropout", base.label_dropout},
               {"seed", base.seed},
               {"log_every", base_log_every}};
  j["erase"] = {{"alpha", erase.alpha},
                {"beta", erase.beta},
                {"epsilon", erase.epsilon},
                {"eta", erase.batch.eta},
                {"steps", erase_steps},
                {"batch", erase.batch.size},
                {"rank", erase.lora_rank},
                {"lora_scale", erase.lora_scale},
                {"attn_coef", erase.attn_coef},
                {"weight_decay", erase.weight_decay},
                {"mode", to_string(erase.mode)},
                {"objective", to_string(erase.objective)},
                {"xt_source", xt_source_name(erase.batch.source)},
                {"trajectory_steps", erase.batch.trajectory_steps},
                {"probe_batch", erase.probe_batch},
                {"erase_set", erase.erase_set},
                {"preserve_set", erase.preserve_set},
                {"seed", erase.seed},
                {"smoothness_samples", erase.smoothness_samples},
                {"smoothness_radius", erase.smoothness_radius}};
  j["sweep"] = {{"epsilons", sweep_epsilons}, {"seeds", sweep_seeds}};
  j["sample"] = {{"concept", null_or(sample.concept_id)},
                 {"count", sample.count},
                 {"steps", sample.steps},
                 {"seed", sample.seed},
                 {"use_lora", sample.use_lora}};
  j["eval"] = {{"samples", eval.samples},
               {"sampler_steps", eval.sampler_steps},
               {"seed", eval.eval_seed},
               {"ref_seed", eval.ref_seed}};
  j["merge"] = {{"inputs", merge.inputs}, {"weights", merge.weights}};
  j["bypass"] = {{"concept", bypass.concept_id},
                 {"perturbed", null_or(bypass.perturbed_id)},
                 {"samples", bypass.cfg.samples},
                 {"steps", bypass.cfg.steps},
                 {"seed", bypass.cfg.seed},
                 {"ref_seed", bypass.cfg.ref_seed},
                 {"renormalize", bypass.cfg.renormalize}};
  j["localize"] = {{"batches", localize.batches}, {"batch_size", localize.batch_size}, {"seed", localize.seed}};
  j["diagnose"] = {{"alpha", diagnose.alpha},
                   {"beta", diagnose.beta},
                   {"epsilons", diagnose.epsilons},
                   {"lemma_steps", diagnose.lemma_steps},
                   {"drift_steps", diagnose.drift_steps},
                   {"stationarity_steps", diagnose.stationarity_steps},
                   {"agreement_steps", diagnose.agreement_steps},
                   {"agreement_band", diagnose.agreement_band}};
  j["paths"] = {{"run_dir", paths.run_dir}, {"base_ckpt", paths.base_ckpt}, {"lora_ckpt", paths.lora_ckpt}};
  return j;
}

RunConfig RunConfig::from_json(const json& user) {
  const json defaults = defaults_json();
  check_keys(user, defaults, "");
  json j = defaults;
  deep_merge(j, user);

  RunConfig c;
  try {
    c.name = j.at("name").get<std::string>();
    c.dataset = j.at("dataset").get<std::string>();
  } catch (const json::exception&) {
    throw ValidationError("config keys 'name' and 'dataset' must be strings");
  }
  c.model = j.at("model");

  c.base.steps = get<std::size_t>(j, "base", "steps");
  c.base.batch = get<std::size_t>(j, "base", "batch");
  c.base.optim.lr = get<double>(j, "base", "lr");
  c.base.optim.weight_decay = get<double>(j, "base", "weight_decay");
  c.base.label_dropout = get<double>(j, "base", "label_dropout");
  c.base.seed = get<std::uint64_t>(j, "base", "seed");
  c.base_log_every = get<std::size_t>(j, "base", "log_every");

  c.erase.alpha = get<double>(j, "erase", "alpha");
  c.erase.beta = get<double>(j, "erase", "beta");
  c.erase.epsilon = get<double>(j, "erase", "epsilon");
  c.erase.batch.eta = get<double>(j, "erase", "eta");
  c.erase_steps = get<std::size_t>(j, "erase", "steps");
  c.erase.batch.size = get<std::size_t>(j, "erase", "batch");
  c.erase.lora_rank = get<std::size_t>(j, "erase", "rank");
  c.erase.lora_scale = get<double>(j, "erase", "lora_scale");
  c.erase.attn_coef = get<double>(j, "erase", "attn_coef");
  c.erase.weight_decay = get<double>(j, "erase", "weight_decay");
  try {
    c.erase.mode = parse_dual_mode(get<std::string>(j, "erase", "mode"));
    c.erase.objective = parse_objective(get<std::string>(j, "erase", "objective"));
  } catch (const DomainError& e) {
    throw ValidationError(std::string("erase: ") + e.what());
  }
  c.erase.batch.source = parse_xt_source(get<std::string>(j, "erase", "xt_source"));
  c.erase.batch.trajectory_steps = get<std::size_t>(j, "erase", "trajectory_steps");
  c.erase.probe_batch = get<bool>(j, "erase", "probe_batch");
  c.erase.erase_set = get<std::vector<std::size_t>>(j, "erase", "erase_set");
  c.erase.preserve_set = get<std::vector<std::size_t>>(j, "erase", "preserve_set");
  c.erase.seed = get<std::uint64_t>(j, "erase", "seed");
  c.erase.smoothness_samples = get<std::size_t>(j, "erase", "smoothness_samples");
  c.erase.smoothness_radius = get<double>(j, "erase", "smoothness_radius");

  c.sweep_epsilons = get<std::vector<double>>(j, "sweep", "epsilons");
  c.sweep_seeds = get<std::vector<std::uint64_t>>(j, "sweep", "seeds");

  c.sample.concept_id = get_opt_id(j, "sample", "concept");
  c.sample.count = get<std::size_t>(j, "sample", "count");
  c.sample.steps = get<std::size_t>(j, "sample", "steps");
  c.sample.seed = get<std::uint64_t>(j, "sample", "seed");
  c.sample.use_lora = get<bool>(j, "sample", "use_lora");

  c.eval.samples = get<std::size_t>(j, "eval", "samples");
  c.eval.sampler_steps = get<std::size_t>(j, "eval", "sampler_steps");
  c.eval.eval_seed = get<std::uint64_t>(j, "eval", "seed");
  c.eval.ref_seed = get<std::uint64_t>(j, "eval", "ref_seed");

  c.merge.inputs = get<std::vector<std::string>>(j, "merge", "inputs");
  c.merge.weights = get<std::vector<double>>(j, "merge", "weights");

  c.bypass.concept_id = get<std::size_t>(j, "bypass", "concept");
  c.bypass.perturbed_id = get_opt_id(j, "bypass", "perturbed");
  c.bypass.cfg.samples = get<std::size_t>(j, "bypass", "samples");
  c.bypass.cfg.steps = get<std::size_t>(j, "bypass", "steps");
  c.bypass.cfg.seed = get<std::uint64_t>(j, "bypass", "seed");
  c.bypass.cfg.ref_seed = get<std::uint64_t>(j, "bypass", "ref_seed");
  c.bypass.cfg.renormalize = get<bool>(j, "bypass", "renormalize");

  c.localize.batches = get<std::size_t>(j, "localize", "batches");
  c.localize.batch_size = get<std::size_t>(j, "localize", "batch_size");
  c.localize.seed = get<std::uint64_t>(j, "localize", "seed");

  c.diagnose.alpha = get<double>(j, "diagnose", "alpha");
  c.diagnose.beta = get<double>(j, "diagnose", "beta");
  c.diagnose.epsilons = get<std::vector<double>>(j, "diagnose", "epsilons");
  c.diagnose.lemma_steps = get<std::size_t>(j, "diagnose", "lemma_steps");
  c.diagnose.drift_steps = get<std::size_t>(j, "diagnose", "drift_steps");
  c.diagnose.stationarity_steps = get<std::size_t>(j, "diagnose", "stationarity_steps");
  c.diagnose.agreement_steps = get<std::size_t>(j, "diagnose", "agreement_steps");
  c.diagnose.agreement_band = get<double>(j, "diagnose", "agreement_band");

  c.paths.run_dir = get<std::string>(j, "paths", "run_dir");
  c.paths.base_ckpt = get<std::string>(j, "paths", "base_ckpt");
  c.paths.lora_ckpt = get<std::string>(j, "paths", "lora_ckpt");
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot read config file '" + p.string() + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError("config file '" + p.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError(msg);
  };
  const auto names = ConceptDataset::names();
  require(std::find(names.begin(), names.end(), dataset) != names.end(), "unknown dataset '" + dataset + "'");
  require(!name.empty() && name.find('/') == std::string::npos, "name must be a non-empty path component");
  require(base.batch >= 1, "base.batch must be >= 1");
  require(base.optim.lr > 0.0, "base.lr must be > 0");
  require(base.optim.weight_decay >= 0.0, "base.weight_decay must be >= 0");
  require(base.label_dropout >= 0.0 && base.label_dropout <= 1.0, "base.label_dropout must lie in [0, 1]");
  require(base_log_every >= 1, "base.log_every must be >= 1");
  require(erase.alpha > 0.0, "erase.alpha must be > 0");
  require(erase.beta > 0.0, "erase.beta must be > 0");
  require(erase.epsilon > 0.0, "erase.epsilon must be > 0");
  require(erase.batch.eta > 0.0, "erase.eta must be > 0");
  require(erase.batch.size >= 1, "erase.batch must be >= 1");
  require(erase.lora_rank >= 1, "erase.rank must be >= 1");
  require(erase.attn_coef >= 0.0, "erase.attn_coef must be >= 0");
  require(erase.weight_decay >= 0.0, "erase.weight_decay must be >= 0");
  require(erase.batch.trajectory_steps >= 1, "erase.trajectory_steps must be >= 1");
  require(erase.smoothness_radius > 0.0, "erase.smoothness_radius must be > 0");
  for (double e : sweep_epsilons) require(e > 0.0, "sweep.epsilons must be > 0");
  require(!sweep_seeds.empty(), "sweep.seeds must not be empty");
  require(sample.steps >= 1, "sample.steps must be >= 1");
  require(sample.count >= 1, "sample.count must be >= 1");
  require(eval.samples >= 2, "eval.samples must be >= 2");
  require(eval.sampler_steps >= 1, "eval.sampler_steps must be >= 1");
  require(eval.eval_seed != eval.ref_seed, "eval.seed and eval.ref_seed must differ");
  for (double w : merge.weights) require(w >= 0.0, "merge.weights must be non-negative");
  require(merge.weights.empty() || merge.weights.size() == merge.inputs.size(),
          "merge.weights must be empty or match merge.inputs");
  require(bypass.cfg.samples >= 2 && bypass.cfg.steps >= 1, "bypass.samples must be >= 2 and bypass.steps >= 1");
  require(localize.batches >= 1 && localize.batch_size >= 1, "localize.batches and localize.batch_size must be >= 1");
  require(diagnose.alpha > 0.0 && diagnose.beta > 0.0, "diagnose.alpha and diagnose.beta must be > 0");
  for (double e : diagnose.epsilons) require(e > 0.0, "diagnose.epsilons must be > 0");
  require(diagnose.agreement_band > 0.0, "diagnose.agreement_band must be > 0");

  ModelConfig mc;
  try {
    mc = model_config();
    mc.validate();
  } catch (const DomainError& e) {
    throw ValidationError(std::string("model: ") + e.what());
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("model: a key has the wrong type");
  }
  const ConceptDataset ds = dataset_object();
  auto known = [&](std::size_t id) {
    try {
      (void)ds.concept_by_id(id);
      return true;
    } catch (const DomainError&) {
      return false;
    }
  };
  for (auto id : erase.erase_set) require(known(id), "erase.erase_set: unknown concept id " + std::to_string(id));
  for (auto id : erase.preserve_set)
    require(known(id), "erase.preserve_set: unknown concept id " + std::to_string(id));
  if (sample.concept_id) require(*sample.concept_id < mc.vocab, "sample.concept must be < vocab");
  require(bypass.concept_id < mc.vocab, "bypass.concept must be < vocab");
  if (bypass.perturbed_id) require(*bypass.perturbed_id < mc.vocab, "bypass.perturbed must be < vocab");
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("name");
  j.erase("paths");
  const std::string s = j.dump();
  return hex64(fnv1a(s.data(), s.size()));
}

ConceptDataset RunConfig::dataset_object() const { return ConceptDataset::by_name(dataset); }

ModelConfig RunConfig::model_config() const {
  ModelConfig mc = dataset_object().model_config();
  auto take = [&](const char* k, auto& dst) {
    if (model.contains(k)) dst = model.at(k).get<std::remove_reference_t<decltype(dst)>>();
  };
  take("d_model", mc.d_model);
  take("n_heads", mc.n_heads);
  take("n_layers", mc.n_layers);
  take("n_text", mc.n_text);
  take("time_embed_dim", mc.time_embed_dim);
  take("ffn_hidden", mc.ffn_hidden);
  take("concept_slot", mc.concept_slot);
  take("perturb_sigma", mc.perturb_sigma);
  return mc;
}

fs::path run_root() {
  if (const char* env = std::getenv("ZERASE_RUN_ROOT"); env && *env) return fs::path(env);
  return fs::path("runs");
}

fs::path RunConfig::run_dir() const { return paths.run_dir.empty() ? run_root() / name : fs::path(paths.run_dir); }
fs::path RunConfig::base_path() const {
  return paths.base_ckpt.empty() ? run_dir() / "base.ckpt" : fs::path(paths.base_ckpt);
}
fs::path RunConfig::lora_path() const {
  return paths.lora_ckpt.empty() ? run_dir() / "lora.ckpt" : fs::path(paths.lora_ckpt);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' must look like key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      return;
    }
    if (!cur->contains(part) || !(*cur)[part].is_object()) (*cur)[part] = json::object();
    cur = &(*cur)[part];
    start = dot + 1;
  }
}

fs::path prepare_run_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.run_dir();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory '" + dir.string() + "': " + ec.message());
  json j = cfg.to_json();
  j["config_hash"] = cfg.hash();
  j["model_config_hash"] = config_hash(cfg.model_config());
  j["code_version"] = code_version();
  write_json(dir / "config.json", j);
  return dir;
}

MetricsLog::MetricsLog(const fs::path& path, std::string config_hash) : path_(path), hash_(std::move(config_hash)) {}

void MetricsLog::append(json record) {
  record["wall_clock"] = now_seconds();
  record["config_hash"] = hash_;
  std::ofstream f(path_, std::ios::app);
  if (!f) throw IoError("cannot append to '" + path_.string() + "'");
  f << record.dump() << '\n';
}

void write_samples_csv(const fs::path& p, std::span<const double> x, std::size_t n_image, std::size_t d_data) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  f << "sample,row";
  for (std::size_t k = 0; k < d_data; ++k) f << ",x" << k;
  f << '\n' << std::setprecision(17);
  const std::size_t per = n_image * d_data;
  for (std::size_t s = 0; s * per < x.size(); ++s)
    for (std::size_t r = 0; r < n_image; ++r) {
      f << s << ',' << r;
      for (std::size_t k = 0; k < d_data; ++k) f << ',' << x[s * per + r * d_data + k];
      f << '\n';
    }
}

// --- phases -----------------------------------------------------------------------

PhaseResult phase_train_base(const RunConfig& cfg, std::ostream& log) {
  const fs::path dir = prepare_run_dir(cfg);
  MetricsLog metrics(dir / "metrics.jsonl", cfg.hash());
  const ConceptDataset ds = cfg.dataset_object();
  const auto t0 = std::chrono::steady_clock::now();
  BaseTrainResult res = train_base(cfg.model_config(), ds, cfg.base, [&](std::size_t step, double loss) {
    if (step % cfg.base_log_every == 0 || step + 1 == cfg.base.steps)
      metrics.append({{"kind", "base"}, {"step", step + 1}, {"loss", loss}});
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  PhaseResult r;
  r.summary = {{"steps", cfg.base.steps},
               {"seconds", secs},
               {"checksum", hex64(res.model.checksum())},
               {"model_config_hash", config_hash(res.model.config())}};
  if (!res.loss_log.empty()) {
    r.summary["initial_loss"] = res.loss_log.front();
    r.summary["final_loss"] = res.loss_log.back();
  }
  save_model(cfg.base_path(), res.model,
             {{"dataset", cfg.dataset}, {"run_config_hash", cfg.hash()}, {"train", r.summary}});
  log << "train-base: " << cfg.base.steps << " steps in " << std::fixed << std::setprecision(1) << secs << "s";
  if (!res.loss_log.empty())
    log << std::setprecision(4) << ", loss " << res.loss_log.front() << " -> " << res.loss_log.back();
  log << "\n  wrote " << cfg.base_path().string() << '\n';
  log.unsetf(std::ios::floatfield);
  return r;
}

PhaseResult phase_erase(const RunConfig& cfg, std::ostream& log) {
  const SingleStreamModel base = load_base(cfg);
  const fs::path dir = prepare_run_dir(cfg);
  MetricsLog metrics(dir / "metrics.jsonl", cfg.hash());
  const ConceptDataset ds = cfg.dataset_object();

  const auto t0 = std::chrono::steady_clock::now();
  ErasureRun run(base, ds, cfg.erase);
  run.run(cfg.erase_steps, [&](const StepLog& l) { metrics.append(step_record(l)); });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const DriftReport drift = drift_report(run.state(), run.diagnostics());

  PhaseResult r;
  r.summary = {{"steps", cfg.erase_steps},
               {"seconds", secs},
               {"final_lambda", run.state().lambda},
               {"smoothness_estimate", run.diagnostics().smoothness},
               {"drift_bound_violations", drift.violations},
               {"mode", to_string(cfg.erase.mode)},
               {"objective", to_string(cfg.erase.objective)}};
  if (!run.state().history.empty()) {
    const StepLog& last = run.state().history.back();
    r.summary["final_L_er"] = last.l_er;
    r.summary["final_L_pr"] = last.l_pr;
  }
  save_lora(cfg.lora_path(), run.lora(), base.config(),
            {{"dataset", cfg.dataset},
             {"run_config_hash", cfg.hash()},
             {"base_checksum", hex64(base.checksum())},
             {"erase_set", run.config().erase_set},
             {"preserve_set", run.config().preserve_set},
             {"erase", r.summary}});
  log << "erase: " << cfg.erase_steps << " steps (" << to_string(cfg.erase.mode) << ", "
      << to_string(cfg.erase.objective) << ") in " << std::fixed << std::setprecision(1) << secs << "s, final lambda "
      << std::setprecision(4) << run.state().lambda << "\n  wrote " << cfg.lora_path().string() << '\n';
  log.unsetf(std::ios::floatfield);

  if (!cfg.sweep_epsilons.empty()) {
    BaseSampleCache cache(base, cfg.eval);
    std::ofstream tsv(dir / "sweep.tsv");
    if (!tsv) throw IoError("cannot write sweep.tsv");
    tsv << "epsilon\tseed\tefficacy\tpreservation\n" << std::setprecision(17);
    json sweep = json::array();
    for (double eps : cfg.sweep_epsilons) {
      std::vector<double> eff, pres;
      for (std::uint64_t seed : cfg.sweep_seeds) {
        ErasureConfig ec = cfg.erase;
        ec.epsilon = eps;
        ec.seed = seed;
        ErasureRun sr(base, ds, ec);
        sr.run(cfg.erase_steps);
        const EvalReport rep = eval_erasure(cache, &sr.lora(), sr.config().erase_set, sr.config().preserve_set);
        double e = 0.0, p = 0.0;
        for (const auto& c : rep.concepts) {
          if (c.role == ConceptRole::kErase) e += c.to_original / static_cast<double>(sr.config().erase_set.size());
          if (c.role == ConceptRole::kPreserve)
            p += c.before_after / static_cast<double>(sr.config().preserve_set.size());
        }
        eff.push_back(e);
        pres.push_back(p);
        tsv << eps << '\t' << seed << '\t' << e << '\t' << p << '\n';
        log << "  sweep eps=" << eps << " seed=" << seed << " efficacy=" << e << " preservation=" << p << '\n';
      }
      sweep.push_back({{"epsilon", eps}, {"median_efficacy", median(eff)}, {"median_preservation", median(pres)}});
    }
    r.summary["sweep"] = sweep;
  }
  write_json(dir / "erase_summary.json", r.summary);
  return r;
}

PhaseResult phase_sample(const RunConfig& cfg, std::ostream& log) {
  const SingleStreamModel base = load_base(cfg);
  const fs::path dir = prepare_run_dir(cfg);
  std::optional<LoadedLora> lora;
  if (cfg.sample.use_lora && fs::exists(cfg.lora_path())) lora = load_lora(cfg.lora_path(), base.config());
  SampleRequest req;
  req.cond = cfg.sample.concept_id;
  req.count = cfg.sample.count;
  req.steps = cfg.sample.steps;
  req.seed = cfg.sample.seed;
  req.lora = lora ? &lora->lora : nullptr;
  const auto x = sample_batch(base, req);
  const std::string label = cfg.sample.concept_id ? "c" + std::to_string(*cfg.sample.concept_id) : "uncond";
  const fs::path out = dir / ("samples_" + label + (lora ? "_lora" : "_base") + ".csv");
  write_samples_csv(out, x, base.config().n_image, base.config().d_data);
  log << "sample: " << cfg.sample.count << " samples -> " << out.string() << '\n';
  PhaseResult r;
  r.summary = {{"path", out.string()}, {"with_lora", lora.has_value()}};
  return r;
}

PhaseResult phase_eval(const RunConfig& cfg, std::ostream& log) {
  const SingleStreamModel base = load_base(cfg);
  const fs::path dir = prepare_run_dir(cfg);
  std::optional<LoadedLora> lora;
  if (fs::exists(cfg.lora_path())) {
    try {
      lora = load_lora(cfg.lora_path(), base.config());
    } catch (const CompatibilityError& e) {
      throw ValidationError(std::string("eval: ") + e.what());
    }
  }
  const ConceptDataset ds = cfg.dataset_object();
  std::vector<std::size_t> er = cfg.erase.erase_set.empty() ? ds.default_erase_set() : cfg.erase.erase_set;
  std::vector<std::size_t> pr = cfg.erase.preserve_set.empty() ? ds.default_preserve_set() : cfg.erase.preserve_set;
  if (lora && lora->metadata.contains("erase_set") && cfg.erase.erase_set.empty())
    er = lora->metadata.at("erase_set").get<std::vector<std::size_t>>();
  if (lora && lora->metadata.contains("preserve_set") && cfg.erase.preserve_set.empty())
    pr = lora->metadata.at("preserve_set").get<std::vector<std::size_t>>();

  const GatedLoRA* lp = lora ? &lora->lora : nullptr;
  const EvalReport rep = eval_erasure(base, lp, er, pr, cfg.eval);
  PhaseResult r;
  r.summary = {{"concepts", eval_json(rep)}, {"with_lora", lora.has_value()}, {"eval", cfg.to_json().at("eval")}};
  write_json(dir / "eval.json", r.summary);
  MetricsLog(dir / "metrics.jsonl", cfg.hash()).append({{"kind", "eval"}, {"step", 0}, {"concepts", eval_json(rep)}});

  // Scatter data: first erased and first preserved concept, base vs adapted.
  const std::size_t n_plot = std::min<std::size_t>(cfg.eval.samples, 200);
  for (std::size_t c : {er.front(), pr.front()}) {
    SampleRequest req;
    req.cond = c;
    req.count = n_plot;
    req.steps = cfg.eval.sampler_steps;
    req.seed = cfg.eval.eval_seed;
    write_samples_csv(dir / ("samples_before_c" + std::to_string(c) + ".csv"), sample_batch(base, req),
                      base.config().n_image, base.config().d_data);
    req.lora = lp;
    write_samples_csv(dir / ("samples_after_c" + std::to_string(c) + ".csv"), sample_batch(base, req),
                      base.config().n_image, base.config().d_data);
  }
  LocalizeConfig lc = cfg.localize;
  const LocalizationProfile prof = localize(base, ds, er.front(), lc);
  {
    std::ofstream f(dir / "localize.tsv");
    if (!f) throw IoError("cannot write localize.tsv");
    prof.write_tsv(f);
  }

  log << "eval (" << (lora ? "with adapter" : "base only") << "):\n" << std::setprecision(4);
  for (const auto& e : rep.concepts) {
    log << "  " << std::setw(13) << std::left << to_string(e.role) << std::right << " concept "
        << (e.concept_id ? std::to_string(*e.concept_id) : std::string("-")) << "  floor " << e.noise_floor
        << "  to_original " << e.to_original << " (x" << e.efficacy_ratio() << ")  before/after " << e.before_after
        << " (x" << e.preservation_ratio() << ")\n";
  }
  log.precision(6);
  return r;
}

PhaseResult phase_merge(const RunConfig& cfg, std::ostream& log) {
  if (cfg.merge.inputs.empty()) throw ValidationError("merge.inputs must list at least one adapter checkpoint");
  const SingleStreamModel base = load_base(cfg);
  const fs::path dir = prepare_run_dir(cfg);
  std::vector<GatedLoRA> loras;
  std::vector<std::size_t> er, pr;
  for (const auto& in : cfg.merge.inputs) {
    LoadedLora l;
    try {
      l = load_lora(in, base.config());
    } catch (const CompatibilityError& e) {
      throw ValidationError("merge input '" + in + "': " + e.what());
    }
    if (l.metadata.contains("erase_set"))
      for (auto c : l.metadata.at("erase_set").get<std::vector<std::size_t>>())
        if (std::find(er.begin(), er.end(), c) == er.end()) er.push_back(c);
    if (l.metadata.contains("preserve_set"))
      for (auto c : l.metadata.at("preserve_set").get<std::vector<std::size_t>>())
        if (std::find(pr.begin(), pr.end(), c) == pr.end()) pr.push_back(c);
    loras.push_back(std::move(l.lora));
  }
  // A concept erased by any input is no longer a preservation target.
  std::erase_if(pr, [&](std::size_t c) { return std::find(er.begin(), er.end(), c) != er.end(); });
  std::optional<std::vector<double>> w;
  if (!cfg.merge.weights.empty()) w = cfg.merge.weights;
  const GatedLoRA merged = merge(loras, w);
  const std::vector<double> used = w.value_or(std::vector<double>(loras.size(), 1.0 / static_cast<double>(loras.size())));
  save_lora(cfg.lora_path(), merged, base.config(),
            {{"merged_from", cfg.merge.inputs},
             {"weights", used},
             {"erase_set", er},
             {"preserve_set", pr},
             {"run_config_hash", cfg.hash()}});
  log << "merge: " << loras.size() << " adapters (rank " << merged.rank << ") -> " << cfg.lora_path().string() << '\n';
  PhaseResult r;
  r.summary = {{"inputs", cfg.merge.inputs}, {"weights", used}, {"rank", merged.rank}};
  return r;
}

std::vector<QuadraticCheck> run_quadratic_suite(const RunConfig::Diagnose& d) {
  const QuadraticProblem qp = QuadraticProblem::reference();
  std::vector<QuadraticCheck> out;
  const double eps0 = d.epsilons.empty() ? 1e-3 : d.epsilons.front();
  std::ostringstream msg;
  msg << std::setprecision(6);

  {  // approximation lemma and its α scaling
    QuadraticRunConfig rc{.alpha = d.alpha, .beta = d.beta, .epsilon = eps0, .steps = d.lemma_steps};
    const QuadraticTrace a = run_quadratic(qp, rc);
    rc.alpha = d.alpha / 2.0;
    const QuadraticTrace h = run_quadratic(qp, rc);
    QuadraticCheck c{"approximation_lemma"};
    double max_a = 0.0, max_h = 0.0, worst = 0.0;
    for (std::size_t i = 0; i < a.gaps.size(); ++i) {
      const double slack = a.gaps[i].gap() - (a.gaps[i].bound + a.gap_rounding[i]);
      if (slack > 0.0) ++c.violations;
      worst = std::max(worst, a.gaps[i].gap() / std::max(a.gaps[i].bound, 1e-300));
      max_a = std::max(max_a, a.gaps[i].gap());
    }
    for (const auto& g : h.gaps) max_h = std::max(max_h, g.gap());
    const double ratio = max_h > 0.0 ? max_a / max_h : 0.0;
    c.passed = c.violations == 0 && a.gaps.size() + 1 == d.lemma_steps && ratio >= 2.0 * (1.0 - 1e-9);
    msg.str("");
    msg << a.gaps.size() << " gaps, " << c.violations << " violations, max gap/bound " << worst
        << ", max-gap ratio alpha vs alpha/2 = " << ratio;
    c.detail = msg.str();
    out.push_back(c);
  }
  for (double eps : d.epsilons) {  // drift bound, exact direction under plain descent
    const QuadraticTrace t = run_quadratic(
        qp, {.alpha = d.alpha, .beta = d.beta, .epsilon = eps, .steps = d.drift_steps, .mode = DualMode::kExact});
    QuadraticCheck c{"drift_bound_eps_" + [&] {
      std::ostringstream s;
      s << eps;
      return s.str();
    }()};
    double worst = -1e300;
    for (std::size_t i = 0; i < t.drift.size(); ++i) {
      if (t.drift[i] > t.bound[i]) ++c.violations;
      worst = std::max(worst, t.drift[i] - t.bound[i]);
    }
    c.passed = c.violations == 0;
    msg.str("");
    msg << t.drift.size() << " steps, " << c.violations << " violations, max(drift - bound) " << worst;
    c.detail = msg.str();
    out.push_back(c);
  }
  {  // stationarity trend
    const QuadraticTrace t =
        run_quadratic(qp, {.alpha = d.alpha, .beta = d.beta, .epsilon = eps0, .steps = d.stationarity_steps});
    QuadraticCheck c{"pareto_stationarity"};
    double run_min = std::numeric_limits<double>::infinity(), prev = run_min;
    for (double v : t.d_norm2) {
      run_min = std::min(run_min, v);
      if (run_min > prev) ++c.violations;
      prev = run_min;
    }
    c.passed = c.violations == 0 && run_min < 1e-4;
    msg.str("");
    msg << "min ||d||^2 after " << t.d_norm2.size() << " steps = " << run_min;
    c.detail = msg.str();
    out.push_back(c);
  }
  {  // implicit vs exact λ agreement
    const QuadraticTrace e = run_quadratic(
        qp, {.alpha = d.alpha, .beta = d.beta, .epsilon = eps0, .steps = d.agreement_steps, .mode = DualMode::kExact});
    const QuadraticTrace i =
        run_quadratic(qp, {.alpha = d.alpha, .beta = d.beta, .epsilon = eps0, .steps = d.agreement_steps});
    QuadraticCheck c{"dual_agreement"};
    double sum = 0.0, worst = 0.0;
    for (std::size_t k = 0; k < e.lambda.size(); ++k) {
      sum += e.lambda[k];
      const double dev = std::abs(i.lambda[k] - sum / static_cast<double>(k + 1));
      worst = std::max(worst, dev);
      if (dev > d.agreement_band) ++c.violations;
    }
    c.passed = c.violations == 0;
    msg.str("");
    msg << "max |lambda_implicit - runmean(lambda*)| = " << worst << " (band " << d.agreement_band << ")";
    c.detail = msg.str();
    out.push_back(c);
  }
  return out;
}

PhaseResult phase_diagnose(const RunConfig& cfg, bool quadratic, std::ostream& log) {
  const fs::path dir = prepare_run_dir(cfg);
  PhaseResult r;
  if (quadratic) {
    const auto checks = run_quadratic_suite(cfg.diagnose);
    json arr = json::array();
    for (const auto& c : checks) {
      log << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
      arr.push_back({{"name", c.name}, {"passed", c.passed}, {"violations", c.violations}, {"detail", c.detail}});
      r.passed = r.passed && c.passed;
    }
    // Traces for plotting.
    const QuadraticProblem qp = QuadraticProblem::reference();
    const double eps0 = cfg.diagnose.epsilons.empty() ? 1e-3 : cfg.diagnose.epsilons.front();
    const QuadraticTrace e = run_quadratic(qp, {.alpha = cfg.diagnose.alpha, .beta = cfg.diagnose.beta, .epsilon = eps0,
                                                .steps = cfg.diagnose.agreement_steps, .mode = DualMode::kExact});
    const QuadraticTrace i = run_quadratic(qp, {.alpha = cfg.diagnose.alpha, .beta = cfg.diagnose.beta,
                                                .epsilon = eps0, .steps = cfg.diagnose.agreement_steps});
    std::ofstream f(dir / "quadratic_lambda.csv");
    f << "step,lambda_implicit,lambda_star_exact\n" << std::setprecision(17);
    for (std::size_t k = 0; k < e.lambda.size(); ++k) f << k + 1 << ',' << i.lambda[k] << ',' << e.lambda[k] << '\n';
    log << (r.passed ? "PASS" : "FAIL") << '\n';
    r.summary = {{"quadratic", arr}, {"passed", r.passed}};
    MetricsLog(dir / "metrics.jsonl", cfg.hash()).append({{"kind", "diagnose"}, {"step", 0}, {"quadratic", arr}});
  } else {
    const fs::path mp = dir / "metrics.jsonl";
    if (!fs::exists(mp)) throw ValidationError("diagnose: no metrics.jsonl in '" + dir.string() + "'; run erase first");
    std::ifstream f(mp);
    std::vector<StepLog> hist;
    for (std::string line; std::getline(f, line);) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (j.value("kind", "") != "erase") continue;
      StepLog l;
      l.step = j.at("step").get<std::size_t>();
      l.d_norm2 = j.at("d_norm2").get<double>();
      l.drift = j.at("drift").get<double>();
      hist.push_back(l);
    }
    if (hist.empty()) throw ValidationError("diagnose: metrics.jsonl has no erase records");
    DualControllerState st;
    st.alpha = cfg.erase.alpha;
    st.epsilon = cfg.erase.epsilon;
    ConvergenceDiagnostics d;
    std::ifstream sf(dir / "erase_summary.json");
    if (sf) d.smoothness = json::parse(sf).value("smoothness_estimate", 0.0);
    for (std::size_t k = 1; k < hist.size(); ++k) {
      d.stationarity.push_back(hist[k - 1].d_norm2);
      d.drift.push_back(hist[k].drift);
    }
    const DriftReport rep = drift_report(st, d);
    std::ofstream tsv(dir / "drift_report.tsv");
    tsv << "step\tdrift\texact_bound\tlinear_bound\tviolated\n" << std::setprecision(17);
    for (const auto& row : rep.rows)
      tsv << row.step << '\t' << row.drift << '\t' << row.exact_bound << '\t' << row.linear_bound << '\t'
          << (row.violated ? 1 : 0) << '\n';
    log << "diagnose: " << rep.rows.size() << " steps, " << rep.violations
        << " drift-bound violations (minibatch run; descriptive)\n";
    r.summary = {{"steps", rep.rows.size()}, {"violations", rep.violations}};
  }
  write_json(dir / "diagnose.json", r.summary);
  return r;
}

PhaseResult phase_bypass_demo(const RunConfig& cfg, std::ostream& log) {
  const SingleStreamModel base = load_base(cfg);
  const fs::path dir = prepare_run_dir(cfg);
  const ConceptDataset ds = cfg.dataset_object();
  std::size_t perturbed = cfg.bypass.concept_id;
  if (cfg.bypass.perturbed_id)
    perturbed = *cfg.bypass.perturbed_id;
  else if (auto p = ds.perturbed_of(cfg.bypass.concept_id))
    perturbed = *p;
  else
    throw ValidationError("bypass: dataset has no near-duplicate of concept " + std::to_string(cfg.bypass.concept_id));
  const BypassReport rep = bypass_demo(base, cfg.bypass.concept_id, perturbed, cfg.bypass.cfg);
  const auto& mc = base.config();
  write_samples_csv(dir / "bypass_plain.csv", rep.plain, mc.n_image, mc.d_data);
  write_samples_csv(dir / "bypass_zeroed.csv", rep.zeroed, mc.n_image, mc.d_data);
  write_samples_csv(dir / "bypass_perturbed.csv", rep.perturbed, mc.n_image, mc.d_data);
  PhaseResult r;
  r.passed = rep.bypass_ordering();
  r.summary = {{"concept", rep.concept_id},
               {"perturbed", rep.perturbed_id},
               {"zeroed_to_plain", rep.zeroed_to_plain},
               {"perturbed_to_plain", rep.perturbed_to_plain},
               {"zeroed_to_uncond", rep.zeroed_to_uncond},
               {"perturbed_to_uncond", rep.perturbed_to_uncond},
               {"plain_to_uncond", rep.plain_to_uncond},
               {"plain_noise_floor", rep.plain_noise_floor},
               {"bypass_ordering", rep.bypass_ordering()}};
  write_json(dir / "bypass.json", r.summary);
  log << std::setprecision(4) << "bypass-demo: concept " << rep.concept_id << ", perturbed id " << rep.perturbed_id
      << "\n  ED(perturbed, plain) = " << rep.perturbed_to_plain << "\n  ED(zeroed, plain)    = " << rep.zeroed_to_plain
      << "\n  ED(zeroed, uncond)   = " << rep.zeroed_to_uncond << "\n  ordering "
      << (rep.bypass_ordering() ? "holds (zeroing is bypassed by the near-duplicate)" : "does not hold") << '\n';
  log.precision(6);
  return r;
}

PhaseResult phase_plot(const RunConfig& cfg, std::ostream& log) {
  const fs::path dir = cfg.run_dir();
  const auto files = emit_plots(dir);
  for (const auto& f : files) log << "  wrote " << f.string() << '\n';
  PhaseResult r;
  r.summary = {{"files", files.size()}};
  return r;
}

}  // namespace zerase
