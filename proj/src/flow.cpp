// SPDX-License-Identifier: Apache-2.0
#include "zerase/flow.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "zerase/rng.hpp"

namespace zerase {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kStreamData = 0x44415441;      // concept sample
constexpr std::uint64_t kStreamMixture = 0x4d495854;   // unconditional component
constexpr std::uint64_t kStreamTrain = 0x5452414e;     // training draw
constexpr std::uint64_t kStreamDropout = 0x44524f50;   // label dropout
constexpr std::uint64_t kStreamNoise = 0x4e4f4953;     // sampler start noise

ConceptDistribution gaussian(std::string name, std::size_t id, std::vector<double> center, double sd) {
  ConceptDistribution c;
  c.name = std::move(name);
  c.id = id;
  c.kind = ConceptDistribution::Kind::kGaussian;
  c.center = std::move(center);
  c.stddev = sd;
  return c;
}

}  // namespace

ConceptDataset ConceptDataset::two_gaussians() {
  ConceptDataset ds;
  ds.name_ = "two-gaussians";
  ds.concepts_ = {gaussian("A", 0, {2.0, 2.0}, 0.5), gaussian("B", 1, {-2.0, -2.0}, 0.5)};
  ds.perturbed_ = {{2, 0}};
  ds.vocab_ = 3;
  ds.erase_ = {0};
  ds.preserve_ = {1};
  return ds;
}

ConceptDataset ConceptDataset::ring_vs_blob() {
  ConceptDataset ds;
  ds.name_ = "ring-vs-blob";
  ConceptDistribution ring;
  ring.name = "ring";
  ring.id = 0;
  ring.kind = ConceptDistribution::Kind::kRing;
  ring.center = {0.0, 0.0};
  ring.stddev = 0.15;
  ring.radius = 2.0;
  ds.concepts_ = {ring, gaussian("blob", 1, {0.0, 0.0}, 0.5)};
  ds.perturbed_ = {{2, 0}};
  ds.vocab_ = 3;
  ds.erase_ = {0};
  ds.preserve_ = {1};
  return ds;
}

ConceptDataset ConceptDataset::three_gaussians() {
  ConceptDataset ds;
  ds.name_ = "three-gaussians";
  const double r = 2.5;
  const char* names[] = {"A", "B", "C"};
  for (std::size_t i = 0; i < 3; ++i) {
    const double a = std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * static_cast<double>(i) / 3.0;
    ds.concepts_.push_back(gaussian(names[i], i, {r * std::cos(a), r * std::sin(a)}, 0.5));
  }
  ds.perturbed_ = {{3, 0}};
  ds.vocab_ = 4;
  ds.erase_ = {0, 1};
  ds.preserve_ = {2};
  return ds;
}

ConceptDataset ConceptDataset::by_name(const std::string& name) {
  if (name == "two-gaussians") return two_gaussians();
  if (name == "ring-vs-blob") return ring_vs_blob();
  if (name == "three-gaussians") return three_gaussians();
  throw DomainError("unknown dataset '" + name + "'");
}

std::vector<std::string> ConceptDataset::names() { return {"two-gaussians", "ring-vs-blob", "three-gaussians"}; }

const ConceptDistribution& ConceptDataset::concept_by_id(std::size_t id) const {
  for (const auto& c : concepts_)
    if (c.id == id) return c;
  for (const auto& p : perturbed_)
    if (p.id == id) return concept_by_id(p.source);
  throw DomainError("dataset '" + name_ + "' has no concept id " + std::to_string(id));
}

ModelConfig ConceptDataset::model_config() const {
  ModelConfig cfg;
  cfg.vocab = vocab_;
  cfg.d_data = d_data_;
  cfg.n_image = n_image_;
  cfg.perturbed = perturbed_;
  return cfg;
}

std::optional<std::size_t> ConceptDataset::perturbed_of(std::size_t id) const {
  for (const auto& p : perturbed_)
    if (p.source == id) return p.id;
  return std::nullopt;
}

std::vector<double> ConceptDataset::sample(std::size_t concept_id, std::uint64_t seed, std::uint64_t index) const {
  const ConceptDistribution& c = concept_by_id(concept_id);
  Rng rng(derive_seed(seed, kStreamData ^ (static_cast<std::uint64_t>(c.id) << 40), index));
  std::vector<double> out(n_image_ * d_data_);
  for (std::size_t i = 0; i < n_image_; ++i) {
    double* row = out.data() + i * d_data_;
    if (c.kind == ConceptDistribution::Kind::kGaussian) {
      for (std::size_t j = 0; j < d_data_; ++j) row[j] = rng.normal(c.center[j], c.stddev);
    } else {
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double radius = rng.normal(c.radius, c.stddev);
      row[0] = c.center[0] + radius * std::cos(angle);
      row[1] = c.center[1] + radius * std::sin(angle);
    }
  }
  return out;
}

std::vector<double> ConceptDataset::sample_unconditional(std::uint64_t seed, std::uint64_t index) const {
  Rng pick(derive_seed(seed, kStreamMixture, index));
  const std::size_t k = static_cast<std::size_t>(pick.below(concepts_.size()));
  return sample(concepts_[k].id, seed, index);
}

FlowPath FlowPath::make(std::vector<double> x0, std::vector<double> x1, double t) {
  if (x0.size() != x1.size())
    throw DimensionError("FlowPath: x0 has " + std::to_string(x0.size()) + " values, x1 has " +
                         std::to_string(x1.size()));
  FlowPath p;
  p.t = t;
  p.x_t.resize(x0.size());
  p.v_target.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    // Written so that t = 0 and t = 1 reproduce the endpoints exactly.
    p.x_t[i] = t == 1.0 ? x1[i] : (1.0 - t) * x0[i] + t * x1[i];
    p.v_target[i] = x1[i] - x0[i];
  }
  p.x0 = std::move(x0);
  p.x1 = std::move(x1);
  return p;
}

bool label_dropped(std::uint64_t seed, std::uint64_t index, double dropout) {
  Rng rng(derive_seed(seed, kStreamDropout, index));
  return rng.uniform() < dropout;
}

TrainingExample draw_training_example(const ConceptDataset& ds, std::uint64_t seed, std::uint64_t index,
                                      double dropout) {
  Rng rng(derive_seed(seed, kStreamTrain, index));
  const auto concepts = ds.concepts();
  const std::size_t id = concepts[static_cast<std::size_t>(rng.below(concepts.size()))].id;
  std::vector<double> x0 = ds.sample(id, derive_seed(seed, kStreamTrain), index);
  std::vector<double> x1(x0.size());
  for (double& v : x1) v = rng.normal();
  const double t = rng.uniform();
  TrainingExample ex;
  ex.label = label_dropped(seed, index, dropout) ? kUnconditional : Concept(id);
  ex.path = FlowPath::make(std::move(x0), std::move(x1), t);
  return ex;
}

Tensor fm_loss(const SingleStreamModel& model, std::span<const FlowPath> batch, std::span<const Concept> labels,
               const GatedLoRA* lora) {
  if (batch.empty()) throw ContractError("fm_loss: empty batch");
  if (labels.size() != batch.size())
    throw DimensionError("fm_loss: " + std::to_string(batch.size()) + " paths but " +
                         std::to_string(labels.size()) + " labels");
  const ModelConfig& cfg = model.config();
  const std::size_t per = cfg.n_image * cfg.d_data;
  std::vector<double> xt, target, ts;
  xt.reserve(batch.size() * per);
  target.reserve(batch.size() * per);
  for (const FlowPath& p : batch) {
    if (p.x_t.size() != per)
      throw DimensionError("fm_loss: path has " + std::to_string(p.x_t.size()) + " values, model expects " +
                           std::to_string(per));
    xt.insert(xt.end(), p.x_t.begin(), p.x_t.end());
    target.insert(target.end(), p.v_target.begin(), p.v_target.end());
    ts.push_back(p.t);
  }
  const UnifiedSequence seq = model.embed(xt, labels, ts);
  const ForwardResult out = model.forward(seq, lora);
  const Tensor diff = sub(out.velocity, Tensor::from({batch.size() * cfg.n_image, cfg.d_data}, std::move(target)));
  return scale(squared_norm(diff), 1.0 / static_cast<double>(batch.size()));
}

std::vector<double> euler_integrate(const VelocityField& v, std::vector<double> x, std::size_t steps) {
  if (steps == 0) throw ContractError("euler_integrate: steps must be >= 1");
  const double dt = 1.0 / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) * dt;
    const std::vector<double> vel = v(x, t);
    if (vel.size() != x.size())
      throw DimensionError("euler_integrate: velocity has " + std::to_string(vel.size()) + " values, state has " +
                           std::to_string(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= dt * vel[i];
  }
  return x;
}

std::vector<double> initial_noise(const ModelConfig& cfg, std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, kStreamNoise, index));
  std::vector<double> x(cfg.n_image * cfg.d_data);
  for (double& v : x) v = rng.normal();
  return x;
}

std::vector<double> sample_batch(const SingleStreamModel& model, const SampleRequest& req) {
  const ModelConfig& cfg = model.config();
  const std::size_t per = cfg.n_image * cfg.d_data;
  std::vector<double> x;
  x.reserve(req.count * per);
  for (std::size_t i = 0; i < req.count; ++i) {
    const std::vector<double> n = initial_noise(cfg, req.seed, i);
    x.insert(x.end(), n.begin(), n.end());
  }
  if (req.count == 0) return x;

  NoGradGuard guard;
  const std::vector<Concept> labels(req.count, req.cond);
  std::optional<AttentionIntervention> iv;
  bool iv_resolved = false;
  VelocityField field = [&](std::span<const double> state, double t) {
    const std::vector<double> ts(req.count, t);
    const UnifiedSequence seq = model.embed(state, labels, ts);
    if (req.intervention && !iv_resolved) {
      iv = req.intervention(seq);
      iv_resolved = true;
    }
    ForwardOptions opts;
    if (iv) opts.intervention = &*iv;
    const ForwardResult out = model.forward(seq, req.lora, opts);
    const auto v = out.velocity.data();
    return std::vector<double>(v.begin(), v.end());
  };
  return euler_integrate(field, std::move(x), req.steps);
}

std::vector<double> euler_sample(const SingleStreamModel& model, Concept cond, std::size_t steps,
                                 const GatedLoRA* lora, std::uint64_t seed) {
  SampleRequest req;
  req.cond = cond;
  req.count = 1;
  req.steps = steps;
  req.seed = seed;
  req.lora = lora;
  return sample_batch(model, req);
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) throw DomainError("AdamW: learning rate must be > 0");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw DomainError("AdamW: betas must lie in [0, 1)");
  for (const Tensor& p : params_) {
    m_.emplace_back(p.data().size(), 0.0);
    v_.emplace_back(p.data().size(), 0.0);
  }
}

std::size_t AdamW::num_values() const {
  std::size_t n = 0;
  for (const Tensor& p : params_) n += p.data().size();
  return n;
}

void AdamW::step() { step(flatten_grads(params_)); }

void AdamW::step(std::span<const double> flat_grad) {
  if (flat_grad.size() != num_values())
    throw DimensionError("AdamW::step: gradient has " + std::to_string(flat_grad.size()) + " values, expected " +
                         std::to_string(num_values()));
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t off = 0;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const std::span<double> w = params_[k].mutable_data();
    std::vector<double>& m = m_[k];
    std::vector<double>& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = flat_grad[off + i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= cfg_.lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
    off += w.size();
  }
}

std::vector<double> flatten_grads(std::span<const Tensor> params) {
  std::vector<double> out;
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      const auto& g = p.grad();
      out.insert(out.end(), g.begin(), g.end());
    } else {
      out.insert(out.end(), p.data().size(), 0.0);
    }
  }
  return out;
}

std::vector<double> flatten_values(std::span<const Tensor> params) {
  std::vector<double> out;
  for (const Tensor& p : params) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

BaseTrainResult train_base(const ModelConfig& model_cfg, const ConceptDataset& ds, const BaseTrainConfig& cfg,
                           const std::function<void(std::size_t, double)>& on_step) {
  if (model_cfg.d_data != ds.d_data() || model_cfg.n_image != ds.n_image())
    throw DomainError("train_base: model shape does not match dataset '" + ds.name() + "'");
  if (cfg.batch == 0) throw DomainError("train_base: batch must be >= 1");
  BaseTrainResult res{SingleStreamModel(model_cfg, cfg.seed), {}};
  SingleStreamModel& model = res.model;
  model.set_trainable(true);
  AdamW opt(model.trainable_parameters(), cfg.optim);

  std::vector<FlowPath> paths(cfg.batch);
  std::vector<Concept> labels(cfg.batch);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      TrainingExample ex = draw_training_example(ds, cfg.seed, step * cfg.batch + b, cfg.label_dropout);
      labels[b] = ex.label;
      paths[b] = std::move(ex.path);
    }
    model.zero_grad();
    const Tensor loss = fm_loss(model, paths, labels);
    const double value = loss.item();
    if (!std::isfinite(value))
      throw TrainingError("train_base: loss is not finite at step " + std::to_string(step), step);
    backward(loss);
    opt.step();
    res.loss_log.push_back(value);
    if (on_step) on_step(step, value);
  }
  model.zero_grad();
  if (cfg.steps > 0) model.sync_perturbed_tokens();
  return res;
}

}  // namespace zerase
