// SPDX-License-Identifier: Apache-2.0
#include "zerase/objectives.hpp"

#include <string>

namespace zerase {

namespace {

constexpr std::uint64_t kStreamErasure = 0x45524153;  // erasure batch draws

std::vector<double> frozen_velocity(const SingleStreamModel& m, const std::vector<double>& x, Concept c,
                                    const std::vector<double>& t) {
  const std::vector<Concept> labels(t.size(), c);
  const ForwardResult out = m.forward(m.embed(x, labels, t));
  const auto v = out.velocity.data();
  return {v.begin(), v.end()};
}

Tensor adapted_velocity(const SingleStreamModel& m, const GatedLoRA* lora, const ErasureBatch& b, Concept c) {
  const std::vector<Concept> labels(b.count, c);
  return m.forward(m.embed(b.x_t, labels, b.t), lora).velocity;
}

Tensor mean_sq_dist(const Tensor& v, std::vector<double> target, std::size_t count) {
  const Tensor tgt = Tensor::from(v.shape(), std::move(target));
  return scale(squared_norm(sub(v, tgt)), 1.0 / static_cast<double>(count));
}

void check_batch(const SingleStreamModel& m, const ErasureBatch& b) {
  const ModelConfig& cfg = m.config();
  if (b.count == 0) throw ContractError("erasure batch is empty");
  if (b.x_t.size() != b.count * cfg.n_image * cfg.d_data || b.t.size() != b.count)
    throw DimensionError("erasure batch shape does not match the model");
  if (b.v_uncond.size() != b.x_t.size() || b.v_er.size() != b.x_t.size() || b.v_pr.size() != b.x_t.size())
    throw ContractError("erasure batch has no cached frozen predictions");
}

}  // namespace

void cache_frozen_predictions(const SingleStreamModel& frozen, ErasureBatch& batch) {
  NoGradGuard guard;
  batch.v_uncond = frozen_velocity(frozen, batch.x_t, kUnconditional, batch.t);
  batch.v_er = frozen_velocity(frozen, batch.x_t, batch.c_er, batch.t);
  batch.v_pr = frozen_velocity(frozen, batch.x_t, batch.c_pr, batch.t);
}

ErasureBatch make_erasure_batch(const SingleStreamModel& frozen, const ConceptDataset& ds, std::size_t c_er,
                                std::size_t c_pr, const ErasureBatchConfig& cfg, std::uint64_t seed,
                                std::uint64_t index) {
  if (!(cfg.eta > 0.0)) throw DomainError("erasure batch: eta must be > 0");
  if (cfg.size == 0) throw DomainError("erasure batch: size must be >= 1");
  ErasureBatch b;
  b.count = cfg.size;
  b.c_er = c_er;
  b.c_pr = c_pr;
  b.eta = cfg.eta;
  const std::uint64_t stream_seed = derive_seed(seed, kStreamErasure, index);
  Rng rng(stream_seed);

  if (cfg.source == XtSource::kNoisedData) {
    for (std::size_t i = 0; i < cfg.size; ++i) {
      const std::size_t c = i % 2 == 0 ? c_er : c_pr;
      std::vector<double> x0 = ds.sample(c, stream_seed, i);
      std::vector<double> x1(x0.size());
      for (double& v : x1) v = rng.normal();
      const FlowPath p = FlowPath::make(std::move(x0), std::move(x1), rng.uniform());
      b.x_t.insert(b.x_t.end(), p.x_t.begin(), p.x_t.end());
      b.t.push_back(p.t);
    }
  } else {
    if (cfg.trajectory_steps == 0) throw DomainError("erasure batch: trajectory_steps must be >= 1");
    NoGradGuard guard;
    const ModelConfig& mc = frozen.config();
    const double dt = 1.0 / static_cast<double>(cfg.trajectory_steps);
    for (std::size_t i = 0; i < cfg.size; ++i) {
      const std::size_t c = i % 2 == 0 ? c_er : c_pr;
      std::vector<double> x = initial_noise(mc, stream_seed, i);
      const std::size_t stop = static_cast<std::size_t>(rng.below(cfg.trajectory_steps));
      double t = 1.0;
      for (std::size_t k = 0; k < stop; ++k) {
        const ForwardResult out = frozen.forward(frozen.embed(x, Concept(c), t));
        const auto v = out.velocity.data();
        for (std::size_t j = 0; j < x.size(); ++j) x[j] -= dt * v[j];
        t = 1.0 - static_cast<double>(k + 1) * dt;
      }
      b.x_t.insert(b.x_t.end(), x.begin(), x.end());
      b.t.push_back(t);
    }
  }
  cache_frozen_predictions(frozen, b);
  return b;
}

Tensor erase_loss(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch) {
  check_batch(frozen, batch);
  std::vector<double> target(batch.x_t.size());
  for (std::size_t i = 0; i < target.size(); ++i)
    target[i] = batch.v_uncond[i] - batch.eta * (batch.v_er[i] - batch.v_uncond[i]);
  return mean_sq_dist(adapted_velocity(frozen, lora, batch, batch.c_er), std::move(target), batch.count);
}

Tensor attn_loss(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch, Rng& rng,
                 const AttentionMassOptions& opts) {
  check_batch(frozen, batch);
  const std::vector<Concept> labels(batch.count, batch.c_er);
  const UnifiedSequence seq = frozen.embed(batch.x_t, labels, batch.t);
  for (const TokenSpan& s : seq.concept_spans)
    if (s.empty) throw ContractError("attn_loss: concept span is empty");
  const UnifiedSequence shuffled = shuffle_tokens(seq, rng);
  const ForwardResult out = frozen.forward(shuffled, lora);
  return attention_mass(out.attention, shuffled.concept_spans, opts);
}

Tensor preserve_loss(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch) {
  check_batch(frozen, batch);
  const Tensor a = mean_sq_dist(adapted_velocity(frozen, lora, batch, kUnconditional), batch.v_uncond, batch.count);
  const Tensor b = mean_sq_dist(adapted_velocity(frozen, lora, batch, batch.c_pr), batch.v_pr, batch.count);
  return add(a, b);
}

Tensor er_total(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch, Rng& rng,
                double attn_coef) {
  const Tensor e = erase_loss(frozen, lora, batch);
  if (attn_coef == 0.0) return e;
  return add(e, scale(attn_loss(frozen, lora, batch, rng), attn_coef));
}

ErasureLosses compute_losses(const SingleStreamModel& frozen, const GatedLoRA* lora, const ErasureBatch& batch,
                             Rng& rng, double attn_coef) {
  ErasureLosses l;
  l.erase = erase_loss(frozen, lora, batch);
  l.attn = attn_loss(frozen, lora, batch, rng);
  l.er = add(l.erase, scale(l.attn, attn_coef));
  l.pr = preserve_loss(frozen, lora, batch);
  return l;
}

}  // namespace zerase
