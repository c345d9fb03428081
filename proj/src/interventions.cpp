// SPDX-License-Identifier: Apache-2.0
#include "zerase/interventions.hpp"

#include <algorithm>
#include <ostream>

#include "zerase/metrics.hpp"
#include "zerase/rng.hpp"

namespace zerase {

namespace {
constexpr std::uint64_t kStreamProbe = 0x50524f42;
}

std::vector<TokenSpan> resolve_zeroing(const ZeroingSpec& spec, const UnifiedSequence& seq) {
  std::vector<TokenSpan> out(seq.batch);
  for (std::size_t b = 0; b < seq.batch; ++b) {
    const auto& ids = seq.token_ids[b];
    std::size_t first = ids.size(), last = 0;
    for (std::size_t j = 0; j < ids.size(); ++j)
      if (ids[j] == spec.target) {
        first = std::min(first, j);
        last = j;
      }
    if (first == ids.size()) continue;
    bool contiguous = true;
    for (std::size_t j = first; j <= last; ++j) contiguous = contiguous && ids[j] == spec.target;
    if (contiguous) out[b] = TokenSpan::of(seq.n_image + first, seq.n_image + last);
  }
  return out;
}

std::optional<AttentionIntervention> make_intervention(const ZeroingSpec& spec, const UnifiedSequence& seq) {
  const auto spans = resolve_zeroing(spec, seq);
  const std::size_t N = seq.seq_len();
  AttentionIntervention iv;
  iv.keep.assign(seq.batch * N, 1);
  iv.layers = spec.layers;
  iv.renormalize = spec.renormalize;
  bool any = false;
  for (std::size_t b = 0; b < seq.batch; ++b) {
    if (spans[b].empty) continue;
    any = true;
    for (std::size_t j = spans[b].first; j <= spans[b].last; ++j) iv.keep[b * N + j] = 0;
  }
  if (!any) return std::nullopt;
  return iv;
}

ForwardResult zeroed_forward(const SingleStreamModel& model, const UnifiedSequence& seq, const ZeroingSpec& spec,
                             const GatedLoRA* lora) {
  const auto iv = make_intervention(spec, seq);
  ForwardOptions opts;
  if (iv) opts.intervention = &*iv;
  return model.forward(seq, lora, opts);
}

BypassReport bypass_demo(const SingleStreamModel& model, std::size_t concept_id, std::size_t perturbed_id,
                         const BypassConfig& cfg) {
  const ModelConfig& mc = model.config();
  if (concept_id >= mc.vocab || perturbed_id >= mc.vocab)
    throw DomainError("bypass_demo: concept ids must be < vocab " + std::to_string(mc.vocab));
  ZeroingSpec spec;
  spec.target = concept_id;
  spec.renormalize = cfg.renormalize;

  auto draw = [&](Concept c, bool zero, std::uint64_t seed) {
    SampleRequest req;
    req.cond = c;
    req.count = cfg.samples;
    req.steps = cfg.steps;
    req.seed = seed;
    if (zero) req.intervention = [&spec](const UnifiedSequence& s) { return make_intervention(spec, s); };
    return sample_batch(model, req);
  };

  BypassReport r;
  r.concept_id = concept_id;
  r.perturbed_id = perturbed_id;
  r.plain = draw(concept_id, false, cfg.seed);
  r.zeroed = draw(concept_id, true, cfg.seed);
  r.perturbed = draw(perturbed_id, true, cfg.seed);
  const auto plain_ref = draw(concept_id, false, cfg.ref_seed);
  const auto uncond_ref = draw(kUnconditional, false, cfg.ref_seed);
  const std::size_t d = mc.d_data;
  r.zeroed_to_plain = energy_distance(r.zeroed, plain_ref, d);
  r.perturbed_to_plain = energy_distance(r.perturbed, plain_ref, d);
  r.zeroed_to_uncond = energy_distance(r.zeroed, uncond_ref, d);
  r.perturbed_to_uncond = energy_distance(r.perturbed, uncond_ref, d);
  r.plain_to_uncond = energy_distance(r.plain, uncond_ref, d);
  r.plain_noise_floor = energy_distance(r.plain, plain_ref, d);
  return r;
}

void LocalizationProfile::write_tsv(std::ostream& os) const {
  os << "layer";
  for (std::size_t h = 0; h < n_heads; ++h) os << "\thead" << h;
  os << '\n';
  const auto old = os.precision(17);
  for (std::size_t l = 0; l < n_layers; ++l) {
    os << l;
    for (std::size_t h = 0; h < n_heads; ++h) os << '\t' << at(l, h);
    os << '\n';
  }
  os.precision(old);
}

LocalizationProfile localize_records(const ForwardResult& out, std::span<const TokenSpan> spans,
                                     std::size_t n_layers, std::size_t n_heads) {
  LocalizationProfile p;
  p.n_layers = n_layers;
  p.n_heads = n_heads;
  p.mass.assign(n_layers * n_heads, 0.0);
  for (const AttentionRecord& rec : out.attention) {
    const std::span<const AttentionRecord> one(&rec, 1);
    p.mass[rec.layer * n_heads + rec.head] = attention_mass(one, spans).item();
  }
  return p;
}

LocalizationProfile localize(const SingleStreamModel& model, const ConceptDataset& ds, std::size_t concept_id,
                             const LocalizeConfig& cfg) {
  const ModelConfig& mc = model.config();
  if (cfg.batches == 0 || cfg.batch_size == 0) throw DomainError("localize: batches and batch_size must be >= 1");
  NoGradGuard guard;
  LocalizationProfile total;
  total.n_layers = mc.n_layers;
  total.n_heads = mc.n_heads;
  total.mass.assign(mc.n_layers * mc.n_heads, 0.0);
  for (std::size_t k = 0; k < cfg.batches; ++k) {
    Rng rng(derive_seed(cfg.seed, kStreamProbe, k));
    std::vector<double> x;
    std::vector<double> ts;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      std::vector<double> x0 = ds.sample_unconditional(derive_seed(cfg.seed, kStreamProbe), k * cfg.batch_size + i);
      std::vector<double> x1(x0.size());
      for (double& v : x1) v = rng.normal();
      const FlowPath p = FlowPath::make(std::move(x0), std::move(x1), rng.uniform());
      x.insert(x.end(), p.x_t.begin(), p.x_t.end());
      ts.push_back(p.t);
    }
    const std::vector<Concept> labels(cfg.batch_size, Concept(concept_id));
    const UnifiedSequence seq = model.embed(x, labels, ts);
    const ForwardResult out = model.forward(seq);
    const auto prof = localize_records(out, seq.concept_spans, mc.n_layers, mc.n_heads);
    for (std::size_t i = 0; i < total.mass.size(); ++i) total.mass[i] += prof.mass[i] / static_cast<double>(cfg.batches);
  }
  return total;
}

}  // namespace zerase
