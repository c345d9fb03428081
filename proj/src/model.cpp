// SPDX-License-Identifier: Apache-2.0
#include "zerase/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "zerase/rng.hpp"

namespace zerase {

namespace {

constexpr std::uint64_t kModelStream = 0x4d4f44454cULL;  // "MODEL"
constexpr std::uint64_t kLoraStream = 0x4c4f5241ULL;     // "LORA"

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal(0.0, std);
  return Tensor::from({rows, cols}, std::move(v), true);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw DomainError("model config: " + m); };
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || n_image == 0 || n_text == 0 || vocab == 0 ||
      d_data == 0 || ffn_hidden == 0 || time_embed_dim == 0)
    fail("all sizes must be >= 1");
  if (d_model % n_heads != 0)
    fail("d_model (" + std::to_string(d_model) + ") must equal n_heads * d_k; not divisible by n_heads (" +
         std::to_string(n_heads) + ")");
  if (concept_slot >= n_text) fail("concept_slot must lie inside the text segment");
  for (const auto& pt : perturbed) {
    if (pt.id >= vocab || pt.source >= vocab) fail("perturbed token ids must be < vocab");
    if (pt.id == pt.source) fail("a perturbed token must differ from its source");
  }
  if (!(perturb_sigma >= 0.0)) fail("perturb_sigma must be >= 0");
}

std::vector<double> timestep_features(double t, std::size_t dim) {
  std::vector<double> f(dim, 0.0);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double a = 1000.0 * t * freq;
    f[i] = std::sin(a);
    f[half + i] = std::cos(a);
  }
  return f;
}

// --- GatedLoRA -------------------------------------------------------------

GatedLoRA GatedLoRA::init(const ModelConfig& cfg, std::size_t rank, double scale, std::uint64_t seed) {
  cfg.validate();
  if (rank == 0) throw DomainError("lora rank must be >= 1");
  GatedLoRA l;
  l.d_model = cfg.d_model;
  l.rank = rank;
  l.scale = scale;
  Rng rng(derive_seed(seed, kLoraStream));
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    std::array<LoraAdapter, 3> a;
    for (auto& ad : a) {
      ad.down = random_matrix(rng, cfg.d_model, rank, 0.02);
      ad.up = Tensor::zeros({rank, cfg.d_model}, true);
    }
    l.layers.push_back(std::move(a));
  }
  return l;
}

std::vector<Tensor> GatedLoRA::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers)
    for (const auto& ad : layer) {
      out.push_back(ad.down);
      out.push_back(ad.up);
    }
  return out;
}

std::vector<std::pair<std::string, Tensor>> GatedLoRA::named_parameters() const {
  static const char* kNames[] = {"q", "k", "v"};
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (std::size_t p = 0; p < 3; ++p) {
      const auto prefix = "lora.layer" + std::to_string(l) + "." + kNames[p];
      out.emplace_back(prefix + ".down", layers[l][p].down);
      out.emplace_back(prefix + ".up", layers[l][p].up);
    }
  return out;
}

void GatedLoRA::set_trainable(bool on) const {
  for (auto t : parameters()) t.set_requires_grad(on);
}

void GatedLoRA::zero_grad() const {
  for (auto t : parameters()) t.zero_grad();
}

std::vector<double> GatedLoRA::effective_delta(std::size_t layer, Projection p) const {
  const auto& ad = layers.at(layer)[static_cast<std::size_t>(p)];
  NoGradGuard ng;
  auto d = zerase::scale(matmul(ad.down, ad.up), scale);
  return {d.data().begin(), d.data().end()};
}

GatedLoRA GatedLoRA::clone() const {
  GatedLoRA c = *this;
  for (auto& layer : c.layers)
    for (auto& ad : layer) {
      ad.down = Tensor::from(ad.down.shape(), {ad.down.data().begin(), ad.down.data().end()},
                             ad.down.requires_grad());
      ad.up = Tensor::from(ad.up.shape(), {ad.up.data().begin(), ad.up.data().end()}, ad.up.requires_grad());
    }
  return c;
}

// --- AttentionRecord ---------------------------------------------------------

Tensor AttentionRecord::sample(std::size_t b) const { return slice_rows(weights, b * seq_len, (b + 1) * seq_len); }

Tensor AttentionRecord::block(std::size_t b, AttentionBlock which) const {
  const auto s = sample(b);
  switch (which) {
    case AttentionBlock::kImageImage:
      return slice_cols(slice_rows(s, 0, n_image), 0, n_image);
    case AttentionBlock::kImageText:
      return slice_cols(slice_rows(s, 0, n_image), n_image, seq_len);
    case AttentionBlock::kTextImage:
      return slice_cols(slice_rows(s, n_image, seq_len), 0, n_image);
    case AttentionBlock::kTextText:
      return slice_cols(slice_rows(s, n_image, seq_len), n_image, seq_len);
  }
  throw ContractError("AttentionRecord::block: unknown block");
}

// --- SingleStreamModel ---------------------------------------------------------

SingleStreamModel::SingleStreamModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(derive_seed(seed, kModelStream));
  const auto d = cfg_.d_model;
  auto add = [&](std::string name, Tensor t, bool trainable = true) {
    t.set_requires_grad(trainable);
    params_.push_back({std::move(name), std::move(t), trainable});
  };
  auto fan_in = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  add("embed.in_w", random_matrix(rng, cfg_.d_data, d, fan_in(cfg_.d_data)));
  add("embed.in_b", Tensor::zeros({d}));
  add("embed.pos_image", random_matrix(rng, cfg_.n_image, d, 0.5));
  add("embed.pos_text", random_matrix(rng, cfg_.n_text, d, 0.5));
  add("embed.tokens", random_matrix(rng, cfg_.vocab + 1, d, 1.0));
  add("embed.time_w", random_matrix(rng, cfg_.time_embed_dim, d, fan_in(cfg_.time_embed_dim)));
  add("embed.time_b", Tensor::zeros({d}));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const auto pre = "layer" + std::to_string(l) + ".";
    add(pre + "wq", random_matrix(rng, d, d, fan_in(d)));
    add(pre + "wk", random_matrix(rng, d, d, fan_in(d)));
    add(pre + "wv", random_matrix(rng, d, d, fan_in(d)));
    add(pre + "wo", random_matrix(rng, d, d, fan_in(d)));
    add(pre + "ffn_w1", random_matrix(rng, d, cfg_.ffn_hidden, fan_in(d)));
    add(pre + "ffn_b1", Tensor::zeros({cfg_.ffn_hidden}));
    add(pre + "ffn_w2", random_matrix(rng, cfg_.ffn_hidden, d, fan_in(cfg_.ffn_hidden)));
    add(pre + "ffn_b2", Tensor::zeros({d}));
  }
  add("out.w", random_matrix(rng, d, cfg_.d_data, fan_in(d)));
  add("out.b", Tensor::zeros({cfg_.d_data}));
  std::vector<double> noise(cfg_.perturbed.size() * d);
  for (auto& x : noise) x = rng.normal(0.0, cfg_.perturb_sigma);
  add("embed.token_perturbation", Tensor::from({cfg_.perturbed.size(), d}, std::move(noise)), false);
  index_params();
  sync_perturbed_tokens();
}

void SingleStreamModel::index_params() {
  auto find = [&](const std::string& n) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == n) return i;
    throw ContractError("model: missing parameter " + n);
  };
  in_w_ = find("embed.in_w");
  in_b_ = find("embed.in_b");
  pos_image_ = find("embed.pos_image");
  pos_text_ = find("embed.pos_text");
  tokens_ = find("embed.tokens");
  time_w_ = find("embed.time_w");
  time_b_ = find("embed.time_b");
  out_w_ = find("out.w");
  out_b_ = find("out.b");
  perturbation_ = find("embed.token_perturbation");
  layers_.clear();
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const auto pre = "layer" + std::to_string(l) + ".";
    layers_.push_back({find(pre + "wq"), find(pre + "wk"), find(pre + "wv"), find(pre + "wo"),
                       find(pre + "ffn_w1"), find(pre + "ffn_b1"), find(pre + "ffn_w2"), find(pre + "ffn_b2")});
  }
}

const Tensor& SingleStreamModel::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw ContractError("model: no parameter named " + name);
}

std::vector<Tensor> SingleStreamModel::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : params_)
    if (p.trainable) out.push_back(p.value);
  return out;
}

void SingleStreamModel::set_trainable(bool on) {
  for (auto& p : params_)
    if (p.trainable) p.value.set_requires_grad(on);
}

void SingleStreamModel::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void SingleStreamModel::sync_perturbed_tokens() {
  const auto d = cfg_.d_model;
  auto table = params_[tokens_].value.mutable_data();
  const auto noise = params_[perturbation_].value.data();
  for (std::size_t i = 0; i < cfg_.perturbed.size(); ++i) {
    const auto& pt = cfg_.perturbed[i];
    for (std::size_t j = 0; j < d; ++j) table[pt.id * d + j] = table[pt.source * d + j] + noise[i * d + j];
  }
}

SingleStreamModel SingleStreamModel::clone() const {
  SingleStreamModel m;
  m.cfg_ = cfg_;
  for (const auto& p : params_)
    m.params_.push_back({p.name,
                         Tensor::from(p.value.shape(), {p.value.data().begin(), p.value.data().end()},
                                      p.value.requires_grad()),
                         p.trainable});
  m.index_params();
  return m;
}

std::uint64_t SingleStreamModel::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data().data());
    for (std::size_t i = 0; i < p.value.numel() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

UnifiedSequence SingleStreamModel::embed(std::span<const double> x_t, Concept cond, double t) const {
  const Concept c[1] = {cond};
  const double ts[1] = {t};
  return embed(x_t, c, ts);
}

UnifiedSequence SingleStreamModel::embed(std::span<const double> x_t, std::span<const Concept> concepts,
                                         std::span<const double> t) const {
  const auto B = concepts.size();
  const auto nI = cfg_.n_image, nT = cfg_.n_text, N = cfg_.seq_len(), dd = cfg_.d_data;
  if (B == 0) throw ContractError("embed: empty batch");
  if (t.size() != B || x_t.size() != B * nI * dd)
    throw DimensionError("embed: expected " + std::to_string(B * nI * dd) + " data values and " + std::to_string(B) +
                         " timesteps, got " + std::to_string(x_t.size()) + " and " + std::to_string(t.size()));

  UnifiedSequence seq;
  seq.batch = B;
  seq.n_image = nI;
  seq.n_text = nT;
  std::vector<std::size_t> text_ids;
  text_ids.reserve(B * nT);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::size_t> ids(nT, cfg_.pad_id());
    TokenSpan span;
    if (concepts[b]) {
      if (*concepts[b] >= cfg_.vocab)
        throw DomainError("embed: concept id " + std::to_string(*concepts[b]) + " >= vocab " +
                          std::to_string(cfg_.vocab));
      ids[cfg_.concept_slot] = *concepts[b];
      span = TokenSpan::of(nI + cfg_.concept_slot, nI + cfg_.concept_slot);
    }
    text_ids.insert(text_ids.end(), ids.begin(), ids.end());
    seq.token_ids.push_back(std::move(ids));
    seq.concept_spans.push_back(span);
  }

  // Image rows: x·W_in + b_in + pos_image.
  auto x = Tensor::from({B * nI, dd}, {x_t.begin(), x_t.end()});
  std::vector<std::size_t> img_pos(B * nI);
  for (std::size_t i = 0; i < img_pos.size(); ++i) img_pos[i] = i % nI;
  auto img = add(add_rowvec(matmul(x, p(in_w_)), p(in_b_)), gather_rows(p(pos_image_), img_pos));
  auto txt = gather_rows(p(tokens_), text_ids);

  const Tensor parts[2] = {img, txt};
  auto stacked = concat_rows(parts);
  std::vector<std::size_t> order;
  order.reserve(B * N);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < nI; ++i) order.push_back(b * nI + i);
    for (std::size_t j = 0; j < nT; ++j) order.push_back(B * nI + b * nT + j);
  }
  auto h = gather_rows(stacked, order);

  // Timestep embedding added to every token of its sample.
  std::vector<double> feats;
  feats.reserve(B * cfg_.time_embed_dim);
  for (std::size_t b = 0; b < B; ++b) {
    auto f = timestep_features(t[b], cfg_.time_embed_dim);
    feats.insert(feats.end(), f.begin(), f.end());
  }
  auto temb = add_rowvec(matmul(Tensor::from({B, cfg_.time_embed_dim}, std::move(feats)), p(time_w_)), p(time_b_));
  std::vector<std::size_t> owner(B * N);
  for (std::size_t r = 0; r < owner.size(); ++r) owner[r] = r / N;
  seq.h = add(h, gather_rows(temb, owner));
  return seq;
}

ForwardResult SingleStreamModel::forward(const UnifiedSequence& seq, const GatedLoRA* lora,
                                         const ForwardOptions& opts) const {
  const auto B = seq.batch, nI = cfg_.n_image, nT = cfg_.n_text, N = cfg_.seq_len(), d = cfg_.d_model;
  if (seq.n_image != nI || seq.n_text != nT || !seq.h.defined() || seq.h.rows() != B * N || seq.h.cols() != d)
    throw DimensionError("forward: sequence " + (seq.h.defined() ? shape_str(seq.h.shape()) : std::string("<none>")) +
                         " does not match model (batch " + std::to_string(B) + ", seq_len " + std::to_string(N) +
                         ", d_model " + std::to_string(d) + ")");
  if (lora && (lora->layers.size() != cfg_.n_layers || lora->d_model != d))
    throw DimensionError("forward: lora built for " + std::to_string(lora->layers.size()) + " layers of width " +
                         std::to_string(lora->d_model) + ", model has " + std::to_string(cfg_.n_layers) + " of width " +
                         std::to_string(d));
  if (opts.intervention && opts.intervention->keep.size() != B * N)
    throw DimensionError("forward: intervention mask size mismatch");

  std::vector<std::size_t> text_rows, text_pos, image_rows;
  text_rows.reserve(B * nT);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < nI; ++i) image_rows.push_back(b * N + i);
    for (std::size_t j = 0; j < nT; ++j) {
      text_rows.push_back(b * N + nI + j);
      text_pos.push_back(j);
    }
  }

  ForwardResult res;
  auto h = scatter_add_rows(seq.h, gather_rows(p(pos_text_), text_pos), text_rows);
  const auto dk = cfg_.d_k();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const auto& L = layers_[l];
    auto x = rms_norm_rows(h);
    Tensor xt;
    if (lora) xt = gather_rows(x, text_rows);
    std::array<Tensor, 3> proj;
    const std::size_t widx[3] = {L.wq, L.wk, L.wv};
    for (std::size_t k = 0; k < 3; ++k) {
      proj[k] = matmul(x, p(widx[k]));
      if (lora) {
        const auto& ad = lora->layers[l][k];
        auto delta = scale(matmul(matmul(xt, ad.down), ad.up), lora->scale);
        proj[k] = scatter_add_rows(proj[k], delta, text_rows);
      }
    }
    if (opts.record_projections) res.projections.push_back(proj);

    std::vector<Tensor> heads;
    heads.reserve(cfg_.n_heads);
    for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
      auto q = slice_cols(proj[0], hd * dk, (hd + 1) * dk);
      auto k = slice_cols(proj[1], hd * dk, (hd + 1) * dk);
      auto v = slice_cols(proj[2], hd * dk, (hd + 1) * dk);
      auto a = softmax_rows(scale(block_matmul_nt(q, k, N), inv_sqrt_dk));
      if (opts.intervention && opts.intervention->applies_to(l))
        a = mask_columns(a, opts.intervention->keep, N, opts.intervention->renormalize);
      res.attention.push_back({l, hd, nI, N, a});
      heads.push_back(block_matmul(a, v, N));
    }
    h = add(h, matmul(concat_cols(heads), p(L.wo)));
    auto x2 = rms_norm_rows(h);
    auto ff = add_rowvec(matmul(tanh(add_rowvec(matmul(x2, p(L.w1)), p(L.b1))), p(L.w2)), p(L.b2));
    h = add(h, ff);
  }
  auto img = gather_rows(rms_norm_rows(h), image_rows);
  res.velocity = add_rowvec(matmul(img, p(out_w_)), p(out_b_));
  return res;
}

// --- attention mass & shuffling ------------------------------------------------

Tensor attention_mass(std::span<const AttentionRecord> attn, std::span<const TokenSpan> spans,
                      const AttentionMassOptions& opts) {
  if (attn.empty()) throw ContractError("attention_mass: no attention records");
  const auto N = attn[0].seq_len, nI = attn[0].n_image, B = attn[0].batch();
  if (spans.size() != B)
    throw DimensionError("attention_mass: " + std::to_string(spans.size()) + " spans for batch of " +
                         std::to_string(B));
  bool any = false;
  for (const auto& s : spans) {
    if (!s.empty && (s.last >= N || s.first > s.last))
      throw DimensionError("attention_mass: span outside sequence of length " + std::to_string(N));
    any = any || !s.empty;
  }
  if (!any) return Tensor::scalar(0.0);

  const std::size_t rows_per_sample = opts.image_rows_only ? nI : N;
  std::vector<double> w(B * N * N, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (spans[b].empty) continue;
    for (std::size_t i = 0; i < rows_per_sample; ++i)
      for (std::size_t j = spans[b].first; j <= spans[b].last; ++j) w[(b * N + i) * N + j] = 1.0;
  }
  const auto mask = Tensor::from({B * N, N}, std::move(w));
  Tensor total;
  for (const auto& rec : attn) {
    auto part = sum(mul(rec.weights, mask));
    total = total.defined() ? add(total, part) : part;
  }
  return scale(total, 1.0 / static_cast<double>(attn.size() * B * rows_per_sample));
}

UnifiedSequence permute_text(const UnifiedSequence& seq, std::span<const std::vector<std::size_t>> perm) {
  const auto B = seq.batch, nI = seq.n_image, nT = seq.n_text, N = seq.seq_len();
  if (perm.size() != B) throw DimensionError("permute_text: one permutation per sample required");
  std::vector<std::size_t> order(B * N);
  UnifiedSequence out = seq;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& pm = perm[b];
    if (pm.size() != nT) throw DimensionError("permute_text: permutation length must equal n_text");
    std::vector<bool> used(nT, false);
    for (auto s : pm) {
      if (s >= nT || used[s]) throw ContractError("permute_text: not a permutation");
      used[s] = true;
    }
    for (std::size_t i = 0; i < nI; ++i) order[b * N + i] = b * N + i;
    for (std::size_t j = 0; j < nT; ++j) {
      order[b * N + nI + j] = b * N + nI + pm[j];
      out.token_ids[b][j] = seq.token_ids[b][pm[j]];
    }
    const auto& old = seq.concept_spans[b];
    if (!old.empty) {
      std::size_t lo = N, hi = 0;
      for (std::size_t j = 0; j < nT; ++j)
        if (old.contains(nI + pm[j])) {
          lo = std::min(lo, nI + j);
          hi = std::max(hi, nI + j);
        }
      if (hi - lo + 1 != old.size()) throw ContractError("permute_text: permutation splits the concept span");
      out.concept_spans[b] = TokenSpan::of(lo, hi);
    }
  }
  out.h = gather_rows(seq.h, order);
  return out;
}

UnifiedSequence shuffle_tokens(const UnifiedSequence& seq, Rng& rng) {
  const auto nI = seq.n_image, nT = seq.n_text;
  if (nT < 2) throw ContractError("shuffle_tokens: text segment needs at least 2 tokens");
  std::vector<std::vector<std::size_t>> perms(seq.batch);
  for (std::size_t b = 0; b < seq.batch; ++b) {
    const auto& span = seq.concept_spans[b];
    const std::size_t len = span.size();
    std::vector<std::size_t> pads;
    for (std::size_t j = 0; j < nT; ++j)
      if (!span.contains(nI + j)) pads.push_back(j);
    for (std::size_t i = pads.size(); i > 1; --i) std::swap(pads[i - 1], pads[rng.below(i)]);
    const std::size_t start = len ? rng.below(pads.size() + 1) : 0;
    auto& pm = perms[b];
    std::size_t next_pad = 0;
    for (std::size_t j = 0; j < nT; ++j) {
      if (len && j >= start && j < start + len)
        pm.push_back(span.first - nI + (j - start));
      else
        pm.push_back(pads[next_pad++]);
    }
  }
  return permute_text(seq, perms);
}

}  // namespace zerase
