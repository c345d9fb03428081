// SPDX-License-Identifier: Apache-2.0
#include "oracles.hpp"

#include <cmath>
#include <stdexcept>

#include "test_util.hpp"

namespace zt {

using namespace zerase;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat as_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

std::vector<double> as_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

std::vector<double> rms(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  const double r = std::sqrt(s / static_cast<double>(x.size()) + 1e-6);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / r;
  return y;
}

}  // namespace

std::vector<double> reference_forward(const SingleStreamModel& m, std::span<const double> x_t, Concept cond, double t,
                                      const GatedLoRA* lora) {
  const auto& c = m.config();
  const std::size_t nI = c.n_image, nT = c.n_text, N = nI + nT, d = c.d_model, dd = c.d_data;
  const Mat in_w = as_mat(m.param("embed.in_w")), pos_i = as_mat(m.param("embed.pos_image")),
            pos_t = as_mat(m.param("embed.pos_text")), tok = as_mat(m.param("embed.tokens")),
            time_w = as_mat(m.param("embed.time_w")), out_w = as_mat(m.param("out.w"));
  const auto in_b = as_vec(m.param("embed.in_b")), time_b = as_vec(m.param("embed.time_b")),
             out_b = as_vec(m.param("out.b"));

  const auto feats = timestep_features(t, c.time_embed_dim);
  std::vector<double> temb(time_b);
  for (std::size_t k = 0; k < feats.size(); ++k)
    for (std::size_t j = 0; j < d; ++j) temb[j] += feats[k] * time_w[k][j];

  Mat h(N, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < nI; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double v = in_b[j] + pos_i[i][j] + temb[j];
      for (std::size_t k = 0; k < dd; ++k) v += x_t[i * dd + k] * in_w[k][j];
      h[i][j] = v;
    }
  for (std::size_t s = 0; s < nT; ++s) {
    const std::size_t id = (cond && s == c.concept_slot) ? *cond : c.vocab;
    for (std::size_t j = 0; j < d; ++j) h[nI + s][j] = tok[id][j] + temb[j] + pos_t[s][j];
  }

  const std::size_t dk = c.d_k();
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto pre = "layer" + std::to_string(l) + ".";
    Mat x(N);
    for (std::size_t r = 0; r < N; ++r) x[r] = rms(h[r]);
    Mat proj[3];
    const char* names[3] = {"wq", "wk", "wv"};
    for (int p = 0; p < 3; ++p) {
      proj[p] = mm(x, as_mat(m.param(pre + names[p])));
      if (lora) {
        const Mat down = as_mat(lora->layers[l][p].down), up = as_mat(lora->layers[l][p].up);
        for (std::size_t r = nI; r < N; ++r) {
          const Mat delta = mm(mm(Mat{x[r]}, down), up);
          for (std::size_t j = 0; j < d; ++j) proj[p][r][j] += lora->scale * delta[0][j];
        }
      }
    }
    Mat heads(N, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < c.n_heads; ++hd)
      for (std::size_t i = 0; i < N; ++i) {
        std::vector<double> s(N);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < N; ++j) {
          double v = 0.0;
          for (std::size_t k = 0; k < dk; ++k) v += proj[0][i][hd * dk + k] * proj[1][j][hd * dk + k];
          s[j] = v / std::sqrt(static_cast<double>(dk));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (std::size_t j = 0; j < N; ++j)
          for (std::size_t k = 0; k < dk; ++k) heads[i][hd * dk + k] += s[j] / z * proj[2][j][hd * dk + k];
      }
    const Mat att = mm(heads, as_mat(m.param(pre + "wo")));
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t j = 0; j < d; ++j) h[r][j] += att[r][j];
    const Mat w1 = as_mat(m.param(pre + "ffn_w1")), w2 = as_mat(m.param(pre + "ffn_w2"));
    const auto b1 = as_vec(m.param(pre + "ffn_b1")), b2 = as_vec(m.param(pre + "ffn_b2"));
    for (std::size_t r = 0; r < N; ++r) {
      const auto x2 = rms(h[r]);
      std::vector<double> hid(b1);
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t j = 0; j < hid.size(); ++j) hid[j] += x2[k] * w1[k][j];
      for (auto& v : hid) v = std::tanh(v);
      for (std::size_t j = 0; j < d; ++j) {
        double v = b2[j];
        for (std::size_t k = 0; k < hid.size(); ++k) v += hid[k] * w2[k][j];
        h[r][j] += v;
      }
    }
  }
  std::vector<double> out(nI * dd);
  for (std::size_t i = 0; i < nI; ++i) {
    const auto y = rms(h[i]);
    for (std::size_t k = 0; k < dd; ++k) {
      double v = out_b[k];
      for (std::size_t j = 0; j < d; ++j) v += y[j] * out_w[j][k];
      out[i * dd + k] = v;
    }
  }
  return out;
}

GatingOutcome gating_trial(Rng& rng) {
  ModelConfig cfg;
  cfg.d_model = 4 * (1 + rng.below(4));
  cfg.n_heads = 1 + rng.below(2) * 1;
  if (cfg.d_model % cfg.n_heads) cfg.n_heads = 1;
  cfg.n_layers = 1 + rng.below(3);
  cfg.n_image = 1 + rng.below(4);
  cfg.n_text = 2 + rng.below(3);
  cfg.vocab = 2 + rng.below(3);
  cfg.concept_slot = rng.below(cfg.n_text);
  cfg.ffn_hidden = 8;
  cfg.time_embed_dim = 4;
  const SingleStreamModel model(cfg, rng.next_u64());
  GatedLoRA lora = GatedLoRA::init(cfg, 1 + rng.below(4), rng.uniform(0.1, 3.0), rng.next_u64());
  for (auto& layer : lora.layers)
    for (auto& ad : layer) {
      for (auto& x : ad.down.mutable_data()) x = rng.normal(0.0, 1.0);
      for (auto& x : ad.up.mutable_data()) x = rng.normal(0.0, 1.0);
    }
  const std::size_t B = 1 + rng.below(3);
  const auto x = randn(rng, B * cfg.n_image * cfg.d_data);
  std::vector<Concept> conds(B);
  std::vector<double> ts(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (rng.uniform() < 0.8) conds[b] = rng.below(cfg.vocab);
    ts[b] = rng.uniform();
  }
  const auto seq = model.embed(x, conds, ts);
  ForwardOptions opts;
  opts.record_projections = true;
  const auto frozen = model.forward(seq, nullptr, opts);
  const auto adapted = model.forward(seq, &lora, opts);

  GatingOutcome o;
  o.image_rows_bitwise = true;
  const std::size_t N = cfg.seq_len(), d = cfg.d_model;
  // Layer 0 sees identical inputs; image rows of its projections must agree.
  // Deeper layers see text rows that already differ, so only layer 0 is a
  // like-for-like comparison of the projection itself.
  for (int p = 0; p < 3; ++p)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < cfg.n_image; ++i) {
        const std::size_t r = b * N + i;
        o.image_rows_bitwise = o.image_rows_bitwise && bitwise_equal(frozen.projections[0][p].data().subspan(r * d, d),
                                                                     adapted.projections[0][p].data().subspan(r * d, d));
      }
  // Per-layer check on a shared input: project the frozen residual stream of
  // every layer through both paths.
  for (std::size_t l = 1; l < cfg.n_layers && o.image_rows_bitwise; ++l) {
    GatedLoRA only_l = lora.clone();
    for (std::size_t k = 0; k < cfg.n_layers; ++k)
      if (k != l)
        for (auto& ad : only_l.layers[k])
          for (auto& v : ad.down.mutable_data()) v = 0.0;
    const auto single = model.forward(seq, &only_l, opts);
    for (int p = 0; p < 3; ++p)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < cfg.n_image; ++i) {
          const std::size_t r = b * N + i;
          o.image_rows_bitwise =
              o.image_rows_bitwise && bitwise_equal(frozen.projections[l][p].data().subspan(r * d, d),
                                                    single.projections[l][p].data().subspan(r * d, d));
        }
  }
  GatedLoRA zero = lora.clone();
  for (auto& layer : zero.layers)
    for (auto& ad : layer)
      for (auto& v : ad.down.mutable_data()) v = 0.0;
  const auto z = model.forward(seq, &zero, opts);
  o.zero_down_bitwise = bitwise_equal(frozen.velocity.data(), z.velocity.data());
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (int p = 0; p < 3; ++p)
      o.zero_down_bitwise = o.zero_down_bitwise && bitwise_equal(frozen.projections[l][p].data(), z.projections[l][p].data());
  return o;
}

std::vector<double> qp_oracle(std::span<const double> g, std::span<const double> a, double eps) {
  const std::size_t n = g.size();
  // Inactive constraint: d = g.
  double ad = 0.0;
  for (std::size_t i = 0; i < n; ++i) ad += a[i] * g[i];
  if (ad >= -eps) return {g.begin(), g.end()};
  // Active: [I  −a; aᵀ 0] [d; μ] = [g; −ε].
  const std::size_t m = n + 1;
  std::vector<std::vector<double>> K(m, std::vector<double>(m + 1, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    K[i][i] = 1.0;
    K[i][n] = -a[i];
    K[i][m] = g[i];
    K[n][i] = a[i];
  }
  K[n][m] = -eps;
  for (std::size_t col = 0; col < m; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < m; ++r)
      if (std::abs(K[r][col]) > std::abs(K[piv][col])) piv = r;
    if (K[piv][col] == 0.0) throw std::runtime_error("qp_oracle: singular KKT system");
    std::swap(K[col], K[piv]);
    for (std::size_t r = 0; r < m; ++r) {
      if (r == col) continue;
      const double f = K[r][col] / K[col][col];
      for (std::size_t c = col; c <= m; ++c) K[r][c] -= f * K[col][c];
    }
  }
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = K[i][m] / K[i][i];
  const double mu = K[n][m] / K[n][n];
  if (mu < 0.0) throw std::runtime_error("qp_oracle: negative multiplier on the active set");
  return d;
}

}  // namespace zt
