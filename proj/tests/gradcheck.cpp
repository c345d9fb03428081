// SPDX-License-Identifier: Apache-2.0
#include "gradcheck.hpp"

#include "test_util.hpp"
#include "zerase/flow.hpp"
#include "zerase/lagrangian.hpp"
#include "zerase/model.hpp"
#include "zerase/objectives.hpp"

namespace zt {

using namespace zerase;

namespace {

constexpr double kStep = 1e-5;

std::size_t dim(Rng& rng, std::size_t lo = 1, std::size_t hi = 5) { return lo + rng.below(hi - lo + 1); }

// sum(w ⊙ y) for a fixed random weighting w, so every output entry matters.
Tensor weighted(const Tensor& y, const std::vector<double>& w) {
  return sum(mul(y, Tensor::from(y.shape(), w)));
}

double check(Rng& rng, const std::vector<Tensor>& leaves, const std::function<Tensor()>& op) {
  const Tensor probe = [&] {
    NoGradGuard ng;
    return op();
  }();
  const auto w = randn(rng, probe.numel());
  auto f = [&] { return weighted(op(), w); };
  double worst = 0.0;
  for (const auto& l : leaves) worst = std::max(worst, leaf_fd_error(f, l, kStep));
  return worst;
}

// Positive row-stochastic matrix [B·block × block].
Tensor stochastic(Rng& rng, std::size_t rows, std::size_t block) {
  Tensor raw = rand_tensor(rng, {rows, block}, false);
  NoGradGuard ng;
  Tensor s = softmax_rows(raw);
  return Tensor::from(s.shape(), {s.data().begin(), s.data().end()}, true);
}

}  // namespace

std::vector<GradCase> primitive_cases() {
  std::vector<GradCase> c;
  c.push_back({"matmul", [](Rng& r) {
                 const auto m = dim(r), k = dim(r), n = dim(r);
                 auto a = rand_tensor(r, {m, k}), b = rand_tensor(r, {k, n});
                 return check(r, {a, b}, [&] { return matmul(a, b); });
               }});
  c.push_back({"add", [](Rng& r) {
                 const Shape s{dim(r), dim(r)};
                 auto a = rand_tensor(r, s), b = rand_tensor(r, s);
                 return check(r, {a, b}, [&] { return add(a, b); });
               }});
  c.push_back({"sub", [](Rng& r) {
                 const Shape s{dim(r), dim(r)};
                 auto a = rand_tensor(r, s), b = rand_tensor(r, s);
                 return check(r, {a, b}, [&] { return sub(a, b); });
               }});
  c.push_back({"mul", [](Rng& r) {
                 const Shape s{dim(r), dim(r)};
                 auto a = rand_tensor(r, s), b = rand_tensor(r, s);
                 return check(r, {a, b}, [&] { return mul(a, b); });
               }});
  c.push_back({"scale", [](Rng& r) {
                 auto a = rand_tensor(r, {dim(r), dim(r)});
                 const double s = r.normal(0.0, 2.0);
                 return check(r, {a}, [&] { return scale(a, s); });
               }});
  c.push_back({"add_rowvec", [](Rng& r) {
                 const auto m = dim(r), n = dim(r);
                 auto a = rand_tensor(r, {m, n}), b = rand_tensor(r, {n});
                 return check(r, {a, b}, [&] { return add_rowvec(a, b); });
               }});
  c.push_back({"sum", [](Rng& r) {
                 auto a = rand_tensor(r, {dim(r), dim(r)});
                 return check(r, {a}, [&] { return sum(a); });
               }});
  c.push_back({"mean", [](Rng& r) {
                 auto a = rand_tensor(r, {dim(r), dim(r)});
                 return check(r, {a}, [&] { return mean(a); });
               }});
  c.push_back({"squared_norm", [](Rng& r) {
                 auto a = rand_tensor(r, {dim(r), dim(r)});
                 return check(r, {a}, [&] { return squared_norm(a); });
               }});
  c.push_back({"tanh", [](Rng& r) {
                 auto a = rand_tensor(r, {dim(r), dim(r)});
                 return check(r, {a}, [&] { return zerase::tanh(a); });
               }});
  c.push_back({"softmax_rows", [](Rng& r) {
                 auto a = rand_tensor(r, {dim(r), dim(r, 2, 6)});
                 return check(r, {a}, [&] { return softmax_rows(a); });
               }});
  c.push_back({"rms_norm_rows", [](Rng& r) {
                 auto a = rand_tensor(r, {dim(r), dim(r, 2, 6)});
                 return check(r, {a}, [&] { return rms_norm_rows(a); });
               }});
  c.push_back({"slice_rows", [](Rng& r) {
                 const auto m = dim(r, 2, 6);
                 auto a = rand_tensor(r, {m, dim(r)});
                 const auto b = r.below(m), e = b + 1 + r.below(m - b);
                 return check(r, {a}, [&] { return slice_rows(a, b, e); });
               }});
  c.push_back({"slice_cols", [](Rng& r) {
                 const auto n = dim(r, 2, 6);
                 auto a = rand_tensor(r, {dim(r), n});
                 const auto b = r.below(n), e = b + 1 + r.below(n - b);
                 return check(r, {a}, [&] { return slice_cols(a, b, e); });
               }});
  c.push_back({"concat_rows", [](Rng& r) {
                 const auto n = dim(r);
                 auto a = rand_tensor(r, {dim(r), n}), b = rand_tensor(r, {dim(r), n});
                 return check(r, {a, b}, [&] {
                   const Tensor p[2] = {a, b};
                   return concat_rows(p);
                 });
               }});
  c.push_back({"concat_cols", [](Rng& r) {
                 const auto m = dim(r);
                 auto a = rand_tensor(r, {m, dim(r)}), b = rand_tensor(r, {m, dim(r)});
                 return check(r, {a, b}, [&] {
                   const Tensor p[2] = {a, b};
                   return concat_cols(p);
                 });
               }});
  c.push_back({"gather_rows", [](Rng& r) {
                 const auto m = dim(r);
                 auto a = rand_tensor(r, {m, dim(r)});
                 std::vector<std::size_t> idx(dim(r, 1, 8));
                 for (auto& i : idx) i = r.below(m);  // repeats exercise accumulation
                 return check(r, {a}, [&] { return gather_rows(a, idx); });
               }});
  c.push_back({"scatter_add_rows", [](Rng& r) {
                 const auto m = dim(r), n = dim(r);
                 auto base = rand_tensor(r, {m, n});
                 std::vector<std::size_t> idx(dim(r, 1, 6));
                 for (auto& i : idx) i = r.below(m);
                 auto delta = rand_tensor(r, {idx.size(), n});
                 return check(r, {base, delta}, [&] { return scatter_add_rows(base, delta, idx); });
               }});
  c.push_back({"block_matmul_nt", [](Rng& r) {
                 const auto blk = dim(r, 1, 4), b = dim(r, 1, 3), d = dim(r);
                 auto q = rand_tensor(r, {b * blk, d}), k = rand_tensor(r, {b * blk, d});
                 return check(r, {q, k}, [&] { return block_matmul_nt(q, k, blk); });
               }});
  c.push_back({"block_matmul", [](Rng& r) {
                 const auto blk = dim(r, 1, 4), b = dim(r, 1, 3), d = dim(r);
                 auto a = rand_tensor(r, {b * blk, blk}), v = rand_tensor(r, {b * blk, d});
                 return check(r, {a, v}, [&] { return block_matmul(a, v, blk); });
               }});
  for (bool renorm : {false, true})
    c.push_back({renorm ? "mask_columns_renormalized" : "mask_columns", [renorm](Rng& r) {
                   const auto blk = dim(r, 2, 5), b = dim(r, 1, 3);
                   auto a = stochastic(r, b * blk, blk);
                   std::vector<std::uint8_t> keep(b * blk);
                   for (std::size_t s = 0; s < b; ++s) {
                     for (std::size_t j = 0; j < blk; ++j) keep[s * blk + j] = r.uniform() < 0.6;
                     keep[s * blk + r.below(blk)] = 1;  // at least one surviving column
                   }
                   return check(r, {a}, [&] { return mask_columns(a, keep, blk, renorm); });
                 }});
  return c;
}

bool detach_blocks_gradient(Rng& rng) {
  auto a = rand_tensor(rng, {dim(rng), dim(rng)});
  const auto w = randn(rng, a.numel());
  a.zero_grad();
  backward(weighted(add(detach(a), a), w));
  for (std::size_t i = 0; i < w.size(); ++i)
    if (a.grad()[i] != w[i]) return false;
  return true;
}

namespace {

struct LossFixture {
  ConceptDataset ds = ConceptDataset::two_gaussians();
  SingleStreamModel model;
  GatedLoRA lora;
  ErasureBatch batch;
  std::uint64_t shuffle_seed;

  static ModelConfig small(const ConceptDataset& ds) {
    ModelConfig c = ds.model_config();
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 2;
    c.ffn_hidden = 8;
    c.time_embed_dim = 4;
    return c;
  }

  explicit LossFixture(Rng& r)
      : model(small(ds), r.next_u64()),
        lora(GatedLoRA::init(model.config(), 2, 1.0, r.next_u64())),
        shuffle_seed(r.next_u64()) {
    model.set_trainable(false);
    for (auto& layer : lora.layers)
      for (auto& ad : layer)
        for (auto& x : ad.up.mutable_data()) x = r.normal(0.0, 0.3);
    for (auto& layer : lora.layers)
      for (auto& ad : layer)
        for (auto& x : ad.down.mutable_data()) x = r.normal(0.0, 0.3);
    ErasureBatchConfig bc;
    bc.size = 4;
    bc.eta = r.uniform(0.5, 3.0);
    batch = make_erasure_batch(model, ds, 0, 1, bc, r.next_u64(), 0);
  }

  // Relative error on K random coordinates plus one random direction.
  double check(Rng& r, const std::function<Tensor()>& f) {
    const auto params = lora.parameters();
    lora.zero_grad();
    backward(f());
    const auto analytic = flatten_grads(params);
    const auto theta = flatten_values(params);
    auto eval = [&](std::span<const double> th) {
      NoGradGuard ng;
      set_flat_values(params, th);
      return f().item();
    };
    std::vector<double> a, n;
    std::vector<double> x = theta;
    for (int k = 0; k < 12; ++k) {
      const auto i = r.below(theta.size());
      x[i] = theta[i] + kStep;
      const double fp = eval(x);
      x[i] = theta[i] - kStep;
      const double fm = eval(x);
      x[i] = theta[i];
      a.push_back(analytic[i]);
      n.push_back((fp - fm) / (2 * kStep));
    }
    const auto dir = randn(r, theta.size());
    double da = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) {
      da += analytic[i] * dir[i];
      x[i] = theta[i] + kStep * dir[i];
    }
    const double fp = eval(x);
    for (std::size_t i = 0; i < dir.size(); ++i) x[i] = theta[i] - kStep * dir[i];
    const double fm = eval(x);
    set_flat_values(params, theta);
    const double e1 = rel_err(a, n);
    const double dn = (fp - fm) / (2 * kStep);
    const double e2 = rel_err(std::span<const double>(&da, 1), std::span<const double>(&dn, 1));
    return std::max(e1, e2);
  }
};

}  // namespace

std::vector<GradCase> loss_cases() {
  std::vector<GradCase> c;
  c.push_back({"L_erase", [](Rng& r) {
                 LossFixture fx(r);
                 return fx.check(r, [&] { return erase_loss(fx.model, &fx.lora, fx.batch); });
               }});
  c.push_back({"L_attn", [](Rng& r) {
                 LossFixture fx(r);
                 return fx.check(r, [&] {
                   Rng sr(fx.shuffle_seed);
                   return attn_loss(fx.model, &fx.lora, fx.batch, sr);
                 });
               }});
  c.push_back({"L_pr", [](Rng& r) {
                 LossFixture fx(r);
                 return fx.check(r, [&] { return preserve_loss(fx.model, &fx.lora, fx.batch); });
               }});
  c.push_back({"L_total", [](Rng& r) {
                 LossFixture fx(r);
                 const double lambda = r.uniform(0.0, 5.0);
                 return fx.check(r, [&] {
                   Rng sr(fx.shuffle_seed);
                   const ErasureLosses l = compute_losses(fx.model, &fx.lora, fx.batch, sr);
                   return add(l.er, scale(l.pr, lambda));
                 });
               }});
  return c;
}

}  // namespace zt
