// SPDX-License-Identifier: Apache-2.0
#include "zerase/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace zerase {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_next_seq = 1;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->seq = g_next_seq++;
  return n;
}

// Wires a result node into the tape when any parent needs a gradient.
Tensor finish(std::shared_ptr<Node> out, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> fn) {
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
      out->requires_grad = true;
      out->parents = std::move(parents);
      out->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(out));
}

std::vector<double>& grad_buf(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.dim() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// c[m×n] += a[m×k] · b[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  auto node = new_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from({}, {v}); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 2 ? s[0] : (s.size() == 1 ? 1 : 1);
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.size() == 2 ? s[1] : (s.size() == 1 ? s[0] : 1);
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw ContractError("mutable_data: only leaf tensors may be modified in place");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad: only leaves can toggle requires_grad");
  node_->requires_grad = on;
}

void Tensor::zero_grad() { node_->grad.clear(); }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// --- primitives --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish(new_node({m, n}, std::move(out)), {an, bn}, [an, bn, m, k, n](Node& self) {
    if (an->requires_grad) gemm_nt(self.grad.data(), bn->data.data(), grad_buf(*an).data(), m, n, k);
    if (bn->requires_grad) gemm_tn(an->data.data(), self.grad.data(), grad_buf(*bn).data(), m, k, n);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish(new_node(a.shape(), std::move(out)), {an, bn}, [an, bn](Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = grad_buf(*p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish(new_node(a.shape(), std::move(out)), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = grad_buf(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = grad_buf(*bn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish(new_node(a.shape(), std::move(out)), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = grad_buf(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = grad_buf(*bn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  auto an = a.node_ptr();
  return finish(new_node(a.shape(), std::move(out)), {an}, [an, s](Node& self) {
    auto& g = grad_buf(*an);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  require_matrix(a, "add_rowvec");
  const auto m = a.rows(), n = a.cols();
  if (bias.numel() != n)
    throw DimensionError("add_rowvec: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(a.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + bias.data()[j];
  auto an = a.node_ptr(), bn = bias.node_ptr();
  return finish(new_node(a.shape(), std::move(out)), {an, bn}, [an, bn, m, n](Node& self) {
    if (an->requires_grad) {
      auto& g = grad_buf(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = grad_buf(*bn);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node_ptr();
  return finish(new_node({}, {s}), {an}, [an](Node& self) {
    auto& g = grad_buf(*an);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor squared_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  auto an = a.node_ptr();
  return finish(new_node({}, {s}), {an}, [an](Node& self) {
    auto& g = grad_buf(*an);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * an->data[i] * self.grad[0];
  });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  auto an = a.node_ptr();
  auto node = new_node(a.shape(), std::move(out));
  Node* raw = node.get();
  return finish(std::move(node), {an}, [an, raw](Node& self) {
    auto& g = grad_buf(*an);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = raw->data[i];
      g[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  const auto m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(x[j])) throw NumericError("softmax_rows: NaN in row " + std::to_string(i));
      mx = std::max(mx, x[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  auto an = a.node_ptr();
  auto node = new_node(a.shape(), std::move(out));
  Node* raw = node.get();
  return finish(std::move(node), {an}, [an, raw, m, n](Node& self) {
    auto& g = grad_buf(*an);
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = raw->data.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor rms_norm_rows(const Tensor& a, double eps) {
  require_matrix(a, "rms_norm_rows");
  const auto m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  std::vector<double> inv(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += x[j] * x[j];
    inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[j] * inv[i];
  }
  auto an = a.node_ptr();
  return finish(new_node(a.shape(), std::move(out)), {an},
                [an, inv = std::move(inv), m, n](Node& self) {
                  auto& g = grad_buf(*an);
                  const double dn = static_cast<double>(n);
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* x = an->data.data() + i * n;
                    const double* gy = self.grad.data() + i * n;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += gy[j] * x[j];
                    const double r = inv[i];
                    const double c = r * r * r * dot / dn;
                    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[j] * r - x[j] * c;
                  }
                });
}

Tensor detach(const Tensor& a) {
  auto node = new_node(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
  return Tensor(std::move(node));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_rows");
  if (begin > end || end > a.rows())
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(a.shape()));
  const auto n = a.cols();
  std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + end * n);
  auto an = a.node_ptr();
  return finish(new_node({end - begin, n}, std::move(out)), {an}, [an, begin, n](Node& self) {
    auto& g = grad_buf(*an);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_cols");
  if (begin > end || end > a.cols())
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(a.shape()));
  const auto m = a.rows(), n = a.cols(), w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * n + begin + j];
  auto an = a.node_ptr();
  return finish(new_node({m, w}, std::move(out)), {an}, [an, begin, m, n, w](Node& self) {
    auto& g = grad_buf(*an);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const auto n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n)
      throw DimensionError("concat_rows: column count mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    parents.push_back(p.node_ptr());
  }
  auto ps = parents;
  return finish(new_node({m, n}, std::move(out)), std::move(parents), [ps](Node& self) {
    std::size_t off = 0;
    for (const auto& p : ps) {
      if (p->requires_grad) {
        auto& g = grad_buf(*p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->data.size();
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const auto m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m)
      throw DimensionError("concat_cols: row count mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::vector<std::shared_ptr<Node>> parents;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + off + j] = p.data()[i * w + j];
    off += w;
    parents.push_back(p.node_ptr());
  }
  auto ps = parents;
  return finish(new_node({m, n}, std::move(out)), std::move(parents), [ps, m, n](Node& self) {
    std::size_t off = 0;
    for (const auto& p : ps) {
      const auto w = p->shape[1];
      if (p->requires_grad) {
        auto& g = grad_buf(*p);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + off + j];
      }
      off += w;
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_matrix(a, "gather_rows");
  const auto n = a.cols();
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows())
      throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " outside " + shape_str(a.shape()));
    std::copy_n(a.data().begin() + index[i] * n, n, out.begin() + i * n);
  }
  auto an = a.node_ptr();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish(new_node({index.size(), n}, std::move(out)), {an}, [an, idx = std::move(idx), n](Node& self) {
    auto& g = grad_buf(*an);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
  });
}

Tensor scatter_add_rows(const Tensor& base, const Tensor& delta, std::span<const std::size_t> index) {
  require_matrix(base, "scatter_add_rows");
  require_matrix(delta, "scatter_add_rows");
  const auto n = base.cols();
  if (delta.cols() != n || delta.rows() != index.size())
    throw DimensionError("scatter_add_rows: delta " + shape_str(delta.shape()) + " incompatible with base " +
                         shape_str(base.shape()) + " and " + std::to_string(index.size()) + " indices");
  std::vector<double> out(base.data().begin(), base.data().end());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= base.rows())
      throw DimensionError("scatter_add_rows: index " + std::to_string(index[i]) + " outside " +
                           shape_str(base.shape()));
    for (std::size_t j = 0; j < n; ++j) out[index[i] * n + j] += delta.data()[i * n + j];
  }
  auto bn = base.node_ptr(), dn = delta.node_ptr();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish(new_node(base.shape(), std::move(out)), {bn, dn}, [bn, dn, idx = std::move(idx), n](Node& self) {
    if (bn->requires_grad) {
      auto& g = grad_buf(*bn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (dn->requires_grad) {
      auto& g = grad_buf(*dn);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[idx[i] * n + j];
    }
  });
}

Tensor block_matmul_nt(const Tensor& q, const Tensor& k, std::size_t block) {
  require_matrix(q, "block_matmul_nt");
  require_matrix(k, "block_matmul_nt");
  if (q.shape() != k.shape() || block == 0 || q.rows() % block != 0)
    throw DimensionError("block_matmul_nt: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()) +
                         " with block " + std::to_string(block));
  const auto nb = q.rows() / block, d = q.cols();
  std::vector<double> out(q.rows() * block, 0.0);
  for (std::size_t b = 0; b < nb; ++b)
    gemm_nt(q.data().data() + b * block * d, k.data().data() + b * block * d, out.data() + b * block * block,
            block, d, block);
  auto qn = q.node_ptr(), kn = k.node_ptr();
  return finish(new_node({q.rows(), block}, std::move(out)), {qn, kn}, [qn, kn, nb, block, d](Node& self) {
    for (std::size_t b = 0; b < nb; ++b) {
      const double* g = self.grad.data() + b * block * block;
      // dq_b = g_b · k_b ; dk_b = g_bᵀ · q_b
      if (qn->requires_grad)
        gemm_nn(g, kn->data.data() + b * block * d, grad_buf(*qn).data() + b * block * d, block, block, d);
      if (kn->requires_grad)
        gemm_tn(g, qn->data.data() + b * block * d, grad_buf(*kn).data() + b * block * d, block, block, d);
    }
  });
}

Tensor block_matmul(const Tensor& a, const Tensor& v, std::size_t block) {
  require_matrix(a, "block_matmul");
  require_matrix(v, "block_matmul");
  if (block == 0 || a.cols() != block || a.rows() != v.rows() || a.rows() % block != 0)
    throw DimensionError("block_matmul: " + shape_str(a.shape()) + " vs " + shape_str(v.shape()) + " with block " +
                         std::to_string(block));
  const auto nb = a.rows() / block, d = v.cols();
  std::vector<double> out(v.rows() * d, 0.0);
  for (std::size_t b = 0; b < nb; ++b)
    gemm_nn(a.data().data() + b * block * block, v.data().data() + b * block * d, out.data() + b * block * d,
            block, block, d);
  auto an = a.node_ptr(), vn = v.node_ptr();
  return finish(new_node({v.rows(), d}, std::move(out)), {an, vn}, [an, vn, nb, block, d](Node& self) {
    for (std::size_t b = 0; b < nb; ++b) {
      const double* g = self.grad.data() + b * block * d;
      if (an->requires_grad)
        gemm_nt(g, vn->data.data() + b * block * d, grad_buf(*an).data() + b * block * block, block, d, block);
      if (vn->requires_grad)
        gemm_tn(an->data.data() + b * block * block, g, grad_buf(*vn).data() + b * block * d, block, block, d);
    }
  });
}

Tensor mask_columns(const Tensor& a, std::span<const std::uint8_t> keep, std::size_t block, bool renormalize) {
  require_matrix(a, "mask_columns");
  if (block == 0 || a.cols() != block || a.rows() % block != 0 || keep.size() != a.rows())
    throw DimensionError("mask_columns: " + shape_str(a.shape()) + " with block " + std::to_string(block) +
                         " and mask of " + std::to_string(keep.size()));
  const auto m = a.rows(), n = block;
  std::vector<double> out(a.numel());
  std::vector<double> rowsum(m, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint8_t* km = keep.data() + (i / block) * block;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = km[j] ? a.data()[i * n + j] : 0.0;
      out[i * n + j] = v;
      s += v;
    }
    if (renormalize) {
      rowsum[i] = s;
      if (s > 0.0)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
    }
  }
  auto an = a.node_ptr();
  std::vector<std::uint8_t> km(keep.begin(), keep.end());
  auto node = new_node(a.shape(), std::move(out));
  Node* raw = node.get();
  return finish(std::move(node), {an},
                [an, raw, km = std::move(km), rowsum = std::move(rowsum), m, n, block, renormalize](Node& self) {
                  auto& g = grad_buf(*an);
                  for (std::size_t i = 0; i < m; ++i) {
                    const std::uint8_t* k = km.data() + (i / block) * block;
                    const double* gy = self.grad.data() + i * n;
                    if (!renormalize) {
                      for (std::size_t j = 0; j < n; ++j)
                        if (k[j]) g[i * n + j] += gy[j];
                      continue;
                    }
                    if (rowsum[i] <= 0.0) continue;
                    const double* y = raw->data.data() + i * n;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                    for (std::size_t j = 0; j < n; ++j)
                      if (k[j]) g[i * n + j] += (gy[j] - dot) / rowsum[i];
                  }
                });
}

// --- tape ------------------------------------------------------------------

std::vector<Node*> collect_tape(const Tensor& root) {
  std::vector<Node*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node()};
  seen.insert(root.node());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq < b->seq; });
  return order;
}

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1 || root.dim() > 1)
    throw ContractError("backward: root must be a scalar, got shape " +
                        (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  auto tape = collect_tape(root);
  if (tape.empty()) return;
  // Interior buffers restart from zero on every pass; leaves accumulate.
  for (Node* n : tape)
    if (n->backward_fn) n->grad.assign(n->data.size(), 0.0);
  grad_buf(*tape.back())[0] += 1.0;
  if (!tape.back()->backward_fn) return;
  for (auto it = tape.rbegin(); it != tape.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> theta, double step) {
  if (!(step > 0.0)) throw ContractError("fd_gradient: step must be positive");
  std::vector<double> x(theta.begin(), theta.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = f(x);
    x[i] = orig - step;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

}  // namespace zerase
