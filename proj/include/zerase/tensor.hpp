// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Layout: every tensor is stored row-major. Shape {} is a scalar, {n} a
// vector, {rows, cols} a matrix; element (r, c) lives at data[r * cols + c].
// All reductions run in increasing linear-index order so results are
// bit-reproducible for a given sequence of operations.
//
// The tape is implicit: each node carries a monotonically increasing sequence
// number assigned at creation, and parents are always created before their
// children. Sorting the reachable subgraph by that number yields a valid
// topological order (see `collect_tape`).
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zerase {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grad buffers.
  std::function<void(Node&)> backward_fn;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  // Only leaves may be written in place; interior nodes are immutable values.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return !node_->backward_fn; }

  // Empty span until backward() has reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// --- primitives -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// a[m×n] + bias[n] broadcast over rows.
Tensor add_rowvec(const Tensor& a, const Tensor& bias);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor squared_norm(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
// x / sqrt(mean(x²) + eps) per row, no learned gain.
Tensor rms_norm_rows(const Tensor& a, double eps = 1e-6);
Tensor detach(const Tensor& a);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
// out[i] = a[index[i]]; repeated indices accumulate in backward.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
// out = base; out[index[i]] += delta[i]. Rows of base not named are copied
// untouched (bitwise).
Tensor scatter_add_rows(const Tensor& base, const Tensor& delta,
                        std::span<const std::size_t> index);

// Row-blocked products for batched attention. `block` rows form one sample.
// q, k: [B·block × d] -> [B·block × block], out_b = q_b · k_bᵀ.
Tensor block_matmul_nt(const Tensor& q, const Tensor& k, std::size_t block);
// a: [B·block × block], v: [B·block × d] -> [B·block × d], out_b = a_b · v_b.
Tensor block_matmul(const Tensor& a, const Tensor& v, std::size_t block);

// Attention column intervention. keep has one entry per (sample, column):
// keep[b·block + j] == 0 zeroes column j in every row of sample b. With
// renormalize the surviving entries of each row are rescaled to sum to one.
Tensor mask_columns(const Tensor& a, std::span<const std::uint8_t> keep, std::size_t block,
                    bool renormalize);

// --- tape ------------------------------------------------------------------

// Every node reachable from root that requires grad, in topological order
// (parents before children).
std::vector<Node*> collect_tape(const Tensor& root);

// Populates grad on every requires_grad ancestor of a scalar root. Leaf
// gradients accumulate across calls until zero_grad().
void backward(const Tensor& root);

// Central differences (f(θ+s·e_i) − f(θ−s·e_i)) / (2s) for every coordinate.
std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> theta, double step);

}  // namespace zerase
