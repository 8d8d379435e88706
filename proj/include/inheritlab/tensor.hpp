#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ilab {

// Dense row-major tensor of doubles. Rank 1 tensors behave as a single row
// where a matrix is expected. Scalars have shape {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor identity(std::size_t n);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  std::size_t rows() const noexcept { return shape_.size() < 2 ? 1 : shape_[0]; }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double item() const;

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool on) noexcept {
    requires_grad_ = on;
    return *this;
  }

  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  std::string shape_string() const;

  // Bitwise equality of shape and values.
  bool identical(const Tensor& other) const noexcept;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
};

double frobenius_norm(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Forward and backward kernels shared by the tape and by graph-free callers.
// All reductions accumulate sequentially in index order.
namespace kernels {

Tensor transpose(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);     // a[m,k] * b[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a[m,k] * b[n,k]^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a[k,m]^T * b[k,n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& x, const Tensor& b);  // x[m,n] + b[n] per row
Tensor mul_rowvec(const Tensor& x, const Tensor& g);  // x[m,n] * g[n] per row
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor gelu(const Tensor& x);
double gelu_grad(double x);
double sigmoid(double x);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(const Tensor& a, const Tensor& b);

// Multi-head causal attention. q_src rows hold packed [q|k|v] for the query
// positions offset..offset+n-1; kv_src rows hold packed [q|k|v] for absolute
// positions 0..m-1. Query i attends to keys j <= offset + i.
Tensor causal_attention(const Tensor& q_src, const Tensor& kv_src, std::size_t n_heads,
                        std::size_t offset);
// Accumulates the attention gradients into dq_src / dkv_src (same shapes as the
// inputs). The two may alias when q_src and kv_src are the same tensor.
void causal_attention_backward(const Tensor& q_src, const Tensor& kv_src, std::size_t n_heads,
                               std::size_t offset, const Tensor& dout, Tensor& dq_src,
                               Tensor& dkv_src);

// Solves (I - A/2) X = (I + A/2) where A = U - U^T from the strictly upper
// triangle of `skew_params`. Throws kNumerical on a (near) singular system.
Tensor cayley(const Tensor& skew_params);
Tensor skew_from_params(const Tensor& skew_params);
// Solves M X = B with partial pivoting; `transpose_m` solves M^T X = B.
Tensor solve(const Tensor& m, const Tensor& b, bool transpose_m = false);

}  // namespace kernels
}  // namespace ilab
