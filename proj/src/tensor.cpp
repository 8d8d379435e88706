#include "inheritlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "inheritlab/error.hpp"

namespace ilab {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

void check_shape(const std::vector<std::size_t>& shape) {
  require(!shape.empty(), "tensor shape must have at least one extent");
  for (auto e : shape) require(e > 0, "tensor extents must be positive");
}

void same_shape_or_throw(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    fail(ErrorCode::kInvalidArgument,
         std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

Tensor binary(const Tensor& a, const Tensor& b, const char* op,
              const std::function<double(double, double)>& f) {
  same_shape_or_throw(a, b, op);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  values_.assign(product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_shape(shape_);
  if (product(shape_) != values_.size()) {
    fail(ErrorCode::kInvalidArgument, "tensor value count " + std::to_string(values_.size()) +
                                          " does not match shape " + shape_string());
  }
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  require(values_.size() == 1, "item() on a tensor of shape " + shape_string());
  return values_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ']';
  return os.str();
}

bool Tensor::identical(const Tensor& other) const noexcept {
  return shape_ == other.shape_ && values_.size() == other.values_.size() &&
         (values_.empty() ||
          std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(double)) == 0);
}

double frobenius_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.size() == b.size(), "max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace kernels {

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    fail(ErrorCode::kInvalidArgument,
         "matmul: inner dimensions differ " + a.shape_string() + " x " + b.shape_string());
  }
  Tensor out = Tensor::matrix(m, n);
  const double* bp = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = out.row(i).data();
    const double* arow = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double aik = arow[p];
      const double* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul(transpose(a), b); }

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require(b.size() == x.cols(), "add_rowvec: vector length " + std::to_string(b.size()) +
                                    " does not match " + x.shape_string());
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
  return out;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& g) {
  require(g.size() == x.cols(), "mul_rowvec: vector length " + std::to_string(g.size()) +
                                    " does not match " + x.shape_string());
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * g[j];
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* in = x.row(i).data();
    double* o = out.row(i).data();
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* in = x.row(i).data();
    double* o = out.row(i).data();
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lz;
  }
  return out;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.cols();
  require(gamma.size() == n && beta.size() == n, "layer_norm: gain/bias length mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* in = x.row(i).data();
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    double* o = out.row(i).data();
    for (std::size_t j = 0; j < n; ++j) o[j] = gamma[j] * ((in[j] - mean) * inv) + beta[j];
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  }
  return out;
}

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require(!ids.empty(), "embedding: empty id list");
  const std::size_t d = table.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
      fail(ErrorCode::kInvalidArgument, "embedding: id " + std::to_string(id) + " out of range");
    }
    std::copy_n(table.row(static_cast<std::size_t>(id)).data(), d, out.row(i).data());
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require(count > 0 && begin + count <= x.rows(), "slice_rows: range out of bounds");
  const std::size_t n = x.cols();
  Tensor out = Tensor::matrix(count, n);
  std::copy_n(x.values().data() + begin * n, count * n, out.values().data());
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "concat_rows: column mismatch");
  Tensor out = Tensor::matrix(a.rows() + b.rows(), a.cols());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.size());
  return out;
}

namespace {

struct AttnDims {
  std::size_t n, m, d, dh, heads;
};

AttnDims attention_dims(const Tensor& q_src, const Tensor& kv_src, std::size_t n_heads,
                        std::size_t offset) {
  require(q_src.cols() == kv_src.cols() && q_src.cols() % 3 == 0,
          "attention: packed qkv width mismatch");
  const std::size_t d = q_src.cols() / 3;
  require(n_heads > 0 && d % n_heads == 0, "attention: d_model not divisible by heads");
  require(offset + q_src.rows() <= kv_src.rows(), "attention: query rows exceed key rows");
  return {q_src.rows(), kv_src.rows(), d, d / n_heads, n_heads};
}

// Fills p[0..=last] with the attention distribution of query row i, head h.
void attention_probs(const Tensor& q_src, const Tensor& kv_src, const AttnDims& dm,
                     std::size_t i, std::size_t h, std::size_t last, std::vector<double>& p) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dm.dh));
  const double* q = q_src.row(i).data() + h * dm.dh;
  double mx = -INFINITY;
  for (std::size_t j = 0; j <= last; ++j) {
    const double* k = kv_src.row(j).data() + dm.d + h * dm.dh;
    double s = 0.0;
    for (std::size_t c = 0; c < dm.dh; ++c) s += q[c] * k[c];
    p[j] = s * scale;
    mx = std::max(mx, p[j]);
  }
  double z = 0.0;
  for (std::size_t j = 0; j <= last; ++j) {
    p[j] = std::exp(p[j] - mx);
    z += p[j];
  }
  for (std::size_t j = 0; j <= last; ++j) p[j] /= z;
}

}  // namespace

Tensor causal_attention(const Tensor& q_src, const Tensor& kv_src, std::size_t n_heads,
                        std::size_t offset) {
  const AttnDims dm = attention_dims(q_src, kv_src, n_heads, offset);
  Tensor out = Tensor::matrix(dm.n, dm.d);
  std::vector<double> p(dm.m);
  for (std::size_t i = 0; i < dm.n; ++i) {
    const std::size_t last = offset + i;
    for (std::size_t h = 0; h < dm.heads; ++h) {
      attention_probs(q_src, kv_src, dm, i, h, last, p);
      double* o = out.row(i).data() + h * dm.dh;
      for (std::size_t j = 0; j <= last; ++j) {
        const double* v = kv_src.row(j).data() + 2 * dm.d + h * dm.dh;
        for (std::size_t c = 0; c < dm.dh; ++c) o[c] += p[j] * v[c];
      }
    }
  }
  return out;
}

void causal_attention_backward(const Tensor& q_src, const Tensor& kv_src, std::size_t n_heads,
                               std::size_t offset, const Tensor& dout, Tensor& dq_src,
                               Tensor& dkv_src) {
  const AttnDims dm = attention_dims(q_src, kv_src, n_heads, offset);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dm.dh));
  std::vector<double> p(dm.m), dp(dm.m);
  for (std::size_t i = 0; i < dm.n; ++i) {
    const std::size_t last = offset + i;
    for (std::size_t h = 0; h < dm.heads; ++h) {
      attention_probs(q_src, kv_src, dm, i, h, last, p);
      const double* go = dout.row(i).data() + h * dm.dh;
      double dot = 0.0;
      for (std::size_t j = 0; j <= last; ++j) {
        const double* v = kv_src.row(j).data() + 2 * dm.d + h * dm.dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dm.dh; ++c) s += go[c] * v[c];
        dp[j] = s;
        dot += p[j] * s;
      }
      const double* q = q_src.row(i).data() + h * dm.dh;
      for (std::size_t j = 0; j <= last; ++j) {
        double* gv = dkv_src.row(j).data() + 2 * dm.d + h * dm.dh;
        for (std::size_t c = 0; c < dm.dh; ++c) gv[c] += p[j] * go[c];
        const double ds = p[j] * (dp[j] - dot) * scale;
        const double* k = kv_src.row(j).data() + dm.d + h * dm.dh;
        double* gq = dq_src.row(i).data() + h * dm.dh;
        double* gk = dkv_src.row(j).data() + dm.d + h * dm.dh;
        for (std::size_t c = 0; c < dm.dh; ++c) {
          gq[c] += ds * k[c];
          gk[c] += ds * q[c];
        }
      }
    }
  }
}

Tensor solve(const Tensor& m_in, const Tensor& b, bool transpose_m) {
  const std::size_t n = m_in.rows();
  require(m_in.cols() == n && b.rows() == n, "solve: dimension mismatch");
  Tensor a = transpose_m ? transpose(m_in) : m_in;
  Tensor x = b;
  const std::size_t nr = x.cols();
  double scale = 0.0;
  for (double v : a.values()) scale = std::max(scale, std::abs(v));
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a.at(r, col)) > std::abs(a.at(piv, col))) piv = r;
    const double pv = a.at(piv, col);
    if (!(std::abs(pv) > 1e-13 * std::max(scale, 1.0))) {
      fail(ErrorCode::kNumerical, "solve: matrix is singular to working precision");
    }
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a.at(piv, c), a.at(col, c));
      for (std::size_t c = 0; c < nr; ++c) std::swap(x.at(piv, c), x.at(col, c));
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a.at(r, col) / pv;
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a.at(r, c) -= f * a.at(col, c);
      for (std::size_t c = 0; c < nr; ++c) x.at(r, c) -= f * x.at(col, c);
    }
  }
  for (std::size_t col = n; col-- > 0;) {
    const double pv = a.at(col, col);
    for (std::size_t c = 0; c < nr; ++c) {
      double s = x.at(col, c);
      for (std::size_t k = col + 1; k < n; ++k) s -= a.at(col, k) * x.at(k, c);
      x.at(col, c) = s / pv;
    }
  }
  if (!x.all_finite()) fail(ErrorCode::kNumerical, "solve: non-finite solution");
  return x;
}

Tensor skew_from_params(const Tensor& skew_params) {
  const std::size_t d = skew_params.rows();
  require(skew_params.rank() == 2 && skew_params.cols() == d, "cayley: parameters must be square");
  Tensor a = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      a.at(i, j) = skew_params.at(i, j);
      a.at(j, i) = -skew_params.at(i, j);
    }
  return a;
}

Tensor cayley(const Tensor& skew_params) {
  const Tensor a = skew_from_params(skew_params);
  const std::size_t d = a.rows();
  Tensor lhs = Tensor::identity(d), rhs = Tensor::identity(d);
  for (std::size_t i = 0; i < a.size(); ++i) {
    lhs[i] -= 0.5 * a[i];
    rhs[i] += 0.5 * a[i];
  }
  return solve(lhs, rhs);
}

}  // namespace kernels
}  // namespace ilab
