#include "inheritlab/tape.hpp"

#include <algorithm>
#include <cmath>

#include "inheritlab/error.hpp"

namespace ilab {

namespace k = kernels;

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kMatmulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddRowvec: return "add_rowvec";
    case OpKind::kMulRowvec: return "mul_rowvec";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kCayley: return "cayley";
    case OpKind::kAttention: return "attention";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kSetRow: return "set_row";
    case OpKind::kWindowGate: return "window_gate";
    case OpKind::kSum: return "sum";
  }
  return "?";
}

bool GradResult::any_unreached() const {
  return std::find(reached.begin(), reached.end(), false) != reached.end();
}

WindowBounds squash_bounds(double raw_lo, double raw_hi) {
  const double lo = k::sigmoid(raw_lo);
  return {lo, lo + (1.0 - lo) * k::sigmoid(raw_hi)};
}

double window_gate_value(const WindowBounds& b, std::size_t idx, std::size_t d, double tau) {
  // Coordinates sit at cell centres so that index 0 can fall inside a window.
  const double x = (static_cast<double>(idx) + 0.5) / static_cast<double>(d);
  return k::sigmoid((b.hi - x) / tau) * k::sigmoid((x - b.lo) / tau);
}

void accumulate(std::vector<Tensor>& grads, Var v, const Tensor& g) {
  Tensor& slot = grads[v.id];
  if (slot.empty()) {
    slot = g;
    return;
  }
  require(slot.size() == g.size(), "gradient shape mismatch during accumulation");
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

const Tape::Node& Tape::node(Var v) const {
  require(v.valid() && v.id < nodes_.size(), "tape: variable does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::leaf(Tensor value) {
  const bool rg = value.requires_grad();
  return leaf(std::move(value), rg);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::borrow(const Tensor& value, bool requires_grad) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.borrowed ? *n.borrowed : n.owned;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
OpKind Tape::op(Var v) const { return node(v).op; }
std::span<const Var> Tape::inputs(Var v) const { return node(v).inputs; }

Var Tape::push(OpKind op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  bool rg = false;
  for (Var in : inputs) rg = rg || node(in).requires_grad;
  Node n;
  n.op = op;
  n.owned = forward(*this);
  if (!n.owned.all_finite()) {
    fail(ErrorCode::kNumerical, std::string("non-finite output from ") + std::string(op_name(op)));
  }
  n.inputs = std::move(inputs);
  n.requires_grad = rg;
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::matmul(Var a, Var b) {
  return push(
      OpKind::kMatmul, {a, b}, [a, b](const Tape& t) { return k::matmul(t.value(a), t.value(b)); },
      [a, b](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(a)) accumulate(gr, a, k::matmul_nt(g, t.value(b)));
        if (t.requires_grad(b)) accumulate(gr, b, k::matmul_tn(t.value(a), g));
      });
}

Var Tape::matmul_nt(Var a, Var b) {
  return push(
      OpKind::kMatmulNT, {a, b},
      [a, b](const Tape& t) { return k::matmul_nt(t.value(a), t.value(b)); },
      [a, b](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        // out = a b^T: da = g b, db = g^T a
        if (t.requires_grad(a)) accumulate(gr, a, k::matmul(g, t.value(b)));
        if (t.requires_grad(b)) accumulate(gr, b, k::matmul_tn(g, t.value(a)));
      });
}

Var Tape::add(Var a, Var b) {
  return push(
      OpKind::kAdd, {a, b}, [a, b](const Tape& t) { return k::add(t.value(a), t.value(b)); },
      [a, b](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(a)) accumulate(gr, a, g);
        if (t.requires_grad(b)) accumulate(gr, b, g);
      });
}

Var Tape::sub(Var a, Var b) {
  return push(
      OpKind::kSub, {a, b}, [a, b](const Tape& t) { return k::sub(t.value(a), t.value(b)); },
      [a, b](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(a)) accumulate(gr, a, g);
        if (t.requires_grad(b)) accumulate(gr, b, k::scale(g, -1.0));
      });
}

Var Tape::mul(Var a, Var b) {
  return push(
      OpKind::kMul, {a, b}, [a, b](const Tape& t) { return k::mul(t.value(a), t.value(b)); },
      [a, b](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(a)) accumulate(gr, a, k::mul(g, t.value(b)));
        if (t.requires_grad(b)) accumulate(gr, b, k::mul(g, t.value(a)));
      });
}

Var Tape::scale(Var a, double s) {
  return push(
      OpKind::kScale, {a}, [a, s](const Tape& t) { return k::scale(t.value(a), s); },
      [a, s](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(a)) accumulate(gr, a, k::scale(g, s));
      });
}

Var Tape::add_rowvec(Var x, Var b) {
  return push(
      OpKind::kAddRowvec, {x, b},
      [x, b](const Tape& t) { return k::add_rowvec(t.value(x), t.value(b)); },
      [x, b](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(x)) accumulate(gr, x, g);
        if (t.requires_grad(b)) {
          Tensor gb(t.value(b).shape());
          const std::size_t n = g.cols();
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
          accumulate(gr, b, gb);
        }
      });
}

Var Tape::mul_rowvec(Var x, Var gvec) {
  return push(
      OpKind::kMulRowvec, {x, gvec},
      [x, gvec](const Tape& t) { return k::mul_rowvec(t.value(x), t.value(gvec)); },
      [x, gvec](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(x)) accumulate(gr, x, k::mul_rowvec(g, t.value(gvec)));
        if (t.requires_grad(gvec)) {
          const Tensor& xv = t.value(x);
          Tensor gg(t.value(gvec).shape());
          const std::size_t n = g.cols();
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xv[i * n + j];
          accumulate(gr, gvec, gg);
        }
      });
}

Var Tape::softmax(Var x) {
  return push(
      OpKind::kSoftmax, {x}, [x](const Tape& t) { return k::softmax_rows(t.value(x)); },
      [x](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (!t.requires_grad(x)) return;
        const Tensor p = k::softmax_rows(t.value(x));
        Tensor gx(p.shape());
        const std::size_t n = p.cols();
        for (std::size_t i = 0; i < p.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] = p[i * n + j] * (g[i * n + j] - dot);
        }
        accumulate(gr, x, gx);
      });
}

Var Tape::log_softmax(Var x) {
  return push(
      OpKind::kLogSoftmax, {x}, [x](const Tape& t) { return k::log_softmax_rows(t.value(x)); },
      [x](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (!t.requires_grad(x)) return;
        const Tensor p = k::softmax_rows(t.value(x));
        Tensor gx(p.shape());
        const std::size_t n = p.cols();
        for (std::size_t i = 0; i < p.rows(); ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j];
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] = g[i * n + j] - p[i * n + j] * s;
        }
        accumulate(gr, x, gx);
      });
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  return push(
      OpKind::kLayerNorm, {x, gamma, beta},
      [x, gamma, beta, eps](const Tape& t) {
        return k::layer_norm_rows(t.value(x), t.value(gamma), t.value(beta), eps);
      },
      [x, gamma, beta, eps](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        const Tensor& xv = t.value(x);
        const Tensor& gv = t.value(gamma);
        const std::size_t n = xv.cols();
        const double nd = static_cast<double>(n);
        Tensor gx(xv.shape()), gg(gv.shape()), gb(t.value(beta).shape());
        std::vector<double> xhat(n), dxhat(n);
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          const double* in = xv.row(i).data();
          double mean = 0.0;
          for (std::size_t j = 0; j < n; ++j) mean += in[j];
          mean /= nd;
          double var = 0.0;
          for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
          var /= nd;
          const double inv = 1.0 / std::sqrt(var + eps);
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (in[j] - mean) * inv;
            const double go = g[i * n + j];
            gg[j] += go * xhat[j];
            gb[j] += go;
            dxhat[j] = go * gv[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xhat[j];
          }
          for (std::size_t j = 0; j < n; ++j)
            gx[i * n + j] = inv / nd * (nd * dxhat[j] - s1 - xhat[j] * s2);
        }
        if (t.requires_grad(x)) accumulate(gr, x, gx);
        if (t.requires_grad(gamma)) accumulate(gr, gamma, gg);
        if (t.requires_grad(beta)) accumulate(gr, beta, gb);
      });
}

Var Tape::gelu(Var x) {
  return push(
      OpKind::kGelu, {x}, [x](const Tape& t) { return k::gelu(t.value(x)); },
      [x](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (!t.requires_grad(x)) return;
        const Tensor& xv = t.value(x);
        Tensor gx(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = g[i] * k::gelu_grad(xv[i]);
        accumulate(gr, x, gx);
      });
}

Var Tape::embedding(Var table, std::vector<int> ids) {
  return push(
      OpKind::kEmbedding, {table},
      [table, ids](const Tape& t) { return k::embedding(t.value(table), ids); },
      [table, ids](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (!t.requires_grad(table)) return;
        Tensor gt(t.value(table).shape());
        const std::size_t d = g.cols();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double* dst = gt.row(static_cast<std::size_t>(ids[i])).data();
          for (std::size_t c = 0; c < d; ++c) dst[c] += g[i * d + c];
        }
        accumulate(gr, table, gt);
      });
}

Var Tape::cross_entropy(Var logits, std::vector<int> targets) {
  const Tensor& lv = value(logits);
  require(targets.size() == lv.rows(), "cross_entropy: one target per row required");
  std::size_t count = 0;
  for (int tgt : targets) {
    require(tgt < static_cast<int>(lv.cols()), "cross_entropy: target id out of range");
    if (tgt >= 0) ++count;
  }
  require(count > 0, "cross_entropy: no scored targets");
  const double inv_count = 1.0 / static_cast<double>(count);
  return push(
      OpKind::kCrossEntropy, {logits},
      [logits, targets, inv_count](const Tape& t) {
        const Tensor lp = k::log_softmax_rows(t.value(logits));
        double s = 0.0;
        for (std::size_t i = 0; i < targets.size(); ++i)
          if (targets[i] >= 0) s -= lp.at(i, static_cast<std::size_t>(targets[i]));
        return Tensor::scalar(s * inv_count);
      },
      [logits, targets, inv_count](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (!t.requires_grad(logits)) return;
        Tensor p = k::softmax_rows(t.value(logits));
        const double go = g.item() * inv_count;
        const std::size_t n = p.cols();
        for (std::size_t i = 0; i < targets.size(); ++i) {
          if (targets[i] < 0) {
            std::fill_n(p.row(i).data(), n, 0.0);
            continue;
          }
          p.at(i, static_cast<std::size_t>(targets[i])) -= 1.0;
          for (std::size_t j = 0; j < n; ++j) p.at(i, j) *= go;
        }
        accumulate(gr, logits, p);
      });
}

Var Tape::cayley(Var skew_params) {
  return push(
      OpKind::kCayley, {skew_params},
      [skew_params](const Tape& t) { return k::cayley(t.value(skew_params)); },
      [skew_params](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (!t.requires_grad(skew_params)) return;
        const Tensor& u = t.value(skew_params);
        const Tensor a = k::skew_from_params(u);
        const Tensor r = k::cayley(u);
        const std::size_t d = a.rows();
        Tensor m = Tensor::identity(d);
        for (std::size_t i = 0; i < a.size(); ++i) m[i] -= 0.5 * a[i];
        // dL/dA = 1/2 M^{-T} G (I + R^T)
        Tensor ipr = k::transpose(r);
        for (std::size_t i = 0; i < d; ++i) ipr.at(i, i) += 1.0;
        const Tensor da = k::scale(k::matmul(k::solve(m, g, true), ipr), 0.5);
        Tensor gu(u.shape());
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = i + 1; j < d; ++j) gu.at(i, j) = da.at(i, j) - da.at(j, i);
        accumulate(gr, skew_params, gu);
      });
}

Var Tape::attention(Var q_src, Var kv_src, std::size_t n_heads, std::size_t offset) {
  return push(
      OpKind::kAttention, {q_src, kv_src},
      [q_src, kv_src, n_heads, offset](const Tape& t) {
        return k::causal_attention(t.value(q_src), t.value(kv_src), n_heads, offset);
      },
      [q_src, kv_src, n_heads, offset](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        const bool gq = t.requires_grad(q_src), gkv = t.requires_grad(kv_src);
        if (!gq && !gkv) return;
        Tensor dq = Tensor::zeros_like(t.value(q_src));
        Tensor dkv = Tensor::zeros_like(t.value(kv_src));
        k::causal_attention_backward(t.value(q_src), t.value(kv_src), n_heads, offset, g, dq, dkv);
        if (gq) accumulate(gr, q_src, dq);
        if (gkv) accumulate(gr, kv_src, dkv);
      });
}

Var Tape::slice_rows(Var x, std::size_t begin, std::size_t count) {
  return push(
      OpKind::kSliceRows, {x},
      [x, begin, count](const Tape& t) { return k::slice_rows(t.value(x), begin, count); },
      [x, begin](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (!t.requires_grad(x)) return;
        Tensor gx = Tensor::zeros_like(t.value(x));
        std::copy(g.values().begin(), g.values().end(), gx.values().begin() + begin * gx.cols());
        accumulate(gr, x, gx);
      });
}

Var Tape::concat_rows(Var a, Var b) {
  return push(
      OpKind::kConcatRows, {a, b},
      [a, b](const Tape& t) { return k::concat_rows(t.value(a), t.value(b)); },
      [a, b](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        const Tensor& av = t.value(a);
        if (t.requires_grad(a)) accumulate(gr, a, k::slice_rows(g, 0, av.rows()));
        if (t.requires_grad(b))
          accumulate(gr, b, k::slice_rows(g, av.rows(), t.value(b).rows()));
      });
}

Var Tape::set_row(Var x, std::size_t row, Var v) {
  const Tensor& xv = value(x);
  require(row < xv.rows(), "set_row: row out of range");
  require(value(v).size() == xv.cols(), "set_row: vector length does not match row width");
  return push(
      OpKind::kSetRow, {x, v},
      [x, row, v](const Tape& t) {
        Tensor out = t.value(x);
        const Tensor& vv = t.value(v);
        std::copy(vv.values().begin(), vv.values().end(), out.row(row).begin());
        return out;
      },
      [x, row, v](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(x)) {
          Tensor gx = g;
          std::fill(gx.row(row).begin(), gx.row(row).end(), 0.0);
          accumulate(gr, x, gx);
        }
        if (t.requires_grad(v)) {
          Tensor gv(t.value(v).shape());
          std::copy(g.row(row).begin(), g.row(row).end(), gv.values().begin());
          accumulate(gr, v, gv);
        }
      });
}

Var Tape::window_gate(Var raw_bounds, std::size_t d, double tau) {
  require(value(raw_bounds).size() == 2, "window_gate: expects two raw boundary values");
  require(tau > 0.0 && d > 0, "window_gate: temperature and width must be positive");
  return push(
      OpKind::kWindowGate, {raw_bounds},
      [raw_bounds, d, tau](const Tape& t) {
        const Tensor& r = t.value(raw_bounds);
        const WindowBounds b = squash_bounds(r[0], r[1]);
        Tensor g({d});
        for (std::size_t i = 0; i < d; ++i) g[i] = window_gate_value(b, i, d, tau);
        return g;
      },
      [raw_bounds, d, tau](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (!t.requires_grad(raw_bounds)) return;
        const Tensor& r = t.value(raw_bounds);
        const double s_lo = k::sigmoid(r[0]), s_hi = k::sigmoid(r[1]);
        const double lo = s_lo, hi = lo + (1.0 - lo) * s_hi;
        const double dlo_du = s_lo * (1.0 - s_lo);
        const double dhi_du = dlo_du * (1.0 - s_hi);
        const double dhi_dv = (1.0 - lo) * s_hi * (1.0 - s_hi);
        double g_lo = 0.0, g_hi = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(d);
          const double a = k::sigmoid((hi - x) / tau), b = k::sigmoid((x - lo) / tau);
          g_hi += g[i] * a * (1.0 - a) / tau * b;
          g_lo -= g[i] * a * b * (1.0 - b) / tau;
        }
        Tensor gr_raw({2});
        gr_raw[0] = g_lo * dlo_du + g_hi * dhi_du;
        gr_raw[1] = g_hi * dhi_dv;
        accumulate(gr, raw_bounds, gr_raw);
      });
}

Var Tape::sum(Var x) {
  return push(
      OpKind::kSum, {x},
      [x](const Tape& t) {
        double s = 0.0;
        for (double v : t.value(x).values()) s += v;
        return Tensor::scalar(s);
      },
      [x](const Tape& t, const Tensor& g, std::vector<Tensor>& gr) {
        if (t.requires_grad(x)) accumulate(gr, x, Tensor(t.value(x).shape(), g.item()));
      });
}

GradResult Tape::grad(Var loss, std::span<const Var> params) const {
  const Tensor& lv = value(loss);
  require(lv.size() == 1, "grad: loss must be a scalar, got shape " + lv.shape_string());
  std::vector<Tensor> grads(nodes_.size());
  if (node(loss).requires_grad) grads[loss.id] = Tensor(lv.shape(), 1.0);
  for (std::uint32_t i = loss.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.backward || grads[i].empty() || !n.requires_grad) continue;
    n.backward(*this, grads[i], grads);
  }
  GradResult out;
  for (Var p : params) {
    const Tensor& pv = value(p);
    if (p.id <= loss.id && !grads[p.id].empty()) {
      out.grads.push_back(grads[p.id]);
      out.reached.push_back(true);
    } else {
      out.grads.push_back(Tensor::zeros_like(pv));
      out.reached.push_back(false);
    }
  }
  return out;
}

std::vector<Tensor> Tape::replay() const {
  // Replays into a scratch tape that borrows the recorded leaves, so every
  // forward closure sees freshly recomputed inputs.
  Tape scratch;
  scratch.nodes_.reserve(nodes_.size());
  std::vector<Tensor> out;
  out.reserve(nodes_.size());
  for (const Node& n : nodes_) {
    Node copy;
    copy.op = n.op;
    copy.inputs = n.inputs;
    copy.requires_grad = n.requires_grad;
    if (!n.forward) {
      copy.borrowed = n.borrowed ? n.borrowed : &n.owned;
    } else {
      copy.owned = n.forward(scratch);
    }
    scratch.nodes_.push_back(std::move(copy));
    out.push_back(scratch.value(Var{static_cast<std::uint32_t>(scratch.nodes_.size() - 1)}));
  }
  return out;
}

}  // namespace ilab
