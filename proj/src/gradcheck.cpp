#include "inheritlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "inheritlab/error.hpp"

namespace ilab {

namespace {

double eval_loss(const std::vector<Tensor>& inputs, const LossBuilder& build) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.borrow(t, false));
  return tape.value(build(tape, vars)).item();
}

Tensor random_tensor(std::mt19937_64& rng, std::vector<std::size_t> shape, double sd) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : t.values()) v = n(rng);
  return t;
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Contracts a tensor-valued result with fixed random weights so every output
// entry contributes to the scalar loss.
Var project(Tape& tape, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor& v = tape.value(out);
  Var w = tape.leaf(random_tensor(rng, v.shape(), 1.0), false);
  return tape.sum(tape.mul(out, w));
}

struct Case {
  std::vector<Tensor> inputs;
  LossBuilder build;
};

using CaseMaker = std::function<Case(std::mt19937_64&, std::uint64_t)>;

std::vector<std::pair<std::string, CaseMaker>> primitive_cases() {
  std::vector<std::pair<std::string, CaseMaker>> cs;
  auto unary = [](auto op) {
    return [op](std::mt19937_64& rng, std::uint64_t ps) {
      const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
      return Case{{random_tensor(rng, {r, c}, 1.0)},
                  [op, ps](Tape& t, std::span<const Var> in) { return project(t, op(t, in[0]), ps); }};
    };
  };
  auto binary_same = [](auto op) {
    return [op](std::mt19937_64& rng, std::uint64_t ps) {
      const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
      return Case{{random_tensor(rng, {r, c}, 1.0), random_tensor(rng, {r, c}, 1.0)},
                  [op, ps](Tape& t, std::span<const Var> in) {
                    return project(t, op(t, in[0], in[1]), ps);
                  }};
    };
  };
  cs.emplace_back("matmul", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
    return Case{{random_tensor(rng, {m, k}, 1.0), random_tensor(rng, {k, n}, 1.0)},
                [ps](Tape& t, std::span<const Var> in) { return project(t, t.matmul(in[0], in[1]), ps); }};
  });
  cs.emplace_back("matmul_nt", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
    return Case{{random_tensor(rng, {m, k}, 1.0), random_tensor(rng, {n, k}, 1.0)},
                [ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.matmul_nt(in[0], in[1]), ps);
                }};
  });
  cs.emplace_back("add", binary_same([](Tape& t, Var a, Var b) { return t.add(a, b); }));
  cs.emplace_back("sub", binary_same([](Tape& t, Var a, Var b) { return t.sub(a, b); }));
  cs.emplace_back("mul", binary_same([](Tape& t, Var a, Var b) { return t.mul(a, b); }));
  cs.emplace_back("scale", unary([](Tape& t, Var a) { return t.scale(a, -1.75); }));
  cs.emplace_back("add_rowvec", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
    return Case{{random_tensor(rng, {r, c}, 1.0), random_tensor(rng, {c}, 1.0)},
                [ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.add_rowvec(in[0], in[1]), ps);
                }};
  });
  cs.emplace_back("mul_rowvec", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
    return Case{{random_tensor(rng, {r, c}, 1.0), random_tensor(rng, {c}, 1.0)},
                [ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.mul_rowvec(in[0], in[1]), ps);
                }};
  });
  cs.emplace_back("softmax", unary([](Tape& t, Var a) { return t.softmax(a); }));
  cs.emplace_back("log_softmax", unary([](Tape& t, Var a) { return t.log_softmax(a); }));
  cs.emplace_back("layer_norm", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t r = pick(rng, 1, 4), c = pick(rng, 2, 6);
    return Case{{random_tensor(rng, {r, c}, 1.0), random_tensor(rng, {c}, 1.0),
                 random_tensor(rng, {c}, 1.0)},
                [ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.layer_norm(in[0], in[1], in[2]), ps);
                }};
  });
  cs.emplace_back("gelu", unary([](Tape& t, Var a) { return t.gelu(a); }));
  cs.emplace_back("embedding", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t v = pick(rng, 2, 6), d = pick(rng, 1, 4), n = pick(rng, 1, 6);
    std::vector<int> ids(n);
    for (int& id : ids) id = static_cast<int>(pick(rng, 0, v - 1));
    return Case{{random_tensor(rng, {v, d}, 1.0)},
                [ids, ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.embedding(in[0], ids), ps);
                }};
  });
  cs.emplace_back("cross_entropy", [](std::mt19937_64& rng, std::uint64_t) {
    const std::size_t r = pick(rng, 1, 4), v = pick(rng, 2, 6);
    std::vector<int> tg(r);
    for (int& x : tg) x = static_cast<int>(pick(rng, 0, v - 1));
    if (r > 1) tg[pick(rng, 0, r - 1)] = -1;
    if (std::all_of(tg.begin(), tg.end(), [](int x) { return x < 0; })) tg[0] = 0;
    return Case{{random_tensor(rng, {r, v}, 1.5)},
                [tg](Tape& t, std::span<const Var> in) { return t.cross_entropy(in[0], tg); }};
  });
  cs.emplace_back("cayley", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t d = pick(rng, 2, 6);
    return Case{{random_tensor(rng, {d, d}, 0.6)},
                [ps](Tape& t, std::span<const Var> in) { return project(t, t.cayley(in[0]), ps); }};
  });
  cs.emplace_back("attention", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t heads = pick(rng, 1, 2), dh = pick(rng, 1, 3), m = pick(rng, 1, 5);
    const std::size_t n = pick(rng, 1, m), offset = m - n;
    const std::size_t w = 3 * heads * dh;
    const bool shared = offset == 0 && pick(rng, 0, 1) == 1;
    if (shared) {
      return Case{{random_tensor(rng, {m, w}, 1.0)},
                  [heads, ps](Tape& t, std::span<const Var> in) {
                    return project(t, t.attention(in[0], in[0], heads, 0), ps);
                  }};
    }
    return Case{{random_tensor(rng, {n, w}, 1.0), random_tensor(rng, {m, w}, 1.0)},
                [heads, offset, ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.attention(in[0], in[1], heads, offset), ps);
                }};
  });
  cs.emplace_back("slice_rows", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t r = pick(rng, 1, 5), c = pick(rng, 1, 4);
    const std::size_t b = pick(rng, 0, r - 1), n = pick(rng, 1, r - b);
    return Case{{random_tensor(rng, {r, c}, 1.0)},
                [b, n, ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.slice_rows(in[0], b, n), ps);
                }};
  });
  cs.emplace_back("concat_rows", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t r1 = pick(rng, 1, 3), r2 = pick(rng, 1, 3), c = pick(rng, 1, 4);
    return Case{{random_tensor(rng, {r1, c}, 1.0), random_tensor(rng, {r2, c}, 1.0)},
                [ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.concat_rows(in[0], in[1]), ps);
                }};
  });
  cs.emplace_back("set_row", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 4), row = pick(rng, 0, r - 1);
    return Case{{random_tensor(rng, {r, c}, 1.0), random_tensor(rng, {c}, 1.0)},
                [row, ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.set_row(in[0], row, in[1]), ps);
                }};
  });
  cs.emplace_back("window_gate", [](std::mt19937_64& rng, std::uint64_t ps) {
    const std::size_t d = pick(rng, 2, 10);
    const double tau = std::uniform_real_distribution<double>(0.2, 1.0)(rng);
    return Case{{random_tensor(rng, {2}, 1.0)},
                [d, tau, ps](Tape& t, std::span<const Var> in) {
                  return project(t, t.window_gate(in[0], d, tau), ps);
                }};
  });
  cs.emplace_back("sum", unary([](Tape& t, Var a) { return t.scale(t.sum(a), 1.0); }));
  return cs;
}

}  // namespace

GradCheckResult gradcheck(const std::vector<Tensor>& inputs, const LossBuilder& build, double h,
                          double floor) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
  const Var loss = build(tape, vars);
  const GradResult analytic = tape.grad(loss, vars);

  GradCheckResult res;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t j = 0; j < probe[i].size(); ++j) {
      const double orig = probe[i][j];
      probe[i][j] = orig + h;
      const double fp = eval_loss(probe, build);
      probe[i][j] = orig - h;
      const double fm = eval_loss(probe, build);
      probe[i][j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic.grads[i][j];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, abs_err / denom);
      ++res.entries;
    }
  }
  return res;
}

std::vector<PrimitiveCheck> check_all_primitives(std::uint64_t seed, std::size_t cases) {
  std::vector<PrimitiveCheck> out;
  std::mt19937_64 rng(seed);
  for (const auto& [name, make] : primitive_cases()) {
    PrimitiveCheck pc{name, cases, 0.0};
    for (std::size_t c = 0; c < cases; ++c) {
      Case cs = make(rng, rng());
      pc.max_rel_error = std::max(pc.max_rel_error, gradcheck(cs.inputs, cs.build).max_rel_error);
    }
    out.push_back(pc);
  }
  return out;
}

}  // namespace ilab
