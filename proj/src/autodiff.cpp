#include "viral_lab/autodiff.hpp"

#include "viral_lab/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace viral {

const Tensor& Var::value() const { return tape_->value(*this); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("constant leaf contains NaN/Inf");
  return push(Node{std::move(value), {}, false, {}});
}

Var Tape::parameter(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("parameter leaf contains NaN/Inf");
  return push(Node{std::move(value), {}, true, {}});
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

Tensor Tape::take_grad(Var v) {
  Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape());
  return std::move(n.grad);
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id());
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NonFiniteError("operation produced NaN/Inf");
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw Error("operand recorded on a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  return push(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw Error("loss recorded on a different tape");
  if (value(loss).size() != 1)
    throw ShapeError("backward needs a scalar loss, got " + shape_string(value(loss).shape()));
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buffer(loss)[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= s;
  }
  return out;
}

namespace ad {

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw Error("operation on an empty Var");
  return *a.tape();
}

void require_2d(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + " needs a matrix, got " + shape_string(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

constexpr double kNormGuard = 1e-12;

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_2d(av, "matmul");
  require_2d(bv, "matmul");
  if (av.cols() != bv.rows())
    throw ShapeError("matmul inner dimensions differ: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor out({av.rows(), bv.cols()});
  out.mat().noalias() = av.mat() * bv.mat();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) tp.grad_buffer(a).mat().noalias() += g.mat() * tp.value(b).mat().transpose();
    if (tp.requires_grad(b)) tp.grad_buffer(b).mat().noalias() += tp.value(a).mat().transpose() * g.mat();
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  require_2d(a.value(), "transpose");
  Tensor out({a.cols(), a.rows()});
  out.mat() = a.value().mat().transpose();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Tensor& g) {
    tp.grad_buffer(a).mat() += g.mat().transpose();
  });
}

namespace {

template <typename Fwd, typename GradA, typename GradB>
Var binary(Var a, Var b, const char* what, Fwd fwd, GradA ga, GradB gb) {
  Tape& t = tape_of(a);
  require_same(a.value(), b.value(), what);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  return t.record(std::move(out), {a, b}, [a, b, ga, gb](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& da = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += ga(g[i], av[i], bv[i]);
    }
    if (tp.requires_grad(b)) {
      Tensor& db = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += gb(g[i], av[i], bv[i]);
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return t.record(std::move(out), {a}, [a, s](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += s * g[i];
  });
}

Var add_bias(Var a, Var bias) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_2d(av, "add_bias");
  if (bias.value().size() != av.cols())
    throw ShapeError("bias length " + std::to_string(bias.value().size()) + " does not match " +
                     std::to_string(av.cols()) + " columns");
  Tensor out = av;
  out.mat().rowwise() += bias.value().mat().row(0);
  return t.record(std::move(out), {a, bias}, [a, bias](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) tp.grad_buffer(a).mat() += g.mat();
    if (tp.requires_grad(bias)) {
      Tensor& db = tp.grad_buffer(bias);
      db.mat().row(0) += g.mat().colwise().sum();
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_2d(xv, "linear");
  require_2d(wv, "linear");
  if (xv.cols() != wv.rows())
    throw ShapeError("linear inner dimensions differ: " + shape_string(xv.shape()) + " x " + shape_string(wv.shape()));
  if (b.value().size() != wv.cols()) throw ShapeError("linear bias length does not match the output width");
  Tensor out({xv.rows(), wv.cols()});
  auto o = out.mat();
  o.rowwise() = b.value().mat().row(0);
  o.noalias() += xv.mat() * wv.mat();
  return t.record(std::move(out), {x, w, b}, [x, w, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(x)) tp.grad_buffer(x).mat().noalias() += g.mat() * tp.value(w).mat().transpose();
    if (tp.requires_grad(w)) tp.grad_buffer(w).mat().noalias() += tp.value(x).mat().transpose() * g.mat();
    if (tp.requires_grad(b)) tp.grad_buffer(b).mat().row(0) += g.mat().colwise().sum();
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Tensor::scalar(s), {a}, [a](Tape& tp, const Tensor& g) {
    for (double& v : tp.grad_buffer(a).data()) v += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  require_2d(x.value(), "softmax_rows");
  Tensor out = viral::softmax_rows(x.value());
  Tensor saved = out;
  return t.record(std::move(out), {x}, [x, saved = std::move(saved)](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buffer(x);
    const std::size_t r = saved.rows(), c = saved.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g(i, j) * saved(i, j);
      for (std::size_t j = 0; j < c; ++j) dx(i, j) += saved(i, j) * (g(i, j) - dot);
    }
  });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_2d(xv, "layernorm");
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c) throw ShapeError("layernorm affine size mismatch");
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(r);
  Tensor out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t i = 0; i < r; ++i) {
    auto in = xv.row(i);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (in[j] - mu) * inv_std[i];
      out(i, j) = xhat(i, j) * gv[j] + bv[j];
    }
  }
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Tensor& g) {
                    const std::size_t r = xhat.rows(), c = xhat.cols();
                    if (tp.requires_grad(gamma)) {
                      Tensor& dg = tp.grad_buffer(gamma);
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) dg[j] += g(i, j) * xhat(i, j);
                    }
                    if (tp.requires_grad(beta)) {
                      Tensor& db = tp.grad_buffer(beta);
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) db[j] += g(i, j);
                    }
                    if (tp.requires_grad(x)) {
                      Tensor& dx = tp.grad_buffer(x);
                      const Tensor& gv = tp.value(gamma);
                      const double inv_c = 1.0 / static_cast<double>(c);
                      for (std::size_t i = 0; i < r; ++i) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < c; ++j) {
                          const double d = g(i, j) * gv[j];
                          m1 += d;
                          m2 += d * xhat(i, j);
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for (std::size_t j = 0; j < c; ++j)
                          dx(i, j) += inv_std[i] * (g(i, j) * gv[j] - m1 - xhat(i, j) * m2);
                      }
                    }
                  });
}

namespace {

/// Elementwise op whose derivative is evaluated once in the forward pass.
template <typename FwdDeriv>
Var unary(Var x, FwdDeriv fd) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  Tensor deriv(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) fd(xv[i], out[i], deriv[i]);
  if (!t.requires_grad(x)) return t.record(std::move(out), {x}, {});
  return t.record(std::move(out), {x}, [x, deriv = std::move(deriv)](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * deriv[i];
  });
}

}  // namespace

Var gelu(Var x) {
  // tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2 / pi)
  constexpr double kC = 0.79788456080286535588;
  constexpr double kA = 0.044715;
  constexpr Eigen::Index kChunk = 512;
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const bool grad = t.requires_grad(x);
  const auto n = static_cast<Eigen::Index>(xv.size());
  Tensor out(xv.shape());
  Tensor deriv = grad ? Tensor(xv.shape()) : Tensor();
  Eigen::Array<double, kChunk, 1> th;
  // Chunked so the temporaries stay in cache.
  for (Eigen::Index at = 0; at < n; at += kChunk) {
    const Eigen::Index m = std::min(kChunk, n - at);
    const Eigen::Map<const Eigen::ArrayXd> v(xv.data().data() + at, m);
    auto tm = th.head(m);
    tm = 1.0 - 2.0 / ((2.0 * kC) * (v + kA * v.cube())).exp().operator+(1.0);
    Eigen::Map<Eigen::ArrayXd>(out.data().data() + at, m) = 0.5 * v * (1.0 + tm);
    if (grad)
      Eigen::Map<Eigen::ArrayXd>(deriv.data().data() + at, m) =
          0.5 * (1.0 + tm) + (0.5 * kC) * v * (1.0 - tm.square()) * (1.0 + 3.0 * kA * v.square());
  }
  if (!grad) return t.record(std::move(out), {x}, {});
  return t.record(std::move(out), {x}, [x, deriv = std::move(deriv)](Tape& tp, const Tensor& g) {
    tp.grad_buffer(x).mat().array() += g.mat().array() * deriv.mat().array();
  });
}

Var silu(Var x) {
  return unary(x, [](double v, double& y, double& d) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    y = v * s;
    d = s * (1.0 + v * (1.0 - s));
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_2d(av, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows with no rows");
  const std::size_t c = av.cols();
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows()) throw ShapeError("gather_rows index out of range");
    std::copy_n(av.row(rows[i]).begin(), c, out.row(i).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buffer(a);
    const std::size_t c = g.cols();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = da.row(idx[i]);
      auto src = g.row(i);
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var embedding(Var table, std::span<const std::size_t> ids) { return gather_rows(table, ids); }

Var add_rows_at(Var base, Var addend, std::span<const std::size_t> rows) {
  Tape& t = tape_of(base);
  const Tensor& bv = base.value();
  const Tensor& av = addend.value();
  require_2d(bv, "add_rows_at");
  require_2d(av, "add_rows_at");
  if (av.rows() != rows.size() || av.cols() != bv.cols()) throw ShapeError("add_rows_at shape mismatch");
  Tensor out = bv;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= bv.rows()) throw ShapeError("add_rows_at index out of range");
    auto dst = out.row(rows[i]);
    auto src = av.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {base, addend}, [base, addend, idx = std::move(idx)](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(base)) tp.grad_buffer(base).mat() += g.mat();
    if (tp.requires_grad(addend)) {
      Tensor& da = tp.grad_buffer(addend);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto dst = da.row(i);
        auto src = g.row(idx[i]);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows with no parts");
  Tape& t = tape_of(parts[0]);
  const std::size_t c = parts[0].value().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_2d(p.value(), "concat_rows");
    if (p.value().cols() != c) throw ShapeError("concat_rows column mismatch");
    total += p.value().rows();
  }
  Tensor out({total, c});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset * c));
    offset += p.value().rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs](Tape& tp, const Tensor& g) {
    std::size_t offset = 0;
    const std::size_t c = g.cols();
    for (const Var& p : inputs) {
      const std::size_t r = tp.value(p).rows();
      if (tp.requires_grad(p)) {
        Tensor& dp = tp.grad_buffer(p);
        for (std::size_t i = 0; i < r * c; ++i) dp[i] += g[offset * c + i];
      }
      offset += r;
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(a);
  require_2d(a.value(), "slice_rows");
  Tensor out = a.value().rows_slice(begin, count);
  return t.record(std::move(out), {a}, [a, begin](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buffer(a);
    const std::size_t off = begin * g.cols();
    for (std::size_t i = 0; i < g.size(); ++i) da[off + i] += g[i];
  });
}

Var normalize_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_2d(xv, "normalize_rows");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out(xv.shape());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double n = 0.0;
    for (double v : xv.row(i)) n += v * v;
    n = std::sqrt(n);
    if (n < kNormGuard) throw DegenerateInputError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    norms[i] = n;
    for (std::size_t j = 0; j < c; ++j) out(i, j) = xv(i, j) / n;
  }
  Tensor unit = out;
  return t.record(std::move(out), {x}, [x, unit = std::move(unit), norms = std::move(norms)](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buffer(x);
    const std::size_t r = unit.rows(), c = unit.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += unit(i, j) * g(i, j);
      for (std::size_t j = 0; j < c; ++j) dx(i, j) += (g(i, j) - unit(i, j) * dot) / norms[i];
    }
  });
}

Var cosine_sim_rows(Var x, Var y) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  require_2d(xv, "cosine_sim_rows");
  require_same(xv, yv, "cosine_sim_rows");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out({r});
  std::vector<double> nx(r), ny(r);
  for (std::size_t i = 0; i < r; ++i) {
    double xx = 0.0, yy = 0.0, xy = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      xx += xv(i, j) * xv(i, j);
      yy += yv(i, j) * yv(i, j);
      xy += xv(i, j) * yv(i, j);
    }
    nx[i] = std::sqrt(xx);
    ny[i] = std::sqrt(yy);
    if (nx[i] < kNormGuard || ny[i] < kNormGuard)
      throw DegenerateInputError("cosine similarity: row " + std::to_string(i) + " has zero norm");
    out[i] = std::clamp(xy / (nx[i] * ny[i]), -1.0, 1.0);
  }
  Tensor cosv = out;
  return t.record(std::move(out), {x, y},
                  [x, y, nx = std::move(nx), ny = std::move(ny), cosv = std::move(cosv)](Tape& tp, const Tensor& g) {
                    const Tensor& xv = tp.value(x);
                    const Tensor& yv = tp.value(y);
                    const std::size_t r = xv.rows(), c = xv.cols();
                    const bool gx = tp.requires_grad(x), gy = tp.requires_grad(y);
                    for (std::size_t i = 0; i < r; ++i) {
                      const double inv = 1.0 / (nx[i] * ny[i]);
                      if (gx) {
                        Tensor& dx = tp.grad_buffer(x);
                        const double kx = cosv[i] / (nx[i] * nx[i]);
                        for (std::size_t j = 0; j < c; ++j) dx(i, j) += g[i] * (yv(i, j) * inv - kx * xv(i, j));
                      }
                      if (gy) {
                        Tensor& dy = tp.grad_buffer(y);
                        const double ky = cosv[i] / (ny[i] * ny[i]);
                        for (std::size_t j = 0; j < c; ++j) dy(i, j) += g[i] * (xv(i, j) * inv - ky * yv(i, j));
                      }
                    }
                  });
}

Var causal_attention(Var q, Var k, Var v, std::span<const Segment> segments, std::size_t heads,
                     std::vector<Tensor>* capture) {
  Tape& t = tape_of(q);
  const Tensor& qv = q.value();
  require_2d(qv, "causal_attention");
  require_same(qv, k.value(), "causal_attention");
  require_same(qv, v.value(), "causal_attention");
  const std::size_t width = qv.cols();
  if (heads == 0 || width % heads != 0) throw ShapeError("hidden width not divisible by head count");
  const std::size_t dh = width / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Q = qv.mat();
  const auto K = k.value().mat();
  const auto V = v.value().mat();

  Tensor out(qv.shape());
  auto O = out.mat();
  std::vector<RowMatrix> probs;
  probs.reserve(segments.size() * heads);
  const auto hd = static_cast<Eigen::Index>(dh);
  for (const Segment& s : segments) {
    if (s.length == 0 || s.start + s.length > qv.rows()) throw ShapeError("attention segment out of range");
    const auto st = static_cast<Eigen::Index>(s.start);
    const auto n = static_cast<Eigen::Index>(s.length);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h * dh);
      RowMatrix S = (Q.block(st, col, n, hd) * K.block(st, col, n, hd).transpose()) * scl;
      for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, S(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) z += (S(i, j) = std::exp(S(i, j) - mx));
        for (Eigen::Index j = 0; j <= i; ++j) S(i, j) /= z;
        for (Eigen::Index j = i + 1; j < n; ++j) S(i, j) = 0.0;
      }
      O.block(st, col, n, hd).noalias() = S * V.block(st, col, n, hd);
      if (capture) capture->push_back(Tensor::from_matrix(S));
      probs.push_back(std::move(S));
    }
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  return t.record(std::move(out), {q, k, v},
                  [q, k, v, segs = std::move(segs), probs = std::move(probs), heads, dh, scl](Tape& tp,
                                                                                          const Tensor& g) {
                    const auto Q = tp.value(q).mat();
                    const auto K = tp.value(k).mat();
                    const auto V = tp.value(v).mat();
                    const auto G = g.mat();
                    const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k), gv = tp.requires_grad(v);
                    const auto hd = static_cast<Eigen::Index>(dh);
                    std::size_t p = 0;
                    for (const Segment& s : segs) {
                      const auto st = static_cast<Eigen::Index>(s.start);
                      const auto n = static_cast<Eigen::Index>(s.length);
                      for (std::size_t h = 0; h < heads; ++h, ++p) {
                        const auto col = static_cast<Eigen::Index>(h * dh);
                        const RowMatrix& P = probs[p];
                        const auto Gh = G.block(st, col, n, hd);
                        if (gv) tp.grad_buffer(v).mat().block(st, col, n, hd).noalias() += P.transpose() * Gh;
                        if (!gq && !gk) continue;
                        RowMatrix dP = Gh * V.block(st, col, n, hd).transpose();
                        RowMatrix dS(n, n);
                        for (Eigen::Index i = 0; i < n; ++i) {
                          double dot = 0.0;
                          for (Eigen::Index j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
                          for (Eigen::Index j = 0; j < n; ++j) dS(i, j) = j <= i ? P(i, j) * (dP(i, j) - dot) * scl : 0.0;
                        }
                        if (gq) tp.grad_buffer(q).mat().block(st, col, n, hd).noalias() += dS * K.block(st, col, n, hd);
                        if (gk)
                          tp.grad_buffer(k).mat().block(st, col, n, hd).noalias() +=
                              dS.transpose() * Q.block(st, col, n, hd);
                      }
                    }
                  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> mask) {
  Tape& t = tape_of(logits);
  const Tensor& lv = logits.value();
  require_2d(lv, "cross_entropy");
  const std::size_t r = lv.rows(), c = lv.cols();
  if (targets.size() != r || mask.size() != r) throw ShapeError("cross_entropy: targets/mask length mismatch");
  double count = 0.0;
  for (double m : mask) count += m;
  if (count <= 0.0) throw DegenerateInputError("cross_entropy: mask selects no positions");
  Tensor probs = viral::softmax_rows(lv);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (mask[i] == 0.0) continue;
    if (targets[i] >= c) throw ShapeError("cross_entropy: target id out of range");
    auto row = lv.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    loss += mask[i] * (mx + std::log(z) - row[targets[i]]);
  }
  loss /= count;
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  std::vector<double> mk(mask.begin(), mask.end());
  return t.record(Tensor::scalar(loss), {logits},
                  [logits, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), count](Tape& tp,
                                                                                                  const Tensor& g) {
                    Tensor& dl = tp.grad_buffer(logits);
                    const std::size_t c = probs.cols();
                    for (std::size_t i = 0; i < tg.size(); ++i) {
                      if (mk[i] == 0.0) continue;
                      const double w = g[0] * mk[i] / count;
                      for (std::size_t j = 0; j < c; ++j) dl(i, j) += w * probs(i, j);
                      dl(i, tg[i]) -= w;
                    }
                  });
}

}  // namespace ad
}  // namespace viral
