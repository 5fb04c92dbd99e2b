#include "advgen/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "advgen/kernels.hpp"

namespace advgen::ad {
namespace {

void check_same(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                                b.shape_string());
  }
}

// grad(target) += g, elementwise
void accumulate(Tape& t, Var target, const Matrix& g) {
  if (!t.requires_grad(target)) return;
  linalg::add_scaled(g, 1.0, t.grad(target));
}

template <typename Forward, typename Derivative>
Var unary(Tape& t, Var a, Forward f, Derivative df) {
  const Matrix& x = t.value(a);
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = f(x.data()[i]);
  const bool rg = t.requires_grad(a);
  return t.push(std::move(y), rg, [a, df](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const Matrix& xv = tp.value(a);
    const Matrix& yv = tp.value(self);
    Matrix& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga.data()[i] += g.data()[i] * df(xv.data()[i], yv.data()[i]);
    }
  });
}

// log(1 + exp(x)) without overflow
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::param(Parameter& p) {
  Parameter* ptr = &p;
  Backprop bp;
  if (!p.frozen) {
    bp = [ptr](Tape& t, Var self) {
      if (ptr->frozen) throw std::logic_error("gradient reached frozen parameter " + ptr->name);
      if (ptr->grad.empty()) ptr->grad.resize(ptr->value.rows(), ptr->value.cols());
      linalg::add_scaled(t.grad(self), 1.0, ptr->grad);
    };
  }
  const Var v = push(Matrix(), !p.frozen, std::move(bp));
  nodes_.back().external = &p.value;
  return v;
}

Var Tape::view(const Matrix& m) {
  const Var v = push(Matrix(), false, nullptr);
  nodes_.back().external = &m;
  return v;
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_.at(v.id);
  const Matrix& val = n.external ? *n.external : n.value;
  if (n.grad.empty() && !val.empty()) n.grad.resize(val.rows(), val.cols());
  return n.grad;
}

Var Tape::push(Matrix value, bool requires_grad, Backprop backprop) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                        requires_grad ? std::move(backprop) : Backprop()});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

void Tape::backward(Var loss) {
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw std::invalid_argument("backward requires a 1x1 loss, got " + lv.shape_string());
  }
  if (!requires_grad(loss)) return;
  grad(loss)(0, 0) += 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backprop || n.grad.empty()) continue;
    n.backprop(*this, Var{i});
  }
}

double scalar(const Tape& t, Var v) {
  const Matrix& m = t.value(v);
  if (m.size() != 1) throw std::invalid_argument("scalar(): value is " + m.shape_string());
  return m.data()[0];
}

Var matmul(Tape& t, Var a, Var b) {
  Matrix c = linalg::matmul(t.value(a), t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(c), rg, [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a)) linalg::matmul_nt_acc(g, tp.value(b), tp.grad(a));
    if (tp.requires_grad(b)) linalg::matmul_tn_acc(tp.value(a), g, tp.grad(b));
  });
}

Var add(Tape& t, Var a, Var b) {
  check_same(t.value(a), t.value(b), "add");
  Matrix c = t.value(a);
  linalg::add_scaled(t.value(b), 1.0, c);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(c), rg, [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, a, g);
    accumulate(tp, b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  check_same(t.value(a), t.value(b), "sub");
  Matrix c = t.value(a);
  linalg::add_scaled(t.value(b), -1.0, c);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(c), rg, [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, a, g);
    if (tp.requires_grad(b)) linalg::add_scaled(g, -1.0, tp.grad(b));
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Matrix& x = t.value(a);
  const Matrix& y = t.value(b);
  check_same(x, y, "mul");
  Matrix c(x.rows(), x.cols());
  kernels::active().mul_acc(x.data(), y.data(), c.data(), c.size());
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(c), rg, [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const auto& k = kernels::active();
    if (tp.requires_grad(a)) k.mul_acc(g.data(), tp.value(b).data(), tp.grad(a).data(), g.size());
    if (tp.requires_grad(b)) k.mul_acc(g.data(), tp.value(a).data(), tp.grad(b).data(), g.size());
  });
}

Var scale(Tape& t, Var a, double s) {
  Matrix c = t.value(a);
  kernels::active().scale(s, c.data(), c.size());
  return t.push(std::move(c), t.requires_grad(a), [a, s](Tape& tp, Var self) {
    linalg::add_scaled(tp.grad(self), s, tp.grad(a));
  });
}

Var add_bias(Tape& t, Var a, Var bias) {
  Matrix c = t.value(a);
  linalg::add_row_broadcast(t.value(bias), c);
  const bool rg = t.requires_grad(a) || t.requires_grad(bias);
  return t.push(std::move(c), rg, [a, bias](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, a, g);
    if (tp.requires_grad(bias)) {
      Matrix& gb = tp.grad(bias);
      const auto& k = kernels::active();
      for (std::size_t r = 0; r < g.rows(); ++r) k.axpy(1.0, g.row(r).data(), gb.data(), g.cols());
    }
  });
}

Var broadcast_rows(Tape& t, Var row, std::size_t rows) {
  const Matrix& r = t.value(row);
  if (r.rows() != 1) throw std::invalid_argument("broadcast_rows: expected a row vector");
  Matrix c(rows, r.cols());
  for (std::size_t i = 0; i < rows; ++i) std::copy(r.data(), r.data() + r.cols(), c.row(i).data());
  return t.push(std::move(c), t.requires_grad(row), [row](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& gr = tp.grad(row);
    const auto& k = kernels::active();
    for (std::size_t i = 0; i < g.rows(); ++i) k.axpy(1.0, g.row(i).data(), gr.data(), g.cols());
  });
}

Var sigmoid(Tape& t, Var a) {
  return unary(
      t, a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var relu(Tape& t, Var a) {
  return unary(t, a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var exp(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var log_sigmoid(Tape& t, Var a) {
  // d/dx log sigmoid(x) = 1 - sigmoid(x) = sigmoid(-x)
  return unary(t, a, [](double x) { return -softplus(-x); },
               [](double x, double) { return std::exp(-softplus(x)); });
}

Var softmax_rows(Tape& t, Var a) {
  Matrix y = t.value(a);
  linalg::softmax_rows(y);
  return t.push(std::move(y), t.requires_grad(a), [a](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const Matrix& y = tp.value(self);
    Matrix& ga = tp.grad(a);
    const auto& k = kernels::active();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const double* gr = g.row(r).data();
      const double* yr = y.row(r).data();
      double* out = ga.row(r).data();
      const double gy = k.dot(gr, yr, g.cols());
      for (std::size_t c = 0; c < g.cols(); ++c) out[c] += yr[c] * (gr[c] - gy);
    }
  });
}

Var log_softmax_rows(Tape& t, Var a) {
  Matrix y = t.value(a);
  linalg::log_softmax_rows(y);
  return t.push(std::move(y), t.requires_grad(a), [a](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const Matrix& y = tp.value(self);
    Matrix& ga = tp.grad(a);
    const auto& k = kernels::active();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const double* gr = g.row(r).data();
      const double* yr = y.row(r).data();
      double* out = ga.row(r).data();
      const double gs = k.sum(gr, g.cols());
      for (std::size_t c = 0; c < g.cols(); ++c) out[c] += gr[c] - std::exp(yr[c]) * gs;
    }
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = t.value(parts[0]).rows();
  std::size_t cols = 0;
  bool rg = false;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += t.value(p).cols();
    rg = rg || t.requires_grad(p);
  }
  Matrix c(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& v = t.value(p);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(v.row(r).begin(), v.row(r).end(), c.row(r).data() + off);
    }
    off += v.cols();
  }
  std::vector<Var> ids(parts.begin(), parts.end());
  return t.push(std::move(c), rg, [ids](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    std::size_t offset = 0;
    const auto& k = kernels::active();
    for (Var p : ids) {
      const std::size_t w = tp.value(p).cols();
      if (tp.requires_grad(p)) {
        Matrix& gp = tp.grad(p);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          k.axpy(1.0, g.row(r).data() + offset, gp.row(r).data(), w);
        }
      }
      offset += w;
    }
  });
}

Var slice_cols(Tape& t, Var a, std::size_t start, std::size_t len) {
  const Matrix& v = t.value(a);
  if (start + len > v.cols()) throw std::invalid_argument("slice_cols: out of range");
  Matrix c(v.rows(), len);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    std::copy(v.row(r).data() + start, v.row(r).data() + start + len, c.row(r).data());
  }
  return t.push(std::move(c), t.requires_grad(a), [a, start, len](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(a);
    const auto& k = kernels::active();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      k.axpy(1.0, g.row(r).data(), ga.row(r).data() + start, len);
    }
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t cols = t.value(parts[0]).cols();
  std::size_t rows = 0;
  bool rg = false;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += t.value(p).rows();
    rg = rg || t.requires_grad(p);
  }
  Matrix c(rows, cols);
  double* out = c.data();
  for (Var p : parts) {
    const Matrix& v = t.value(p);
    out = std::copy(v.data(), v.data() + v.size(), out);
  }
  std::vector<Var> ids(parts.begin(), parts.end());
  return t.push(std::move(c), rg, [ids](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    std::size_t offset = 0;
    for (Var p : ids) {
      const std::size_t n = tp.value(p).size();
      if (tp.requires_grad(p)) {
        kernels::active().axpy(1.0, g.data() + offset, tp.grad(p).data(), n);
      }
      offset += n;
    }
  });
}

Var slice_rows(Tape& t, Var a, std::size_t start, std::size_t len) {
  const Matrix& v = t.value(a);
  if (start + len > v.rows()) throw std::invalid_argument("slice_rows: out of range");
  const std::size_t cols = v.cols();
  Matrix c(len, cols,
           std::vector<double>(v.data() + start * cols, v.data() + (start + len) * cols));
  return t.push(std::move(c), t.requires_grad(a), [a, start, cols](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    kernels::active().axpy(1.0, g.data(), tp.grad(a).data() + start * cols, g.size());
  });
}

Var gather_rows(Tape& t, Var table, std::span<const int> ids) {
  const Matrix& tab = t.value(table);
  Matrix c(ids.size(), tab.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tab.rows()) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tab.rows()) + " rows");
    }
    const auto src = tab.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), c.row(i).data());
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return t.push(std::move(c), t.requires_grad(table), [table, idx](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& gt = tp.grad(table);
    const auto& k = kernels::active();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      k.axpy(1.0, g.row(i).data(), gt.row(static_cast<std::size_t>(idx[i])).data(), g.cols());
    }
  });
}

Var max_of(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("max_of: no inputs");
  const Matrix& first = t.value(parts[0]);
  Matrix c = first;
  std::vector<int> winner(first.size(), 0);
  bool rg = t.requires_grad(parts[0]);
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Matrix& v = t.value(parts[p]);
    check_same(first, v, "max_of");
    rg = rg || t.requires_grad(parts[p]);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v.data()[i] > c.data()[i]) {
        c.data()[i] = v.data()[i];
        winner[i] = static_cast<int>(p);
      }
    }
  }
  std::vector<Var> ids(parts.begin(), parts.end());
  return t.push(std::move(c), rg, [ids, winner](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Var w = ids[static_cast<std::size_t>(winner[i])];
      if (tp.requires_grad(w)) tp.grad(w).data()[i] += g.data()[i];
    }
  });
}

Var gru_gates(Tape& t, Var gx, Var gh, Var h) {
  Matrix out;
  Matrix r;
  Matrix z;
  Matrix n;
  linalg::gru_gates(t.value(gx), t.value(gh), t.value(h), out, &r, &z, &n);
  const bool rg = t.requires_grad(gx) || t.requires_grad(gh) || t.requires_grad(h);
  return t.push(std::move(out), rg,
                [gx, gh, h, r = std::move(r), z = std::move(z), n = std::move(n)](Tape& tp,
                                                                                    Var self) {
                  const Matrix& g = tp.grad(self);
                  const Matrix& hv = tp.value(h);
                  const Matrix& ghv = tp.value(gh);
                  const std::size_t hidden = hv.cols();
                  Matrix dgx(g.rows(), 3 * hidden);
                  Matrix dgh(g.rows(), 3 * hidden);
                  Matrix dh(g.rows(), hidden);
                  for (std::size_t b = 0; b < g.rows(); ++b) {
                    for (std::size_t j = 0; j < hidden; ++j) {
                      const double gv = g(b, j);
                      const double rv = r(b, j);
                      const double zv = z(b, j);
                      const double nv = n(b, j);
                      const double dn = gv * (1.0 - zv);
                      const double dz = gv * (hv(b, j) - nv);
                      dh(b, j) = gv * zv;
                      const double dpre_n = dn * (1.0 - nv * nv);
                      const double dr = dpre_n * ghv(b, 2 * hidden + j);
                      const double dpre_z = dz * zv * (1.0 - zv);
                      const double dpre_r = dr * rv * (1.0 - rv);
                      dgx(b, j) = dpre_r;
                      dgh(b, j) = dpre_r;
                      dgx(b, hidden + j) = dpre_z;
                      dgh(b, hidden + j) = dpre_z;
                      dgx(b, 2 * hidden + j) = dpre_n;
                      dgh(b, 2 * hidden + j) = dpre_n * rv;
                    }
                  }
                  accumulate(tp, gx, dgx);
                  accumulate(tp, gh, dgh);
                  accumulate(tp, h, dh);
                });
}

Var sum(Tape& t, Var a) {
  const Matrix& v = t.value(a);
  Matrix c(1, 1, kernels::active().sum(v.data(), v.size()));
  return t.push(std::move(c), t.requires_grad(a), [a](Tape& tp, Var self) {
    const double g = tp.grad(self)(0, 0);
    Matrix& ga = tp.grad(a);
    for (double& x : ga.flat()) x += g;
  });
}

Var add_scalars(Tape& t, std::span<const Var> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size()) throw std::invalid_argument("add_scalars: size mismatch");
  double total = 0.0;
  bool rg = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    total += weights[i] * scalar(t, scalars[i]);
    rg = rg || t.requires_grad(scalars[i]);
  }
  std::vector<Var> ids(scalars.begin(), scalars.end());
  std::vector<double> w(weights.begin(), weights.end());
  return t.push(Matrix(1, 1, total), rg, [ids, w](Tape& tp, Var self) {
    const double g = tp.grad(self)(0, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.requires_grad(ids[i])) tp.grad(ids[i])(0, 0) += w[i] * g;
    }
  });
}

Var cross_entropy(Tape& t, Var logits, std::span<const int> targets,
                  std::span<const double> weights) {
  const Matrix& x = t.value(logits);
  if (targets.size() != x.rows() || weights.size() != x.rows()) {
    throw std::invalid_argument("cross_entropy: expected one target and weight per row");
  }
  Matrix logp = x;
  linalg::log_softmax_rows(logp);
  double loss = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= x.cols()) {
      throw std::out_of_range("cross_entropy: target outside logits");
    }
    loss -= weights[r] * logp(r, static_cast<std::size_t>(targets[r]));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return t.push(Matrix(1, 1, loss), t.requires_grad(logits),
                [logits, tg, w, logp = std::move(logp)](Tape& tp, Var self) {
                  const double g = tp.grad(self)(0, 0);
                  Matrix& gl = tp.grad(logits);
                  for (std::size_t r = 0; r < gl.rows(); ++r) {
                    if (tg[r] < 0 || w[r] == 0.0) continue;
                    const double s = g * w[r];
                    double* out = gl.row(r).data();
                    const double* lp = logp.row(r).data();
                    for (std::size_t c = 0; c < gl.cols(); ++c) out[c] += s * std::exp(lp[c]);
                    out[tg[r]] -= s;
                  }
                });
}

}  // namespace advgen::ad
