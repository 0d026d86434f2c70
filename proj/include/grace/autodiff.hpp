#pragma once

// Tape-based reverse-mode automatic differentiation over grace::Tensor.
//
// A Tape records one forward pass. Every op appends a node holding its value
// and a closure that pushes the output gradient back to its inputs. Nodes are
// created in topological order, so backward() is a single reverse sweep.
// A Tape constructed with record=false evaluates the same kernels but keeps
// no closures, which is how inference paths share code with training.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grace/errors.hpp"
#include "grace/tensor.hpp"

namespace grace {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.raw(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_matrix(Tensor& t) {
  return MatMap(t.raw(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

/// Fill value for causally masked attention scores; exp() of it underflows
/// to exactly zero while keeping every stored value finite.
inline constexpr double kMaskValue = -1e30;

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) {
    t.requires_grad = false;
    return push(std::move(t), false, nullptr);
  }

  /// Leaf owned by the tape. Its gradient is readable via grad() after
  /// backward() when t.requires_grad is set.
  Var input(Tensor t) {
    const bool rg = t.requires_grad && record_;
    Var v = push(std::move(t), rg, nullptr);
    nodes_[v.id].leaf = true;
    return v;
  }

  /// Leaf aliasing a parameter; backward() adds into p.grad.
  Var param(Parameter& p) {
    Node n;
    n.external = &p.value;
    n.needs_grad = record_ && p.value.requires_grad;
    n.sink = n.needs_grad ? &p : nullptr;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  bool has_grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.needs_grad && n.grad_alloc;
  }

  const Tensor& grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (!n.needs_grad || !n.grad_alloc) {
      throw ContractError("no gradient recorded for node " +
                          std::to_string(v.id));
    }
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. The tape is consumed: closures and
  /// intermediate values are released, leaf gradients remain readable.
  void backward(Var loss) {
    if (!record_) throw ContractError("backward() on a non-recording tape");
    if (consumed_) throw ContractError("backward() called twice on one tape");
    const Tensor& lv = value(loss);
    if (lv.size() != 1 || lv.rank() > 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(lv.shape()));
    }
    consumed_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    grad_buffer(loss.id).fill(1.0);
    for (std::int64_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.grad_alloc) continue;
      if (n.backward) {
        n.backward(*this, n.grad);
        n.backward = nullptr;
      }
      if (n.sink) {
        auto dst = n.sink->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
      if (!n.leaf) {
        n.value = Tensor();
        n.grad = Tensor();
        n.grad_alloc = false;
      }
    }
  }

  // Op-author interface.

  Var push(Tensor value, bool needs_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && record_;
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  /// Gradient accumulator for node id, zero-initialized on first access.
  Tensor& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
      n.grad = Tensor(value(Var{this, id}).shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool grad_alloc = false;
    bool needs_grad = false;
    bool leaf = false;
    Parameter* sink = nullptr;
    BackwardFn backward;
  };

  // deque keeps references to earlier node values stable across push_back.
  std::deque<Node> nodes_;
  bool record_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " +
                         shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

/// [m x k] * [k x n] -> [m x n]
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: incompatible shapes " +
                         shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  Tensor out(Shape{av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  const bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  return tape.push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    const auto gm = as_matrix(g);
    if (t.needs_grad(a)) {
      as_matrix(t.grad_buffer(a.id)).noalias() +=
          gm * as_matrix(t.value(b)).transpose();
    }
    if (t.needs_grad(b)) {
      as_matrix(t.grad_buffer(b.id)).noalias() +=
          as_matrix(t.value(a)).transpose() * gm;
    }
  });
}

inline Var transpose(Var a) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  detail::require_rank2(av, "transpose");
  Tensor out(Shape{av.cols(), av.rows()});
  as_matrix(out) = as_matrix(av).transpose();
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a](Tape& t, const Tensor& g) {
                     as_matrix(t.grad_buffer(a.id)) +=
                         as_matrix(g).transpose();
                   });
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape(av, bv, "add");
  Tensor out = av;
  detail::add_into(out, bv);
  out.requires_grad = false;
  const bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  return tape.push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) detail::add_into(t.grad_buffer(a.id), g);
    if (t.needs_grad(b)) detail::add_into(t.grad_buffer(b.id), g);
  });
}

/// Adds a length-n vector to every row of an [m x n] matrix.
inline Var add_row(Var a, Var bias) {
  Tape& tape = detail::same_tape(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != av.cols()) {
    throw DimensionError("add_row: bias " + shape_str(bv.shape()) +
                         " does not match " + shape_str(av.shape()));
  }
  Tensor out = av;
  out.requires_grad = false;
  const std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double* row = out.raw() + r * n;
    for (std::size_t c = 0; c < n; ++c) row[c] += bv[c];
  }
  const bool ng = tape.needs_grad(a) || tape.needs_grad(bias);
  return tape.push(std::move(out), ng, [a, bias, n](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) detail::add_into(t.grad_buffer(a.id), g);
    if (t.needs_grad(bias)) {
      Tensor& gb = t.grad_buffer(bias.id);
      for (std::size_t r = 0; r < g.size() / n; ++r) {
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
      }
    }
  });
}

/// Elementwise product of equally shaped tensors.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  return tape.push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Tape& tape = *a.tape;
  Tensor out = a.value();
  out.requires_grad = false;
  for (double& v : out.data()) v *= c;
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, c](Tape& t, const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                   });
}

inline Var exp(Var a) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  const std::uint32_t out_id = static_cast<std::uint32_t>(tape.size());
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, out_id](Tape& t, const Tensor& g) {
                     const Tensor& y = t.value(Var{&t, out_id});
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t i = 0; i < g.size(); ++i)
                       ga[i] += g[i] * y[i];
                   });
}

inline Var log(Var a) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a](Tape& t, const Tensor& g) {
                     const Tensor& x = t.value(a);
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t i = 0; i < g.size(); ++i)
                       ga[i] += g[i] / x[i];
                   });
}

namespace detail {

inline void softmax_rows(const Tensor& x, Tensor& y) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / std::max<std::size_t>(n, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.raw() + r * n;
    double* yr = y.raw() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      s += yr[c];
    }
    const double inv = 1.0 / s;
    for (std::size_t c = 0; c < n; ++c) yr[c] *= inv;
  }
}

inline void log_softmax_rows(const Tensor& x, Tensor& y) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / std::max<std::size_t>(n, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.raw() + r * n;
    double* yr = y.raw() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(xr[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < n; ++c) yr[c] = xr[c] - lse;
  }
}

}  // namespace detail

/// Softmax over the last axis with max-subtraction.
inline Var softmax(Var a) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  detail::softmax_rows(av, out);
  const std::uint32_t out_id = static_cast<std::uint32_t>(tape.size());
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, out_id](Tape& t, const Tensor& g) {
                     const Tensor& y = t.value(Var{&t, out_id});
                     Tensor& ga = t.grad_buffer(a.id);
                     const std::size_t n = y.cols();
                     for (std::size_t r = 0; r < y.size() / n; ++r) {
                       double dot = 0.0;
                       for (std::size_t c = 0; c < n; ++c)
                         dot += g[r * n + c] * y[r * n + c];
                       for (std::size_t c = 0; c < n; ++c)
                         ga[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
                     }
                   });
}

/// log(softmax(x)) over the last axis, computed without forming tiny
/// probabilities.
inline Var log_softmax(Var a) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  detail::log_softmax_rows(av, out);
  const std::uint32_t out_id = static_cast<std::uint32_t>(tape.size());
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, out_id](Tape& t, const Tensor& g) {
                     const Tensor& y = t.value(Var{&t, out_id});
                     Tensor& ga = t.grad_buffer(a.id);
                     const std::size_t n = y.cols();
                     for (std::size_t r = 0; r < y.size() / n; ++r) {
                       double gs = 0.0;
                       for (std::size_t c = 0; c < n; ++c) gs += g[r * n + c];
                       for (std::size_t c = 0; c < n; ++c)
                         ga[r * n + c] +=
                             g[r * n + c] - std::exp(y[r * n + c]) * gs;
                     }
                   });
}

/// Sum of all elements -> scalar.
inline Var sum(Var a) {
  Tape& tape = *a.tape;
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return tape.push(Tensor::scalar(s), tape.needs_grad(a),
                   [a](Tape& t, const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     for (double& v : ga.data()) v += g[0];
                   });
}

/// Mean over axis 0 (rows -> [cols]) or axis 1 (cols -> [rows]) of a matrix;
/// a vector reduces to a scalar.
inline Var mean(Var a, int axis) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  if (av.rank() == 1) {
    if (av.size() == 0) throw ContractError("mean of empty vector");
    Var s = sum(a);
    return scale(s, 1.0 / static_cast<double>(av.size()));
  }
  detail::require_rank2(av, "mean");
  const std::size_t m = av.rows(), n = av.cols();
  if (axis != 0 && axis != 1) throw ContractError("mean: axis must be 0 or 1");
  if ((axis == 0 && m == 0) || (axis == 1 && n == 0)) {
    throw ContractError("mean over empty axis");
  }
  Tensor out(Shape{axis == 0 ? n : m});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      out[axis == 0 ? c : r] += av[r * n + c];
    }
  }
  const double inv = 1.0 / static_cast<double>(axis == 0 ? m : n);
  for (double& v : out.data()) v *= inv;
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, axis, m, n, inv](Tape& t, const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t r = 0; r < m; ++r)
                       for (std::size_t c = 0; c < n; ++c)
                         ga[r * n + c] += inv * g[axis == 0 ? c : r];
                   });
}

/// Mean over the rows whose mask entry is nonzero: [m x n] -> [n].
inline Var masked_mean(Var a, std::span<const double> row_mask) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  detail::require_rank2(av, "masked_mean");
  const std::size_t m = av.rows(), n = av.cols();
  if (row_mask.size() != m) {
    throw DimensionError("masked_mean: mask length " +
                         std::to_string(row_mask.size()) + " vs " +
                         std::to_string(m) + " rows");
  }
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < m; ++r) {
    if (row_mask[r] != 0.0) rows.push_back(r);
  }
  if (rows.empty()) throw DegenerateInputError("masked_mean: empty mask");
  Tensor out(Shape{n});
  for (std::size_t r : rows) {
    for (std::size_t c = 0; c < n; ++c) out[c] += av[r * n + c];
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (double& v : out.data()) v *= inv;
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, rows = std::move(rows), n, inv](Tape& t,
                                                       const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t r : rows)
                       for (std::size_t c = 0; c < n; ++c)
                         ga[r * n + c] += inv * g[c];
                   });
}

/// Row-wise layer normalization with gain and bias over the last axis.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& tape = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  const std::size_t n = xv.cols();
  const std::size_t m = xv.size() / n;
  if (gv.size() != n || bv.size() != n) {
    throw DimensionError("layer_norm: gain/bias length does not match " +
                         shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* xr = xv.raw() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (xr[c] - mu) * rs;
      xhat[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  const bool ng =
      tape.needs_grad(x) || tape.needs_grad(gain) || tape.needs_grad(bias);
  if (!ng || !tape.recording()) return tape.push(std::move(out), false, nullptr);
  return tape.push(
      std::move(out), true,
      [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), m,
       n](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gain);
        if (t.needs_grad(gain)) {
          Tensor& gg = t.grad_buffer(gain.id);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c)
              gg[c] += g[r * n + c] * xhat[r * n + c];
        }
        if (t.needs_grad(bias)) {
          Tensor& gb = t.grad_buffer(bias.id);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        }
        if (t.needs_grad(x)) {
          Tensor& gx = t.grad_buffer(x.id);
          std::vector<double> dxh(n);
          for (std::size_t r = 0; r < m; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              dxh[c] = g[r * n + c] * gv[c];
              mean_d += dxh[c];
              mean_dx += dxh[c] * xhat[r * n + c];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t c = 0; c < n; ++c) {
              gx[r * n + c] +=
                  rstd[r] * (dxh[c] - mean_d - xhat[r * n + c] * mean_dx);
            }
          }
        }
      });
}

/// Embedding lookup: rows of an [V x d] table selected by ids -> [n x d].
inline Var gather_rows(Var table, std::span<const int> ids) {
  Tape& tape = *table.tape;
  const Tensor& tv = table.value();
  detail::require_rank2(tv, "gather_rows");
  const std::size_t d = tv.cols();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) +
                           " outside table " + shape_str(tv.shape()));
    }
    std::copy_n(tv.raw() + static_cast<std::size_t>(ids[i]) * d, d,
                out.raw() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return tape.push(std::move(out), tape.needs_grad(table),
                   [table, idv = std::move(idv), d](Tape& t, const Tensor& g) {
                     Tensor& gt = t.grad_buffer(table.id);
                     for (std::size_t i = 0; i < idv.size(); ++i) {
                       double* dst =
                           gt.raw() + static_cast<std::size_t>(idv[i]) * d;
                       for (std::size_t c = 0; c < d; ++c)
                         dst[c] += g[i * d + c];
                     }
                   });
}

/// First `count` rows of `a` starting at `begin`.
inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  detail::require_rank2(av, "slice_rows");
  if (begin + count > av.rows()) {
    throw DimensionError("slice_rows out of range for " +
                         shape_str(av.shape()));
  }
  const std::size_t n = av.cols();
  Tensor out(Shape{count, n});
  std::copy_n(av.raw() + begin * n, count * n, out.raw());
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, begin, n](Tape& t, const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t i = 0; i < g.size(); ++i)
                       ga[begin * n + i] += g[i];
                   });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  detail::require_rank2(av, "slice_cols");
  if (begin + count > av.cols()) {
    throw DimensionError("slice_cols out of range for " +
                         shape_str(av.shape()));
  }
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out(Shape{m, count});
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(av.raw() + r * n + begin, count, out.raw() + r * count);
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, begin, count, m, n](Tape& t, const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t r = 0; r < m; ++r)
                       for (std::size_t c = 0; c < count; ++c)
                         ga[r * n + begin + c] += g[r * count + c];
                   });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  Tape& tape = *parts[0].tape;
  const std::size_t m = parts[0].value().rows();
  std::size_t total = 0;
  bool ng = false;
  for (Var p : parts) {
    detail::require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != m) throw DimensionError("concat_cols: row mismatch");
    total += p.value().cols();
    ng = ng || tape.needs_grad(p);
  }
  Tensor out(Shape{m, total});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = p.value();
    const std::size_t w = pv.cols();
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(pv.raw() + r * w, w, out.raw() + r * total + off);
    off += w;
  }
  return tape.push(std::move(out), ng,
                   [parts, m, total](Tape& t, const Tensor& g) {
                     std::size_t off = 0;
                     for (Var p : parts) {
                       const std::size_t w = t.value(p).cols();
                       if (t.needs_grad(p)) {
                         Tensor& gp = t.grad_buffer(p.id);
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < w; ++c)
                             gp[r * w + c] += g[r * total + off + c];
                       }
                       off += w;
                     }
                   });
}

/// Stacks equally sized vectors into the rows of a matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw ContractError("stack_rows of nothing");
  Tape& tape = *rows[0].tape;
  const std::size_t n = rows[0].value().size();
  bool ng = false;
  Tensor out(Shape{rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Tensor& rv = rows[i].value();
    if (rv.size() != n) throw DimensionError("stack_rows: length mismatch");
    std::copy_n(rv.raw(), n, out.raw() + i * n);
    ng = ng || tape.needs_grad(rows[i]);
  }
  return tape.push(std::move(out), ng, [rows, n](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!t.needs_grad(rows[i])) continue;
      Tensor& gr = t.grad_buffer(rows[i].id);
      for (std::size_t c = 0; c < n; ++c) gr[c] += g[i * n + c];
    }
  });
}

/// Replaces entries above the diagonal of a square score matrix with
/// kMaskValue so that position i attends only to positions <= i.
inline Var causal_mask(Var a) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  detail::require_rank2(av, "causal_mask");
  const std::size_t m = av.rows(), n = av.cols();
  if (m != n) throw DimensionError("causal_mask expects a square matrix");
  Tensor out = av;
  out.requires_grad = false;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = r + 1; c < n; ++c) out[r * n + c] = kMaskValue;
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, n](Tape& t, const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t r = 0; r < n; ++r)
                       for (std::size_t c = 0; c <= r; ++c)
                         ga[r * n + c] += g[r * n + c];
                   });
}

/// Sets chosen columns to a constant (no gradient flows to them).
inline Var fill_cols(Var a, std::span<const int> cols, double value) {
  Tape& tape = *a.tape;
  Tensor out = a.value();
  out.requires_grad = false;
  const std::size_t n = out.cols();
  const std::size_t m = out.size() / n;
  std::vector<int> cv(cols.begin(), cols.end());
  for (std::size_t r = 0; r < m; ++r)
    for (int c : cv) out[r * n + static_cast<std::size_t>(c)] = value;
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, cv, m, n](Tape& t, const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     Tensor gm = g;
                     for (std::size_t r = 0; r < m; ++r)
                       for (int c : cv) gm[r * n + static_cast<std::size_t>(c)] = 0.0;
                     detail::add_into(ga, gm);
                   });
}

/// GELU, tanh approximation.
inline Var gelu(Var a) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
  }
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a](Tape& t, const Tensor& g) {
                     const Tensor& xv = t.value(a);
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const double x = xv[i];
                       const double u = k * (x + 0.044715 * x * x * x);
                       const double th = std::tanh(u);
                       const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
                       ga[i] += g[i] * (0.5 * (1.0 + th) +
                                        0.5 * x * (1.0 - th * th) * du);
                     }
                   });
}

/// out[i] = a[i, cols[i]] for an [m x n] matrix and m column indices.
inline Var pick(Var a, std::span<const int> cols) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  detail::require_rank2(av, "pick");
  const std::size_t m = av.rows(), n = av.cols();
  if (cols.size() != m) throw DimensionError("pick: index count != rows");
  Tensor out(Shape{m});
  std::vector<int> cv(cols.begin(), cols.end());
  for (std::size_t r = 0; r < m; ++r) {
    if (cv[r] < 0 || static_cast<std::size_t>(cv[r]) >= n) {
      throw DimensionError("pick: column index out of range");
    }
    out[r] = av[r * n + static_cast<std::size_t>(cv[r])];
  }
  return tape.push(std::move(out), tape.needs_grad(a),
                   [a, cv = std::move(cv), n](Tape& t, const Tensor& g) {
                     Tensor& ga = t.grad_buffer(a.id);
                     for (std::size_t r = 0; r < cv.size(); ++r)
                       ga[r * n + static_cast<std::size_t>(cv[r])] += g[r];
                   });
}

/// Scales every row to unit Euclidean length.
inline Var normalize_rows(Var a) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const std::size_t n = av.cols();
  const std::size_t m = av.size() / n;
  Tensor out(av.shape());
  std::vector<double> norms(m);
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += av[r * n + c] * av[r * n + c];
    norms[r] = std::sqrt(s);
    if (!std::isfinite(norms[r])) {
      throw NumericAbort("normalize_rows: non-finite row " + std::to_string(r));
    }
    if (!(norms[r] > 0.0)) {
      throw DegenerateInputError("normalize_rows: zero-norm row " +
                                 std::to_string(r));
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = av[r * n + c] / norms[r];
  }
  const std::uint32_t out_id = static_cast<std::uint32_t>(tape.size());
  return tape.push(
      std::move(out), tape.needs_grad(a),
      [a, out_id, norms = std::move(norms), m, n](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(Var{&t, out_id});
        Tensor& ga = t.grad_buffer(a.id);
        for (std::size_t r = 0; r < m; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += y[r * n + c] * g[r * n + c];
          for (std::size_t c = 0; c < n; ++c)
            ga[r * n + c] += (g[r * n + c] - y[r * n + c] * dot) / norms[r];
        }
      });
}

}  // namespace grace
