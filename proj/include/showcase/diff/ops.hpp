#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "showcase/diff/graph.hpp"
#include "showcase/linalg.hpp"

namespace showcase::diff {

// Additive mask value for disallowed attention positions.
inline constexpr double kMaskedLogit = -1e9;

namespace detail {

inline Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw NumericalError("operation on an unbound Var");
  return *a.graph;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw NumericalError(std::string("shape mismatch in ") + op + ": " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

// Accumulates into the input's gradient if it takes part in differentiation.
template <typename F>
void accumulate(Graph& g, Var in, F&& f) {
  if (g.requires_grad(in)) f(g.grad_mut(in));
}

// Elementwise unary op with derivative expressed from (x, y).
template <typename Fwd, typename Deriv>
Var unary(Var a, std::string_view name, Fwd fwd, Deriv deriv) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return g.push(name, std::move(y), {a}, [a, deriv](Graph& gr, std::size_t self) {
    const Tensor& x = gr.value(a);
    const Tensor& y = gr.value(Var{&gr, self});
    const Tensor& dy = gr.grad_of(self);
    accumulate(gr, a, [&](Tensor& dx) {
      for (std::size_t i = 0; i < x.size(); ++i) dx[i] += dy[i] * deriv(x[i], y[i]);
    });
  });
}

}  // namespace detail

/// C = A B.
inline Var matmul(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (A.cols() != B.rows())
    throw NumericalError("shape mismatch in matmul: " + std::to_string(A.rows()) + "x" + std::to_string(A.cols()) +
                         " by " + std::to_string(B.rows()) + "x" + std::to_string(B.cols()));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    auto crow = C.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A(i, p);
      if (aip == 0.0) continue;
      auto brow = B.row(p);
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return g.push("matmul", std::move(C), {a, b}, [a, b](Graph& gr, std::size_t self) {
    const Tensor& A = gr.value(a);
    const Tensor& B = gr.value(b);
    const Tensor& dC = gr.grad_of(self);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += dC(i, j) * B(p, j);
          dA(i, p) += s;
        }
    });
    detail::accumulate(gr, b, [&](Tensor& dB) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A(i, p);
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) dB(p, j) += aip * dC(i, j);
        }
    });
  });
}

namespace detail {

// a + sign*b, where b is the same shape as a, a 1 x cols row broadcast over rows,
// or a 1 x 1 scalar broadcast everywhere.
inline Var add_signed(Var a, Var b, double sign, std::string_view name) {
  Graph& g = graph_of(a);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  enum class Mode { kSame, kRow, kScalar } mode;
  if (A.same_shape(B)) {
    mode = Mode::kSame;
  } else if (B.rows() == 1 && B.cols() == A.cols()) {
    mode = Mode::kRow;
  } else if (B.size() == 1) {
    mode = Mode::kScalar;
  } else {
    require_same_shape(A, B, "add");
    mode = Mode::kSame;
  }
  Tensor C(A.rows(), A.cols());
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) {
      const double bv = mode == Mode::kSame ? B(r, c) : mode == Mode::kRow ? B(0, c) : B[0];
      C(r, c) = A(r, c) + sign * bv;
    }
  return g.push(name, std::move(C), {a, b}, [a, b, sign, mode](Graph& gr, std::size_t self) {
    const Tensor& dC = gr.grad_of(self);
    accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i];
    });
    accumulate(gr, b, [&](Tensor& dB) {
      for (std::size_t r = 0; r < dC.rows(); ++r)
        for (std::size_t c = 0; c < dC.cols(); ++c) {
          const double v = sign * dC(r, c);
          if (mode == Mode::kSame) dB(r, c) += v;
          else if (mode == Mode::kRow) dB(0, c) += v;
          else dB[0] += v;
        }
    });
  });
}

}  // namespace detail

inline Var add(Var a, Var b) { return detail::add_signed(a, b, 1.0, "add"); }
inline Var sub(Var a, Var b) { return detail::add_signed(a, b, -1.0, "sub"); }

/// Elementwise product of equal shapes.
inline Var mul(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require_same_shape(A, B, "mul");
  Tensor C(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] * B[i];
  return g.push("mul", std::move(C), {a, b}, [a, b](Graph& gr, std::size_t self) {
    const Tensor& A = gr.value(a);
    const Tensor& B = gr.value(b);
    const Tensor& dC = gr.grad_of(self);
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i] * B[i];
    });
    detail::accumulate(gr, b, [&](Tensor& dB) {
      for (std::size_t i = 0; i < dC.size(); ++i) dB[i] += dC[i] * A[i];
    });
  });
}

inline Var scale(Var a, double factor) {
  return detail::unary(
      a, "scale", [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

inline Var relu(Var a) {
  Graph& g = detail::graph_of(a);
  for (double x : g.value(a).values()) g.note_kink_distance(std::abs(x));
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Tanh approximation of x * Phi(x).
inline Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  return detail::unary(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + 0.044715 * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
      });
}

/// log(1 + exp(x)), evaluated stably.
inline Var softplus(Var a) {
  return detail::unary(
      a, "softplus",
      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

inline Var transpose(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  Tensor T(A.cols(), A.rows());
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) T(c, r) = A(r, c);
  return g.push("transpose", std::move(T), {a}, [a](Graph& gr, std::size_t self) {
    const Tensor& dT = gr.grad_of(self);
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t r = 0; r < dA.rows(); ++r)
        for (std::size_t c = 0; c < dA.cols(); ++c) dA(r, c) += dT(c, r);
    });
  });
}

/// Sum of all entries, as a 1 x 1 tensor.
inline Var sum(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  double s = 0.0;
  for (double v : A.values()) s += v;
  return g.push("sum", Tensor::scalar(s), {a}, [a](Graph& gr, std::size_t self) {
    const double d = gr.grad_of(self)[0];
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += d;
    });
  });
}

inline Var mean(Var a) {
  Graph& g = detail::graph_of(a);
  const std::size_t n = g.value(a).size();
  if (n == 0) throw NumericalError("mean over an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// Mean over rows (axis 0, giving 1 x cols) or over columns (axis 1, giving rows x 1).
inline Var mean_pool(Var a, int axis) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  const std::size_t n = axis == 0 ? A.rows() : A.cols();
  if (n == 0) throw NumericalError("empty pooling axis");
  Tensor P = axis == 0 ? Tensor(1, A.cols()) : Tensor(A.rows(), 1);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) {
      if (axis == 0) P(0, c) += A(r, c);
      else P(r, 0) += A(r, c);
    }
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : P.values()) v *= inv;
  return g.push("mean_pool", std::move(P), {a}, [a, axis, inv](Graph& gr, std::size_t self) {
    const Tensor& dP = gr.grad_of(self);
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t r = 0; r < dA.rows(); ++r)
        for (std::size_t c = 0; c < dA.cols(); ++c) dA(r, c) += inv * (axis == 0 ? dP(0, c) : dP(r, 0));
    });
  });
}

namespace detail {

// Views a tensor as a set of "lines" along the reduction axis.
struct AxisView {
  std::size_t lines, length, line_stride, elem_stride;
  static AxisView of(const Tensor& t, int axis) {
    if (axis == 1) return {t.rows(), t.cols(), t.cols(), 1};
    return {t.cols(), t.rows(), 1, t.cols()};
  }
  std::size_t at(std::size_t line, std::size_t k) const { return line * line_stride + k * elem_stride; }
};

}  // namespace detail

/// Softmax along `axis` (1: each row sums to one; 0: each column).
inline Var softmax(Var a, int axis = 1) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  const auto v = detail::AxisView::of(A, axis);
  if (v.length == 0) throw NumericalError("softmax over an empty axis");
  Tensor Y(A.rows(), A.cols());
  for (std::size_t l = 0; l < v.lines; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < v.length; ++k) mx = std::max(mx, A[v.at(l, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < v.length; ++k) {
      const double e = std::exp(A[v.at(l, k)] - mx);
      Y[v.at(l, k)] = e;
      z += e;
    }
    for (std::size_t k = 0; k < v.length; ++k) Y[v.at(l, k)] /= z;
  }
  return g.push("softmax", std::move(Y), {a}, [a, axis](Graph& gr, std::size_t self) {
    const Tensor& Y = gr.value(Var{&gr, self});
    const Tensor& dY = gr.grad_of(self);
    const auto v = detail::AxisView::of(Y, axis);
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t l = 0; l < v.lines; ++l) {
        double dot = 0.0;
        for (std::size_t k = 0; k < v.length; ++k) dot += dY[v.at(l, k)] * Y[v.at(l, k)];
        for (std::size_t k = 0; k < v.length; ++k) {
          const std::size_t i = v.at(l, k);
          dA[i] += Y[i] * (dY[i] - dot);
        }
      }
    });
  });
}

/// Numerically stable log-softmax along `axis`.
inline Var log_softmax(Var a, int axis = 1) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  const auto v = detail::AxisView::of(A, axis);
  if (v.length == 0) throw NumericalError("log_softmax over an empty axis");
  Tensor Y(A.rows(), A.cols());
  for (std::size_t l = 0; l < v.lines; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < v.length; ++k) mx = std::max(mx, A[v.at(l, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < v.length; ++k) z += std::exp(A[v.at(l, k)] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < v.length; ++k) Y[v.at(l, k)] = A[v.at(l, k)] - lse;
  }
  return g.push("log_softmax", std::move(Y), {a}, [a, axis](Graph& gr, std::size_t self) {
    const Tensor& Y = gr.value(Var{&gr, self});
    const Tensor& dY = gr.grad_of(self);
    const auto v = detail::AxisView::of(Y, axis);
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t l = 0; l < v.lines; ++l) {
        double total = 0.0;
        for (std::size_t k = 0; k < v.length; ++k) total += dY[v.at(l, k)];
        for (std::size_t k = 0; k < v.length; ++k) {
          const std::size_t i = v.at(l, k);
          dA[i] += dY[i] - std::exp(Y[i]) * total;
        }
      }
    });
  });
}

/// Row-wise layer normalization with learned gain and bias (both 1 x cols).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Graph& g = detail::graph_of(x);
  const Tensor& X = g.value(x);
  const Tensor& G = g.value(gain);
  const Tensor& B = g.value(bias);
  const std::size_t n = X.cols();
  if (n == 0) throw NumericalError("layer_norm over an empty axis");
  if (G.rows() != 1 || G.cols() != n || !G.same_shape(B)) throw NumericalError("shape mismatch in layer_norm");
  Tensor Y(X.rows(), n);
  Tensor xhat(X.rows(), n);
  std::vector<double> inv_std(X.rows());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += X(r, c);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (X(r, c) - mu) * (X(r, c) - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (X(r, c) - mu) * inv_std[r];
      Y(r, c) = xhat(r, c) * G(0, c) + B(0, c);
    }
  }
  return g.push("layer_norm", std::move(Y), {x, gain, bias},
                [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, std::size_t self) {
                  const Tensor& G = gr.value(gain);
                  const Tensor& dY = gr.grad_of(self);
                  const std::size_t n = dY.cols();
                  detail::accumulate(gr, gain, [&](Tensor& dG) {
                    for (std::size_t r = 0; r < dY.rows(); ++r)
                      for (std::size_t c = 0; c < n; ++c) dG(0, c) += dY(r, c) * xhat(r, c);
                  });
                  detail::accumulate(gr, bias, [&](Tensor& dB) {
                    for (std::size_t r = 0; r < dY.rows(); ++r)
                      for (std::size_t c = 0; c < n; ++c) dB(0, c) += dY(r, c);
                  });
                  detail::accumulate(gr, x, [&](Tensor& dX) {
                    for (std::size_t r = 0; r < dY.rows(); ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t c = 0; c < n; ++c) {
                        const double dxh = dY(r, c) * G(0, c);
                        m1 += dxh;
                        m2 += dxh * xhat(r, c);
                      }
                      m1 /= static_cast<double>(n);
                      m2 /= static_cast<double>(n);
                      for (std::size_t c = 0; c < n; ++c) {
                        const double dxh = dY(r, c) * G(0, c);
                        dX(r, c) += inv_std[r] * (dxh - m1 - xhat(r, c) * m2);
                      }
                    }
                  });
                });
}

/// Concatenation along rows (axis 0) or columns (axis 1).
inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw NumericalError("concat of zero tensors");
  Graph& g = detail::graph_of(parts.front());
  std::size_t rows = 0, cols = 0;
  for (const Var& p : parts) {
    const Tensor& t = g.value(p);
    if (axis == 0) {
      if (cols == 0 && rows == 0) cols = t.cols();
      if (t.cols() != cols) throw NumericalError("shape mismatch in concat");
      rows += t.rows();
    } else {
      if (cols == 0 && rows == 0) rows = t.rows();
      if (t.rows() != rows) throw NumericalError("shape mismatch in concat");
      cols += t.cols();
    }
  }
  Tensor C(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& t = g.value(p);
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < t.cols(); ++c) {
        if (axis == 0) C(offset + r, c) = t(r, c);
        else C(r, offset + c) = t(r, c);
      }
    offset += axis == 0 ? t.rows() : t.cols();
  }
  return g.push("concat", std::move(C), parts, [parts, axis](Graph& gr, std::size_t self) {
    const Tensor& dC = gr.grad_of(self);
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const Tensor& t = gr.value(p);
      detail::accumulate(gr, p, [&](Tensor& dP) {
        for (std::size_t r = 0; r < t.rows(); ++r)
          for (std::size_t c = 0; c < t.cols(); ++c) dP(r, c) += axis == 0 ? dC(offset + r, c) : dC(r, offset + c);
      });
      offset += axis == 0 ? t.rows() : t.cols();
    }
  });
}

/// Rows [begin, end) and columns [col_begin, col_end).
inline Var slice(Var a, std::size_t row_begin, std::size_t row_end, std::size_t col_begin, std::size_t col_end) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  if (row_begin > row_end || row_end > A.rows() || col_begin > col_end || col_end > A.cols())
    throw NumericalError("slice out of range");
  Tensor S(row_end - row_begin, col_end - col_begin);
  for (std::size_t r = 0; r < S.rows(); ++r)
    for (std::size_t c = 0; c < S.cols(); ++c) S(r, c) = A(row_begin + r, col_begin + c);
  return g.push("slice", std::move(S), {a}, [a, row_begin, col_begin](Graph& gr, std::size_t self) {
    const Tensor& dS = gr.grad_of(self);
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t r = 0; r < dS.rows(); ++r)
        for (std::size_t c = 0; c < dS.cols(); ++c) dA(row_begin + r, col_begin + c) += dS(r, c);
    });
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  return slice(a, begin, end, 0, detail::graph_of(a).value(a).cols());
}
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  return slice(a, 0, detail::graph_of(a).value(a).rows(), begin, end);
}

/// Row gather; with a parameter table this is an embedding lookup.
inline Var gather_rows(Var table, const std::vector<std::size_t>& indices) {
  Graph& g = detail::graph_of(table);
  const Tensor& T = g.value(table);
  Tensor G(indices.size(), T.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= T.rows()) throw NumericalError("gather index out of range");
    for (std::size_t c = 0; c < T.cols(); ++c) G(r, c) = T(indices[r], c);
  }
  return g.push("gather_rows", std::move(G), {table}, [table, indices](Graph& gr, std::size_t self) {
    const Tensor& dG = gr.grad_of(self);
    detail::accumulate(gr, table, [&](Tensor& dT) {
      for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t c = 0; c < dG.cols(); ++c) dT(indices[r], c) += dG(r, c);
    });
  });
}

inline Var embedding_lookup(Var table, const std::vector<std::size_t>& ids) { return gather_rows(table, ids); }

/// out[r] = a(r, cols[r]); result is rows x 1.
inline Var pick(Var a, const std::vector<std::size_t>& cols) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  if (cols.size() != A.rows()) throw NumericalError("pick: index count must equal row count");
  Tensor P(A.rows(), 1);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    if (cols[r] >= A.cols()) throw NumericalError("pick index out of range");
    P(r, 0) = A(r, cols[r]);
  }
  return g.push("pick", std::move(P), {a}, [a, cols](Graph& gr, std::size_t self) {
    const Tensor& dP = gr.grad_of(self);
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t r = 0; r < cols.size(); ++r) dA(r, cols[r]) += dP(r, 0);
    });
  });
}

/// Each row divided by its Euclidean norm. With eps > 0 the norm is
/// clamped to at least eps, so zero rows map to zero instead of failing.
inline Var l2_normalize_rows(Var a, double eps = 0.0) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  Tensor Y(A.rows(), A.cols());
  std::vector<double> norms(A.rows());
  std::vector<bool> clamped(A.rows(), false);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    double s = 0.0;
    for (double v : A.row(r)) s += v * v;
    if (s == 0.0 && eps <= 0.0) throw NumericalError("zero-norm row in l2_normalize_rows");
    norms[r] = std::sqrt(s);
    if (norms[r] < eps) {
      norms[r] = eps;
      clamped[r] = true;
    }
    for (std::size_t c = 0; c < A.cols(); ++c) Y(r, c) = A(r, c) / norms[r];
  }
  return g.push("l2_normalize_rows", std::move(Y), {a},
                [a, norms = std::move(norms), clamped = std::move(clamped)](Graph& gr, std::size_t self) {
                  const Tensor& Y = gr.value(Var{&gr, self});
                  const Tensor& dY = gr.grad_of(self);
                  detail::accumulate(gr, a, [&](Tensor& dA) {
                    for (std::size_t r = 0; r < Y.rows(); ++r) {
                      double dot = 0.0;
                      if (!clamped[r])
                        for (std::size_t c = 0; c < Y.cols(); ++c) dot += dY(r, c) * Y(r, c);
                      for (std::size_t c = 0; c < Y.cols(); ++c) dA(r, c) += (dY(r, c) - Y(r, c) * dot) / norms[r];
                    }
                  });
                });
}

/// log|det A| of a square matrix via pivoted LU; gradient is A^{-T}.
inline Var logdet(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  if (A.rows() != A.cols() || A.rows() == 0) throw NumericalError("logdet requires a non-empty square matrix");
  const std::size_t n = A.rows();
  std::vector<double> m(A.values().begin(), A.values().end());
  const auto lu = linalg::lu_decompose(m, n);
  if (!lu.nonsingular) throw NumericalError("logdet of a singular matrix");
  std::vector<double> inv = linalg::lu_inverse(lu, n);
  return g.push("logdet", Tensor::scalar(lu.log_abs_det), {a}, [a, inv = std::move(inv), n](Graph& gr, std::size_t self) {
    const double d = gr.grad_of(self)[0];
    detail::accumulate(gr, a, [&](Tensor& dA) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) dA(i, j) += d * inv[j * n + i];
    });
  });
}

struct AttentionResult {
  Var output;
  Var weights;
};

/// softmax(Q K^T / sqrt(d) + mask) V. `mask` is additive (0 or kMaskedLogit)
/// with shape rows(Q) x rows(K).
inline AttentionResult scaled_dot_attention(Var q, Var k, Var v, const std::optional<Tensor>& mask = std::nullopt) {
  Graph& g = detail::graph_of(q);
  const std::size_t d = g.value(q).cols();
  if (g.value(k).cols() != d) throw NumericalError("shape mismatch in attention: query/key width");
  if (g.value(k).rows() != g.value(v).rows()) throw NumericalError("shape mismatch in attention: key/value rows");
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  if (mask) {
    const Tensor& S = g.value(scores);
    if (!S.same_shape(*mask)) throw NumericalError("shape mismatch in attention mask");
    scores = add(scores, g.constant(*mask));
  }
  Var w = softmax(scores, 1);
  return {matmul(w, v), w};
}

}  // namespace showcase::diff
