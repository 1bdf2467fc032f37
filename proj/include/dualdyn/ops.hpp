#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dualdyn/graph.hpp"

namespace dualdyn::ad {

namespace detail {

[[noreturn]] inline void shape_error(OpKind kind, const std::string& what, std::initializer_list<Shape> shapes) {
  std::string msg = std::string(op_name(kind)) + ": " + what + " (shapes";
  for (const Shape& s : shapes) msg += " " + shape_str(s);
  msg += ")";
  throw Error(msg);
}

inline void require_same_shape(OpKind kind, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_error(kind, "operand shapes differ", {a.shape(), b.shape()});
}

inline void require_matrix_like(OpKind kind, const Var& a) {
  if (a.value().rank() < 1 || a.value().rank() > 2) shape_error(kind, "expected rank 1 or 2", {a.shape()});
}

template <class Forward, class Derivative>
Var unary(OpKind kind, Var x, Forward f, Derivative df) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) y[i] = f(xv[i]);
  return x.graph().record(kind, {x}, std::move(y), [x, df](Graph& g, NodeId self) {
    if (!x.requires_grad()) return;
    const Tensor& gy = g.grad(self);
    const Tensor& xv = g.value(x.id());
    const Tensor& yv = g.value(self);
    Tensor& gx = g.grad(x.id());
    for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

/// y = x Wᵀ + b with W of shape [out, in]; x is [in] or [batch, in].
inline Var affine(Var x, Var W, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = W.value();
  const Tensor& bv = b.value();
  detail::require_matrix_like(OpKind::affine, x);
  if (wv.rank() != 2 || bv.rank() != 1 || wv.shape()[0] != bv.shape()[0] || wv.shape()[1] != xv.cols()) {
    detail::shape_error(OpKind::affine, "need x[.., in], W[out, in], b[out]", {xv.shape(), wv.shape(), bv.shape()});
  }
  const std::size_t rows = xv.rows(), in = wv.shape()[1], out = wv.shape()[0];
  Tensor y(xv.rank() == 1 ? Shape{out} : Shape{rows, out});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &xv.data()[r * in];
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = &wv.data()[o * in];
      double acc = bv[o];
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      y[r * out + o] = acc;
    }
  }
  return x.graph().record(OpKind::affine, {x, W, b}, std::move(y), [x, W, b, rows, in, out](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    const Tensor& xv = g.value(x.id());
    const Tensor& wv = g.value(W.id());
    if (x.requires_grad()) {
      Tensor& gx = g.grad(x.id());
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
          const double go = gy[r * out + o];
          if (go == 0.0) continue;
          for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += go * wv[o * in + i];
        }
      }
    }
    if (W.requires_grad()) {
      Tensor& gw = g.grad(W.id());
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
          const double go = gy[r * out + o];
          if (go == 0.0) continue;
          for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += go * xv[r * in + i];
        }
      }
    }
    if (b.requires_grad()) {
      Tensor& gb = g.grad(b.id());
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) gb[o] += gy[r * out + o];
      }
    }
  });
}

inline Var matmul(Var A, Var B) {
  const Tensor& av = A.value();
  const Tensor& bv = B.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    detail::shape_error(OpKind::matmul, "inner dimensions differ", {av.shape(), bv.shape()});
  }
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  Tensor y(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double a = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] += a * bv[p * n + j];
    }
  }
  return A.graph().record(OpKind::matmul, {A, B}, std::move(y), [A, B, m, k, n](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    const Tensor& av = g.value(A.id());
    const Tensor& bv = g.value(B.id());
    if (A.requires_grad()) {
      Tensor& ga = g.grad(A.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += gy[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (B.requires_grad()) {
      Tensor& gb = g.grad(B.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double a = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += a * gy[i * n + j];
        }
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(OpKind::add, a, b);
  Tensor y = a.value();
  y.requires_grad = false;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b.value()[i];
  return a.graph().record(OpKind::add, {a, b}, std::move(y), [a, b](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    for (const Var& v : {a, b}) {
      if (!v.requires_grad()) continue;
      Tensor& gv = g.grad(v.id());
      for (std::size_t i = 0; i < gy.numel(); ++i) gv[i] += gy[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(OpKind::sub, a, b);
  Tensor y = a.value();
  y.requires_grad = false;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  return a.graph().record(OpKind::sub, {a, b}, std::move(y), [a, b](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    if (a.requires_grad()) {
      Tensor& ga = g.grad(a.id());
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = g.grad(b.id());
      for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] -= gy[i];
    }
  });
}

/// Elementwise product of equal-shape operands.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(OpKind::mul, a, b);
  Tensor y = a.value();
  y.requires_grad = false;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return a.graph().record(OpKind::mul, {a, b}, std::move(y), [a, b](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    if (a.requires_grad()) {
      const Tensor& bv = g.value(b.id());
      Tensor& ga = g.grad(a.id());
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (b.requires_grad()) {
      const Tensor& av = g.value(a.id());
      Tensor& gb = g.grad(b.id());
      for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

/// Multiplies every row of x by the vector v (length = columns of x).
inline Var mul_row(Var x, Var v) {
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  detail::require_matrix_like(OpKind::mul_row, x);
  if (vv.rank() != 1 || vv.numel() != xv.cols()) {
    detail::shape_error(OpKind::mul_row, "row vector length must equal columns", {xv.shape(), vv.shape()});
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = xv[r * cols + c] * vv[c];
  return x.graph().record(OpKind::mul_row, {x, v}, std::move(y), [x, v, rows, cols](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    if (x.requires_grad()) {
      const Tensor& vv = g.value(v.id());
      Tensor& gx = g.grad(x.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gy[r * cols + c] * vv[c];
    }
    if (v.requires_grad()) {
      const Tensor& xv = g.value(x.id());
      Tensor& gv = g.grad(v.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gv[c] += gy[r * cols + c] * xv[r * cols + c];
    }
  });
}

inline Var scale(Var x, double c) {
  return detail::unary(OpKind::scale, x, [c](double a) { return c * a; }, [c](double, double) { return c; });
}

inline Var shift(Var x, double c) {
  return detail::unary(OpKind::shift, x, [c](double a) { return a + c; }, [](double, double) { return 1.0; });
}

inline Var tanh(Var x) {
  return detail::unary(OpKind::tanh, x, [](double a) { return std::tanh(a); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var x) {
  return detail::unary(OpKind::sigmoid, x, [](double a) { return 1.0 / (1.0 + std::exp(-a)); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var x) {
  return detail::unary(OpKind::exp, x, [](double a) { return std::exp(a); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
  return detail::unary(OpKind::log, x, [](double a) { return std::log(a); },
                       [](double a, double) { return 1.0 / a; });
}

inline Var relu(Var x) {
  return detail::unary(OpKind::relu, x, [](double a) { return a > 0.0 ? a : 0.0; },
                       [](double a, double) { return a > 0.0 ? 1.0 : 0.0; });
}

inline Var square(Var x) {
  return detail::unary(OpKind::square, x, [](double a) { return a * a; },
                       [](double a, double) { return 2.0 * a; });
}

inline Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return x.graph().record(OpKind::sum, {x}, Tensor::scalar(acc), [x](Graph& g, NodeId self) {
    if (!x.requires_grad()) return;
    const double gy = g.grad(self)[0];
    Tensor& gx = g.grad(x.id());
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gy;
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().numel();
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return x.graph().record(OpKind::mean, {x}, Tensor::scalar(acc / double(n)), [x, n](Graph& g, NodeId self) {
    if (!x.requires_grad()) return;
    const double gy = g.grad(self)[0] / double(n);
    Tensor& gx = g.grad(x.id());
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gy;
  });
}

/// Concatenates along the last axis. All parts share rank and row count.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat: no inputs");
  const Tensor& first = parts.front().value();
  detail::require_matrix_like(OpKind::concat, parts.front());
  const std::size_t rows = first.rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() != first.rank() || v.rows() != rows) {
      detail::shape_error(OpKind::concat, "parts disagree in rank or rows", {first.shape(), v.shape()});
    }
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor y(first.rank() == 1 ? Shape{total} : Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) y[r * total + offset + c] = v[r * widths[k] + c];
    offset += widths[k];
  }
  return parts.front().graph().record(OpKind::concat, parts, std::move(y),
                                      [parts, widths, rows, total](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (parts[k].requires_grad()) {
        Tensor& gp = g.grad(parts[k].id());
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += gy[r * total + offset + c];
      }
      offset += widths[k];
    }
  });
}

/// Columns [begin, end) of x.
inline Var slice(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  detail::require_matrix_like(OpKind::slice, x);
  if (begin > end || end > xv.cols()) {
    detail::shape_error(OpKind::slice, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds",
                        {xv.shape()});
  }
  const std::size_t rows = xv.rows(), cols = xv.cols(), w = end - begin;
  Tensor y(xv.rank() == 1 ? Shape{w} : Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) y[r * w + c] = xv[r * cols + begin + c];
  return x.graph().record(OpKind::slice, {x}, std::move(y), [x, begin, rows, cols, w](Graph& g, NodeId self) {
    if (!x.requires_grad()) return;
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad(x.id());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) gx[r * cols + begin + c] += gy[r * w + c];
  });
}

/// Selects the listed columns, in order.
inline Var gather_cols(Var x, std::vector<std::size_t> index) {
  const Tensor& xv = x.value();
  detail::require_matrix_like(OpKind::gather_cols, x);
  const std::size_t rows = xv.rows(), cols = xv.cols(), w = index.size();
  for (std::size_t c : index) {
    if (c >= cols) detail::shape_error(OpKind::gather_cols, "column " + std::to_string(c) + " out of range", {xv.shape()});
  }
  Tensor y(xv.rank() == 1 ? Shape{w} : Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) y[r * w + c] = xv[r * cols + index[c]];
  return x.graph().record(OpKind::gather_cols, {x}, std::move(y),
                          [x, index = std::move(index), rows, cols, w](Graph& g, NodeId self) {
    if (!x.requires_grad()) return;
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad(x.id());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) gx[r * cols + index[c]] += gy[r * w + c];
  });
}

/// Inverse of two gather_cols calls: out[:, index_a[j]] = a[:, j] and
/// out[:, index_b[j]] = b[:, j]. The two index sets must partition the output.
inline Var merge_cols(Var a, const std::vector<std::size_t>& index_a, Var b, const std::vector<std::size_t>& index_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != bv.rank() || av.rows() != bv.rows() || av.cols() != index_a.size() ||
      bv.cols() != index_b.size()) {
    detail::shape_error(OpKind::merge_cols, "parts do not match their index sets", {av.shape(), bv.shape()});
  }
  const std::size_t rows = av.rows(), width = index_a.size() + index_b.size();
  std::vector<int> seen(width, 0);
  for (std::size_t c : index_a) seen.at(c)++;
  for (std::size_t c : index_b) seen.at(c)++;
  if (std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; })) {
    detail::shape_error(OpKind::merge_cols, "index sets do not partition the output", {av.shape(), bv.shape()});
  }
  Tensor y(av.rank() == 1 ? Shape{width} : Shape{rows, width});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < index_a.size(); ++c) y[r * width + index_a[c]] = av[r * index_a.size() + c];
    for (std::size_t c = 0; c < index_b.size(); ++c) y[r * width + index_b[c]] = bv[r * index_b.size() + c];
  }
  return a.graph().record(OpKind::merge_cols, {a, b}, std::move(y),
                          [a, b, index_a, index_b, rows, width](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    if (a.requires_grad()) {
      Tensor& ga = g.grad(a.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < index_a.size(); ++c) ga[r * index_a.size() + c] += gy[r * width + index_a[c]];
    }
    if (b.requires_grad()) {
      Tensor& gb = g.grad(b.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < index_b.size(); ++c) gb[r * index_b.size() + c] += gy[r * width + index_b[c]];
    }
  });
}

/// Row-wise softmax.
inline Var softmax(Var x) {
  const Tensor& xv = x.value();
  detail::require_matrix_like(OpKind::softmax, x);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = xv[r * cols];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xv[r * cols + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[r * cols + c] = std::exp(xv[r * cols + c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= z;
  }
  return x.graph().record(OpKind::softmax, {x}, std::move(y), [x, rows, cols](Graph& g, NodeId self) {
    if (!x.requires_grad()) return;
    const Tensor& gy = g.grad(self);
    const Tensor& yv = g.value(self);
    Tensor& gx = g.grad(x.id());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gy[r * cols + c] * yv[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += yv[r * cols + c] * (gy[r * cols + c] - dot);
    }
  });
}

/// Row-wise log-softmax, evaluated with the max-shift for stability.
inline Var log_softmax(Var x) {
  const Tensor& xv = x.value();
  detail::require_matrix_like(OpKind::log_softmax, x);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = xv[r * cols];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xv[r * cols + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xv[r * cols + c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = xv[r * cols + c] - lse;
  }
  return x.graph().record(OpKind::log_softmax, {x}, std::move(y), [x, rows, cols](Graph& g, NodeId self) {
    if (!x.requires_grad()) return;
    const Tensor& gy = g.grad(self);
    const Tensor& yv = g.value(self);
    Tensor& gx = g.grad(x.id());
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += gy[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gy[r * cols + c] - std::exp(yv[r * cols + c]) * total;
    }
  });
}

/// out[r] = x[r, index[r]].
inline Var pick(Var x, std::vector<std::size_t> index) {
  const Tensor& xv = x.value();
  detail::require_matrix_like(OpKind::pick, x);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (index.size() != rows) detail::shape_error(OpKind::pick, "one index per row required", {xv.shape()});
  Tensor y(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= cols) detail::shape_error(OpKind::pick, "index out of range", {xv.shape()});
    y[r] = xv[r * cols + index[r]];
  }
  return x.graph().record(OpKind::pick, {x}, std::move(y), [x, index = std::move(index), cols](Graph& g, NodeId self) {
    if (!x.requires_grad()) return;
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad(x.id());
    for (std::size_t r = 0; r < index.size(); ++r) gx[r * cols + index[r]] += gy[r];
  });
}

/// Per-row matrix-vector product. Row r of M holds an out_rows x v.cols()
/// matrix in row-major order; out[r] = M_r · v[r].
inline Var row_matvec(Var M, Var v, std::size_t out_rows) {
  const Tensor& mv = M.value();
  const Tensor& vv = v.value();
  detail::require_matrix_like(OpKind::row_matvec, M);
  const std::size_t rows = mv.rows(), inner = vv.cols();
  if (vv.rank() != mv.rank() || vv.rows() != rows || mv.cols() != out_rows * inner) {
    detail::shape_error(OpKind::row_matvec, "matrix rows do not match vector length " + std::to_string(inner),
                        {mv.shape(), vv.shape()});
  }
  Tensor y(mv.rank() == 1 ? Shape{out_rows} : Shape{rows, out_rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* m = &mv.data()[r * out_rows * inner];
    const double* x = &vv.data()[r * inner];
    for (std::size_t i = 0; i < out_rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < inner; ++j) acc += m[i * inner + j] * x[j];
      y[r * out_rows + i] = acc;
    }
  }
  return M.graph().record(OpKind::row_matvec, {M, v}, std::move(y),
                          [M, v, rows, inner, out_rows](Graph& g, NodeId self) {
    const Tensor& gy = g.grad(self);
    const Tensor& mv = g.value(M.id());
    const Tensor& vv = g.value(v.id());
    if (M.requires_grad()) {
      Tensor& gm = g.grad(M.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < out_rows; ++i)
          for (std::size_t j = 0; j < inner; ++j)
            gm[(r * out_rows + i) * inner + j] += gy[r * out_rows + i] * vv[r * inner + j];
    }
    if (v.requires_grad()) {
      Tensor& gv = g.grad(v.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < out_rows; ++i)
          for (std::size_t j = 0; j < inner; ++j)
            gv[r * inner + j] += gy[r * out_rows + i] * mv[(r * out_rows + i) * inner + j];
    }
  });
}

/**
 * Generic entry point for the argument-free kinds. Kinds that carry extra
 * arguments (scale, shift, slice, gather/merge, pick, row_matvec) go through
 * their dedicated functions.
 */
inline Var record_op(Graph& graph, OpKind kind, std::span<const Var> in) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw Error(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                  std::to_string(in.size()));
    }
    for (const Var& v : in) {
      if (&v.graph() != &graph) throw Error(std::string(op_name(kind)) + ": input from another graph");
    }
  };
  switch (kind) {
    case OpKind::affine: need(3); return affine(in[0], in[1], in[2]);
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::mul_row: need(2); return mul_row(in[0], in[1]);
    case OpKind::tanh: need(1); return tanh(in[0]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::square: need(1); return square(in[0]);
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::softmax: need(1); return softmax(in[0]);
    case OpKind::log_softmax: need(1); return log_softmax(in[0]);
    case OpKind::concat: {
      for (const Var& v : in) {
        if (&v.graph() != &graph) throw Error("concat: input from another graph");
      }
      return concat(std::vector<Var>(in.begin(), in.end()));
    }
    default:
      throw Error(std::string("record_op: ") + std::string(op_name(kind)) + " needs its dedicated function");
  }
}

}  // namespace dualdyn::ad
