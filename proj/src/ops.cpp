// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>

#include "ctvr/errors.hpp"

namespace ctvr::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<RowMatrix> view(std::vector<double>& v, std::size_t r, std::size_t c) {
  return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

Eigen::Map<const RowMatrix> cview(std::span<const double> v, std::size_t r, std::size_t c) {
  return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::size_t last_extent(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

bool wants_grad(const Node& self, std::size_t i) { return self.inputs.size() > i && self.inputs[i]->requires_grad; }

struct AxisView {
  std::size_t outer, n, inner;
};

AxisView axis_view(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) throw DimensionError(std::string(op) + ": axis out of range");
  AxisView v{1, x.shape()[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) v.inner *= x.shape()[i];
  if (v.n == 0) throw DimensionError(std::string(op) + ": empty axis");
  return v;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  view(out, m, n).noalias() = cview(a.values(), m, k) * cview(b.values(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto dc = cview(self.grad, m, n);
    if (wants_grad(self, 0))
      view(self.inputs[0]->ensure_grad(), m, k).noalias() += dc * cview(self.inputs[1]->value, k, n).transpose();
    if (wants_grad(self, 1))
      view(self.inputs[1]->ensure_grad(), k, n).noalias() += cview(self.inputs[0]->value, m, k).transpose() * dc;
  }, "matmul");
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return make_result({c, r}, std::move(out), {a}, [r, c](Node& self) {
    auto& da = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) da[i * c + j] += self.grad[j * r + i];
  }, "transpose");
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_matrix(w, "linear");
  const std::size_t in = w.dim(1), out_dim = w.dim(0);
  if (last_extent(x) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  std::vector<double> out(rows * out_dim);
  view(out, rows, out_dim).noalias() = cview(x.values(), rows, in) * cview(w.values(), out_dim, in).transpose();
  Shape shape = x.shape();
  shape.back() = out_dim;
  return make_result(std::move(shape), std::move(out), {x, w}, [rows, in, out_dim](Node& self) {
    const auto dy = cview(self.grad, rows, out_dim);
    if (wants_grad(self, 0))
      view(self.inputs[0]->ensure_grad(), rows, in).noalias() += dy * cview(self.inputs[1]->value, out_dim, in);
    if (wants_grad(self, 1))
      view(self.inputs[1]->ensure_grad(), out_dim, in).noalias() += dy.transpose() * cview(self.inputs[0]->value, rows, in);
  }, "linear");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      auto& d = self.inputs[k]->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) {
      auto& d = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& d = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= self.grad[i];
    }
  }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& A = self.inputs[0]->value;
    const auto& B = self.inputs[1]->value;
    if (wants_grad(self, 0)) {
      auto& d = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * B[i];
    }
    if (wants_grad(self, 1)) {
      auto& d = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * A[i];
    }
  }, "mul");
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * self.grad[i];
  }, "scale");
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: factor must hold one value");
  const double f = s.values()[0];
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= f;
  return make_result(a.shape(), std::move(out), {a, s}, [](Node& self) {
    const auto& A = self.inputs[0]->value;
    const double f = self.inputs[1]->value[0];
    if (wants_grad(self, 0)) {
      auto& d = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += f * self.grad[i];
    }
    if (wants_grad(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < A.size(); ++i) acc += self.grad[i] * A[i];
      self.inputs[1]->ensure_grad()[0] += acc;
    }
  }, "mul_scalar");
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const std::size_t c = last_extent(a);
  if (row.numel() != c) {
    throw DimensionError("add_row: row of " + std::to_string(row.numel()) + " for width " +
                         std::to_string(c));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  auto rv = row.values();
  for (std::size_t base = 0; base < out.size(); base += c)
    for (std::size_t j = 0; j < c; ++j) out[base + j] += rv[j];
  return make_result(a.shape(), std::move(out), {a, row}, [c](Node& self) {
    if (wants_grad(self, 0)) {
      auto& d = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& d = self.inputs[1]->ensure_grad();
      for (std::size_t base = 0; base < self.grad.size(); base += c)
        for (std::size_t j = 0; j < c; ++j) d[j] += self.grad[base + j];
    }
  }, "add_row");
}

Tensor mul_rows(const Tensor& a, const Tensor& v) {
  require_matrix(a, "mul_rows");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (v.numel() != r) throw DimensionError("mul_rows: need one factor per row");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto vv = v.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= vv[i];
  return make_result(a.shape(), std::move(out), {a, v}, [r, c](Node& self) {
    const auto& A = self.inputs[0]->value;
    const auto& V = self.inputs[1]->value;
    if (wants_grad(self, 0)) {
      auto& d = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[i * c + j] += self.grad[i * c + j] * V[i];
    }
    if (wants_grad(self, 1)) {
      auto& d = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[i * c + j] * A[i * c + j];
        d[i] += acc;
      }
    }
  }, "mul_rows");
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_result({}, {acc}, {a}, [](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (auto& g : d) g += self.grad[0];
  }, "sum");
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x, axis, "softmax");
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < v.n; ++a) mx = std::max(mx, xv[base + a * v.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < v.n; ++a) {
        const double e = std::exp(xv[base + a * v.inner] - mx);
        out[base + a * v.inner] = e;
        z += e;
      }
      for (std::size_t a = 0; a < v.n; ++a) out[base + a * v.inner] /= z;
    }
  return make_result(x.shape(), std::move(out), {x}, [v](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    const auto& y = self.value;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.n * v.inner + in;
        double dot = 0.0;
        for (std::size_t a = 0; a < v.n; ++a) dot += y[base + a * v.inner] * self.grad[base + a * v.inner];
        for (std::size_t a = 0; a < v.n; ++a) {
          const std::size_t i = base + a * v.inner;
          d[i] += y[i] * (self.grad[i] - dot);
        }
      }
  }, "softmax");
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x, axis, "log_softmax");
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < v.n; ++a) mx = std::max(mx, xv[base + a * v.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < v.n; ++a) z += std::exp(xv[base + a * v.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t a = 0; a < v.n; ++a) out[base + a * v.inner] = xv[base + a * v.inner] - lz;
    }
  return make_result(x.shape(), std::move(out), {x}, [v](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    const auto& y = self.value;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.n * v.inner + in;
        double gsum = 0.0;
        for (std::size_t a = 0; a < v.n; ++a) gsum += self.grad[base + a * v.inner];
        for (std::size_t a = 0; a < v.n; ++a) {
          const std::size_t i = base + a * v.inner;
          d[i] += self.grad[i] - std::exp(y[i]) * gsum;
        }
      }
  }, "log_softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = last_extent(x);
  if (gamma.numel() != c || beta.numel() != c) throw DimensionError("layer_norm: affine width mismatch");
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / c;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  auto xv = x.values();
  auto g = gamma.values();
  auto b = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (xr[j] - mu) * rstd[r];
      out[r * c + j] = g[j] * xhat[r * c + j] + b[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, c, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
    const auto& G = self.inputs[1]->value;
    const auto& dy = self.grad;
    if (wants_grad(self, 1)) {
      auto& dg = self.inputs[1]->ensure_grad();
      for (std::size_t base = 0; base < dy.size(); base += c)
        for (std::size_t j = 0; j < c; ++j) dg[j] += dy[base + j] * xhat[base + j];
    }
    if (wants_grad(self, 2)) {
      auto& db = self.inputs[2]->ensure_grad();
      for (std::size_t base = 0; base < dy.size(); base += c)
        for (std::size_t j = 0; j < c; ++j) db[j] += dy[base + j];
    }
    if (wants_grad(self, 0)) {
      auto& dx = self.inputs[0]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = dy[r * c + j] * G[j];
          m1 += dxh;
          m2 += dxh * xhat[r * c + j];
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = dy[r * c + j] * G[j];
          dx[r * c + j] += rstd[r] * (dxh - m1 - xhat[r * c + j] * m2);
        }
      }
    }
  }, "layer_norm");
}

Tensor gelu(const Tensor& x) {
  // Tanh form, written as u * sigmoid(2y) with y = sqrt(2/pi) (u + 0.044715 u^3).
  constexpr double kC = 0.7978845608028654;
  constexpr double kA = 0.044715;
  std::vector<double> out(x.numel()), sig(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = xv[i];
    sig[i] = 1.0 / (1.0 + std::exp(-2.0 * kC * (u + kA * u * u * u)));
    out[i] = u * sig[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [sig = std::move(sig)](Node& self) {
    const auto& X = self.inputs[0]->value;
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double u = X[i], s = sig[i];
      d[i] += self.grad[i] * (s + u * s * (1.0 - s) * 2.0 * kC * (1.0 + 3.0 * kA * u * u));
    }
  }, "gelu");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (nn::numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
  }, "reshape");
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(rows.size() * c);
  auto xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) throw DimensionError("gather_rows: index out of range");
    std::copy_n(xv.data() + rows[i] * c, c, out.data() + i * c);
  }
  return make_result({rows.size(), c}, std::move(out), {x},
                     [c, idx = std::vector<std::size_t>(rows.begin(), rows.end())](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) d[idx[i] * c + j] += self.grad[i * c + j];
  }, "gather_rows");
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.dim(0) != b.dim(0)) throw DimensionError("concat_cols: row counts differ");
  const std::size_t r = a.dim(0), ca = a.dim(1), cb = b.dim(1), c = ca + cb;
  std::vector<double> out(r * c);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.data() + i * ca, ca, out.data() + i * c);
    std::copy_n(bv.data() + i * cb, cb, out.data() + i * c + ca);
  }
  return make_result({r, c}, std::move(out), {a, b}, [r, ca, cb, c](Node& self) {
    if (wants_grad(self, 0)) {
      auto& d = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < ca; ++j) d[i * ca + j] += self.grad[i * c + j];
    }
    if (wants_grad(self, 1)) {
      auto& d = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cb; ++j) d[i * cb + j] += self.grad[i * c + ca + j];
    }
  }, "concat_cols");
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  const std::size_t c = last_extent(a);
  if (last_extent(b) != c) throw DimensionError("concat_rows: widths differ");
  const std::size_t ra = a.numel() / c, rb = b.numel() / c;
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return make_result({ra + rb, c}, std::move(out), {a, b}, [na = a.numel()](Node& self) {
    if (wants_grad(self, 0)) {
      auto& d = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < na; ++i) d[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& d = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[na + i];
    }
  }, "concat_rows");
}

Tensor column(const Tensor& x, std::size_t col) {
  require_matrix(x, "column");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (col >= c) throw DimensionError("column: index out of range");
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = x.values()[i * c + col];
  return make_result({r}, std::move(out), {x}, [r, c, col](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) d[i * c + col] += self.grad[i];
  }, "column");
}

Tensor pick(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  require_matrix(x, "pick");
  if (rows.size() != cols.size() || rows.empty()) throw DimensionError("pick: index lists differ or are empty");
  const std::size_t c = x.dim(1);
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0) || cols[i] >= c) throw DimensionError("pick: index out of range");
    flat[i] = rows[i] * c + cols[i];
    out[i] = x.values()[flat[i]];
  }
  return make_result({rows.size()}, std::move(out), {x}, [flat = std::move(flat)](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < flat.size(); ++i) d[flat[i]] += self.grad[i];
  }, "pick");
}

Tensor mean_row_groups(const Tensor& x, std::size_t group) {
  require_matrix(x, "mean_row_groups");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (group == 0 || r % group != 0) throw DimensionError("mean_row_groups: rows not divisible by group");
  const std::size_t g = r / group;
  const double inv = 1.0 / static_cast<double>(group);
  std::vector<double> out(g * c, 0.0);
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[(i / group) * c + j] += xv[i * c + j];
  for (auto& v : out) v *= inv;
  return make_result({g, c}, std::move(out), {x}, [r, c, group, inv](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += self.grad[(i / group) * c + j] * inv;
  }, "mean_row_groups");
}

Tensor l2_normalize_rows(const Tensor& x) {
  const std::size_t c = last_extent(x);
  const std::size_t rows = x.numel() / c;
  std::vector<double> out(x.numel(), 0.0);
  std::vector<double> norms(rows);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += xv[r * c + j] * xv[r * c + j];
    norms[r] = std::sqrt(ss);
    if (norms[r] > 0.0)
      for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] / norms[r];
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, c, norms = std::move(norms)](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[r * c + j] * self.grad[r * c + j];
      for (std::size_t j = 0; j < c; ++j) d[r * c + j] += (self.grad[r * c + j] - y[r * c + j] * dot) / norms[r];
    }
  }, "l2_normalize_rows");
}

Tensor topk_softmax(const Tensor& logits, std::size_t k) {
  require_matrix(logits, "topk_softmax");
  const std::size_t r = logits.dim(0), n = logits.dim(1);
  if (k < 1 || k > n) {
    throw ConfigError("top-k needs 1 <= k <= " + std::to_string(n) + ", got k=" + std::to_string(k));
  }
  std::vector<double> out(r * n, 0.0);
  std::vector<std::size_t> order(n);
  auto lv = logits.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = lv.data() + i * n;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    const double mx = row[order[0]];
    double z = 0.0;
    for (std::size_t s = 0; s < k; ++s) z += std::exp(row[order[s]] - mx);
    for (std::size_t s = 0; s < k; ++s) out[i * n + order[s]] = std::exp(row[order[s]] - mx) / z;
  }
  return make_result({r, n}, std::move(out), {logits}, [r, n](Node& self) {
    auto& d = self.inputs[0]->ensure_grad();
    const auto& y = self.value;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        if (y[i * n + j] != 0.0) d[i * n + j] += y[i * n + j] * (self.grad[i * n + j] - dot);
      }
    }
  }, "topk_softmax");
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionSpec& spec, std::vector<double>* probs) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t width = q.dim(1);
  const std::size_t blocks = spec.blocks, heads = spec.heads;
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (k.dim(1) != width || v.dim(1) != width) throw DimensionError("attention: q/k/v widths differ");
  if (blocks == 0 || q.dim(0) % blocks != 0 || k.dim(0) % blocks != 0 || v.dim(0) != k.dim(0)) {
    throw DimensionError("attention: rows not divisible into blocks");
  }
  const std::size_t lq = q.dim(0) / blocks, lk = k.dim(0) / blocks, dh = width / heads;
  if (spec.causal && lq != lk) throw DimensionError("attention: causal mask needs equal lengths");
  const double inv = 1.0 / spec.scale_divisor;

  std::vector<double> p(blocks * heads * lq * lk, 0.0);
  std::vector<double> out(q.numel(), 0.0);
  auto Q = q.values();
  auto K = k.values();
  auto V = v.values();
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = p.data() + (b * heads + h) * lq * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        const double* qi = Q.data() + (b * lq + i) * width + h * dh;
        const std::size_t jmax = spec.causal ? i + 1 : lk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < jmax; ++j) {
          const double* kj = K.data() + (b * lk + j) * width + h * dh;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          P[i * lk + j] = s * inv;
          mx = std::max(mx, P[i * lk + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < jmax; ++j) {
          P[i * lk + j] = std::exp(P[i * lk + j] - mx);
          z += P[i * lk + j];
        }
        double* oi = out.data() + (b * lq + i) * width + h * dh;
        for (std::size_t j = 0; j < jmax; ++j) {
          P[i * lk + j] /= z;
          const double* vj = V.data() + (b * lk + j) * width + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += P[i * lk + j] * vj[t];
        }
      }
    }
  if (probs) *probs = p;
  return make_result(q.shape(), std::move(out), {q, k, v},
                     [blocks, heads, lq, lk, dh, width, inv, p = std::move(p)](Node& self) {
    const auto& Q = self.inputs[0]->value;
    const auto& K = self.inputs[1]->value;
    const auto& V = self.inputs[2]->value;
    const auto& dO = self.grad;
    const bool gq = wants_grad(self, 0), gk = wants_grad(self, 1), gv = wants_grad(self, 2);
    double* dQ = gq ? self.inputs[0]->ensure_grad().data() : nullptr;
    double* dK = gk ? self.inputs[1]->ensure_grad().data() : nullptr;
    double* dV = gv ? self.inputs[2]->ensure_grad().data() : nullptr;
    std::vector<double> dS(lk);
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const double* P = p.data() + (b * heads + h) * lq * lk;
        for (std::size_t i = 0; i < lq; ++i) {
          const double* doi = dO.data() + (b * lq + i) * width + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < lk; ++j) {
            const double pij = P[i * lk + j];
            if (pij == 0.0) {
              dS[j] = 0.0;
              continue;
            }
            const double* vj = V.data() + (b * lk + j) * width + h * dh;
            double dp = 0.0;
            for (std::size_t t = 0; t < dh; ++t) dp += doi[t] * vj[t];
            dS[j] = dp;
            dot += pij * dp;
            if (dV) {
              double* dvj = dV + (b * lk + j) * width + h * dh;
              for (std::size_t t = 0; t < dh; ++t) dvj[t] += pij * doi[t];
            }
          }
          for (std::size_t j = 0; j < lk; ++j) dS[j] = P[i * lk + j] * (dS[j] - dot) * inv;
          if (dQ) {
            double* dqi = dQ + (b * lq + i) * width + h * dh;
            for (std::size_t j = 0; j < lk; ++j) {
              if (dS[j] == 0.0) continue;
              const double* kj = K.data() + (b * lk + j) * width + h * dh;
              for (std::size_t t = 0; t < dh; ++t) dqi[t] += dS[j] * kj[t];
            }
          }
          if (dK) {
            const double* qi = Q.data() + (b * lq + i) * width + h * dh;
            for (std::size_t j = 0; j < lk; ++j) {
              if (dS[j] == 0.0) continue;
              double* dkj = dK + (b * lk + j) * width + h * dh;
              for (std::size_t t = 0; t < dh; ++t) dkj[t] += dS[j] * qi[t];
            }
          }
        }
      }
  }, "attention");
}

Tensor multi_head_attention(const Tensor& q_src, const Tensor& kv_src, const Tensor& wq,
                            const Tensor& wk, const Tensor& wv, std::size_t heads) {
  const std::size_t width = wq.dim(0);
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("multi_head_attention: width " + std::to_string(width) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  AttentionSpec spec;
  spec.heads = heads;
  spec.scale_divisor = std::sqrt(static_cast<double>(width) / static_cast<double>(heads));
  return scaled_dot_attention(linear(q_src, wq), linear(kv_src, wk), linear(kv_src, wv), spec);
}

}  // namespace ctvr::nn
