#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mp/autodiff.hpp"
#include "mp/parallel.hpp"

// Differentiable tensor operations. Every op validates shapes eagerly and
// records a closure that accumulates (+=) into the parents' adjoints.

namespace mp {

namespace detail {

inline void require_rank(const Value& v, std::size_t rank, std::string_view op) {
  if (v.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(v.shape()));
  }
}

inline void require_same_shape(const Value& a, const Value& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

inline void require_scalar(const Value& v, std::string_view op) {
  if (v.size() != 1) {
    throw DimensionError(std::string(op) + ": expected a scalar, got " + shape_string(v.shape()));
  }
}

// Rows of a tensor viewed as [rows x last].
inline std::size_t leading_rows(const Shape& s) { return s.empty() ? 1 : shape_numel(s) / s.back(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Value add(const Value& a, const Value& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return Value::from_op("add", std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Tensor* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

inline Value sub(const Value& a, const Value& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return Value::from_op("sub", std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
inline Value mul(const Value& a, const Value& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return Value::from_op("mul", std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = value_of(self, 0);
    const Tensor& bv = value_of(self, 1);
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (Tensor* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

inline Value scale(const Value& a, double factor) {
  Tensor out = a.data();
  for (double& x : out.storage()) x *= factor;
  return Value::from_op("scale", std::move(out), {a}, [factor](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

inline Value add_scalar(const Value& a, double offset) {
  Tensor out = a.data();
  for (double& x : out.storage()) x += offset;
  return Value::from_op("add_scalar", std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

/// a * s for a scalar-valued s.
inline Value mul_scalar_value(const Value& a, const Value& s) {
  detail::require_scalar(s, "mul_scalar_value");
  const double k = s.data()[0];
  Tensor out = a.data();
  for (double& x : out.storage()) x *= k;
  return Value::from_op("mul_scalar_value", std::move(out), {a, s}, [](Node& self) {
    const Tensor& av = value_of(self, 0);
    const double k = value_of(self, 1)[0];
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * k;
    }
    if (Tensor* g = grad_of(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      (*g)[0] += acc;
    }
  });
}

/// a / s for a nonzero scalar-valued s.
inline Value div_scalar_value(const Value& a, const Value& s) {
  detail::require_scalar(s, "div_scalar_value");
  const double k = s.data()[0];
  if (k == 0.0) throw NumericError("div_scalar_value: division by zero");
  Tensor out = a.data();
  for (double& x : out.storage()) x /= k;
  return Value::from_op("div_scalar_value", std::move(out), {a, s}, [](Node& self) {
    const Tensor& av = value_of(self, 0);
    const double k = value_of(self, 1)[0];
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / k;
    }
    if (Tensor* g = grad_of(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      (*g)[0] -= acc / (k * k);
    }
  });
}

inline Value sqrt(const Value& a) {
  Tensor out = a.data();
  for (double& x : out.storage()) {
    if (x < 0.0) throw NumericError("sqrt of a negative value");
    x = std::sqrt(x);
  }
  return Value::from_op("sqrt", std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * 0.5 / self.value[i];
    }
  });
}

/// sign(z) * sqrt(|z|) elementwise.
inline Value signed_sqrt(const Value& a) {
  Tensor out = a.data();
  for (double& x : out.storage()) x = std::copysign(std::sqrt(std::abs(x)), x);
  return Value::from_op("signed_sqrt", std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        // derivative 1 / (2 sqrt|z|); clamped at the origin
        (*g)[i] += self.grad[i] * 0.5 / std::max(std::abs(self.value[i]), 1e-12);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation
// ---------------------------------------------------------------------------

inline Value sum(const Value& a) {
  double s = 0.0;
  for (double x : a.data().storage()) s += x;
  return Value::from_op("sum", Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (double& x : g->storage()) x += self.grad[0];
    }
  });
}

inline Value trace(const Value& a) {
  detail::require_rank(a, 2, "trace");
  if (a.shape()[0] != a.shape()[1]) throw DimensionError("trace of non-square " + shape_string(a.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.shape()[0]; ++i) s += a.data()(i, i);
  return Value::from_op("trace", Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->extent(0); ++i) (*g)(i, i) += self.grad[0];
    }
  });
}

inline Value reshape(const Value& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  return Value::from_op("reshape", a.data().reshaped(std::move(shape)), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

inline Value flatten(const Value& a) { return reshape(a, {a.size()}); }

inline Value transpose(const Value& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a.data()(i, j);
  return Value::from_op("transpose", std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->extent(0); ++i)
        for (std::size_t j = 0; j < g->extent(1); ++j) (*g)(i, j) += self.grad(j, i);
    }
  });
}

/// Columns [start, start+count) of a matrix.
inline Value slice_cols(const Value& a, std::size_t start, std::size_t count) {
  detail::require_rank(a, 2, "slice_cols");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (start + count > c || count == 0) {
    throw DimensionError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of " + shape_string(a.shape()));
  }
  Tensor out({r, count});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a.data()(i, start + j);
  return Value::from_op("slice_cols", std::move(out), {a}, [start](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.extent(0); ++i)
        for (std::size_t j = 0; j < self.grad.extent(1); ++j) (*g)(i, start + j) += self.grad(i, j);
    }
  });
}

/// Rows [start, start+count) of a matrix.
inline Value slice_rows(const Value& a, std::size_t start, std::size_t count) {
  detail::require_rank(a, 2, "slice_rows");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (start + count > r || count == 0) {
    throw DimensionError("slice_rows [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of " + shape_string(a.shape()));
  }
  const auto first = a.data().storage().begin() + static_cast<std::ptrdiff_t>(start * c);
  Tensor out({count, c}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * c)));
  return Value::from_op("slice_rows", std::move(out), {a}, [start, c](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[start * c + i] += self.grad[i];
    }
  });
}

/// Row i of a matrix as a vector.
inline Value select_row(const Value& a, std::size_t row) {
  return reshape(slice_rows(a, row, 1), {a.shape()[1]});
}

/// Horizontal concatenation of matrices with equal row counts.
inline Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  for (const Value& p : parts) detail::require_rank(p, 2, "concat_cols");
  const std::size_t r = parts[0].shape()[0];
  std::size_t c = 0;
  for (const Value& p : parts) {
    if (p.shape()[0] != r) throw DimensionError("concat_cols: row count mismatch");
    c += p.shape()[1];
  }
  Tensor out({r, c});
  std::size_t offset = 0;
  for (const Value& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out(i, offset + j) = p.data()(i, j);
    offset += w;
  }
  return Value::from_op("concat_cols", std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t w = self.parents[p]->value.extent(1);
      if (Tensor* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < g->extent(0); ++i)
          for (std::size_t j = 0; j < w; ++j) (*g)(i, j) += self.grad(i, offset + j);
      }
      offset += w;
    }
  });
}

/// Joins vectors end to end.
inline Value concat(const std::vector<Value>& parts) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  std::vector<double> data;
  for (const Value& p : parts) {
    detail::require_rank(p, 1, "concat");
    data.insert(data.end(), p.data().storage().begin(), p.data().storage().end());
  }
  const std::size_t n = data.size();
  return Value::from_op("concat", Tensor({n}, std::move(data)), parts, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t w = self.parents[p]->value.size();
      if (Tensor* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < w; ++i) (*g)[i] += self.grad[offset + i];
      }
      offset += w;
    }
  });
}

/// Stacks equally shaped values along a new leading axis.
inline Value stack(const std::vector<Value>& parts) {
  if (parts.empty()) throw DimensionError("stack of nothing");
  const Shape inner = parts[0].shape();
  std::vector<double> data;
  data.reserve(parts.size() * shape_numel(inner));
  for (const Value& p : parts) {
    if (p.shape() != inner) throw DimensionError("stack: shape mismatch");
    data.insert(data.end(), p.data().storage().begin(), p.data().storage().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return Value::from_op("stack", Tensor(std::move(shape), std::move(data)), parts, [](Node& self) {
    const std::size_t w = self.parents[0]->value.size();
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (Tensor* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < w; ++i) (*g)[i] += self.grad[p * w + i];
      }
    }
  });
}

/// Column means of an [n x d] matrix.
inline Value mean_rows(const Value& a) {
  detail::require_rank(a, 2, "mean_rows");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.data()(i, j);
  for (double& x : out.storage()) x /= static_cast<double>(r);
  return Value::from_op("mean_rows", std::move(out), {a}, [r](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      const std::size_t c = self.grad.size();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += self.grad[j] / static_cast<double>(r);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Value matmul(const Value& a, const Value& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents disagree, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor out({m, n});
  const Tensor& av = a.data();
  const Tensor& bv = b.data();
  parallel_rows(m, k * n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av(i, p);
        for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * bv(p, j);
      }
  });
  return Value::from_op("matmul", std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = value_of(self, 0);
    const Tensor& bv = value_of(self, 1);
    const std::size_t m = av.extent(0), k = av.extent(1), n = bv.extent(1);
    if (Tensor* g = grad_of(self, 0)) {  // dA = dC B^T
      parallel_rows(m, k * n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += self.grad(i, j) * bv(p, j);
            (*g)(i, p) += acc;
          }
      });
    }
    if (Tensor* g = grad_of(self, 1)) {  // dB = A^T dC
      parallel_rows(k, m * n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p)
          for (std::size_t i = 0; i < m; ++i) {
            const double aip = av(i, p);
            for (std::size_t j = 0; j < n; ++j) (*g)(p, j) += aip * self.grad(i, j);
          }
      });
    }
  });
}

/// y = x W^T (+ b), applied to a vector [in] or to each row of [rows x in].
inline Value linear(const Value& x, const Value& weight, const Value& bias = Value()) {
  detail::require_rank(weight, 2, "linear");
  const std::size_t out_dim = weight.shape()[0], in_dim = weight.shape()[1];
  if (x.shape().empty() || x.shape().size() > 2 || x.shape().back() != in_dim) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  if (bias && bias.shape() != Shape{out_dim}) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " for " +
                         std::to_string(out_dim) + " outputs");
  }
  const bool is_vector = x.shape().size() == 1;
  const std::size_t rows = is_vector ? 1 : x.shape()[0];
  Tensor out(is_vector ? Shape{out_dim} : Shape{rows, out_dim});
  const auto xs = x.data().data();
  const auto ws = weight.data().data();
  parallel_rows(rows, in_dim * out_dim, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r)
      for (std::size_t o = 0; o < out_dim; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < in_dim; ++i) acc += xs[r * in_dim + i] * ws[o * in_dim + i];
        out[r * out_dim + o] = bias ? acc + bias.data()[o] : acc;
      }
  });
  std::vector<Value> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return Value::from_op("linear", std::move(out), std::move(inputs), [rows](Node& self) {
    const Tensor& xv = value_of(self, 0);
    const Tensor& wv = value_of(self, 1);
    const std::size_t out_dim = wv.extent(0), in_dim = wv.extent(1);
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = self.grad[r * out_dim + o];
          for (std::size_t i = 0; i < in_dim; ++i) (*g)[r * in_dim + i] += go * wv[o * in_dim + i];
        }
    }
    if (Tensor* g = grad_of(self, 1)) {
      parallel_rows(out_dim, rows * in_dim, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t o = lo; o < hi; ++o)
          for (std::size_t r = 0; r < rows; ++r) {
            const double go = self.grad[r * out_dim + o];
            for (std::size_t i = 0; i < in_dim; ++i) (*g)[o * in_dim + i] += go * xv[r * in_dim + i];
          }
      });
    }
    if (self.parents.size() > 2) {
      if (Tensor* g = grad_of(self, 2)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < out_dim; ++o) (*g)[o] += self.grad[r * out_dim + o];
      }
    }
  });
}

/// Channelwise gamma * x + beta over the last axis.
inline Value channel_affine(const Value& x, const Value& gamma, const Value& beta) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("channel_affine: parameters " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " for input " + shape_string(x.shape()));
  }
  Tensor out = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gamma.data()[i % d] * out[i] + beta.data()[i % d];
  return Value::from_op("channel_affine", std::move(out), {x, gamma, beta}, [d](Node& self) {
    const Tensor& xv = value_of(self, 0);
    const Tensor& gv = value_of(self, 1);
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * gv[i % d];
    }
    if (Tensor* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < xv.size(); ++i) (*g)[i % d] += self.grad[i] * xv[i];
    }
    if (Tensor* g = grad_of(self, 2)) {
      for (std::size_t i = 0; i < xv.size(); ++i) (*g)[i % d] += self.grad[i];
    }
  });
}

/// 2-D cross-correlation of a [C_in x H x W] map (no kernel flip).
inline Value conv2d(const Value& x, const Value& kernel, const Value& bias, std::size_t stride,
                    std::size_t pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(kernel, 4, "conv2d");
  const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t cout = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (kernel.shape()[1] != cin) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) + " for input " +
                         shape_string(x.shape()));
  }
  if (kh != kw || (kh != 1 && kh != 3)) throw DimensionError("conv2d: kernel must be 1x1 or 3x3");
  if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
  if (bias.shape() != Shape{cout}) throw DimensionError("conv2d: bias " + shape_string(bias.shape()));
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw DimensionError("conv2d: output extent < 1 for input " + shape_string(x.shape()));
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;

  // Visits every (output, input, kernel) triple that lies inside the padded input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                fn((co * ho + oy) * wo + ox, (ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix),
                   ((co * cin + ci) * kh + ky) * kw + kx);
              }
            }
  };

  Tensor out({cout, ho, wo});
  const Tensor& xv = x.data();
  const Tensor& kv = kernel.data();
  for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { out[o] += xv[i] * kv[k]; });
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t j = 0; j < ho * wo; ++j) out[co * ho * wo + j] += bias.data()[co];

  return Value::from_op("conv2d", std::move(out), {x, kernel, bias},
                        [for_each_tap, cout, ho, wo](Node& self) {
    const Tensor& xv = value_of(self, 0);
    const Tensor& kv = value_of(self, 1);
    Tensor* gx = grad_of(self, 0);
    Tensor* gk = grad_of(self, 1);
    if (gx || gk) {
      for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) {
        if (gx) (*gx)[i] += self.grad[o] * kv[k];
        if (gk) (*gk)[k] += self.grad[o] * xv[i];
      });
    }
    if (Tensor* gb = grad_of(self, 2)) {
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t j = 0; j < ho * wo; ++j) (*gb)[co] += self.grad[co * ho * wo + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

inline Value relu(const Value& a) {
  Tensor out = a.data();
  for (double& x : out.storage()) x = x > 0.0 ? x : 0.0;
  return Value::from_op("relu", std::move(out), {a}, [](Node& self) {
    const Tensor& av = value_of(self, 0);
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (av[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  });
}

/// GELU, tanh approximation.
inline Value gelu(const Value& a) {
  constexpr double kC = 0.044715;
  const double k = std::sqrt(2.0 / std::numbers::pi);
  Tensor out = a.data();
  for (double& x : out.storage()) x = 0.5 * x * (1.0 + std::tanh(k * (x + kC * x * x * x)));
  return Value::from_op("gelu", std::move(out), {a}, [k](Node& self) {
    const Tensor& av = value_of(self, 0);
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double x = av[i];
        const double t = std::tanh(k * (x + kC * x * x * x));
        const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * kC * x * x);
        (*g)[i] += self.grad[i] * d;
      }
    }
  });
}

/// Per-row normalization over the last axis (biased variance), then affine.
inline Value layer_norm(const Value& x, const Value& gain, const Value& shift, double eps = 1e-6) {
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm over an empty axis");
  if (gain.shape() != Shape{d} || shift.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(d));
  }
  const std::size_t rows = detail::leading_rows(x.shape());
  Tensor normalized(x.shape());
  std::vector<double> inv_std(rows);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.data()[r * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x.data()[r * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double n = (x.data()[r * d + j] - mean) * inv_std[r];
      normalized[r * d + j] = n;
      out[r * d + j] = gain.data()[j] * n + shift.data()[j];
    }
  }
  return Value::from_op(
      "layer_norm", std::move(out), {x, gain, shift},
      [rows, d, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& self) {
        const Tensor& gv = value_of(self, 1);
        if (Tensor* g = grad_of(self, 0)) {
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gn = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gn = self.grad[r * d + j] * gv[j];
              mean_g += gn;
              mean_gn += gn * normalized[r * d + j];
            }
            mean_g /= static_cast<double>(d);
            mean_gn /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double gn = self.grad[r * d + j] * gv[j];
              (*g)[r * d + j] += inv_std[r] * (gn - mean_g - normalized[r * d + j] * mean_gn);
            }
          }
        }
        if (Tensor* g = grad_of(self, 1)) {
          for (std::size_t i = 0; i < normalized.size(); ++i) (*g)[i % d] += self.grad[i] * normalized[i];
        }
        if (Tensor* g = grad_of(self, 2)) {
          for (std::size_t i = 0; i < normalized.size(); ++i) (*g)[i % d] += self.grad[i];
        }
      });
}

/// z / (||z||_F + eps).
inline Value frobenius_normalize(const Value& z, double eps = 1e-6) {
  const double norm = z.data().frobenius_norm();
  const double denom = norm + eps;
  Tensor out = z.data();
  for (double& x : out.storage()) x /= denom;
  return Value::from_op("frobenius_normalize", std::move(out), {z}, [norm, denom](Node& self) {
    const Tensor& zv = value_of(self, 0);
    if (Tensor* g = grad_of(self, 0)) {
      double dot = 0.0;
      for (std::size_t i = 0; i < zv.size(); ++i) dot += self.grad[i] * zv[i];
      const double radial = norm > 0.0 ? dot / (denom * denom * norm) : 0.0;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / denom - zv[i] * radial;
    }
  });
}

/// Row-wise softmax of a matrix.
inline Value softmax_rows(const Value& a) {
  detail::require_rank(a, 2, "softmax_rows");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = out(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, out(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out(i, j) = std::exp(out(i, j) - mx);
      s += out(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= s;
  }
  return Value::from_op("softmax_rows", std::move(out), {a}, [r, c](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += self.grad(i, j) * self.value(i, j);
        for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += self.value(i, j) * (self.grad(i, j) - dot);
      }
    }
  });
}

/// Mean over the batch of -log softmax(logits)[label].
inline Value softmax_cross_entropy(const Value& logits, std::span<const std::uint32_t> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  Tensor probs({b, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) {
      throw InputError("label " + std::to_string(labels[i]) + " out of range for " +
                       std::to_string(c) + " classes");
    }
    double mx = logits.data()(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.data()(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs(i, j) = std::exp(logits.data()(i, j) - mx);
      s += probs(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) probs(i, j) /= s;
    loss += std::log(s) + mx - logits.data()(i, labels[i]);
  }
  loss /= static_cast<double>(b);
  std::vector<std::uint32_t> held(labels.begin(), labels.end());
  return Value::from_op("softmax_cross_entropy", Tensor::scalar(loss), {logits},
                        [probs = std::move(probs), held = std::move(held), b, c](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      const double k = self.grad[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j)
          (*g)(i, j) += k * (probs(i, j) - (j == held[i] ? 1.0 : 0.0));
    }
  });
}

}  // namespace mp
