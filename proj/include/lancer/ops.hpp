#pragma once

// Differentiable primitives over Tensor<T>. Shapes are checked eagerly and
// reported as dimension errors naming the offending operands.

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "lancer/tensor.hpp"

namespace lancer {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
CMapMat<T> view(const std::vector<T>& v, std::size_t r, std::size_t c) {
  return CMapMat<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
MapMat<T> view(std::vector<T>& v, std::size_t r, std::size_t c) {
  return MapMat<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <class T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) fail(ErrorKind::dimension, std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

template <class T>
std::vector<T>* grad_of(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    fail(ErrorKind::dimension, "matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  detail::view(out, m, n).noalias() = detail::view(*a.node().data, m, k) * detail::view(*b.node().data, k, n);
  return Tensor<T>::make_result({m, n}, std::move(out), {a.node_ptr(), b.node_ptr()}, [m, k, n](Node<T>& self) {
    auto G = detail::view(std::as_const(self.grad), m, n);
    const auto& A = *self.parents[0]->data;
    const auto& B = *self.parents[1]->data;
    if (auto* ga = detail::grad_of(self, 0)) detail::view(*ga, m, k).noalias() += G * detail::view(B, k, n).transpose();
    if (auto* gb = detail::grad_of(self, 1)) detail::view(*gb, k, n).noalias() += detail::view(A, m, k).transpose() * G;
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m * n);
  detail::view(out, n, m) = detail::view(*a.node().data, m, n).transpose();
  return Tensor<T>::make_result({n, m}, std::move(out), {a.node_ptr()}, [m, n](Node<T>& self) {
    if (auto* ga = detail::grad_of(self, 0))
      detail::view(*ga, m, n) += detail::view(std::as_const(self.grad), n, m).transpose();
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail(ErrorKind::dimension, "add shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  const auto &x = *a.node().data, &y = *b.node().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = detail::grad_of(self, p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail(ErrorKind::dimension, "mul shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  const auto &x = *a.node().data, &y = *b.node().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
    const auto& x = *self.parents[0]->data;
    const auto& y = *self.parents[1]->data;
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * y[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * x[i];
  });
}

/// a[m×n] + b broadcast over rows; b holds n values.
template <class T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "add_row");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (b.size() != n)
    fail(ErrorKind::dimension, "add_row bias " + shape_str(b.shape()) + " does not match " + shape_str(a.shape()));
  std::vector<T> out(*a.node().data);
  const auto& bias = *b.node().data;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias[c];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [m, n](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) (*g)[c] += self.grad[r * n + c];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, std::type_identity_t<T> s) {
  std::vector<T> out(*a.node().data);
  for (auto& v : out) v *= s;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node_ptr()}, [s](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const auto& x = *a.node().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  auto result = Tensor<T>::make_result(a.shape(), std::move(out), {a.node_ptr()}, nullptr);
  if (result.requires_grad()) {
    auto y = result.node().data;  // shared, no cycle: data is not the node
    result.node().backward_fn = [y](Node<T>& self) {
      if (auto* g = detail::grad_of(self, 0))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (T(1) - (*y)[i] * (*y)[i]);
    };
  }
  return result;
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = T(0.044715);
  const auto n = static_cast<Eigen::Index>(a.size());
  Eigen::Map<const Arr> x(a.values().data(), n);
  auto th = std::make_shared<std::vector<T>>(a.size());
  Eigen::Map<Arr> t(th->data(), n);
  t = (c * (x + k * x.cube())).tanh();
  std::vector<T> out(a.size());
  Eigen::Map<Arr>(out.data(), n) = T(0.5) * x * (T(1) + t);
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node_ptr()}, [th, n](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    Eigen::Map<const Arr> x(self.parents[0]->data->data(), n);
    Eigen::Map<const Arr> t(th->data(), n);
    Eigen::Map<const Arr> up(self.grad.data(), n);
    Eigen::Map<Arr>(g->data(), n) +=
        up * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x));
  });
}

/// Row-wise layer normalization with learned gain and shift.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     std::type_identity_t<T> eps = T(1e-5)) {
  detail::require_2d(x, "layer_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (gain.size() != n || shift.size() != n)
    fail(ErrorKind::dimension, "layer_norm parameters do not match " + shape_str(x.shape()));
  const auto& xv = *x.node().data;
  const auto& gv = *gain.node().data;
  const auto& bv = *shift.node().data;
  std::vector<T> out(m * n);
  auto xhat = std::make_shared<std::vector<T>>(m * n);
  auto inv_std = std::make_shared<std::vector<T>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = &xv[r * n];
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(n);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      T h = (row[c] - mean) * is;
      (*xhat)[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr(), shift.node_ptr()},
      [m, n, xhat, inv_std](Node<T>& self) {
        const auto& gv = *self.parents[1]->data;
        const auto& G = self.grad;
        if (auto* gg = detail::grad_of(self, 1))
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) (*gg)[c] += G[r * n + c] * (*xhat)[r * n + c];
        if (auto* gb = detail::grad_of(self, 2))
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) (*gb)[c] += G[r * n + c];
        if (auto* gx = detail::grad_of(self, 0)) {
          for (std::size_t r = 0; r < m; ++r) {
            T sum_d = 0, sum_dh = 0;
            for (std::size_t c = 0; c < n; ++c) {
              T d = G[r * n + c] * gv[c];
              sum_d += d;
              sum_dh += d * (*xhat)[r * n + c];
            }
            T is = (*inv_std)[r];
            for (std::size_t c = 0; c < n; ++c) {
              T d = G[r * n + c] * gv[c];
              (*gx)[r * n + c] += is * (d - sum_d / T(n) - (*xhat)[r * n + c] * sum_dh / T(n));
            }
          }
        }
      });
}

/// Gathers rows of table[V×d] for each id.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  detail::require_2d(table, "embedding");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) fail(ErrorKind::empty, "embedding lookup of an empty id list");
  std::vector<T> out(ids.size() * d);
  const auto& tv = *table.node().data;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      fail(ErrorKind::index, "token id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
    std::copy_n(&tv[static_cast<std::size_t>(ids[i]) * d], d, &out[i * d]);
  }
  return Tensor<T>::make_result({ids.size(), d}, std::move(out), {table.node_ptr()}, [ids, d](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t c = 0; c < d; ++c) (*g)[static_cast<std::size_t>(ids[i]) * d + c] += self.grad[i * d + c];
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) fail(ErrorKind::empty, "concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != n)
      fail(ErrorKind::dimension, "concat_rows column mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    m += p.rows();
    parents.push_back(p.node_ptr());
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return Tensor<T>::make_result({m, n}, std::move(out), std::move(parents), [](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      std::size_t len = self.parents[p]->data->size();
      if (auto* g = detail::grad_of(self, p))
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[off + i];
      off += len;
    }
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) fail(ErrorKind::empty, "concat_cols of nothing");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != m)
      fail(ErrorKind::dimension, "concat_cols row mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    widths.push_back(p.cols());
    n += p.cols();
    parents.push_back(p.node_ptr());
  }
  std::vector<T> out(m * n);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& src = *parts[p].node().data;
    for (std::size_t r = 0; r < m; ++r) std::copy_n(&src[r * widths[p]], widths[p], &out[r * n + off]);
    off += widths[p];
  }
  return Tensor<T>::make_result({m, n}, std::move(out), std::move(parents), [m, n, widths](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (auto* g = detail::grad_of(self, p))
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < widths[p]; ++c) (*g)[r * widths[p] + c] += self.grad[r * n + off + c];
      off += widths[p];
    }
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
  detail::require_2d(a, "slice_rows");
  const std::size_t n = a.cols();
  if (count == 0 || start + count > a.rows())
    fail(ErrorKind::dimension, "slice_rows [" + std::to_string(start) + ", +" + std::to_string(count) +
                                   ") outside " + shape_str(a.shape()));
  const auto& src = *a.node().data;
  std::vector<T> out(src.begin() + static_cast<std::ptrdiff_t>(start * n),
                     src.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return Tensor<T>::make_result({count, n}, std::move(out), {a.node_ptr()}, [start, n](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[start * n + i] += self.grad[i];
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  detail::require_2d(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > n)
    fail(ErrorKind::dimension, "slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) +
                                   ") outside " + shape_str(a.shape()));
  const auto& src = *a.node().data;
  std::vector<T> out(m * count);
  for (std::size_t r = 0; r < m; ++r) std::copy_n(&src[r * n + start], count, &out[r * count]);
  return Tensor<T>::make_result({m, count}, std::move(out), {a.node_ptr()}, [m, n, start, count](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < count; ++c) (*g)[r * n + start + c] += self.grad[r * count + c];
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    fail(ErrorKind::dimension, "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<T> out(*a.node().data);
  return Tensor<T>::make_result(std::move(shape), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  return Tensor<T>::make_result({1}, {s}, {a.node_ptr()}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (auto& v : *g) v += self.grad[0];
  });
}

/// Softmax along `axis` of an arbitrary-rank tensor, max-subtracted.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    fail(ErrorKind::index, "softmax axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  std::size_t len = s[axis], inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  const auto& xv = *x.node().data;
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) z += (out[base + j * inner] = std::exp(xv[base + j * inner] - mx));
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  auto result = Tensor<T>::make_result(s, std::move(out), {x.node_ptr()}, nullptr);
  if (result.requires_grad()) {
    auto y = result.node().data;
    result.node().backward_fn = [y, len, inner, outer](Node<T>& self) {
      auto* g = detail::grad_of(self, 0);
      if (!g) return;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          std::size_t base = o * len * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * (*y)[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            std::size_t i = base + j * inner;
            (*g)[i] += (*y)[i] * (self.grad[i] - dot);
          }
        }
    };
  }
  return result;
}

/// Row softmax over a matrix where `allowed[i]` == 0 excludes an entry.
/// Excluded entries come out as exactly 0. Every row needs one allowed entry.
template <class T>
Tensor<T> masked_softmax_rows(const Tensor<T>& x, std::shared_ptr<const std::vector<unsigned char>> allowed) {
  detail::require_2d(x, "masked_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (allowed->size() != m * n) fail(ErrorKind::dimension, "mask does not match " + shape_str(x.shape()));
  const auto& xv = *x.node().data;
  std::vector<T> out(m * n, T(0));
  for (std::size_t r = 0; r < m; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if ((*allowed)[r * n + c]) mx = std::max(mx, xv[r * n + c]);
    if (!std::isfinite(mx)) fail(ErrorKind::data, "softmax row " + std::to_string(r) + " has no allowed entry");
    T z = 0;
    for (std::size_t c = 0; c < n; ++c)
      if ((*allowed)[r * n + c]) z += (out[r * n + c] = std::exp(xv[r * n + c] - mx));
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  auto result = Tensor<T>::make_result(x.shape(), std::move(out), {x.node_ptr()}, nullptr);
  if (result.requires_grad()) {
    auto y = result.node().data;
    result.node().backward_fn = [y, m, n](Node<T>& self) {
      auto* g = detail::grad_of(self, 0);
      if (!g) return;
      for (std::size_t r = 0; r < m; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += self.grad[r * n + c] * (*y)[r * n + c];
        for (std::size_t c = 0; c < n; ++c) (*g)[r * n + c] += (*y)[r * n + c] * (self.grad[r * n + c] - dot);
      }
    };
  }
  return result;
}

/// Scaled dot-product attention over `heads` column blocks.
/// q: R x d, k and v: K x d. `allowed` is R x K (1 = query may attend key).
/// Returns R x d, heads concatenated in column order.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               std::shared_ptr<const std::vector<unsigned char>> allowed) {
  detail::require_2d(q, "attention");
  detail::require_2d(k, "attention");
  detail::require_2d(v, "attention");
  const std::size_t r = q.rows(), d = q.cols(), kn = k.rows();
  if (k.cols() != d || v.cols() != d || v.rows() != kn)
    fail(ErrorKind::dimension, "attention operands " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                                   shape_str(v.shape()) + " disagree");
  if (heads == 0 || d % heads != 0) fail(ErrorKind::dimension, "attention width not divisible by head count");
  if (allowed->size() != r * kn) fail(ErrorKind::dimension, "attention mask does not match scores");
  using Mat = detail::RowMat<T>;
  const auto hd = static_cast<Eigen::Index>(d / heads);
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));
  auto Q = detail::view(*q.node().data, r, d);
  auto K = detail::view(*k.node().data, kn, d);
  auto V = detail::view(*v.node().data, kn, d);
  auto probs = std::make_shared<std::vector<Mat>>(heads);
  std::vector<T> out(r * d);
  auto O = detail::view(out, r, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * hd;
    Mat s = (Q.middleCols(off, hd) * K.middleCols(off, hd).transpose()) * sc;
    for (std::size_t i = 0; i < r; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < kn; ++j)
        if ((*allowed)[i * kn + j]) mx = std::max(mx, s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      if (!std::isfinite(mx)) fail(ErrorKind::data, "attention row " + std::to_string(i) + " sees no key");
      T z = 0;
      for (std::size_t j = 0; j < kn; ++j) {
        T& e = s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        e = (*allowed)[i * kn + j] ? std::exp(e - mx) : T(0);
        z += e;
      }
      s.row(static_cast<Eigen::Index>(i)) /= z;
    }
    O.middleCols(off, hd).noalias() = s * V.middleCols(off, hd);
    (*probs)[h] = std::move(s);
  }
  return Tensor<T>::make_result(
      {r, d}, std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()}, [probs, r, d, kn, hd, sc](Node<T>& self) {
        auto G = detail::view(std::as_const(self.grad), r, d);
        auto Q = detail::view(std::as_const(*self.parents[0]->data), r, d);
        auto K = detail::view(std::as_const(*self.parents[1]->data), kn, d);
        auto V = detail::view(std::as_const(*self.parents[2]->data), kn, d);
        auto* gq = detail::grad_of(self, 0);
        auto* gk = detail::grad_of(self, 1);
        auto* gv = detail::grad_of(self, 2);
        for (std::size_t h = 0; h < probs->size(); ++h) {
          const auto off = static_cast<Eigen::Index>(h) * hd;
          const Mat& P = (*probs)[h];
          auto Gh = G.middleCols(off, hd);
          if (gv) detail::view(*gv, kn, d).middleCols(off, hd).noalias() += P.transpose() * Gh;
          if (!gq && !gk) continue;
          Mat dp = Gh * V.middleCols(off, hd).transpose();
          Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.array() * P.array()).rowwise().sum();
          Mat ds = (P.array() * (dp.colwise() - rowdot).array()).matrix() * sc;
          if (gq) detail::view(*gq, r, d).middleCols(off, hd).noalias() += ds * K.middleCols(off, hd);
          if (gk) detail::view(*gk, kn, d).middleCols(off, hd).noalias() += ds.transpose() * Q.middleCols(off, hd);
        }
      });
}

/// Mean next-token negative log-likelihood over positions whose target is
/// not `ignore_id`.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets, int ignore_id) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), v = logits.cols();
  if (targets.size() != rows)
    fail(ErrorKind::dimension, "cross_entropy got " + std::to_string(targets.size()) + " targets for logits " +
                                   shape_str(logits.shape()));
  const auto& lv = *logits.node().data;
  auto probs = std::make_shared<std::vector<T>>(rows * v, T(0));
  std::size_t counted = 0;
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    int t = targets[r];
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      fail(ErrorKind::index, "target " + std::to_string(t) + " outside vocabulary of " + std::to_string(v));
    const T* row = &lv[r * v];
    T mx = *std::max_element(row, row + v);
    T z = 0;
    for (std::size_t c = 0; c < v; ++c) z += ((*probs)[r * v + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < v; ++c) (*probs)[r * v + c] /= z;
    total += static_cast<double>(std::log(z) + mx - row[t]);
    ++counted;
  }
  if (counted == 0) fail(ErrorKind::empty, "cross_entropy: every position is ignored");
  T loss = static_cast<T>(total / static_cast<double>(counted));
  return Tensor<T>::make_result({1}, {loss}, {logits.node_ptr()}, [probs, targets, ignore_id, v, counted](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    T w = self.grad[0] / T(counted);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] == ignore_id) continue;
      for (std::size_t c = 0; c < v; ++c) (*g)[r * v + c] += w * (*probs)[r * v + c];
      (*g)[r * v + static_cast<std::size_t>(targets[r])] -= w;
    }
  });
}

}  // namespace lancer
