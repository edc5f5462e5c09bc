#include "rtal/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rtal/errors.hpp"
#include "rtal/tape.hpp"

namespace rtal {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " + to_string(b.dtype()));
  }
}

bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.begin(), tail.end(), whole.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

void require_suffix(const Tensor& a, const Tensor& b, const char* op) {
  require_same_dtype(a, b, op);
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": shape " + to_string(b.shape()) + " does not broadcast onto " +
                     to_string(a.shape()) + " (only leading batch dims broadcast)");
  }
}

Shape row_major_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// ---------------------------------------------------------------- matmul

template <class T>
Tensor matmul_impl(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + to_string(as) + " and " + to_string(bs));
  }
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t kb = bs[bs.size() - 2];
  const std::size_t n = bs.back();
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ (" + to_string(as) + " x " + to_string(bs) + ")");
  }
  const bool shared = bs.size() == 2;
  if (!shared && (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    throw ShapeError("matmul: batch dimensions differ (" + to_string(as) + " x " + to_string(bs) + ")");
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape os(as.begin(), as.end() - 1);
  os.push_back(n);
  Tensor out(os, a.dtype());
  const auto ad = a.values<T>();
  const auto bd = b.values<T>();
  auto od = out.mutable_values<T>();
  const auto rows = static_cast<Eigen::Index>(m);
  const auto inner = static_cast<Eigen::Index>(k);
  const auto cols = static_cast<Eigen::Index>(n);
  if (shared) {
    const auto all_rows = static_cast<Eigen::Index>(batch * m);
    MutMap<T>(od.data(), all_rows, cols).noalias() = ConstMap<T>(ad.data(), all_rows, inner) * ConstMap<T>(bd.data(), inner, cols);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap<T>(od.data() + i * m * n, rows, cols).noalias() =
          ConstMap<T>(ad.data() + i * m * k, rows, inner) * ConstMap<T>(bd.data() + i * k * n, inner, cols);
    }
  }
  return record_op(out, {a, b}, [a, b, batch, m, k, n, shared](const Tensor& o) {
    const auto g = o.grad_values<T>();
    const auto rows = static_cast<Eigen::Index>(m);
    const auto inner = static_cast<Eigen::Index>(k);
    const auto cols = static_cast<Eigen::Index>(n);
    if (a.requires_grad()) {
      Tensor ta = a;
      auto ga = ta.mutable_grad<T>();
      const auto bd = b.values<T>();
      if (shared) {
        const auto all_rows = static_cast<Eigen::Index>(batch * m);
        MutMap<T>(ga.data(), all_rows, inner).noalias() +=
            ConstMap<T>(g.data(), all_rows, cols) * ConstMap<T>(bd.data(), inner, cols).transpose();
      } else {
        for (std::size_t i = 0; i < batch; ++i) {
          MutMap<T>(ga.data() + i * m * k, rows, inner).noalias() +=
              ConstMap<T>(g.data() + i * m * n, rows, cols) * ConstMap<T>(bd.data() + i * k * n, inner, cols).transpose();
        }
      }
    }
    if (b.requires_grad()) {
      Tensor tb = b;
      auto gb = tb.mutable_grad<T>();
      const auto ad = a.values<T>();
      if (shared) {
        const auto all_rows = static_cast<Eigen::Index>(batch * m);
        MutMap<T>(gb.data(), inner, cols).noalias() +=
            ConstMap<T>(ad.data(), all_rows, inner).transpose() * ConstMap<T>(g.data(), all_rows, cols);
      } else {
        for (std::size_t i = 0; i < batch; ++i) {
          MutMap<T>(gb.data() + i * k * n, inner, cols).noalias() +=
              ConstMap<T>(ad.data() + i * m * k, rows, inner).transpose() * ConstMap<T>(g.data() + i * m * n, rows, cols);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor add_impl(const Tensor& a, const Tensor& b) {
  Tensor out(a.shape(), a.dtype());
  const auto ad = a.values<T>();
  const auto bd = b.values<T>();
  auto od = out.mutable_values<T>();
  const std::size_t m = bd.size();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i % m];
  return record_op(out, {a, b}, [a, b](const Tensor& o) {
    const auto g = o.grad_values<T>();
    accumulate_grad<T>(a, g);
    if (b.requires_grad()) {
      Tensor tb = b;
      auto gb = tb.mutable_grad<T>();
      const std::size_t m = gb.size();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % m] += g[i];
    }
  });
}

template <class T>
Tensor mul_impl(const Tensor& a, const Tensor& b) {
  Tensor out(a.shape(), a.dtype());
  const auto ad = a.values<T>();
  const auto bd = b.values<T>();
  auto od = out.mutable_values<T>();
  const std::size_t m = bd.size();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i % m];
  return record_op(out, {a, b}, [a, b](const Tensor& o) {
    const auto g = o.grad_values<T>();
    const auto ad = a.values<T>();
    const auto bd = b.values<T>();
    const std::size_t m = bd.size();
    if (a.requires_grad()) {
      Tensor ta = a;
      auto ga = ta.mutable_grad<T>();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i % m];
    }
    if (b.requires_grad()) {
      Tensor tb = b;
      auto gb = tb.mutable_grad<T>();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % m] += g[i] * ad[i];
    }
  });
}

template <class T>
Tensor scale_impl(const Tensor& a, double s) {
  Tensor out(a.shape(), a.dtype());
  const auto ad = a.values<T>();
  auto od = out.mutable_values<T>();
  const T factor = static_cast<T>(s);
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * factor;
  return record_op(out, {a}, [a, factor](const Tensor& o) {
    const auto g = o.grad_values<T>();
    Tensor ta = a;
    auto ga = ta.mutable_grad<T>();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <class T>
Tensor scale_by_impl(const Tensor& a, const Tensor& s) {
  Tensor out(a.shape(), a.dtype());
  const auto ad = a.values<T>();
  const T factor = s.values<T>()[0];
  auto od = out.mutable_values<T>();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * factor;
  return record_op(out, {a, s}, [a, s](const Tensor& o) {
    const auto g = o.grad_values<T>();
    const T factor = s.values<T>()[0];
    if (a.requires_grad()) {
      Tensor ta = a;
      auto ga = ta.mutable_grad<T>();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    }
    if (s.requires_grad()) {
      const auto ad = a.values<T>();
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * ad[i];
      Tensor ts = s;
      ts.mutable_grad<T>()[0] += acc;
    }
  });
}

template <class T>
Tensor relu_impl(const Tensor& a) {
  Tensor out(a.shape(), a.dtype());
  const auto ad = a.values<T>();
  auto od = out.mutable_values<T>();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] > T(0) ? ad[i] : T(0);
  return record_op(out, {a}, [a](const Tensor& o) {
    const auto g = o.grad_values<T>();
    const auto ad = a.values<T>();
    Tensor ta = a;
    auto ga = ta.mutable_grad<T>();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ad[i] > T(0)) ga[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------- structural

template <class T>
Tensor concat_impl(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.empty() || as.size() != bs.size() || !std::equal(as.begin(), as.end() - 1, bs.begin())) {
    throw ShapeError("concat_last_dim: shapes " + to_string(as) + " and " + to_string(bs) +
                     " must agree on all but the last dim");
  }
  const std::size_t da = as.back();
  const std::size_t db = bs.back();
  const std::size_t rows = a.numel() / da;
  Shape os = as;
  os.back() = da + db;
  Tensor out(os, a.dtype());
  const auto ad = a.values<T>();
  const auto bd = b.values<T>();
  auto od = out.mutable_values<T>();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ad.begin() + r * da, da, od.begin() + r * (da + db));
    std::copy_n(bd.begin() + r * db, db, od.begin() + r * (da + db) + da);
  }
  return record_op(out, {a, b}, [a, b, rows, da, db](const Tensor& o) {
    const auto g = o.grad_values<T>();
    if (a.requires_grad()) {
      Tensor ta = a;
      auto ga = ta.mutable_grad<T>();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < da; ++j) ga[r * da + j] += g[r * (da + db) + j];
    }
    if (b.requires_grad()) {
      Tensor tb = b;
      auto gb = tb.mutable_grad<T>();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < db; ++j) gb[r * db + j] += g[r * (da + db) + da + j];
    }
  });
}

template <class T>
Tensor embedding_impl(const Tensor& table, std::span<const int> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be [vocab, d], got " + to_string(table.shape()));
  if (numel(ids_shape) != ids.size()) {
    throw ShapeError("embedding_lookup: " + std::to_string(ids.size()) + " ids do not fill shape " + to_string(ids_shape));
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding_lookup: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  Shape os = ids_shape;
  os.push_back(d);
  Tensor out(os, table.dtype());
  const auto td = table.values<T>();
  auto od = out.mutable_values<T>();
  for (std::size_t i = 0; i < ids.size(); ++i) std::copy_n(td.begin() + static_cast<std::size_t>(ids[i]) * d, d, od.begin() + i * d);
  std::vector<int> saved(ids.begin(), ids.end());
  return record_op(out, {table}, [table, saved = std::move(saved), d](const Tensor& o) {
    const auto g = o.grad_values<T>();
    Tensor tt = table;
    auto gt = tt.mutable_grad<T>();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      const std::size_t row = static_cast<std::size_t>(saved[i]) * d;
      for (std::size_t j = 0; j < d; ++j) gt[row + j] += g[i * d + j];
    }
  });
}

template <class T>
Tensor permute_impl(const Tensor& a, std::span<const std::size_t> order) {
  const Shape& as = a.shape();
  const std::size_t r = as.size();
  if (order.size() != r) throw ShapeError("permute: order has " + std::to_string(order.size()) + " axes for rank " + std::to_string(r));
  std::vector<bool> seen(r, false);
  for (std::size_t ax : order) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: order is not a permutation of the axes");
    seen[ax] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = as[order[i]];
  const Shape in_strides = row_major_strides(as);
  Tensor out(os, a.dtype());
  const std::size_t n = a.numel();
  // source[i] = input offset of output element i
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < r; ++k) off += idx[k] * in_strides[order[k]];
    source[i] = off;
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < os[k]) break;
      idx[k] = 0;
    }
  }
  const auto ad = a.values<T>();
  auto od = out.mutable_values<T>();
  for (std::size_t i = 0; i < n; ++i) od[i] = ad[source[i]];
  return record_op(out, {a}, [a, source = std::move(source)](const Tensor& o) {
    const auto g = o.grad_values<T>();
    Tensor ta = a;
    auto ga = ta.mutable_grad<T>();
    for (std::size_t i = 0; i < g.size(); ++i) ga[source[i]] += g[i];
  });
}

template <class T>
Tensor reshape_impl(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), a.dtype());
  const auto ad = a.values<T>();
  std::copy(ad.begin(), ad.end(), out.mutable_values<T>().begin());
  return record_op(out, {a}, [a](const Tensor& o) { accumulate_grad<T>(a, o.grad_values<T>()); });
}

template <class T>
Tensor slice_impl(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& as = a.shape();
  if (axis >= as.size()) throw IndexError("slice: axis " + std::to_string(axis) + " out of range");
  if (begin >= end || end > as[axis]) {
    throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for extent " +
                     std::to_string(as[axis]));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  const std::size_t extent = as[axis];
  const std::size_t len = end - begin;
  Shape os = as;
  os[axis] = len;
  Tensor out(os, a.dtype());
  const auto ad = a.values<T>();
  auto od = out.mutable_values<T>();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(ad.begin() + (o * extent + begin) * inner, len * inner, od.begin() + o * len * inner);
  return record_op(out, {a}, [a, outer, inner, extent, begin, len](const Tensor& o) {
    const auto g = o.grad_values<T>();
    Tensor ta = a;
    auto ga = ta.mutable_grad<T>();
    for (std::size_t q = 0; q < outer; ++q)
      for (std::size_t j = 0; j < len * inner; ++j) ga[(q * extent + begin) * inner + j] += g[q * len * inner + j];
  });
}

template <class T>
Tensor sum_impl(const Tensor& a) {
  Tensor out(Shape{}, a.dtype());
  T acc = 0;
  for (T v : a.values<T>()) acc += v;
  out.mutable_values<T>()[0] = acc;
  return record_op(out, {a}, [a](const Tensor& o) {
    const T g = o.grad_values<T>()[0];
    Tensor ta = a;
    for (T& v : ta.mutable_grad<T>()) v += g;
  });
}

// ---------------------------------------------------------------- softmax

// Offset into mask.visible of the first element of each last-dim row, plus the
// stride along the last dim (0 when broadcast).
struct MaskRows {
  std::vector<std::size_t> row_offset;
  std::size_t col_stride = 0;
};

MaskRows mask_rows(const Mask& mask, const Shape& xs) {
  if (mask.shape.size() != xs.size()) {
    throw ShapeError("mask rank " + std::to_string(mask.shape.size()) + " differs from tensor rank " +
                     std::to_string(xs.size()));
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (mask.shape[i] != xs[i] && mask.shape[i] != 1) {
      throw ShapeError("mask shape " + to_string(mask.shape) + " does not broadcast to " + to_string(xs));
    }
  }
  const Shape ms = row_major_strides(mask.shape);
  const std::size_t r = xs.size();
  const std::size_t rows = numel(xs) / xs.back();
  MaskRows out;
  out.col_stride = mask.shape.back() == 1 ? 0 : 1;
  out.row_offset.resize(rows);
  std::vector<std::size_t> idx(r - 1, 0);
  for (std::size_t row = 0; row < rows; ++row) {
    std::size_t off = 0;
    for (std::size_t k = 0; k + 1 < r; ++k) {
      if (mask.shape[k] != 1) off += idx[k] * ms[k];
    }
    out.row_offset[row] = off;
    for (std::size_t k = r - 1; k-- > 0;) {
      if (++idx[k] < xs[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

template <class T>
Tensor softmax_impl(const Tensor& x, const Mask* mask) {
  if (x.rank() == 0) throw ShapeError("softmax_last_dim: needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  MaskRows mr;
  if (mask != nullptr) mr = mask_rows(*mask, x.shape());
  Tensor out(x.shape(), x.dtype());
  const auto xd = x.values<T>();
  auto od = out.mutable_values<T>();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * n;
    T* o = od.data() + r * n;
    auto visible = [&](std::size_t j) {
      return mask == nullptr || mask->visible[mr.row_offset[r] + j * mr.col_stride] != 0;
    };
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (visible(j)) {
        mx = std::max(mx, in[j]);
        any = true;
      }
    }
    if (!any) throw NumericalError("softmax_last_dim: row " + std::to_string(r) + " is fully masked");
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = visible(j) ? std::exp(in[j] - mx) : T(0);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return record_op(out, {x}, [x, n, rows](const Tensor& o) {
    const auto g = o.grad_values<T>();
    const auto y = o.values<T>();
    Tensor tx = x;
    auto gx = tx.mutable_grad<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

template <class T>
Tensor log_softmax_impl(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax_last_dim: needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape(), x.dtype());
  const auto xd = x.values<T>();
  auto od = out.mutable_values<T>();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) od[r * n + j] = in[j] - lse;
  }
  return record_op(out, {x}, [x, n, rows](const Tensor& o) {
    const auto g = o.grad_values<T>();
    const auto y = o.values<T>();
    Tensor tx = x;
    auto gx = tx.mutable_grad<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      T gsum = 0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gsum;
    }
  });
}

// ---------------------------------------------------------------- layer norm

template <class T>
Tensor layer_norm_impl(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta_shift must be [" + std::to_string(d) + "], got " +
                     to_string(gamma.shape()) + " and " + to_string(beta.shape()));
  }
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape(), x.dtype());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const auto xd = x.values<T>();
  const auto gd = gamma.values<T>();
  const auto bd = beta.values<T>();
  auto od = out.mutable_values<T>();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mean) * rs;
      xhat[r * d + j] = h;
      od[r * d + j] = gd[j] * h + bd[j];
    }
  }
  return record_op(out, {x, gamma, beta},
                   [x, gamma, beta, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](const Tensor& o) {
                     const auto g = o.grad_values<T>();
                     const auto gd = gamma.values<T>();
                     if (gamma.requires_grad()) {
                       Tensor t = gamma;
                       auto gg = t.mutable_grad<T>();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
                     }
                     if (beta.requires_grad()) {
                       Tensor t = beta;
                       auto gb = t.mutable_grad<T>();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                     }
                     if (x.requires_grad()) {
                       Tensor t = x;
                       auto gx = t.mutable_grad<T>();
                       for (std::size_t r = 0; r < rows; ++r) {
                         T mean_dh = 0;
                         T mean_dh_h = 0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const T dh = g[r * d + j] * gd[j];
                           mean_dh += dh;
                           mean_dh_h += dh * xhat[r * d + j];
                         }
                         mean_dh /= static_cast<T>(d);
                         mean_dh_h /= static_cast<T>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           const T dh = g[r * d + j] * gd[j];
                           gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                         }
                       }
                     }
                   });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  return visit_dtype(a.dtype(), [&]<class T>() { return matmul_impl<T>(a, b); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_suffix(a, b, "add");
  return visit_dtype(a.dtype(), [&]<class T>() { return add_impl<T>(a, b); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_suffix(a, b, "mul");
  return visit_dtype(a.dtype(), [&]<class T>() { return mul_impl<T>(a, b); });
}

Tensor scale(const Tensor& a, double s) {
  return visit_dtype(a.dtype(), [&]<class T>() { return scale_impl<T>(a, s); });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  require_same_dtype(a, s, "scale_by");
  if (s.numel() != 1) throw ShapeError("scale_by: factor must have one element, shape is " + to_string(s.shape()));
  return visit_dtype(a.dtype(), [&]<class T>() { return scale_by_impl<T>(a, s); });
}

Tensor relu(const Tensor& a) {
  return visit_dtype(a.dtype(), [&]<class T>() { return relu_impl<T>(a); });
}

Tensor concat_last_dim(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "concat_last_dim");
  return visit_dtype(a.dtype(), [&]<class T>() { return concat_impl<T>(a, b); });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids, const Shape& ids_shape) {
  return visit_dtype(table.dtype(), [&]<class T>() { return embedding_impl<T>(table, ids, ids_shape); });
}

Tensor permute(const Tensor& a, std::span<const std::size_t> order) {
  return visit_dtype(a.dtype(), [&]<class T>() { return permute_impl<T>(a, order); });
}

Tensor transpose_last_two(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last_two: needs rank >= 2, got " + to_string(a.shape()));
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(a, order);
}

Tensor reshape(const Tensor& a, Shape shape) {
  return visit_dtype(a.dtype(), [&]<class T>() { return reshape_impl<T>(a, std::move(shape)); });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  return visit_dtype(a.dtype(), [&]<class T>() { return slice_impl<T>(a, axis, begin, end); });
}

Tensor sum(const Tensor& a) {
  return visit_dtype(a.dtype(), [&]<class T>() { return sum_impl<T>(a); });
}

Tensor softmax_last_dim(const Tensor& x, const Mask* mask) {
  return visit_dtype(x.dtype(), [&]<class T>() { return softmax_impl<T>(x, mask); });
}

Tensor log_softmax_last_dim(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() { return log_softmax_impl<T>(x); });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta_shift, double eps) {
  require_same_dtype(x, gamma, "layer_norm");
  require_same_dtype(x, beta_shift, "layer_norm");
  return visit_dtype(x.dtype(), [&]<class T>() { return layer_norm_impl<T>(x, gamma, beta_shift, eps); });
}

}  // namespace rtal
