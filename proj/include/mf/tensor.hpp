#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mf/errors.hpp"

namespace mf {

// Dense row-major tensor with reverse-mode gradient tracking. Tensor<T> is a
// cheap handle onto a shared node; operations build a DAG of nodes whose
// backprop closures push gradients from a node into its parents. Instantiated
// at float for training and double for gradient checking.
template <typename T>
struct TensorNode {
  std::vector<int> dims;
  std::vector<T> value;
  std::vector<T> grad;  // sized during backward(); empty otherwise
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;
};

namespace detail {

inline std::string dims_to_string(const std::vector<int>& dims) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << "x";
    os << dims[i];
  }
  os << "]";
  return os.str();
}

inline std::size_t checked_numel(const std::vector<int>& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + dims_to_string(dims));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(std::vector<int> dims, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    std::size_t count = detail::checked_numel(dims);
    n->dims = std::move(dims);
    n->value.assign(count, T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<int> dims, std::vector<T> data, bool requires_grad = false) {
    std::size_t count = detail::checked_numel(dims);
    if (count != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match dims " + detail::dims_to_string(dims));
    }
    auto n = std::make_shared<Node>();
    n->dims = std::move(dims);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool valid() const { return node_ != nullptr; }
  const std::vector<int>& dims() const { return node_->dims; }
  std::size_t numel() const { return node_->value.size(); }
  int rank() const { return static_cast<int>(node_->dims.size()); }

  // Row/column view of the leading two dims; rank-1 tensors are n x 1.
  int rows() const { return node_->dims.empty() ? 1 : node_->dims[0]; }
  int cols() const {
    if (node_->dims.size() < 2) return node_->dims.empty() ? 1 : 1;
    return node_->dims[1];
  }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  T& at(int i) { return node_->value[static_cast<std::size_t>(i)]; }
  const T& at(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
  T& at(int r, int c) { return node_->value[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const {
    return node_->value[static_cast<std::size_t>(r) * cols() + c];
  }
  T item() const {
    if (numel() != 1) throw ContractError("item(): tensor is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    if (v && node_->backprop) {
      throw ContractError("set_requires_grad: only leaf tensors can be toggled");
    }
    node_->requires_grad = v;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void ensure_grad() {
    if (node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), T(0));
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  bool all_finite() const {
    for (T v : node_->value) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  std::shared_ptr<Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(std::vector<int> dims, std::vector<T> value,
                  std::vector<std::shared_ptr<TensorNode<T>>> parents,
                  std::function<void(TensorNode<T>&)> backprop) {
  auto n = std::make_shared<TensorNode<T>>();
  n->dims = std::move(dims);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  n->parents = std::move(parents);
  if (rg) n->backprop = std::move(backprop);
  return Tensor<T>(std::move(n));
}

template <typename T>
void check_same_dims(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(op) + ": dims " + dims_to_string(a.dims()) + " vs " +
                     dims_to_string(b.dims()));
  }
}

template <typename T>
void check_matrix(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                     dims_to_string(a.dims()));
  }
}

template <typename T>
void check_finite(const Tensor<T>& a, const char* op) {
  if (!a.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value in input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and structural operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_dims(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_op<T>(
      a.dims(), std::move(out), {a.node(), b.node()}, [pa, pb](TensorNode<T>& self) {
        if (pa->requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        if (pb->requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_dims(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_op<T>(
      a.dims(), std::move(out), {a.node(), b.node()}, [pa, pb](TensorNode<T>& self) {
        if (pa->requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        if (pb->requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_dims(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_op<T>(
      a.dims(), std::move(out), {a.node(), b.node()}, [pa, pb](TensorNode<T>& self) {
        if (pa->requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * pb->value[i];
        if (pb->requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] += self.grad[i] * pa->value[i];
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  std::vector<T> out(a.numel());
  T ts = static_cast<T>(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * ts;
  auto* pa = a.node().get();
  return detail::make_op<T>(a.dims(), std::move(out), {a.node()}, [pa, ts](TensorNode<T>& self) {
    if (pa->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * ts;
  });
}

// Matrix (m x n) plus row vector (n), broadcast over rows. Bias-add path.
template <typename T>
Tensor<T> add_row_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a, "add_row_broadcast");
  if (b.rank() != 1 || b.dims()[0] != a.dims()[1]) {
    throw ShapeError("add_row_broadcast: row vector " + detail::dims_to_string(b.dims()) +
                     " does not match matrix " + detail::dims_to_string(a.dims()));
  }
  int m = a.dims()[0], n = a.dims()[1];
  std::vector<T> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] = a.at(i, j) + b.at(j);
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_op<T>(
      a.dims(), std::move(out), {a.node(), b.node()}, [pa, pb, m, n](TensorNode<T>& self) {
        if (pa->requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        if (pb->requires_grad)
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              pb->grad[static_cast<std::size_t>(j)] +=
                  self.grad[static_cast<std::size_t>(i) * n + j];
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a, "matmul");
  detail::check_matrix(b, "matmul");
  int m = a.dims()[0], k = a.dims()[1];
  int k2 = b.dims()[0], n = b.dims()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dims differ, " + detail::dims_to_string(a.dims()) + " x " +
                     detail::dims_to_string(b.dims()));
  }
  std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      T aip = av[static_cast<std::size_t>(i) * k + p];
      const T* brow = bv + static_cast<std::size_t>(p) * n;
      T* orow = out.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_op<T>(
      {m, n}, std::move(out), {a.node(), b.node()}, [pa, pb, m, k, n](TensorNode<T>& self) {
        // dA = dC * B^T, dB = A^T * dC
        if (pa->requires_grad) {
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              T acc = T(0);
              for (int j = 0; j < n; ++j)
                acc += self.grad[static_cast<std::size_t>(i) * n + j] *
                       pb->value[static_cast<std::size_t>(p) * n + j];
              pa->grad[static_cast<std::size_t>(i) * k + p] += acc;
            }
        }
        if (pb->requires_grad) {
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              T aip = pa->value[static_cast<std::size_t>(i) * k + p];
              for (int j = 0; j < n; ++j)
                pb->grad[static_cast<std::size_t>(p) * n + j] +=
                    aip * self.grad[static_cast<std::size_t>(i) * n + j];
            }
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::check_matrix(a, "transpose");
  int m = a.dims()[0], n = a.dims()[1];
  std::vector<T> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = a.at(i, j);
  auto* pa = a.node().get();
  return detail::make_op<T>({n, m}, std::move(out), {a.node()}, [pa, m, n](TensorNode<T>& self) {
    if (!pa->requires_grad) return;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        pa->grad[static_cast<std::size_t>(i) * n + j] +=
            self.grad[static_cast<std::size_t>(j) * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> dims) {
  std::size_t count = detail::checked_numel(dims);
  if (count != a.numel()) {
    throw ShapeError("reshape: cannot view " + detail::dims_to_string(a.dims()) + " as " +
                     detail::dims_to_string(dims));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  auto* pa = a.node().get();
  return detail::make_op<T>(std::move(dims), std::move(out), {a.node()},
                            [pa](TensorNode<T>& self) {
                              if (!pa->requires_grad) return;
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                pa->grad[i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  int n = parts[0].rank() == 2 ? parts[0].dims()[1] : 0;
  int m = 0;
  for (const auto& p : parts) {
    detail::check_matrix(p, "concat_rows");
    if (p.dims()[1] != n) {
      throw ShapeError("concat_rows: column mismatch " + detail::dims_to_string(p.dims()));
    }
    m += p.dims()[0];
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(m) * n);
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node());
  }
  std::vector<TensorNode<T>*> raw;
  for (const auto& p : parents) raw.push_back(p.get());
  return detail::make_op<T>({m, n}, std::move(out), std::move(parents),
                            [raw, n](TensorNode<T>& self) {
                              std::size_t offset = 0;
                              for (auto* p : raw) {
                                std::size_t count = p->value.size();
                                if (p->requires_grad)
                                  for (std::size_t i = 0; i < count; ++i)
                                    p->grad[i] += self.grad[offset + i];
                                offset += count;
                              }
                              (void)n;
                            });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int row_begin, int row_end) {
  detail::check_matrix(a, "slice_rows");
  int m = a.dims()[0], n = a.dims()[1];
  if (row_begin < 0 || row_end > m || row_begin >= row_end) {
    throw ShapeError("slice_rows: rows [" + std::to_string(row_begin) + ", " +
                     std::to_string(row_end) + ") out of range for " +
                     detail::dims_to_string(a.dims()));
  }
  int rows = row_end - row_begin;
  std::vector<T> out(a.values().begin() + static_cast<std::size_t>(row_begin) * n,
                     a.values().begin() + static_cast<std::size_t>(row_end) * n);
  auto* pa = a.node().get();
  return detail::make_op<T>({rows, n}, std::move(out), {a.node()},
                            [pa, row_begin, n](TensorNode<T>& self) {
                              if (!pa->requires_grad) return;
                              std::size_t base = static_cast<std::size_t>(row_begin) * n;
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                pa->grad[base + i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int col_begin, int col_end) {
  detail::check_matrix(a, "slice_cols");
  int m = a.dims()[0], n = a.dims()[1];
  if (col_begin < 0 || col_end > n || col_begin >= col_end) {
    throw ShapeError("slice_cols: cols [" + std::to_string(col_begin) + ", " +
                     std::to_string(col_end) + ") out of range for " +
                     detail::dims_to_string(a.dims()));
  }
  int cols = col_end - col_begin;
  std::vector<T> out(static_cast<std::size_t>(m) * cols);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<std::size_t>(i) * cols + j] = a.at(i, col_begin + j);
  auto* pa = a.node().get();
  return detail::make_op<T>({m, cols}, std::move(out), {a.node()},
                            [pa, m, n, col_begin, cols](TensorNode<T>& self) {
                              if (!pa->requires_grad) return;
                              for (int i = 0; i < m; ++i)
                                for (int j = 0; j < cols; ++j)
                                  pa->grad[static_cast<std::size_t>(i) * n + col_begin + j] +=
                                      self.grad[static_cast<std::size_t>(i) * cols + j];
                            });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  int m = parts[0].rank() == 2 ? parts[0].dims()[0] : 0;
  int n = 0;
  for (const auto& p : parts) {
    detail::check_matrix(p, "concat_cols");
    if (p.dims()[0] != m) {
      throw ShapeError("concat_cols: row mismatch " + detail::dims_to_string(p.dims()));
    }
    n += p.dims()[1];
  }
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::vector<std::pair<TensorNode<T>*, int>> raw;  // node, col offset
  int offset = 0;
  for (const auto& p : parts) {
    int pc = p.dims()[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < pc; ++j)
        out[static_cast<std::size_t>(i) * n + offset + j] = p.at(i, j);
    parents.push_back(p.node());
    raw.emplace_back(p.node().get(), offset);
    offset += pc;
  }
  return detail::make_op<T>({m, n}, std::move(out), std::move(parents),
                            [raw, m, n](TensorNode<T>& self) {
                              for (auto [p, off] : raw) {
                                if (!p->requires_grad) continue;
                                int pc = p->dims[1];
                                for (int i = 0; i < m; ++i)
                                  for (int j = 0; j < pc; ++j)
                                    p->grad[static_cast<std::size_t>(i) * pc + j] +=
                                        self.grad[static_cast<std::size_t>(i) * n + off + j];
                              }
                            });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  auto* pa = a.node().get();
  return detail::make_op<T>({1}, {s}, {a.node()}, [pa](TensorNode<T>& self) {
    if (!pa->requires_grad) return;
    for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.values()[i]);
  auto* pa = a.node().get();
  return detail::make_op<T>(a.dims(), std::move(out), {a.node()}, [pa](TensorNode<T>& self) {
    if (!pa->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      T x = pa->value[i];
      T sign = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
      pa->grad[i] += self.grad[i] * sign;
    }
  });
}

// x * Phi(x) with the exact Gaussian CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = static_cast<double>(a.values()[i]);
    double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    out[i] = static_cast<T>(x * phi);
  }
  auto* pa = a.node().get();
  return detail::make_op<T>(a.dims(), std::move(out), {a.node()}, [pa](TensorNode<T>& self) {
    if (!pa->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double x = static_cast<double>(pa->value[i]);
      double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      pa->grad[i] += self.grad[i] * static_cast<T>(phi + x * pdf);
    }
  });
}

// Per-row normalization over the last dim of a matrix, then affine gamma/beta.
// Uses the biased variance, matching the usual layer norm definition.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  detail::check_matrix(x, "layer_norm");
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  int m = x.dims()[0], d = x.dims()[1];
  if (gamma.rank() != 1 || gamma.dims()[0] != d || beta.rank() != 1 || beta.dims()[0] != d) {
    throw ShapeError("layer_norm: gamma/beta must have length " + std::to_string(d));
  }
  detail::check_finite(x, "layer_norm");
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += static_cast<double>(x.at(i, j));
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = static_cast<double>(x.at(i, j)) - mean;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = static_cast<T>(is);
    for (int j = 0; j < d; ++j) {
      std::size_t idx = static_cast<std::size_t>(i) * d + j;
      double xh = (static_cast<double>(x.at(i, j)) - mean) * is;
      xhat[idx] = static_cast<T>(xh);
      out[idx] = static_cast<T>(xh * static_cast<double>(gamma.at(j)) +
                                static_cast<double>(beta.at(j)));
    }
  }
  auto* px = x.node().get();
  auto* pg = gamma.node().get();
  auto* pb = beta.node().get();
  return detail::make_op<T>(
      x.dims(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [px, pg, pb, m, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](TensorNode<T>& self) {
        for (int i = 0; i < m; ++i) {
          std::size_t base = static_cast<std::size_t>(i) * d;
          if (pg->requires_grad || pb->requires_grad) {
            for (int j = 0; j < d; ++j) {
              T g = self.grad[base + j];
              if (pg->requires_grad) pg->grad[static_cast<std::size_t>(j)] += g * xhat[base + j];
              if (pb->requires_grad) pb->grad[static_cast<std::size_t>(j)] += g;
            }
          }
          if (px->requires_grad) {
            // dxhat = dy * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) / std
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (int j = 0; j < d; ++j) {
              double dxh = static_cast<double>(self.grad[base + j]) *
                           static_cast<double>(pg->value[static_cast<std::size_t>(j)]);
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * static_cast<double>(xhat[base + j]);
            }
            mean_dxhat /= d;
            mean_dxhat_xhat /= d;
            double is = static_cast<double>(inv_std[static_cast<std::size_t>(i)]);
            for (int j = 0; j < d; ++j) {
              double dxh = static_cast<double>(self.grad[base + j]) *
                           static_cast<double>(pg->value[static_cast<std::size_t>(j)]);
              double dx =
                  (dxh - mean_dxhat - static_cast<double>(xhat[base + j]) * mean_dxhat_xhat) * is;
              px->grad[base + j] += static_cast<T>(dx);
            }
          }
        }
      });
}

// Row-wise softmax, stabilized by subtracting each row's max.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::check_matrix(x, "softmax_rows");
  detail::check_finite(x, "softmax_rows");
  int m = x.dims()[0], n = x.dims()[1];
  std::vector<T> out(x.numel());
  for (int i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(x.at(i, j)));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(static_cast<double>(x.at(i, j)) - mx);
      out[static_cast<std::size_t>(i) * n + j] = static_cast<T>(e);
      sum += e;
    }
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] =
          static_cast<T>(static_cast<double>(out[static_cast<std::size_t>(i) * n + j]) / sum);
  }
  auto* px = x.node().get();
  return detail::make_op<T>(x.dims(), std::move(out), {x.node()}, [px, m, n](TensorNode<T>& self) {
    if (!px->requires_grad) return;
    for (int i = 0; i < m; ++i) {
      std::size_t base = static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j)
        dot += static_cast<double>(self.grad[base + j]) * static_cast<double>(self.value[base + j]);
      for (int j = 0; j < n; ++j) {
        double y = static_cast<double>(self.value[base + j]);
        px->grad[base + j] +=
            static_cast<T>(y * (static_cast<double>(self.grad[base + j]) - dot));
      }
    }
  });
}

// Row-wise log(sum(exp(x))), stabilized; output is m x 1.
template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& x) {
  detail::check_matrix(x, "logsumexp_rows");
  detail::check_finite(x, "logsumexp_rows");
  int m = x.dims()[0], n = x.dims()[1];
  std::vector<T> out(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(x.at(i, j)));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(static_cast<double>(x.at(i, j)) - mx);
    out[static_cast<std::size_t>(i)] = static_cast<T>(mx + std::log(sum));
  }
  auto* px = x.node().get();
  return detail::make_op<T>({m, 1}, std::move(out), {x.node()}, [px, m, n](TensorNode<T>& self) {
    if (!px->requires_grad) return;
    for (int i = 0; i < m; ++i) {
      double lse = static_cast<double>(self.value[static_cast<std::size_t>(i)]);
      T g = self.grad[static_cast<std::size_t>(i)];
      for (int j = 0; j < n; ++j) {
        double soft = std::exp(static_cast<double>(px->value[static_cast<std::size_t>(i) * n + j]) - lse);
        px->grad[static_cast<std::size_t>(i) * n + j] += static_cast<T>(soft) * g;
      }
    }
  });
}

// Main diagonal of a square matrix as an n x 1 column.
template <typename T>
Tensor<T> take_diag(const Tensor<T>& x) {
  detail::check_matrix(x, "take_diag");
  int m = x.dims()[0], n = x.dims()[1];
  if (m != n) throw ShapeError("take_diag: matrix is not square, " + detail::dims_to_string(x.dims()));
  std::vector<T> out(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) out[static_cast<std::size_t>(i)] = x.at(i, i);
  auto* px = x.node().get();
  return detail::make_op<T>({m, 1}, std::move(out), {x.node()}, [px, m, n](TensorNode<T>& self) {
    if (!px->requires_grad) return;
    for (int i = 0; i < m; ++i)
      px->grad[static_cast<std::size_t>(i) * n + i] += self.grad[static_cast<std::size_t>(i)];
  });
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

// Populates grad on every tensor reachable from `loss` that requires a
// gradient. Grads from a previous backward pass are overwritten, not
// accumulated; callers needing accumulation must sum explicitly.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        detail::dims_to_string(loss.dims()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not connected to any tracked tensor");
  }
  // Iterative post-order DFS over parents that require gradients.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  struct Frame {
    TensorNode<T>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode<T>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  for (auto* n : order) n->grad.assign(n->value.size(), T(0));
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

}  // namespace mf
