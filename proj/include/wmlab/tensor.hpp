#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

namespace detail {

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

}  // namespace detail

/// Dense row-major tensor of 64-bit floats. Value-semantics handle to a
/// shared node; copies alias the same storage, which is what the tape
/// needs to accumulate gradients through shared subexpressions.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    size_t n = detail::shape_numel(shape);
    t.node_->shape = std::move(shape);
    t.node_->values.assign(n, 0.0);
    t.node_->requires_grad = requires_grad;
    if (requires_grad) t.node_->grad.assign(n, 0.0);
    return t;
  }

  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
  }

  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false) {
    if (detail::shape_numel(shape) != values.size())
      throw DimensionError("value count does not match shape");
    Tensor t = zeros(std::move(shape), requires_grad);
    t.values() = std::move(values);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  size_t size() const { return node_->values.size(); }

  // handle semantics: a const Tensor still aliases mutable shared storage
  std::vector<double>& values() const { return node_->values; }
  std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor");
    return node_->values[0];
  }

  double at(int i) const { return node_->values[static_cast<size_t>(i)]; }
  double at(int i, int j) const {
    return node_->values[static_cast<size_t>(i) * dim(1) + j];
  }
  void set(int i, double v) { node_->values[static_cast<size_t>(i)] = v; }
  void set(int i, int j, double v) {
    node_->values[static_cast<size_t>(i) * dim(1) + j] = v;
  }

  void zero_grad() const {
    if (requires_grad()) std::fill(grad().begin(), grad().end(), 0.0);
  }

  /// Grants gradient storage. Used by the tape when an op output depends
  /// on at least one differentiable input.
  void enable_grad() {
    node_->requires_grad = true;
    node_->grad.assign(node_->values.size(), 0.0);
  }

  bool all_finite() const {
    for (double v : node_->values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Identity of the underlying node (for aliasing checks in tests).
  const void* id() const { return node_.get(); }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Records every primitive in call order; backward() replays the exact
/// reverse. Each step's backward accumulates (+=) into input gradients,
/// never overwrites, so DAGs with shared subexpressions are handled.
class Tape {
 public:
  Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make_like(a, {a, b});
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
    record(out, [a, b, out]() {
      accumulate(a, out.grad(), 1.0);
      accumulate(b, out.grad(), 1.0);
    });
    return out;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make_like(a, {a, b});
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] - b.values()[i];
    record(out, [a, b, out]() {
      accumulate(a, out.grad(), 1.0);
      accumulate(b, out.grad(), -1.0);
    });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_like(a, {a, b});
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
    record(out, [a, b, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < out.size(); ++i) a.grad()[i] += out.grad()[i] * b.values()[i];
      if (b.requires_grad())
        for (size_t i = 0; i < out.size(); ++i) b.grad()[i] += out.grad()[i] * a.values()[i];
    });
    return out;
  }

  Tensor square(const Tensor& a) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * a.values()[i];
    record(out, [a, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < out.size(); ++i)
          a.grad()[i] += 2.0 * a.values()[i] * out.grad()[i];
    });
    return out;
  }

  Tensor scale(const Tensor& a, double c) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i) out.values()[i] = c * a.values()[i];
    record(out, [a, out, c]() { accumulate(a, out.grad(), c); });
    return out;
  }

  Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + c;
    record(out, [a, out]() { accumulate(a, out.grad(), 1.0); });
    return out;
  }

  Tensor neg(const Tensor& a) { return scale(a, -1.0); }

  Tensor exp_(const Tensor& a) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i) out.values()[i] = std::exp(a.values()[i]);
    record(out, [a, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < out.size(); ++i)
          a.grad()[i] += out.grad()[i] * out.values()[i];
    });
    return out;
  }

  Tensor log_(const Tensor& a) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i) {
      if (a.values()[i] <= 0.0) throw ContractError("log of non-positive value");
      out.values()[i] = std::log(a.values()[i]);
    }
    record(out, [a, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < out.size(); ++i)
          a.grad()[i] += out.grad()[i] / a.values()[i];
    });
    return out;
  }

  Tensor tanh_(const Tensor& a) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i) out.values()[i] = std::tanh(a.values()[i]);
    record(out, [a, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < out.size(); ++i)
          a.grad()[i] += out.grad()[i] * (1.0 - out.values()[i] * out.values()[i]);
    });
    return out;
  }

  Tensor sigmoid(const Tensor& a) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i) {
      double x = a.values()[i];
      out.values()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                 : std::exp(x) / (1.0 + std::exp(x));
    }
    record(out, [a, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < out.size(); ++i) {
          double y = out.values()[i];
          a.grad()[i] += out.grad()[i] * y * (1.0 - y);
        }
    });
    return out;
  }

  /// GELU, tanh approximation (the GPT-2 variant); backward is the exact
  /// derivative of the approximation.
  Tensor gelu(const Tensor& a) {
    Tensor out = make_like(a, {a});
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    for (size_t i = 0; i < a.size(); ++i) {
      double x = a.values()[i];
      out.values()[i] = 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x)));
    }
    record(out, [a, out]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < out.size(); ++i) {
        double x = a.values()[i];
        double t = std::tanh(k * (x + c * x * x * x));
        double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
        a.grad()[i] += out.grad()[i] * d;
      }
    });
    return out;
  }

  Tensor elu(const Tensor& a) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i) {
      double x = a.values()[i];
      out.values()[i] = x > 0.0 ? x : std::expm1(x);
    }
    record(out, [a, out]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < out.size(); ++i) {
        double x = a.values()[i];
        a.grad()[i] += out.grad()[i] * (x > 0.0 ? 1.0 : std::exp(x));
      }
    });
    return out;
  }

  Tensor minimum(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "minimum");
    Tensor out = make_like(a, {a, b});
    for (size_t i = 0; i < a.size(); ++i)
      out.values()[i] = std::min(a.values()[i], b.values()[i]);
    record(out, [a, b, out]() {
      for (size_t i = 0; i < out.size(); ++i) {
        bool take_a = a.values()[i] <= b.values()[i];
        if (take_a && a.requires_grad()) a.grad()[i] += out.grad()[i];
        if (!take_a && b.requires_grad()) b.grad()[i] += out.grad()[i];
      }
    });
    return out;
  }

  Tensor maximum(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "maximum");
    Tensor out = make_like(a, {a, b});
    for (size_t i = 0; i < a.size(); ++i)
      out.values()[i] = std::max(a.values()[i], b.values()[i]);
    record(out, [a, b, out]() {
      for (size_t i = 0; i < out.size(); ++i) {
        bool take_a = a.values()[i] >= b.values()[i];
        if (take_a && a.requires_grad()) a.grad()[i] += out.grad()[i];
        if (!take_a && b.requires_grad()) b.grad()[i] += out.grad()[i];
      }
    });
    return out;
  }

  /// Gradient passes where lo <= x <= hi, is blocked outside.
  Tensor clamp(const Tensor& a, double lo, double hi) {
    Tensor out = make_like(a, {a});
    for (size_t i = 0; i < a.size(); ++i)
      out.values()[i] = std::min(hi, std::max(lo, a.values()[i]));
    record(out, [a, out, lo, hi]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < out.size(); ++i) {
        double x = a.values()[i];
        if (x >= lo && x <= hi) a.grad()[i] += out.grad()[i];
      }
    });
    return out;
  }

  /// Inverted dropout with an explicit generator; p = 0 is the identity.
  Tensor dropout(const Tensor& a, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ContractError("dropout rate must be in [0, 1)");
    if (p == 0.0) return a;
    Tensor out = make_like(a, {a});
    auto mask = std::make_shared<std::vector<double>>(a.size());
    double keep = 1.0 - p;
    for (size_t i = 0; i < a.size(); ++i) {
      (*mask)[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
      out.values()[i] = a.values()[i] * (*mask)[i];
    }
    record(out, [a, out, mask]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < out.size(); ++i) a.grad()[i] += out.grad()[i] * (*mask)[i];
    });
    return out;
  }

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
      throw DimensionError("matmul expects 2-D tensors");
    if (a.dim(1) != b.dim(0))
      throw DimensionError("matmul inner dimensions disagree: " +
                           std::to_string(a.dim(1)) + " vs " + std::to_string(b.dim(0)));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    mark_requires(out, {a, b});
    {
      const double* pa = a.values().data();
      const double* pb = b.values().data();
      double* pc = out.values().data();
      for (int i = 0; i < m; ++i) {
        double* c = pc + static_cast<size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
          double av = pa[static_cast<size_t>(i) * k + l];
          const double* brow = pb + static_cast<size_t>(l) * n;
          for (int j = 0; j < n; ++j) c[j] += av * brow[j];
        }
      }
    }
    record(out, [a, b, out, m, k, n]() {
      const double* pg = out.grad().data();
      if (a.requires_grad()) {
        // dA = dC * B^T
        double* pda = a.grad().data();
        const double* pb = b.values().data();
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            const double* grow = pg + static_cast<size_t>(i) * n;
            const double* brow = pb + static_cast<size_t>(l) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            pda[static_cast<size_t>(i) * k + l] += s;
          }
      }
      if (b.requires_grad()) {
        // dB = A^T * dC
        double* pdb = b.grad().data();
        const double* pa = a.values().data();
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            double av = pa[static_cast<size_t>(i) * k + l];
            const double* grow = pg + static_cast<size_t>(i) * n;
            double* drow = pdb + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
          }
      }
    });
    return out;
  }

  Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("transpose expects a 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    mark_requires(out, {a});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.values()[static_cast<size_t>(j) * m + i] = a.at(i, j);
    record(out, [a, out, m, n]() {
      if (!a.requires_grad()) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          a.grad()[static_cast<size_t>(i) * n + j] +=
              out.grad()[static_cast<size_t>(j) * m + i];
    });
    return out;
  }

  Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (detail::shape_numel(shape) != a.size())
      throw DimensionError("reshape changes element count");
    Tensor out = Tensor::zeros(std::move(shape));
    mark_requires(out, {a});
    out.values() = a.values();
    record(out, [a, out]() { accumulate(a, out.grad(), 1.0); });
    return out;
  }

  Tensor slice_cols(const Tensor& a, int start, int len) {
    if (a.ndim() != 2) throw DimensionError("slice_cols expects a 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    if (start < 0 || len <= 0 || start + len > n)
      throw DimensionError("slice_cols range out of bounds");
    Tensor out = Tensor::zeros({m, len});
    mark_requires(out, {a});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < len; ++j)
        out.values()[static_cast<size_t>(i) * len + j] = a.at(i, start + j);
    record(out, [a, out, m, n, start, len]() {
      if (!a.requires_grad()) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j)
          a.grad()[static_cast<size_t>(i) * n + start + j] +=
              out.grad()[static_cast<size_t>(i) * len + j];
    });
    return out;
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of nothing");
    const int m = parts[0].dim(0);
    int n = 0;
    for (const Tensor& p : parts) {
      if (p.ndim() != 2 || p.dim(0) != m)
        throw DimensionError("concat_cols parts must share row count");
      n += p.dim(1);
    }
    Tensor out = Tensor::zeros({m, n});
    bool rq = false;
    for (const Tensor& p : parts) rq = rq || p.requires_grad();
    if (rq) force_requires(out);
    int off = 0;
    for (const Tensor& p : parts) {
      const int w = p.dim(1);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          out.values()[static_cast<size_t>(i) * n + off + j] = p.at(i, j);
      off += w;
    }
    auto parts_copy = parts;
    record(out, [parts_copy, out, m, n]() {
      int off = 0;
      for (const Tensor& p : parts_copy) {
        const int w = p.dim(1);
        if (p.requires_grad())
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              p.grad()[static_cast<size_t>(i) * w + j] +=
                  out.grad()[static_cast<size_t>(i) * n + off + j];
        off += w;
      }
    });
    return out;
  }

  /// Rows of `table` selected by index, repeats allowed; backward
  /// scatter-adds, so embedding tables accumulate over repeated ids.
  Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
    if (table.ndim() != 2) throw DimensionError("gather_rows expects a 2-D table");
    const int rows = table.dim(0), width = table.dim(1);
    for (int i : idx)
      if (i < 0 || i >= rows) throw IndexError("gather_rows index out of range");
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()), width});
    mark_requires(out, {table});
    for (size_t r = 0; r < idx.size(); ++r)
      std::copy_n(table.values().begin() + static_cast<size_t>(idx[r]) * width, width,
                  out.values().begin() + r * width);
    record(out, [table, out, idx, width]() {
      if (!table.requires_grad()) return;
      for (size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < width; ++j)
          table.grad()[static_cast<size_t>(idx[r]) * width + j] +=
              out.grad()[r * static_cast<size_t>(width) + j];
    });
    return out;
  }

  /// Interleaves equally sized [T x d] matrices into [3T x d] with row
  /// order a0, b0, c0, a1, b1, c1, ... (the triplet token layout).
  Tensor interleave_rows3(const Tensor& a, const Tensor& b, const Tensor& c) {
    require_same_shape(a, b, "interleave_rows3");
    require_same_shape(a, c, "interleave_rows3");
    if (a.ndim() != 2) throw DimensionError("interleave_rows3 expects 2-D tensors");
    const int t = a.dim(0), d = a.dim(1);
    Tensor out = Tensor::zeros({3 * t, d});
    mark_requires(out, {a, b, c});
    for (int r = 0; r < t; ++r) {
      std::copy_n(a.values().begin() + static_cast<size_t>(r) * d, d,
                  out.values().begin() + static_cast<size_t>(3 * r) * d);
      std::copy_n(b.values().begin() + static_cast<size_t>(r) * d, d,
                  out.values().begin() + static_cast<size_t>(3 * r + 1) * d);
      std::copy_n(c.values().begin() + static_cast<size_t>(r) * d, d,
                  out.values().begin() + static_cast<size_t>(3 * r + 2) * d);
    }
    record(out, [a, b, c, out, t, d]() {
      auto pull = [&](const Tensor& x, int lane) {
        if (!x.requires_grad()) return;
        for (int r = 0; r < t; ++r)
          for (int j = 0; j < d; ++j)
            x.grad()[static_cast<size_t>(r) * d + j] +=
                out.grad()[static_cast<size_t>(3 * r + lane) * d + j];
      };
      pull(a, 0);
      pull(b, 1);
      pull(c, 2);
    });
    return out;
  }

  /// Broadcast-add a length-n vector to every row of an [m x n] matrix.
  Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.ndim() != 2 || v.ndim() != 1 || v.dim(0) != a.dim(1))
      throw DimensionError("add_rowvec shape mismatch");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({m, n});
    mark_requires(out, {a, v});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        out.values()[static_cast<size_t>(i) * n + j] = a.at(i, j) + v.at(j);
    record(out, [a, v, out, m, n]() {
      if (a.requires_grad()) accumulate(a, out.grad(), 1.0);
      if (v.requires_grad())
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            v.grad()[j] += out.grad()[static_cast<size_t>(i) * n + j];
    });
    return out;
  }

  /// Softmax along `axis` of a 2-D tensor (or over a 1-D vector with
  /// axis 0), computed with max subtraction.
  Tensor softmax(const Tensor& a, int axis) {
    if (a.ndim() == 1) {
      if (axis != 0) throw DimensionError("softmax axis out of range");
      Tensor row = reshape(a, {1, a.dim(0)});
      return reshape(softmax(row, 1), {a.dim(0)});
    }
    if (a.ndim() != 2 || (axis != 0 && axis != 1))
      throw DimensionError("softmax expects a 1-D or 2-D tensor, axis 0 or 1");
    if (axis == 0) return transpose(softmax(transpose(a), 1));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({m, n});
    mark_requires(out, {a});
    for (int i = 0; i < m; ++i) {
      const double* x = a.values().data() + static_cast<size_t>(i) * n;
      double* y = out.values().data() + static_cast<size_t>(i) * n;
      double mx = *std::max_element(x, x + n);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      for (int j = 0; j < n; ++j) y[j] /= sum;
    }
    record(out, [a, out, m, n]() {
      if (!a.requires_grad()) return;
      for (int i = 0; i < m; ++i) {
        const double* y = out.values().data() + static_cast<size_t>(i) * n;
        const double* g = out.grad().data() + static_cast<size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += y[j] * g[j];
        for (int j = 0; j < n; ++j)
          a.grad()[static_cast<size_t>(i) * n + j] += y[j] * (g[j] - dot);
      }
    });
    return out;
  }

  /// Row-wise log-softmax of an [m x n] matrix.
  Tensor log_softmax(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("log_softmax expects a 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({m, n});
    mark_requires(out, {a});
    for (int i = 0; i < m; ++i) {
      const double* x = a.values().data() + static_cast<size_t>(i) * n;
      double* y = out.values().data() + static_cast<size_t>(i) * n;
      double mx = *std::max_element(x, x + n);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
      double lse = mx + std::log(sum);
      for (int j = 0; j < n; ++j) y[j] = x[j] - lse;
    }
    record(out, [a, out, m, n]() {
      if (!a.requires_grad()) return;
      for (int i = 0; i < m; ++i) {
        const double* y = out.values().data() + static_cast<size_t>(i) * n;
        const double* g = out.grad().data() + static_cast<size_t>(i) * n;
        double gsum = 0.0;
        for (int j = 0; j < n; ++j) gsum += g[j];
        for (int j = 0; j < n; ++j)
          a.grad()[static_cast<size_t>(i) * n + j] += g[j] - std::exp(y[j]) * gsum;
      }
    });
    return out;
  }

  /// Row-wise layer normalization with affine gain/bias (both length n).
  Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                   double eps = 1e-5) {
    if (x.ndim() != 2) throw DimensionError("layernorm expects a 2-D tensor");
    const int m = x.dim(0), n = x.dim(1);
    if (n < 2) throw DimensionError("layernorm axis length must be >= 2");
    if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 || bias.dim(0) != n)
      throw DimensionError("layernorm gain/bias must be length-n vectors");
    Tensor out = Tensor::zeros({m, n});
    mark_requires(out, {x, gain, bias});
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_sd = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      const double* row = x.values().data() + static_cast<size_t>(i) * n;
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += row[j];
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= n;
      double inv = 1.0 / std::sqrt(var + eps);
      (*inv_sd)[static_cast<size_t>(i)] = inv;
      for (int j = 0; j < n; ++j) {
        double xh = (row[j] - mean) * inv;
        (*xhat)[static_cast<size_t>(i) * n + j] = xh;
        out.values()[static_cast<size_t>(i) * n + j] = xh * gain.at(j) + bias.at(j);
      }
    }
    record(out, [x, gain, bias, out, xhat, inv_sd, m, n]() {
      for (int i = 0; i < m; ++i) {
        const double* g = out.grad().data() + static_cast<size_t>(i) * n;
        const double* xh = xhat->data() + static_cast<size_t>(i) * n;
        if (gain.requires_grad())
          for (int j = 0; j < n; ++j) gain.grad()[j] += g[j] * xh[j];
        if (bias.requires_grad())
          for (int j = 0; j < n; ++j) bias.grad()[j] += g[j];
        if (x.requires_grad()) {
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < n; ++j) {
            double dxh = g[j] * gain.at(j);
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= n;
          m2 /= n;
          double inv = (*inv_sd)[static_cast<size_t>(i)];
          for (int j = 0; j < n; ++j) {
            double dxh = g[j] * gain.at(j);
            x.grad()[static_cast<size_t>(i) * n + j] += inv * (dxh - m1 - xh[j] * m2);
          }
        }
      }
    });
    return out;
  }

  /// Mean of squared differences over all elements.
  Tensor mse(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse");
    Tensor out = Tensor::zeros({1});
    mark_requires(out, {pred, target});
    const size_t n = pred.size();
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double d = pred.values()[i] - target.values()[i];
      s += d * d;
    }
    out.values()[0] = s / static_cast<double>(n);
    record(out, [pred, target, out, n]() {
      double g = out.grad()[0] * 2.0 / static_cast<double>(n);
      if (pred.requires_grad())
        for (size_t i = 0; i < n; ++i)
          pred.grad()[i] += g * (pred.values()[i] - target.values()[i]);
      if (target.requires_grad())
        for (size_t i = 0; i < n; ++i)
          target.grad()[i] -= g * (pred.values()[i] - target.values()[i]);
    });
    return out;
  }

  /// Weighted mean negative log-likelihood over [n x C] logits with
  /// label smoothing. Weights are per-class, defaulting to uniform; the
  /// result is sum_i w[y_i] * loss_i / sum_i w[y_i].
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                       const std::vector<double>& class_weights = {},
                       double label_smoothing = 0.0) {
    if (logits.ndim() != 2) throw DimensionError("cross_entropy expects 2-D logits");
    const int n = logits.dim(0), C = logits.dim(1);
    if (static_cast<int>(targets.size()) != n)
      throw DimensionError("cross_entropy target count mismatch");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ContractError("label smoothing must be in [0, 1)");
    if (!class_weights.empty()) {
      if (static_cast<int>(class_weights.size()) != C)
        throw DimensionError("class weight count mismatch");
      for (double w : class_weights)
        if (!(w > 0.0)) throw ContractError("class weights must be positive");
    }
    for (int y : targets)
      if (y < 0 || y >= C) throw IndexError("cross_entropy target out of range");

    Tensor out = Tensor::zeros({1});
    mark_requires(out, {logits});
    // log-softmax rows, forward loss
    auto logp = std::make_shared<std::vector<double>>(logits.size());
    const double s = label_smoothing;
    double wsum = 0.0, loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* x = logits.values().data() + static_cast<size_t>(i) * C;
      double* lp = logp->data() + static_cast<size_t>(i) * C;
      double mx = *std::max_element(x, x + C);
      double sum = 0.0;
      for (int j = 0; j < C; ++j) sum += std::exp(x[j] - mx);
      double lse = mx + std::log(sum);
      double li = 0.0;
      for (int j = 0; j < C; ++j) {
        lp[j] = x[j] - lse;
        double q = (j == targets[static_cast<size_t>(i)] ? 1.0 - s : 0.0) + s / C;
        li -= q * lp[j];
      }
      double w = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(targets[static_cast<size_t>(i)])];
      wsum += w;
      loss += w * li;
    }
    out.values()[0] = loss / wsum;
    record(out, [logits, out, targets, class_weights, logp, s, wsum, n, C]() {
      if (!logits.requires_grad()) return;
      double g = out.grad()[0] / wsum;
      for (int i = 0; i < n; ++i) {
        int y = targets[static_cast<size_t>(i)];
        double w = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(y)];
        const double* lp = logp->data() + static_cast<size_t>(i) * C;
        for (int j = 0; j < C; ++j) {
          double q = (j == y ? 1.0 - s : 0.0) + s / C;
          logits.grad()[static_cast<size_t>(i) * C + j] += g * w * (std::exp(lp[j]) - q);
        }
      }
    });
    return out;
  }

  Tensor sum(const Tensor& a) {
    Tensor out = Tensor::zeros({1});
    mark_requires(out, {a});
    out.values()[0] = std::accumulate(a.values().begin(), a.values().end(), 0.0);
    record(out, [a, out]() {
      if (a.requires_grad())
        for (size_t i = 0; i < a.size(); ++i) a.grad()[i] += out.grad()[0];
    });
    return out;
  }

  Tensor mean(const Tensor& a) {
    Tensor out = Tensor::zeros({1});
    mark_requires(out, {a});
    const double n = static_cast<double>(a.size());
    out.values()[0] = std::accumulate(a.values().begin(), a.values().end(), 0.0) / n;
    record(out, [a, out, n]() {
      if (a.requires_grad())
        for (size_t i = 0; i < a.size(); ++i) a.grad()[i] += out.grad()[0] / n;
    });
    return out;
  }

  /// [m x n] -> length-m vector of row sums.
  Tensor row_sum(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("row_sum expects a 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({m});
    mark_requires(out, {a});
    for (int i = 0; i < m; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += a.at(i, j);
      out.values()[static_cast<size_t>(i)] = s;
    }
    record(out, [a, out, m, n]() {
      if (!a.requires_grad()) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          a.grad()[static_cast<size_t>(i) * n + j] += out.grad()[static_cast<size_t>(i)];
    });
    return out;
  }

  /// Picks a[i, idx[i]] per row -> length-m vector.
  Tensor gather_per_row(const Tensor& a, const std::vector<int>& idx) {
    if (a.ndim() != 2) throw DimensionError("gather_per_row expects a 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    if (static_cast<int>(idx.size()) != m)
      throw DimensionError("gather_per_row index count mismatch");
    for (int j : idx)
      if (j < 0 || j >= n) throw IndexError("gather_per_row index out of range");
    Tensor out = Tensor::zeros({m});
    mark_requires(out, {a});
    for (int i = 0; i < m; ++i)
      out.values()[static_cast<size_t>(i)] = a.at(i, idx[static_cast<size_t>(i)]);
    record(out, [a, out, idx, n]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < idx.size(); ++i)
        a.grad()[i * static_cast<size_t>(n) + static_cast<size_t>(idx[i])] += out.grad()[i];
    });
    return out;
  }

  /// Reverse sweep from a scalar loss, visiting recorded operations in
  /// exact reverse order. Leaf gradients accumulate; callers zero
  /// parameter gradients between iterations.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw DimensionError("backward expects a scalar loss");
    if (!loss.requires_grad())
      throw ContractError("backward on a tensor that does not require grad");
    loss.grad()[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  size_t recorded_ops() const { return steps_.size(); }

 private:
  static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
      throw DimensionError(std::string(op) + ": shape mismatch");
  }

  static void accumulate(const Tensor& t, const std::vector<double>& g, double c) {
    if (!t.requires_grad()) return;
    for (size_t i = 0; i < g.size(); ++i) t.grad()[i] += c * g[i];
  }

  Tensor make_like(const Tensor& a, std::initializer_list<Tensor> inputs) {
    Tensor out = Tensor::zeros(a.shape());
    mark_requires(out, inputs);
    return out;
  }

  static void force_requires(Tensor& t) { t.enable_grad(); }

  void mark_requires(Tensor& out, std::initializer_list<Tensor> inputs) {
    bool rq = false;
    for (const Tensor& t : inputs) rq = rq || t.requires_grad();
    if (rq) force_requires(out);
  }

  void record(const Tensor& out, std::function<void()> back) {
    if (out.requires_grad()) steps_.push_back(std::move(back));
  }

  std::vector<std::function<void()>> steps_;
};

}  // namespace wmlab
