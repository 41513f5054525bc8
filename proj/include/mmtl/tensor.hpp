#pragma once

// Dense tensors and a tape-based reverse-mode autodiff core.
//
// The primitive set is fixed and closed: matvec, matTvec, linear_rows,
// add, sub, mul, scale, add_rowvec, rowwise_mul, tanh, sigmoid, softmax,
// layer_norm, concat, stack_rows, mean_rows, slice, row_lookup,
// cross_entropy_logits, sum_scalars and constant masks. The whole model
// is expressed in these, so a finite-difference check of the model
// covers every backward rule.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmtl {

/// Dense row-major tensor with an optional same-shape gradient slot.
/// Persistent storage for parameters; tape intermediates use Tape::Var.
template <class Real>
struct Tensor {
  std::vector<int> shape;
  std::vector<Real> v;  // values, row-major
  std::vector<Real> g;  // gradient; empty until ensure_grad()

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(numel(), Real(0));
  }

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), Real(0));
  }
  void zero_grad() { g.assign(v.size(), Real(0)); }
};

/// Computation tape. Ops append their backward closures in creation
/// order; backward() replays them in reverse. Vars live in a deque so
/// pointers stay stable. With recording off the same ops run as plain
/// forward arithmetic (used for beam-search inference).
template <class Real>
class Tape {
public:
  struct Var {
    std::vector<int> shape;
    Real* v = nullptr;  // values
    Real* g = nullptr;  // gradient accumulator
    std::size_t n = 0;
    std::vector<Real> val_store, grad_store;  // owned for non-leaf vars

    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  };
  using Ref = Var*;

  explicit Tape(bool recording = true) : recording_(recording) {}
  bool recording() const { return recording_; }

  /// Fresh intermediate, zero-filled value and gradient.
  Ref alloc(std::vector<int> shape) {
    Var& var = vars_.emplace_back();
    var.shape = std::move(shape);
    std::size_t n = 1;
    for (int d : var.shape) n *= static_cast<std::size_t>(d);
    var.n = n;
    var.val_store.assign(n, Real(0));
    var.v = var.val_store.data();
    if (recording_) {
      var.grad_store.assign(n, Real(0));
      var.g = var.grad_store.data();
    }
    return &var;
  }

  /// Leaf aliasing a parameter tensor; gradients accumulate straight
  /// into t.g.
  Ref leaf(Tensor<Real>& t) {
    if (recording_) t.ensure_grad();
    Var& var = vars_.emplace_back();
    var.shape = t.shape;
    var.n = t.v.size();
    var.v = t.v.data();
    var.g = recording_ ? t.g.data() : nullptr;
    return &var;
  }

  /// Constant input (no gradient is ever read from it, but a slot is
  /// allocated so backward rules need no special casing).
  Ref constant(const std::vector<Real>& data, std::vector<int> shape) {
    Ref r = alloc(std::move(shape));
    if (data.size() != r->n) throw std::invalid_argument("constant size mismatch");
    std::copy(data.begin(), data.end(), r->v);
    return r;
  }

  Ref scalar(Real x) {
    Ref r = alloc({1});
    r->v[0] = x;
    return r;
  }

  void push(std::function<void()> bw) {
    if (recording_) ops_.push_back(std::move(bw));
  }

  /// Reverse sweep from a scalar loss. Gradients accumulate (+=), so
  /// parameter grads must be zeroed by the caller between batches.
  void backward(Ref loss) {
    if (!recording_) throw std::logic_error("backward on a non-recording tape");
    if (loss->n != 1) throw std::invalid_argument("backward requires a scalar loss");
    loss->g[0] += Real(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  std::size_t num_ops() const { return ops_.size(); }

private:
  bool recording_;
  std::deque<Var> vars_;
  std::vector<std::function<void()>> ops_;
};

namespace ops {

template <class Real>
using Ref = typename Tape<Real>::Ref;

namespace detail {
inline void check(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}
}  // namespace detail

/// out = a + b (same shape)
template <class Real>
Ref<Real> add(Tape<Real>& tp, Ref<Real> a, Ref<Real> b) {
  detail::check(a->shape == b->shape, "add: shape mismatch");
  auto out = tp.alloc(a->shape);
  for (std::size_t i = 0; i < out->n; ++i) out->v[i] = a->v[i] + b->v[i];
  tp.push([out, a, b] {
    for (std::size_t i = 0; i < out->n; ++i) {
      a->g[i] += out->g[i];
      b->g[i] += out->g[i];
    }
  });
  return out;
}

template <class Real>
Ref<Real> sub(Tape<Real>& tp, Ref<Real> a, Ref<Real> b) {
  detail::check(a->shape == b->shape, "sub: shape mismatch");
  auto out = tp.alloc(a->shape);
  for (std::size_t i = 0; i < out->n; ++i) out->v[i] = a->v[i] - b->v[i];
  tp.push([out, a, b] {
    for (std::size_t i = 0; i < out->n; ++i) {
      a->g[i] += out->g[i];
      b->g[i] -= out->g[i];
    }
  });
  return out;
}

/// Elementwise product, same shape.
template <class Real>
Ref<Real> mul(Tape<Real>& tp, Ref<Real> a, Ref<Real> b) {
  detail::check(a->shape == b->shape, "mul: shape mismatch");
  auto out = tp.alloc(a->shape);
  for (std::size_t i = 0; i < out->n; ++i) out->v[i] = a->v[i] * b->v[i];
  tp.push([out, a, b] {
    for (std::size_t i = 0; i < out->n; ++i) {
      a->g[i] += b->v[i] * out->g[i];
      b->g[i] += a->v[i] * out->g[i];
    }
  });
  return out;
}

template <class Real>
Ref<Real> scale(Tape<Real>& tp, Ref<Real> a, Real c) {
  auto out = tp.alloc(a->shape);
  for (std::size_t i = 0; i < out->n; ++i) out->v[i] = c * a->v[i];
  tp.push([out, a, c] {
    for (std::size_t i = 0; i < out->n; ++i) a->g[i] += c * out->g[i];
  });
  return out;
}

/// Elementwise multiply by a fixed mask (dropout). The mask gets no grad.
template <class Real>
Ref<Real> mul_mask(Tape<Real>& tp, Ref<Real> a, const std::vector<Real>& mask) {
  detail::check(a->n == mask.size(), "mul_mask: size mismatch");
  auto out = tp.alloc(a->shape);
  for (std::size_t i = 0; i < out->n; ++i) out->v[i] = a->v[i] * mask[i];
  tp.push([out, a, mask] {
    for (std::size_t i = 0; i < out->n; ++i) a->g[i] += mask[i] * out->g[i];
  });
  return out;
}

/// y = W x, W is [m x n], x is [n].
template <class Real>
Ref<Real> matvec(Tape<Real>& tp, Ref<Real> W, Ref<Real> x) {
  detail::check(W->shape.size() == 2 && W->cols() == static_cast<int>(x->n),
                "matvec: shape mismatch");
  const int m = W->rows(), n = W->cols();
  auto out = tp.alloc({m});
  for (int i = 0; i < m; ++i) {
    Real acc = 0;
    const Real* wr = W->v + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) acc += wr[j] * x->v[j];
    out->v[i] = acc;
  }
  tp.push([out, W, x, m, n] {
    for (int i = 0; i < m; ++i) {
      const Real go = out->g[i];
      const Real* wr = W->v + static_cast<std::size_t>(i) * n;
      Real* wg = W->g + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        wg[j] += go * x->v[j];
        x->g[j] += wr[j] * go;
      }
    }
  });
  return out;
}

/// y = A^T x, A is [m x n], x is [m], y is [n]. Used for c_t = S^T alpha.
template <class Real>
Ref<Real> matTvec(Tape<Real>& tp, Ref<Real> A, Ref<Real> x) {
  detail::check(A->shape.size() == 2 && A->rows() == static_cast<int>(x->n),
                "matTvec: shape mismatch");
  const int m = A->rows(), n = A->cols();
  auto out = tp.alloc({n});
  for (int i = 0; i < m; ++i) {
    const Real xi = x->v[i];
    const Real* ar = A->v + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) out->v[j] += ar[j] * xi;
  }
  tp.push([out, A, x, m, n] {
    for (int i = 0; i < m; ++i) {
      const Real* ar = A->v + static_cast<std::size_t>(i) * n;
      Real* ag = A->g + static_cast<std::size_t>(i) * n;
      Real acc = 0;
      for (int j = 0; j < n; ++j) {
        ag[j] += x->v[i] * out->g[j];
        acc += ar[j] * out->g[j];
      }
      x->g[i] += acc;
    }
  });
  return out;
}

/// out = A W^T: applies W ([p x n]) to every row of A ([m x n]); out is
/// [m x p]. Used to precompute W_s s_i for all annotations at once.
template <class Real>
Ref<Real> linear_rows(Tape<Real>& tp, Ref<Real> A, Ref<Real> W) {
  detail::check(A->shape.size() == 2 && W->shape.size() == 2 &&
                    A->cols() == W->cols(),
                "linear_rows: shape mismatch");
  const int m = A->rows(), n = A->cols(), p = W->rows();
  auto out = tp.alloc({m, p});
  for (int i = 0; i < m; ++i) {
    const Real* ar = A->v + static_cast<std::size_t>(i) * n;
    Real* orow = out->v + static_cast<std::size_t>(i) * p;
    for (int k = 0; k < p; ++k) {
      const Real* wr = W->v + static_cast<std::size_t>(k) * n;
      Real acc = 0;
      for (int j = 0; j < n; ++j) acc += wr[j] * ar[j];
      orow[k] = acc;
    }
  }
  tp.push([out, A, W, m, n, p] {
    for (int i = 0; i < m; ++i) {
      const Real* ar = A->v + static_cast<std::size_t>(i) * n;
      Real* agr = A->g + static_cast<std::size_t>(i) * n;
      const Real* gor = out->g + static_cast<std::size_t>(i) * p;
      for (int k = 0; k < p; ++k) {
        const Real go = gor[k];
        if (go == Real(0)) continue;
        const Real* wr = W->v + static_cast<std::size_t>(k) * n;
        Real* wgr = W->g + static_cast<std::size_t>(k) * n;
        for (int j = 0; j < n; ++j) {
          agr[j] += wr[j] * go;
          wgr[j] += ar[j] * go;
        }
      }
    }
  });
  return out;
}

/// out[i][j] = A[i][j] + b[j]
template <class Real>
Ref<Real> add_rowvec(Tape<Real>& tp, Ref<Real> A, Ref<Real> b) {
  detail::check(A->shape.size() == 2 && A->cols() == static_cast<int>(b->n),
                "add_rowvec: shape mismatch");
  const int m = A->rows(), n = A->cols();
  auto out = tp.alloc(A->shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->v[i * n + j] = A->v[i * n + j] + b->v[j];
  tp.push([out, A, b, m, n] {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        A->g[i * n + j] += out->g[i * n + j];
        b->g[j] += out->g[i * n + j];
      }
  });
  return out;
}

/// out[i][j] = A[i][j] * b[j] (per-row modulation, ctx-mul)
template <class Real>
Ref<Real> rowwise_mul(Tape<Real>& tp, Ref<Real> A, Ref<Real> b) {
  detail::check(A->shape.size() == 2 && A->cols() == static_cast<int>(b->n),
                "rowwise_mul: shape mismatch");
  const int m = A->rows(), n = A->cols();
  auto out = tp.alloc(A->shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->v[i * n + j] = A->v[i * n + j] * b->v[j];
  tp.push([out, A, b, m, n] {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        A->g[i * n + j] += b->v[j] * out->g[i * n + j];
        b->g[j] += A->v[i * n + j] * out->g[i * n + j];
      }
  });
  return out;
}

/// Generic elementwise unary op with caller-supplied derivative.
/// tanh/sigmoid below are the tight-loop versions; this one exists for
/// composing new ops and for fault-injection in the gradient checker
/// tests.
template <class Real>
Ref<Real> unary_op(Tape<Real>& tp, Ref<Real> x, std::function<Real(Real)> f,
                   std::function<Real(Real, Real)> dfdx /* (x, f(x)) */) {
  auto out = tp.alloc(x->shape);
  for (std::size_t i = 0; i < out->n; ++i) out->v[i] = f(x->v[i]);
  tp.push([out, x, dfdx] {
    for (std::size_t i = 0; i < out->n; ++i)
      x->g[i] += dfdx(x->v[i], out->v[i]) * out->g[i];
  });
  return out;
}

template <class Real>
Ref<Real> tanh_t(Tape<Real>& tp, Ref<Real> x) {
  auto out = tp.alloc(x->shape);
  for (std::size_t i = 0; i < out->n; ++i) out->v[i] = std::tanh(x->v[i]);
  tp.push([out, x] {
    for (std::size_t i = 0; i < out->n; ++i)
      x->g[i] += (Real(1) - out->v[i] * out->v[i]) * out->g[i];
  });
  return out;
}

template <class Real>
Ref<Real> sigmoid_t(Tape<Real>& tp, Ref<Real> x) {
  auto out = tp.alloc(x->shape);
  for (std::size_t i = 0; i < out->n; ++i)
    out->v[i] = Real(1) / (Real(1) + std::exp(-x->v[i]));
  tp.push([out, x] {
    for (std::size_t i = 0; i < out->n; ++i)
      x->g[i] += out->v[i] * (Real(1) - out->v[i]) * out->g[i];
  });
  return out;
}

/// Numerically stable softmax over a vector (max subtraction).
template <class Real>
Ref<Real> softmax_t(Tape<Real>& tp, Ref<Real> x) {
  detail::check(x->n > 0, "softmax: empty input");
  auto out = tp.alloc(x->shape);
  Real mx = x->v[0];
  for (std::size_t i = 1; i < x->n; ++i) mx = std::max(mx, x->v[i]);
  Real z = 0;
  for (std::size_t i = 0; i < x->n; ++i) {
    out->v[i] = std::exp(x->v[i] - mx);
    z += out->v[i];
  }
  for (std::size_t i = 0; i < x->n; ++i) out->v[i] /= z;
  tp.push([out, x] {
    Real dot = 0;
    for (std::size_t i = 0; i < out->n; ++i) dot += out->g[i] * out->v[i];
    for (std::size_t i = 0; i < out->n; ++i)
      x->g[i] += out->v[i] * (out->g[i] - dot);
  });
  return out;
}

/// y = gain * (x - mean) / sqrt(var + eps) + bias, biased variance.
template <class Real>
Ref<Real> layer_norm_t(Tape<Real>& tp, Ref<Real> x, Ref<Real> gain,
                       Ref<Real> bias, Real eps) {
  detail::check(x->n == gain->n && x->n == bias->n, "layer_norm: length mismatch");
  detail::check(eps > Real(0), "layer_norm: eps must be positive");
  const std::size_t n = x->n;
  auto out = tp.alloc(x->shape);
  Real mu = 0;
  for (std::size_t i = 0; i < n; ++i) mu += x->v[i];
  mu /= static_cast<Real>(n);
  Real var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real d = x->v[i] - mu;
    var += d * d;
  }
  var /= static_cast<Real>(n);
  const Real istd = Real(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i)
    out->v[i] = gain->v[i] * (x->v[i] - mu) * istd + bias->v[i];
  tp.push([out, x, gain, bias, mu, istd, n] {
    // dxhat_i = gain_i * dy_i; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
    Real m1 = 0, m2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Real xhat = (x->v[i] - mu) * istd;
      const Real dxh = gain->v[i] * out->g[i];
      m1 += dxh;
      m2 += dxh * xhat;
      gain->g[i] += out->g[i] * xhat;
      bias->g[i] += out->g[i];
    }
    m1 /= static_cast<Real>(n);
    m2 /= static_cast<Real>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Real xhat = (x->v[i] - mu) * istd;
      x->g[i] += istd * (gain->v[i] * out->g[i] - m1 - xhat * m2);
    }
  });
  return out;
}

/// Concatenate vectors.
template <class Real>
Ref<Real> concat(Tape<Real>& tp, const std::vector<Ref<Real>>& parts) {
  detail::check(!parts.empty(), "concat: no inputs");
  std::size_t total = 0;
  for (auto p : parts) total += p->n;
  auto out = tp.alloc({static_cast<int>(total)});
  std::size_t off = 0;
  for (auto p : parts) {
    std::copy(p->v, p->v + p->n, out->v + off);
    off += p->n;
  }
  tp.push([out, parts] {
    std::size_t o = 0;
    for (auto p : parts) {
      for (std::size_t i = 0; i < p->n; ++i) p->g[i] += out->g[o + i];
      o += p->n;
    }
  });
  return out;
}

template <class Real>
Ref<Real> concat2(Tape<Real>& tp, Ref<Real> a, Ref<Real> b) {
  return concat(tp, std::vector<Ref<Real>>{a, b});
}

/// Stack equal-length vectors into an [m x n] matrix.
template <class Real>
Ref<Real> stack_rows(Tape<Real>& tp, const std::vector<Ref<Real>>& rows) {
  detail::check(!rows.empty(), "stack_rows: no rows");
  const std::size_t n = rows[0]->n;
  for (auto r : rows) detail::check(r->n == n, "stack_rows: ragged rows");
  auto out = tp.alloc({static_cast<int>(rows.size()), static_cast<int>(n)});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i]->v, rows[i]->v + n, out->v + i * n);
  tp.push([out, rows, n] {
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) rows[i]->g[j] += out->g[i * n + j];
  });
  return out;
}

/// Column means of an [m x n] matrix -> [n].
template <class Real>
Ref<Real> mean_rows(Tape<Real>& tp, Ref<Real> A) {
  detail::check(A->shape.size() == 2, "mean_rows: needs a matrix");
  const int m = A->rows(), n = A->cols();
  auto out = tp.alloc({n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->v[j] += A->v[i * n + j];
  const Real inv = Real(1) / static_cast<Real>(m);
  for (int j = 0; j < n; ++j) out->v[j] *= inv;
  tp.push([out, A, m, n, inv] {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) A->g[i * n + j] += inv * out->g[j];
  });
  return out;
}

template <class Real>
Ref<Real> slice(Tape<Real>& tp, Ref<Real> x, std::size_t off, std::size_t len) {
  detail::check(off + len <= x->n, "slice: out of range");
  auto out = tp.alloc({static_cast<int>(len)});
  std::copy(x->v + off, x->v + off + len, out->v);
  tp.push([out, x, off, len] {
    for (std::size_t i = 0; i < len; ++i) x->g[off + i] += out->g[i];
  });
  return out;
}

/// Embedding lookup: one row of a [V x E] table.
template <class Real>
Ref<Real> row_lookup(Tape<Real>& tp, Ref<Real> table, int id) {
  detail::check(table->shape.size() == 2, "row_lookup: needs a matrix");
  detail::check(id >= 0 && id < table->rows(), "row_lookup: id out of range");
  const int e = table->cols();
  auto out = tp.alloc({e});
  std::copy(table->v + static_cast<std::size_t>(id) * e,
            table->v + static_cast<std::size_t>(id + 1) * e, out->v);
  tp.push([out, table, id, e] {
    Real* tg = table->g + static_cast<std::size_t>(id) * e;
    for (int j = 0; j < e; ++j) tg[j] += out->g[j];
  });
  return out;
}

/// Scalar cross entropy from logits: -log softmax(x)[target], fused and
/// stable (log-sum-exp with max subtraction).
template <class Real>
Ref<Real> cross_entropy_logits(Tape<Real>& tp, Ref<Real> x, int target) {
  detail::check(target >= 0 && target < static_cast<int>(x->n),
                "cross_entropy: target out of range");
  Real mx = x->v[0];
  for (std::size_t i = 1; i < x->n; ++i) mx = std::max(mx, x->v[i]);
  Real z = 0;
  for (std::size_t i = 0; i < x->n; ++i) z += std::exp(x->v[i] - mx);
  const Real lse = mx + std::log(z);
  auto out = tp.alloc({1});
  out->v[0] = lse - x->v[static_cast<std::size_t>(target)];
  tp.push([out, x, target, lse] {
    const Real go = out->g[0];
    for (std::size_t i = 0; i < x->n; ++i) {
      Real p = std::exp(x->v[i] - lse);
      if (static_cast<int>(i) == target) p -= Real(1);
      x->g[i] += p * go;
    }
  });
  return out;
}

/// Broadcast-add a scalar var to a vector (attention bias b_a).
template <class Real>
Ref<Real> add_scalar_bias(Tape<Real>& tp, Ref<Real> x, Ref<Real> b) {
  detail::check(b->n == 1, "add_scalar_bias: bias must be scalar");
  auto out = tp.alloc(x->shape);
  for (std::size_t i = 0; i < out->n; ++i) out->v[i] = x->v[i] + b->v[0];
  tp.push([out, x, b] {
    for (std::size_t i = 0; i < out->n; ++i) {
      x->g[i] += out->g[i];
      b->g[0] += out->g[i];
    }
  });
  return out;
}

template <class Real>
Ref<Real> sum_scalars(Tape<Real>& tp, const std::vector<Ref<Real>>& xs) {
  detail::check(!xs.empty(), "sum_scalars: no inputs");
  auto out = tp.alloc({1});
  for (auto x : xs) {
    detail::check(x->n == 1, "sum_scalars: non-scalar input");
    out->v[0] += x->v[0];
  }
  tp.push([out, xs] {
    for (auto x : xs) x->g[0] += out->g[0];
  });
  return out;
}

}  // namespace ops
}  // namespace mmtl
