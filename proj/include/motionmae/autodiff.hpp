#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "motionmae/error.hpp"
#include "motionmae/tensor.hpp"

namespace mmae {

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
// is topologically sorted by construction and backward() walks it in reverse.
class Tape {
 public:
  // The backward rule receives the gradient flowing into the node's output.
  using Backprop = std::function<void(Tape&, std::span<const double>)>;

  // recording == false evaluates values only; no backward rules are kept.
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }
  Var leaf(Tensor value) { return push(std::move(value), recording_, nullptr); }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Gradient of the last backward() loss with respect to v (zeros if v was unreached).
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor(n.value.shape());
    return Tensor(n.value.shape(), n.grad);
  }

  void backward(Var loss) {
    if (loss.tape != this) throw ConfigError("backward: loss was recorded on a different tape");
    const Node& out = node(loss);
    if (out.value.numel() != 1)
      throw ConfigError("backward: loss must be scalar, got shape " + shape_str(out.value.shape()));
    if (!out.requires_grad) throw ConfigError("backward: loss is detached from every tracked input");
    for (auto& n : nodes_) n.grad.clear();
    nodes_[loss.id].grad.assign(1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backprop || n.grad.empty()) continue;
      n.backprop(*this, std::span<const double>(n.grad));
    }
  }

  // Recording helper used by the op library.
  Var push(Tensor value, bool requires_grad, Backprop backprop) {
    if (!value.all_finite())
      throw NumericalError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && recording_;
    if (n.requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  // Mutable gradient accumulator of v, allocated on demand. Empty when v is untracked.
  std::span<double> grad_buffer(Var v) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  const Node& node(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ConfigError("variable does not belong to this tape");
    return nodes_[v.id];
  }

  bool recording_;
  std::vector<Node> nodes_;
};

namespace ad {

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ConfigError("operands live on different tapes");
  return *a.tape;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ConfigError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline bool tracked(Tape& tape, Var v) { return tape.requires_grad(v); }

inline bool any_tracked(Tape& tape, std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (tape.requires_grad(v)) return true;
  return false;
}

}  // namespace detail

inline const Tensor& val(Var v) { return v.tape->value(v); }

// a[m,k] * b[k,n]
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require_rank2(A, "matmul");
  detail::require_rank2(B, "matmul");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k)
    throw ConfigError("matmul: inner dimensions disagree " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor C({m, n});
  kernels::matmul(A.data(), B.data(), C.data(), m, k, n);
  return tape.push(std::move(C), detail::any_tracked(tape, {a, b}),
                   [a, b, m, k, n](Tape& t, std::span<const double> g) {
                     if (auto ga = t.grad_buffer(a); !ga.empty())
                       kernels::matmul_nt_acc(g, t.value(b).data(), ga, m, n, k);
                     if (auto gb = t.grad_buffer(b); !gb.empty())
                       kernels::matmul_tn_acc(t.value(a).data(), g, gb, m, k, n);
                   });
}

// a[m,k] * b[n,k]^T
inline Var matmul_nt(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require_rank2(A, "matmul_nt");
  detail::require_rank2(B, "matmul_nt");
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  if (B.cols() != k)
    throw ConfigError("matmul_nt: inner dimensions disagree " + shape_str(A.shape()) + " x " +
                      shape_str(B.shape()) + "^T");
  Tensor C({m, n});
  kernels::matmul_nt_acc(A.data(), B.data(), C.data(), m, k, n);
  return tape.push(std::move(C), detail::any_tracked(tape, {a, b}),
                   [a, b, m, k, n](Tape& t, std::span<const double> g) {
                     // dA = G B, dB = G^T A
                     if (auto ga = t.grad_buffer(a); !ga.empty()) {
                       std::vector<double> tmp(m * k);
                       kernels::matmul(g, t.value(b).data(), tmp, m, n, k);
                       for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
                     }
                     if (auto gb = t.grad_buffer(b); !gb.empty())
                       kernels::matmul_tn_acc(g, t.value(a).data(), gb, m, n, k);
                   });
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.shape() != B.shape())
    throw ConfigError("add: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor C = A;
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] += B[i];
  return tape.push(std::move(C), detail::any_tracked(tape, {a, b}), [a, b](Tape& t, std::span<const double> g) {
    for (Var v : {a, b})
      if (auto gv = t.grad_buffer(v); !gv.empty())
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.shape() != B.shape())
    throw ConfigError("sub: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor C = A;
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] -= B[i];
  return tape.push(std::move(C), detail::any_tracked(tape, {a, b}), [a, b](Tape& t, std::span<const double> g) {
    if (auto ga = t.grad_buffer(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = t.grad_buffer(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.shape() != B.shape())
    throw ConfigError("mul: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor C = A;
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] *= B[i];
  return tape.push(std::move(C), detail::any_tracked(tape, {a, b}), [a, b](Tape& t, std::span<const double> g) {
    if (auto ga = t.grad_buffer(a); !ga.empty()) {
      const Tensor& B = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (auto gb = t.grad_buffer(b); !gb.empty()) {
      const Tensor& A = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tape& tape = *a.tape;
  Tensor C = tape.value(a);
  for (double& v : C.data()) v *= s;
  return tape.push(std::move(C), detail::tracked(tape, a), [a, s](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

// x[N,K] + b broadcast over rows; b has K elements (shape [K] or [1,K]).
inline Var add_bias(Var x, Var b) {
  Tape& tape = detail::same_tape(x, b);
  const Tensor& X = tape.value(x);
  const Tensor& Bv = tape.value(b);
  detail::require_rank2(X, "add_bias");
  const std::size_t n = X.rows(), k = X.cols();
  if (Bv.numel() != k) throw ConfigError("add_bias: bias length " + std::to_string(Bv.numel()) + " != " + std::to_string(k));
  Tensor C = X;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) C(i, j) += Bv[j];
  return tape.push(std::move(C), detail::any_tracked(tape, {x, b}),
                   [x, b, n, k](Tape& t, std::span<const double> g) {
                     if (auto gx = t.grad_buffer(x); !gx.empty())
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     if (auto gb = t.grad_buffer(b); !gb.empty())
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
                   });
}

inline Var transpose(Var a) {
  Tape& tape = *a.tape;
  const Tensor& A = tape.value(a);
  detail::require_rank2(A, "transpose");
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C(j, i) = A(i, j);
  return tape.push(std::move(C), detail::tracked(tape, a), [a, m, n](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

// Softmax along `axis`, max-subtracted.
inline Var softmax(Var x, std::size_t axis) {
  Tape& tape = *x.tape;
  const Tensor& X = tape.value(x);
  if (axis >= X.rank()) throw ConfigError("softmax: axis " + std::to_string(axis) + " out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= X.dim(d);
  for (std::size_t d = axis + 1; d < X.rank(); ++d) inner *= X.dim(d);
  const std::size_t len = X.dim(axis);
  Tensor Y(X.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, X[base + l * inner]);
      double s = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(X[base + l * inner] - mx);
        Y[base + l * inner] = e;
        s += e;
      }
      for (std::size_t l = 0; l < len; ++l) Y[base + l * inner] /= s;
    }
  // The output lands at index size(); its backward rule reads it from there.
  const std::size_t yid = tape.size();
  return tape.push(std::move(Y), detail::tracked(tape, x), [x, outer, inner, len, yid](Tape& t, std::span<const double> g) {
    const Tensor& Y = t.value(Var{&t, yid});
    auto gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * Y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          gx[idx] += Y[idx] * (g[idx] - dot);
        }
      }
  });
}

// Layer normalization over the last axis with population variance.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const Tensor& X = tape.value(x);
  const std::size_t d = X.shape().back();
  const std::size_t rows = X.numel() / d;
  const Tensor& G = tape.value(gamma);
  const Tensor& B = tape.value(beta);
  if (G.numel() != d || B.numel() != d)
    throw ConfigError("layer_norm: gamma/beta length must equal " + std::to_string(d));
  Tensor Y(X.shape());
  std::vector<double> xhat(X.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * rstd[r];
      Y[r * d + j] = xhat[r * d + j] * G[j] + B[j];
    }
  }
  return tape.push(std::move(Y), detail::any_tracked(tape, {x, gamma, beta}),
                   [x, gamma, beta, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
                       Tape& t, std::span<const double> g) {
                     const Tensor& G = t.value(gamma);
                     if (auto gg = t.grad_buffer(gamma); !gg.empty())
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
                     if (auto gb = t.grad_buffer(beta); !gb.empty())
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                     if (auto gx = t.grad_buffer(x); !gx.empty()) {
                       const double inv_d = 1.0 / static_cast<double>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dxh = g[r * d + j] * G[j];
                           s1 += dxh;
                           s2 += dxh * xhat[r * d + j];
                         }
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dxh = g[r * d + j] * G[j];
                           gx[r * d + j] += rstd[r] * (dxh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                         }
                       }
                     }
                   });
}

// tanh-approximated GELU.
inline Var gelu(Var x) {
  Tape& tape = *x.tape;
  Tensor Y = tape.value(x);
  for (double& v : Y.data()) v = kernels::gelu(v);
  return tape.push(std::move(Y), detail::tracked(tape, x), [x](Tape& t, std::span<const double> g) {
    const Tensor& X = t.value(x);
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernels::gelu_grad(X[i]);
  });
}

// Columns [start, start+count) of a matrix.
inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
  Tape& tape = *x.tape;
  const Tensor& X = tape.value(x);
  detail::require_rank2(X, "slice_cols");
  const std::size_t n = X.rows(), k = X.cols();
  if (count == 0 || start + count > k) throw ConfigError("slice_cols: range out of bounds");
  Tensor Y({n, count});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) Y(i, j) = X(i, start + j);
  return tape.push(std::move(Y), detail::tracked(tape, x), [x, n, k, start, count](Tape& t, std::span<const double> g) {
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * k + start + j] += g[i * count + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  Tape& tape = *parts.front().tape;
  const std::size_t n = tape.value(parts.front()).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool tracked = false;
  for (Var p : parts) {
    detail::same_tape(parts.front(), p);
    const Tensor& P = tape.value(p);
    detail::require_rank2(P, "concat_cols");
    if (P.rows() != n) throw ConfigError("concat_cols: row count mismatch");
    widths.push_back(P.cols());
    total += P.cols();
    tracked = tracked || tape.requires_grad(p);
  }
  Tensor Y({n, total});
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& P = tape.value(parts[p]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[p]; ++j) Y(i, off + j) = P(i, j);
    off += widths[p];
  }
  return tape.push(std::move(Y), tracked, [parts, widths, n, total](Tape& t, std::span<const double> g) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (auto gp = t.grad_buffer(parts[p]); !gp.empty())
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) gp[i * widths[p] + j] += g[i * total + off + j];
      off += widths[p];
    }
  });
}

// Rows of x at the given indices, in order.
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  Tape& tape = *x.tape;
  const Tensor& X = tape.value(x);
  detail::require_rank2(X, "gather_rows");
  const std::size_t k = X.cols();
  if (index.empty()) throw ConfigError("gather_rows: empty index list");
  Tensor Y({index.size(), k});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= X.rows()) throw ConfigError("gather_rows: index out of range");
    for (std::size_t j = 0; j < k; ++j) Y(r, j) = X(index[r], j);
  }
  return tape.push(std::move(Y), detail::tracked(tape, x), [x, k, index = std::move(index)](Tape& t, std::span<const double> g) {
    auto gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < k; ++j) gx[index[r] * k + j] += g[r * k + j];
  });
}

// Builds an [n, K] matrix whose rows at `src_index` come from src (in order)
// and whose rows at `fill_index` are copies of the single row `fill`.
inline Var merge_rows(Var src, const std::vector<std::size_t>& src_index, Var fill,
                      const std::vector<std::size_t>& fill_index, std::size_t n) {
  Tape& tape = detail::same_tape(src, fill);
  const Tensor& S = tape.value(src);
  const Tensor& F = tape.value(fill);
  detail::require_rank2(S, "merge_rows");
  const std::size_t k = S.cols();
  if (S.rows() != src_index.size()) throw ConfigError("merge_rows: source row count mismatch");
  if (F.numel() != k) throw ConfigError("merge_rows: fill row width mismatch");
  if (src_index.size() + fill_index.size() != n) throw ConfigError("merge_rows: indices do not cover output");
  Tensor Y({n, k});
  std::vector<char> seen(n, 0);
  for (std::size_t r = 0; r < src_index.size(); ++r) {
    const std::size_t i = src_index[r];
    if (i >= n || seen[i]) throw ConfigError("merge_rows: indices are not a partition");
    seen[i] = 1;
    for (std::size_t j = 0; j < k; ++j) Y(i, j) = S(r, j);
  }
  for (std::size_t i : fill_index) {
    if (i >= n || seen[i]) throw ConfigError("merge_rows: indices are not a partition");
    seen[i] = 1;
    for (std::size_t j = 0; j < k; ++j) Y(i, j) = F[j];
  }
  return tape.push(std::move(Y), detail::any_tracked(tape, {src, fill}),
                   [src, fill, src_index, fill_index, k](Tape& t, std::span<const double> g) {
                     if (auto gs = t.grad_buffer(src); !gs.empty())
                       for (std::size_t r = 0; r < src_index.size(); ++r)
                         for (std::size_t j = 0; j < k; ++j) gs[r * k + j] += g[src_index[r] * k + j];
                     if (auto gf = t.grad_buffer(fill); !gf.empty())
                       for (std::size_t i : fill_index)
                         for (std::size_t j = 0; j < k; ++j) gf[j] += g[i * k + j];
                   });
}

// Column-wise mean over rows: [N,K] -> [1,K].
inline Var mean_rows(Var x) {
  Tape& tape = *x.tape;
  const Tensor& X = tape.value(x);
  detail::require_rank2(X, "mean_rows");
  const std::size_t n = X.rows(), k = X.cols();
  Tensor Y({1, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) Y[j] += X(i, j);
  for (double& v : Y.data()) v /= static_cast<double>(n);
  return tape.push(std::move(Y), detail::tracked(tape, x), [x, n, k](Tape& t, std::span<const double> g) {
    auto gx = t.grad_buffer(x);
    const double s = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += g[j] * s;
  });
}

inline Var sum(Var x) {
  Tape& tape = *x.tape;
  double s = 0.0;
  for (double v : tape.value(x).data()) s += v;
  return tape.push(Tensor::scalar(s), detail::tracked(tape, x), [x](Tape& t, std::span<const double> g) {
    auto gx = t.grad_buffer(x);
    for (double& v : gx) v += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(val(x).numel())); }

inline Var square(Var x) { return mul(x, x); }

enum class LossKind { mse, l1, smooth_l1 };

// Mean elementwise reconstruction loss between pred and a constant target of the same shape.
inline Var reconstruction_loss(Var pred, const Tensor& target, LossKind kind) {
  Tape& tape = *pred.tape;
  const Tensor& P = tape.value(pred);
  if (P.shape() != target.shape())
    throw ConfigError("reconstruction_loss: shape mismatch " + shape_str(P.shape()) + " vs " +
                      shape_str(target.shape()));
  const std::size_t n = P.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = P[i] - target[i];
    switch (kind) {
      case LossKind::mse: s += d * d; break;
      case LossKind::l1: s += std::abs(d); break;
      case LossKind::smooth_l1: s += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; break;
    }
  }
  s /= static_cast<double>(n);
  return tape.push(Tensor::scalar(s), detail::tracked(tape, pred),
                   [pred, target, kind, n](Tape& t, std::span<const double> g) {
                     const Tensor& P = t.value(pred);
                     auto gp = t.grad_buffer(pred);
                     const double c = g[0] / static_cast<double>(n);
                     for (std::size_t i = 0; i < n; ++i) {
                       const double d = P[i] - target[i];
                       double dd = 0.0;
                       switch (kind) {
                         case LossKind::mse: dd = 2.0 * d; break;
                         case LossKind::l1: dd = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); break;
                         case LossKind::smooth_l1:
                           dd = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
                           break;
                       }
                       gp[i] += c * dd;
                     }
                   });
}

// Softmax cross-entropy of a single logit row against a class index.
inline Var cross_entropy(Var logits, std::size_t label) {
  Tape& tape = *logits.tape;
  const Tensor& L = tape.value(logits);
  const std::size_t c = L.numel();
  if (label >= c) throw ConfigError("cross_entropy: label out of range");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : L.data()) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : L.data()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  std::vector<double> prob(c);
  for (std::size_t i = 0; i < c; ++i) prob[i] = std::exp(L[i] - lse);
  return tape.push(Tensor::scalar(lse - L[label]), detail::tracked(tape, logits),
                   [logits, label, prob = std::move(prob)](Tape& t, std::span<const double> g) {
                     auto gl = t.grad_buffer(logits);
                     for (std::size_t i = 0; i < prob.size(); ++i)
                       gl[i] += g[0] * (prob[i] - (i == label ? 1.0 : 0.0));
                   });
}

}  // namespace ad

}  // namespace mmae
