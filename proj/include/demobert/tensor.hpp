#pragma once

// Reverse-mode autodiff over dense float64 tensors.
//
// Define-by-run: every forward pass records its operations onto a fresh Tape.
// Tensors are plain values (shape + row-major doubles); a tensor that takes
// part in differentiation additionally carries a node id on the tape that
// recorded it. backward() walks the tape in exact reverse recording order and
// finally folds leaf gradients into their owning Parameters.

#include <cassert>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "demobert/util.hpp"

namespace demobert {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

class Tape;

struct Tensor {
  Shape shape;
  std::vector<double> values;
  Tape* tape = nullptr;
  int node = -1;  // id on the tape; -1 means constant w.r.t. differentiation

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), values(size_t(numel(shape)), 0.0) {}
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (int64_t(values.size()) != numel(shape))
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
  }

  int64_t size() const { return int64_t(values.size()); }
  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[size_t(i)]; }
  bool tracked() const { return node >= 0; }

  double& at(int i) { return values[size_t(i)]; }
  double at(int i) const { return values[size_t(i)]; }
  double& at(int i, int j) { return values[size_t(i) * shape[1] + j]; }
  double at(int i, int j) const { return values[size_t(i) * shape[1] + j]; }
  double& at(int i, int j, int k) {
    return values[(size_t(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k) const {
    return values[(size_t(i) * shape[1] + j) * shape[2] + k];
  }

  // gradient buffer on the tape (present only for tracked tensors)
  const std::vector<double>& grad() const;
};

inline Tensor full(Shape s, double v) {
  Tensor t(std::move(s));
  std::fill(t.values.begin(), t.values.end(), v);
  return t;
}

inline Tensor randn(Shape s, Rng& rng, double stdev = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.values) v = rng.normal() * stdev;
  return t;
}

#ifndef NDEBUG
inline void debug_check_finite(const Tensor& t, const char* op) {
  for (double v : t.values)
    assert(std::isfinite(v) && "non-finite value produced by forward op" && op);
}
#else
inline void debug_check_finite(const Tensor&, const char*) {}
#endif

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> grad;  // persistent accumulator, same layout as tensor
  bool trainable = true;
  bool decay_exempt = false;  // biases and layer-norm gains skip weight decay

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  double grad_norm() const {
    double s = 0.0;
    for (double g : grad) s += g * g;
    return std::sqrt(s);
  }
};

// Owns parameters in creation order; names must be unique. Deque storage so
// Parameter addresses stay stable as the store grows.
class ParamStore {
 public:
  Parameter& create(const std::string& name, Tensor init, bool decay_exempt = false) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    params_.push_back(Parameter{name, std::move(init), {}, true, decay_exempt});
    Parameter& p = params_.back();
    p.grad.assign(p.tensor.values.size(), 0.0);
    index_[name] = &p;
    return p;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return *it->second;
  }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return *it->second;
  }

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  size_t count() const { return params_.size(); }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) p.trainable = trainable;
  }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, Parameter*> index_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  // dout is the node's accumulated output gradient.
  using BackFn = std::function<void(const std::vector<double>& dout, Tape&)>;

  int push(int64_t out_size, BackFn fn) {
    nodes_.push_back(Node{std::vector<double>(size_t(out_size), 0.0), std::move(fn)});
    return int(nodes_.size()) - 1;
  }

  // Watch a parameter: returns a tracked copy whose leaf node folds the
  // accumulated gradient back into p.grad. Frozen parameters are treated as
  // constants (their grad stays zero while frozen).
  Tensor leaf(Parameter& p) {
    Tensor t = p.tensor;
    if (!p.trainable) return t;
    Parameter* pp = &p;
    t.tape = this;
    t.node = push(t.size(), [pp](const std::vector<double>& dout, Tape&) {
      for (size_t i = 0; i < dout.size(); ++i) pp->grad[i] += dout[i];
    });
    return t;
  }

  // Track a plain tensor as a differentiation root (used in tests and for
  // gradient probes on non-parameter inputs).
  Tensor watch(Tensor t, std::vector<double>* grad_out = nullptr) {
    t.tape = this;
    t.node = push(t.size(), [grad_out](const std::vector<double>& dout, Tape&) {
      if (grad_out) {
        grad_out->resize(dout.size());
        for (size_t i = 0; i < dout.size(); ++i) (*grad_out)[i] += dout[i];
      }
    });
    return t;
  }

  std::vector<double>& grad(int id) { return nodes_[size_t(id)].grad; }
  const std::vector<double>& grad(int id) const { return nodes_[size_t(id)].grad; }

  void accum(int id, const double* g, int64_t n) {
    if (id < 0) return;
    auto& dst = nodes_[size_t(id)].grad;
    for (int64_t i = 0; i < n; ++i) dst[size_t(i)] += g[i];
  }

  // Reverse sweep from a scalar loss. Node gradients are reset first, so each
  // call is an independent pass; parameter gradients accumulate across calls
  // until ParamStore::zero_grads().
  void backward(const Tensor& loss) {
    if (!loss.tracked() || loss.tape != this)
      throw ContractError("backward: loss is not recorded on this tape");
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    nodes_[size_t(loss.node)].grad[0] = 1.0;
    for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.fn) n.fn(n.grad, *this);
    }
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<double> grad;
    BackFn fn;
  };
  std::vector<Node> nodes_;
};

inline const std::vector<double>& Tensor::grad() const {
  if (!tracked()) throw StateError("grad() on a tensor that is not on a tape");
  return tape->grad(node);
}

// Per-pass context threaded through model code. tape == nullptr means pure
// inference (parameters enter as constants, nothing is recorded). Dropout
// draws from a stream keyed by (seed, step, call index) so a pass is
// reproducible regardless of what ran before it.
struct Pass {
  Tape* tape = nullptr;
  bool train = false;
  uint64_t dropout_seed = 0;
  uint64_t step = 0;
  uint64_t dropout_calls = 0;
};

inline Tensor use(Parameter& p, Pass& pass) {
  return pass.tape ? pass.tape->leaf(p) : p.tensor;
}

// ---------------------------------------------------------------------------
// Matmul kernels (C += op(A) * op(B)), row-major
// ---------------------------------------------------------------------------

namespace kernels {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + size_t(i) * k;
    double* ci = c + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void mm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + size_t(i) * k;
    double* ci = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + size_t(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + size_t(i) * k;
    const double* bi = b + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + size_t(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace detail {

inline Tape* pick_tape(const Tensor& a) { return a.tracked() ? a.tape : nullptr; }
inline Tape* pick_tape(const Tensor& a, const Tensor& b) {
  if (a.tracked() && b.tracked() && a.tape != b.tape)
    throw ContractError("operands recorded on different tapes");
  return a.tracked() ? a.tape : (b.tracked() ? b.tape : nullptr);
}

}  // namespace detail

// add: identical shapes, or bias broadcast where b's shape matches the last
// axis of a (row-wise add).
inline Tensor add(const Tensor& a, const Tensor& b) {
  Tape* tp = detail::pick_tape(a, b);
  if (a.shape == b.shape) {
    Tensor out(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.values[size_t(i)] = a.values[size_t(i)] + b.values[size_t(i)];
    debug_check_finite(out, "add");
    if (tp) {
      int aid = a.node, bid = b.node;
      out.tape = tp;
      out.node = tp->push(out.size(), [aid, bid](const std::vector<double>& dout, Tape& t) {
        t.accum(aid, dout.data(), int64_t(dout.size()));
        t.accum(bid, dout.data(), int64_t(dout.size()));
      });
    }
    return out;
  }
  if (b.rank() == 1 && a.rank() >= 1 && a.shape.back() == b.dim(0)) {
    const int h = b.dim(0);
    const int64_t rows = a.size() / h;
    Tensor out(a.shape);
    for (int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < h; ++j)
        out.values[size_t(r * h + j)] = a.values[size_t(r * h + j)] + b.values[size_t(j)];
    debug_check_finite(out, "add");
    if (tp) {
      int aid = a.node, bid = b.node;
      out.tape = tp;
      out.node = tp->push(out.size(), [aid, bid, rows, h](const std::vector<double>& dout, Tape& t) {
        t.accum(aid, dout.data(), int64_t(dout.size()));
        if (bid >= 0) {
          auto& db = t.grad(bid);
          for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < h; ++j) db[size_t(j)] += dout[size_t(r * h + j)];
        }
      });
    }
    return out;
  }
  throw ShapeError("add: incompatible shapes " + shape_str(a.shape) + " and " + shape_str(b.shape));
}

inline Tensor scale(const Tensor& a, double k) {
  Tensor out(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) out.values[size_t(i)] = a.values[size_t(i)] * k;
  debug_check_finite(out, "scale");
  if (Tape* tp = detail::pick_tape(a)) {
    int aid = a.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [aid, k](const std::vector<double>& dout, Tape& t) {
      if (aid < 0) return;
      auto& da = t.grad(aid);
      for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i] * k;
    });
  }
  return out;
}

// elementwise product, identical shapes
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw ShapeError("mul: shapes differ " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tape* tp = detail::pick_tape(a, b);
  Tensor out(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) out.values[size_t(i)] = a.values[size_t(i)] * b.values[size_t(i)];
  debug_check_finite(out, "mul");
  if (tp) {
    int aid = a.node, bid = b.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [aid, bid, av = a.values, bv = b.values](
                                        const std::vector<double>& dout, Tape& t) {
      if (aid >= 0) {
        auto& da = t.grad(aid);
        for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i] * bv[i];
      }
      if (bid >= 0) {
        auto& db = t.grad(bid);
        for (size_t i = 0; i < dout.size(); ++i) db[i] += dout[i] * av[i];
      }
    });
  }
  return out;
}

// scale row r of x by s[r]; x is [R, C], s is [R]
inline Tensor row_scale(const Tensor& x, const Tensor& s) {
  if (x.rank() != 2 || s.rank() != 1 || x.dim(0) != s.dim(0))
    throw ShapeError("row_scale: want [R,C] and [R], got " + shape_str(x.shape) + " and " +
                     shape_str(s.shape));
  Tape* tp = detail::pick_tape(x, s);
  const int R = x.dim(0), C = x.dim(1);
  Tensor out(x.shape);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(r, c) = x.at(r, c) * s.at(r);
  debug_check_finite(out, "row_scale");
  if (tp) {
    int xid = x.node, sid = s.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, sid, xv = x.values, sv = s.values, R, C](
                                        const std::vector<double>& dout, Tape& t) {
      if (xid >= 0) {
        auto& dx = t.grad(xid);
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c) dx[size_t(r) * C + c] += dout[size_t(r) * C + c] * sv[size_t(r)];
      }
      if (sid >= 0) {
        auto& ds = t.grad(sid);
        for (int r = 0; r < R; ++r) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c) acc += dout[size_t(r) * C + c] * xv[size_t(r) * C + c];
          ds[size_t(r)] += acc;
        }
      }
    });
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  Tape* tp = detail::pick_tape(a, b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  kernels::mm_nn(a.values.data(), b.values.data(), out.values.data(), m, k, n);
  debug_check_finite(out, "matmul");
  if (tp) {
    int aid = a.node, bid = b.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [aid, bid, av = a.values, bv = b.values, m, k, n](
                                        const std::vector<double>& dout, Tape& t) {
      if (aid >= 0)  // dA = dC * B^T
        kernels::mm_nt(dout.data(), bv.data(), t.grad(aid).data(), m, n, k);
      if (bid >= 0)  // dB = A^T * dC
        kernels::mm_tn(av.data(), dout.data(), t.grad(bid).data(), m, k, n);
    });
  }
  return out;
}

// batched matmul: a is [..., m, k], b is [..., k, n] with equal leading dims
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() < 3 || b.rank() != a.rank())
    throw ShapeError("bmm: want equal-rank >=3 operands, got " + shape_str(a.shape) + " and " +
                     shape_str(b.shape));
  for (int i = 0; i + 2 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("bmm: leading dims disagree, " + shape_str(a.shape) + " vs " +
                       shape_str(b.shape));
  const int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  if (b.dim(b.rank() - 2) != k)
    throw ShapeError("bmm: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  const int n = b.dim(b.rank() - 1);
  int64_t batch = 1;
  for (int i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);

  Shape os(a.shape.begin(), a.shape.end() - 2);
  os.push_back(m);
  os.push_back(n);
  Tensor out(os);
  for (int64_t q = 0; q < batch; ++q)
    kernels::mm_nn(a.values.data() + q * m * k, b.values.data() + q * k * n,
                   out.values.data() + q * m * n, m, k, n);
  debug_check_finite(out, "bmm");
  if (Tape* tp = detail::pick_tape(a, b)) {
    int aid = a.node, bid = b.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [aid, bid, av = a.values, bv = b.values, batch, m, k, n](
                                        const std::vector<double>& dout, Tape& t) {
      for (int64_t q = 0; q < batch; ++q) {
        const double* dc = dout.data() + q * m * n;
        if (aid >= 0)
          kernels::mm_nt(dc, bv.data() + q * k * n, t.grad(aid).data() + q * m * k, m, n, k);
        if (bid >= 0)
          kernels::mm_tn(av.data() + q * m * k, dc, t.grad(bid).data() + q * k * n, m, k, n);
      }
    });
  }
  return out;
}

namespace detail {

// strided copy with axes i<->j swapped; used forward and backward
inline void swap_axes_copy(const Shape& in_shape, const double* src, double* dst, int ax0,
                           int ax1) {
  const int r = int(in_shape.size());
  Shape out_shape = in_shape;
  std::swap(out_shape[size_t(ax0)], out_shape[size_t(ax1)]);
  std::vector<int64_t> in_stride(size_t(r), 1), out_stride(size_t(r), 1);
  for (int i = r - 2; i >= 0; --i) in_stride[size_t(i)] = in_stride[size_t(i) + 1] * in_shape[size_t(i) + 1];
  for (int i = r - 2; i >= 0; --i) out_stride[size_t(i)] = out_stride[size_t(i) + 1] * out_shape[size_t(i) + 1];
  const int64_t n = numel(in_shape);
  std::vector<int> idx(size_t(r), 0);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t o = 0;
    for (int d = 0; d < r; ++d) {
      int src_axis = d == ax0 ? ax1 : (d == ax1 ? ax0 : d);
      o += int64_t(idx[size_t(src_axis)]) * out_stride[size_t(d)];
    }
    dst[o] = src[flat];
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[size_t(d)] < in_shape[size_t(d)]) break;
      idx[size_t(d)] = 0;
    }
  }
}

}  // namespace detail

inline Tensor swap_axes(const Tensor& x, int ax0, int ax1) {
  if (ax0 < 0 || ax1 < 0 || ax0 >= x.rank() || ax1 >= x.rank())
    throw ShapeError("swap_axes: axis out of range for " + shape_str(x.shape));
  Shape os = x.shape;
  std::swap(os[size_t(ax0)], os[size_t(ax1)]);
  Tensor out(os);
  detail::swap_axes_copy(x.shape, x.values.data(), out.values.data(), ax0, ax1);
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, os, ax0, ax1](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      std::vector<double> dx(dout.size());
      detail::swap_axes_copy(os, dout.data(), dx.data(), ax0, ax1);
      t.accum(xid, dx.data(), int64_t(dx.size()));
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape s) {
  if (numel(s) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(s));
  Tensor out(std::move(s), x.values);
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid](const std::vector<double>& dout, Tape& t) {
      t.accum(xid, dout.data(), int64_t(dout.size()));
    });
  }
  return out;
}

// last-axis concatenation of 2-D tensors with equal row counts; q = 0 parts
// allowed (identity contribution)
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const int R = parts[0].dim(0);
  int C = 0;
  Tape* tp = nullptr;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != R)
      throw ShapeError("concat_cols: batch dims differ, " + shape_str(parts[0].shape) + " vs " +
                       shape_str(p.shape));
    C += p.dim(1);
    if (p.tracked()) {
      if (tp && tp != p.tape) throw ContractError("concat_cols: operands on different tapes");
      tp = p.tape;
    }
  }
  Tensor out({R, C});
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.dim(1);
    for (int r = 0; r < R; ++r)
      std::memcpy(out.values.data() + size_t(r) * C + off, p.values.data() + size_t(r) * w,
                  size_t(w) * sizeof(double));
    off += w;
  }
  if (tp) {
    std::vector<int> ids;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      ids.push_back(p.node);
      widths.push_back(p.dim(1));
    }
    out.tape = tp;
    out.node = tp->push(out.size(), [ids, widths, R, C](const std::vector<double>& dout, Tape& t) {
      int off2 = 0;
      for (size_t i = 0; i < ids.size(); ++i) {
        const int w = widths[i];
        if (ids[i] >= 0 && w > 0) {
          auto& dp = t.grad(ids[i]);
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < w; ++c) dp[size_t(r) * w + c] += dout[size_t(r) * C + off2 + c];
        }
        off2 += w;
      }
    });
  }
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b) { return concat_cols({a, b}); }

inline Tensor slice_cols(const Tensor& x, int start, int len) {
  if (x.rank() != 2 || start < 0 || len < 0 || start + len > x.dim(1))
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " + shape_str(x.shape));
  const int R = x.dim(0), C = x.dim(1);
  Tensor out({R, len});
  for (int r = 0; r < R; ++r)
    std::memcpy(out.values.data() + size_t(r) * len, x.values.data() + size_t(r) * C + start,
                size_t(len) * sizeof(double));
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, start, len, R, C](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      auto& dx = t.grad(xid);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < len; ++c) dx[size_t(r) * C + start + c] += dout[size_t(r) * len + c];
    });
  }
  return out;
}

// gather rows of a 2-D tensor; backward scatter-adds (repeated indices sum)
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  if (x.rank() != 2) throw ShapeError("gather_rows: want 2-D input, got " + shape_str(x.shape));
  const int R = x.dim(0), C = x.dim(1);
  for (int r : rows)
    if (r < 0 || r >= R)
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of " + shape_str(x.shape));
  Tensor out({int(rows.size()), C});
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.values.data() + i * size_t(C), x.values.data() + size_t(rows[i]) * C,
                size_t(C) * sizeof(double));
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, rows, C](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      auto& dx = t.grad(xid);
      for (size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < C; ++c) dx[size_t(rows[i]) * C + c] += dout[i * size_t(C) + c];
    });
  }
  return out;
}

// Embedding lookup straight from a parameter table: avoids copying the whole
// table onto the tape; backward scatter-adds into the parameter gradient.
inline Tensor embedding_lookup(Parameter& table, const std::vector<int>& ids, Pass& pass) {
  const Tensor& tb = table.tensor;
  if (tb.rank() != 2) throw ShapeError("embedding_lookup: table must be 2-D");
  const int V = tb.dim(0), H = tb.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw DataError("embedding_lookup: id " + std::to_string(id) + " out of vocabulary size " +
                      std::to_string(V));
  Tensor out({int(ids.size()), H});
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.values.data() + i * size_t(H), tb.values.data() + size_t(ids[i]) * H,
                size_t(H) * sizeof(double));
  if (pass.tape && table.trainable) {
    Parameter* pp = &table;
    out.tape = pass.tape;
    out.node = pass.tape->push(out.size(), [pp, ids, H](const std::vector<double>& dout, Tape&) {
      for (size_t i = 0; i < ids.size(); ++i)
        for (int c = 0; c < H; ++c) pp->grad[size_t(ids[i]) * H + c] += dout[i * size_t(H) + c];
    });
  }
  return out;
}

namespace detail {

// softmax over the trailing axis with optional 0/1 keep-mask per row; max is
// taken over kept entries only so padded rows match their unpadded twins
// bit for bit. Masked-out entries get exactly 0.
inline void softmax_rows(const double* x, const double* keep, double* y, int64_t rows, int cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    const double* kr = keep ? keep + r * cols : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c)
      if (!kr || kr[c] != 0.0) mx = std::max(mx, xr[c]);
    if (mx == -std::numeric_limits<double>::infinity())
      throw ContractError("softmax: row has no unmasked entries");
    double z = 0.0;
    for (int c = 0; c < cols; ++c) {
      yr[c] = (!kr || kr[c] != 0.0) ? std::exp(xr[c] - mx) : 0.0;
      z += yr[c];
    }
    const double inv = 1.0 / z;
    for (int c = 0; c < cols; ++c) yr[c] *= inv;
  }
}

// dx = y .* (dy - sum(dy .* y)) per row; valid with exact zeros at masked slots
inline void softmax_rows_backward(const double* y, const double* dy, double* dx, int64_t rows,
                                  int cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* yr = y + r * cols;
    const double* dyr = dy + r * cols;
    double* dxr = dx + r * cols;
    double dot = 0.0;
    for (int c = 0; c < cols; ++c) dot += dyr[c] * yr[c];
    for (int c = 0; c < cols; ++c) dxr[c] += yr[c] * (dyr[c] - dot);
  }
}

}  // namespace detail

// softmax along an arbitrary axis (max-subtracted, numerically stable)
inline Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape));
  if (axis != x.rank() - 1) {
    Tensor sw = swap_axes(x, axis, x.rank() - 1);
    Tensor sm = softmax(sw, sw.rank() - 1);
    return swap_axes(sm, axis, x.rank() - 1);
  }
  const int cols = x.shape.back();
  const int64_t rows = x.size() / cols;
  Tensor out(x.shape);
  detail::softmax_rows(x.values.data(), nullptr, out.values.data(), rows, cols);
  debug_check_finite(out, "softmax");
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, yv = out.values, rows, cols](
                                        const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      detail::softmax_rows_backward(yv.data(), dout.data(), t.grad(xid).data(), rows, cols);
    });
  }
  return out;
}

// softmax over the last axis of scores [B, h, Lq, Lk] where key positions with
// mask[b, k] == 0 receive exactly zero weight. mask is a constant input.
inline Tensor masked_softmax(const Tensor& scores, const Tensor& mask) {
  if (scores.rank() != 4 || mask.rank() != 2 || scores.dim(0) != mask.dim(0) ||
      scores.dim(3) != mask.dim(1))
    throw ShapeError("masked_softmax: want scores [B,h,Lq,Lk] and mask [B,Lk], got " +
                     shape_str(scores.shape) + " and " + shape_str(mask.shape));
  const int B = scores.dim(0), h = scores.dim(1), Lq = scores.dim(2), Lk = scores.dim(3);
  Tensor out(scores.shape);
  // expand mask per (b, head, query) row
  for (int b = 0; b < B; ++b) {
    const double* mrow = mask.values.data() + size_t(b) * Lk;
    for (int hh = 0; hh < h; ++hh)
      for (int q = 0; q < Lq; ++q) {
        const int64_t off = ((int64_t(b) * h + hh) * Lq + q) * Lk;
        const double* xr = scores.values.data() + off;
        double* yr = out.values.data() + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < Lk; ++k)
          if (mrow[k] != 0.0) mx = std::max(mx, xr[k]);
        if (mx == -std::numeric_limits<double>::infinity())
          throw ContractError("masked_softmax: attention row with all keys masked");
        double z = 0.0;
        for (int k = 0; k < Lk; ++k) {
          yr[k] = mrow[k] != 0.0 ? std::exp(xr[k] - mx) : 0.0;
          z += yr[k];
        }
        const double inv = 1.0 / z;
        for (int k = 0; k < Lk; ++k) yr[k] *= inv;
      }
  }
  debug_check_finite(out, "masked_softmax");
  if (Tape* tp = detail::pick_tape(scores)) {
    int xid = scores.node;
    const int64_t rows = int64_t(B) * h * Lq;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, yv = out.values, rows, Lk](
                                        const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      detail::softmax_rows_backward(yv.data(), dout.data(), t.grad(xid).data(), rows, Lk);
    });
  }
  return out;
}

// layer norm over the trailing axis: per row zero mean / unit variance
// (biased variance), then affine gain/bias. eps is added to the variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-12) {
  const int H = x.shape.back();
  if (H < 2) throw ContractError("layer_norm: normalization axis must have length >= 2");
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != H || bias.dim(0) != H)
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(H) + "]");
  Tape* tp = detail::pick_tape(x, gain);
  if (!tp) tp = detail::pick_tape(bias);
  const int64_t rows = x.size() / H;
  Tensor out(x.shape);
  std::vector<double> xhat(size_t(x.size()), 0.0);
  std::vector<double> inv_std(size_t(rows), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.values.data() + r * H;
    double mu = 0.0;
    for (int j = 0; j < H; ++j) mu += xr[j];
    mu /= H;
    double var = 0.0;
    for (int j = 0; j < H; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= H;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[size_t(r)] = inv;
    for (int j = 0; j < H; ++j) {
      const double xh = (xr[j] - mu) * inv;
      xhat[size_t(r * H + j)] = xh;
      out.values[size_t(r * H + j)] = gain.values[size_t(j)] * xh + bias.values[size_t(j)];
    }
  }
  debug_check_finite(out, "layer_norm");
  if (tp) {
    int xid = x.node, gid = gain.node, bid = bias.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, gid, bid, xhat, inv_std, gv = gain.values, rows, H](
                                        const std::vector<double>& dout, Tape& t) {
      if (gid >= 0) {
        auto& dg = t.grad(gid);
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < H; ++j)
            dg[size_t(j)] += dout[size_t(r * H + j)] * xhat[size_t(r * H + j)];
      }
      if (bid >= 0) {
        auto& db = t.grad(bid);
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < H; ++j) db[size_t(j)] += dout[size_t(r * H + j)];
      }
      if (xid >= 0) {
        auto& dx = t.grad(xid);
        for (int64_t r = 0; r < rows; ++r) {
          const double* dy = dout.data() + r * H;
          const double* xh = xhat.data() + r * H;
          double mean_dyh = 0.0, mean_dyh_xh = 0.0;
          for (int j = 0; j < H; ++j) {
            const double dyh = dy[j] * gv[size_t(j)];
            mean_dyh += dyh;
            mean_dyh_xh += dyh * xh[j];
          }
          mean_dyh /= H;
          mean_dyh_xh /= H;
          const double inv = inv_std[size_t(r)];
          for (int j = 0; j < H; ++j) {
            const double dyh = dy[j] * gv[size_t(j)];
            dx[size_t(r * H + j)] += inv * (dyh - mean_dyh - xh[j] * mean_dyh_xh);
          }
        }
      }
    });
  }
  return out;
}

inline Tensor gelu(const Tensor& x) {
  Tensor out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) {
    const double v = x.values[size_t(i)];
    out.values[size_t(i)] = 0.5 * v * (1.0 + std::erf(v / M_SQRT2));
  }
  debug_check_finite(out, "gelu");
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, xv = x.values](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      auto& dx = t.grad(xid);
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (size_t i = 0; i < dout.size(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / M_SQRT2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        dx[i] += dout[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) out.values[size_t(i)] = std::max(0.0, x.values[size_t(i)]);
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, xv = x.values](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      auto& dx = t.grad(xid);
      for (size_t i = 0; i < dout.size(); ++i)
        if (xv[i] > 0.0) dx[i] += dout[i];
    });
  }
  return out;
}

inline Tensor tanh_act(const Tensor& x) {
  Tensor out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) out.values[size_t(i)] = std::tanh(x.values[size_t(i)]);
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, yv = out.values](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      auto& dx = t.grad(xid);
      for (size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i] * (1.0 - yv[i] * yv[i]);
    });
  }
  return out;
}

inline Tensor sigmoid_act(const Tensor& x) {
  Tensor out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) {
    const double v = x.values[size_t(i)];
    out.values[size_t(i)] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, yv = out.values](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      auto& dx = t.grad(xid);
      for (size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i] * yv[i] * (1.0 - yv[i]);
    });
  }
  return out;
}

// inverted dropout; identity outside training. One RNG stream per call,
// keyed by (seed, step, running call index) so passes replay exactly.
inline Tensor dropout(const Tensor& x, double rate, Pass& pass) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  if (!pass.train || rate == 0.0) {
    ++pass.dropout_calls;
    return x;
  }
  Rng rng(derive_seed(pass.dropout_seed, pass.step, pass.dropout_calls++));
  const double keep = 1.0 - rate;
  const double inv_keep = 1.0 / keep;
  std::vector<double> mask(size_t(x.size()));
  for (double& m : mask) m = rng.uniform() < keep ? inv_keep : 0.0;
  Tensor out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) out.values[size_t(i)] = x.values[size_t(i)] * mask[size_t(i)];
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, mask](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      auto& dx = t.grad(xid);
      for (size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i] * mask[i];
    });
  }
  return out;
}

// mean of hidden states over unmasked positions: states [B,L,H], mask [B,L]
inline Tensor masked_mean_pool(const Tensor& states, const Tensor& mask) {
  if (states.rank() != 3 || mask.rank() != 2 || states.dim(0) != mask.dim(0) ||
      states.dim(1) != mask.dim(1))
    throw ShapeError("masked_mean_pool: want [B,L,H] and [B,L], got " + shape_str(states.shape) +
                     " and " + shape_str(mask.shape));
  const int B = states.dim(0), L = states.dim(1), H = states.dim(2);
  std::vector<double> count(size_t(B), 0.0);
  for (int b = 0; b < B; ++b) {
    double n = 0.0;
    for (int l = 0; l < L; ++l) n += mask.at(b, l) != 0.0 ? 1.0 : 0.0;
    if (n == 0.0) throw ContractError("masked_mean_pool: empty sequence (all-zero mask row)");
    count[size_t(b)] = n;
  }
  Tensor out({B, H});
  for (int b = 0; b < B; ++b) {
    for (int l = 0; l < L; ++l) {
      if (mask.at(b, l) == 0.0) continue;
      for (int j = 0; j < H; ++j) out.at(b, j) += states.at(b, l, j);
    }
    for (int j = 0; j < H; ++j) out.at(b, j) /= count[size_t(b)];
  }
  if (Tape* tp = detail::pick_tape(states)) {
    int sid = states.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [sid, mv = mask.values, count, B, L, H](
                                        const std::vector<double>& dout, Tape& t) {
      if (sid < 0) return;
      auto& ds = t.grad(sid);
      for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l) {
          if (mv[size_t(b) * L + l] == 0.0) continue;
          for (int j = 0; j < H; ++j)
            ds[(size_t(b) * L + l) * H + j] += dout[size_t(b) * H + j] / count[size_t(b)];
        }
    });
  }
  return out;
}

// max over the time axis of x [B,L,F]; ties resolve to the earliest position
inline Tensor max_over_time(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("max_over_time: want [B,L,F], got " + shape_str(x.shape));
  const int B = x.dim(0), L = x.dim(1), F = x.dim(2);
  Tensor out({B, F});
  std::vector<int> argmax(size_t(B) * F, 0);
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f) {
      double best = x.at(b, 0, f);
      int bl = 0;
      for (int l = 1; l < L; ++l)
        if (x.at(b, l, f) > best) {
          best = x.at(b, l, f);
          bl = l;
        }
      out.at(b, f) = best;
      argmax[size_t(b) * F + f] = bl;
    }
  if (Tape* tp = detail::pick_tape(x)) {
    int xid = x.node;
    out.tape = tp;
    out.node = tp->push(out.size(), [xid, argmax, B, L, F](const std::vector<double>& dout, Tape& t) {
      if (xid < 0) return;
      auto& dx = t.grad(xid);
      for (int b = 0; b < B; ++b)
        for (int f = 0; f < F; ++f)
          dx[(size_t(b) * L + argmax[size_t(b) * F + f]) * F + f] += dout[size_t(b) * F + f];
    });
  }
  return out;
}

// mean negative log-softmax of the target class; for two classes this is
// binary cross-entropy on the softmax probability.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2 || int(targets.size()) != logits.dim(0))
    throw ShapeError("cross_entropy: want logits [B,C] with B targets, got " +
                     shape_str(logits.shape) + " and " + std::to_string(targets.size()));
  const int B = logits.dim(0), C = logits.dim(1);
  for (int t : targets)
    if (t < 0 || t >= C)
      throw LabelError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(C) + ")");
  std::vector<double> probs(size_t(B) * C);
  detail::softmax_rows(logits.values.data(), nullptr, probs.data(), B, C);
  double loss = 0.0;
  for (int b = 0; b < B; ++b) loss -= std::log(probs[size_t(b) * C + targets[size_t(b)]]);
  loss /= B;
  Tensor out({1}, {loss});
  if (Tape* tp = detail::pick_tape(logits)) {
    int lid = logits.node;
    out.tape = tp;
    out.node = tp->push(1, [lid, probs, targets, B, C](const std::vector<double>& dout, Tape& t) {
      if (lid < 0) return;
      auto& dl = t.grad(lid);
      const double g = dout[0] / B;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          dl[size_t(b) * C + c] += g * (probs[size_t(b) * C + c] - (c == targets[size_t(b)] ? 1.0 : 0.0));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

struct FdOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  int coords_per_param = 4;  // sampled coordinates per parameter
  uint64_t seed = 0;
  // relative error denominator floor; keeps finite-difference roundoff from
  // blowing up the ratio on near-zero gradients
  double denom_floor = 1e-3;
};

struct FdEntry {
  std::string name;
  double max_rel_err = 0.0;
  int worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct FdReport {
  std::vector<FdEntry> entries;
  double max_rel_err = 0.0;
  std::string worst_param;

  bool passed(double tol) const { return max_rel_err <= tol; }
};

// Compares analytic gradients against central finite differences
// (f(w+eps) - f(w-eps)) / 2 eps on a sampled subset of coordinates per
// parameter. loss_fn must rebuild the forward graph on the given Pass and be
// deterministic (dropout is forced off here).
template <typename LossFn>
FdReport finite_diff_check(ParamStore& params, LossFn&& loss_fn, FdOptions opt = {}) {
  // analytic pass
  params.zero_grads();
  {
    Tape tape;
    Pass pass;
    pass.tape = &tape;
    pass.train = false;
    Tensor loss = loss_fn(pass);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Pass pass;  // no tape, no dropout
    return loss_fn(pass).values[0];
  };

  FdReport report;
  Rng rng(derive_seed(opt.seed, 0x6664636865636bULL));
  for (auto& p : params.all()) {
    if (!p.trainable) continue;
    FdEntry e;
    e.name = p.name;
    const int64_t n = p.tensor.size();
    const int k = int(std::min<int64_t>(n, opt.coords_per_param));
    for (int probe = 0; probe < k; ++probe) {
      const size_t c = k == n ? size_t(probe) : size_t(rng.uniform_int(uint64_t(n)));
      const double orig = p.tensor.values[c];
      p.tensor.values[c] = orig + opt.epsilon;
      const double up = eval();
      p.tensor.values[c] = orig - opt.epsilon;
      const double down = eval();
      p.tensor.values[c] = orig;
      const double numeric = (up - down) / (2.0 * opt.epsilon);
      const double analytic = p.grad[c];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), opt.denom_floor});
      if (rel > e.max_rel_err) {
        e.max_rel_err = rel;
        e.worst_coord = int(c);
        e.analytic = analytic;
        e.numeric = numeric;
      }
    }
    if (e.max_rel_err > report.max_rel_err) {
      report.max_rel_err = e.max_rel_err;
      report.worst_param = e.name;
    }
    report.entries.push_back(e);
  }
  return report;
}

inline void throw_if_failed(const FdReport& r, double tol) {
  if (!r.passed(tol))
    throw ContractError("gradient check failed on parameter '" + r.worst_param +
                        "' with max relative error " + std::to_string(r.max_rel_err));
}

}  // namespace demobert
