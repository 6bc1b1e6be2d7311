#pragma once

#include "constructs/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

namespace constructs {

// Define-by-run reverse-mode tape. Nodes hold dense tensors; ops append nodes
// together with a closure that scatters the node's gradient into its inputs.
// Nodes are created in topological order, so backward is a single reverse
// sweep. Gradients allocate lazily and a node whose gradient was never
// touched is skipped, which keeps constant subgraphs free during backward.
template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const;
  const std::vector<int>& dims() const { return value().dims; }
  T scalar() const {
    if (value().size() != 1) throw std::logic_error("var: scalar() on non-scalar");
    return value().data[0];
  }
};

template <typename T>
class Tape {
 public:
  using Flat = typename Tensor<T>::Flat;

  Var<T> input(Tensor<T> v, bool needs_grad) { return emit(std::move(v), needs_grad); }
  Var<T> constant(Tensor<T> v) { return emit(std::move(v), false); }
  Var<T> constant_scalar(T v) { return emit(Tensor<T>::scalar(v), false); }

  const Tensor<T>& val(Var<T> x) const { return nodes_[static_cast<std::size_t>(x.id)].val; }

  // gradient of a node after backward(); zeros if it was never reached
  const Tensor<T>& grad(Var<T> x) { return grad_ref(x.id); }

  void backward(Var<T> root) {
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (r.val.size() != 1) throw std::logic_error("tape: backward root must be scalar");
    grad_ref(root.id).data[0] += T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.needs_grad && n.grad.size() != 0) n.back();
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  Var<T> emit(Tensor<T> val, bool needs_grad) {
    Node n;
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  void set_back(Var<T> x, std::function<void()> back) {
    if (nodes_[static_cast<std::size_t>(x.id)].needs_grad)
      nodes_[static_cast<std::size_t>(x.id)].back = std::move(back);
  }

  bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  template <typename Expr>
  void accum(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Tensor<T>::zeros(n.val.dims);
    n.grad.data += g;
  }

  void accum_at(int id, std::int64_t offset, T g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Tensor<T>::zeros(n.val.dims);
    n.grad.data[offset] += g;
  }

  Tensor<T>& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Tensor<T>::zeros(n.val.dims);
    return n.grad;
  }

  Tensor<T>& val_ref(int id) { return nodes_[static_cast<std::size_t>(id)].val; }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    std::function<void()> back;
    bool needs_grad = false;
  };
  // deque: growth must not invalidate node references, since ops hold
  // references to input values across emit()
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->val(*this);
}

namespace ad {

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
  if (a.value().dims != b.value().dims)
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                shape_str(a.value().dims) + " vs " + shape_str(b.value().dims));
}

// ---- elementwise ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_shape(a, b, "add");
  Tape<T>* t = a.tape;
  Tensor<T> v(a.value().dims, a.value().data + b.value().data);
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(b.id));
  t->set_back(o, [t, ia = a.id, ib = b.id, io = o.id] {
    const auto& g = t->grad_ref(io).data;
    t->accum(ia, g);
    t->accum(ib, g);
  });
  return o;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check_same_shape(a, b, "sub");
  Tape<T>* t = a.tape;
  Tensor<T> v(a.value().dims, a.value().data - b.value().data);
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(b.id));
  t->set_back(o, [t, ia = a.id, ib = b.id, io = o.id] {
    const auto& g = t->grad_ref(io).data;
    t->accum(ia, g);
    t->accum(ib, -g);
  });
  return o;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_shape(a, b, "mul");
  Tape<T>* t = a.tape;
  Tensor<T> v(a.value().dims, a.value().data * b.value().data);
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(b.id));
  t->set_back(o, [t, ia = a.id, ib = b.id, io = o.id] {
    const auto& g = t->grad_ref(io).data;
    t->accum(ia, g * t->val_ref(ib).data);
    t->accum(ib, g * t->val_ref(ia).data);
  });
  return o;
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  check_same_shape(a, b, "div");
  Tape<T>* t = a.tape;
  Tensor<T> v(a.value().dims, a.value().data / b.value().data);
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(b.id));
  t->set_back(o, [t, ia = a.id, ib = b.id, io = o.id] {
    const auto& g = t->grad_ref(io).data;
    const auto& bv = t->val_ref(ib).data;
    t->accum(ia, g / bv);
    t->accum(ib, -g * t->val_ref(io).data / bv);
  });
  return o;
}

// k*a + c with plain constants
template <typename T>
Var<T> affine(Var<T> a, T k, T c) {
  Tape<T>* t = a.tape;
  Tensor<T> v(a.value().dims, a.value().data * k + c);
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, k] { t->accum(ia, t->grad_ref(io).data * k); });
  return o;
}

template <typename T>
Var<T> scale(Var<T> a, T k) {
  return affine(a, k, T(0));
}

// broadcast ops against a scalar Var (shape [1])
template <typename T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
  Tape<T>* t = a.tape;
  if (s.value().size() != 1) throw std::invalid_argument("mul_scalar: s must be scalar");
  Tensor<T> v(a.value().dims, a.value().data * s.value().data[0]);
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(s.id));
  t->set_back(o, [t, ia = a.id, is = s.id, io = o.id] {
    const auto& g = t->grad_ref(io).data;
    t->accum(ia, g * t->val_ref(is).data[0]);
    t->accum_at(is, 0, (g * t->val_ref(ia).data).sum());
  });
  return o;
}

template <typename T>
Var<T> div_scalar(Var<T> a, Var<T> s) {
  Tape<T>* t = a.tape;
  if (s.value().size() != 1) throw std::invalid_argument("div_scalar: s must be scalar");
  const T sv = s.value().data[0];
  Tensor<T> v(a.value().dims, a.value().data / sv);
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(s.id));
  t->set_back(o, [t, ia = a.id, is = s.id, io = o.id] {
    const auto& g = t->grad_ref(io).data;
    const T svv = t->val_ref(is).data[0];
    t->accum(ia, g / svv);
    t->accum_at(is, 0, -(g * t->val_ref(io).data).sum() / svv);
  });
  return o;
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>* t = a.tape;
  Tensor<T> v(a.value().dims, a.value().data.max(T(0)));
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id] {
    t->accum(ia, t->grad_ref(io).data *
                     (t->val_ref(ia).data > T(0)).template cast<T>());
  });
  return o;
}

template <typename T>
Var<T> leaky_relu(Var<T> a, T slope) {
  Tape<T>* t = a.tape;
  const auto& x = a.value().data;
  Tensor<T> v(a.value().dims, (x > T(0)).select(x, x * slope));
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, slope] {
    const auto& x = t->val_ref(ia).data;
    t->accum(ia, t->grad_ref(io).data *
                     ((x > T(0)).template cast<T>() + (x <= T(0)).template cast<T>() * slope));
  });
  return o;
}

template <typename T>
Var<T> tanh_op(Var<T> a) {
  Tape<T>* t = a.tape;
  Tensor<T> v(a.value().dims, a.value().data.tanh());
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id] {
    const auto& y = t->val_ref(io).data;
    t->accum(ia, t->grad_ref(io).data * (T(1) - y * y));
  });
  return o;
}

// elementwise sqrt; inputs must be strictly positive
template <typename T>
Var<T> sqrt_op(Var<T> a) {
  Tape<T>* t = a.tape;
  Tensor<T> v(a.value().dims, a.value().data.sqrt());
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id] {
    t->accum(ia, t->grad_ref(io).data * T(0.5) / t->val_ref(io).data);
  });
  return o;
}

// log(1 + e^x), stable on both tails
template <typename T>
Var<T> softplus(Var<T> a) {
  Tape<T>* t = a.tape;
  const auto& x = a.value().data;
  typename Tensor<T>::Flat v(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const T xi = x[i];
    v[i] = xi > T(0) ? xi + std::log1p(std::exp(-xi)) : std::log1p(std::exp(xi));
  }
  Var<T> o = t->emit(Tensor<T>(a.value().dims, std::move(v)), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id] {
    const auto& x = t->val_ref(ia).data;
    t->accum(ia, t->grad_ref(io).data * (T(1) / (T(1) + (-x).exp())));
  });
  return o;
}

// sign-preserving power: sgn(x) |x|^e. Keeps odd symmetry so values in
// (-1, 1] stay in (-1, 1]; gradient e|x|^(e-1).
template <typename T>
Var<T> pow_signed(Var<T> a, T e) {
  Tape<T>* t = a.tape;
  const auto& x = a.value().data;
  typename Tensor<T>::Flat v(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i)
    v[i] = x[i] < T(0) ? -std::pow(-x[i], e) : std::pow(x[i], e);
  Var<T> o = t->emit(Tensor<T>(a.value().dims, std::move(v)), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, e] {
    const auto& x = t->val_ref(ia).data;
    const auto& g = t->grad_ref(io).data;
    typename Tensor<T>::Flat d(x.size());
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const T ax = std::abs(x[i]);
      d[i] = ax < T(1e-30) ? T(0) : g[i] * e * std::pow(ax, e - T(1));
    }
    t->accum(ia, d);
  });
  return o;
}

// ---- reductions ----

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>* t = a.tape;
  Var<T> o = t->emit(Tensor<T>::scalar(a.value().data.sum()), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id] {
    if (!t->wants(ia)) return;
    t->grad_ref(ia).data += t->grad_ref(io).data[0];
  });
  return o;
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  Tape<T>* t = a.tape;
  const T n = static_cast<T>(a.value().size());
  Var<T> o = t->emit(Tensor<T>::scalar(a.value().data.sum() / n), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, n] {
    if (!t->wants(ia)) return;
    t->grad_ref(ia).data += t->grad_ref(io).data[0] / n;
  });
  return o;
}

// ---- shape ops ----

// [C,H,W] -> [1,H,W] mean over channels
template <typename T>
Var<T> channel_mean(Var<T> a) {
  Tape<T>* t = a.tape;
  const auto& x = a.value();
  const int c = x.dim(0);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor<T> v({1, x.dim(1), x.dim(2)});
  for (int ch = 0; ch < c; ++ch) v.data += x.data.segment(ch * plane, plane);
  v.data /= static_cast<T>(c);
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, c, plane] {
    if (!t->wants(ia)) return;
    const auto& g = t->grad_ref(io).data;
    auto& ga = t->grad_ref(ia);
    for (int ch = 0; ch < c; ++ch)
      ga.data.segment(ch * plane, plane) += g / static_cast<T>(c);
  });
  return o;
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Tape<T>* t = a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
    throw std::invalid_argument("concat_channels: spatial shape mismatch");
  Tensor<T> v({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  v.data.head(av.size()) = av.data;
  v.data.tail(bv.size()) = bv.data;
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(b.id));
  t->set_back(o, [t, ia = a.id, ib = b.id, io = o.id, na = av.size(), nb = bv.size()] {
    const auto& g = t->grad_ref(io).data;
    t->accum(ia, g.head(na));
    t->accum(ib, g.tail(nb));
  });
  return o;
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  Tape<T>* t = a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.dim(1) != bv.dim(1)) throw std::invalid_argument("concat_rows: column mismatch");
  Tensor<T> v({av.dim(0) + bv.dim(0), av.dim(1)});
  v.data.head(av.size()) = av.data;
  v.data.tail(bv.size()) = bv.data;
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(b.id));
  t->set_back(o, [t, ia = a.id, ib = b.id, io = o.id, na = av.size(), nb = bv.size()] {
    const auto& g = t->grad_ref(io).data;
    t->accum(ia, g.head(na));
    t->accum(ib, g.tail(nb));
  });
  return o;
}

// [C,H,W] + S flat spatial indices -> [S,C] rows
template <typename T>
Var<T> spatial_gather(Var<T> a, std::vector<int> idx) {
  Tape<T>* t = a.tape;
  const auto& x = a.value();
  const int c = x.dim(0);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  const int s = static_cast<int>(idx.size());
  Tensor<T> v({s, c});
  for (int i = 0; i < s; ++i)
    for (int ch = 0; ch < c; ++ch) v.at(i, ch) = x.data[ch * plane + idx[static_cast<std::size_t>(i)]];
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, idx = std::move(idx), c, plane] {
    const auto& g = t->grad_ref(io);
    if (!t->wants(ia)) return;
    auto& ga = t->grad_ref(ia);
    const int s = static_cast<int>(idx.size());
    for (int i = 0; i < s; ++i)
      for (int ch = 0; ch < c; ++ch)
        ga.data[ch * plane + idx[static_cast<std::size_t>(i)]] += g.at(i, ch);
  });
  return o;
}

// normalize each row of [n,d] to unit L2 norm
template <typename T>
Var<T> rows_l2_normalize(Var<T> a, T eps = T(1e-12)) {
  Tape<T>* t = a.tape;
  const auto& x = a.value();
  const int n = x.dim(0), d = x.dim(1);
  auto inv = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  Tensor<T> v({n, d});
  for (int i = 0; i < n; ++i) {
    const auto row = x.data.segment(static_cast<std::int64_t>(i) * d, d);
    const T norm = std::sqrt(row.square().sum() + eps);
    (*inv)[static_cast<std::size_t>(i)] = T(1) / norm;
    v.data.segment(static_cast<std::int64_t>(i) * d, d) = row / norm;
  }
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, inv, n, d] {
    if (!t->wants(ia)) return;
    const auto& g = t->grad_ref(io).data;
    const auto& y = t->val_ref(io).data;
    auto& ga = t->grad_ref(ia);
    for (int i = 0; i < n; ++i) {
      const std::int64_t off = static_cast<std::int64_t>(i) * d;
      const auto gi = g.segment(off, d);
      const auto yi = y.segment(off, d);
      const T dot = (gi * yi).sum();
      ga.data.segment(off, d) += (*inv)[static_cast<std::size_t>(i)] * (gi - yi * dot);
    }
  });
  return o;
}

// ---- matrix ops ----

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>* t = a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor<T> v({m, n});
  v.mat(m, n).noalias() = av.mat(m, k) * bv.mat(k, n);
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(b.id));
  t->set_back(o, [t, ia = a.id, ib = b.id, io = o.id, m, k, n] {
    auto g = t->grad_ref(io).mat(m, n);
    if (t->wants(ia)) t->grad_ref(ia).mat(m, k).noalias() += g * t->val_ref(ib).mat(k, n).transpose();
    if (t->wants(ib)) t->grad_ref(ib).mat(k, n).noalias() += t->val_ref(ia).mat(m, k).transpose() * g;
  });
  return o;
}

// A [m,k] x B^T with B [n,k] -> [m,n]
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>* t = a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  if (bv.dim(1) != k) throw std::invalid_argument("matmul_nt: inner dim mismatch");
  Tensor<T> v({m, n});
  v.mat(m, n).noalias() = av.mat(m, k) * bv.mat(n, k).transpose();
  Var<T> o = t->emit(std::move(v), t->wants(a.id) || t->wants(b.id));
  t->set_back(o, [t, ia = a.id, ib = b.id, io = o.id, m, k, n] {
    auto g = t->grad_ref(io).mat(m, n);
    if (t->wants(ia)) t->grad_ref(ia).mat(m, k).noalias() += g * t->val_ref(ib).mat(n, k);
    if (t->wants(ib)) t->grad_ref(ib).mat(n, k).noalias() += g.transpose() * t->val_ref(ia).mat(m, k);
  });
  return o;
}

// X [n,d] -> X W^T + b with W [o,d], b [o]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>* t = x.tape;
  const auto& xv = x.value();
  const auto& wv = w.value();
  const int n = xv.dim(0), d = xv.dim(1), o_dim = wv.dim(0);
  if (wv.dim(1) != d || b.value().size() != o_dim)
    throw std::invalid_argument("linear: shape mismatch");
  Tensor<T> v({n, o_dim});
  v.mat(n, o_dim).noalias() = xv.mat(n, d) * wv.mat(o_dim, d).transpose();
  for (int i = 0; i < n; ++i)
    v.data.segment(static_cast<std::int64_t>(i) * o_dim, o_dim) += b.value().data;
  Var<T> o = t->emit(std::move(v), t->wants(x.id) || t->wants(w.id) || t->wants(b.id));
  t->set_back(o, [t, ix = x.id, iw = w.id, ib = b.id, io = o.id, n, d, o_dim] {
    auto g = t->grad_ref(io).mat(n, o_dim);
    if (t->wants(ix)) t->grad_ref(ix).mat(n, d).noalias() += g * t->val_ref(iw).mat(o_dim, d);
    if (t->wants(iw)) t->grad_ref(iw).mat(o_dim, d).noalias() += g.transpose() * t->val_ref(ix).mat(n, d);
    if (t->wants(ib))
      for (int i = 0; i < n; ++i)
        t->grad_ref(ib).data += t->grad_ref(io).data.segment(static_cast<std::int64_t>(i) * o_dim, o_dim);
  });
  return o;
}

// ---- spatial / cnn ops ----

enum class PadMode { kZero, kReflect };

// source linear index per padded position, -1 meaning zero fill
inline std::vector<std::int64_t> pad_plan(int h, int w, int py, int px, PadMode mode) {
  const int ph = h + 2 * py, pw = w + 2 * px;
  std::vector<std::int64_t> plan(static_cast<std::size_t>(ph) * pw, -1);
  for (int y = 0; y < ph; ++y) {
    int sy = y - py;
    if (mode == PadMode::kReflect) {
      if (sy < 0) sy = -sy;
      if (sy >= h) sy = 2 * h - 2 - sy;
    }
    if (sy < 0 || sy >= h) continue;
    for (int x = 0; x < pw; ++x) {
      int sx = x - px;
      if (mode == PadMode::kReflect) {
        if (sx < 0) sx = -sx;
        if (sx >= w) sx = 2 * w - 2 - sx;
      }
      if (sx < 0 || sx >= w) continue;
      plan[static_cast<std::size_t>(y) * pw + x] = static_cast<std::int64_t>(sy) * w + sx;
    }
  }
  return plan;
}

template <typename T>
Var<T> pad2d(Var<T> a, int py, int px, PadMode mode) {
  if (py == 0 && px == 0) return a;
  Tape<T>* t = a.tape;
  const auto& x = a.value();
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (mode == PadMode::kReflect && (py > h - 1 || px > w - 1))
    throw std::invalid_argument("pad2d: reflect pad wider than input");
  auto plan = std::make_shared<std::vector<std::int64_t>>(pad_plan(h, w, py, px, mode));
  const int ph = h + 2 * py, pw = w + 2 * px;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t pplane = static_cast<std::int64_t>(ph) * pw;
  Tensor<T> v({c, ph, pw});
  for (int ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < pplane; ++i) {
      const std::int64_t s = (*plan)[static_cast<std::size_t>(i)];
      v.data[ch * pplane + i] = s < 0 ? T(0) : x.data[ch * plane + s];
    }
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, plan, c, plane, pplane] {
    if (!t->wants(ia)) return;
    const auto& g = t->grad_ref(io).data;
    auto& ga = t->grad_ref(ia);
    for (int ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < pplane; ++i) {
        const std::int64_t s = (*plan)[static_cast<std::size_t>(i)];
        if (s >= 0) ga.data[ch * plane + s] += g[ch * pplane + i];
      }
  });
  return o;
}

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, Tensor<T>& col, int oh, int ow) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  (void)h;
  const std::int64_t patch = static_cast<std::int64_t>(oh) * ow;
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const std::int64_t row = (static_cast<std::int64_t>(ch) * kh + ky) * kw + kx;
        T* dst = col.data.data() + row * patch;
        const T* src = x.data.data() + (static_cast<std::int64_t>(ch) * x.dim(1) + ky) * w + kx;
        if (stride == 1) {
          for (int oy = 0; oy < oh; ++oy)
            std::copy(src + static_cast<std::int64_t>(oy) * w,
                      src + static_cast<std::int64_t>(oy) * w + ow,
                      dst + static_cast<std::int64_t>(oy) * ow);
        } else {
          for (int oy = 0; oy < oh; ++oy) {
            const T* s = src + static_cast<std::int64_t>(oy) * stride * w;
            T* d = dst + static_cast<std::int64_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) d[ox] = s[ox * stride];
          }
        }
      }
}

template <typename T>
void col2im_add(const Tensor<T>& col, int c, int h, int w, int kh, int kw, int stride,
                int oh, int ow, Tensor<T>& x) {
  const std::int64_t patch = static_cast<std::int64_t>(oh) * ow;
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const std::int64_t row = (static_cast<std::int64_t>(ch) * kh + ky) * kw + kx;
        const T* src = col.data.data() + row * patch;
        T* dst = x.data.data() + (static_cast<std::int64_t>(ch) * h + ky) * w + kx;
        for (int oy = 0; oy < oh; ++oy) {
          T* d = dst + static_cast<std::int64_t>(oy) * stride * w;
          const T* s = src + static_cast<std::int64_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) d[ox * stride] += s[ox];
        }
      }
}

}  // namespace detail

// valid cross-correlation of [C,H,W] with weights [OC,C,kh,kw]; bias optional.
// Pad beforehand with pad2d.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride = 1) {
  Tape<T>* t = x.tape;
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (wv.rank() != 4 || xv.rank() != 3) throw std::invalid_argument("conv2d: rank mismatch");
  const int c = xv.dim(0), h = xv.dim(1), wdt = xv.dim(2);
  const int oc = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != c) throw std::invalid_argument("conv2d: channel mismatch");
  if (h < kh || wdt < kw) throw std::invalid_argument("conv2d: input smaller than kernel");
  const int oh = (h - kh) / stride + 1, ow = (wdt - kw) / stride + 1;
  const int ckk = c * kh * kw;
  const std::int64_t patch = static_cast<std::int64_t>(oh) * ow;

  auto col = std::make_shared<Tensor<T>>(std::vector<int>{ckk, static_cast<int>(patch)});
  detail::im2col(xv, kh, kw, stride, *col, oh, ow);

  Tensor<T> v({oc, oh, ow});
  v.mat(oc, static_cast<int>(patch)).noalias() =
      wv.mat(oc, ckk) * col->mat(ckk, static_cast<int>(patch));
  if (b.valid()) {
    if (b.value().size() != oc) throw std::invalid_argument("conv2d: bias size mismatch");
    for (int o = 0; o < oc; ++o) v.data.segment(o * patch, patch) += b.value().data[o];
  }
  const bool ng = t->wants(x.id) || t->wants(w.id) || (b.valid() && t->wants(b.id));
  Var<T> out = t->emit(std::move(v), ng);
  if (!ng) return out;
  const int ib = b.valid() ? b.id : -1;
  t->set_back(out, [t, ix = x.id, iw = w.id, ib, io = out.id, col, c, h, wdt, oc, kh, kw,
                    stride, oh, ow, ckk, patch] {
    auto g = t->grad_ref(io).mat(oc, static_cast<int>(patch));
    if (t->wants(iw))
      t->grad_ref(iw).mat(oc, ckk).noalias() +=
          g * col->mat(ckk, static_cast<int>(patch)).transpose();
    if (ib >= 0 && t->wants(ib))
      for (int o = 0; o < oc; ++o)
        t->grad_ref(ib).data[o] += t->grad_ref(io).data.segment(o * patch, patch).sum();
    if (t->wants(ix)) {
      Tensor<T> dcol({ckk, static_cast<int>(patch)});
      dcol.mat(ckk, static_cast<int>(patch)).noalias() =
          t->val_ref(iw).mat(oc, ckk).transpose() * g;
      detail::col2im_add(dcol, c, h, wdt, kh, kw, stride, oh, ow, t->grad_ref(ix));
    }
  });
  return out;
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, int stride = 1) {
  return conv2d(x, w, Var<T>{}, stride);
}

template <typename T>
Var<T> upsample_nearest2(Var<T> a) {
  Tape<T>* t = a.tape;
  const auto& x = a.value();
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> v({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) v.at(ch, y, xx) = x.at(ch, y / 2, xx / 2);
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, c, h, w] {
    if (!t->wants(ia)) return;
    const auto& g = t->grad_ref(io);
    auto& ga = t->grad_ref(ia);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) ga.at(ch, y / 2, xx / 2) += g.at(ch, y, xx);
  });
  return o;
}

// 2x2 average pool, stride 2; odd trailing row/col is dropped
template <typename T>
Var<T> avg_pool2(Var<T> a) {
  Tape<T>* t = a.tape;
  const auto& x = a.value();
  const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  Tensor<T> v({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        v.at(ch, y, xx) = (x.at(ch, 2 * y, 2 * xx) + x.at(ch, 2 * y, 2 * xx + 1) +
                           x.at(ch, 2 * y + 1, 2 * xx) + x.at(ch, 2 * y + 1, 2 * xx + 1)) /
                          T(4);
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, c, h, w] {
    if (!t->wants(ia)) return;
    const auto& g = t->grad_ref(io);
    auto& ga = t->grad_ref(ia);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const T q = g.at(ch, y, xx) / T(4);
          ga.at(ch, 2 * y, 2 * xx) += q;
          ga.at(ch, 2 * y, 2 * xx + 1) += q;
          ga.at(ch, 2 * y + 1, 2 * xx) += q;
          ga.at(ch, 2 * y + 1, 2 * xx + 1) += q;
        }
  });
  return o;
}

// per-channel normalization over the spatial extent, no affine parameters
template <typename T>
Var<T> instance_norm(Var<T> a, T eps = T(1e-5)) {
  Tape<T>* t = a.tape;
  const auto& x = a.value();
  const int c = x.dim(0);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  Tensor<T> v(x.dims);
  for (int ch = 0; ch < c; ++ch) {
    const auto seg = x.data.segment(ch * plane, plane);
    const T mu = seg.sum() / static_cast<T>(plane);
    const T var = (seg - mu).square().sum() / static_cast<T>(plane);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(ch)] = is;
    v.data.segment(ch * plane, plane) = (seg - mu) * is;
  }
  Var<T> o = t->emit(std::move(v), t->wants(a.id));
  t->set_back(o, [t, ia = a.id, io = o.id, inv_std, c, plane] {
    if (!t->wants(ia)) return;
    const auto& g = t->grad_ref(io).data;
    const auto& y = t->val_ref(io).data;
    auto& ga = t->grad_ref(ia);
    const T n = static_cast<T>(plane);
    for (int ch = 0; ch < c; ++ch) {
      const auto gs = g.segment(ch * plane, plane);
      const auto ys = y.segment(ch * plane, plane);
      const T gm = gs.sum() / n;
      const T gym = (gs * ys).sum() / n;
      ga.data.segment(ch * plane, plane) +=
          (*inv_std)[static_cast<std::size_t>(ch)] * (gs - gm - ys * gym);
    }
  });
  return o;
}

// ---- classification losses ----

// mean cross-entropy over rows of [n,m] logits; stabilized by row max
template <typename T>
Var<T> softmax_ce_rows(Var<T> logits, std::vector<int> targets) {
  Tape<T>* t = logits.tape;
  const auto& z = logits.value();
  const int n = z.dim(0), m = z.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("softmax_ce_rows: target count mismatch");
  auto probs = std::make_shared<Tensor<T>>(std::vector<int>{n, m});
  T loss = T(0);
  for (int i = 0; i < n; ++i) {
    const auto row = z.data.segment(static_cast<std::int64_t>(i) * m, m);
    const T mx = row.maxCoeff();
    auto p = probs->data.segment(static_cast<std::int64_t>(i) * m, m);
    p = (row - mx).exp();
    const T sum = p.sum();
    p /= sum;
    loss += std::log(sum) + mx - row[targets[static_cast<std::size_t>(i)]];
  }
  loss /= static_cast<T>(n);
  Var<T> o = t->emit(Tensor<T>::scalar(loss), t->wants(logits.id));
  t->set_back(o, [t, il = logits.id, io = o.id, probs, targets = std::move(targets), n, m] {
    if (!t->wants(il)) return;
    const T g = t->grad_ref(io).data[0] / static_cast<T>(n);
    auto& gl = t->grad_ref(il);
    for (int i = 0; i < n; ++i) {
      const std::int64_t off = static_cast<std::int64_t>(i) * m;
      gl.data.segment(off, m) += g * probs->data.segment(off, m);
      gl.data[off + targets[static_cast<std::size_t>(i)]] -= g;
    }
  });
  return o;
}

// mean cross-entropy over pixels of [K,H,W] logits against integer labels [H,W]
template <typename T>
Var<T> softmax_ce_pixels(Var<T> logits, const Tensor<int>& labels) {
  Tape<T>* t = logits.tape;
  const auto& z = logits.value();
  const int k = z.dim(0), h = z.dim(1), w = z.dim(2);
  if (labels.dim(0) != h || labels.dim(1) != w)
    throw std::invalid_argument("softmax_ce_pixels: label shape mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  auto probs = std::make_shared<Tensor<T>>(z.dims);
  T loss = T(0);
  Eigen::Array<T, Eigen::Dynamic, 1> col(k);
  for (std::int64_t p = 0; p < plane; ++p) {
    for (int c = 0; c < k; ++c) col[c] = z.data[c * plane + p];
    const T mx = col.maxCoeff();
    col = (col - mx).exp();
    const T sum = col.sum();
    const int tgt = labels.data[p];
    if (tgt < 0 || tgt >= k) throw std::invalid_argument("softmax_ce_pixels: label out of range");
    loss += std::log(sum) + mx - z.data[tgt * plane + p];
    for (int c = 0; c < k; ++c) probs->data[c * plane + p] = col[c] / sum;
  }
  loss /= static_cast<T>(plane);
  Var<T> o = t->emit(Tensor<T>::scalar(loss), t->wants(logits.id));
  t->set_back(o, [t, il = logits.id, io = o.id, probs, labels, k, plane] {
    if (!t->wants(il)) return;
    const T g = t->grad_ref(io).data[0] / static_cast<T>(plane);
    auto& gl = t->grad_ref(il);
    gl.data += g * probs->data;
    for (std::int64_t p = 0; p < plane; ++p)
      gl.data[labels.data[p] * plane + p] -= g;
  });
  return o;
}

// ---- spectral norm helper ----

// sigma = u^T (W v) with constant direction vectors; gradient u v^T
template <typename T>
Var<T> spectral_sigma(Var<T> w, const Tensor<T>& u, const Tensor<T>& v, int rows, int cols) {
  Tape<T>* t = w.tape;
  if (u.size() != rows || v.size() != cols)
    throw std::invalid_argument("spectral_sigma: direction size mismatch");
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  Eigen::Map<const Vec> um(u.data.data(), rows);
  Eigen::Map<const Vec> vm(v.data.data(), cols);
  const T sigma = um.dot(w.value().mat(rows, cols) * vm);
  Var<T> o = t->emit(Tensor<T>::scalar(sigma), t->wants(w.id));
  t->set_back(o, [t, iw = w.id, io = o.id, u, v, rows, cols] {
    if (!t->wants(iw)) return;
    const T g = t->grad_ref(io).data[0];
    Eigen::Map<const Vec> um(u.data.data(), rows);
    Eigen::Map<const Vec> vm(v.data.data(), cols);
    t->grad_ref(iw).mat(rows, cols).noalias() += g * (um * vm.transpose());
  });
  return o;
}

}  // namespace ad

}  // namespace constructs
