#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "ipsfuse/common.hpp"
#include "ipsfuse/fastmath.hpp"
#include "ipsfuse/kernels.hpp"

namespace ipsfuse {

template <typename T>
class Tape;

// Dense row-major tensor participating in reverse-mode differentiation.
// Handles are shared references; data is written once by the producing op
// and treated as immutable afterwards (the optimizer mutates leaf parameters
// between steps, never mid-tape).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(shape, std::vector<T>(shape_numel(shape), T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return from_data(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw data_error(strcat_all("tensor: shape ", shape_str(shape), " does not match data length ",
                                  data.size()));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar_of(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& data_mut() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (node_->grad.empty()) throw data_error("tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  T scalar() const {
    if (numel() != 1)
      throw data_error(strcat_all("scalar() on tensor of shape ", shape_str(shape())));
    return node_->data[0];
  }

  struct Node;
  // extension surface for ops defined outside Tape (e.g. the selective scan)
  const std::shared_ptr<Node>& node_impl() const { return node_; }

  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty == not yet populated
    bool requires_grad = false;
    const void* tape = nullptr;  // producing tape; null for leaves
    std::size_t entry = 0;
  };

 private:
  std::shared_ptr<Node> node_;
  friend class Tape<T>;
};

enum class EwKind { add, sub, mul, silu, sigmoid, relu, exp, reciprocal, abs };

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw data_error(strcat_all("broadcast: incompatible shapes ", shape_str(a), " and ",
                                  shape_str(b)));
    out[i] = std::max(da, db);
  }
  return out;
}

// Right-aligned strides of `s` viewed as shape `out`; 0 on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t acc = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::size_t d = s.size() - 1 - i;
    std::size_t o = out.size() - 1 - i;
    st[o] = (s[d] == 1) ? 0 : acc;
    acc *= s[d];
  }
  return st;
}

// Visits every element of the broadcast result: fn(out_index, a_index, b_index).
template <typename F>
void broadcast_visit(const Shape& a, const Shape& b, const Shape& out, F&& fn) {
  std::size_t n = shape_numel(out);
  if (a == b) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  auto sa = broadcast_strides(a, out);
  auto sb = broadcast_strides(b, out);
  std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
    }
  }
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// saturating in both precisions: fexp is clamped for float, and the double
// path yields the correct 0/1 limits through inf arithmetic
template <typename T>
T sigmoid_stable(T x) {
  return T(1) / (T(1) + fexp(-x));
}

template <typename T>
T softplus_stable(T x) {
  if (x > T(0)) return x + std::log1p(static_cast<T>(std::exp(-static_cast<double>(x))));
  return std::log1p(static_cast<T>(std::exp(static_cast<double>(x))));
}

struct AddOp {
  template <typename T>
  static T f(T a, T b) { return a + b; }
};
struct SubOp {
  template <typename T>
  static T f(T a, T b) { return a - b; }
};
struct MulOp {
  template <typename T>
  static T f(T a, T b) { return a * b; }
};

struct SiluOp {
  template <typename T>
  static T f(T x) { return x * sigmoid_stable(x); }
  template <typename T>
  static T df(T x, T) {
    T s = sigmoid_stable(x);
    return s * (T(1) + x * (T(1) - s));
  }
};
struct SigmoidOp {
  template <typename T>
  static T f(T x) { return sigmoid_stable(x); }
  template <typename T>
  static T df(T, T y) { return y * (T(1) - y); }
};
struct ReluOp {
  template <typename T>
  static T f(T x) { return x > T(0) ? x : T(0); }
  template <typename T>
  static T df(T x, T) { return x > T(0) ? T(1) : T(0); }
};
struct ExpOp {
  template <typename T>
  static T f(T x) { return fexp(x); }
  template <typename T>
  static T df(T, T y) { return y; }
};
struct ReciprocalOp {
  template <typename T>
  static T f(T x) { return T(1) / x; }
  template <typename T>
  static T df(T, T y) { return -y * y; }
};
struct AbsOp {
  template <typename T>
  static T f(T x) { return std::abs(x); }
  template <typename T>
  static T df(T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); }
};
struct SoftplusOp {
  template <typename T>
  static T f(T x) { return softplus_stable(x); }
  template <typename T>
  static T df(T x, T) { return sigmoid_stable(x); }
};

}  // namespace detail

// Ordered record of executed operations plus their backward rules. Ops append
// in execution order, so the record is topologically sorted by construction.
template <typename T>
class Tape {
 public:
  using Tensor_ = Tensor<T>;
  using Node = typename Tensor<T>::Node;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return entries_.size(); }

  void reset() { entries_.clear(); }

  // --- extension surface (used by ops defined in other headers) ---

  Tensor_ make_tensor(Shape shape, std::vector<T> data, bool requires_grad, const char* op) {
    if (!detail::all_finite(data))
      throw numeric_error(strcat_all("non-finite values produced by ", op));
    Tensor_ t = Tensor_::from_data(std::move(shape), std::move(data), requires_grad);
    if (requires_grad) {
      t.node_->tape = this;
      t.node_->entry = entries_.size();
    }
    return t;
  }

  void attach_backward(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

  void check_input(const Tensor_& t, const char* op) const {
    if (!t.defined()) throw data_error(strcat_all(op, ": undefined tensor operand"));
    if (t.node_->tape != nullptr && t.node_->tape != this)
      throw data_error(strcat_all(op, ": operand belongs to a different tape"));
  }

  static std::vector<T>& ensure_grad(const Tensor_& t) {
    auto& g = t.node_->grad;
    if (g.empty()) g.assign(t.node_->data.size(), T(0));
    return g;
  }

  static const std::vector<T>* grad_if_any(const Tensor_& t) {
    return t.node_->grad.empty() ? nullptr : &t.node_->grad;
  }

  // --- reverse pass ---

  void backward(const Tensor_& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw data_error(strcat_all("backward: loss must be a scalar, got ",
                                  loss.defined() ? shape_str(loss.shape()) : "undefined"));
    if (loss.node_->tape != this || !loss.requires_grad())
      throw data_error("backward: loss is detached from this tape");
    ensure_grad(loss)[0] += T(1);
    for (std::size_t i = loss.node_->entry + 1; i-- > 0;) entries_[i]();
  }

  // --- elementwise ---

  Tensor_ add(const Tensor_& a, const Tensor_& b) { return binary(EwKind::add, a, b, "add"); }
  Tensor_ sub(const Tensor_& a, const Tensor_& b) { return binary(EwKind::sub, a, b, "sub"); }
  Tensor_ mul(const Tensor_& a, const Tensor_& b) { return binary(EwKind::mul, a, b, "mul"); }

  Tensor_ silu(const Tensor_& a) { return unary<detail::SiluOp>(a, "silu"); }
  Tensor_ sigmoid(const Tensor_& a) { return unary<detail::SigmoidOp>(a, "sigmoid"); }
  Tensor_ relu(const Tensor_& a) { return unary<detail::ReluOp>(a, "relu"); }
  Tensor_ exp(const Tensor_& a) { return unary<detail::ExpOp>(a, "exp"); }
  Tensor_ reciprocal(const Tensor_& a) { return unary<detail::ReciprocalOp>(a, "reciprocal"); }
  Tensor_ abs(const Tensor_& a) { return unary<detail::AbsOp>(a, "abs"); }
  Tensor_ softplus(const Tensor_& a) { return unary<detail::SoftplusOp>(a, "softplus"); }

  Tensor_ elementwise(EwKind kind, const Tensor_& a, const Tensor_* b = nullptr) {
    switch (kind) {
      case EwKind::add:
      case EwKind::sub:
      case EwKind::mul:
        if (!b) throw data_error("elementwise: binary kind requires two operands");
        return binary(kind, a, *b, "elementwise");
      case EwKind::silu: return silu(a);
      case EwKind::sigmoid: return sigmoid(a);
      case EwKind::relu: return relu(a);
      case EwKind::exp: return exp(a);
      case EwKind::reciprocal: return reciprocal(a);
      case EwKind::abs: return abs(a);
    }
    throw data_error("elementwise: unknown op kind");
  }

  // --- linear algebra ---

  Tensor_ matmul(const Tensor_& a, const Tensor_& b) {
    check_input(a, "matmul");
    check_input(b, "matmul");
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
      throw data_error(strcat_all("matmul: inner dimensions of ", shape_str(a.shape()), " and ",
                                  shape_str(b.shape()), " do not match"));
    std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    std::vector<T> out(M * N);
    mm_nn(M, K, N, a.data().data(), b.data().data(), out.data());
    bool rg = a.requires_grad() || b.requires_grad();
    Tensor_ y = make_tensor({M, N}, std::move(out), rg, "matmul");
    if (rg) {
      attach_backward([an = a.node_, bn = b.node_, yn = y.node_, M, K, N] {
        if (yn->grad.empty()) return;
        const T* gy = yn->grad.data();
        if (an->requires_grad) {
          auto& ga = an->grad;
          if (ga.empty()) ga.assign(an->data.size(), T(0));
          // dA = dY * B^T; transposing B (weight-sized) lets the kernel run
          // with a contiguous inner axis
          std::vector<T> bt(K * N);
          const T* bd = bn->data.data();
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t j = 0; j < N; ++j) bt[j * K + k] = bd[k * N + j];
          mm_nn(M, N, K, gy, bt.data(), ga.data(), true);
        }
        if (bn->requires_grad) {
          auto& gb = bn->grad;
          if (gb.empty()) gb.assign(bn->data.size(), T(0));
          mm_tn(K, M, N, an->data.data(), gy, gb.data(), true);  // dB = A^T * dY
        }
      });
    }
    return y;
  }

  // input [Cin x H x W], weight [Cout x Cin x k x k], optional bias [Cout].
  // Same-size output via pad = (k-1)/2.
  Tensor_ conv2d(const Tensor_& input, const Tensor_& weight, const Tensor_& bias,
                 Padding padding = Padding::reflect) {
    check_input(input, "conv2d");
    check_input(weight, "conv2d");
    if (input.shape().size() != 3 || weight.shape().size() != 4)
      throw data_error(strcat_all("conv2d: expected [C,H,W] input and [Co,Ci,k,k] weight, got ",
                                  shape_str(input.shape()), " and ", shape_str(weight.shape())));
    std::size_t Cin = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
    std::size_t Cout = weight.shape()[0], k = weight.shape()[2];
    if (weight.shape()[1] != Cin)
      throw data_error(strcat_all("conv2d: weight expects ", weight.shape()[1],
                                  " input channels, input has ", Cin));
    if (weight.shape()[3] != k || k % 2 == 0)
      throw data_error(strcat_all("conv2d: kernel must be square and odd, got ",
                                  shape_str(weight.shape())));
    if (bias.defined()) {
      check_input(bias, "conv2d");
      if (bias.shape() != Shape{Cout})
        throw data_error(strcat_all("conv2d: bias shape ", shape_str(bias.shape()),
                                    " does not match ", Cout, " output channels"));
    }
    std::size_t HW = H * W;
    long pad = static_cast<long>(k - 1) / 2;
    std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;

    // explicit padded copy keeps the hot loops free of index mapping
    auto xpad = std::make_shared<std::vector<T>>(Cin * Hp * Wp);
    const T* x = input.data().data();
    parallel_for(Cin, [&](std::size_t c0, std::size_t c1) {
      for (std::size_t ci = c0; ci < c1; ++ci) {
        const T* plane = x + ci * HW;
        T* dst = xpad->data() + ci * Hp * Wp;
        for (long pr = 0; pr < static_cast<long>(Hp); ++pr) {
          long rr = pad_index(pr - pad, static_cast<long>(H), padding);
          for (long pc = 0; pc < static_cast<long>(Wp); ++pc) {
            long cc = pad_index(pc - pad, static_cast<long>(W), padding);
            dst[pr * static_cast<long>(Wp) + pc] =
                (rr < 0 || cc < 0) ? T(0) : plane[rr * static_cast<long>(W) + cc];
          }
        }
      }
    });

    std::vector<T> out(Cout * HW);
    const T* wv = weight.data().data();
    const T* bv = bias.defined() ? bias.data().data() : nullptr;
    parallel_for(Cout, [&](std::size_t o0, std::size_t o1) {
      for (std::size_t co = o0; co < o1; ++co) {
        T* plane = out.data() + co * HW;
        T b = bv ? bv[co] : T(0);
        for (std::size_t l = 0; l < HW; ++l) plane[l] = b;
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t kr = 0; kr < k; ++kr)
            for (std::size_t kc = 0; kc < k; ++kc) {
              T w = wv[((co * Cin + ci) * k + kr) * k + kc];
              for (std::size_t r = 0; r < H; ++r) {
                const T* xrow = xpad->data() + (ci * Hp + r + kr) * Wp + kc;
                T* orow = plane + r * W;
                for (std::size_t c = 0; c < W; ++c) orow[c] += w * xrow[c];
              }
            }
      }
    });

    bool rg = input.requires_grad() || weight.requires_grad() ||
              (bias.defined() && bias.requires_grad());
    Tensor_ y = make_tensor({Cout, H, W}, std::move(out), rg, "conv2d");
    if (rg) {
      auto bn = bias.defined() ? bias.node_ : nullptr;
      attach_backward([xn = input.node_, wn = weight.node_, bn, yn = y.node_, xpad, Cin, Cout, H,
                       W, k, pad, padding] {
        if (yn->grad.empty()) return;
        const T* gy = yn->grad.data();
        std::size_t HW = H * W;
        std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
        if (wn->requires_grad) {
          auto& gw = wn->grad;
          if (gw.empty()) gw.assign(wn->data.size(), T(0));
          parallel_for(Cout, [&](std::size_t o0, std::size_t o1) {
            for (std::size_t co = o0; co < o1; ++co)
              for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t kr = 0; kr < k; ++kr)
                  for (std::size_t kc = 0; kc < k; ++kc) {
                    T acc = T(0);
                    for (std::size_t r = 0; r < H; ++r)
                      acc += dot_lanes(gy + co * HW + r * W,
                                       xpad->data() + (ci * Hp + r + kr) * Wp + kc, W);
                    gw[((co * Cin + ci) * k + kr) * k + kc] += acc;
                  }
          });
        }
        if (bn && bn->requires_grad) {
          auto& gb = bn->grad;
          if (gb.empty()) gb.assign(Cout, T(0));
          for (std::size_t co = 0; co < Cout; ++co) {
            T acc = T(0);
            const T* plane = gy + co * HW;
            for (std::size_t l = 0; l < HW; ++l) acc += plane[l];
            gb[co] += acc;
          }
        }
        if (xn->requires_grad) {
          auto& gx = xn->grad;
          if (gx.empty()) gx.assign(xn->data.size(), T(0));
          std::vector<T> dxpad(Cin * Hp * Wp, T(0));
          const T* wv = wn->data.data();
          parallel_for(Cin, [&](std::size_t c0, std::size_t c1) {
            for (std::size_t ci = c0; ci < c1; ++ci) {
              for (std::size_t co = 0; co < Cout; ++co)
                for (std::size_t kr = 0; kr < k; ++kr)
                  for (std::size_t kc = 0; kc < k; ++kc) {
                    T w = wv[((co * Cin + ci) * k + kr) * k + kc];
                    for (std::size_t r = 0; r < H; ++r) {
                      T* drow = dxpad.data() + (ci * Hp + r + kr) * Wp + kc;
                      const T* gyrow = gy + co * HW + r * W;
                      for (std::size_t c = 0; c < W; ++c) drow[c] += w * gyrow[c];
                    }
                  }
              // fold the padded margins back through the padding map
              T* gplane = gx.data() + ci * HW;
              const T* dplane = dxpad.data() + ci * Hp * Wp;
              for (long pr = 0; pr < static_cast<long>(Hp); ++pr) {
                long rr = pad_index(pr - pad, static_cast<long>(H), padding);
                if (rr < 0) continue;
                for (long pc = 0; pc < static_cast<long>(Wp); ++pc) {
                  long cc = pad_index(pc - pad, static_cast<long>(W), padding);
                  if (cc >= 0)
                    gplane[rr * static_cast<long>(W) + cc] +=
                        dplane[pr * static_cast<long>(Wp) + pc];
                }
              }
            }
          });
        }
      });
    }
    return y;
  }

  // x [L x E], weight [E x k], bias [E]; per-channel 1-D convolution along
  // the sequence axis, same length, reflect padding.
  Tensor_ conv1d_depthwise(const Tensor_& x, const Tensor_& weight, const Tensor_& bias) {
    check_input(x, "conv1d");
    check_input(weight, "conv1d");
    check_input(bias, "conv1d");
    if (x.shape().size() != 2 || weight.shape().size() != 2 || x.shape()[1] != weight.shape()[0])
      throw data_error(strcat_all("conv1d: shapes ", shape_str(x.shape()), " and ",
                                  shape_str(weight.shape()), " are inconsistent"));
    std::size_t L = x.shape()[0], E = x.shape()[1], k = weight.shape()[1];
    if (k % 2 == 0) throw data_error("conv1d: kernel size must be odd");
    long pad = static_cast<long>(k - 1) / 2;
    std::vector<T> out(L * E);
    const T* xv = x.data().data();
    const T* wv = weight.data().data();
    const T* bv = bias.data().data();
    parallel_for(L, [&](std::size_t l0, std::size_t l1) {
      for (std::size_t l = l0; l < l1; ++l) {
        T* orow = out.data() + l * E;
        for (std::size_t e = 0; e < E; ++e) orow[e] = bv[e];
        for (std::size_t j = 0; j < k; ++j) {
          long m = pad_index(static_cast<long>(l) + static_cast<long>(j) - pad,
                             static_cast<long>(L), Padding::reflect);
          const T* xrow = xv + m * static_cast<long>(E);
          for (std::size_t e = 0; e < E; ++e) orow[e] += wv[e * k + j] * xrow[e];
        }
      }
    });
    bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
    Tensor_ y = make_tensor({L, E}, std::move(out), rg, "conv1d");
    if (rg) {
      attach_backward([xn = x.node_, wn = weight.node_, bn = bias.node_, yn = y.node_, L, E, k,
                       pad] {
        if (yn->grad.empty()) return;
        const T* gy = yn->grad.data();
        const T* xv = xn->data.data();
        const T* wv = wn->data.data();
        bool need_x = xn->requires_grad, need_w = wn->requires_grad, need_b = bn->requires_grad;
        T* gx = nullptr;
        T* gw = nullptr;
        T* gb = nullptr;
        if (need_x) {
          if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
          gx = xn->grad.data();
        }
        if (need_w) {
          if (wn->grad.empty()) wn->grad.assign(wn->data.size(), T(0));
          gw = wn->grad.data();
        }
        if (need_b) {
          if (bn->grad.empty()) bn->grad.assign(bn->data.size(), T(0));
          gb = bn->grad.data();
        }
        // parallel over channel ranges: every write lands in the own range
        parallel_for(E, [&](std::size_t e0, std::size_t e1) {
          for (std::size_t l = 0; l < L; ++l) {
            const T* grow = gy + l * E;
            if (need_b)
              for (std::size_t e = e0; e < e1; ++e) gb[e] += grow[e];
            for (std::size_t j = 0; j < k; ++j) {
              long m = pad_index(static_cast<long>(l) + static_cast<long>(j) - pad,
                                 static_cast<long>(L), Padding::reflect);
              const T* xrow = xv + m * static_cast<long>(E);
              T* gxrow = need_x ? gx + m * static_cast<long>(E) : nullptr;
              for (std::size_t e = e0; e < e1; ++e) {
                if (need_w) gw[e * k + j] += grow[e] * xrow[e];
                if (need_x) gxrow[e] += grow[e] * wv[e * k + j];
              }
            }
          }
        });
      });
    }
    return y;
  }

  // x [L x D]; normalizes the last axis, then per-feature affine.
  Tensor_ layernorm(const Tensor_& x, const Tensor_& gain, const Tensor_& offset,
                    T epsilon = T(1e-5)) {
    check_input(x, "layernorm");
    check_input(gain, "layernorm");
    check_input(offset, "layernorm");
    if (x.shape().size() != 2 || x.shape()[1] == 0)
      throw data_error(strcat_all("layernorm: expected [L,D] with D > 0, got ",
                                  shape_str(x.shape())));
    std::size_t L = x.shape()[0], D = x.shape()[1];
    if (gain.shape() != Shape{D} || offset.shape() != Shape{D})
      throw data_error("layernorm: gain/offset must have shape [D]");
    auto xhat = std::make_shared<std::vector<T>>(L * D);
    auto inv = std::make_shared<std::vector<T>>(L);
    std::vector<T> out(L * D);
    const T* xv = x.data().data();
    const T* gv = gain.data().data();
    const T* ov = offset.data().data();
    parallel_for(L, [&](std::size_t l0, std::size_t l1) {
      for (std::size_t l = l0; l < l1; ++l) {
        const T* row = xv + l * D;
        T mu = T(0);
        for (std::size_t d = 0; d < D; ++d) mu += row[d];
        mu /= static_cast<T>(D);
        T var = T(0);
        for (std::size_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
        var /= static_cast<T>(D);
        T iv = T(1) / std::sqrt(var + epsilon);
        (*inv)[l] = iv;
        T* hrow = xhat->data() + l * D;
        T* orow = out.data() + l * D;
        for (std::size_t d = 0; d < D; ++d) {
          hrow[d] = (row[d] - mu) * iv;
          orow[d] = hrow[d] * gv[d] + ov[d];
        }
      }
    });
    bool rg = x.requires_grad() || gain.requires_grad() || offset.requires_grad();
    Tensor_ y = make_tensor({L, D}, std::move(out), rg, "layernorm");
    if (rg) {
      attach_backward([xn = x.node_, gn = gain.node_, on = offset.node_, yn = y.node_, xhat, inv,
                       L, D] {
        if (yn->grad.empty()) return;
        const T* gy = yn->grad.data();
        const T* gv = gn->data.data();
        if (gn->requires_grad || on->requires_grad) {
          if (gn->requires_grad && gn->grad.empty()) gn->grad.assign(D, T(0));
          if (on->requires_grad && on->grad.empty()) on->grad.assign(D, T(0));
          for (std::size_t l = 0; l < L; ++l)
            for (std::size_t d = 0; d < D; ++d) {
              if (gn->requires_grad) gn->grad[d] += gy[l * D + d] * (*xhat)[l * D + d];
              if (on->requires_grad) on->grad[d] += gy[l * D + d];
            }
        }
        if (xn->requires_grad) {
          if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
          T* gx = xn->grad.data();
          parallel_for(L, [&](std::size_t l0, std::size_t l1) {
            for (std::size_t l = l0; l < l1; ++l) {
              const T* grow = gy + l * D;
              const T* hrow = xhat->data() + l * D;
              T mean_h = T(0), mean_hx = T(0);
              for (std::size_t d = 0; d < D; ++d) {
                T h = grow[d] * gv[d];
                mean_h += h;
                mean_hx += h * hrow[d];
              }
              mean_h /= static_cast<T>(D);
              mean_hx /= static_cast<T>(D);
              T iv = (*inv)[l];
              for (std::size_t d = 0; d < D; ++d)
                gx[l * D + d] += iv * (grow[d] * gv[d] - mean_h - hrow[d] * mean_hx);
            }
          });
        }
      });
    }
    return y;
  }

  // --- structural ops ---

  Tensor_ reshape(const Tensor_& x, Shape shape) {
    check_input(x, "reshape");
    if (shape_numel(shape) != x.numel())
      throw data_error(strcat_all("reshape: cannot view ", shape_str(x.shape()), " as ",
                                  shape_str(shape)));
    std::vector<T> out = x.data();
    bool rg = x.requires_grad();
    Tensor_ y = make_tensor(std::move(shape), std::move(out), rg, "reshape");
    if (rg) {
      attach_backward([xn = x.node_, yn = y.node_] {
        if (yn->grad.empty() || !xn->requires_grad) return;
        if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
        for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
      });
    }
    return y;
  }

  Tensor_ transpose2d(const Tensor_& x) {
    check_input(x, "transpose2d");
    if (x.shape().size() != 2)
      throw data_error(strcat_all("transpose2d: expected rank-2 tensor, got ",
                                  shape_str(x.shape())));
    std::size_t R = x.shape()[0], C = x.shape()[1];
    std::vector<T> out(R * C);
    const T* xv = x.data().data();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) out[c * R + r] = xv[r * C + c];
    bool rg = x.requires_grad();
    Tensor_ y = make_tensor({C, R}, std::move(out), rg, "transpose2d");
    if (rg) {
      attach_backward([xn = x.node_, yn = y.node_, R, C] {
        if (yn->grad.empty() || !xn->requires_grad) return;
        if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t r = 0; r < R; ++r) xn->grad[r * C + c] += yn->grad[c * R + r];
      });
    }
    return y;
  }

  Tensor_ concat(const Tensor_& a, const Tensor_& b, std::size_t axis) {
    check_input(a, "concat");
    check_input(b, "concat");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || axis >= sa.size())
      throw data_error(strcat_all("concat: incompatible shapes ", shape_str(sa), " and ",
                                  shape_str(sb), " on axis ", axis));
    for (std::size_t d = 0; d < sa.size(); ++d)
      if (d != axis && sa[d] != sb[d])
        throw data_error(strcat_all("concat: incompatible shapes ", shape_str(sa), " and ",
                                    shape_str(sb), " on axis ", axis));
    Shape so = sa;
    so[axis] = sa[axis] + sb[axis];
    std::size_t after = 1;
    for (std::size_t d = axis + 1; d < sa.size(); ++d) after *= sa[d];
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= sa[d];
    std::size_t ablk = sa[axis] * after, bblk = sb[axis] * after;
    std::vector<T> out(shape_numel(so));
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + o * (ablk + bblk), a.data().data() + o * ablk, ablk * sizeof(T));
      std::memcpy(out.data() + o * (ablk + bblk) + ablk, b.data().data() + o * bblk,
                  bblk * sizeof(T));
    }
    bool rg = a.requires_grad() || b.requires_grad();
    Tensor_ y = make_tensor(std::move(so), std::move(out), rg, "concat");
    if (rg) {
      attach_backward([an = a.node_, bn = b.node_, yn = y.node_, outer, ablk, bblk] {
        if (yn->grad.empty()) return;
        const T* gy = yn->grad.data();
        if (an->requires_grad) {
          if (an->grad.empty()) an->grad.assign(an->data.size(), T(0));
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < ablk; ++i)
              an->grad[o * ablk + i] += gy[o * (ablk + bblk) + i];
        }
        if (bn->requires_grad) {
          if (bn->grad.empty()) bn->grad.assign(bn->data.size(), T(0));
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < bblk; ++i)
              bn->grad[o * bblk + i] += gy[o * (ablk + bblk) + ablk + i];
        }
      });
    }
    return y;
  }

  Tensor_ reverse_rows(const Tensor_& x) {
    check_input(x, "reverse_rows");
    if (x.shape().size() != 2)
      throw data_error("reverse_rows: expected rank-2 tensor");
    std::size_t L = x.shape()[0], D = x.shape()[1];
    std::vector<T> out(L * D);
    for (std::size_t l = 0; l < L; ++l)
      std::memcpy(out.data() + (L - 1 - l) * D, x.data().data() + l * D, D * sizeof(T));
    bool rg = x.requires_grad();
    Tensor_ y = make_tensor({L, D}, std::move(out), rg, "reverse_rows");
    if (rg) {
      attach_backward([xn = x.node_, yn = y.node_, L, D] {
        if (yn->grad.empty() || !xn->requires_grad) return;
        if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t d = 0; d < D; ++d)
            xn->grad[l * D + d] += yn->grad[(L - 1 - l) * D + d];
      });
    }
    return y;
  }

  // --- reductions ---

  Tensor_ sum(const Tensor_& x) {
    check_input(x, "sum");
    T acc = T(0);
    for (T v : x.data()) acc += v;
    bool rg = x.requires_grad();
    Tensor_ y = make_tensor({1}, {acc}, rg, "sum");
    if (rg) {
      attach_backward([xn = x.node_, yn = y.node_] {
        if (yn->grad.empty() || !xn->requires_grad) return;
        if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
        T g = yn->grad[0];
        for (auto& v : xn->grad) v += g;
      });
    }
    return y;
  }

  Tensor_ scale(const Tensor_& x, T c) {
    check_input(x, "scale");
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
    bool rg = x.requires_grad();
    Tensor_ y = make_tensor(x.shape(), std::move(out), rg, "scale");
    if (rg) {
      attach_backward([xn = x.node_, yn = y.node_, c] {
        if (yn->grad.empty() || !xn->requires_grad) return;
        if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
        for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += c * yn->grad[i];
      });
    }
    return y;
  }

  // mean absolute deviation between same-shape tensors
  Tensor_ l1_loss(const Tensor_& pred, const Tensor_& target) {
    check_input(pred, "l1_loss");
    check_input(target, "l1_loss");
    if (pred.shape() != target.shape())
      throw data_error(strcat_all("l1_loss: shape mismatch ", shape_str(pred.shape()), " vs ",
                                  shape_str(target.shape())));
    return scale(sum(abs(sub(pred, target))), T(1) / static_cast<T>(pred.numel()));
  }

 private:
  template <typename Op>
  Tensor_ unary(const Tensor_& a, const char* op) {
    check_input(a, op);
    std::size_t n = a.numel();
    std::vector<T> out(n);
    const T* av = a.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = Op::f(av[i]);
    bool rg = a.requires_grad();
    Tensor_ y = make_tensor(a.shape(), std::move(out), rg, op);
    if (rg) {
      attach_backward([an = a.node_, yn = y.node_] {
        if (yn->grad.empty() || !an->requires_grad) return;
        if (an->grad.empty()) an->grad.assign(an->data.size(), T(0));
        const T* xv = an->data.data();
        const T* yv = yn->data.data();
        const T* gy = yn->grad.data();
        T* gx = an->grad.data();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) gx[i] += Op::df(xv[i], yv[i]) * gy[i];
      });
    }
    return y;
  }

  // b tiles along the trailing axes of a (bias-style broadcast)
  static bool is_suffix_of(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
      if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
  }

  template <typename Op>
  static void binary_forward(const Shape& sa, const Shape& sb, const Shape& so, const T* av,
                             const T* bv, T* out) {
    std::size_t n = shape_numel(so);
    if (sa == sb) {
      for (std::size_t i = 0; i < n; ++i) out[i] = Op::f(av[i], bv[i]);
    } else if (sa == so && is_suffix_of(sb, sa)) {
      std::size_t m = shape_numel(sb);
      for (std::size_t o = 0; o < n; o += m)
        for (std::size_t j = 0; j < m; ++j) out[o + j] = Op::f(av[o + j], bv[j]);
    } else if (sb == so && is_suffix_of(sa, sb)) {
      std::size_t m = shape_numel(sa);
      for (std::size_t o = 0; o < n; o += m)
        for (std::size_t j = 0; j < m; ++j) out[o + j] = Op::f(av[j], bv[o + j]);
    } else {
      detail::broadcast_visit(sa, sb, so, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = Op::f(av[ia], bv[ib]);
      });
    }
  }

  Tensor_ binary(EwKind kind, const Tensor_& a, const Tensor_& b, const char* op) {
    check_input(a, op);
    check_input(b, op);
    Shape so = detail::broadcast_shape(a.shape(), b.shape());
    std::vector<T> out(shape_numel(so));
    const T* av = a.data().data();
    const T* bv = b.data().data();
    switch (kind) {
      case EwKind::add:
        binary_forward<detail::AddOp>(a.shape(), b.shape(), so, av, bv, out.data());
        break;
      case EwKind::sub:
        binary_forward<detail::SubOp>(a.shape(), b.shape(), so, av, bv, out.data());
        break;
      default:
        binary_forward<detail::MulOp>(a.shape(), b.shape(), so, av, bv, out.data());
    }
    bool rg = a.requires_grad() || b.requires_grad();
    Tensor_ y = make_tensor(so, std::move(out), rg, op);
    if (rg) {
      attach_backward([kind, an = a.node_, bn = b.node_, yn = y.node_] {
        if (yn->grad.empty()) return;
        const auto& gy = yn->grad;
        bool na = an->requires_grad, nb = bn->requires_grad;
        if (na && an->grad.empty()) an->grad.assign(an->data.size(), T(0));
        if (nb && bn->grad.empty()) bn->grad.assign(bn->data.size(), T(0));
        std::size_t n = gy.size();
        if (an->shape == yn->shape && is_suffix_of(bn->shape, an->shape)) {
          std::size_t m = bn->data.size();
          for (std::size_t o = 0; o < n; o += m)
            for (std::size_t j = 0; j < m; ++j) {
              T g = gy[o + j];
              switch (kind) {
                case EwKind::add:
                  if (na) an->grad[o + j] += g;
                  if (nb) bn->grad[j] += g;
                  break;
                case EwKind::sub:
                  if (na) an->grad[o + j] += g;
                  if (nb) bn->grad[j] -= g;
                  break;
                default:
                  if (na) an->grad[o + j] += g * bn->data[j];
                  if (nb) bn->grad[j] += g * an->data[o + j];
              }
            }
          return;
        }
        detail::broadcast_visit(an->shape, bn->shape, yn->shape,
                                [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                  switch (kind) {
                                    case EwKind::add:
                                      if (na) an->grad[ia] += gy[i];
                                      if (nb) bn->grad[ib] += gy[i];
                                      break;
                                    case EwKind::sub:
                                      if (na) an->grad[ia] += gy[i];
                                      if (nb) bn->grad[ib] -= gy[i];
                                      break;
                                    default:
                                      if (na) an->grad[ia] += gy[i] * bn->data[ib];
                                      if (nb) bn->grad[ib] += gy[i] * an->data[ia];
                                  }
                                });
      });
    }
    return y;
  }

  std::vector<std::function<void()>> entries_;
};

}  // namespace ipsfuse
