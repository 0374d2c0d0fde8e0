// SPDX-License-Identifier: Apache-2.0
#pragma once
// Dense row-major tensors with reverse-mode automatic differentiation over a
// dynamically recorded tape.
//
// Values are immutable once a tensor exists. Every operation that produces a
// tensor validates that the result is finite and throws otherwise, so a tensor
// in hand never carries NaN/Inf. The tape is recorded per forward pass and
// freed when the tensors referencing it go out of scope; backward() walks it
// in reverse recording order, which is a valid topological order and makes
// gradient accumulation deterministic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace frskd {

using Shape = std::vector<std::size_t>;
using Axes = std::vector<std::size_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
// Domain violations and non-finite results.
struct ValueError : Error {
  using Error::Error;
};
struct GraphError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
// Training-time numerical abort (exit code 4 at the CLI).
struct NumericError : Error {
  using Error::Error;
};

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace autograd {

inline bool& grad_enabled() {
  static thread_local bool on = true;
  return on;
}

/// Disables tape recording for its scope (evaluation, optimizer math).
struct NoGradScope {
  bool prev;
  NoGradScope() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradScope() { grad_enabled() = prev; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

inline std::uint64_t next_node_seq() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace autograd

template <typename T>
class Tensor;

namespace detail {

// One recorded operation. `backward` maps the gradient at the output to
// gradients for each parent, aligned with `parents`; entries for parents that
// do not require gradients are left empty.
template <typename T>
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<Tensor<T>> parents;
  std::function<std::vector<Tensor<T>>(const Tensor<T>&)> backward;
};

template <typename T>
void ensure_finite(const std::vector<T>& vals, const char* op) {
  for (const T v : vals) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw ValueError(std::string(op) + ": non-finite value produced");
    }
  }
}

}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  /// Builds a leaf tensor. Throws on shape/length mismatch or non-finite data.
  static Tensor create(Shape shape, std::vector<T> values, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("create: zero dimension extent");
    }
    if (shape_size(shape) != values.size()) {
      throw ShapeError("create: shape " + shape_str(shape) + " does not match value count " +
                       std::to_string(values.size()));
    }
    detail::ensure_finite(values, "create");
    Tensor t;
    t.shape_ = std::move(shape);
    t.values_ = std::make_shared<const std::vector<T>>(std::move(values));
    t.requires_grad_ = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_size(shape);
    return create(std::move(shape), std::vector<T>(n, T(0)));
  }

  static Tensor full(Shape shape, T v) {
    const std::size_t n = shape_size(shape);
    return create(std::move(shape), std::vector<T>(n, v));
  }

  /// Rank-0 tensor holding a single value.
  static Tensor scalar(T v) { return create({}, {v}); }

  /// Wraps existing storage as a leaf without copying. The storage must stay
  /// immutable while any recorded graph references it; parameters mutate it
  /// only between steps, after the previous tape has been dropped.
  static Tensor from_storage(Shape shape, std::shared_ptr<const std::vector<T>> storage, bool requires_grad) {
    if (shape_size(shape) != storage->size()) throw ShapeError("from_storage: size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.values_ = std::move(storage);
    t.requires_grad_ = requires_grad;
    return t;
  }

  bool defined() const { return values_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_ ? values_->size() : 0; }
  const std::vector<T>& values() const { return *values_; }
  const T* data() const { return values_->data(); }
  bool requires_grad() const { return requires_grad_; }
  bool has_lineage() const { return node_ != nullptr; }
  const char* op_name() const { return node_ ? node_->op : ""; }

  T scalar_value() const {
    if (size() != 1) throw ShapeError("scalar_value: tensor has " + std::to_string(size()) + " values");
    return (*values_)[0];
  }

  /// Identity used by GradientMap; stable for leaves backed by parameter
  /// storage across in-place updates.
  const void* key() const { return node_ ? static_cast<const void*>(node_.get()) : static_cast<const void*>(values_.get()); }

  /// Value-identical tensor with no lineage; gradients never flow through it.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.values_ = values_;
    return t;
  }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }

  // Internal: attach the result of a recorded operation.
  static Tensor make_result(Shape shape, std::vector<T> values, const char* op, std::vector<Tensor<T>> parents,
                            std::function<std::vector<Tensor<T>>(const Tensor<T>&)> backward) {
    detail::ensure_finite(values, op);
    Tensor t;
    t.shape_ = std::move(shape);
    t.values_ = std::make_shared<const std::vector<T>>(std::move(values));
    if (autograd::grad_enabled()) {
      bool needs = false;
      for (const auto& p : parents) needs = needs || p.requires_grad();
      if (needs) {
        t.requires_grad_ = true;
        t.node_ = std::make_shared<detail::Node<T>>();
        t.node_->seq = autograd::next_node_seq();
        t.node_->op = op;
        t.node_->parents = std::move(parents);
        t.node_->backward = std::move(backward);
      }
    }
    return t;
  }

 private:
  std::shared_ptr<const std::vector<T>> values_;
  Shape shape_;
  bool requires_grad_ = false;
  std::shared_ptr<detail::Node<T>> node_;
};

// ---------------------------------------------------------------------------
// Broadcasting (trailing-dimension; a missing or size-1 axis repeats).

inline bool broadcast_shapes(const Shape& a, const Shape& b, Shape& out) {
  const std::size_t ra = a.size(), rb = b.size();
  const std::size_t r = std::max(ra, rb);
  out.assign(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < ra ? a[ra - 1 - i] : 1;
    const std::size_t db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) return false;
    out[r - 1 - i] = std::max(da, db);
  }
  return true;
}

namespace detail {

// Row-major strides, with 0 where the (right-aligned) operand axis is 1 or
// missing, so the operand index never advances along broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& operand, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < operand.size(); ++i) {
    const std::size_t axis = operand.size() - 1 - i;
    const std::size_t out_axis = r - 1 - i;
    strides[out_axis] = operand[axis] == 1 ? 0 : stride;
    stride *= operand[axis];
  }
  return strides;
}

template <typename T, typename F>
std::vector<T> broadcast_apply(const Shape& out_shape, const Tensor<T>& a, const Tensor<T>& b, F&& f) {
  const std::size_t n = shape_size(out_shape);
  std::vector<T> out(n);
  const T* pa = a.data();
  const T* pb = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
    return out;
  }
  const std::size_t r = out_shape.size();
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(pa[oa], pb[ob]);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out_shape[d]) break;
      oa -= sa[d] * out_shape[d];
      ob -= sb[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace detail

/// Materializes `t` expanded to `target` under trailing broadcasting rules.
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& t, const Shape& target);

/// Sums `g` over the axes that were expanded when broadcasting from `target`,
/// producing a tensor of shape `target`. Used for gradients of broadcast ops.
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const Shape& target);

// ---------------------------------------------------------------------------
// Op kinds (dispatch surface mirroring the library's primitive set).

enum class EwKind { add, sub, mul, div, relu, square, sqrt, exp, log };
enum class ReduceKind { sum, mean, max };

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> square(const Tensor<T>& a);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);
template <typename T>
Tensor<T> log(const Tensor<T>& a);

namespace detail {

template <typename T, typename F, typename Bw>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, F&& f, Bw&& bw) {
  Shape out_shape;
  if (!broadcast_shapes(a.shape(), b.shape(), out_shape)) {
    throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<T> vals = broadcast_apply(out_shape, a, b, f);
  return Tensor<T>::make_result(out_shape, std::move(vals), name, {a, b}, std::forward<Bw>(bw));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [as, bs](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{reduce_to_shape(g, as), reduce_to_shape(g, bs)};
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [as, bs](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{reduce_to_shape(g, as),
                                      reduce_to_shape(mul(g, Tensor<T>::scalar(T(-1))), bs)};
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const Tensor<T> av = a.detach(), bv = b.detach();
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [av, bv](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{reduce_to_shape(mul(g, bv), av.shape()),
                                      reduce_to_shape(mul(g, av), bv.shape())};
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (const T v : b.values()) {
    if (v == T(0)) throw ValueError("div: division by zero");
  }
  const Tensor<T> av = a.detach(), bv = b.detach();
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [av, bv](const Tensor<T>& g) {
        Tensor<T> ga = reduce_to_shape(div(g, bv), av.shape());
        Tensor<T> gb = reduce_to_shape(
            mul(Tensor<T>::scalar(T(-1)), div(mul(g, av), mul(bv, bv))), bv.shape());
        return std::vector<Tensor<T>>{std::move(ga), std::move(gb)};
      });
}

namespace detail {

template <typename T, typename F, typename Bw>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, F&& f, Bw&& bw) {
  std::vector<T> vals(a.size());
  const T* p = a.data();
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = f(p[i]);
  return Tensor<T>::make_result(a.shape(), std::move(vals), name, {a}, std::forward<Bw>(bw));
}

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  const Tensor<T> av = a.detach();
  return detail::unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [av](const Tensor<T>& g) {
        std::vector<T> m(av.size());
        const T* p = av.data();
        const T* pg = g.data();
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = p[i] > T(0) ? pg[i] : T(0);
        return std::vector<Tensor<T>>{Tensor<T>::create(av.shape(), std::move(m))};
      });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  const Tensor<T> av = a.detach();
  return detail::unary_op<T>(
      "square", a, [](T x) { return x * x; },
      [av](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{mul(mul(g, av), Tensor<T>::scalar(T(2)))};
      });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  std::vector<T> vals(a.size());
  const T* p = a.data();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (p[i] < T(0)) throw ValueError("sqrt: negative operand");
    vals[i] = std::sqrt(p[i]);
  }
  // d sqrt(x) = g / (2 sqrt(x)), expressed through the computed output.
  Tensor<T> holder = Tensor<T>::create(a.shape(), vals);
  return Tensor<T>::make_result(a.shape(), std::move(vals), "sqrt", {a},
                                [holder](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{
                                      div(g, mul(holder, Tensor<T>::scalar(T(2))))};
                                });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> vals(a.size());
  const T* p = a.data();
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = std::exp(p[i]);
  detail::ensure_finite(vals, "exp");
  Tensor<T> holder = Tensor<T>::create(a.shape(), vals);
  return Tensor<T>::make_result(a.shape(), std::move(vals), "exp", {a},
                                [holder](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{mul(g, holder)};
                                });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (const T v : a.values()) {
    if (v <= T(0)) throw ValueError("log: non-positive operand");
  }
  const Tensor<T> av = a.detach();
  return detail::unary_op<T>(
      "log", a, [](T x) { return std::log(x); },
      [av](const Tensor<T>& g) { return std::vector<Tensor<T>>{div(g, av)}; });
}

template <typename T>
Tensor<T> elementwise(EwKind kind, const Tensor<T>& a, const Tensor<T>* b = nullptr) {
  const bool binary = kind == EwKind::add || kind == EwKind::sub || kind == EwKind::mul || kind == EwKind::div;
  if (binary && b == nullptr) throw ShapeError("elementwise: binary kind needs two operands");
  if (!binary && b != nullptr) throw ShapeError("elementwise: unary kind takes one operand");
  switch (kind) {
    case EwKind::add: return add(a, *b);
    case EwKind::sub: return sub(a, *b);
    case EwKind::mul: return mul(a, *b);
    case EwKind::div: return div(a, *b);
    case EwKind::relu: return relu(a);
    case EwKind::square: return square(a);
    case EwKind::sqrt: return sqrt(a);
    case EwKind::exp: return exp(a);
    case EwKind::log: return log(a);
  }
  throw Error("elementwise: unknown kind");
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const Shape orig = a.shape();
  return Tensor<T>::make_result(std::move(shape), std::vector<T>(a.values()), "reshape", {a},
                                [orig](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{reshape(g, orig)};
                                });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d: rank-2 tensor required");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> vals(m * n);
  const T* p = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) vals[j * m + i] = p[i * n + j];
  return Tensor<T>::make_result({n, m}, std::move(vals), "transpose2d", {a},
                                [](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{transpose2d(g)};
                                });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& t, const Shape& target) {
  Shape check;
  if (!broadcast_shapes(t.shape(), target, check) || check != target) {
    throw ShapeError("broadcast_to: cannot expand " + shape_str(t.shape()) + " to " + shape_str(target));
  }
  const std::size_t n = shape_size(target);
  std::vector<T> vals(n);
  const auto strides = detail::broadcast_strides(t.shape(), target);
  const std::size_t r = target.size();
  std::vector<std::size_t> idx(r, 0);
  const T* p = t.data();
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    vals[i] = p[off];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < target[d]) break;
      off -= strides[d] * target[d];
      idx[d] = 0;
    }
  }
  const Shape orig = t.shape();
  return Tensor<T>::make_result(target, std::move(vals), "broadcast_to", {t},
                                [orig](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{reduce_to_shape(g, orig)};
                                });
}

template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  const Shape& from = g.shape();
  const std::size_t r = from.size();
  Shape padded(r, 1);
  if (target.size() > r) throw ShapeError("reduce_to_shape: target rank exceeds source rank");
  std::copy(target.begin(), target.end(), padded.begin() + (r - target.size()));
  std::vector<std::size_t> out_strides(r, 0);
  {
    std::size_t stride = 1;
    for (std::size_t d = r; d-- > 0;) {
      out_strides[d] = padded[d] == 1 ? 0 : stride;
      stride *= padded[d];
    }
  }
  std::vector<T> acc(shape_size(padded), T(0));
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  const T* p = g.data();
  const std::size_t n = g.size();
  for (std::size_t i = 0; i < n; ++i) {
    acc[off] += p[i];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += out_strides[d];
      if (idx[d] < from[d]) break;
      off -= out_strides[d] * from[d];
      idx[d] = 0;
    }
  }
  Tensor<T> reduced = Tensor<T>::create(padded, std::move(acc));
  if (padded == target) return reduced;
  // The gradient path never needs lineage here; reshape keeps it if present.
  return reshape(reduced, target);
}

// ---------------------------------------------------------------------------
// Reductions.

namespace detail {

inline void validate_axes(const Axes& axes, std::size_t rank) {
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank) throw ShapeError("reduce: axis " + std::to_string(a) + " out of range");
    if (seen[a]) throw ShapeError("reduce: duplicate axis " + std::to_string(a));
    seen[a] = true;
  }
}

inline Shape reduced_shape(const Shape& in, const Axes& axes, bool keepdims) {
  std::vector<bool> red(in.size(), false);
  for (std::size_t a : axes) red[a] = true;
  Shape out;
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (red[d]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(in[d]);
    }
  }
  return out;
}

// Maps each input linear index to the linear index of its reduction group.
inline std::vector<std::size_t> group_strides(const Shape& in, const Axes& axes) {
  std::vector<bool> red(in.size(), false);
  for (std::size_t a : axes) red[a] = true;
  std::vector<std::size_t> strides(in.size(), 0);
  std::size_t stride = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    if (!red[d]) {
      strides[d] = stride;
      stride *= in[d];
    }
  }
  return strides;
}

}  // namespace detail

namespace detail {

// Walks the input in row-major order, invoking fn(input_index, group_index)
// where group_index addresses the reduction output.
template <typename Fn>
void for_each_group(const Shape& in, const std::vector<std::size_t>& gstr, Fn&& fn) {
  const std::size_t n = shape_size(in);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, off);
    for (std::size_t d = in.size(); d-- > 0;) {
      ++idx[d];
      off += gstr[d];
      if (idx[d] < in[d]) break;
      off -= gstr[d] * in[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& a, const Axes& axes, bool keepdims = false) {
  detail::validate_axes(axes, a.rank());
  const Shape in = a.shape();
  const Shape out_shape = detail::reduced_shape(in, axes, keepdims);
  const std::size_t out_n = shape_size(out_shape);
  const auto gstr = detail::group_strides(in, axes);
  const std::size_t n = a.size();
  const T* p = a.data();

  std::size_t group_count = 1;
  for (std::size_t ax : axes) group_count *= in[ax];

  std::vector<T> vals(out_n, T(0));
  std::vector<std::size_t> argmax;
  if (kind == ReduceKind::max) {
    argmax.assign(out_n, std::size_t(-1));
    detail::for_each_group(in, gstr, [&](std::size_t i, std::size_t g) {
      if (argmax[g] == std::size_t(-1) || p[i] > vals[g]) {  // first maximum wins ties
        vals[g] = p[i];
        argmax[g] = i;
      }
    });
  } else {
    detail::for_each_group(in, gstr, [&](std::size_t i, std::size_t g) { vals[g] += p[i]; });
    if (kind == ReduceKind::mean) {
      const T inv = T(1) / static_cast<T>(group_count);
      for (T& v : vals) v *= inv;
    }
  }

  const char* name = kind == ReduceKind::sum ? "sum" : kind == ReduceKind::mean ? "mean" : "max";
  auto bw = [in, gstr, kind, argmax, group_count, n](const Tensor<T>& g) {
    std::vector<T> gx(n, T(0));
    const T* pg = g.data();
    if (kind == ReduceKind::max) {
      for (std::size_t gi = 0; gi < argmax.size(); ++gi) gx[argmax[gi]] = pg[gi];
    } else {
      const T scale = kind == ReduceKind::mean ? T(1) / static_cast<T>(group_count) : T(1);
      detail::for_each_group(in, gstr, [&](std::size_t i, std::size_t grp) { gx[i] = pg[grp] * scale; });
    }
    return std::vector<Tensor<T>>{Tensor<T>::create(in, std::move(gx))};
  };
  return Tensor<T>::make_result(out_shape, std::move(vals), name, {a}, std::move(bw));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, const Axes& axes, bool keepdims = false) {
  return reduce(ReduceKind::sum, a, axes, keepdims);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& a, const Axes& axes, bool keepdims = false) {
  return reduce(ReduceKind::mean, a, axes, keepdims);
}
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& a, const Axes& axes, bool keepdims = false) {
  return reduce(ReduceKind::max, a, axes, keepdims);
}

/// Sum of every element, as a rank-0 tensor.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Axes axes(a.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return sum(a, axes);
}

// ---------------------------------------------------------------------------
// Matrix product.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: rank-2 tensors required");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::vector<T> vals(m * n);
  {
    Eigen::Map<const RowMat> A(a.data(), m, k);
    Eigen::Map<const RowMat> B(b.data(), k, n);
    Eigen::Map<RowMat> C(vals.data(), m, n);
    C.noalias() = A * B;
  }
  const Tensor<T> av = a.detach(), bv = b.detach();
  return Tensor<T>::make_result(
      {m, n}, std::move(vals), "matmul", {a, b},
      [av, bv, m, k, n](const Tensor<T>& g) {
        using RM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        std::vector<T> ga(m * k), gb(k * n);
        Eigen::Map<const RM> G(g.data(), m, n);
        Eigen::Map<const RM> A(av.data(), m, k);
        Eigen::Map<const RM> B(bv.data(), k, n);
        Eigen::Map<RM>(ga.data(), m, k).noalias() = G * B.transpose();
        Eigen::Map<RM>(gb.data(), k, n).noalias() = A.transpose() * G;
        return std::vector<Tensor<T>>{Tensor<T>::create({m, k}, std::move(ga)),
                                      Tensor<T>::create({k, n}, std::move(gb))};
      });
}

// ---------------------------------------------------------------------------
// Backward pass.

template <typename T>
class GradientMap {
 public:
  bool contains(const Tensor<T>& leaf) const { return map_.count(leaf.key()) != 0; }

  const Tensor<T>* find(const Tensor<T>& leaf) const {
    auto it = map_.find(leaf.key());
    return it == map_.end() ? nullptr : &it->second;
  }

  Tensor<T> at(const Tensor<T>& leaf) const {
    auto it = map_.find(leaf.key());
    if (it == map_.end()) throw GraphError("gradient map: no entry for tensor");
    return it->second;
  }

  std::size_t size() const { return map_.size(); }

  void accumulate(const void* key, const Tensor<T>& g) {
    auto it = map_.find(key);
    if (it == map_.end()) {
      map_.emplace(key, g);
    } else {
      it->second = add(it->second, g);
    }
  }

 private:
  std::unordered_map<const void*, Tensor<T>> map_;
};

/// Reverse-mode differentiation of a scalar loss. Gradients accumulate
/// additively across fan-out; leaves with requires_grad = false get no entry.
template <typename T>
GradientMap<T> backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must hold a single value");
  if (!loss.has_lineage()) throw GraphError("backward: loss has no recorded lineage");

  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  {
    std::unordered_set<NodeT*> seen;
    std::vector<NodeT*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      NodeT* cur = stack.back();
      stack.pop_back();
      order.push_back(cur);
      for (const auto& p : cur->parents) {
        if (p.has_lineage() && seen.insert(p.node().get()).second) stack.push_back(p.node().get());
      }
    }
  }
  std::sort(order.begin(), order.end(), [](NodeT* a, NodeT* b) { return a->seq > b->seq; });

  autograd::NoGradScope no_grad;
  std::unordered_map<NodeT*, Tensor<T>> node_grad;
  node_grad.emplace(loss.node().get(), Tensor<T>::full(loss.shape(), T(1)));

  GradientMap<T> leaves;
  for (NodeT* node : order) {
    Tensor<T> g;
    {
      auto it = node_grad.find(node);
      if (it == node_grad.end()) continue;  // not on a gradient path to the loss
      g = it->second;
      node_grad.erase(it);
    }
    std::vector<Tensor<T>> parent_grads = node->backward(g);
    if (parent_grads.size() != node->parents.size() && !parent_grads.empty()) {
      throw GraphError(std::string("backward: op '") + node->op + "' returned mismatched gradient count");
    }
    for (std::size_t i = 0; i < parent_grads.size(); ++i) {
      const Tensor<T>& parent = node->parents[i];
      Tensor<T>& pg = parent_grads[i];
      if (!parent.requires_grad() || !pg.defined()) continue;
      if (pg.shape() != parent.shape()) {
        throw GraphError(std::string("backward: op '") + node->op + "' produced gradient of wrong shape");
      }
      if (parent.has_lineage()) {
        auto pit = node_grad.find(parent.node().get());
        if (pit == node_grad.end()) {
          node_grad.emplace(parent.node().get(), pg);
        } else {
          pit->second = add(pit->second, pg);
        }
      } else {
        leaves.accumulate(parent.key(), pg);
      }
    }
  }
  return leaves;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.

/// Max over coordinates of the relative error between the analytic gradient of
/// f at x and a central finite difference. f must map a tensor to a scalar.
template <typename T, typename F>
double finite_diff_check(F&& f, const Tensor<T>& x, double eps) {
  if (eps <= 0) throw ValueError("finite_diff_check: eps must be positive");

  Tensor<T> probe = Tensor<T>::create(x.shape(), std::vector<T>(x.values()), true);
  Tensor<T> loss = f(probe);
  if (loss.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
  std::vector<T> analytic(x.size(), T(0));
  if (loss.has_lineage()) {
    GradientMap<T> gm = backward(loss);
    if (const Tensor<T>* g = gm.find(probe)) analytic = g->values();
  }

  autograd::NoGradScope no_grad;
  double max_rel = 0.0;
  std::vector<T> vals(x.values());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const T orig = vals[i];
    vals[i] = orig + static_cast<T>(eps);
    const double up = static_cast<double>(f(Tensor<T>::create(x.shape(), vals)).scalar_value());
    vals[i] = orig - static_cast<T>(eps);
    const double down = static_cast<double>(f(Tensor<T>::create(x.shape(), vals)).scalar_value());
    vals[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

}  // namespace frskd
