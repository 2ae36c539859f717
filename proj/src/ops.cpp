#include "mmdyn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mmdyn::ops {
namespace {

template <typename T>
using Node = TensorNode<T>;

template <typename T>
void require_same_shape(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// f computes y from x; dydx computes dy/dx from (x, y).
template <typename T, typename F, typename D>
Tensor<T> unary(std::string_view name, const Tensor<T>& a, F f, D dydx) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return Tensor<T>::make_result(name, a.shape(), std::move(out), {a}, [dydx](Node<T>& self) {
    auto& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      in.grad[i] += self.grad[i] * dydx(in.value[i], self.value[i]);
    }
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary("neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary("sigmoid", a, stable_sigmoid<T>, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary(
      "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary("softplus", a, stable_softplus<T>, [](T x, T) { return stable_sigmoid(x); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& a) {
  return unary(
      "reciprocal", a, [](T x) { return T(1) / x; }, [](T, T y) { return -y * y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(
      "scale", a, [factor](T x) { return factor * x; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary(
      "add_scalar", a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  return unary(
      "clamp_min", a, [floor](T x) { return std::max(x, floor); },
      [floor](T x, T) { return x > floor ? T(1) : T(0); });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::make_result("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor<T>::make_result("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
    }
    if (y.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) y.grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::make_result("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) y.grad[i] += self.grad[i] * x.value[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("div", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return Tensor<T>::make_result("div", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] / y.value[i];
    }
    if (y.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        y.grad[i] -= self.grad[i] * self.value[i] / y.value[i];
      }
    }
  });
}

template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) throw ShapeError("add_n: no terms");
  for (const auto& t : terms) require_same_shape("add_n", terms.front(), t);
  // Terms are summed in sorted order per element so the result does not
  // depend on argument order.
  std::vector<T> out(terms.front().numel(), T(0));
  std::vector<T> column(terms.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < terms.size(); ++k) column[k] = terms[k].values()[i];
    std::sort(column.begin(), column.end());
    T acc = T(0);
    for (T v : column) acc += v;
    out[i] = acc;
  }
  return Tensor<T>::make_result("add_n", terms.front().shape(), std::move(out), terms,
                                [](Node<T>& self) {
                                  for (auto& in : self.inputs) {
                                    if (!in->requires_grad) continue;
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      in->grad[i] += self.grad[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.values()) total += v;
  return Tensor<T>::make_result("sum", {}, {total}, {a}, [](Node<T>& self) {
    auto& in = *self.inputs[0];
    const T g = self.grad[0];
    for (auto& v : in.grad) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T n = static_cast<T>(a.numel());
  T total = T(0);
  for (T v : a.values()) total += v;
  return Tensor<T>::make_result("mean", {}, {total / n}, {a}, [n](Node<T>& self) {
    auto& in = *self.inputs[0];
    const T g = self.grad[0] / n;
    for (auto& v : in.grad) v += g;
  });
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto av = a.values();
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      const T* src = av.data() + (o * s.extent + e) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return Tensor<T>::make_result("sum_axis", std::move(out_shape), std::move(out), {a},
                                [s](Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t o = 0; o < s.outer; ++o) {
                                    for (std::size_t e = 0; e < s.extent; ++e) {
                                      T* dst = in.grad.data() + (o * s.extent + e) * s.inner;
                                      const T* g = self.grad.data() + o * s.inner;
                                      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return Tensor<T>::make_result("reshape", std::move(shape), std::move(out), {a},
                                [](Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    in.grad[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(ref));
  }
  Shape out_shape = ref;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) {
      throw ShapeError("concat: rank mismatch " + shape_string(ref) + " vs " +
                       shape_string(p.shape()));
    }
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.shape()[d] != ref[d]) {
        throw ShapeError("concat: shape mismatch " + shape_string(ref) + " vs " +
                         shape_string(p.shape()) + " off axis " + std::to_string(axis));
      }
    }
    extents.push_back(p.shape()[axis]);
    out_shape[axis] += p.shape()[axis];
  }
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    const std::size_t block = extents[k] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.data() + o * block, block, out.data() + (o * s.extent + offset) * s.inner);
    }
    offset += extents[k];
  }
  return Tensor<T>::make_result(
      "concat", std::move(out_shape), std::move(out), parts, [s, extents](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          auto& in = *self.inputs[k];
          const std::size_t block = extents[k] * s.inner;
          if (in.requires_grad) {
            for (std::size_t o = 0; o < s.outer; ++o) {
              const T* g = self.grad.data() + (o * s.extent + off) * s.inner;
              T* dst = in.grad.data() + o * block;
              for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
            }
          }
          off += extents[k];
        }
      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for shape " +
                     shape_string(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t block = (end - begin) * s.inner;
  auto av = a.values();
  std::vector<T> out(s.outer * block);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av.data() + (o * s.extent + begin) * s.inner, block, out.data() + o * block);
  }
  return Tensor<T>::make_result("slice", std::move(out_shape), std::move(out), {a},
                                [s, begin, block](Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t o = 0; o < s.outer; ++o) {
                                    T* dst = in.grad.data() + (o * s.extent + begin) * s.inner;
                                    const T* g = self.grad.data() + o * block;
                                    for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
                                  }
                                });
}

template <typename T>
Tensor<T> transpose01(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose01: needs rank >= 2, got " + shape_string(a.shape()));
  const std::size_t rows = a.shape()[0];
  const std::size_t cols = a.shape()[1];
  const std::size_t inner = a.numel() / (rows * cols);
  Shape out_shape = a.shape();
  std::swap(out_shape[0], out_shape[1]);
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::copy_n(av.data() + (r * cols + c) * inner, inner, out.data() + (c * rows + r) * inner);
    }
  }
  return Tensor<T>::make_result("transpose01", std::move(out_shape), std::move(out), {a},
                                [rows, cols, inner](Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    for (std::size_t c = 0; c < cols; ++c) {
                                      T* dst = in.grad.data() + (r * cols + c) * inner;
                                      const T* g = self.grad.data() + (c * rows + r) * inner;
                                      for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i];
                                    }
                                  }
                                });
}

#define MMDYN_INSTANTIATE(T)                                                                   \
  template Tensor<T> neg(const Tensor<T>&);                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> tanh(const Tensor<T>&);                                                   \
  template Tensor<T> softplus(const Tensor<T>&);                                               \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> sqrt(const Tensor<T>&);                                                   \
  template Tensor<T> square(const Tensor<T>&);                                                 \
  template Tensor<T> reciprocal(const Tensor<T>&);                                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> clamp_min(const Tensor<T>&, T);                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_n(const std::vector<Tensor<T>>&);                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> sum_axis(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                       \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> transpose01(const Tensor<T>&);

MMDYN_INSTANTIATE(float)
MMDYN_INSTANTIATE(double)
#undef MMDYN_INSTANTIATE

}  // namespace mmdyn::ops
