#include <Eigen/Core>
#include <cmath>
#include <string>

#include "mmdyn/ops.hpp"

namespace mmdyn::ops {
namespace {

template <typename T>
using Node = TensorNode<T>;
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const Mat<T>>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
ConstMapMat<T> view(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return ConstMapMat<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
ConstMapMat<T> view(std::span<const T> v, std::size_t rows, std::size_t cols) {
  return ConstMapMat<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MapMat<T> mut_view(std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return MapMat<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

std::string shapes_msg(std::string_view op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b);
}

// Geometry of a 2-D sliding window over [N, C, H, W] producing Ho x Wo positions.
struct Window {
  std::size_t n, c, h, w;
  std::size_t kh, kw;
  std::size_t sh, sw, ph, pw;
  std::size_t ho, wo;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return n * ho * wo; }
};

// cols[(c, a, b), (n, i, j)] = x[n, c, i*sh - ph + a, j*sw - pw + b] (zero outside).
template <typename T>
void im2col(const T* x, const Window& g, T* cols) {
  const std::size_t ncols = g.cols();
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t a = 0; a < g.kh; ++a) {
      for (std::size_t b = 0; b < g.kw; ++b) {
        T* row = cols + ((c * g.kh + a) * g.kw + b) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* src = x + (n * g.c + c) * g.h * g.w;
          T* dst = row + n * plane;
          for (std::size_t i = 0; i < g.ho; ++i) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * g.sh + a) -
                                     static_cast<std::ptrdiff_t>(g.ph);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill_n(dst + i * g.wo, g.wo, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(y) * g.w;
            for (std::size_t j = 0; j < g.wo; ++j) {
              const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * g.sw + b) -
                                        static_cast<std::ptrdiff_t>(g.pw);
              dst[i * g.wo + j] =
                  (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) ? T(0)
                                                                      : srow[static_cast<std::size_t>(xx)];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds cols back into x.
template <typename T>
void col2im(const T* cols, const Window& g, T* x) {
  const std::size_t ncols = g.cols();
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t a = 0; a < g.kh; ++a) {
      for (std::size_t b = 0; b < g.kw; ++b) {
        const T* row = cols + ((c * g.kh + a) * g.kw + b) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* dst = x + (n * g.c + c) * g.h * g.w;
          const T* src = row + n * plane;
          for (std::size_t i = 0; i < g.ho; ++i) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * g.sh + a) -
                                     static_cast<std::ptrdiff_t>(g.ph);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* drow = dst + static_cast<std::size_t>(y) * g.w;
            for (std::size_t j = 0; j < g.wo; ++j) {
              const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * g.sw + b) -
                                        static_cast<std::ptrdiff_t>(g.pw);
              if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) continue;
              drow[static_cast<std::size_t>(xx)] += src[i * g.wo + j];
            }
          }
        }
      }
    }
  }
}

// [N, C, P] <-> [C, N * P]
template <typename T>
void nchw_to_cn(const T* src, std::size_t n, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) std::copy_n(src + (i * c + k) * p, p, dst + (k * n + i) * p);
  }
}
template <typename T>
void cn_to_nchw(const T* src, std::size_t n, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) std::copy_n(src + (k * n + i) * p, p, dst + (i * c + k) * p);
  }
}

template <typename T>
void check_bias(std::string_view op, const OptionalTensor<T>& bias, std::size_t extent) {
  if (bias && (bias->rank() != 1 || bias->shape()[0] != extent)) {
    throw ShapeError(std::string(op) + ": bias shape " + shape_string(bias->shape()) +
                     " does not match output extent " + std::to_string(extent));
  }
}

}  // namespace

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const OptionalTensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError(shapes_msg("affine", x.shape(), w.shape()));
  }
  const std::size_t n = x.shape()[0];
  const std::size_t in = x.shape()[1];
  const std::size_t out = w.shape()[0];
  check_bias<T>("affine", bias, out);
  std::vector<T> y(n * out);
  auto Y = mut_view(y, n, out);
  Y.noalias() = view(x.values(), n, in) * view(w.values(), out, in).transpose();
  if (bias) {
    auto bv = bias->values();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < out; ++c) y[r * out + c] += bv[c];
    }
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return Tensor<T>::make_result("affine", {n, out}, std::move(y), std::move(inputs),
                                [n, in, out](Node<T>& self) {
                                  auto& xn = *self.inputs[0];
                                  auto& wn = *self.inputs[1];
                                  auto G = view(self.grad, n, out);
                                  if (xn.requires_grad) {
                                    mut_view(xn.grad, n, in).noalias() +=
                                        G * view(wn.value, out, in);
                                  }
                                  if (wn.requires_grad) {
                                    mut_view(wn.grad, out, in).noalias() +=
                                        G.transpose() * view(xn.value, n, in);
                                  }
                                  if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                                    auto& bg = self.inputs[2]->grad;
                                    for (std::size_t r = 0; r < n; ++r) {
                                      for (std::size_t c = 0; c < out; ++c) {
                                        bg[c] += self.grad[r * out + c];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError(shapes_msg("matmul", a.shape(), b.shape()));
  }
  const std::size_t n = a.shape()[0];
  const std::size_t m = a.shape()[1];
  const std::size_t p = b.shape()[1];
  std::vector<T> y(n * p);
  mut_view(y, n, p).noalias() = view(a.values(), n, m) * view(b.values(), m, p);
  return Tensor<T>::make_result("matmul", {n, p}, std::move(y), {a, b}, [n, m, p](Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    auto G = view(self.grad, n, p);
    if (an.requires_grad) {
      mut_view(an.grad, n, m).noalias() += G * view(bn.value, m, p).transpose();
    }
    if (bn.requires_grad) {
      mut_view(bn.grad, m, p).noalias() += view(an.value, n, m).transpose() * G;
    }
  });
}

template <typename T>
Tensor<T> batched_matvec(const Tensor<T>& a, const Tensor<T>& x) {
  if (a.rank() != 3 || x.rank() != 2 || a.shape()[0] != x.shape()[0] ||
      a.shape()[2] != x.shape()[1]) {
    throw ShapeError(shapes_msg("batched_matvec", a.shape(), x.shape()));
  }
  const std::size_t b = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t m = a.shape()[2];
  auto av = a.values();
  auto xv = x.values();
  std::vector<T> y(b * k, T(0));
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t r = 0; r < k; ++r) {
      T acc = T(0);
      for (std::size_t c = 0; c < m; ++c) acc += av[(s * k + r) * m + c] * xv[s * m + c];
      y[s * k + r] = acc;
    }
  }
  return Tensor<T>::make_result("batched_matvec", {b, k}, std::move(y), {a, x},
                                [b, k, m](Node<T>& self) {
                                  auto& an = *self.inputs[0];
                                  auto& xn = *self.inputs[1];
                                  for (std::size_t s = 0; s < b; ++s) {
                                    for (std::size_t r = 0; r < k; ++r) {
                                      const T g = self.grad[s * k + r];
                                      for (std::size_t c = 0; c < m; ++c) {
                                        if (an.requires_grad) {
                                          an.grad[(s * k + r) * m + c] += g * xn.value[s * m + c];
                                        }
                                        if (xn.requires_grad) {
                                          xn.grad[s * m + c] += g * an.value[(s * k + r) * m + c];
                                        }
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const OptionalTensor<T>& bias,
                 ConvGeometry geom) {
  if (x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError(shapes_msg("conv2d", x.shape(), w.shape()));
  }
  Window g{};
  g.n = x.shape()[0];
  g.c = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.kh = w.shape()[2];
  g.kw = w.shape()[3];
  g.sh = geom.stride_h;
  g.sw = geom.stride_w;
  g.ph = geom.pad_h;
  g.pw = geom.pad_w;
  if (g.sh == 0 || g.sw == 0 || g.h + 2 * g.ph < g.kh || g.w + 2 * g.pw < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_string(w.shape()) + " does not fit input " +
                     shape_string(x.shape()));
  }
  g.ho = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
  g.wo = (g.w + 2 * g.pw - g.kw) / g.sw + 1;
  const std::size_t out_c = w.shape()[0];
  check_bias<T>("conv2d", bias, out_c);
  const std::size_t plane = g.ho * g.wo;

  auto cols = std::make_shared<std::vector<T>>(g.rows() * g.cols());
  im2col(x.values().data(), g, cols->data());
  std::vector<T> y2(out_c * g.cols());
  mut_view(y2, out_c, g.cols()).noalias() =
      view(w.values(), out_c, g.rows()) * view(*cols, g.rows(), g.cols());
  std::vector<T> y(g.n * out_c * plane);
  cn_to_nchw(y2.data(), g.n, out_c, plane, y.data());
  if (bias) {
    auto bv = bias->values();
    for (std::size_t i = 0; i < g.n; ++i) {
      for (std::size_t o = 0; o < out_c; ++o) {
        T* dst = y.data() + (i * out_c + o) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] += bv[o];
      }
    }
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  if (!(x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad()))) cols.reset();
  return Tensor<T>::make_result(
      "conv2d", {g.n, out_c, g.ho, g.wo}, std::move(y), std::move(inputs),
      [g, out_c, plane, cols](Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        std::vector<T> g2(out_c * g.cols());
        nchw_to_cn(self.grad.data(), g.n, out_c, plane, g2.data());
        auto G = view(g2, out_c, g.cols());
        if (wn.requires_grad) {
          mut_view(wn.grad, out_c, g.rows()).noalias() +=
              G * view(*cols, g.rows(), g.cols()).transpose();
        }
        if (xn.requires_grad) {
          std::vector<T> dcols(g.rows() * g.cols());
          mut_view(dcols, g.rows(), g.cols()).noalias() =
              view(wn.value, out_c, g.rows()).transpose() * G;
          col2im(dcols.data(), g, xn.grad.data());
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& bg = self.inputs[2]->grad;
          for (std::size_t o = 0; o < out_c; ++o) {
            T acc = T(0);
            const T* row = g2.data() + o * g.cols();
            for (std::size_t p = 0; p < g.cols(); ++p) acc += row[p];
            bg[o] += acc;
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const OptionalTensor<T>& bias, ConvGeometry geom) {
  if (x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[0]) {
    throw ShapeError(shapes_msg("conv_transpose2d", x.shape(), w.shape()));
  }
  const std::size_t n = x.shape()[0];
  const std::size_t in_c = x.shape()[1];
  const std::size_t h = x.shape()[2];
  const std::size_t wd = x.shape()[3];
  const std::size_t out_c = w.shape()[1];
  const std::size_t kh = w.shape()[2];
  const std::size_t kw = w.shape()[3];
  if ((h - 1) * geom.stride_h + kh <= 2 * geom.pad_h ||
      (wd - 1) * geom.stride_w + kw <= 2 * geom.pad_w) {
    throw ShapeError("conv_transpose2d: padding too large for input " + shape_string(x.shape()));
  }
  const std::size_t ho = (h - 1) * geom.stride_h + kh - 2 * geom.pad_h;
  const std::size_t wo = (wd - 1) * geom.stride_w + kw - 2 * geom.pad_w;
  check_bias<T>("conv_transpose2d", bias, out_c);

  // The output-space window: a conv2d over [N, O, Ho, Wo] lands on H x W positions.
  Window g{n, out_c, ho, wo, kh, kw, geom.stride_h, geom.stride_w, geom.pad_h, geom.pad_w, h, wd};
  const std::size_t in_plane = h * wd;
  const std::size_t out_plane = ho * wo;

  std::vector<T> x2(in_c * g.cols());
  nchw_to_cn(x.values().data(), n, in_c, in_plane, x2.data());
  std::vector<T> cols(g.rows() * g.cols());
  mut_view(cols, g.rows(), g.cols()).noalias() =
      view(w.values(), in_c, g.rows()).transpose() * view(x2, in_c, g.cols());
  std::vector<T> y(n * out_c * out_plane, T(0));
  col2im(cols.data(), g, y.data());
  if (bias) {
    auto bv = bias->values();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < out_c; ++o) {
        T* dst = y.data() + (i * out_c + o) * out_plane;
        for (std::size_t p = 0; p < out_plane; ++p) dst[p] += bv[o];
      }
    }
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return Tensor<T>::make_result(
      "conv_transpose2d", {n, out_c, ho, wo}, std::move(y), std::move(inputs),
      [g, in_c, in_plane, out_plane](Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        std::vector<T> dcols(g.rows() * g.cols());
        im2col(self.grad.data(), g, dcols.data());
        auto DC = view(dcols, g.rows(), g.cols());
        if (wn.requires_grad) {
          std::vector<T> x2(in_c * g.cols());
          nchw_to_cn(xn.value.data(), g.n, in_c, in_plane, x2.data());
          mut_view(wn.grad, in_c, g.rows()).noalias() += view(x2, in_c, g.cols()) * DC.transpose();
        }
        if (xn.requires_grad) {
          std::vector<T> dx2(in_c * g.cols());
          mut_view(dx2, in_c, g.cols()).noalias() = view(wn.value, in_c, g.rows()) * DC;
          std::vector<T> dx(xn.grad.size());
          cn_to_nchw(dx2.data(), g.n, in_c, in_plane, dx.data());
          for (std::size_t i = 0; i < dx.size(); ++i) xn.grad[i] += dx[i];
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& bg = self.inputs[2]->grad;
          for (std::size_t i = 0; i < g.n; ++i) {
            for (std::size_t o = 0; o < g.c; ++o) {
              const T* src = self.grad.data() + (i * g.c + o) * out_plane;
              T acc = T(0);
              for (std::size_t p = 0; p < out_plane; ++p) acc += src[p];
              bg[o] += acc;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> weight_norm(const Tensor<T>& direction, const Tensor<T>& scale) {
  if (direction.rank() < 1 || scale.rank() != 1 || scale.shape()[0] != direction.shape()[0]) {
    throw ShapeError(shapes_msg("weight_norm", direction.shape(), scale.shape()));
  }
  const std::size_t rows = direction.shape()[0];
  const std::size_t cols = direction.numel() / rows;
  auto dv = direction.values();
  auto sv = scale.values();
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t c = 0; c < cols; ++c) acc += dv[r * cols + c] * dv[r * cols + c];
    if (!(acc > T(0))) {
      throw NumericError("weight_norm: direction row " + std::to_string(r) + " has zero norm");
    }
    norms[r] = std::sqrt(acc);
  }
  std::vector<T> out(dv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T f = sv[r] / norms[r];
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = f * dv[r * cols + c];
  }
  return Tensor<T>::make_result(
      "weight_norm", direction.shape(), std::move(out), {direction, scale},
      [rows, cols, norms](Node<T>& self) {
        auto& dn = *self.inputs[0];
        auto& sn = *self.inputs[1];
        for (std::size_t r = 0; r < rows; ++r) {
          const T* v = dn.value.data() + r * cols;
          const T* g = self.grad.data() + r * cols;
          T dot = T(0);
          for (std::size_t c = 0; c < cols; ++c) dot += g[c] * v[c];
          const T nrm = norms[r];
          if (sn.requires_grad) sn.grad[r] += dot / nrm;
          if (dn.requires_grad) {
            // d/dv [s v / |v|] = (s / |v|) (g - v (v.g) / |v|^2)
            const T s = sn.value[r];
            T* dst = dn.grad.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) {
              dst[c] += s / nrm * (g[c] - v[c] * dot / (nrm * nrm));
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& w_ih,
                   const Tensor<T>& w_hh, const Tensor<T>& b_ih, const Tensor<T>& b_hh) {
  if (h.rank() != 2 || w_hh.rank() != 2 || w_hh.shape()[0] != 3 * h.shape()[1]) {
    throw ShapeError(shapes_msg("gru_cell", h.shape(), w_hh.shape()));
  }
  const std::size_t hidden = h.shape()[1];
  auto gi = affine(x, w_ih, std::optional<Tensor<T>>(b_ih));
  auto gh = affine(h, w_hh, std::optional<Tensor<T>>(b_hh));
  auto gate = [&](const Tensor<T>& t, std::size_t k) { return slice(t, 1, k * hidden, (k + 1) * hidden); };
  auto r = sigmoid(add(gate(gi, 0), gate(gh, 0)));
  auto z = sigmoid(add(gate(gi, 1), gate(gh, 1)));
  auto n = tanh(add(gate(gi, 2), mul(r, gate(gh, 2))));
  // (1 - z) * n + z * h == n + z * (h - n)
  return add(n, mul(z, sub(h, n)));
}

#define MMDYN_INSTANTIATE(T)                                                                    \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const OptionalTensor<T>&); \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> batched_matvec(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const OptionalTensor<T>&, \
                            ConvGeometry);                                                       \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&,                       \
                                      const OptionalTensor<T>&, ConvGeometry);           \
  template Tensor<T> weight_norm(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> gru_cell(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                              const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

MMDYN_INSTANTIATE(float)
MMDYN_INSTANTIATE(double)
#undef MMDYN_INSTANTIATE

}  // namespace mmdyn::ops
