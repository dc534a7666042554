#pragma once

#include <algorithm>
#include <span>

#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"

// Forward/backward kernels for the plain layers the backbones are built from.
// Backward functions accumulate (+=) into parameter gradients and return the
// gradient with respect to the layer input.

namespace seammil::nn {

// Unfold a k x k, stride 1, zero "same" padded neighbourhood into columns:
// row (ci*k*k + ky*k + kx), column (y*W + x).
template <typename T>
Matrix<T> im2col(const Grid<T>& x, int k) {
  const int pad = k / 2;
  const int h = x.height();
  const int w = x.width();
  Matrix<T> col(static_cast<Eigen::Index>(x.channels()) * k * k, static_cast<Eigen::Index>(h) * w);
  for (int c = 0; c < x.channels(); ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.row((c * k + ky) * k + kx).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          T* dst = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            dst[xx] = (sx < 0 || sx >= w) ? T(0) : x(c, sy, sx);
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
Grid<T> col2im(const Matrix<T>& col, int channels, int h, int w, int k) {
  const int pad = k / 2;
  Grid<T> x(channels, h, w);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col.row((c * k + ky) * k + kx).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const T* src = row + static_cast<std::size_t>(y) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx >= 0 && sx < w) x(c, sy, sx) += src[xx];
          }
        }
      }
    }
  }
  return x;
}

// Same-padded k x k convolution with bias. Weights are [out][in][k][k].
template <typename T>
Grid<T> conv2d(const Grid<T>& x, std::span<const T> weight, std::span<const T> bias, int out_channels,
               int k, Matrix<T>& col_cache) {
  const auto fan_in = static_cast<Eigen::Index>(x.channels()) * k * k;
  if (static_cast<Eigen::Index>(weight.size()) != out_channels * fan_in) {
    throw DimensionError("conv2d: weight size does not match input channels of " + x.shape());
  }
  col_cache = im2col(x, k);
  ConstMatrixMap<T> wm(weight.data(), out_channels, fan_in);
  Grid<T> y(out_channels, x.height(), x.width());
  y.matrix().noalias() = wm * col_cache;
  if (!bias.empty()) {
    for (int o = 0; o < out_channels; ++o) {
      for (auto& v : y.channel(o)) v += bias[o];
    }
  }
  return y;
}

template <typename T>
Grid<T> conv2d_backward(const Matrix<T>& col_cache, int in_channels, int h, int w, std::span<const T> weight,
                        int k, const Grid<T>& dy, std::span<T> dweight, std::span<T> dbias) {
  const auto fan_in = static_cast<Eigen::Index>(in_channels) * k * k;
  const int out_channels = dy.channels();
  ConstMatrixMap<T> wm(weight.data(), out_channels, fan_in);
  MatrixMap<T> dwm(dweight.data(), out_channels, fan_in);
  const auto dym = dy.matrix();
  dwm.noalias() += dym * col_cache.transpose();
  if (!dbias.empty()) {
    for (int o = 0; o < out_channels; ++o) dbias[o] += dym.row(o).sum();
  }
  Matrix<T> dcol = wm.transpose() * dym;
  return col2im(dcol, in_channels, h, w, k);
}

// 1x1 convolution without bias: out = W x, W is [out x in].
template <typename T>
Grid<T> project(const Grid<T>& x, std::span<const T> weight, int out_channels, const char* what) {
  if (static_cast<int>(weight.size()) != out_channels * x.channels()) {
    throw DimensionError(std::string(what) + ": weights [" + std::to_string(weight.size()) +
                         "] incompatible with " + std::to_string(x.channels()) + " input channels");
  }
  ConstMatrixMap<T> wm(weight.data(), out_channels, x.channels());
  Grid<T> y(out_channels, x.height(), x.width());
  y.matrix().noalias() = wm * x.matrix();
  return y;
}

template <typename T>
Grid<T> project_backward(const Grid<T>& x, std::span<const T> weight, const Grid<T>& dy, std::span<T> dweight) {
  const int out_channels = dy.channels();
  ConstMatrixMap<T> wm(weight.data(), out_channels, x.channels());
  if (!dweight.empty()) {
    MatrixMap<T> dwm(dweight.data(), out_channels, x.channels());
    dwm.noalias() += dy.matrix() * x.matrix().transpose();
  }
  Grid<T> dx(x.channels(), x.height(), x.width());
  dx.matrix().noalias() = wm.transpose() * dy.matrix();
  return dx;
}

template <typename T>
Grid<T> relu(Grid<T> x) {
  for (auto& v : x.values()) v = std::max(v, T(0));
  return x;
}

// Gradient through ReLU given the forward output (zero where clamped).
template <typename T>
Grid<T> relu_backward(const Grid<T>& out, Grid<T> dy) {
  for (std::size_t i = 0; i < dy.size(); ++i) {
    if (!(out[i] > T(0))) dy[i] = T(0);
  }
  return dy;
}

// 2x2 average pooling, stride 2, floor on odd sizes.
template <typename T>
Grid<T> avg_pool2(const Grid<T>& x) {
  const int oh = x.height() / 2;
  const int ow = x.width() / 2;
  if (oh < 1 || ow < 1) throw DimensionError("avg_pool2: input " + x.shape() + " too small");
  Grid<T> y(x.channels(), oh, ow);
  for (int c = 0; c < x.channels(); ++c) {
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        y(c, yy, xx) = T(0.25) * (x(c, 2 * yy, 2 * xx) + x(c, 2 * yy, 2 * xx + 1) + x(c, 2 * yy + 1, 2 * xx) +
                                  x(c, 2 * yy + 1, 2 * xx + 1));
      }
    }
  }
  return y;
}

template <typename T>
Grid<T> avg_pool2_backward(int in_h, int in_w, const Grid<T>& dy) {
  Grid<T> dx(dy.channels(), in_h, in_w);
  for (int c = 0; c < dy.channels(); ++c) {
    for (int yy = 0; yy < dy.height(); ++yy) {
      for (int xx = 0; xx < dy.width(); ++xx) {
        const T g = T(0.25) * dy(c, yy, xx);
        dx(c, 2 * yy, 2 * xx) += g;
        dx(c, 2 * yy, 2 * xx + 1) += g;
        dx(c, 2 * yy + 1, 2 * xx) += g;
        dx(c, 2 * yy + 1, 2 * xx + 1) += g;
      }
    }
  }
  return dx;
}

}  // namespace seammil::nn
