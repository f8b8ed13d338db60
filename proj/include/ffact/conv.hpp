#pragma once

// 2-D convolution and transposed convolution over column-batched images.
// An image batch is a (C*H*W) x B matrix, pixel index c*H*W + y*W + x.

#include "ffact/tape.hpp"

namespace ffact {

struct ConvGeometry {
  Eigen::Index in_channels = 1;
  Eigen::Index in_height = 1;
  Eigen::Index in_width = 1;
  Eigen::Index kernel = 4;
  Eigen::Index stride = 2;
  Eigen::Index pad = 1;

  Eigen::Index out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  Eigen::Index out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  Eigen::Index in_size() const { return in_channels * in_height * in_width; }
  Eigen::Index patch_size() const { return in_channels * kernel * kernel; }
};

namespace detail {

// cols is patch_size x (out_h*out_w*B); column b*out_h*out_w + oy*out_w + ox.
template <class Real>
Matrix<Real> im2col(const ConvGeometry& g, const Matrix<Real>& x) {
  const Eigen::Index oh = g.out_height(), ow = g.out_width(), batch = x.cols();
  const Eigen::Index k = g.kernel;
  Matrix<Real> cols = Matrix<Real>::Zero(g.patch_size(), oh * ow * batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Real* src = x.col(b).data();
    for (Eigen::Index oy = 0; oy < oh; ++oy)
      for (Eigen::Index ox = 0; ox < ow; ++ox) {
        Real* dst = cols.col(b * oh * ow + oy * ow + ox).data();
        for (Eigen::Index c = 0; c < g.in_channels; ++c)
          for (Eigen::Index ky = 0; ky < k; ++ky) {
            const Eigen::Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.in_height) continue;
            for (Eigen::Index kx = 0; kx < k; ++kx) {
              const Eigen::Index ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.in_width) continue;
              dst[(c * k + ky) * k + kx] = src[(c * g.in_height + iy) * g.in_width + ix];
            }
          }
      }
  }
  return cols;
}

// Adjoint of im2col: scatters patch columns back onto a (C*H*W) x B batch.
template <class Real>
Matrix<Real> col2im(const ConvGeometry& g, const Matrix<Real>& cols, Eigen::Index batch) {
  const Eigen::Index oh = g.out_height(), ow = g.out_width();
  const Eigen::Index k = g.kernel;
  Matrix<Real> x = Matrix<Real>::Zero(g.in_size(), batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    Real* dst = x.col(b).data();
    for (Eigen::Index oy = 0; oy < oh; ++oy)
      for (Eigen::Index ox = 0; ox < ow; ++ox) {
        const Real* src = cols.col(b * oh * ow + oy * ow + ox).data();
        for (Eigen::Index c = 0; c < g.in_channels; ++c)
          for (Eigen::Index ky = 0; ky < k; ++ky) {
            const Eigen::Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.in_height) continue;
            for (Eigen::Index kx = 0; kx < k; ++kx) {
              const Eigen::Index ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.in_width) continue;
              dst[(c * g.in_height + iy) * g.in_width + ix] += src[(c * k + ky) * k + kx];
            }
          }
      }
  }
  return x;
}

// channels x (pixels*B) <-> (channels*pixels) x B
template <class Real>
Matrix<Real> to_channel_major(const Matrix<Real>& y, Eigen::Index channels, Eigen::Index pixels) {
  const Eigen::Index batch = y.cols() / pixels;
  Matrix<Real> out(channels * pixels, batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index c = 0; c < channels; ++c)
      out.col(b).segment(c * pixels, pixels) = y.row(c).segment(b * pixels, pixels).transpose();
  return out;
}

template <class Real>
Matrix<Real> from_channel_major(const Matrix<Real>& x, Eigen::Index channels,
                                Eigen::Index pixels) {
  const Eigen::Index batch = x.cols();
  Matrix<Real> out(channels, pixels * batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index c = 0; c < channels; ++c)
      out.row(c).segment(b * pixels, pixels) = x.col(b).segment(c * pixels, pixels).transpose();
  return out;
}

}  // namespace detail

namespace ad {

/// Strided convolution. weight is C_out x (C_in*k*k), bias C_out x 1.
template <class Real>
Var<Real> conv2d(Var<Real> x, Var<Real> weight, Var<Real> bias, const ConvGeometry& g) {
  require(x.rows() == g.in_size(), "conv2d: input size does not match geometry");
  require(weight.cols() == g.patch_size() && bias.rows() == weight.rows() && bias.cols() == 1,
          "conv2d: weight/bias shape mismatch");
  const Eigen::Index batch = x.cols();
  const Eigen::Index pixels = g.out_height() * g.out_width();
  const Eigen::Index cout = weight.rows();
  Matrix<Real> cols = ffact::detail::im2col(g, x.value());
  Matrix<Real> y = weight.value() * cols;
  y.colwise() += bias.value().col(0);
  Matrix<Real> out = ffact::detail::to_channel_major(y, cout, pixels);
  return x.tape->push(
      std::move(out), detail::any_grad({x, weight, bias}),
      [x, weight, bias, g, batch, pixels, cout, cols = std::move(cols)](Tape<Real>& t,
                                                                       const Matrix<Real>& go) {
        const Matrix<Real> gy = ffact::detail::from_channel_major(go, cout, pixels);
        if (weight.requires_grad()) t.accumulate(weight, gy * cols.transpose());
        if (bias.requires_grad()) t.accumulate(bias, gy.rowwise().sum());
        if (x.requires_grad())
          t.accumulate(x, ffact::detail::col2im(g, Matrix<Real>(weight.value().transpose() * gy), batch));
      });
}

/// Transposed convolution: the adjoint of conv2d with geometry `g`, mapping
/// C_in x out_h x out_w images to C_out x in_h x in_w (g.in_channels = C_out).
/// weight is C_in x (C_out*k*k), bias C_out x 1.
template <class Real>
Var<Real> conv_transpose2d(Var<Real> x, Var<Real> weight, Var<Real> bias, const ConvGeometry& g) {
  const Eigen::Index pixels = g.out_height() * g.out_width();
  const Eigen::Index cin = weight.rows();
  require(x.rows() == cin * pixels, "conv_transpose2d: input size does not match geometry");
  require(weight.cols() == g.patch_size() && bias.rows() == g.in_channels && bias.cols() == 1,
          "conv_transpose2d: weight/bias shape mismatch");
  const Eigen::Index batch = x.cols();
  const Eigen::Index out_pixels = g.in_height * g.in_width;
  Matrix<Real> xr = ffact::detail::from_channel_major(x.value(), cin, pixels);
  Matrix<Real> out = ffact::detail::col2im(g, Matrix<Real>(weight.value().transpose() * xr), batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index c = 0; c < g.in_channels; ++c)
      out.col(b).segment(c * out_pixels, out_pixels).array() += bias.value()(c, 0);
  return x.tape->push(
      std::move(out), detail::any_grad({x, weight, bias}),
      [x, weight, bias, g, batch, pixels, cin, out_pixels, xr = std::move(xr)](
          Tape<Real>& t, const Matrix<Real>& go) {
        const Matrix<Real> gcols = ffact::detail::im2col(g, go);
        if (weight.requires_grad()) t.accumulate(weight, xr * gcols.transpose());
        if (bias.requires_grad()) {
          Matrix<Real> gb(g.in_channels, 1);
          for (Eigen::Index c = 0; c < g.in_channels; ++c)
            gb(c, 0) = go.middleRows(c * out_pixels, out_pixels).sum();
          t.accumulate(bias, gb);
        }
        if (x.requires_grad())
          t.accumulate(x, ffact::detail::to_channel_major(Matrix<Real>(weight.value() * gcols), cin, pixels));
      });
}

}  // namespace ad
}  // namespace ffact
