#pragma once

// Raw kernels shared by the forward pass, the gradient, and the relevance rules.
// Linear kernels take the weight array explicitly so rules can substitute
// clipped (w+, w-) or all-ones weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "lcrp/graph.hpp"
#include "lcrp/tensor.hpp"

namespace lcrp::ops {

struct ConvGeometry {
  int in_c, in_h, in_w;
  int out_c, out_h, out_w;
  int k, s, p;

  static ConvGeometry of(const Hyperparams& hp, const Shape& in) {
    ConvGeometry g{};
    g.in_c = in[0];
    g.in_h = in[1];
    g.in_w = in[2];
    g.out_c = hp.out_channels;
    g.k = hp.kernel;
    g.s = hp.stride;
    g.p = hp.padding;
    g.out_h = (g.in_h + 2 * g.p - g.k) / g.s + 1;
    g.out_w = (g.in_w + 2 * g.p - g.k) / g.s + 1;
    return g;
  }

  // Output index range [lo, hi) whose input coordinate o*s + kk - p lies in [0, n).
  int lo_of(int kk, int /*n*/) const {
    const int num = p - kk;
    if (num <= 0) return 0;
    return (num + s - 1) / s;
  }
  int hi_of(int kk, int n, int out_n) const {
    const int num = n - 1 + p - kk;
    if (num < 0) return 0;
    return std::min(out_n, num / s + 1);
  }
};

inline Tensor conv2d(const Tensor& x, std::span<const float> kernel, std::span<const float> bias,
                     const ConvGeometry& g) {
  Tensor y(Shape{g.out_c, g.out_h, g.out_w});
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int oc = 0; oc < g.out_c; ++oc) {
    float* out = y.data() + oc * out_plane;
    if (!bias.empty()) std::fill(out, out + out_plane, bias[static_cast<std::size_t>(oc)]);
    for (int ic = 0; ic < g.in_c; ++ic) {
      const float* in = x.data() + ic * in_plane;
      const float* wk = kernel.data() + (static_cast<std::size_t>(oc) * g.in_c + ic) * g.k * g.k;
      for (int ky = 0; ky < g.k; ++ky) {
        const int oy0 = g.lo_of(ky, g.in_h), oy1 = g.hi_of(ky, g.in_h, g.out_h);
        for (int kx = 0; kx < g.k; ++kx) {
          const float w = wk[ky * g.k + kx];
          if (w == 0.0f) continue;
          const int ox0 = g.lo_of(kx, g.in_w), ox1 = g.hi_of(kx, g.in_w, g.out_w);
          for (int oy = oy0; oy < oy1; ++oy) {
            const float* irow = in + static_cast<std::size_t>(oy * g.s + ky - g.p) * g.in_w;
            float* orow = out + static_cast<std::size_t>(oy) * g.out_w;
            if (g.s == 1) {
              const float* src = irow + (kx - g.p);
              for (int ox = ox0; ox < ox1; ++ox) orow[ox] += w * src[ox];
            } else {
              for (int ox = ox0; ox < ox1; ++ox) orow[ox] += w * irow[ox * g.s + kx - g.p];
            }
          }
        }
      }
    }
  }
  return y;
}

// Transposed convolution: dx[i] = sum_j w_ij * dy[j].
inline Tensor conv2d_transpose(const Tensor& dy, std::span<const float> kernel, const ConvGeometry& g) {
  Tensor dx(Shape{g.in_c, g.in_h, g.in_w});
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int oc = 0; oc < g.out_c; ++oc) {
    const float* out = dy.data() + oc * out_plane;
    for (int ic = 0; ic < g.in_c; ++ic) {
      float* in = dx.data() + ic * in_plane;
      const float* wk = kernel.data() + (static_cast<std::size_t>(oc) * g.in_c + ic) * g.k * g.k;
      for (int ky = 0; ky < g.k; ++ky) {
        const int oy0 = g.lo_of(ky, g.in_h), oy1 = g.hi_of(ky, g.in_h, g.out_h);
        for (int kx = 0; kx < g.k; ++kx) {
          const float w = wk[ky * g.k + kx];
          if (w == 0.0f) continue;
          const int ox0 = g.lo_of(kx, g.in_w), ox1 = g.hi_of(kx, g.in_w, g.out_w);
          for (int oy = oy0; oy < oy1; ++oy) {
            float* irow = in + static_cast<std::size_t>(oy * g.s + ky - g.p) * g.in_w;
            const float* orow = out + static_cast<std::size_t>(oy) * g.out_w;
            if (g.s == 1) {
              float* dst = irow + (kx - g.p);
              for (int ox = ox0; ox < ox1; ++ox) dst[ox] += w * orow[ox];
            } else {
              for (int ox = ox0; ox < ox1; ++ox) irow[ox * g.s + kx - g.p] += w * orow[ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

// Accumulates dL/dW and dL/db into the given spans.
inline void conv2d_param_grad(const Tensor& x, const Tensor& dy, const ConvGeometry& g,
                              std::span<float> dkernel, std::span<float> dbias) {
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int oc = 0; oc < g.out_c; ++oc) {
    const float* out = dy.data() + oc * out_plane;
    if (!dbias.empty()) {
      float s = 0.0f;
      for (std::size_t i = 0; i < out_plane; ++i) s += out[i];
      dbias[static_cast<std::size_t>(oc)] += s;
    }
    for (int ic = 0; ic < g.in_c; ++ic) {
      const float* in = x.data() + ic * in_plane;
      float* dw = dkernel.data() + (static_cast<std::size_t>(oc) * g.in_c + ic) * g.k * g.k;
      for (int ky = 0; ky < g.k; ++ky) {
        const int oy0 = g.lo_of(ky, g.in_h), oy1 = g.hi_of(ky, g.in_h, g.out_h);
        for (int kx = 0; kx < g.k; ++kx) {
          const int ox0 = g.lo_of(kx, g.in_w), ox1 = g.hi_of(kx, g.in_w, g.out_w);
          float acc = 0.0f;
          for (int oy = oy0; oy < oy1; ++oy) {
            const float* irow = in + static_cast<std::size_t>(oy * g.s + ky - g.p) * g.in_w;
            const float* orow = out + static_cast<std::size_t>(oy) * g.out_w;
            if (g.s == 1) {
              const float* src = irow + (kx - g.p);
              for (int ox = ox0; ox < ox1; ++ox) acc += orow[ox] * src[ox];
            } else {
              for (int ox = ox0; ox < ox1; ++ox) acc += orow[ox] * irow[ox * g.s + kx - g.p];
            }
          }
          dw[ky * g.k + kx] += acc;
        }
      }
    }
  }
}

inline Tensor dense(const Tensor& x, std::span<const float> kernel, std::span<const float> bias, int out) {
  const std::size_t in = x.size();
  Tensor y(Shape{out});
  for (int o = 0; o < out; ++o) {
    const float* w = kernel.data() + static_cast<std::size_t>(o) * in;
    float acc = bias.empty() ? 0.0f : bias[static_cast<std::size_t>(o)];
    for (std::size_t i = 0; i < in; ++i) acc += w[i] * x[i];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

inline Tensor dense_transpose(const Tensor& dy, std::span<const float> kernel, const Shape& in_shape) {
  Tensor dx(in_shape);
  const std::size_t in = dx.size();
  for (std::size_t o = 0; o < dy.size(); ++o) {
    const float g = dy[o];
    if (g == 0.0f) continue;
    const float* w = kernel.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) dx[i] += w[i] * g;
  }
  return dx;
}

inline void dense_param_grad(const Tensor& x, const Tensor& dy, std::span<float> dkernel, std::span<float> dbias) {
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < dy.size(); ++o) {
    const float g = dy[o];
    if (!dbias.empty()) dbias[o] += g;
    float* dw = dkernel.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) dw[i] += g * x[i];
  }
}

// Per-channel affine map of inference-mode batchnorm: y = scale*x + shift.
struct BatchNormAffine {
  std::vector<float> scale, shift;
};

inline BatchNormAffine batchnorm_affine(std::span<const float> gamma, std::span<const float> beta,
                                        std::span<const float> mean, std::span<const float> var, float eps) {
  BatchNormAffine a;
  a.scale.resize(gamma.size());
  a.shift.resize(gamma.size());
  for (std::size_t c = 0; c < gamma.size(); ++c) {
    const float inv = 1.0f / std::sqrt(var[c] + eps);
    a.scale[c] = gamma[c] * inv;
    a.shift[c] = beta[c] - mean[c] * gamma[c] * inv;
  }
  return a;
}

inline Tensor channel_affine(const Tensor& x, std::span<const float> scale, std::span<const float> shift) {
  Tensor y(x.shape());
  for (int c = 0; c < x.shape().channels(); ++c) {
    auto in = x.channel(c);
    auto out = y.channel(c);
    const float a = scale[static_cast<std::size_t>(c)];
    const float b = shift.empty() ? 0.0f : shift[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = a * in[i] + b;
  }
  return y;
}

inline Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return y;
}

// Flat input index of the window maximum for every output position;
// ties resolve to the first position in row-major window order.
inline std::vector<std::size_t> maxpool_argmax(const Tensor& x, int k, int s) {
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const int OH = (H - k) / s + 1, OW = (W - k) / s + 1;
  std::vector<std::size_t> idx(static_cast<std::size_t>(C) * OH * OW);
  std::size_t o = 0;
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        std::size_t best = (static_cast<std::size_t>(c) * H + oy * s) * W + ox * s;
        float bv = x[best];
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const std::size_t i = (static_cast<std::size_t>(c) * H + oy * s + ky) * W + ox * s + kx;
            if (x[i] > bv) {
              bv = x[i];
              best = i;
            }
          }
        idx[o++] = best;
      }
  return idx;
}

inline Tensor maxpool(const Tensor& x, int k, int s) {
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  Tensor y(Shape{C, (H - k) / s + 1, (W - k) / s + 1});
  const auto idx = maxpool_argmax(x, k, s);
  for (std::size_t o = 0; o < idx.size(); ++o) y[o] = x[idx[o]];
  return y;
}

// Routes each output value to its window argmax.
inline Tensor maxpool_route(const Tensor& x, const Tensor& dy, int k, int s) {
  Tensor dx(x.shape());
  const auto idx = maxpool_argmax(x, k, s);
  for (std::size_t o = 0; o < idx.size(); ++o) dx[idx[o]] += dy[o];
  return dx;
}

inline Tensor avgpool(const Tensor& x, int k, int s) {
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const int OH = (H - k) / s + 1, OW = (W - k) / s + 1;
  Tensor y(Shape{C, OH, OW});
  const float inv = 1.0f / static_cast<float>(k * k);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        float acc = 0.0f;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) acc += x.at(c, oy * s + ky, ox * s + kx);
        y.at(c, oy, ox) = acc * inv;
      }
  return y;
}

// Spreads each output value uniformly over its window (gradient of avgpool
// when scaled by 1/k^2, uniform relevance split when not).
inline Tensor avgpool_spread(const Shape& in, const Tensor& dy, int k, int s, float scale) {
  Tensor dx(in);
  const int C = in[0];
  const int OH = dy.shape()[1], OW = dy.shape()[2];
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        const float v = dy.at(c, oy, ox) * scale;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) dx.at(c, oy * s + ky, ox * s + kx) += v;
      }
  return dx;
}

inline Tensor global_avgpool(const Tensor& x) {
  Tensor y(Shape{x.shape()[0]});
  const float inv = 1.0f / static_cast<float>(x.shape().spatial());
  for (int c = 0; c < x.shape()[0]; ++c) {
    float acc = 0.0f;
    for (float v : x.channel(c)) acc += v;
    y[static_cast<std::size_t>(c)] = acc * inv;
  }
  return y;
}

inline Tensor global_spread(const Shape& in, const Tensor& dy, float scale) {
  Tensor dx(in);
  for (int c = 0; c < in[0]; ++c) {
    const float v = dy[static_cast<std::size_t>(c)] * scale;
    for (float& d : dx.channel(c)) d = v;
  }
  return dx;
}

inline Tensor upsample_nearest(const Tensor& x, int f) {
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  Tensor y(Shape{C, H * f, W * f});
  for (int c = 0; c < C; ++c)
    for (int yy = 0; yy < H * f; ++yy)
      for (int xx = 0; xx < W * f; ++xx) y.at(c, yy, xx) = x.at(c, yy / f, xx / f);
  return y;
}

// Sums each block of replicated outputs back onto its source pixel.
inline Tensor upsample_collect(const Shape& in, const Tensor& dy, int f) {
  Tensor dx(in);
  const int C = in[0], H = in[1], W = in[2];
  for (int c = 0; c < C; ++c)
    for (int yy = 0; yy < H * f; ++yy)
      for (int xx = 0; xx < W * f; ++xx) dx.at(c, yy / f, xx / f) += dy.at(c, yy, xx);
  return dx;
}

inline Tensor concat(const std::vector<const Tensor*>& xs) {
  int c = 0;
  for (auto* t : xs) c += t->shape()[0];
  Tensor y(Shape{c, xs[0]->shape()[1], xs[0]->shape()[2]});
  std::size_t off = 0;
  for (auto* t : xs) {
    std::copy(t->vec().begin(), t->vec().end(), y.data() + off);
    off += t->size();
  }
  return y;
}

inline std::vector<Tensor> concat_split(const Tensor& dy, const std::vector<Shape>& parts) {
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (const auto& s : parts) {
    Tensor t(s);
    std::copy(dy.data() + off, dy.data() + off + t.size(), t.data());
    off += t.size();
    out.push_back(std::move(t));
  }
  return out;
}

inline Tensor flatten(const Tensor& x, bool cells) {
  if (!cells) return x.reshaped(Shape{static_cast<int>(x.size())});
  const int C = x.shape()[0];
  const int HW = static_cast<int>(x.shape().spatial());
  Tensor y(Shape{HW, C});
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < HW; ++p) y[static_cast<std::size_t>(p) * C + c] = x[static_cast<std::size_t>(c) * HW + p];
  return y;
}

inline Tensor unflatten(const Shape& in, const Tensor& dy, bool cells) {
  if (!cells) return dy.reshaped(in);
  const int C = in[0];
  const int HW = static_cast<int>(in.spatial());
  Tensor dx(in);
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < HW; ++p) dx[static_cast<std::size_t>(c) * HW + p] = dy[static_cast<std::size_t>(p) * C + c];
  return dx;
}

}  // namespace lcrp::ops
