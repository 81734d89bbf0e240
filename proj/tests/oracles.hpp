#pragma once

// Test-only reference implementations. These are deliberately written as
// direct loops over the definitions and share no code with the library's
// im2col / grouped paths.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cakes/ops.hpp"
#include "cakes/tensor.hpp"

namespace oracle {

using cakes::Shape;
using cakes::Tensor;

// Zero-padded "same" cross-correlation evaluated one output voxel at a time.
inline Tensor naive_conv3d(const Tensor& x, const Tensor& w, cakes::Triple stride = {1, 1, 1}) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const long N = xs[0], Ci = xs[1], D = xs[2], H = xs[3], W = xs[4];
  const long Co = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
  const long pd = (kd - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  const long sd = stride.d, sh = stride.h, sw = stride.w;
  const long Od = (D + 2 * pd - kd) / sd + 1, Oh = (H + 2 * ph - kh) / sh + 1, Ow = (W + 2 * pw - kw) / sw + 1;
  std::vector<double> out(N * Co * Od * Oh * Ow, 0.0);
  auto X = [&](long n, long c, long d, long h, long ww) {
    if (d < 0 || d >= D || h < 0 || h >= H || ww < 0 || ww >= W) return 0.0;
    return x[(((n * Ci + c) * D + d) * H + h) * W + ww];
  };
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < Co; ++o)
      for (long od = 0; od < Od; ++od)
        for (long oh = 0; oh < Oh; ++oh)
          for (long ow = 0; ow < Ow; ++ow) {
            double acc = 0.0;
            for (long c = 0; c < Ci; ++c)
              for (long i = 0; i < kd; ++i)
                for (long j = 0; j < kh; ++j)
                  for (long k = 0; k < kw; ++k)
                    acc += w[(((o * Ci + c) * kd + i) * kh + j) * kw + k] *
                           X(n, c, od * sd - pd + i, oh * sh - ph + j, ow * sw - pw + k);
            out[(((n * Co + o) * Od + od) * Oh + oh) * Ow + ow] = acc;
          }
  return Tensor(Shape{static_cast<std::size_t>(N), static_cast<std::size_t>(Co),
                      static_cast<std::size_t>(Od), static_cast<std::size_t>(Oh),
                      static_cast<std::size_t>(Ow)},
                out);
}

// max_i |a_i - b_i| / max(max_i |b_i|, tiny): relative to the reference scale.
inline double max_relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / std::max(den, 1e-300);
}

// Half-period of a +-1 square wave along one axis of a [D, H, W] field: the
// smallest lag L at which every overlapping pair x, x+L has opposite sign.
// 0 when the field is constant along the axis, -1 when no lag qualifies.
inline long half_period(const std::vector<double>& f, const cakes::Triple& dims, int axis) {
  const long n[3] = {static_cast<long>(dims.d), static_cast<long>(dims.h), static_cast<long>(dims.w)};
  auto at = [&](long d, long h, long w) { return f[(d * n[1] + h) * n[2] + w]; };
  auto correlation = [&](long lag) {
    double acc = 0.0;
    long count = 0;
    for (long d = 0; d < n[0]; ++d)
      for (long h = 0; h < n[1]; ++h)
        for (long w = 0; w < n[2]; ++w) {
          long q[3] = {d, h, w};
          q[axis] += lag;
          if (q[axis] >= n[axis]) continue;
          acc += at(d, h, w) * at(q[0], q[1], q[2]);
          ++count;
        }
    return acc / static_cast<double>(count);
  };
  if (correlation(1) > 1.0 - 1e-12) return 0;
  for (long lag = 1; lag < n[axis]; ++lag)
    if (correlation(lag) < -1.0 + 1e-12) return lag;
  return -1;
}

// Class decoder for noiseless planted and isotropic patterns, reading only
// the autocorrelation structure of the field. -1 when nothing matches.
inline int decode_pattern(const std::string& kind, const std::vector<double>& f, const cakes::Triple& dims) {
  const long L[3] = {half_period(f, dims, 0), half_period(f, dims, 1), half_period(f, dims, 2)};
  if (kind == "planted_temporal") {
    if (L[1] != 0 || L[2] != 0) return -1;
    switch (L[0]) {
      case 1: return 0;
      case 2: return 1;
      case 4: return 2;
      case 3: return 3;
      default: return -1;
    }
  }
  int varying = 0;
  long period = 0;
  for (int a = 0; a < 3; ++a) {
    if (L[a] < 0) return -1;
    if (L[a] == 0) continue;
    if (period && L[a] != period) return -1;
    period = L[a];
    ++varying;
  }
  if (kind == "planted_plane") {
    if (L[0] != 0 || varying == 0) return -1;
    if (period == 1) return varying == 2 ? 0 : 1;
    if (period == 2) return varying == 2 ? 2 : 3;
    return -1;
  }
  if (period == 1) return 3 - varying;  // 3 -> 0, 2 -> 1, 1 -> 2
  if (period == 2 && varying == 3) return 3;
  return -1;
}

// Per-channel definition of a heterogeneous conv layer: output channel c is
// the naive conv with its own kernel rows[c] ([1, Ci, kd, kh, kw]), then
// training-mode batch normalisation with the biased batch variance, then an
// optional ReLU.
inline Tensor naive_heterogeneous_layer(const Tensor& x, const std::vector<Tensor>& rows, cakes::Triple stride,
                                        const std::vector<double>& gamma, const std::vector<double>& beta,
                                        bool relu, double eps = 1e-5) {
  std::vector<Tensor> channels;
  for (const auto& r : rows) channels.push_back(naive_conv3d(x, r, stride));
  const auto& s0 = channels.front().shape();
  const std::size_t N = s0[0], Co = rows.size(), S = s0[2] * s0[3] * s0[4];
  std::vector<double> out(N * Co * S);
  for (std::size_t c = 0; c < Co; ++c) {
    const Tensor& y = channels[c];
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < N * S; ++i) mean += y[i];
    mean /= static_cast<double>(N * S);
    for (std::size_t i = 0; i < N * S; ++i) var += (y[i] - mean) * (y[i] - mean);
    var /= static_cast<double>(N * S);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t v = 0; v < S; ++v) {
        double z = (y[n * S + v] - mean) / std::sqrt(var + eps) * gamma[c] + beta[c];
        if (relu) z = std::max(z, 0.0);
        out[(n * Co + c) * S + v] = z;
      }
  }
  return Tensor(Shape{N, Co, s0[2], s0[3], s0[4]}, out);
}

}  // namespace oracle
