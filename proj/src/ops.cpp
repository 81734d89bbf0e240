#include "cakes/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <mutex>
#include <string>

namespace cakes {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

std::mutex g_corrupt_mutex;
std::string g_corrupt_op;

double corruption_factor(std::string_view op) {
  return debug::backward_corrupted(op) ? 1.01 : 1.0;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

// Elements per channel slice for [N, C, ...] tensors.
std::size_t inner_extent(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

struct ConvGeometry {
  std::size_t n, ci, d, h, w;
  std::size_t co, kd, kh, kw;
  Triple stride, pad;
  std::size_t od, oh, ow;

  std::size_t k_rows() const { return ci * kd * kh * kw; }
  std::size_t in_plane() const { return d * h * w; }
  std::size_t out_plane() const { return od * oh * ow; }
  bool pointwise() const {
    return kd == 1 && kh == 1 && kw == 1 && stride == Triple{1, 1, 1} && pad == Triple{0, 0, 0};
  }
};

// Valid output range [lo, hi) for one axis so that o*stride - pad + k in [0, in).
void valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t pad,
                 std::size_t k, std::size_t& lo, std::size_t& hi) {
  const long long off = static_cast<long long>(k) - static_cast<long long>(pad);
  long long l = 0;
  if (off < 0) l = (-off + static_cast<long long>(stride) - 1) / static_cast<long long>(stride);
  long long hcap = static_cast<long long>(in) - 1 - off;  // o*stride <= hcap
  long long h_ = hcap < 0 ? 0 : hcap / static_cast<long long>(stride) + 1;
  h_ = std::min<long long>(h_, static_cast<long long>(out));
  lo = static_cast<std::size_t>(std::min<long long>(l, h_));
  hi = static_cast<std::size_t>(h_);
}

void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t P = g.out_plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.ci; ++c) {
    const double* xc = x + c * g.in_plane();
    for (std::size_t i = 0; i < g.kd; ++i)
      for (std::size_t j = 0; j < g.kh; ++j)
        for (std::size_t k = 0; k < g.kw; ++k, ++row) {
          double* dst = cols + row * P;
          std::fill(dst, dst + P, 0.0);
          std::size_t d0, d1, h0, h1, w0, w1;
          valid_range(g.od, g.d, g.stride.d, g.pad.d, i, d0, d1);
          valid_range(g.oh, g.h, g.stride.h, g.pad.h, j, h0, h1);
          valid_range(g.ow, g.w, g.stride.w, g.pad.w, k, w0, w1);
          for (std::size_t od = d0; od < d1; ++od) {
            const std::size_t id = od * g.stride.d + i - g.pad.d;
            for (std::size_t oh = h0; oh < h1; ++oh) {
              const std::size_t ih = oh * g.stride.h + j - g.pad.h;
              const double* src = xc + (id * g.h + ih) * g.w;
              double* out = dst + (od * g.oh + oh) * g.ow;
              if (g.stride.w == 1) {
                const double* s = src + w0 + k - g.pad.w;
                std::copy(s, s + (w1 - w0), out + w0);
              } else {
                for (std::size_t ow = w0; ow < w1; ++ow)
                  out[ow] = src[ow * g.stride.w + k - g.pad.w];
              }
            }
          }
        }
  }
}

void col2im(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t P = g.out_plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.ci; ++c) {
    double* xc = dx + c * g.in_plane();
    for (std::size_t i = 0; i < g.kd; ++i)
      for (std::size_t j = 0; j < g.kh; ++j)
        for (std::size_t k = 0; k < g.kw; ++k, ++row) {
          const double* src = cols + row * P;
          std::size_t d0, d1, h0, h1, w0, w1;
          valid_range(g.od, g.d, g.stride.d, g.pad.d, i, d0, d1);
          valid_range(g.oh, g.h, g.stride.h, g.pad.h, j, h0, h1);
          valid_range(g.ow, g.w, g.stride.w, g.pad.w, k, w0, w1);
          for (std::size_t od = d0; od < d1; ++od) {
            const std::size_t id = od * g.stride.d + i - g.pad.d;
            for (std::size_t oh = h0; oh < h1; ++oh) {
              const std::size_t ih = oh * g.stride.h + j - g.pad.h;
              double* dst = xc + (id * g.h + ih) * g.w;
              const double* in = src + (od * g.oh + oh) * g.ow;
              for (std::size_t ow = w0; ow < w1; ++ow)
                dst[ow * g.stride.w + k - g.pad.w] += in[ow];
            }
          }
        }
  }
}

}  // namespace

namespace debug {

void corrupt_backward(std::string_view op) {
  std::lock_guard lock(g_corrupt_mutex);
  g_corrupt_op = std::string(op);
}

bool backward_corrupted(std::string_view op) {
  std::lock_guard lock(g_corrupt_mutex);
  return !g_corrupt_op.empty() && g_corrupt_op == op;
}

}  // namespace debug

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (in + 2 * pad < kernel) throw ShapeError("conv: kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const ConvOptions& options) {
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 5) throw ShapeError("conv3d: input must be [N, C, D, H, W], got " + shape_string(xs));
  if (ws.size() != 5) throw ShapeError("conv3d: weight must be [Co, Ci, kd, kh, kw], got " + shape_string(ws));
  if (xs[1] != ws[1])
    throw ShapeError("conv3d: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                     std::to_string(ws[1]));
  for (std::size_t a = 2; a < 5; ++a) {
    if (ws[a] % 2 == 0) throw ShapeError("conv3d: even kernel extent " + shape_string(ws));
    if (xs[a] == 0) throw ShapeError("conv3d: empty input extent");
  }

  ConvGeometry g{};
  g.n = xs[0]; g.ci = xs[1]; g.d = xs[2]; g.h = xs[3]; g.w = xs[4];
  g.co = ws[0]; g.kd = ws[2]; g.kh = ws[3]; g.kw = ws[4];
  g.stride = options.stride;
  g.pad = options.padding.value_or(Triple{(g.kd - 1) / 2, (g.kh - 1) / 2, (g.kw - 1) / 2});
  g.od = conv_output_extent(g.d, g.kd, g.stride.d, g.pad.d);
  g.oh = conv_output_extent(g.h, g.kh, g.stride.h, g.pad.h);
  g.ow = conv_output_extent(g.w, g.kw, g.stride.w, g.pad.w);

  const std::size_t K = g.k_rows(), P = g.out_plane();
  std::vector<double> out(g.n * g.co * P);
  const double* xv = input.values().data();
  const CMapR wm(weight.values().data(), g.co, K);

  parallel_for(g.n, [&](std::size_t n) {
    MapR y(out.data() + n * g.co * P, g.co, P);
    const double* xn = xv + n * g.ci * g.in_plane();
    if (g.pointwise()) {
      y.noalias() = wm * CMapR(xn, g.ci, P);
    } else {
      std::vector<double> cols(K * P);
      im2col(g, xn, cols.data());
      y.noalias() = wm * CMapR(cols.data(), K, P);
    }
  });

  return Tensor::make_result(
      {g.n, g.co, g.od, g.oh, g.ow}, std::move(out), {input, weight}, [g](detail::Node& self) {
        const std::size_t K = g.k_rows(), P = g.out_plane();
        detail::Node& xin = *self.parents[0];
        detail::Node& wt = *self.parents[1];
        const CMapR wm(wt.value.data(), g.co, K);
        const bool want_x = xin.requires_grad, want_w = wt.requires_grad;
        std::vector<double> partial_w(want_w ? g.n * g.co * K : 0);
        double* dx = want_x ? xin.grad_buffer().data() : nullptr;

        parallel_for(g.n, [&](std::size_t n) {
          const CMapR gy(self.grad.data() + n * g.co * P, g.co, P);
          const double* xn = xin.value.data() + n * g.ci * g.in_plane();
          std::vector<double> cols;
          if (!g.pointwise() && (want_w || want_x)) cols.resize(K * P);
          if (want_w) {
            MapR gw(partial_w.data() + n * g.co * K, g.co, K);
            if (g.pointwise()) {
              gw.noalias() = gy * CMapR(xn, g.ci, P).transpose();
            } else {
              im2col(g, xn, cols.data());
              gw.noalias() = gy * CMapR(cols.data(), K, P).transpose();
            }
          }
          if (want_x) {
            double* dxn = dx + n * g.ci * g.in_plane();
            if (g.pointwise()) {
              MapR(dxn, g.ci, P).noalias() += wm.transpose() * gy;
            } else {
              MapR(cols.data(), K, P).noalias() = wm.transpose() * gy;
              col2im(g, cols.data(), dxn);
            }
          }
        });

        if (want_w) {
          const double f = corruption_factor("conv");
          auto gw = wt.grad_buffer();
          for (std::size_t n = 0; n < g.n; ++n) {
            const double* p = partial_w.data() + n * g.co * K;
            for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += f * p[i];
          }
        }
      });
}

Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
  const auto& s = input.shape();
  if (s.size() < 2 || bias.size() != s[1])
    throw ShapeError("add_channel_bias: bias of " + std::to_string(bias.size()) + " for " +
                     shape_string(s));
  const std::size_t N = s[0], C = s[1], S = inner_extent(s);
  std::vector<double> out(input.values().begin(), input.values().end());
  const auto b = bias.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S; ++i) out[(n * C + c) * S + i] += b[c];
  return Tensor::make_result(s, std::move(out), {input, bias}, [N, C, S](detail::Node& self) {
    auto& x = *self.parents[0];
    auto& b = *self.parents[1];
    if (x.requires_grad) {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
    if (b.requires_grad) {
      auto gb = b.grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < S; ++i) gb[c] += self.grad[(n * C + c) * S + i];
    }
  });
}

Tensor channel_scale(const Tensor& input, const Tensor& scale_t) {
  const auto& s = input.shape();
  if (s.size() < 2 || scale_t.size() != s[1])
    throw ShapeError("channel_scale: scale of " + std::to_string(scale_t.size()) + " for " +
                     shape_string(s));
  const std::size_t N = s[0], C = s[1], S = inner_extent(s);
  std::vector<double> out(input.size());
  const auto x = input.values();
  const auto a = scale_t.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t idx = (n * C + c) * S + i;
        out[idx] = a[c] * x[idx];
      }
  return Tensor::make_result(s, std::move(out), {input, scale_t}, [N, C, S](detail::Node& self) {
    auto& x = *self.parents[0];
    auto& a = *self.parents[1];
    if (x.requires_grad) {
      auto gx = x.grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < S; ++i) {
            const std::size_t idx = (n * C + c) * S + i;
            gx[idx] += a.value[c] * self.grad[idx];
          }
    }
    if (a.requires_grad) {
      auto ga = a.grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < S; ++i) {
            const std::size_t idx = (n * C + c) * S + i;
            ga[c] += x.value[idx] * self.grad[idx];
          }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& x = *self.parents[0];
    auto& y = *self.parents[1];
    if (x.requires_grad) {
      auto g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.value[i] * self.grad[i];
    }
    if (y.requires_grad) {
      auto g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += x.value[i] * self.grad[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a[i];
  return Tensor::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tensor::make_result({}, {s}, {a}, [](detail::Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& x = *self.parents[0];
    auto g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x.value[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor weighted_abs_sum(const Tensor& a, std::span<const double> weights) {
  if (weights.size() != a.size())
    throw ShapeError("weighted_abs_sum: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(a.size()) + " values");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += weights[i] * std::abs(a[i]);
  std::vector<double> w(weights.begin(), weights.end());
  return Tensor::make_result({}, {s}, {a}, [w = std::move(w)](detail::Node& self) {
    auto& x = *self.parents[0];
    auto g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x.value[i];
      const double sign = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      g[i] += self.grad[0] * w[i] * sign;
    }
  });
}

Tensor global_avg_pool(const Tensor& input) {
  const auto& s = input.shape();
  if (s.size() < 3) throw ShapeError("global_avg_pool: expected [N, C, ...], got " + shape_string(s));
  const std::size_t N = s[0], C = s[1], S = inner_extent(s);
  std::vector<double> out(N * C, 0.0);
  const auto x = input.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < S; ++i) acc += x[nc * S + i];
    out[nc] = acc / static_cast<double>(S);
  }
  return Tensor::make_result({N, C}, std::move(out), {input}, [N, C, S](detail::Node& self) {
    auto g = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(S);
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t i = 0; i < S; ++i) g[nc * S + i] += self.grad[nc] * inv;
  });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
    throw ShapeError("linear: input " + shape_string(xs) + " incompatible with weight " +
                     shape_string(ws));
  const std::size_t N = xs[0], F = xs[1], O = ws[0];
  if (bias.defined() && bias.size() != O)
    throw ShapeError("linear: bias of " + std::to_string(bias.size()) + " for " +
                     std::to_string(O) + " outputs");
  std::vector<double> out(N * O);
  MapR y(out.data(), N, O);
  y.noalias() = CMapR(input.values().data(), N, F) * CMapR(weight.values().data(), O, F).transpose();
  if (bias.defined())
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) out[n * O + o] += bias[o];

  std::vector<Tensor> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result({N, O}, std::move(out), std::move(parents), [N, F, O](detail::Node& self) {
    auto& x = *self.parents[0];
    auto& w = *self.parents[1];
    const CMapR gy(self.grad.data(), N, O);
    if (x.requires_grad)
      MapR(x.grad_buffer().data(), N, F).noalias() += gy * CMapR(w.value.data(), O, F);
    if (w.requires_grad) {
      const double f = corruption_factor("linear");
      MapR(w.grad_buffer().data(), O, F).noalias() += f * (gy.transpose() * CMapR(x.value.data(), N, F));
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto gb = self.parents[2]->grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) gb[o] += self.grad[n * O + o];
    }
  });
}

namespace {

// Softmax probabilities over axis 1 of [N, K, S].
std::vector<double> softmax_values(std::span<const double> x, std::size_t N, std::size_t K,
                                   std::size_t S) {
  std::vector<double> p(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < S; ++i) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, x[(n * K + k) * S + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = (n * K + k) * S + i;
        p[idx] = std::exp(x[idx] - mx);
        z += p[idx];
      }
      for (std::size_t k = 0; k < K; ++k) p[(n * K + k) * S + i] /= z;
    }
  return p;
}

void check_labels(std::span<const int> labels, std::size_t expected, std::size_t K,
                  const char* op) {
  if (labels.size() != expected)
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) +
                     " labels, expected " + std::to_string(expected));
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K)
      throw ShapeError(std::string(op) + ": label " + std::to_string(l) + " outside [0, " +
                       std::to_string(K) + ")");
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  const auto& s = logits.shape();
  if (s.size() < 2) throw ShapeError("softmax: expected [N, K, ...]");
  const std::size_t N = s[0], K = s[1], S = inner_extent(s);
  auto p = softmax_values(logits.values(), N, K, S);
  return Tensor::make_result(s, p, {logits}, [N, K, S, p](detail::Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < S; ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t idx = (n * K + k) * S + i;
          dot += self.grad[idx] * p[idx];
        }
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t idx = (n * K + k) * S + i;
          g[idx] += p[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const auto& s = logits.shape();
  if (s.size() < 2) throw ShapeError("softmax_cross_entropy: expected [N, K, ...]");
  const std::size_t N = s[0], K = s[1], S = inner_extent(s);
  check_labels(labels, N * S, K, "softmax_cross_entropy");
  auto p = softmax_values(logits.values(), N, K, S);
  const auto x = logits.values();
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < S; ++i) {
      const std::size_t y = static_cast<std::size_t>(labels[n * S + i]);
      double mx = -INFINITY;
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, x[(n * K + k) * S + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += std::exp(x[(n * K + k) * S + i] - mx);
      loss += std::log(z) + mx - x[(n * K + y) * S + i];
    }
  const double M = static_cast<double>(N * S);
  std::vector<int> lab(labels.begin(), labels.end());
  return Tensor::make_result(
      {}, {loss / M}, {logits}, [N, K, S, M, p = std::move(p), lab = std::move(lab)](detail::Node& self) {
        auto g = self.parents[0]->grad_buffer();
        const double scale_ = self.grad[0] / M;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < S; ++i) {
            const std::size_t y = static_cast<std::size_t>(lab[n * S + i]);
            for (std::size_t k = 0; k < K; ++k) {
              const std::size_t idx = (n * K + k) * S + i;
              g[idx] += scale_ * (p[idx] - (k == y ? 1.0 : 0.0));
            }
          }
      });
}

Tensor dice_loss(const Tensor& probabilities, std::span<const int> labels, double smooth) {
  const auto& s = probabilities.shape();
  if (s.size() < 2 || s[1] < 2) throw ShapeError("dice_loss: expected [N, K>=2, ...]");
  const std::size_t N = s[0], K = s[1], S = inner_extent(s);
  check_labels(labels, N * S, K, "dice_loss");
  const auto p = probabilities.values();
  std::vector<double> inter(K, 0.0), psum(K, 0.0), ysum(K, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 1; k < K; ++k)
      for (std::size_t i = 0; i < S; ++i) {
        const double pv = p[(n * K + k) * S + i];
        const double yv = labels[n * S + i] == static_cast<int>(k) ? 1.0 : 0.0;
        inter[k] += pv * yv;
        psum[k] += pv;
        ysum[k] += yv;
      }
  double dice = 0.0;
  for (std::size_t k = 1; k < K; ++k)
    dice += (2.0 * inter[k] + smooth) / (psum[k] + ysum[k] + smooth);
  const double F = static_cast<double>(K - 1);
  std::vector<int> lab(labels.begin(), labels.end());
  return Tensor::make_result(
      {}, {1.0 - dice / F}, {probabilities},
      [N, K, S, F, smooth, inter, psum, ysum, lab = std::move(lab)](detail::Node& self) {
        auto g = self.parents[0]->grad_buffer();
        for (std::size_t k = 1; k < K; ++k) {
          const double num = 2.0 * inter[k] + smooth;
          const double den = psum[k] + ysum[k] + smooth;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < S; ++i) {
              const double yv = lab[n * S + i] == static_cast<int>(k) ? 1.0 : 0.0;
              const double d = (2.0 * yv * den - num) / (den * den);
              g[(n * K + k) * S + i] -= self.grad[0] * d / F;
            }
        }
      });
}

Tensor gather_rows(const Tensor& source, std::span<const std::size_t> rows) {
  const auto& s = source.shape();
  if (s.empty()) throw ShapeError("gather_rows: scalar source");
  const std::size_t R = s[0], inner = R ? source.size() / R : 0;
  std::vector<double> out(rows.size() * inner);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= R) throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(source.values().begin() + rows[r] * inner, inner, out.begin() + r * inner);
  }
  Shape os = s;
  os[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return Tensor::make_result(std::move(os), std::move(out), {source},
                             [inner, idx = std::move(idx)](detail::Node& self) {
                               auto g = self.parents[0]->grad_buffer();
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t i = 0; i < inner; ++i)
                                   g[idx[r] * inner + i] += self.grad[r * inner + i];
                             });
}

Tensor assemble_channels(const std::vector<Tensor>& parts,
                         const std::vector<std::vector<std::size_t>>& channel_index,
                         std::size_t channels) {
  if (parts.empty() || parts.size() != channel_index.size())
    throw ShapeError("assemble_channels: parts and index lists differ");
  const Shape& ref = parts.front().shape();
  if (ref.size() < 2) throw ShapeError("assemble_channels: expected [N, C, ...]");
  const std::size_t N = ref[0], S = inner_extent(ref);
  std::vector<int> covered(channels, 0);
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const Shape& ps = parts[j].shape();
    if (ps.size() != ref.size() || ps[0] != N || inner_extent(ps) != S ||
        !std::equal(ps.begin() + 2, ps.end(), ref.begin() + 2))
      throw ShapeError("assemble_channels: part " + std::to_string(j) + " has shape " +
                       shape_string(ps));
    if (ps[1] != channel_index[j].size())
      throw ShapeError("assemble_channels: index list length differs from part channels");
    for (auto c : channel_index[j]) {
      if (c >= channels) throw ShapeError("assemble_channels: channel index out of range");
      ++covered[c];
    }
  }
  for (int c : covered)
    if (c != 1) throw ShapeError("assemble_channels: output channels must be covered exactly once");

  std::vector<double> out(N * channels * S);
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const auto v = parts[j].values();
    const std::size_t Cj = channel_index[j].size();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < Cj; ++k)
        std::copy_n(v.begin() + (n * Cj + k) * S, S,
                    out.begin() + (n * channels + channel_index[j][k]) * S);
  }
  Shape os = ref;
  os[1] = channels;
  return Tensor::make_result(std::move(os), std::move(out), parts,
                             [N, S, channels, channel_index](detail::Node& self) {
                               for (std::size_t j = 0; j < self.parents.size(); ++j) {
                                 auto& p = *self.parents[j];
                                 if (!p.requires_grad) continue;
                                 auto g = p.grad_buffer();
                                 const std::size_t Cj = channel_index[j].size();
                                 for (std::size_t n = 0; n < N; ++n)
                                   for (std::size_t k = 0; k < Cj; ++k) {
                                     const double* src =
                                         self.grad.data() + (n * channels + channel_index[j][k]) * S;
                                     double* dst = g.data() + (n * Cj + k) * S;
                                     for (std::size_t i = 0; i < S; ++i) dst[i] += src[i];
                                   }
                               }
                             });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  std::vector<std::vector<std::size_t>> index;
  std::size_t next = 0;
  for (const auto& p : parts) {
    if (p.rank() < 2) throw ShapeError("concat_channels: expected [N, C, ...]");
    std::vector<std::size_t> idx(p.dim(1));
    for (auto& i : idx) i = next++;
    index.push_back(std::move(idx));
  }
  return assemble_channels(parts, index, next);
}

Tensor batch_norm(const Tensor& input, const Tensor& scale_t, const Tensor& shift,
                  NormStats* stats, NormMode mode, double eps,
                  std::span<const std::size_t> stat_index) {
  const auto& s = input.shape();
  if (s.size() < 2) throw ShapeError("batch_norm: expected [N, C, ...]");
  const std::size_t N = s[0], C = s[1], S = inner_extent(s);
  if (scale_t.size() != C || shift.size() != C)
    throw ShapeError("batch_norm: scale/shift length must equal channel count " + std::to_string(C));
  if (!(eps > 0.0)) throw ShapeError("batch_norm: eps must be positive");
  if (!stat_index.empty() && stat_index.size() != C)
    throw ShapeError("batch_norm: stat_index length must equal channel count");
  auto slot = [&](std::size_t c) { return stat_index.empty() ? c : stat_index[c]; };
  if (stats) {
    for (std::size_t c = 0; c < C; ++c)
      if (slot(c) >= stats->running_mean.size()) throw ShapeError("batch_norm: stat slot out of range");
  }
  if (mode == NormMode::Eval && !stats) throw ShapeError("batch_norm: eval mode requires running statistics");

  const auto x = input.values();
  const std::size_t M = N * S;
  std::vector<double> mu(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == NormMode::Train) {
      double m = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) m += x[(n * C + c) * S + i];
      m /= static_cast<double>(M);
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) {
          const double dlt = x[(n * C + c) * S + i] - m;
          v += dlt * dlt;
        }
      v /= static_cast<double>(M);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + eps);
      if (stats) {
        const double unbiased = M > 1 ? v * static_cast<double>(M) / static_cast<double>(M - 1) : v;
        auto& rm = stats->running_mean[slot(c)];
        auto& rv = stats->running_var[slot(c)];
        rm = (1.0 - stats->momentum) * rm + stats->momentum * m;
        rv = (1.0 - stats->momentum) * rv + stats->momentum * unbiased;
      }
    } else {
      mu[c] = stats->running_mean[slot(c)];
      inv_std[c] = 1.0 / std::sqrt(stats->running_var[slot(c)] + eps);
    }
  }

  std::vector<double> xhat(input.size()), out(input.size());
  const auto g = scale_t.values();
  const auto b = shift.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t idx = (n * C + c) * S + i;
        xhat[idx] = (x[idx] - mu[c]) * inv_std[c];
        out[idx] = g[c] * xhat[idx] + b[c];
      }

  const bool train = mode == NormMode::Train;
  return Tensor::make_result(
      s, std::move(out), {input, scale_t, shift},
      [N, C, S, M, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::Node& self) {
        auto& x = *self.parents[0];
        auto& gamma = *self.parents[1];
        auto& beta = *self.parents[2];
        const auto& gy = self.grad;
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t idx = (n * C + c) * S + i;
              sum_dy[c] += gy[idx];
              sum_dy_xhat[c] += gy[idx] * xhat[idx];
            }
        if (gamma.requires_grad) {
          const double f = corruption_factor("batch_norm");
          auto gg = gamma.grad_buffer();
          for (std::size_t c = 0; c < C; ++c) gg[c] += f * sum_dy_xhat[c];
        }
        if (beta.requires_grad) {
          auto gb = beta.grad_buffer();
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_dy[c];
        }
        if (x.requires_grad) {
          auto gx = x.grad_buffer();
          const double inv_m = 1.0 / static_cast<double>(M);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const double k = gamma.value[c] * inv_std[c];
              for (std::size_t i = 0; i < S; ++i) {
                const std::size_t idx = (n * C + c) * S + i;
                if (train)
                  gx[idx] += k * (gy[idx] - inv_m * sum_dy[c] - xhat[idx] * inv_m * sum_dy_xhat[c]);
                else
                  gx[idx] += k * gy[idx];
              }
            }
        }
      });
}

}  // namespace cakes
