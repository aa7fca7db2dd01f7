#pragma once

// Independent reference implementations used by the tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "hknas/hknas.hpp"

namespace oracle {

using hknas::Shape;
using hknas::Tensor;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// max |a - b| / max |b|
inline double rel_error(const Tensor& a, const Tensor& b) {
  double scale = 0.0;
  for (std::size_t i = 0; i < b.numel(); ++i) scale = std::max(scale, std::abs(b[i]));
  return max_abs_diff(a, b) / std::max(scale, 1e-300);
}

/// Direct nested-loop convolution, batched input (N, C, *spatial), zero padding,
/// stride 1. groups == C for depthwise.
inline Tensor conv(const Tensor& x, const Tensor& w, std::size_t spatial, bool depthwise) {
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  std::vector<std::size_t> ext(3, 1), k(3, 1);
  for (std::size_t a = 0; a < spatial; ++a) {
    ext[3 - spatial + a] = x.dim(2 + a);
    k[3 - spatial + a] = w.dim(2 + a);
  }
  Shape os = x.shape();
  os[1] = cout;
  Tensor y(os);
  const std::size_t plane = ext[0] * ext[1] * ext[2], taps = k[0] * k[1] * k[2];
  const std::size_t wi = w.dim(1);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t d = 0; d < ext[0]; ++d)
        for (std::size_t h = 0; h < ext[1]; ++h)
          for (std::size_t c = 0; c < ext[2]; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < wi; ++i) {
              const std::size_t ci = depthwise ? o : i;
              for (std::size_t a = 0; a < k[0]; ++a)
                for (std::size_t e = 0; e < k[1]; ++e)
                  for (std::size_t f = 0; f < k[2]; ++f) {
                    const long dd = long(d) + long(a) - long(k[0] / 2);
                    const long hh = long(h) + long(e) - long(k[1] / 2);
                    const long cc = long(c) + long(f) - long(k[2] / 2);
                    if (dd < 0 || hh < 0 || cc < 0 || dd >= long(ext[0]) || hh >= long(ext[1]) || cc >= long(ext[2])) continue;
                    const double xv = x[((b * cin + ci) * ext[0] + dd) * ext[1] * ext[2] + hh * ext[2] + cc];
                    const double wv = w[(o * wi + i) * taps + (a * k[1] + e) * k[2] + f];
                    acc += xv * wv;
                  }
            }
            y[(b * cout + o) * plane + (d * ext[1] + h) * ext[2] + c] = acc;
          }
  return y;
}

/// 1x1 convolution: y[b, o, p] = sum_i w[o, i] x[b, i, p].
inline Tensor pointwise(const Tensor& x, const Tensor& w) {
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = w.dim(0), plane = x.numel() / (n * cin);
  Shape os = x.shape();
  os[1] = cout;
  Tensor y(os);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t p = 0; p < plane; ++p) {
        double acc = 0.0;
        for (std::size_t i = 0; i < cin; ++i) acc += w[o * cin + i] * x[(b * cin + i) * plane + p];
        y[(b * cout + o) * plane + p] = acc;
      }
  return y;
}

/// Sub-kernel s (1-based) of a hyper kernel by explicit Chebyshev-radius test.
inline Tensor subkernel(const Tensor& k, std::size_t dims, std::size_t s) {
  Tensor out(k.shape(), 0.0);
  const std::size_t size = k.dim(k.rank() - 1);
  std::size_t fp = 1;
  for (std::size_t a = 0; a < dims; ++a) fp *= size;
  const long half = long(size / 2);
  for (std::size_t i = 0; i < k.numel(); ++i) {
    std::size_t q = i % fp;
    long r = 0;
    for (std::size_t a = 0; a < dims; ++a) {
      r = std::max(r, std::abs(long(q % size) - half));
      q /= size;
    }
    if (r <= long(s)) out[i] = k[i];
  }
  return out;
}

/// Structural parameters by masked sums: mean of K over the ring at radius s
/// (radius <= 1 for s = 1), across all channel pairs.
inline std::vector<double> alphas(const Tensor& k, std::size_t dims) {
  const std::size_t size = k.dim(k.rank() - 1), n = size / 2;
  std::vector<double> out;
  for (std::size_t s = 1; s <= n; ++s) {
    const Tensor outer = subkernel(k, dims, s);
    double acc = 0.0, count = 0.0;
    if (s == 1) {
      for (std::size_t i = 0; i < k.numel(); ++i) acc += outer[i];
    } else {
      const Tensor inner = subkernel(k, dims, s - 1);
      for (std::size_t i = 0; i < k.numel(); ++i) acc += outer[i] - inner[i];
    }
    const double side_out = double(2 * s + 1), side_in = s == 1 ? 0.0 : double(2 * s - 1);
    count = std::pow(side_out, double(dims)) - std::pow(side_in, double(dims));
    const double pairs = double(k.numel()) / std::pow(double(size), double(dims));
    out.push_back(acc / (count * pairs));
  }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& a) {
  const double m = *std::max_element(a.begin(), a.end());
  std::vector<double> p(a.size());
  double z = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) z += p[i] = std::exp(a[i] - m);
  for (auto& v : p) v /= z;
  return p;
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Spectral 1-D kernel k (1,1,t) slid along the channel axis of x (N,C,H,W).
inline Tensor spectral(const Tensor& x, const Tensor& k) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3), t = k.dim(2);
  Tensor y(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        double acc = 0;
        for (std::size_t j = 0; j < t; ++j) {
          const long src = long(ch) + long(j) - long(t / 2);
          if (src >= 0 && src < long(c)) acc += k[j] * x[(b * c + std::size_t(src)) * plane + p];
        }
        y[(b * c + ch) * plane + p] = acc;
      }
  return y;
}

inline Tensor volume(const Tensor& x, const Tensor& k) {
  Tensor xv(Shape{x.dim(0), 1, x.dim(1), x.dim(2), x.dim(3)}, x.values());
  Tensor y = conv(xv, k, 3, false);
  return Tensor(x.shape(), y.values());
}

// Weighted sum over candidates of one kernel applied by `op`.
template <class Op>
Tensor mixed(const hknas::HyperKernel& k, const std::vector<double>& p, const Tensor& x, Op&& op) {
  Tensor out;
  for (std::size_t s = 1; s <= k.candidates(); ++s) {
    const Tensor y = op(x, subkernel(k.weights, k.dims(), s));
    if (s == 1) out = Tensor(y.shape(), 0.0);
    for (std::size_t i = 0; i < y.numel(); ++i) out[i] += p[s - 1] * y[i];
  }
  return out;
}

inline Tensor edge(const hknas::MixedEdge& e, const Tensor& x) {
  auto p = [&](std::size_t i) { return softmax(e.alpha_values(i)); };
  auto one_d = [](const Tensor& in, const Tensor& w) { return spectral(in, w); };
  auto dw = [](const Tensor& in, const Tensor& w) { return conv(in, w, 2, true); };
  switch (e.form) {
    case hknas::Form::conv1d:
      return mixed(e.kernels[0], p(0), x, [](const Tensor& in, const Tensor& w) { return conv(in, w, 1, false); });
    case hknas::Form::conv3d: return mixed(e.kernels[0], p(0), x, volume);
    case hknas::Form::serial_1d_2ddw: return mixed(e.kernels[1], p(1), mixed(e.kernels[0], p(0), x, one_d), dw);
    case hknas::Form::serial_2ddw_1d: return mixed(e.kernels[0], p(0), mixed(e.kernels[1], p(1), x, dw), one_d);
    case hknas::Form::parallel_1d_2ddw: {
      Tensor a = mixed(e.kernels[0], p(0), x, one_d), b = mixed(e.kernels[1], p(1), x, dw);
      for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
      return a;
    }
  }
  return {};
}

// 1 at the central position of every channel, 0 elsewhere.
inline Tensor center_readout(const hknas::Shape& sh) {
  Tensor r(sh, 0.0);
  std::size_t plane = 1;
  for (std::size_t a = 2; a < sh.size(); ++a) plane *= sh[a];
  std::size_t mid = 0, stride = 1;
  for (std::size_t a = sh.size(); a-- > 2;) {
    mid += (sh[a] / 2) * stride;
    stride *= sh[a];
  }
  for (std::size_t i = 0; i < r.numel(); ++i)
    if (i % plane == mid) r[i] = 1.0;
  return r;
}

/// Compares tape gradients of a scalar loss against central differences on
/// `coords` random entries of each parameter. Relative error uses
/// max(|analytic|, |numeric|) with a tiny floor against 0/0.
inline GradCheck grad_check(const std::function<Tensor(hknas::Tape&)>& loss, const std::vector<Tensor>& params,
                            std::mt19937_64& rng, std::size_t coords, double step = 1e-6) {
  for (const auto& p : params) {
    Tensor q = p;
    q.set_requires_grad(true);
    q.drop_grad();
  }
  hknas::Tape tape;
  Tensor l = loss(tape);
  tape.backward(l);
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  GradCheck r;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    std::uniform_int_distribution<std::size_t> pick(0, p.numel() - 1);
    for (std::size_t c = 0; c < coords; ++c) {
      const std::size_t i = pick(rng);
      const double keep = p[i];
      hknas::Tape off(false);
      p[i] = keep + step;
      const double lp = loss(off).item();
      p[i] = keep - step;
      const double lm = loss(off).item();
      p[i] = keep;
      const double num = (lp - lm) / (2 * step);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-12});
      r.max_rel = std::max(r.max_rel, rel);
      ++r.checked;
    }
  }
  return r;
}

}  // namespace oracle
