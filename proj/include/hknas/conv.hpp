#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "hknas/tensor.hpp"

namespace hknas {

enum class ConvKind { standard1d, standard2d, standard3d, depthwise2d, pointwise };

inline const char* to_string(ConvKind kind) {
  switch (kind) {
    case ConvKind::standard1d: return "standard-1d";
    case ConvKind::standard2d: return "standard-2d";
    case ConvKind::standard3d: return "standard-3d";
    case ConvKind::depthwise2d: return "depthwise-2d";
    case ConvKind::pointwise: return "pointwise";
  }
  return "?";
}

/// Stride-1 convolution with zero "same-centered" padding of (extent-1)/2.
struct ConvSpec {
  ConvKind kind = ConvKind::pointwise;
  std::vector<std::size_t> extent;  // one odd extent per spatial axis; empty for pointwise

  static ConvSpec standard(std::size_t dims, std::size_t k) {
    static constexpr std::array kinds{ConvKind::standard1d, ConvKind::standard2d, ConvKind::standard3d};
    if (dims < 1 || dims > 3) throw ShapeError("standard convolution supports 1 to 3 spatial axes");
    return {kinds[dims - 1], std::vector<std::size_t>(dims, k)};
  }
  static ConvSpec standard3d(std::size_t kd, std::size_t kh, std::size_t kw) {
    return {ConvKind::standard3d, {kd, kh, kw}};
  }
  static ConvSpec depthwise2d(std::size_t k) { return {ConvKind::depthwise2d, {k, k}}; }
  static ConvSpec pointwise() { return {ConvKind::pointwise, {}}; }

  std::size_t spatial_rank() const {
    switch (kind) {
      case ConvKind::standard1d: return 1;
      case ConvKind::standard2d:
      case ConvKind::depthwise2d: return 2;
      case ConvKind::standard3d: return 3;
      case ConvKind::pointwise: return 0;
    }
    return 0;
  }
};

namespace detail {

// Canonical 5-D view (n, c, d, h, w) of a batched convolution.
struct ConvGeometry {
  std::size_t batch = 1, cin = 1, cout = 1, groups = 1;
  std::size_t d = 1, h = 1, w = 1;
  std::size_t kd = 1, kh = 1, kw = 1;

  std::size_t plane() const { return d * h * w; }
  std::size_t taps() const { return kd * kh * kw; }
  std::size_t in_per_group() const { return cin / groups; }
  std::size_t out_per_group() const { return cout / groups; }
};

[[noreturn]] inline void conv_shape_error(const ConvSpec& spec, const std::string& what) {
  throw ShapeError(std::string("convolve(") + to_string(spec.kind) + "): " + what);
}

// Returns the geometry and whether x carried an explicit batch axis.
inline std::pair<ConvGeometry, bool> conv_geometry(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  ConvGeometry g;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (spec.kind == ConvKind::pointwise) {
    if (xs.size() < 2) conv_shape_error(spec, "input needs (batch, channels, ...) axes, got " + shape_str(xs));
    if (ws.size() != 2) conv_shape_error(spec, "weight must be (out, in), got " + shape_str(ws));
    g.batch = xs[0];
    g.cin = xs[1];
    g.cout = ws[0];
    for (std::size_t a = 2; a < xs.size(); ++a) g.w *= xs[a];
    if (ws[1] != g.cin) {
      conv_shape_error(spec, "input channel axis 1 has " + std::to_string(g.cin) +
                                 " but weight in-channel axis 1 expects " + std::to_string(ws[1]));
    }
    return {g, true};
  }

  const std::size_t sr = spec.spatial_rank();
  if (spec.extent.size() != sr) conv_shape_error(spec, "expected one kernel extent per spatial axis");
  for (std::size_t a = 0; a < sr; ++a) {
    if (spec.extent[a] % 2 == 0) {
      conv_shape_error(spec, "kernel extent " + std::to_string(spec.extent[a]) + " on spatial axis " +
                                 std::to_string(a) + " is even; extents must be odd");
    }
  }
  bool batched;
  if (xs.size() == sr + 2) {
    batched = true;
  } else if (xs.size() == sr + 1) {
    batched = false;
  } else {
    conv_shape_error(spec, "input rank " + std::to_string(xs.size()) + " does not fit " + std::to_string(sr) +
                               " spatial axes");
  }
  const std::size_t off = batched ? 1 : 0;
  g.batch = batched ? xs[0] : 1;
  g.cin = xs[off];
  if (ws.size() != sr + 2) conv_shape_error(spec, "weight rank must be " + std::to_string(sr + 2) + ", got " + shape_str(ws));

  std::array<std::size_t, 3> sp{1, 1, 1};
  std::array<std::size_t, 3> kk{1, 1, 1};
  for (std::size_t a = 0; a < sr; ++a) {
    sp[3 - sr + a] = xs[off + 1 + a];
    kk[3 - sr + a] = spec.extent[a];
    if (ws[2 + a] != spec.extent[a]) {
      conv_shape_error(spec, "weight spatial axis " + std::to_string(2 + a) + " has " + std::to_string(ws[2 + a]) +
                                 " but the spec extent is " + std::to_string(spec.extent[a]));
    }
  }
  g.d = sp[0], g.h = sp[1], g.w = sp[2];
  g.kd = kk[0], g.kh = kk[1], g.kw = kk[2];

  if (spec.kind == ConvKind::depthwise2d) {
    g.groups = g.cin;
    g.cout = ws[0];
    if (ws[0] != g.cin) {
      conv_shape_error(spec, "input channel axis " + std::to_string(off) + " has " + std::to_string(g.cin) +
                                 " but depthwise weight axis 0 has " + std::to_string(ws[0]));
    }
    if (ws[1] != 1) conv_shape_error(spec, "depthwise weight axis 1 must be 1, got " + std::to_string(ws[1]));
  } else {
    g.cout = ws[0];
    if (ws[1] != g.cin) {
      conv_shape_error(spec, "input channel axis " + std::to_string(off) + " has " + std::to_string(g.cin) +
                                 " but weight in-channel axis 1 expects " + std::to_string(ws[1]));
    }
  }
  return {g, batched};
}

// Valid output range [lo, hi) along one axis for kernel tap t with half-width p.
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t n, std::size_t t, std::size_t p) {
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(p);
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n), static_cast<std::ptrdiff_t>(n) - shift);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Visits every (output row, input row, weight) triple of the convolution.
// fn(out_offset, in_offset, weight_index, w_lo, w_hi) covers elements
// out[out_offset + j] <-> in[in_offset + j] for j in [w_lo, w_hi).
template <class Fn>
void for_each_conv_row(const ConvGeometry& g, Fn&& fn) {
  const std::size_t pd = g.kd / 2, ph = g.kh / 2, pw = g.kw / 2;
  const std::size_t ipg = g.in_per_group(), opg = g.out_per_group();
  const std::size_t plane = g.plane();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.cout; ++o) {
      const std::size_t group = o / opg;
      const std::size_t out_plane = (n * g.cout + o) * plane;
      for (std::size_t ig = 0; ig < ipg; ++ig) {
        const std::size_t ic = group * ipg + ig;
        const std::size_t in_plane = (n * g.cin + ic) * plane;
        const std::size_t wbase = (o * ipg + ig) * g.taps();
        for (std::size_t a = 0; a < g.kd; ++a) {
          const auto [d0, d1] = tap_range(g.d, a, pd);
          for (std::size_t b = 0; b < g.kh; ++b) {
            const auto [h0, h1] = tap_range(g.h, b, ph);
            for (std::size_t c = 0; c < g.kw; ++c) {
              const auto [w0, w1] = tap_range(g.w, c, pw);
              if (w0 >= w1) continue;
              const std::size_t widx = wbase + (a * g.kh + b) * g.kw + c;
              for (std::size_t dd = d0; dd < d1; ++dd) {
                for (std::size_t hh = h0; hh < h1; ++hh) {
                  const std::size_t orow = out_plane + (dd * g.h + hh) * g.w;
                  // in[irow + j] pairs with out[orow + j]; irow alone may be negative.
                  const std::ptrdiff_t irow = static_cast<std::ptrdiff_t>(in_plane) +
                                              static_cast<std::ptrdiff_t>(((dd + a - pd) * g.h + (hh + b - ph)) * g.w) +
                                              static_cast<std::ptrdiff_t>(c) - static_cast<std::ptrdiff_t>(pw);
                  fn(orow, irow, widx, w0, w1);
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Convolution of x with w under `spec`.
///
/// Layouts: x is (batch, channels, spatial...) or (channels, spatial...);
/// w is (out, in, spatial...) for standard kinds, (channels, 1, k, k) for
/// depthwise-2d and (out, in) for pointwise. The output keeps the input's
/// spatial extents.
inline Tensor convolve(Tape& tape, const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  const auto [g, batched] = detail::conv_geometry(x, w, spec);
  Shape out_shape = x.shape();
  out_shape[batched ? 1 : 0] = g.cout;
  Tensor out(out_shape);
  {
    double* po = out.data().data();
    const double* px = x.data().data();
    const double* pw = w.data().data();
    detail::for_each_conv_row(g, [&](std::size_t orow, std::ptrdiff_t irow, std::size_t widx, std::size_t j0, std::size_t j1) {
      const double wv = pw[widx];
      const std::size_t len = j1 - j0;
      double* o = po + orow + j0;
      const double* in = px + (irow + static_cast<std::ptrdiff_t>(j0));
      for (std::size_t j = 0; j < len; ++j) o[j] += wv * in[j];
    });
  }
  detail::require_finite(out, "convolve");
  if (tape.wants({&x, &w})) {
    tape.record(out, [x, w, out, g = g]() mutable {
      if (!out.has_grad()) return;
      const double* go = out.grad().data();
      const bool need_x = x.requires_grad(), need_w = w.requires_grad();
      double* gx = need_x ? x.grad().data() : nullptr;
      double* gw = need_w ? w.grad().data() : nullptr;
      const double* px = x.data().data();
      const double* pw = w.data().data();
      detail::for_each_conv_row(g, [&](std::size_t orow, std::ptrdiff_t irow, std::size_t widx, std::size_t j0, std::size_t j1) {
        const std::size_t len = j1 - j0;
        const std::ptrdiff_t ioff = irow + static_cast<std::ptrdiff_t>(j0);
        const double* o = go + orow + j0;
        if (need_x) {
          const double wv = pw[widx];
          double* ix = gx + ioff;
          for (std::size_t j = 0; j < len; ++j) ix[j] += wv * o[j];
        }
        if (need_w) {
          const double* in = px + ioff;
          double acc = 0.0;
          for (std::size_t j = 0; j < len; ++j) acc += o[j] * in[j];
          gw[widx] += acc;
        }
      });
    });
  }
  return out;
}

}  // namespace hknas
