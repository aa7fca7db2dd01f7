#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hknas/conv.hpp"
#include "hknas/tensor.hpp"

namespace hknas {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
}

// (outer, d, h, w) view of the trailing `spatial` axes of x.
struct SpatialView {
  std::size_t outer = 1;
  std::array<std::size_t, 3> ext{1, 1, 1};
};

inline SpatialView spatial_view(const Shape& s, std::size_t spatial, const char* op) {
  if (spatial < 1 || spatial > 3 || spatial > s.size()) {
    throw ShapeError(std::string(op) + ": cannot take " + std::to_string(spatial) + " spatial axes of " + shape_str(s));
  }
  SpatialView v;
  const std::size_t lead = s.size() - spatial;
  for (std::size_t a = 0; a < lead; ++a) v.outer *= s[a];
  for (std::size_t a = 0; a < spatial; ++a) v.ext[3 - spatial + a] = s[lead + a];
  return v;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  detail::require_finite(out, "add");
  if (tape.wants({&a, &b})) {
    tape.record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (tape.wants({&x})) {
    tape.record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (x[i] > 0.0) gx[i] += go[i];
      }
    });
  }
  return out;
}

/// Copy of x with a new shape of equal element count.
inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor out(std::move(shape), x.values());
  if (tape.wants({&x})) {
    tape.record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out(Shape{1}, acc);
  detail::require_finite(out, "sum");
  if (tape.wants({&x})) {
    tape.record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (auto& v : x.grad()) v += g;
    });
  }
  return out;
}

/// Scalar <x, r> with r held constant.
inline Tensor dot(Tape& tape, const Tensor& x, const Tensor& r) {
  detail::require_same_shape(x, r, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i] * r[i];
  Tensor out(Shape{1}, acc);
  detail::require_finite(out, "dot");
  if (tape.wants({&x})) {
    tape.record(out, [x, r, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * r[i];
    });
  }
  return out;
}

/// Adds b[c] to every element of channel c of x = (batch, channels, ...).
inline Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) + " does not match channel axis 1 of " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.numel() / (n * c);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n * c; ++i) {
    for (std::size_t j = 0; j < plane; ++j) out[i * plane + j] = x[i * plane + j] + b[i % c];
  }
  detail::require_finite(out, "add_channel_bias");
  if (tape.wants({&x, &b})) {
    tape.record(out, [x, b, out, n, c, plane]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < n * c; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < plane; ++j) acc += go[i * plane + j];
          gb[i % c] += acc;
        }
      }
    });
  }
  return out;
}

/// Affine map y = x w^T + b with x (batch, in), w (out, in), b (out).
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("linear: expected x (batch, in), w (out, in), b (out); got " + shape_str(x.shape()) + ", " +
                     shape_str(w.shape()) + ", " + shape_str(b.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in) {
    throw ShapeError("linear: input axis 1 has " + std::to_string(in) + " but weight axis 1 expects " +
                     std::to_string(w.dim(1)));
  }
  if (b.dim(0) != out_dim) {
    throw ShapeError("linear: bias axis 0 has " + std::to_string(b.dim(0)) + " but weight axis 0 has " +
                     std::to_string(out_dim));
  }
  Tensor out(Shape{n, out_dim});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < in; ++k) acc += x[i * in + k] * w[o * in + k];
      out[i * out_dim + o] = acc;
    }
  }
  detail::require_finite(out, "linear");
  if (tape.wants({&x, &w, &b})) {
    tape.record(out, [x, w, b, out, n, in, out_dim]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double g = go[i * out_dim + o];
            for (std::size_t k = 0; k < in; ++k) gx[i * in + k] += g * w[o * in + k];
          }
        }
      }
      if (w.requires_grad()) {
        auto gw = w.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double g = go[i * out_dim + o];
            for (std::size_t k = 0; k < in; ++k) gw[o * in + k] += g * x[i * in + k];
          }
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t o = 0; o < out_dim; ++o) gb[o] += go[i * out_dim + o];
        }
      }
    });
  }
  return out;
}

/// Average pooling of the trailing `spatial_axes` axes by `factor`.
///
/// Each pooled extent becomes ceil(extent / factor); a partial window at the
/// right edge is completed with zeros and still divided by the full window size.
inline Tensor pool_avg(Tape& tape, const Tensor& x, std::size_t factor, std::size_t spatial_axes) {
  if (factor < 1) throw ShapeError("pool_avg: factor must be >= 1");
  const auto v = detail::spatial_view(x.shape(), spatial_axes, "pool_avg");
  std::array<std::size_t, 3> oe{1, 1, 1};
  std::array<std::size_t, 3> fa{1, 1, 1};
  for (std::size_t a = 3 - spatial_axes; a < 3; ++a) {
    oe[a] = (v.ext[a] + factor - 1) / factor;
    fa[a] = factor;
  }
  Shape os = x.shape();
  for (std::size_t a = 0; a < spatial_axes; ++a) os[os.size() - spatial_axes + a] = oe[3 - spatial_axes + a];
  Tensor out(os);
  const double inv = 1.0 / static_cast<double>(fa[0] * fa[1] * fa[2]);
  const std::size_t in_plane = v.ext[0] * v.ext[1] * v.ext[2];
  const std::size_t out_plane = oe[0] * oe[1] * oe[2];

  // Calls fn(out_index, in_index) for every input element inside the pooling grid.
  auto visit = [=](auto&& fn) {
    for (std::size_t p = 0; p < v.outer; ++p) {
      for (std::size_t d = 0; d < v.ext[0]; ++d) {
        for (std::size_t h = 0; h < v.ext[1]; ++h) {
          for (std::size_t w = 0; w < v.ext[2]; ++w) {
            const std::size_t oi = p * out_plane + ((d / fa[0]) * oe[1] + h / fa[1]) * oe[2] + w / fa[2];
            const std::size_t ii = p * in_plane + (d * v.ext[1] + h) * v.ext[2] + w;
            fn(oi, ii);
          }
        }
      }
    }
  };
  visit([&](std::size_t oi, std::size_t ii) { out[oi] += x[ii] * inv; });
  detail::require_finite(out, "pool_avg");
  if (tape.wants({&x})) {
    tape.record(out, [x, out, visit, inv]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      visit([&](std::size_t oi, std::size_t ii) { gx[ii] += go[oi] * inv; });
    });
  }
  return out;
}

/// Mean over the trailing `spatial_axes` axes; those axes keep extent 1.
inline Tensor global_avg(Tape& tape, const Tensor& x, std::size_t spatial_axes) {
  const auto v = detail::spatial_view(x.shape(), spatial_axes, "global_avg");
  const std::size_t plane = v.ext[0] * v.ext[1] * v.ext[2];
  Shape os = x.shape();
  for (std::size_t a = os.size() - spatial_axes; a < os.size(); ++a) os[a] = 1;
  Tensor out(os);
  for (std::size_t p = 0; p < v.outer; ++p) {
    double acc = 0.0;
    for (std::size_t j = 0; j < plane; ++j) acc += x[p * plane + j];
    out[p] = acc / static_cast<double>(plane);
  }
  detail::require_finite(out, "global_avg");
  if (tape.wants({&x})) {
    tape.record(out, [x, out, outer = v.outer, plane]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      const double inv = 1.0 / static_cast<double>(plane);
      for (std::size_t p = 0; p < outer; ++p) {
        for (std::size_t j = 0; j < plane; ++j) gx[p * plane + j] += go[p] * inv;
      }
    });
  }
  return out;
}

/// Corner-aligned bilinear resize of the trailing two axes to (out_h, out_w).
inline Tensor upsample_bilinear(Tape& tape, const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("upsample_bilinear: target extents must be >= 1");
  const auto v = detail::spatial_view(x.shape(), 2, "upsample_bilinear");
  const std::size_t ih = v.ext[1], iw = v.ext[2];

  struct Tap {
    std::size_t i0, i1;
    double f;  // weight of i1
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
      std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(src)), in - 1);
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto th = taps(ih, out_h), tw = taps(iw, out_w);

  Shape os = x.shape();
  os[os.size() - 2] = out_h;
  os[os.size() - 1] = out_w;
  Tensor out(os);
  auto visit = [=](auto&& fn) {
    for (std::size_t p = 0; p < v.outer; ++p) {
      const std::size_t ib = p * ih * iw, ob = p * out_h * out_w;
      for (std::size_t r = 0; r < out_h; ++r) {
        const auto& a = th[r];
        for (std::size_t c = 0; c < out_w; ++c) {
          const auto& b = tw[c];
          const std::size_t oi = ob + r * out_w + c;
          fn(oi, ib + a.i0 * iw + b.i0, (1 - a.f) * (1 - b.f));
          fn(oi, ib + a.i0 * iw + b.i1, (1 - a.f) * b.f);
          fn(oi, ib + a.i1 * iw + b.i0, a.f * (1 - b.f));
          fn(oi, ib + a.i1 * iw + b.i1, a.f * b.f);
        }
      }
    }
  };
  visit([&](std::size_t oi, std::size_t ii, double wgt) { out[oi] += wgt * x[ii]; });
  detail::require_finite(out, "upsample_bilinear");
  if (tape.wants({&x})) {
    tape.record(out, [x, out, visit]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      visit([&](std::size_t oi, std::size_t ii, double wgt) { gx[ii] += wgt * go[oi]; });
    });
  }
  return out;
}

inline Tensor softmax(Tape& tape, const Tensor& v) {
  if (v.rank() != 1) throw ShapeError("softmax: expected a vector, got " + shape_str(v.shape()));
  const double mx = *std::max_element(v.data().begin(), v.data().end());
  Tensor out(v.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i) z += (out[i] = std::exp(v[i] - mx));
  for (auto& p : out.data()) p /= z;
  detail::require_finite(out, "softmax");
  if (tape.wants({&v})) {
    tape.record(out, [v, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      double s = 0.0;
      for (std::size_t i = 0; i < go.size(); ++i) s += go[i] * out[i];
      auto gv = v.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gv[i] += out[i] * (go[i] - s);
    });
  }
  return out;
}

/// Mean softmax cross-entropy of logits (batch, classes) against class indices.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be (batch, classes), got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
                              std::to_string(k) + " classes");
    }
  }
  std::vector<double> prob(n * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[i]];
  }
  Tensor out(Shape{1}, loss / static_cast<double>(n));
  detail::require_finite(out, "cross_entropy");
  if (tape.wants({&logits})) {
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    tape.record(out, [logits, out, prob = std::move(prob), lab = std::move(lab), n, k]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(n);
      auto gl = logits.grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) gl[i * k + j] += g * (prob[i * k + j] - (j == lab[i] ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

/// Rows (pixels, channels) read from a (1, channels, h, w) map at (row, col) pairs.
inline Tensor gather_pixels(Tape& tape, const Tensor& x, std::span<const std::pair<std::size_t, std::size_t>> pixels) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("gather_pixels: expected (1, C, H, W), got " + shape_str(x.shape()));
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<std::size_t> src;
  src.reserve(pixels.size() * c);
  for (const auto& [r, col] : pixels) {
    if (r >= h || col >= w) throw std::out_of_range("gather_pixels: pixel outside the map");
    for (std::size_t ch = 0; ch < c; ++ch) src.push_back((ch * h + r) * w + col);
  }
  Tensor out(Shape{pixels.size(), c});
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x[src[i]];
  if (tape.wants({&x})) {
    tape.record(out, [x, out, src = std::move(src)]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormMode { batch, group };

struct NormSpec {
  NormMode mode = NormMode::batch;
  std::size_t groups = 1;  // group mode only
  double eps = 1e-5;
  double momentum = 0.1;  // running-statistics update rate, batch mode only
};

/// Per-channel running statistics used by batch mode outside training.
struct NormState {
  Tensor running_mean;
  Tensor running_var;

  explicit NormState(std::size_t channels)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}
};

/// Batch or group normalization of x = (batch, channels, ...) with per-channel affine.
///
/// Batch mode normalizes each channel over (batch, spatial) while training and
/// updates `state`; outside training it applies the running statistics.
/// Group mode always normalizes each sample's channel group over (group, spatial).
inline Tensor normalize(Tape& tape, const Tensor& x, const NormSpec& spec, const Tensor& gamma, const Tensor& beta,
                        NormState* state, bool training) {
  if (x.rank() < 2) throw ShapeError("normalize: expected (batch, channels, ...), got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.numel() / (n * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("normalize: affine parameters must have shape (" + std::to_string(c) + ")");
  }
  if (spec.mode == NormMode::group && (spec.groups == 0 || c % spec.groups != 0)) {
    throw ShapeError("normalize: " + std::to_string(c) + " channels not divisible into " + std::to_string(spec.groups) +
                     " groups");
  }
  Tensor out(x.shape());

  if (spec.mode == NormMode::batch && !training) {
    if (!state) throw std::invalid_argument("normalize: batch mode outside training needs running statistics");
    std::vector<double> scale(c), shift(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      scale[ch] = gamma[ch] / std::sqrt(state->running_var[ch] + spec.eps);
      shift[ch] = beta[ch] - scale[ch] * state->running_mean[ch];
    }
    for (std::size_t i = 0; i < n * c; ++i) {
      for (std::size_t j = 0; j < plane; ++j) out[i * plane + j] = scale[i % c] * x[i * plane + j] + shift[i % c];
    }
    detail::require_finite(out, "normalize");
    if (tape.wants({&x, &gamma, &beta})) {
      Tensor rm = state->running_mean.clone(), rv = state->running_var.clone();
      tape.record(out, [x, gamma, beta, out, rm, rv, scale, n, c, plane, eps = spec.eps]() mutable {
        if (!out.has_grad()) return;
        auto go = out.grad();
        for (std::size_t i = 0; i < n * c; ++i) {
          const std::size_t ch = i % c;
          const double inv = 1.0 / std::sqrt(rv[ch] + eps);
          for (std::size_t j = 0; j < plane; ++j) {
            const std::size_t e = i * plane + j;
            if (x.requires_grad()) x.grad()[e] += go[e] * scale[ch];
            if (gamma.requires_grad()) gamma.grad()[ch] += go[e] * (x[e] - rm[ch]) * inv;
            if (beta.requires_grad()) beta.grad()[ch] += go[e];
          }
        }
      });
    }
    return out;
  }

  // Statistic groups as lists of contiguous (offset, length) segments.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> stat_groups;
  if (spec.mode == NormMode::batch) {
    stat_groups.resize(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t b = 0; b < n; ++b) stat_groups[ch].emplace_back((b * c + ch) * plane, plane);
    }
  } else {
    const std::size_t cpg = c / spec.groups;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t g = 0; g < spec.groups; ++g) stat_groups.push_back({{(b * c + g * cpg) * plane, cpg * plane}});
    }
  }

  Tensor xhat(x.shape());
  std::vector<double> inv_std(stat_groups.size());
  std::vector<double> batch_mean(c), batch_var(c);
  for (std::size_t gi = 0; gi < stat_groups.size(); ++gi) {
    std::size_t count = 0;
    double mean = 0.0;
    for (auto [off, len] : stat_groups[gi]) {
      for (std::size_t j = 0; j < len; ++j) mean += x[off + j];
      count += len;
    }
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (auto [off, len] : stat_groups[gi]) {
      for (std::size_t j = 0; j < len; ++j) var += (x[off + j] - mean) * (x[off + j] - mean);
    }
    var /= static_cast<double>(count);
    inv_std[gi] = 1.0 / std::sqrt(var + spec.eps);
    for (auto [off, len] : stat_groups[gi]) {
      for (std::size_t j = 0; j < len; ++j) xhat[off + j] = (x[off + j] - mean) * inv_std[gi];
    }
    if (spec.mode == NormMode::batch) {
      batch_mean[gi] = mean;
      batch_var[gi] = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
    }
  }
  for (std::size_t i = 0; i < n * c; ++i) {
    for (std::size_t j = 0; j < plane; ++j) {
      out[i * plane + j] = gamma[i % c] * xhat[i * plane + j] + beta[i % c];
    }
  }
  detail::require_finite(out, "normalize");
  if (spec.mode == NormMode::batch && state) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      state->running_mean[ch] = (1 - spec.momentum) * state->running_mean[ch] + spec.momentum * batch_mean[ch];
      state->running_var[ch] = (1 - spec.momentum) * state->running_var[ch] + spec.momentum * batch_var[ch];
    }
  }
  if (tape.wants({&x, &gamma, &beta})) {
    tape.record(out, [x, gamma, beta, out, xhat, inv_std, stat_groups = std::move(stat_groups), c, plane]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto channel_of = [&](std::size_t e) { return (e / plane) % c; };
      if (gamma.requires_grad() || beta.requires_grad()) {
        for (std::size_t e = 0; e < go.size(); ++e) {
          if (gamma.requires_grad()) gamma.grad()[channel_of(e)] += go[e] * xhat[e];
          if (beta.requires_grad()) beta.grad()[channel_of(e)] += go[e];
        }
      }
      if (!x.requires_grad()) return;
      auto gx = x.grad();
      for (std::size_t gi = 0; gi < stat_groups.size(); ++gi) {
        double m1 = 0.0, m2 = 0.0;
        std::size_t count = 0;
        for (auto [off, len] : stat_groups[gi]) {
          for (std::size_t j = 0; j < len; ++j) {
            const double dxh = go[off + j] * gamma[channel_of(off + j)];
            m1 += dxh;
            m2 += dxh * xhat[off + j];
          }
          count += len;
        }
        m1 /= static_cast<double>(count);
        m2 /= static_cast<double>(count);
        for (auto [off, len] : stat_groups[gi]) {
          for (std::size_t j = 0; j < len; ++j) {
            const double dxh = go[off + j] * gamma[channel_of(off + j)];
            gx[off + j] += inv_std[gi] * (dxh - m1 - xhat[off + j] * m2);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace hknas
