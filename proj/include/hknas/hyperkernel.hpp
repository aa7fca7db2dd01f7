#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hknas/tensor.hpp"

namespace hknas {

using Rng = std::mt19937_64;

/// Binary masks over an S^d footprint for the centered sub kernels of extent 2s+1.
///
/// Index s runs 1..floor(S/2). masks[s-1] marks the whole sub-kernel footprint,
/// core_masks[s-1] only the shell it adds over sub kernel s-1 (the whole 3^d
/// block for s = 1).
struct MaskSet {
  std::size_t size = 0;
  std::size_t dims = 0;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<std::vector<std::uint8_t>> core_masks;
  std::vector<std::size_t> shell;  // per footprint position: the s whose core area contains it

  std::size_t candidates() const { return masks.size(); }
  std::size_t footprint() const { return shell.size(); }

  std::size_t ones(std::size_t s) const { return count(masks.at(s - 1)); }
  std::size_t core_ones(std::size_t s) const { return count(core_masks.at(s - 1)); }

 private:
  static std::size_t count(const std::vector<std::uint8_t>& m) {
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
  }
};

inline MaskSet make_masks(std::size_t size, std::size_t dims) {
  if (size < 3 || size % 2 == 0) {
    throw std::invalid_argument("hyper kernel size must be odd and >= 3, got " + std::to_string(size));
  }
  if (dims < 1 || dims > 3) throw std::invalid_argument("hyper kernel dims must be 1, 2 or 3");
  MaskSet m;
  m.size = size;
  m.dims = dims;
  const std::size_t half = size / 2;
  std::size_t total = 1;
  for (std::size_t a = 0; a < dims; ++a) total *= size;

  m.shell.resize(total);
  for (std::size_t p = 0; p < total; ++p) {
    std::size_t rest = p, radius = 0;
    for (std::size_t a = 0; a < dims; ++a) {
      const auto coord = static_cast<std::ptrdiff_t>(rest % size);
      rest /= size;
      radius = std::max(radius, static_cast<std::size_t>(std::abs(coord - static_cast<std::ptrdiff_t>(half))));
    }
    m.shell[p] = std::max<std::size_t>(radius, 1);
  }
  m.masks.assign(half, std::vector<std::uint8_t>(total, 0));
  m.core_masks.assign(half, std::vector<std::uint8_t>(total, 0));
  for (std::size_t s = 1; s <= half; ++s) {
    for (std::size_t p = 0; p < total; ++p) {
      m.masks[s - 1][p] = m.shell[p] <= s ? 1 : 0;
      m.core_masks[s - 1][p] = m.shell[p] == s ? 1 : 0;
    }
  }
  return m;
}

/// Process-wide cache; mask sets are immutable once built.
inline std::shared_ptr<const MaskSet> shared_masks(std::size_t size, std::size_t dims) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, std::shared_ptr<const MaskSet>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{size, dims}];
  if (!slot) slot = std::make_shared<const MaskSet>(make_masks(size, dims));
  return slot;
}

enum class KernelKind { standard, depthwise };

/// Over-parameterized convolution weight of extent S on every spatial axis.
///
/// Layout (out, in, S...) for standard kernels and (channels, 1, S, S) for
/// depthwise ones.
struct HyperKernel {
  KernelKind kind = KernelKind::standard;
  Tensor weights;
  std::shared_ptr<const MaskSet> masks;

  std::size_t dims() const { return masks->dims; }
  std::size_t size() const { return masks->size; }
  std::size_t candidates() const { return masks->candidates(); }
  std::size_t channel_pairs() const { return weights.dim(0) * weights.dim(1); }

  /// Standard-normal initialization.
  static HyperKernel standard(std::size_t dims, std::size_t size, std::size_t out, std::size_t in, Rng& rng) {
    Shape shape{out, in};
    shape.insert(shape.end(), dims, size);
    return make(KernelKind::standard, dims, size, std::move(shape), rng);
  }

  static HyperKernel depthwise(std::size_t channels, std::size_t size, Rng& rng) {
    return make(KernelKind::depthwise, 2, size, Shape{channels, 1, size, size}, rng);
  }

  static HyperKernel from_weights(KernelKind kind, std::size_t dims, Tensor weights) {
    if (weights.rank() != dims + 2) throw ShapeError("hyper kernel weights must have rank dims + 2");
    const std::size_t size = weights.dim(2);
    for (std::size_t a = 2; a < weights.rank(); ++a) {
      if (weights.dim(a) != size) throw ShapeError("hyper kernel footprint must be S on every spatial axis");
    }
    if (kind == KernelKind::depthwise && (dims != 2 || weights.dim(1) != 1)) {
      throw ShapeError("depthwise hyper kernels are (channels, 1, S, S)");
    }
    HyperKernel k;
    k.kind = kind;
    k.masks = shared_masks(size, dims);
    k.weights = std::move(weights);
    return k;
  }

 private:
  static HyperKernel make(KernelKind kind, std::size_t dims, std::size_t size, Shape shape, Rng& rng) {
    HyperKernel k;
    k.kind = kind;
    k.masks = shared_masks(size, dims);
    k.weights = Tensor(std::move(shape));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : k.weights.data()) v = normal(rng);
    k.weights.set_requires_grad(true);
    return k;
  }
};

/// K masked by m_s: same shape as K, zero outside the centered (2s+1)^d block.
inline Tensor extract_subkernel(const HyperKernel& k, std::size_t s) {
  if (s < 1 || s > k.candidates()) {
    throw std::out_of_range("sub kernel index " + std::to_string(s) + " outside 1.." + std::to_string(k.candidates()));
  }
  const auto& mask = k.masks->masks[s - 1];
  const std::size_t fp = mask.size();
  Tensor out(k.weights.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mask[i % fp] ? k.weights[i] : 0.0;
  return out;
}

/// Centered crop of the trailing `dims` axes of w (each of extent S) to `extent`.
inline Tensor crop_center(const Tensor& w, std::size_t dims, std::size_t extent) {
  const std::size_t lead_axes = w.rank() - dims;
  const std::size_t size = w.dim(lead_axes);
  if (extent > size || extent % 2 == 0) throw std::invalid_argument("crop extent must be odd and <= kernel extent");
  const std::size_t off = (size - extent) / 2;
  Shape shape(w.shape().begin(), w.shape().begin() + static_cast<std::ptrdiff_t>(lead_axes));
  std::size_t lead = shape_numel(shape), fp_in = 1, fp_out = 1;
  shape.insert(shape.end(), dims, extent);
  for (std::size_t a = 0; a < dims; ++a) fp_in *= size, fp_out *= extent;
  Tensor out(shape);
  for (std::size_t l = 0; l < lead; ++l) {
    for (std::size_t q = 0; q < fp_out; ++q) {
      std::size_t rest = q, src = 0, stride = 1;
      for (std::size_t a = 0; a < dims; ++a) {
        src += (rest % extent + off) * stride;
        rest /= extent;
        stride *= size;
      }
      out[l * fp_out + q] = w[l * fp_in + src];
    }
  }
  return out;
}

/// Structural parameters: per candidate, the mean of K over its core area
/// and over every channel pair. Differentiable w.r.t. K.weights.
inline Tensor structural_params(Tape& tape, const HyperKernel& k) {
  const auto& m = *k.masks;
  const std::size_t n = m.candidates(), fp = m.footprint();
  std::vector<double> denom(n);
  for (std::size_t s = 1; s <= n; ++s) {
    denom[s - 1] = static_cast<double>(m.core_ones(s) * k.channel_pairs());
  }
  Tensor alpha(Shape{n});
  const Tensor& w = k.weights;
  for (std::size_t i = 0; i < w.numel(); ++i) alpha[m.shell[i % fp] - 1] += w[i];
  for (std::size_t s = 0; s < n; ++s) alpha[s] /= denom[s];
  detail::require_finite(alpha, "structural_params");
  if (tape.wants({&w})) {
    tape.record(alpha, [w = k.weights, alpha, denom, masks = k.masks]() mutable {
      if (!alpha.has_grad()) return;
      auto ga = alpha.grad();
      auto gw = w.grad();
      const std::size_t fp = masks->footprint();
      for (std::size_t i = 0; i < gw.size(); ++i) {
        const std::size_t s = masks->shell[i % fp] - 1;
        gw[i] += ga[s] / denom[s];
      }
    });
  }
  return alpha;
}

inline std::vector<double> structural_params(const HyperKernel& k) {
  Tape off(false);
  return structural_params(off, k).values();
}

/// Effective kernel sum_s p_s * (K ⊙ m_s) for mixture weights p.
///
/// By linearity of convolution, convolving with this kernel equals the
/// p-weighted sum of the candidate convolutions.
inline Tensor mix_subkernels(Tape& tape, const HyperKernel& k, const Tensor& p) {
  const auto& m = *k.masks;
  const std::size_t n = m.candidates(), fp = m.footprint();
  if (p.shape() != Shape{n}) throw ShapeError("mix_subkernels: expected " + std::to_string(n) + " mixture weights");
  // Position with shell r is inside every sub kernel s >= r.
  std::vector<double> tail(n + 1, 0.0);
  for (std::size_t s = n; s >= 1; --s) tail[s - 1] = tail[s] + p[s - 1];
  std::vector<double> coef(fp);
  for (std::size_t q = 0; q < fp; ++q) coef[q] = tail[m.shell[q] - 1];

  const Tensor& w = k.weights;
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) out[i] = w[i] * coef[i % fp];
  detail::require_finite(out, "mix_subkernels");
  if (tape.wants({&w, &p})) {
    tape.record(out, [w = k.weights, p, out, coef = std::move(coef), masks = k.masks, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      const std::size_t fp = masks->footprint();
      if (w.requires_grad()) {
        auto gw = w.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gw[i] += go[i] * coef[i % fp];
      }
      if (p.requires_grad()) {
        // d out / d p_s = K ⊙ m_s, so accumulate per shell and sum over s >= shell.
        std::vector<double> per_shell(n, 0.0);
        for (std::size_t i = 0; i < go.size(); ++i) per_shell[masks->shell[i % fp] - 1] += go[i] * w[i];
        auto gp = p.grad();
        double running = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          running += per_shell[s];
          gp[s] += running;
        }
      }
    });
  }
  return out;
}

}  // namespace hknas
