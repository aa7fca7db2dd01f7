#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hknas/conv.hpp"
#include "hknas/hyperkernel.hpp"
#include "hknas/ops.hpp"

namespace hknas {

/// Operation family of a searchable layer position.
///
/// conv1d is the edge of the spectral-vector network: one standard 1-D hyper
/// kernel over (batch, channels, length). The other four are the 3-D forms
/// acting on (batch, channels, height, width) features, with the channel axis
/// serving as the spectral/depth axis.
enum class Form { conv1d, conv3d, serial_1d_2ddw, serial_2ddw_1d, parallel_1d_2ddw };

inline const char* to_string(Form f) {
  switch (f) {
    case Form::conv1d: return "conv1d";
    case Form::conv3d: return "conv3d";
    case Form::serial_1d_2ddw: return "serial_1d_2ddw";
    case Form::serial_2ddw_1d: return "serial_2ddw_1d";
    case Form::parallel_1d_2ddw: return "parallel_1d_2ddw";
  }
  return "?";
}

inline Form parse_form(const std::string& s) {
  for (Form f : {Form::conv1d, Form::conv3d, Form::serial_1d_2ddw, Form::serial_2ddw_1d, Form::parallel_1d_2ddw}) {
    if (s == to_string(f)) return f;
  }
  throw std::invalid_argument("unknown form '" + s + "'");
}

inline bool is_pair_form(Form f) { return f == Form::serial_1d_2ddw || f == Form::serial_2ddw_1d || f == Form::parallel_1d_2ddw; }
inline bool is_serial_form(Form f) { return f == Form::serial_1d_2ddw || f == Form::serial_2ddw_1d; }

enum class AlphaMode { hyper, free };

inline const char* to_string(AlphaMode m) { return m == AlphaMode::hyper ? "hyper" : "free"; }

inline AlphaMode parse_alpha_mode(const std::string& s) {
  if (s == "hyper") return AlphaMode::hyper;
  if (s == "free") return AlphaMode::free;
  throw std::invalid_argument("unknown alpha mode '" + s + "'");
}

namespace detail {

// How a kernel tensor is applied to the edge's features.
enum class KernelRole {
  sequence,  // standard 1-D over (N, C, L), weight (C, C, k)
  spectral,  // single-channel 1-D along the channel axis of (N, C, H, W), weight (1, 1, k)
  spatial,   // depthwise 2-D over (N, C, H, W), weight (C, 1, k, k)
  volume,    // single-volume 3-D over (N, C, H, W) with C as depth, weight (1, 1, k, k, k)
};

inline Tensor apply_kernel(Tape& tape, const Tensor& x, const Tensor& w, KernelRole role) {
  const std::size_t k = w.dim(2);
  switch (role) {
    case KernelRole::sequence:
      return convolve(tape, x, w, ConvSpec::standard(1, k));
    case KernelRole::spatial:
      return convolve(tape, x, w, ConvSpec::depthwise2d(k));
    case KernelRole::spectral:
    case KernelRole::volume: {
      if (x.rank() != 4) throw ShapeError("3-D edge expects (batch, channels, height, width), got " + shape_str(x.shape()));
      const Shape vol{x.dim(0), 1, x.dim(1), x.dim(2), x.dim(3)};
      Tensor xv = reshape(tape, x, vol);
      Tensor y;
      if (role == KernelRole::spectral) {
        Tensor wv = reshape(tape, w, Shape{1, 1, k, 1, 1});
        y = convolve(tape, xv, wv, ConvSpec::standard3d(k, 1, 1));
      } else {
        y = convolve(tape, xv, w, ConvSpec::standard(3, k));
      }
      return reshape(tape, y, x.shape());
    }
  }
  throw std::logic_error("unreachable");
}

inline std::vector<KernelRole> roles_of(Form f) {
  switch (f) {
    case Form::conv1d: return {KernelRole::sequence};
    case Form::conv3d: return {KernelRole::volume};
    default: return {KernelRole::spectral, KernelRole::spatial};
  }
}

// Applies per-kernel operators following the form's composition.
template <class ApplyFn>
Tensor compose_form(Tape& tape, Form form, const Tensor& x, ApplyFn&& apply) {
  switch (form) {
    case Form::conv1d:
    case Form::conv3d: return apply(0, x);
    case Form::serial_1d_2ddw: return apply(1, apply(0, x));
    case Form::serial_2ddw_1d: return apply(0, apply(1, x));
    case Form::parallel_1d_2ddw: return add(tape, apply(0, x), apply(1, x));
  }
  throw std::logic_error("unreachable");
}

}  // namespace detail

/// Index of the largest value; ties go to the smallest index.
inline std::size_t argmax_first(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Selected candidate per kernel, 1-based: s selects extent 2s+1.
/// Pair forms list (1-D index, 2-D depthwise index).
struct DerivedOp {
  Form form = Form::conv1d;
  std::vector<std::size_t> indices;

  bool operator==(const DerivedOp&) const = default;
};

/// A searchable edge: softmax-weighted mixture of the candidate convolutions
/// that its hyper kernels contain.
struct MixedEdge {
  Form form = Form::conv1d;
  AlphaMode alpha_mode = AlphaMode::hyper;
  std::vector<HyperKernel> kernels;  // pair forms: {spectral 1-D, depthwise 2-D}
  std::vector<Tensor> free_alpha;    // free mode only, one per kernel

  /// Edge for `channels` feature channels with hyper kernels of extent `size`.
  static MixedEdge make(Form form, std::size_t channels, std::size_t size, AlphaMode mode, Rng& rng) {
    MixedEdge e;
    e.form = form;
    e.alpha_mode = mode;
    switch (form) {
      case Form::conv1d:
        e.kernels.push_back(HyperKernel::standard(1, size, channels, channels, rng));
        break;
      case Form::conv3d:
        e.kernels.push_back(HyperKernel::standard(3, size, 1, 1, rng));
        break;
      default:
        e.kernels.push_back(HyperKernel::standard(1, size, 1, 1, rng));
        e.kernels.push_back(HyperKernel::depthwise(channels, size, rng));
        break;
    }
    if (mode == AlphaMode::free) {
      for (const auto& k : e.kernels) {
        Tensor a(Shape{k.candidates()}, 0.0);
        a.set_requires_grad(true);
        e.free_alpha.push_back(a);
      }
    }
    e.validate();
    return e;
  }

  void validate() const {
    const std::size_t want = is_pair_form(form) ? 2 : 1;
    if (kernels.size() != want) throw std::invalid_argument(std::string("form ") + to_string(form) + " needs " + std::to_string(want) + " hyper kernels");
    const auto roles = detail::roles_of(form);
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      const auto& k = kernels[i];
      const bool ok = [&] {
        switch (roles[i]) {
          case detail::KernelRole::sequence: return k.kind == KernelKind::standard && k.dims() == 1;
          case detail::KernelRole::spectral: return k.kind == KernelKind::standard && k.dims() == 1 && k.channel_pairs() == 1;
          case detail::KernelRole::spatial: return k.kind == KernelKind::depthwise && k.dims() == 2;
          case detail::KernelRole::volume: return k.kind == KernelKind::standard && k.dims() == 3 && k.channel_pairs() == 1;
        }
        return false;
      }();
      if (!ok) throw std::invalid_argument(std::string("hyper kernel ") + std::to_string(i) + " does not fit form " + to_string(form));
    }
    if (alpha_mode == AlphaMode::free) {
      if (free_alpha.size() != kernels.size()) throw std::invalid_argument("free alpha mode needs one alpha vector per kernel");
      for (std::size_t i = 0; i < kernels.size(); ++i) {
        if (free_alpha[i].shape() != Shape{kernels[i].candidates()}) throw std::invalid_argument("free alpha length must equal candidate count");
      }
    }
  }

  /// Structural parameters of kernel i: derived from the hyper kernel, or the free vector.
  Tensor alpha(Tape& tape, std::size_t i) const {
    return alpha_mode == AlphaMode::hyper ? structural_params(tape, kernels.at(i)) : free_alpha.at(i);
  }

  std::vector<double> alpha_values(std::size_t i) const {
    Tape off(false);
    return alpha(off, i).values();
  }

  Tensor forward(Tape& tape, const Tensor& x) const {
    const auto roles = detail::roles_of(form);
    std::vector<Tensor> eff;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      Tensor p = softmax(tape, alpha(tape, i));
      eff.push_back(mix_subkernels(tape, kernels[i], p));
    }
    return detail::compose_form(tape, form, x, [&](std::size_t i, const Tensor& in) {
      return detail::apply_kernel(tape, in, eff[i], roles[i]);
    });
  }

  std::size_t channels() const { return kernels.back().weights.dim(0); }
};

inline DerivedOp derive(const MixedEdge& edge) {
  DerivedOp op{edge.form, {}};
  for (std::size_t i = 0; i < edge.kernels.size(); ++i) {
    const auto a = edge.alpha_values(i);
    op.indices.push_back(argmax_first(a) + 1);
  }
  return op;
}

/// A fixed (derived) edge: plain convolutions of the selected extents.
struct FixedEdge {
  DerivedOp op;
  std::vector<Tensor> weights;

  Tensor forward(Tape& tape, const Tensor& x) const {
    const auto roles = detail::roles_of(op.form);
    return detail::compose_form(tape, op.form, x, [&](std::size_t i, const Tensor& in) {
      return detail::apply_kernel(tape, in, weights[i], roles[i]);
    });
  }
};

/// Fresh convolution weights of the selected extents, uniform in ±1/sqrt(fan_in).
inline FixedEdge instantiate(const DerivedOp& op, std::size_t channels, Rng& rng) {
  const auto roles = detail::roles_of(op.form);
  if (op.indices.size() != roles.size()) throw std::invalid_argument(std::string("form ") + to_string(op.form) + " needs " + std::to_string(roles.size()) + " indices");
  FixedEdge fe{op, {}};
  for (std::size_t i = 0; i < roles.size(); ++i) {
    if (op.indices[i] < 1) throw std::out_of_range("derived indices are 1-based");
    const std::size_t k = 2 * op.indices[i] + 1;
    Shape shape;
    switch (roles[i]) {
      case detail::KernelRole::sequence: shape = {channels, channels, k}; break;
      case detail::KernelRole::spectral: shape = {1, 1, k}; break;
      case detail::KernelRole::spatial: shape = {channels, 1, k, k}; break;
      case detail::KernelRole::volume: shape = {1, 1, k, k, k}; break;
    }
    Tensor w(shape);
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape_numel(shape) / shape[0]));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : w.data()) v = u(rng);
    w.set_requires_grad(true);
    fe.weights.push_back(w);
  }
  return fe;
}

inline FixedEdge instantiate(const DerivedOp& op, const MixedEdge& edge, Rng& rng) {
  if (op.form != edge.form) throw std::invalid_argument("derived op form does not match the edge");
  for (std::size_t i = 0; i < op.indices.size(); ++i) {
    if (op.indices[i] > edge.kernels.at(i).candidates()) throw std::out_of_range("derived index beyond candidate count");
  }
  return instantiate(op, edge.channels(), rng);
}

}  // namespace hknas
