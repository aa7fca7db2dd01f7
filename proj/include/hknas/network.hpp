#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "hknas/architecture.hpp"
#include "hknas/errors.hpp"
#include "hknas/mixedop.hpp"
#include "hknas/ops.hpp"

namespace hknas {

enum class NetworkKind { cls1d, cls3d, seg3d };

inline const char* to_string(NetworkKind k) {
  switch (k) {
    case NetworkKind::cls1d: return "cls1d";
    case NetworkKind::cls3d: return "cls3d";
    case NetworkKind::seg3d: return "seg3d";
  }
  return "?";
}

inline NetworkKind parse_network_kind(const std::string& s) {
  if (s == "cls1d") return NetworkKind::cls1d;
  if (s == "cls3d") return NetworkKind::cls3d;
  if (s == "seg3d") return NetworkKind::seg3d;
  throw ConfigError("unknown network kind '" + s + "' (cls1d, cls3d, seg3d)");
}

/// Macro skeleton of one of the three network families.
struct NetworkTemplate {
  NetworkKind kind = NetworkKind::cls1d;
  std::size_t blocks = 1;  // M
  std::size_t layers = 1;  // N
  std::size_t bands = 1;
  std::size_t classes = 2;
  Form form = Form::conv1d;  // conv1d for cls1d, one of the 3-D forms otherwise
  std::size_t initial_channels = 64;
  std::size_t hyper_size = 9;
  std::size_t stem_length = 96;  // cls1d only
  std::size_t norm_groups = 8;   // seg3d only
  AlphaMode alpha_mode = AlphaMode::hyper;

  std::size_t spatial_axes() const { return kind == NetworkKind::cls1d ? 1 : 2; }

  NormSpec norm_spec() const {
    return kind == NetworkKind::seg3d ? NormSpec{NormMode::group, norm_groups} : NormSpec{NormMode::batch, 1};
  }

  /// Block indices (0-based) followed by factor-2 pooling and channel doubling.
  std::vector<std::size_t> downsample_after() const {
    std::vector<std::size_t> out;
    switch (kind) {
      case NetworkKind::cls1d: {
        std::set<std::size_t> at;
        for (std::size_t q = 1; q <= 3; ++q) {
          const std::size_t b = q * blocks / 4;  // boundary after block b (1-based)
          if (b >= 1 && b < blocks) at.insert(b - 1);
        }
        out.assign(at.begin(), at.end());
        break;
      }
      case NetworkKind::cls3d:
        for (std::size_t b = 0; b < blocks; ++b) out.push_back(b);
        break;
      case NetworkKind::seg3d:
        out.push_back(0);
        break;
    }
    return out;
  }

  /// Channel width of each block.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w(blocks);
    std::size_t c = initial_channels;
    const auto ds = downsample_after();
    for (std::size_t b = 0; b < blocks; ++b) {
      w[b] = c;
      if (std::find(ds.begin(), ds.end(), b) != ds.end()) c *= 2;
    }
    return w;
  }

  std::size_t output_channels() const {
    const auto ds = downsample_after();
    std::size_t c = initial_channels;
    for (std::size_t i = 0; i < ds.size(); ++i) c *= 2;
    return c;
  }

  void validate() const {
    if (blocks < 1 || layers < 1) throw ConfigError("block and layer counts must be >= 1");
    if (bands < 1 || classes < 1) throw ConfigError("bands and classes must be >= 1");
    if (kind == NetworkKind::cls3d && blocks != 3) throw ConfigError("cls3d requires exactly 3 blocks");
    if (kind == NetworkKind::cls1d && form != Form::conv1d) throw ConfigError("cls1d uses the conv1d form");
    if (kind != NetworkKind::cls1d && form == Form::conv1d) throw ConfigError(std::string(to_string(kind)) + " needs a 3-D form");
    if (initial_channels < 4 || initial_channels % 4 != 0) throw ConfigError("initial channels must be a positive multiple of 4");
    if (hyper_size < 3 || hyper_size % 2 == 0) throw ConfigError("hyper kernel size must be odd and >= 3");
    if (kind == NetworkKind::seg3d && (norm_groups == 0 || (initial_channels / 4) % norm_groups != 0)) {
      throw ConfigError("seg3d edge width " + std::to_string(initial_channels / 4) + " is not divisible into " +
                        std::to_string(norm_groups) + " normalization groups");
    }
  }
};

enum class Dataset { indian_pines, pavia_university, kennedy_space_center, salinas_valley, whu_hanchuan, whu_honghu };

/// Block/layer counts and 3-D form selected per dataset in the published experiments.
inline NetworkTemplate published_template(NetworkKind kind, Dataset ds) {
  struct Row {
    std::size_t m1, n1, n3;
    Form cls3d_form, seg3d_form;
    std::size_t n_seg;
  };
  auto row = [&]() -> Row {
    switch (ds) {
      case Dataset::indian_pines: return {6, 5, 4, Form::conv3d, Form::conv3d, 1};
      case Dataset::pavia_university: return {4, 1, 2, Form::parallel_1d_2ddw, Form::serial_1d_2ddw, 1};
      case Dataset::kennedy_space_center: return {3, 2, 2, Form::conv3d, Form::serial_1d_2ddw, 1};
      case Dataset::salinas_valley: return {4, 1, 2, Form::conv3d, Form::conv3d, 1};
      case Dataset::whu_hanchuan: return {3, 3, 2, Form::parallel_1d_2ddw, Form::conv3d, 1};
      case Dataset::whu_honghu: return {3, 1, 3, Form::parallel_1d_2ddw, Form::conv3d, 1};
    }
    throw std::logic_error("unreachable");
  }();
  NetworkTemplate t;
  t.kind = kind;
  switch (kind) {
    case NetworkKind::cls1d: t.blocks = row.m1, t.layers = row.n1, t.form = Form::conv1d; break;
    case NetworkKind::cls3d: t.blocks = 3, t.layers = row.n3, t.form = row.cls3d_form; break;
    case NetworkKind::seg3d: t.blocks = 3, t.layers = row.n_seg, t.form = row.seg3d_form; break;
  }
  return t;
}

enum class ParamRole { weight, norm, alpha, buffer };

/// A named model tensor. Only `weight` tensors receive weight decay; buffers are not trained.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  ParamRole role;
};

struct NormLayer {
  NormSpec spec;
  Tensor gamma;
  Tensor beta;
  NormState state;

  NormLayer(NormSpec s, std::size_t channels)
      : spec(s), gamma(Shape{channels}, 1.0), beta(Shape{channels}, 0.0), state(channels) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor forward(Tape& tape, const Tensor& x, bool training) {
    return normalize(tape, x, spec, gamma, beta, &state, training);
  }
};

/// Bottleneck residual layer: squeeze to C/4, edge, norm + ReLU, expand to C, add input.
struct Layer {
  Tensor squeeze;  // (C/4, C)
  std::variant<MixedEdge, FixedEdge> edge;
  NormLayer norm;
  Tensor expand;  // (C, C/4)

  Tensor forward(Tape& tape, const Tensor& x, bool training) {
    Tensor h = convolve(tape, x, squeeze, ConvSpec::pointwise());
    h = std::visit([&](const auto& e) { return e.forward(tape, h); }, edge);
    h = norm.forward(tape, h, training);
    h = relu(tape, h);
    h = convolve(tape, h, expand, ConvSpec::pointwise());
    return add(tape, x, h);
  }
};

struct Block {
  std::optional<Tensor> entry;  // cls1d first block: lifts the single stem channel to C
  std::vector<Layer> layers;
  bool downsample = false;
  std::optional<Tensor> widen;  // (2C, C) after pooling
};

enum class ModelMode { search, derived };

namespace detail {

inline Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.data()) v = u(rng);
  t.set_requires_grad(true);
  return t;
}

}  // namespace detail

/// Hierarchical blocks x layers network in search mode (mixed edges) or
/// derived mode (fixed edges).
class NetworkModel {
 public:
  NetworkTemplate tmpl;
  ModelMode mode = ModelMode::search;
  Tensor stem_weight;  // cls1d: (96, B) linear; 3-D kinds: (C0, B) pointwise
  std::optional<Tensor> stem_bias;
  std::vector<Block> blocks;
  Tensor head_weight;  // (K, C_out)
  Tensor head_bias;    // (K)

  /// Model input for a batch: cls1d (N, B); cls3d (N, B, P, P); seg3d (1, B, H, W).
  /// Returns logits (N, K) or a (1, K, H, W) map.
  Tensor forward(Tape& tape, const Tensor& input, bool training) {
    check_input(input);
    const std::size_t n = input.dim(0);
    Tensor x;
    if (tmpl.kind == NetworkKind::cls1d) {
      x = linear(tape, input, stem_weight, *stem_bias);
      x = reshape(tape, x, Shape{n, 1, tmpl.stem_length});
    } else {
      x = convolve(tape, input, stem_weight, ConvSpec::pointwise());
    }
    for (auto& b : blocks) {
      if (b.entry) x = convolve(tape, x, *b.entry, ConvSpec::pointwise());
      for (auto& l : b.layers) x = l.forward(tape, x, training);
      if (b.downsample) {
        x = pool_avg(tape, x, 2, tmpl.spatial_axes());
        x = convolve(tape, x, *b.widen, ConvSpec::pointwise());
      }
    }
    if (tmpl.kind == NetworkKind::seg3d) {
      x = convolve(tape, x, head_weight, ConvSpec::pointwise());
      x = add_channel_bias(tape, x, head_bias);
      return upsample_bilinear(tape, x, input.dim(2), input.dim(3));
    }
    x = global_avg(tape, x, tmpl.spatial_axes());
    x = reshape(tape, x, Shape{n, x.dim(1)});
    return linear(tape, x, head_weight, head_bias);
  }

  /// Every persistent tensor with a stable, topology-describing name.
  std::vector<NamedTensor> tensors() const {
    std::vector<NamedTensor> out;
    out.push_back({"stem.weight", stem_weight, ParamRole::weight});
    if (stem_bias) out.push_back({"stem.bias", *stem_bias, ParamRole::weight});
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const auto& b = blocks[bi];
      const std::string bp = "block" + std::to_string(bi) + ".";
      if (b.entry) out.push_back({bp + "entry.weight", *b.entry, ParamRole::weight});
      for (std::size_t li = 0; li < b.layers.size(); ++li) {
        const auto& l = b.layers[li];
        const std::string lp = bp + "layer" + std::to_string(li) + ".";
        out.push_back({lp + "squeeze.weight", l.squeeze, ParamRole::weight});
        if (const auto* me = std::get_if<MixedEdge>(&l.edge)) {
          for (std::size_t k = 0; k < me->kernels.size(); ++k) {
            out.push_back({lp + "edge.hyper" + std::to_string(k), me->kernels[k].weights, ParamRole::weight});
          }
          for (std::size_t k = 0; k < me->free_alpha.size(); ++k) {
            out.push_back({lp + "edge.alpha" + std::to_string(k), me->free_alpha[k], ParamRole::alpha});
          }
        } else {
          const auto& fe = std::get<FixedEdge>(l.edge);
          for (std::size_t k = 0; k < fe.weights.size(); ++k) {
            out.push_back({lp + "edge.fixed" + std::to_string(k), fe.weights[k], ParamRole::weight});
          }
        }
        out.push_back({lp + "norm.gamma", l.norm.gamma, ParamRole::norm});
        out.push_back({lp + "norm.beta", l.norm.beta, ParamRole::norm});
        if (l.norm.spec.mode == NormMode::batch) {
          out.push_back({lp + "norm.running_mean", l.norm.state.running_mean, ParamRole::buffer});
          out.push_back({lp + "norm.running_var", l.norm.state.running_var, ParamRole::buffer});
        }
        out.push_back({lp + "expand.weight", l.expand, ParamRole::weight});
      }
      if (b.widen) out.push_back({bp + "widen.weight", *b.widen, ParamRole::weight});
    }
    out.push_back({"head.weight", head_weight, ParamRole::weight});
    out.push_back({"head.bias", head_bias, ParamRole::weight});
    return out;
  }

  /// Number of trainable scalars (buffers excluded).
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) {
      if (t.role != ParamRole::buffer) n += t.tensor.numel();
    }
    return n;
  }

  template <class Fn>
  void for_each_mixed_edge(Fn&& fn) const {
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      for (std::size_t li = 0; li < blocks[bi].layers.size(); ++li) {
        if (const auto* me = std::get_if<MixedEdge>(&blocks[bi].layers[li].edge)) fn(bi, li, *me);
      }
    }
  }

 private:
  void check_input(const Tensor& input) const {
    const auto& s = input.shape();
    auto fail = [&](const std::string& want) {
      throw ShapeError(std::string(to_string(tmpl.kind)) + " input must be " + want + ", got " + shape_str(s));
    };
    switch (tmpl.kind) {
      case NetworkKind::cls1d:
        if (s.size() != 2 || s[1] != tmpl.bands) fail("(batch, " + std::to_string(tmpl.bands) + ")");
        break;
      case NetworkKind::cls3d:
        if (s.size() != 4 || s[1] != tmpl.bands) fail("(batch, " + std::to_string(tmpl.bands) + ", P, P)");
        break;
      case NetworkKind::seg3d:
        if (s.size() != 4 || s[0] != 1 || s[1] != tmpl.bands) fail("(1, " + std::to_string(tmpl.bands) + ", H, W)");
        break;
    }
  }
};

namespace detail {

// Shared skeleton; make_edge(block, layer, edge_channels) supplies each edge.
template <class EdgeFn>
NetworkModel assemble(const NetworkTemplate& t, ModelMode mode, Rng& rng, EdgeFn&& make_edge) {
  t.validate();
  NetworkModel m;
  m.tmpl = t;
  m.mode = mode;
  const std::size_t c0 = t.initial_channels;
  if (t.kind == NetworkKind::cls1d) {
    m.stem_weight = uniform_fan_in(Shape{t.stem_length, t.bands}, t.bands, rng);
    m.stem_bias = uniform_fan_in(Shape{t.stem_length}, t.bands, rng);
  } else {
    m.stem_weight = uniform_fan_in(Shape{c0, t.bands}, t.bands, rng);
  }
  const auto ds = t.downsample_after();
  const auto widths = t.widths();
  for (std::size_t bi = 0; bi < t.blocks; ++bi) {
    Block b;
    const std::size_t c = widths[bi];
    if (bi == 0 && t.kind == NetworkKind::cls1d) b.entry = uniform_fan_in(Shape{c, 1}, 1, rng);
    for (std::size_t li = 0; li < t.layers; ++li) {
      Tensor squeeze = uniform_fan_in(Shape{c / 4, c}, c, rng);
      auto edge = make_edge(bi, li, c / 4);
      Tensor expand = uniform_fan_in(Shape{c, c / 4}, c / 4, rng);
      b.layers.push_back(Layer{squeeze, std::move(edge), NormLayer(t.norm_spec(), c / 4), expand});
    }
    b.downsample = std::find(ds.begin(), ds.end(), bi) != ds.end();
    if (b.downsample) b.widen = uniform_fan_in(Shape{2 * c, c}, c, rng);
    m.blocks.push_back(std::move(b));
  }
  const std::size_t cout = t.output_channels();
  m.head_weight = uniform_fan_in(Shape{t.classes, cout}, cout, rng);
  m.head_bias = uniform_fan_in(Shape{t.classes}, cout, rng);
  return m;
}

}  // namespace detail

/// Search-mode model: M x N independent mixed edges.
inline NetworkModel build(const NetworkTemplate& t, std::uint64_t seed) {
  Rng rng(seed);
  return detail::assemble(t, ModelMode::search, rng, [&](std::size_t, std::size_t, std::size_t ch) {
    return std::variant<MixedEdge, FixedEdge>(MixedEdge::make(t.form, ch, t.hyper_size, t.alpha_mode, rng));
  });
}

/// Checks shape and codes of `arch` against the template; names the first bad cell.
inline void check_architecture(const NetworkTemplate& t, const ArchitectureMatrix& arch) {
  if (arch.rows != t.blocks || arch.cols != t.layers) {
    throw ConfigError("architecture matrix is " + std::to_string(arch.rows) + "x" + std::to_string(arch.cols) +
                      " but the network has " + std::to_string(t.blocks) + " blocks x " + std::to_string(t.layers) + " layers");
  }
  for (std::size_t i = 0; i < arch.rows; ++i) {
    for (std::size_t j = 0; j < arch.cols; ++j) (void)op_for(arch.at(i, j), t.form, t.hyper_size / 2, i, j);
  }
}

/// Derived-mode model with freshly initialized fixed edges.
inline NetworkModel build_derived(const NetworkTemplate& t, const ArchitectureMatrix& arch, std::uint64_t seed) {
  t.validate();
  check_architecture(t, arch);
  Rng rng(seed);
  return detail::assemble(t, ModelMode::derived, rng, [&](std::size_t bi, std::size_t li, std::size_t ch) {
    const DerivedOp op = op_for(arch.at(bi, li), t.form, t.hyper_size / 2, bi, li);
    return std::variant<MixedEdge, FixedEdge>(instantiate(op, ch, rng));
  });
}

inline ArchitectureMatrix derive_architecture(const NetworkModel& m) {
  if (m.mode != ModelMode::search) throw std::invalid_argument("derive_architecture needs a search-mode model");
  ArchitectureMatrix a{m.tmpl.blocks, m.tmpl.layers, std::vector<ArchCode>(m.tmpl.blocks * m.tmpl.layers)};
  m.for_each_mixed_edge([&](std::size_t bi, std::size_t li, const MixedEdge& e) { a.at(bi, li) = code_for(derive(e)); });
  return a;
}

/// Copies every same-named, same-shaped tensor from src into dst, and seeds each
/// fixed edge of dst with the centered crop of the matching hyper kernel in src.
inline void inherit_weights(const NetworkModel& src, NetworkModel& dst) {
  const auto from = src.tensors();
  for (auto& t : dst.tensors()) {
    for (const auto& f : from) {
      if (f.name == t.name && f.tensor.shape() == t.tensor.shape()) {
        auto d = t.tensor.data();
        std::copy(f.tensor.data().begin(), f.tensor.data().end(), d.begin());
      }
    }
  }
  for (std::size_t bi = 0; bi < dst.blocks.size() && bi < src.blocks.size(); ++bi) {
    for (std::size_t li = 0; li < dst.blocks[bi].layers.size() && li < src.blocks[bi].layers.size(); ++li) {
      auto* fe = std::get_if<FixedEdge>(&dst.blocks[bi].layers[li].edge);
      const auto* me = std::get_if<MixedEdge>(&src.blocks[bi].layers[li].edge);
      if (!fe || !me || fe->weights.size() != me->kernels.size()) continue;
      for (std::size_t k = 0; k < fe->weights.size(); ++k) {
        const auto& hk = me->kernels[k];
        const Tensor crop = crop_center(hk.weights, hk.dims(), fe->weights[k].dim(2));
        if (crop.shape() != fe->weights[k].shape()) continue;
        auto d = fe->weights[k].data();
        std::copy(crop.data().begin(), crop.data().end(), d.begin());
      }
    }
  }
}

}  // namespace hknas
