#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <type_traits>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "hknas/architecture.hpp"
#include "hknas/checkpoint.hpp"
#include "hknas/data.hpp"
#include "hknas/errors.hpp"
#include "hknas/metrics.hpp"
#include "hknas/network.hpp"
#include "hknas/optim.hpp"

namespace hknas {

/// Everything one command needs; read from a flat `key = value` file.
struct RunConfig {
  NetworkTemplate net;
  OptimConfig optim;
  SplitSpec split;
  std::size_t patch_size = 27;
  bool two_tier = false;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";

  // Scene: either files on disk or a synthetic scene.
  std::filesystem::path cube_path;
  std::filesystem::path labels_path;
  SynthSpec synth;

  bool synthetic() const { return cube_path.empty(); }

  void validate() const {
    net.validate();
    optim.validate();
    if (patch_size < 1 || patch_size % 2 == 0) throw ConfigError("patch_size must be odd");
    if (cube_path.empty() != labels_path.empty()) throw ConfigError("cube and labels must be given together");
    if (!synthetic()) {
      for (const auto& p : {cube_path, labels_path}) {
        if (!std::filesystem::exists(p)) throw ConfigError("file not found: " + p.string());
      }
    }
    if (two_tier && net.alpha_mode != AlphaMode::free) throw ConfigError("two-tier search needs alpha_mode = free");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  if (!(in >> out) || !(in >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  if constexpr (std::is_unsigned_v<T>) {
    if (v.find('-') != std::string::npos) throw ConfigError("config key '" + key + "' must be non-negative");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace detail

/// Key/value pairs in file order; `#` starts a comment.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = val;
  }
  return kv;
}

/// Builds a RunConfig. Relative paths resolve against `base`. Optimizer
/// defaults follow the network kind unless overridden.
inline RunConfig make_config(const std::map<std::string, std::string>& kv, const std::filesystem::path& base = {}) {
  RunConfig c;
  auto get = [&](const std::string& k) -> std::optional<std::string> {
    auto it = kv.find(k);
    return it == kv.end() ? std::nullopt : std::optional<std::string>(it->second);
  };
  if (auto v = get("kind")) c.net.kind = parse_network_kind(*v);
  c.optim = OptimConfig::defaults(c.net.kind);
  c.net.form = c.net.kind == NetworkKind::cls1d ? Form::conv1d : Form::conv3d;

  using detail::parse_number;
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters = {
      {"kind", [](auto&, auto&) {}},
      {"blocks", [&](auto& k, auto& v) { c.net.blocks = parse_number<std::size_t>(k, v); }},
      {"layers", [&](auto& k, auto& v) { c.net.layers = parse_number<std::size_t>(k, v); }},
      {"form", [&](auto&, auto& v) {
         try {
           c.net.form = parse_form(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      {"hyper_size", [&](auto& k, auto& v) { c.net.hyper_size = parse_number<std::size_t>(k, v); }},
      {"initial_channels", [&](auto& k, auto& v) { c.net.initial_channels = parse_number<std::size_t>(k, v); }},
      {"stem_length", [&](auto& k, auto& v) { c.net.stem_length = parse_number<std::size_t>(k, v); }},
      {"norm_groups", [&](auto& k, auto& v) { c.net.norm_groups = parse_number<std::size_t>(k, v); }},
      {"alpha_mode", [&](auto&, auto& v) {
         try {
           c.net.alpha_mode = parse_alpha_mode(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      {"initial_lr", [&](auto& k, auto& v) { c.optim.initial_lr = parse_number<double>(k, v); }},
      {"min_lr", [&](auto& k, auto& v) { c.optim.min_lr = parse_number<double>(k, v); }},
      {"weight_decay", [&](auto& k, auto& v) { c.optim.weight_decay = parse_number<double>(k, v); }},
      {"momentum", [&](auto& k, auto& v) { c.optim.momentum = parse_number<double>(k, v); }},
      {"alpha_lr", [&](auto& k, auto& v) { c.optim.alpha_lr = parse_number<double>(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.optim.batch_size = parse_number<std::size_t>(k, v); }},
      {"search_epochs", [&](auto& k, auto& v) { c.optim.search_epochs = parse_number<std::size_t>(k, v); }},
      {"train_epochs", [&](auto& k, auto& v) { c.optim.train_epochs = parse_number<std::size_t>(k, v); }},
      {"knowable", [&](auto& k, auto& v) { c.split.knowable = parse_number<std::size_t>(k, v); }},
      {"knowable_overrides", [&](auto& k, auto& v) {
         // "class:count" pairs separated by spaces or commas
         std::string s = v;
         std::replace(s.begin(), s.end(), ',', ' ');
         std::istringstream in(s);
         for (std::string tok; in >> tok;) {
           const auto colon = tok.find(':');
           if (colon == std::string::npos) throw ConfigError("config key '" + k + "': expected class:count, got '" + tok + "'");
           const auto cls = parse_number<unsigned>(k, tok.substr(0, colon));
           if (cls == 0 || cls > 0xffff) throw ConfigError("config key '" + k + "': class id out of range");
           c.split.overrides[static_cast<std::uint16_t>(cls)] = parse_number<std::size_t>(k, tok.substr(colon + 1));
         }
       }},
      {"patch_size", [&](auto& k, auto& v) { c.patch_size = parse_number<std::size_t>(k, v); }},
      {"two_tier", [&](auto& k, auto& v) { c.two_tier = detail::parse_bool(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"out", [&](auto&, auto& v) { c.out = base / v; }},
      {"cube", [&](auto&, auto& v) { c.cube_path = base / v; }},
      {"labels", [&](auto&, auto& v) { c.labels_path = base / v; }},
      {"synth_classes", [&](auto& k, auto& v) { c.synth.classes = parse_number<std::size_t>(k, v); }},
      {"synth_height", [&](auto& k, auto& v) { c.synth.height = parse_number<std::size_t>(k, v); }},
      {"synth_width", [&](auto& k, auto& v) { c.synth.width = parse_number<std::size_t>(k, v); }},
      {"synth_bands", [&](auto& k, auto& v) { c.synth.bands = parse_number<std::size_t>(k, v); }},
      {"synth_noise", [&](auto& k, auto& v) { c.synth.noise = parse_number<double>(k, v); }},
      {"synth_seed", [&](auto& k, auto& v) { c.synth.seed = parse_number<std::uint64_t>(k, v); }},
  };
  for (const auto& [k, v] : kv) {
    auto it = setters.find(k);
    if (it == setters.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second(k, v);
  }
  if (c.net.kind == NetworkKind::cls3d && c.net.blocks != 3) throw ConfigError("cls3d requires blocks = 3");
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return make_config(parse_key_values(detail::read_file(path)), path.parent_path());
}

/// Independent seed for one consumer (split, init, shuffling) of a run seed.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kSplitStream = 1, kInitStream = 2, kShuffleStream = 3 };

/// A loaded, normalized scene with its split.
struct Scene {
  HsiCube cube;
  LabelMap labels;
  Split split;
};

/// Loads or generates the scene and fills the template's bands and classes.
inline Scene load_scene(RunConfig& c) {
  Scene s;
  if (c.synthetic()) {
    auto g = synth_generate(c.synth);
    s.cube = std::move(g.cube);
    s.labels = std::move(g.labels);
  } else {
    s.cube = load_cube(c.cube_path);
    s.labels = load_labels(c.labels_path);
  }
  check_compatible(s.cube, s.labels);
  s.cube = normalize(s.cube);
  c.net.bands = s.cube.bands;
  c.net.classes = s.labels.num_classes();
  if (c.net.classes == 0) throw DataError("label map has no labeled pixels");
  SplitSpec sp = c.split;
  sp.seed = stream_seed(c.seed, kSplitStream);
  s.split = stratified_split(s.labels, sp);
  return s;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) { detail::write_file(path, text); }

inline ArchitectureMatrix read_architecture(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("architecture file not found: " + path.string());
  return parse_text(detail::read_file(path));
}

inline void prepare_out(const RunConfig& c) {
  std::error_code ec;
  std::filesystem::create_directories(c.out, ec);
  if (ec) throw DataError("cannot create output directory " + c.out.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Commands. Each writes its primary outputs under c.out.

/// Search stage: split.tsv, arch.txt, search_log.tsv, search.ckpt.
inline ArchitectureMatrix cmd_search(RunConfig c) {
  c.validate();
  Scene s = load_scene(c);
  c.net.validate();
  prepare_out(c);
  NetworkModel m = build(c.net, stream_seed(c.seed, kInitStream));
  SampleSource src(c.net.kind, s.cube, c.patch_size);
  SearchResult r;
  if (c.two_tier) {
    const auto [a, b] = halve(s.split.train);
    r = two_tier_search(m, src, a, b, s.split.val, c.optim, stream_seed(c.seed, kShuffleStream));
  } else {
    r = search(m, src, s.split.train, s.split.val, c.optim, stream_seed(c.seed, kShuffleStream));
  }
  write_text(c.out / "split.tsv", encode_split(s.split));
  write_text(c.out / "arch.txt", encode_text(r.arch));
  write_text(c.out / "search_log.tsv", r.log.text());
  save_checkpoint(c.out / "search.ckpt", m);
  return r.arch;
}

/// Training stage: model.ckpt and train_log.tsv for the given architecture.
inline RunLog cmd_train(RunConfig c, const std::filesystem::path& arch_path) {
  c.validate();
  const ArchitectureMatrix arch = read_architecture(arch_path);
  Scene s = load_scene(c);
  check_architecture(c.net, arch);
  prepare_out(c);
  NetworkModel m = build_derived(c.net, arch, stream_seed(c.seed, kInitStream));
  SampleSource src(c.net.kind, s.cube, c.patch_size);
  RunLog log = train(m, src, s.split.train, s.split.val, c.optim, stream_seed(c.seed, kShuffleStream));
  save_checkpoint(c.out / "model.ckpt", m);
  write_text(c.out / "train_log.tsv", log.text());
  return log;
}

/// Evaluation stage: metrics.txt for a trained checkpoint on the test remainder.
inline Metrics cmd_eval(RunConfig c, const std::filesystem::path& ckpt_path) {
  c.validate();
  const TensorList entries = read_checkpoint(ckpt_path);
  Scene s = load_scene(c);
  const ArchitectureMatrix arch = architecture_of(c.net, entries);
  NetworkModel m = build_derived(c.net, arch, 0);
  load_checkpoint(m, entries);
  prepare_out(c);
  SampleSource src(c.net.kind, s.cube, c.patch_size);
  Metrics r = evaluate(m, src, s.split.test);
  write_text(c.out / "metrics.txt", format_report(r));
  return r;
}

/// Re-derives arch.txt from a search checkpoint.
inline ArchitectureMatrix cmd_derive(RunConfig c, const std::filesystem::path& ckpt_path) {
  const TensorList entries = read_checkpoint(ckpt_path);
  if (!is_search_checkpoint(entries)) throw ConfigError("checkpoint holds a derived network; derive needs a search checkpoint");
  c.net.alpha_mode = has_free_alphas(entries) ? AlphaMode::free : AlphaMode::hyper;
  c.two_tier = false;
  c.validate();
  if (c.synthetic()) {
    c.net.bands = c.synth.bands;
    c.net.classes = c.synth.classes;
  } else {
    const HsiCube cube = load_cube(c.cube_path);
    const LabelMap labels = load_labels(c.labels_path);
    c.net.bands = cube.bands;
    c.net.classes = labels.num_classes();
  }
  NetworkModel m = build(c.net, 0);
  load_checkpoint(m, entries);
  const ArchitectureMatrix arch = derive_architecture(m);
  prepare_out(c);
  write_text(c.out / "arch.txt", encode_text(arch));
  return arch;
}

/// Writes a synthetic scene as cube.hsi and labels.lbl.
inline SynthScene cmd_synth(RunConfig c) {
  prepare_out(c);
  SynthScene s = synth_generate(c.synth);
  save_cube(c.out / "cube.hsi", s.cube);
  save_labels(c.out / "labels.lbl", s.labels);
  return s;
}

}  // namespace hknas
