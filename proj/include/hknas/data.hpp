#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hknas/errors.hpp"
#include "hknas/hyperkernel.hpp"
#include "hknas/tensor.hpp"

namespace hknas {

/// Hyperspectral raster, band-interleaved by pixel: value(r, c, b) = values[(r*W + c)*B + b].
struct HsiCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c, std::size_t b) const { return values[(r * width + c) * bands + b]; }
  double& at(std::size_t r, std::size_t c, std::size_t b) { return values[(r * width + c) * bands + b]; }
};

/// Per-pixel class ids; 0 marks an unlabeled pixel, classes are 1..K.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> ids;

  std::uint16_t at(std::size_t r, std::size_t c) const { return ids[r * width + c]; }
  std::size_t num_classes() const { return ids.empty() ? 0 : *std::max_element(ids.begin(), ids.end()); }
};

// ---------------------------------------------------------------------------
// Binary files: 8-byte magic, little-endian u32 header fields, little-endian payload.

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& buf, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(buf, bits);
}

inline double get_f32(const std::string& buf, std::size_t off) {
  const std::uint32_t bits = get_u32(buf, off);
  float f;
  std::memcpy(&f, &bits, 4);
  return static_cast<double>(f);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

inline void expect_magic(const std::string& buf, const char* magic, const std::filesystem::path& path) {
  if (buf.size() < 8 || std::memcmp(buf.data(), magic, 8) != 0) {
    throw DataError(path.string() + ": bad magic at byte offset 0, expected \"" + magic + "\"");
  }
}

inline void expect_length(const std::string& buf, std::size_t want, const std::filesystem::path& path) {
  if (buf.size() != want) {
    throw DataError(path.string() + ": expected " + std::to_string(want) + " bytes, found " + std::to_string(buf.size()) +
                    (buf.size() < want ? " (truncated at byte offset " + std::to_string(buf.size()) + ")" : " (trailing bytes)"));
  }
}

}  // namespace detail

inline constexpr char kCubeMagic[] = "HSICUBE1";
inline constexpr char kLabelMagic[] = "HSILBL01";

inline std::string encode_cube(const HsiCube& cube) {
  std::string buf(kCubeMagic, 8);
  detail::put_u32(buf, static_cast<std::uint32_t>(cube.height));
  detail::put_u32(buf, static_cast<std::uint32_t>(cube.width));
  detail::put_u32(buf, static_cast<std::uint32_t>(cube.bands));
  buf.reserve(buf.size() + 4 * cube.values.size());
  for (double v : cube.values) detail::put_f32(buf, v);
  return buf;
}

inline void save_cube(const std::filesystem::path& path, const HsiCube& cube) { detail::write_file(path, encode_cube(cube)); }

inline HsiCube load_cube(const std::filesystem::path& path) {
  const std::string buf = detail::read_file(path);
  detail::expect_magic(buf, kCubeMagic, path);
  if (buf.size() < 20) detail::expect_length(buf, 20, path);
  HsiCube c;
  c.height = detail::get_u32(buf, 8);
  c.width = detail::get_u32(buf, 12);
  c.bands = detail::get_u32(buf, 16);
  if (c.height == 0 || c.width == 0 || c.bands == 0) throw DataError(path.string() + ": zero extent in header at byte offset 8");
  const std::size_t n = c.height * c.width * c.bands;
  detail::expect_length(buf, 20 + 4 * n, path);
  c.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.values[i] = detail::get_f32(buf, 20 + 4 * i);
    if (!std::isfinite(c.values[i])) throw DataError(path.string() + ": non-finite value at byte offset " + std::to_string(20 + 4 * i));
  }
  return c;
}

inline std::string encode_labels(const LabelMap& labels) {
  std::string buf(kLabelMagic, 8);
  detail::put_u32(buf, static_cast<std::uint32_t>(labels.height));
  detail::put_u32(buf, static_cast<std::uint32_t>(labels.width));
  for (auto id : labels.ids) {
    buf.push_back(static_cast<char>(id & 0xffu));
    buf.push_back(static_cast<char>(id >> 8));
  }
  return buf;
}

inline void save_labels(const std::filesystem::path& path, const LabelMap& labels) {
  detail::write_file(path, encode_labels(labels));
}

inline LabelMap load_labels(const std::filesystem::path& path) {
  const std::string buf = detail::read_file(path);
  detail::expect_magic(buf, kLabelMagic, path);
  if (buf.size() < 16) detail::expect_length(buf, 16, path);
  LabelMap l;
  l.height = detail::get_u32(buf, 8);
  l.width = detail::get_u32(buf, 12);
  if (l.height == 0 || l.width == 0) throw DataError(path.string() + ": zero extent in header at byte offset 8");
  const std::size_t n = l.height * l.width;
  detail::expect_length(buf, 16 + 2 * n, path);
  l.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    l.ids[i] = static_cast<std::uint16_t>(static_cast<unsigned char>(buf[16 + 2 * i]) |
                                          (static_cast<unsigned char>(buf[17 + 2 * i]) << 8));
  }
  return l;
}

inline void check_compatible(const HsiCube& cube, const LabelMap& labels) {
  if (cube.height != labels.height || cube.width != labels.width) {
    throw DataError("label map is " + std::to_string(labels.height) + "x" + std::to_string(labels.width) + " but cube is " +
                    std::to_string(cube.height) + "x" + std::to_string(cube.width));
  }
}

/// Per-band min-max scaling to [0, 1]; constant bands become 0.
inline HsiCube normalize(const HsiCube& cube) {
  HsiCube out = cube;
  const std::size_t pixels = cube.height * cube.width;
  for (std::size_t b = 0; b < cube.bands; ++b) {
    double lo = cube.values[b], hi = cube.values[b];
    for (std::size_t p = 0; p < pixels; ++p) {
      lo = std::min(lo, cube.values[p * cube.bands + b]);
      hi = std::max(hi, cube.values[p * cube.bands + b]);
    }
    const double range = hi - lo;
    for (std::size_t p = 0; p < pixels; ++p) {
      double& v = out.values[p * cube.bands + b];
      v = range > 0 ? (v - lo) / range : 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

struct PixelRef {
  std::size_t row = 0;
  std::size_t col = 0;
  std::uint16_t label = 0;  // 1..K

  bool operator==(const PixelRef&) const = default;
};

struct SplitSpec {
  std::size_t knowable = 20;                         // per class, split 1:1 into train and val
  std::map<std::uint16_t, std::size_t> overrides;    // class id -> knowable count
  std::uint64_t seed = 0;

  std::size_t knowable_for(std::uint16_t cls) const {
    auto it = overrides.find(cls);
    return it == overrides.end() ? knowable : it->second;
  }
};

struct Split {
  std::vector<PixelRef> train;
  std::vector<PixelRef> val;
  std::vector<PixelRef> test;
};

/// Per class: shuffle its pixels, take ceil(k/2) for training, floor(k/2) for
/// validation and leave the rest for testing. Classes are visited in id order
/// from one seeded stream.
inline Split stratified_split(const LabelMap& labels, const SplitSpec& spec) {
  const std::size_t k = labels.num_classes();
  std::vector<std::vector<PixelRef>> by_class(k + 1);
  for (std::size_t r = 0; r < labels.height; ++r) {
    for (std::size_t c = 0; c < labels.width; ++c) {
      const auto id = labels.at(r, c);
      if (id) by_class[id].push_back({r, c, id});
    }
  }
  Rng rng(spec.seed);
  Split out;
  for (std::size_t id = 1; id <= k; ++id) {
    auto& px = by_class[id];
    const std::size_t want = spec.knowable_for(static_cast<std::uint16_t>(id));
    if (px.empty()) throw DataError("class " + std::to_string(id) + " has no labeled pixels");
    if (want > px.size()) {
      throw DataError("class " + std::to_string(id) + " has " + std::to_string(px.size()) + " labeled pixels, fewer than the " +
                      std::to_string(want) + " knowable samples requested");
    }
    std::shuffle(px.begin(), px.end(), rng);
    const std::size_t ntrain = (want + 1) / 2;
    for (std::size_t i = 0; i < px.size(); ++i) {
      (i < ntrain ? out.train : i < want ? out.val : out.test).push_back(px[i]);
    }
  }
  return out;
}

inline std::string encode_split(const Split& s) {
  std::ostringstream os;
  auto emit = [&](const std::vector<PixelRef>& v, const char* tag) {
    for (const auto& p : v) os << p.label << '\t' << p.row << '\t' << p.col << '\t' << tag << '\n';
  };
  emit(s.train, "train");
  emit(s.val, "val");
  emit(s.test, "test");
  return os.str();
}

inline Split parse_split(const std::string& text) {
  Split s;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t label, row, col;
    std::string tag;
    if (!(ls >> label >> row >> col >> tag) || label == 0 || label > 0xffff) {
      throw DataError("split file line " + std::to_string(lineno) + " is malformed");
    }
    const PixelRef p{row, col, static_cast<std::uint16_t>(label)};
    if (tag == "train") s.train.push_back(p);
    else if (tag == "val") s.val.push_back(p);
    else if (tag == "test") s.test.push_back(p);
    else throw DataError("split file line " + std::to_string(lineno) + ": unknown subset '" + tag + "'");
  }
  return s;
}

/// Mirror an index into [0, n) without repeating the edge sample (…, 2, 1, 0, 1, 2, …).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - m);
}

/// (bands, size, size) patch centered on (row, col), borders filled by reflection.
inline Tensor extract_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t size = 27) {
  if (row >= cube.height || col >= cube.width) {
    throw std::out_of_range("patch center (" + std::to_string(row) + ", " + std::to_string(col) + ") outside " +
                            std::to_string(cube.height) + "x" + std::to_string(cube.width) + " cube");
  }
  if (size % 2 == 0) throw std::invalid_argument("patch size must be odd");
  const auto half = static_cast<std::ptrdiff_t>(size / 2);
  Tensor out(Shape{cube.bands, size, size});
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t r = reflect_index(static_cast<std::ptrdiff_t>(row) + static_cast<std::ptrdiff_t>(i) - half, cube.height);
    for (std::size_t j = 0; j < size; ++j) {
      const std::size_t c = reflect_index(static_cast<std::ptrdiff_t>(col) + static_cast<std::ptrdiff_t>(j) - half, cube.width);
      for (std::size_t b = 0; b < cube.bands; ++b) out[(b * size + i) * size + j] = cube.at(r, c, b);
    }
  }
  return out;
}

/// Whole cube as a (1, bands, height, width) tensor.
inline Tensor cube_tensor(const HsiCube& cube) {
  Tensor out(Shape{1, cube.bands, cube.height, cube.width});
  for (std::size_t r = 0; r < cube.height; ++r) {
    for (std::size_t c = 0; c < cube.width; ++c) {
      for (std::size_t b = 0; b < cube.bands; ++b) out[(b * cube.height + r) * cube.width + c] = cube.at(r, c, b);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SynthSpec {
  std::size_t classes = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t bands = 16;
  double noise = 0.05;
  std::uint64_t seed = 0;
};

struct SynthScene {
  HsiCube cube;
  LabelMap labels;
  std::vector<std::vector<double>> signatures;  // [class - 1][band]
};

/// Class k's signature is a Gaussian bump at band (k + 0.5) B / K over a 0.2
/// baseline. Classes occupy contiguous horizontal stripes of the raster (order
/// permuted by the seed) and every pixel gets i.i.d. N(0, noise^2) per band.
inline SynthScene synth_generate(const SynthSpec& spec) {
  if (spec.height == 0 || spec.width == 0 || spec.bands == 0 || spec.classes == 0) {
    throw DataError("synthetic scene needs positive height, width, bands and classes");
  }
  if (spec.classes > spec.height * spec.width || spec.classes > 0xffff) {
    throw DataError("synthetic scene cannot hold " + std::to_string(spec.classes) + " classes");
  }
  if (!(spec.noise >= 0) || !std::isfinite(spec.noise)) throw DataError("noise must be finite and >= 0");
  Rng rng(spec.seed);
  SynthScene s;
  const double bw = std::max(0.75, static_cast<double>(spec.bands) / (2.0 * static_cast<double>(spec.classes)));
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const double center = (static_cast<double>(k) + 0.5) * static_cast<double>(spec.bands) / static_cast<double>(spec.classes);
    std::vector<double> sig(spec.bands);
    for (std::size_t b = 0; b < spec.bands; ++b) {
      const double z = (static_cast<double>(b) - center) / bw;
      sig[b] = 0.2 + 0.6 * std::exp(-0.5 * z * z);
    }
    s.signatures.push_back(std::move(sig));
  }
  std::vector<std::uint16_t> order(spec.classes);
  std::iota(order.begin(), order.end(), std::uint16_t{1});
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t pixels = spec.height * spec.width;
  s.labels = {spec.height, spec.width, std::vector<std::uint16_t>(pixels)};
  s.cube = {spec.height, spec.width, spec.bands, std::vector<double>(pixels * spec.bands)};
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::uint16_t id = order[p * spec.classes / pixels];
    s.labels.ids[p] = id;
    for (std::size_t b = 0; b < spec.bands; ++b) {
      s.cube.values[p * spec.bands + b] = s.signatures[id - 1][b] + spec.noise * normal(rng);
    }
  }
  return s;
}

}  // namespace hknas
