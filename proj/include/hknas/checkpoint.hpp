#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hknas/data.hpp"
#include "hknas/errors.hpp"
#include "hknas/network.hpp"

namespace hknas {

/// Named tensors in file order.
using TensorList = std::vector<std::pair<std::string, Tensor>>;

inline constexpr char kCheckpointMagic[] = "HKCKPT01";

namespace detail {

inline void put_f64(std::string& buf, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline double get_f64(const std::string& buf, std::size_t off) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

// Bounds-checked reader with byte-offset diagnostics.
struct Reader {
  const std::string& buf;
  const std::filesystem::path& path;
  std::size_t off = 0;

  void need(std::size_t n, const char* what) const {
    if (buf.size() - off < n) {
      throw DataError(path.string() + ": truncated " + what + " at byte offset " + std::to_string(off) + " (need " +
                      std::to_string(n) + " bytes, " + std::to_string(buf.size() - off) + " left)");
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    const auto v = get_u32(buf, off);
    off += 4;
    return v;
  }
};

}  // namespace detail

inline std::string encode_checkpoint(const NetworkModel& m) {
  std::string buf(kCheckpointMagic, 8);
  const auto ts = m.tensors();
  detail::put_u32(buf, static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    detail::put_u32(buf, static_cast<std::uint32_t>(t.name.size()));
    buf += t.name;
    detail::put_u32(buf, static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(d));
    for (double v : t.tensor.data()) detail::put_f64(buf, v);
  }
  return buf;
}

inline void save_checkpoint(const std::filesystem::path& path, const NetworkModel& m) {
  detail::write_file(path, encode_checkpoint(m));
}

inline TensorList read_checkpoint(const std::filesystem::path& path) {
  const std::string buf = detail::read_file(path);
  detail::expect_magic(buf, kCheckpointMagic, path);
  detail::Reader r{buf, path, 8};
  const std::uint32_t count = r.u32("tensor count");
  TensorList out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32("name length");
    r.need(len, "tensor name");
    std::string name = buf.substr(r.off, len);
    r.off += len;
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw DataError(path.string() + ": tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t ext = r.u32("dimension");
      if (ext == 0) throw DataError(path.string() + ": tensor '" + name + "' has a zero extent");
      shape.push_back(ext);
    }
    const std::size_t n = shape_numel(shape);
    r.need(8 * n, "tensor data");
    std::vector<double> vals(n);
    for (std::size_t k = 0; k < n; ++k) vals[k] = detail::get_f64(buf, r.off + 8 * k);
    r.off += 8 * n;
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(vals)));
  }
  if (r.off != buf.size()) {
    throw DataError(path.string() + ": " + std::to_string(buf.size() - r.off) + " trailing bytes after byte offset " + std::to_string(r.off));
  }
  return out;
}

/// Copies every stored tensor into `m`; names, order and shapes must match exactly.
inline void load_checkpoint(NetworkModel& m, const TensorList& entries) {
  const auto ts = m.tensors();
  const std::size_t common = std::min(ts.size(), entries.size());
  for (std::size_t i = 0; i < common; ++i) {
    const auto& [name, t] = entries[i];
    if (name != ts[i].name) {
      throw ConfigError("checkpoint does not match the configured network: entry " + std::to_string(i) + " is '" + name +
                        "', expected '" + ts[i].name + "'");
    }
    if (t.shape() != ts[i].tensor.shape()) {
      throw ConfigError("checkpoint does not match the configured network: '" + name + "' has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(ts[i].tensor.shape()));
    }
  }
  if (ts.size() != entries.size()) {
    throw ConfigError("checkpoint does not match the configured network: it holds " + std::to_string(entries.size()) +
                      " tensors, the network has " + std::to_string(ts.size()));
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    Tensor dst = ts[i].tensor;
    const auto src = entries[i].second.data();
    std::copy(src.begin(), src.end(), dst.data().begin());
  }
}

inline bool has_free_alphas(const TensorList& entries) {
  for (const auto& [name, t] : entries) {
    if (name.find(".edge.alpha") != std::string::npos) return true;
  }
  return false;
}

inline bool is_search_checkpoint(const TensorList& entries) {
  for (const auto& [name, t] : entries) {
    if (name.find(".edge.hyper") != std::string::npos) return true;
  }
  return false;
}

/// Architecture of a derived-model checkpoint, read off its fixed-edge kernel extents.
inline ArchitectureMatrix architecture_of(const NetworkTemplate& t, const TensorList& entries) {
  if (is_search_checkpoint(entries)) throw ConfigError("checkpoint holds a search-mode network, not a derived one");
  ArchitectureMatrix a{t.blocks, t.layers, std::vector<ArchCode>(t.blocks * t.layers)};
  const std::size_t kernels = is_pair_form(t.form) ? 2 : 1;
  for (std::size_t bi = 0; bi < t.blocks; ++bi) {
    for (std::size_t li = 0; li < t.layers; ++li) {
      DerivedOp op{t.form, {}};
      const std::string prefix = "block" + std::to_string(bi) + ".layer" + std::to_string(li) + ".edge.fixed";
      for (std::size_t k = 0; k < kernels; ++k) {
        const std::string name = prefix + std::to_string(k);
        auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.first == name; });
        if (it == entries.end()) throw ConfigError("checkpoint does not match the configured network: missing '" + name + "'");
        const std::size_t ext = it->second.dim(2);
        if (ext < 3 || ext % 2 == 0) throw ConfigError("checkpoint tensor '" + name + "' has kernel extent " + std::to_string(ext));
        op.indices.push_back((ext - 1) / 2);
      }
      a.at(bi, li) = code_for(op);
    }
  }
  return a;
}

}  // namespace hknas
