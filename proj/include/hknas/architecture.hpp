#pragma once

#include <cctype>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "hknas/errors.hpp"
#include "hknas/mixedop.hpp"

namespace hknas {

/// One cell of an architecture matrix, holding 0-based candidate indices.
///
/// single:   "a"       one kernel, extent 2(a+1)+1
/// parallel: "a/b"     1-D branch a, 2-D depthwise branch b
/// serial:   "ab"      the integer 10a+b; a is the first operation applied, b the second
struct ArchCode {
  enum class Kind { single, parallel, serial };
  Kind kind = Kind::single;
  std::size_t a = 0;
  std::size_t b = 0;

  bool operator==(const ArchCode&) const = default;

  std::string text() const {
    switch (kind) {
      case Kind::single: return std::to_string(a);
      case Kind::parallel: return std::to_string(a) + "/" + std::to_string(b);
      case Kind::serial: return std::to_string(a) + std::to_string(b);
    }
    return "?";
  }
};

/// Rows are blocks, columns are layers within a block.
struct ArchitectureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<ArchCode> cells;

  ArchCode& at(std::size_t i, std::size_t j) { return cells.at(i * cols + j); }
  const ArchCode& at(std::size_t i, std::size_t j) const { return cells.at(i * cols + j); }

  bool operator==(const ArchitectureMatrix&) const = default;
};

inline std::string encode_text(const ArchitectureMatrix& m) {
  std::string out;
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (j) out += ' ';
      out += m.at(i, j).text();
    }
    out += '\n';
  }
  return out;
}

namespace detail {

[[noreturn]] inline void cell_error(std::size_t row, std::size_t col, const std::string& what) {
  throw ConfigError("architecture matrix row " + std::to_string(row + 1) + ", column " + std::to_string(col + 1) + ": " + what);
}

inline ArchCode parse_cell(const std::string& tok, std::size_t row, std::size_t col) {
  auto digit = [&](char ch) -> std::size_t {
    if (!std::isdigit(static_cast<unsigned char>(ch))) cell_error(row, col, "malformed entry '" + tok + "'");
    return static_cast<std::size_t>(ch - '0');
  };
  if (tok.size() == 3 && tok[1] == '/') return {ArchCode::Kind::parallel, digit(tok[0]), digit(tok[2])};
  if (tok.size() == 2) return {ArchCode::Kind::serial, digit(tok[0]), digit(tok[1])};
  if (tok.size() == 1) return {ArchCode::Kind::single, digit(tok[0]), 0};
  cell_error(row, col, "malformed entry '" + tok + "'");
}

}  // namespace detail

/// Parses whitespace-separated rows; blank lines are ignored.
inline ArchitectureMatrix parse_text(const std::string& text) {
  ArchitectureMatrix m;
  std::istringstream in(text);
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> toks;
    for (std::string t; ls >> t;) toks.push_back(t);
    if (toks.empty()) continue;
    if (m.rows == 0) {
      m.cols = toks.size();
    } else if (toks.size() != m.cols) {
      throw ConfigError("architecture matrix row " + std::to_string(row + 1) + " has " + std::to_string(toks.size()) +
                        " entries, expected " + std::to_string(m.cols));
    }
    for (std::size_t j = 0; j < toks.size(); ++j) m.cells.push_back(detail::parse_cell(toks[j], row, j));
    ++m.rows;
    ++row;
  }
  if (m.rows == 0) throw ConfigError("architecture matrix is empty");
  return m;
}

/// Encoding of a derived op (1-based indices) as a 0-based matrix cell.
inline ArchCode code_for(const DerivedOp& op) {
  switch (op.form) {
    case Form::conv1d:
    case Form::conv3d: return {ArchCode::Kind::single, op.indices.at(0) - 1, 0};
    case Form::parallel_1d_2ddw: return {ArchCode::Kind::parallel, op.indices.at(0) - 1, op.indices.at(1) - 1};
    case Form::serial_1d_2ddw: return {ArchCode::Kind::serial, op.indices.at(0) - 1, op.indices.at(1) - 1};
    case Form::serial_2ddw_1d: return {ArchCode::Kind::serial, op.indices.at(1) - 1, op.indices.at(0) - 1};
  }
  throw std::logic_error("unreachable");
}

/// Decodes one cell under `form`, checking indices against `candidates`.
/// A one-digit cell under a serial form is read as the integer 10*0 + b.
inline DerivedOp op_for(const ArchCode& code, Form form, std::size_t candidates, std::size_t row = 0, std::size_t col = 0) {
  if (candidates > 10 && is_serial_form(form)) throw ConfigError("serial encoding needs at most 10 candidates per kernel");
  ArchCode c = code;
  if (is_serial_form(form) && c.kind == ArchCode::Kind::single) c = {ArchCode::Kind::serial, 0, c.a};
  const ArchCode::Kind want = form == Form::parallel_1d_2ddw ? ArchCode::Kind::parallel
                              : is_serial_form(form)         ? ArchCode::Kind::serial
                                                             : ArchCode::Kind::single;
  if (c.kind != want) detail::cell_error(row, col, "entry '" + code.text() + "' does not fit form " + to_string(form));
  auto check = [&](std::size_t idx) {
    if (idx >= candidates) {
      detail::cell_error(row, col, "entry '" + code.text() + "' selects index " + std::to_string(idx) + " but only " +
                                       std::to_string(candidates) + " candidates exist");
    }
    return idx + 1;
  };
  switch (form) {
    case Form::conv1d:
    case Form::conv3d: return {form, {check(c.a)}};
    case Form::parallel_1d_2ddw:
    case Form::serial_1d_2ddw: return {form, {check(c.a), check(c.b)}};
    case Form::serial_2ddw_1d: return {form, {check(c.b), check(c.a)}};
  }
  throw std::logic_error("unreachable");
}

/// Kernel extent 2(A+1)+1 selected by a 0-based matrix index.
inline std::size_t extent_of_index(std::size_t index) { return 2 * (index + 1) + 1; }

}  // namespace hknas
