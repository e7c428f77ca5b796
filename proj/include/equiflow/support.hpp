#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace equiflow {

/// k x k boolean mask of the filter cells a convolution may use (k odd, row 0 on top).
class FilterSupport {
 public:
  FilterSupport(std::size_t size, std::vector<bool> mask) : size_(size), mask_(std::move(mask)) {
    if (size_ == 0 || size_ % 2 == 0) throw std::invalid_argument("FilterSupport: size must be odd");
    if (mask_.size() != size_ * size_) throw std::invalid_argument("FilterSupport: mask must have size*size cells");
    if (count() == 0) throw std::invalid_argument("FilterSupport: mask has no supported cell");
  }

  static FilterSupport full(std::size_t size) { return FilterSupport(size, std::vector<bool>(size * size, true)); }

  /// Parses rows of '#' (supported) and '.' (unsupported).
  static FilterSupport from_rows(const std::vector<std::string>& rows) {
    const std::size_t k = rows.size();
    std::vector<bool> mask;
    for (const auto& r : rows) {
      if (r.size() != k) throw std::invalid_argument("FilterSupport: mask rows must form a square grid");
      for (const char ch : r) {
        if (ch == '#') mask.push_back(true);
        else if (ch == '.') mask.push_back(false);
        else throw std::invalid_argument(std::string("FilterSupport: unexpected character '") + ch + "'");
      }
    }
    return FilterSupport(k, std::move(mask));
  }

  /// Newline-separated form of from_rows; a trailing newline is accepted.
  static FilterSupport from_ascii(std::string_view text) {
    std::vector<std::string> rows;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) rows.push_back(line);
    }
    return from_rows(rows);
  }

  std::vector<std::string> rows() const {
    std::vector<std::string> out(size_, std::string(size_, '.'));
    for (std::size_t r = 0; r < size_; ++r)
      for (std::size_t c = 0; c < size_; ++c)
        if (at(r, c)) out[r][c] = '#';
    return out;
  }

  std::string to_ascii() const {
    std::string s;
    for (const auto& r : rows()) s += r + "\n";
    return s;
  }

  std::size_t size() const { return size_; }
  bool at(std::size_t r, std::size_t c) const { return mask_[r * size_ + c]; }
  bool at(std::size_t cell) const { return mask_[cell]; }
  const std::vector<bool>& mask() const { return mask_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const bool b : mask_) n += b ? 1 : 0;
    return n;
  }

  /// Supported cell indices (r * size + c) in row-major order.
  std::vector<std::size_t> cells() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < mask_.size(); ++i)
      if (mask_[i]) out.push_back(i);
    return out;
  }

  /// The mask rotated counterclockwise by quarter_turns * 90 degrees.
  FilterSupport rotated(std::size_t quarter_turns) const {
    std::vector<bool> cur = mask_;
    for (std::size_t q = 0; q < quarter_turns % 4; ++q) {
      std::vector<bool> next(cur.size());
      for (std::size_t r = 0; r < size_; ++r)
        for (std::size_t c = 0; c < size_; ++c) next[r * size_ + c] = cur[c * size_ + (size_ - 1 - r)];
      cur = std::move(next);
    }
    return FilterSupport(size_, std::move(cur));
  }

  /// Cells that stay supported under every quarter turn (mask intersected with its rotations).
  std::vector<bool> rotation_stable_cells() const {
    std::vector<bool> out = mask_;
    for (std::size_t q = 1; q < 4; ++q) {
      const auto rot = rotated(q).mask_;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] && rot[i];
    }
    return out;
  }

  bool is_rotation_symmetric() const { return rotated(1).mask_ == mask_; }

  bool operator==(const FilterSupport& o) const { return size_ == o.size_ && mask_ == o.mask_; }

 private:
  std::size_t size_;
  std::vector<bool> mask_;
};

namespace supports {

/// 3x3 plus-shaped mask (five cells).
inline FilterSupport sym3() { return FilterSupport::from_rows({".#.", "###", ".#."}); }

/// 3x3 five-cell mask: top-left corner plus the four edge cells, no center.
inline FilterSupport asym3() { return FilterSupport::from_rows({"##.", "#.#", ".#."}); }

/// 5x5 thirteen-cell diamond.
inline FilterSupport sym5() { return FilterSupport::from_rows({"..#..", ".###.", "#####", ".###.", "..#.."}); }

/// 5x5 thirteen-cell mask: the nine-cell plus together with the 2x2 top-left block.
inline FilterSupport asym5() { return FilterSupport::from_rows({"###..", "###..", "#####", "..#..", "..#.."}); }

}  // namespace supports

}  // namespace equiflow
