#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "octo/tensor.hpp"

namespace octo {

/// The eight canonical traversal directions. Each backward direction is the
/// per-line reversal of the forward one listed just before it.
enum class Direction : int {
  RowFwd = 0,
  RowBwd = 1,
  ColDown = 2,
  ColUp = 3,
  DiagDR = 4,
  DiagUL = 5,
  DiagDL = 6,
  DiagUR = 7,
};

inline constexpr int kNumDirections = 8;

/// Unit step (di, dj) taken between consecutive cells of a scan-line.
inline constexpr std::array<std::pair<int, int>, 8> kDirectionSteps = {{
    {0, 1}, {0, -1}, {1, 0}, {-1, 0}, {1, 1}, {-1, -1}, {1, -1}, {-1, 1},
}};

Direction reverse_direction(Direction d);
const char* direction_name(Direction d);

std::vector<Direction> all_directions();
/// Ablation subsets: 2 = horizontal pair, 4 adds vertical, 8 adds diagonals.
std::vector<Direction> direction_subset(int count);

struct ScanLine {
  Direction direction;
  int ordinal;
  std::vector<std::pair<int, int>> coords;
};

/// Grid of linear indices, grid[i][j] = i * W + j.
Tensor build_grid(int height, int width);

/// All scan-lines of one direction, ordered by ordinal.
///
/// Line ordinals: rows use i, columns use j, the down-right diagonal family
/// uses (i - j) + (W - 1) and the down-left family uses i + j. Forward
/// diagonal lines are sorted by increasing i; backward directions reverse
/// each forward line in place, keeping the ordinals.
std::vector<ScanLine> enumerate_scanlines(int height, int width, Direction d);

/// Padded per-direction scan-line indices (8, n_max, L_max). Entries are
/// linear pixel indices i * W + j, left-aligned per line, -1 beyond each
/// line's length. Also carries the inverse map pixel -> (line, position),
/// which is total because every direction visits every pixel exactly once.
class ScanIndexSet {
 public:
  ScanIndexSet(int height, int width, std::vector<int32_t> idx,
               std::vector<uint8_t> mask, std::array<int, 8> line_counts,
               int n_max, int l_max);

  int height() const { return height_; }
  int width() const { return width_; }
  int pixels() const { return height_ * width_; }
  int n_max() const { return n_max_; }
  int l_max() const { return l_max_; }
  int line_count(Direction d) const { return line_counts_[static_cast<int>(d)]; }

  int32_t index_at(int dir, int line, int t) const {
    return idx_[(static_cast<std::size_t>(dir) * n_max_ + line) * l_max_ + t];
  }
  bool mask_at(int dir, int line, int t) const {
    return mask_[(static_cast<std::size_t>(dir) * n_max_ + line) * l_max_ + t] != 0;
  }
  /// Valid prefix length of a line (padding is always a suffix).
  int line_length(int dir, int line) const;

  int32_t inverse_line(int dir, int pixel) const {
    return inv_line_[static_cast<std::size_t>(dir) * pixels() + pixel];
  }
  int32_t inverse_pos(int dir, int pixel) const {
    return inv_pos_[static_cast<std::size_t>(dir) * pixels() + pixel];
  }

  const uint8_t* mask_plane(int dir) const {
    return mask_.data() + static_cast<std::size_t>(dir) * n_max_ * l_max_;
  }

  Tensor idx_tensor() const;   // (8, n_max, L_max), padding stays -1
  Tensor mask_tensor() const;  // (8, n_max, L_max), 0/1

 private:
  int height_, width_, n_max_, l_max_;
  std::array<int, 8> line_counts_;
  std::vector<int32_t> idx_;
  std::vector<uint8_t> mask_;
  std::vector<int32_t> inv_line_, inv_pos_;
};

ScanIndexSet build_index_set(int height, int width);

}  // namespace octo
