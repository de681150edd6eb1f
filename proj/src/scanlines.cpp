#include "octo/scanlines.hpp"

#include <algorithm>
#include <stdexcept>

namespace octo {

Direction reverse_direction(Direction d) {
  const int i = static_cast<int>(d);
  return static_cast<Direction>(i ^ 1);
}

const char* direction_name(Direction d) {
  switch (d) {
    case Direction::RowFwd: return "row_fwd";
    case Direction::RowBwd: return "row_bwd";
    case Direction::ColDown: return "col_down";
    case Direction::ColUp: return "col_up";
    case Direction::DiagDR: return "diag_dr";
    case Direction::DiagUL: return "diag_ul";
    case Direction::DiagDL: return "diag_dl";
    case Direction::DiagUR: return "diag_ur";
  }
  return "?";
}

std::vector<Direction> all_directions() {
  std::vector<Direction> v(kNumDirections);
  for (int i = 0; i < kNumDirections; ++i) v[i] = static_cast<Direction>(i);
  return v;
}

std::vector<Direction> direction_subset(int count) {
  switch (count) {
    case 2:
      return {Direction::RowFwd, Direction::RowBwd};
    case 4:
      return {Direction::RowFwd, Direction::RowBwd, Direction::ColDown, Direction::ColUp};
    case 8:
      return all_directions();
    default:
      throw std::invalid_argument("direction subset must be 2, 4 or 8");
  }
}

Tensor build_grid(int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("grid dims must be >= 1");
  Tensor grid({static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) grid.at(i, j) = static_cast<double>(i * width + j);
  return grid;
}

std::vector<ScanLine> enumerate_scanlines(int height, int width, Direction d) {
  if (height < 1 || width < 1) throw std::invalid_argument("grid dims must be >= 1");
  std::vector<ScanLine> lines;

  const auto forward_of = [&](Direction fd) {
    std::vector<ScanLine> out;
    switch (fd) {
      case Direction::RowFwd:
        out.reserve(height);
        for (int i = 0; i < height; ++i) {
          ScanLine ln{fd, i, {}};
          ln.coords.reserve(width);
          for (int j = 0; j < width; ++j) ln.coords.emplace_back(i, j);
          out.push_back(std::move(ln));
        }
        break;
      case Direction::ColDown:
        out.reserve(width);
        for (int j = 0; j < width; ++j) {
          ScanLine ln{fd, j, {}};
          ln.coords.reserve(height);
          for (int i = 0; i < height; ++i) ln.coords.emplace_back(i, j);
          out.push_back(std::move(ln));
        }
        break;
      case Direction::DiagDR:
        // ordinal o <-> i - j = o - (W - 1); o = 0 is the top-right corner
        out.reserve(height + width - 1);
        for (int o = 0; o < height + width - 1; ++o) {
          const int delta = o - (width - 1);
          ScanLine ln{fd, o, {}};
          const int i_lo = std::max(0, delta);
          const int i_hi = std::min(height - 1, width - 1 + delta);
          for (int i = i_lo; i <= i_hi; ++i) ln.coords.emplace_back(i, i - delta);
          out.push_back(std::move(ln));
        }
        break;
      case Direction::DiagDL:
        // ordinal o = i + j
        out.reserve(height + width - 1);
        for (int o = 0; o < height + width - 1; ++o) {
          ScanLine ln{fd, o, {}};
          const int i_lo = std::max(0, o - (width - 1));
          const int i_hi = std::min(height - 1, o);
          for (int i = i_lo; i <= i_hi; ++i) ln.coords.emplace_back(i, o - i);
          out.push_back(std::move(ln));
        }
        break;
      default:
        throw std::logic_error("not a forward direction");
    }
    return out;
  };

  const int di = static_cast<int>(d);
  if ((di & 1) == 0) {
    lines = forward_of(d);
  } else {
    lines = forward_of(reverse_direction(d));
    for (ScanLine& ln : lines) {
      ln.direction = d;
      std::reverse(ln.coords.begin(), ln.coords.end());
    }
  }
  return lines;
}

ScanIndexSet::ScanIndexSet(int height, int width, std::vector<int32_t> idx,
                           std::vector<uint8_t> mask, std::array<int, 8> line_counts,
                           int n_max, int l_max)
    : height_(height),
      width_(width),
      n_max_(n_max),
      l_max_(l_max),
      line_counts_(line_counts),
      idx_(std::move(idx)),
      mask_(std::move(mask)) {
  const std::size_t plane = static_cast<std::size_t>(n_max_) * l_max_;
  if (idx_.size() != 8 * plane || mask_.size() != 8 * plane)
    throw std::invalid_argument("index/mask tensors must have shape (8, n_max, L_max)");

  const int hw = pixels();
  inv_line_.assign(static_cast<std::size_t>(8) * hw, -1);
  inv_pos_.assign(static_cast<std::size_t>(8) * hw, -1);
  for (int k = 0; k < 8; ++k) {
    for (int l = 0; l < n_max_; ++l) {
      for (int t = 0; t < l_max_; ++t) {
        const int32_t p = idx_[(static_cast<std::size_t>(k) * n_max_ + l) * l_max_ + t];
        const bool m = mask_[(static_cast<std::size_t>(k) * n_max_ + l) * l_max_ + t] != 0;
        if (m != (p >= 0))
          throw std::invalid_argument("mask must be true exactly where idx >= 0");
        if (!m) continue;
        if (p >= hw) throw std::invalid_argument("scan index out of range");
        const std::size_t at = static_cast<std::size_t>(k) * hw + p;
        if (inv_line_[at] >= 0)
          throw std::invalid_argument("pixel visited twice within one direction");
        inv_line_[at] = l;
        inv_pos_[at] = t;
      }
    }
  }
  for (std::size_t i = 0; i < inv_line_.size(); ++i)
    if (inv_line_[i] < 0) throw std::invalid_argument("direction does not cover every pixel");
}

int ScanIndexSet::line_length(int dir, int line) const {
  int len = 0;
  while (len < l_max_ && mask_at(dir, line, len)) ++len;
  return len;
}

Tensor ScanIndexSet::idx_tensor() const {
  Tensor t({8, static_cast<std::size_t>(n_max_), static_cast<std::size_t>(l_max_)});
  for (std::size_t i = 0; i < idx_.size(); ++i) t[i] = static_cast<double>(idx_[i]);
  return t;
}

Tensor ScanIndexSet::mask_tensor() const {
  Tensor t({8, static_cast<std::size_t>(n_max_), static_cast<std::size_t>(l_max_)});
  for (std::size_t i = 0; i < mask_.size(); ++i) t[i] = mask_[i] ? 1.0 : 0.0;
  return t;
}

ScanIndexSet build_index_set(int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("grid dims must be >= 1");

  std::array<std::vector<ScanLine>, 8> per_dir;
  int n_max = 0, l_max = 0;
  std::array<int, 8> counts{};
  for (int k = 0; k < 8; ++k) {
    per_dir[k] = enumerate_scanlines(height, width, static_cast<Direction>(k));
    counts[k] = static_cast<int>(per_dir[k].size());
    n_max = std::max(n_max, counts[k]);
    for (const ScanLine& ln : per_dir[k])
      l_max = std::max(l_max, static_cast<int>(ln.coords.size()));
  }

  const std::size_t plane = static_cast<std::size_t>(n_max) * l_max;
  std::vector<int32_t> idx(8 * plane, -1);
  std::vector<uint8_t> mask(8 * plane, 0);
  for (int k = 0; k < 8; ++k) {
    for (int l = 0; l < counts[k]; ++l) {
      const ScanLine& ln = per_dir[k][l];
      for (std::size_t t = 0; t < ln.coords.size(); ++t) {
        const auto [i, j] = ln.coords[t];
        idx[(static_cast<std::size_t>(k) * n_max + l) * l_max + t] =
            static_cast<int32_t>(i * width + j);
        mask[(static_cast<std::size_t>(k) * n_max + l) * l_max + t] = 1;
      }
    }
  }
  return ScanIndexSet(height, width, std::move(idx), std::move(mask), counts, n_max, l_max);
}

}  // namespace octo
