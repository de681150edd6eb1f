#include "octo/dataset.hpp"

#include <algorithm>
#include <stdexcept>

namespace octo {

ToyDataset gen_dataset(const DatasetConfig& cfg) {
  if (cfg.height < 5 || cfg.width < 5)
    throw std::invalid_argument("bar dataset needs a grid of at least 5x5");
  if (cfg.count < 1) throw std::invalid_argument("dataset count must be >= 1");

  const int h = cfg.height, w = cfg.width;
  // diagonal bars keep at least half the short side so orientation stays visible
  const int min_len = std::max(2, std::min(h, w) / 2);

  ToyDataset ds;
  ds.config = cfg;
  ds.samples.reserve(cfg.count);
  ds.labels.reserve(cfg.count);
  Rng rng(cfg.seed);

  for (int s = 0; s < cfg.count; ++s) {
    const int label = s % 4;
    Tensor x({1, 1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    switch (label) {
      case 0: {
        const int r = rng.uniform_int(0, h - 1);
        for (int j = 0; j < w; ++j) x.at(0, 0, r, j) = 1.0;
        break;
      }
      case 1: {
        const int c = rng.uniform_int(0, w - 1);
        for (int i = 0; i < h; ++i) x.at(0, 0, i, c) = 1.0;
        break;
      }
      case 2: {
        // cells with i - j = delta
        const int delta = rng.uniform_int(-(w - min_len), h - min_len);
        for (int i = std::max(0, delta); i <= std::min(h - 1, w - 1 + delta); ++i)
          x.at(0, 0, i, i - delta) = 1.0;
        break;
      }
      case 3: {
        // cells with i + j = s
        const int sum = rng.uniform_int(min_len - 1, h + w - 1 - min_len);
        for (int i = std::max(0, sum - (w - 1)); i <= std::min(h - 1, sum); ++i)
          x.at(0, 0, i, sum - i) = 1.0;
        break;
      }
    }
    if (cfg.sigma != 0.0)
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += cfg.sigma * rng.normal();
    ds.samples.push_back(std::move(x));
    ds.labels.push_back(label);
  }
  return ds;
}

}  // namespace octo
