#pragma once

#include <cstdint>
#include <vector>

#include "octo/rng.hpp"
#include "octo/tensor.hpp"

namespace octo {

struct DatasetConfig {
  int height = 16;
  int width = 16;
  double sigma = 0.2;
  int count = 1000;
  uint64_t seed = 1;
};

/// Oriented unit-intensity bars plus Gaussian noise. Classes: 0 horizontal,
/// 1 vertical, 2 down-right diagonal, 3 down-left diagonal. Labels cycle
/// 0,1,2,3,... so class counts differ by at most one.
struct ToyDataset {
  DatasetConfig config;
  std::vector<Tensor> samples;  // each (1, 1, H, W)
  std::vector<int> labels;
};

ToyDataset gen_dataset(const DatasetConfig& cfg);

}  // namespace octo
