#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace octo {

enum class Dtype : uint8_t { F64 = 0, F32 = 1 };

/// Dense row-major tensor, last index fastest. Values are held in double
/// precision; `dtype` only selects the on-disk payload width.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, Dtype dtype = Dtype::F64);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data,
         Dtype dtype = Dtype::F64);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  Dtype dtype() const { return dtype_; }
  void set_dtype(Dtype d) { dtype_ = d; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  /// Flat offset of a multi-index, Σ i_d · stride_d with stride_{r-1} = 1.
  std::size_t offset(const std::vector<std::size_t>& index) const;

  template <typename... Ix>
  double& at(Ix... ix) {
    return data_[flat_of(static_cast<std::size_t>(ix)...)];
  }
  template <typename... Ix>
  double at(Ix... ix) const {
    return data_[flat_of(static_cast<std::size_t>(ix)...)];
  }

  /// Same data, new shape; element counts must match.
  Tensor reshaped(std::vector<std::size_t> shape) const;

  void fill(double v);
  bool all_finite() const;

 private:
  template <typename... Ix>
  std::size_t flat_of(Ix... ix) const {
    const std::size_t idx[] = {ix...};
    std::size_t flat = 0;
    for (std::size_t d = 0; d < sizeof...(Ix); ++d) flat = flat * shape_[d] + idx[d];
    return flat;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  Dtype dtype_ = Dtype::F64;
};

bool same_shape(const Tensor& a, const Tensor& b);
/// Exact element/shape/dtype equality (bit-level on values).
bool bits_equal(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Spatial feature map, shape (B, C, H, W). All values finite.
struct FeatureMap {
  Tensor tensor;

  FeatureMap() = default;
  explicit FeatureMap(Tensor t);

  std::size_t batch() const { return tensor.dim(0); }
  std::size_t channels() const { return tensor.dim(1); }
  std::size_t height() const { return tensor.dim(2); }
  std::size_t width() const { return tensor.dim(3); }

  double& at(std::size_t b, std::size_t c, std::size_t i, std::size_t j) {
    return tensor.at(b, c, i, j);
  }
  double at(std::size_t b, std::size_t c, std::size_t i, std::size_t j) const {
    return tensor.at(b, c, i, j);
  }
};

// ---------------------------------------------------------------------------
// On-disk formats.
//
// OTEN tensor file: magic "OTEN", version byte 1, dtype byte (0 = f64,
// 1 = f32), rank as u32 little-endian, each dimension as u32 little-endian,
// then the payload as little-endian IEEE-754 values in row-major order.

class TensorIoError : public std::runtime_error {
 public:
  TensorIoError(const std::string& path, const std::string& reason)
      : std::runtime_error(path + ": " + reason) {}
};

class BadMagicError : public TensorIoError {
 public:
  explicit BadMagicError(const std::string& path)
      : TensorIoError(path, "bad magic, not an OTEN file") {}
};

class TruncatedFileError : public TensorIoError {
 public:
  explicit TruncatedFileError(const std::string& path)
      : TensorIoError(path, "truncated payload") {}
};

class UnknownDtypeError : public TensorIoError {
 public:
  UnknownDtypeError(const std::string& path, unsigned code)
      : TensorIoError(path, "unknown dtype code " + std::to_string(code)) {}
};

void tensor_save(const Tensor& t, const std::filesystem::path& path);
Tensor tensor_load(const std::filesystem::path& path);

/// Binary PGM (P5) render of a (H, W) tensor. Pixels are
/// round(255 * (v - min) / (max - min)); a constant map renders as all zeros.
void heatmap_save_pgm(const Tensor& values, const std::filesystem::path& path);

/// Locale-independent decimal formatting ('.', shortest roundtrip form).
std::string format_double(double v);

}  // namespace octo
