#include "octo/tensor.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>

namespace octo {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, Dtype dtype)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0), dtype_(dtype) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data, Dtype dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  if (shape_product(shape_) != data_.size())
    throw std::invalid_argument("tensor data length does not match shape product");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

std::size_t Tensor::offset(const std::vector<std::size_t>& index) const {
  if (index.size() != shape_.size())
    throw std::invalid_argument("index rank does not match tensor rank");
  std::size_t flat = 0;
  for (std::size_t d = 0; d < index.size(); ++d) {
    if (index[d] >= shape_[d]) throw std::out_of_range("tensor index out of range");
    flat = flat * shape_[d] + index[d];
  }
  return flat;
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  if (shape_product(shape) != data_.size())
    throw std::invalid_argument("reshape changes element count");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  t.dtype_ = dtype_;
  return t;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

bool bits_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) m = std::max(m, std::fabs(t[i]));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw std::invalid_argument("shape mismatch in max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

FeatureMap::FeatureMap(Tensor t) : tensor(std::move(t)) {
  if (tensor.rank() != 4)
    throw std::invalid_argument("feature map must have shape (B, C, H, W)");
  for (std::size_t d = 0; d < 4; ++d)
    if (tensor.dim(d) < 1) throw std::invalid_argument("feature map dimensions must be >= 1");
  if (!tensor.all_finite())
    throw std::invalid_argument("feature map contains non-finite values");
}

namespace {

constexpr char kMagic[4] = {'O', 'T', 'E', 'N'};
constexpr uint8_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  put_u32(out, static_cast<uint32_t>(v & 0xffffffffu));
  put_u32(out, static_cast<uint32_t>(v >> 32));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(bytes_[pos_++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    const uint64_t lo = u32();
    const uint64_t hi = u32();
    return lo | (hi << 32);
  }
  void raw(char* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

 private:
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw TruncatedFileError(path_);
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void tensor_save(const Tensor& t, const std::filesystem::path& path) {
  std::string out;
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  out.push_back(static_cast<char>(t.dtype()));
  put_u32(out, static_cast<uint32_t>(t.rank()));
  for (std::size_t d = 0; d < t.rank(); ++d)
    put_u32(out, static_cast<uint32_t>(t.dim(d)));
  if (t.dtype() == Dtype::F64) {
    for (std::size_t i = 0; i < t.size(); ++i)
      put_u64(out, std::bit_cast<uint64_t>(t[i]));
  } else {
    for (std::size_t i = 0; i < t.size(); ++i)
      put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(t[i])));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw TensorIoError(path.string(), "cannot open for writing: " + std::string(std::strerror(errno)));
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw TensorIoError(path.string(), "write failed: " + std::string(std::strerror(errno)));
}

Tensor tensor_load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorIoError(path.string(), "cannot open: " + std::string(std::strerror(errno)));
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  ByteReader r(bytes, path.string());
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw BadMagicError(path.string());
  const uint8_t version = r.u8();
  if (version != kVersion)
    throw TensorIoError(path.string(), "unsupported version " + std::to_string(version));
  const uint8_t dtype_code = r.u8();
  if (dtype_code > 1) throw UnknownDtypeError(path.string(), dtype_code);
  const Dtype dtype = static_cast<Dtype>(dtype_code);

  const uint32_t rank = r.u32();
  std::vector<std::size_t> shape(rank);
  for (uint32_t d = 0; d < rank; ++d) shape[d] = r.u32();

  Tensor t(shape, dtype);
  if (dtype == Dtype::F64) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(r.u64());
  } else {
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<double>(std::bit_cast<float>(r.u32()));
  }
  return t;
}

void heatmap_save_pgm(const Tensor& values, const std::filesystem::path& path) {
  if (values.rank() != 2) throw std::invalid_argument("heatmap tensor must be (H, W)");
  if (!values.all_finite()) throw std::invalid_argument("heatmap values must be finite");
  const std::size_t h = values.dim(0), w = values.dim(1);

  double lo = values[0], hi = values[0];
  for (std::size_t i = 0; i < values.size(); ++i) {
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
  }

  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    int pixel = 0;
    if (hi > lo) pixel = static_cast<int>(std::lround(255.0 * (values[i] - lo) / (hi - lo)));
    out.push_back(static_cast<char>(static_cast<uint8_t>(pixel)));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw TensorIoError(path.string(), "cannot open for writing: " + std::string(std::strerror(errno)));
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw TensorIoError(path.string(), "write failed: " + std::string(std::strerror(errno)));
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace octo
