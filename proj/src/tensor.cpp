// SPDX-License-Identifier: Apache-2.0

#include "stcmix/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "stcmix/rng.hpp"

namespace stcmix {

static size_t shape_product(const Shape& shape) {
  size_t n = 1;
  for (size_t e : shape) {
    if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape");
    n *= e;
  }
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_product(shape_))
    throw std::invalid_argument("Tensor: data length does not match shape");
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::randn(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = rng.normal();
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = rng.uniform(lo, hi);
  return t;
}

size_t Tensor::dim(size_t i) const {
  if (i >= shape_.size()) throw std::out_of_range("Tensor::dim: axis out of range");
  return shape_[i];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ')';
  return os.str();
}

size_t Tensor::offset(std::span<const size_t> index) const {
  if (index.size() != shape_.size())
    throw std::invalid_argument("Tensor::offset: index rank mismatch");
  size_t off = 0;
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape_[i]) throw std::out_of_range("Tensor::offset: index out of range");
    off = off * shape_[i] + index[i];
  }
  return off;
}

double& Tensor::at(std::initializer_list<size_t> index) {
  return data_[offset(std::span<const size_t>(index.begin(), index.size()))];
}

double Tensor::at(std::initializer_list<size_t> index) const {
  return data_[offset(std::span<const size_t>(index.begin(), index.size()))];
}

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_product(new_shape) != data_.size())
    throw std::invalid_argument("Tensor::reshape: element count mismatch");
  return Tensor(std::move(new_shape), data_);
}

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

Tensor& Tensor::add_(const Tensor& other) {
  check_same_shape(*this, other, "Tensor::add_");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::sub_(const Tensor& other) {
  check_same_shape(*this, other, "Tensor::sub_");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::mul_(const Tensor& other) {
  check_same_shape(*this, other, "Tensor::mul_");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] *= other.data_[i];
  return *this;
}

Tensor& Tensor::scale_(double factor) {
  for (double& v : data_) v *= factor;
  return *this;
}

Tensor Tensor::add(const Tensor& other) const { return Tensor(*this).add_(other); }
Tensor Tensor::mul(const Tensor& other) const { return Tensor(*this).mul_(other); }
Tensor Tensor::scaled(double factor) const { return Tensor(*this).scale_(factor); }

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::mean() const {
  if (data_.empty()) throw std::domain_error("Tensor::mean: empty tensor");
  return sum() / static_cast<double>(data_.size());
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  return shape_ == other.shape_ &&
         std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: operands must be rank 2");
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw std::invalid_argument("matmul: inner dimensions differ: " + a.shape_str() +
                                " vs " + b.shape_str());
  Tensor out({m, n});
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (size_t i = 0; i < m; ++i) {
    for (size_t t = 0; t < k; ++t) {
      const double av = ap[i * k + t];
      const double* brow = bp + t * n;
      double* orow = op + i * n;
      for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

static std::vector<size_t> row_major_strides(const Shape& shape) {
  std::vector<size_t> strides(shape.size(), 1);
  for (size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

static void copy_region_rec(double* dst, const double* src,
                            const std::vector<size_t>& dst_strides,
                            const std::vector<size_t>& src_strides,
                            std::span<const size_t> dst_lo, std::span<const size_t> src_lo,
                            std::span<const size_t> extents, size_t axis, size_t dst_off,
                            size_t src_off) {
  if (axis + 1 == extents.size()) {
    std::memcpy(dst + dst_off + dst_lo[axis], src + src_off + src_lo[axis],
                extents[axis] * sizeof(double));
    return;
  }
  for (size_t i = 0; i < extents[axis]; ++i) {
    copy_region_rec(dst, src, dst_strides, src_strides, dst_lo, src_lo, extents, axis + 1,
                    dst_off + (dst_lo[axis] + i) * dst_strides[axis],
                    src_off + (src_lo[axis] + i) * src_strides[axis]);
  }
}

void copy_region(Tensor& dst, std::span<const size_t> dst_lo, const Tensor& src,
                 std::span<const size_t> src_lo, std::span<const size_t> extents) {
  const size_t rank = dst.rank();
  if (src.rank() != rank || dst_lo.size() != rank || src_lo.size() != rank ||
      extents.size() != rank)
    throw std::invalid_argument("copy_region: rank mismatch");
  for (size_t i = 0; i < rank; ++i) {
    if (extents[i] == 0) return;
    if (dst_lo[i] + extents[i] > dst.dim(i) || src_lo[i] + extents[i] > src.dim(i))
      throw std::out_of_range("copy_region: box exceeds tensor bounds");
  }
  copy_region_rec(dst.data(), src.data(), row_major_strides(dst.shape()),
                  row_major_strides(src.shape()), dst_lo, src_lo, extents, 0, 0, 0);
}

Tensor slice_region(const Tensor& src, std::span<const size_t> lo,
                    std::span<const size_t> extents) {
  Tensor out(Shape(extents.begin(), extents.end()));
  std::vector<size_t> zero(src.rank(), 0);
  copy_region(out, zero, src, lo, extents);
  return out;
}

Tensor l2_normalize(const Tensor& rows) {
  if (rows.rank() != 1 && rows.rank() != 2)
    throw std::invalid_argument("l2_normalize: expected rank 1 or 2, got " + rows.shape_str());
  const size_t b = rows.rank() == 2 ? rows.dim(0) : 1;
  const size_t d = rows.rank() == 2 ? rows.dim(1) : rows.dim(0);
  Tensor out = rows;
  for (size_t i = 0; i < b; ++i) {
    double* row = out.data() + i * d;
    double ss = 0.0;
    for (size_t j = 0; j < d; ++j) ss += row[j] * row[j];
    const double norm = std::sqrt(ss);
    if (norm == 0.0)
      throw std::domain_error("l2_normalize: zero-norm row " + std::to_string(i));
    for (size_t j = 0; j < d; ++j) row[j] /= norm;
  }
  return out;
}

CrossEntropyResult softmax_cross_entropy(const Tensor& logits,
                                         std::span<const size_t> targets) {
  if (logits.rank() != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be (B, K)");
  const size_t b = logits.dim(0), k = logits.dim(1);
  if (targets.size() != b)
    throw std::invalid_argument("softmax_cross_entropy: one target per row required");
  if (!logits.all_finite())
    throw std::domain_error("softmax_cross_entropy: non-finite logits");

  CrossEntropyResult res;
  res.grad = Tensor(logits.shape());
  size_t correct = 0;
  for (size_t i = 0; i < b; ++i) {
    const size_t target = targets[i];
    if (target >= k)
      throw std::out_of_range("softmax_cross_entropy: target index " +
                              std::to_string(target) + " out of range for K=" +
                              std::to_string(k));
    const double* row = logits.data() + i * k;
    double* grow = res.grad.data() + i * k;
    double mx = row[0];
    size_t argmax = 0;
    for (size_t j = 1; j < k; ++j)
      if (row[j] > mx) {
        mx = row[j];
        argmax = j;
      }
    double z = 0.0;
    for (size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double logz = std::log(z);
    res.loss += (logz - (row[target] - mx));
    for (size_t j = 0; j < k; ++j)
      grow[j] = (std::exp(row[j] - mx) / z - (j == target ? 1.0 : 0.0)) /
                static_cast<double>(b);
    if (argmax == target) ++correct;
  }
  res.loss /= static_cast<double>(b);
  res.accuracy = static_cast<double>(correct) / static_cast<double>(b);
  return res;
}

// ---- serialization ----

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char buf[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(buf), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char buf[4];
  is.read(reinterpret_cast<char*>(buf), 4);
  if (!is) throw std::runtime_error("tensor blob: truncated header");
  return static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
         (static_cast<uint32_t>(buf[2]) << 16) | (static_cast<uint32_t>(buf[3]) << 24);
}

void put_f64(std::ostream& os, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

double get_f64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw std::runtime_error("tensor blob: truncated payload");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

} // namespace

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_tensor: cannot open " + path);
  os.write("NDT1", 4);
  put_u32(os, static_cast<uint32_t>(t.rank()));
  for (size_t i = 0; i < t.rank(); ++i) put_u32(os, static_cast<uint32_t>(t.dim(i)));
  for (size_t i = 0; i < t.size(); ++i) put_f64(os, t[i]);
  if (!os) throw std::runtime_error("save_tensor: write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensor: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "NDT1", 4) != 0)
    throw std::runtime_error("load_tensor: bad magic in " + path);
  const uint32_t rank = get_u32(is);
  if (rank > 16) throw std::runtime_error("load_tensor: implausible rank in " + path);
  Shape shape(rank);
  size_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = get_u32(is);
    if (shape[i] == 0) throw std::runtime_error("load_tensor: zero extent in " + path);
    n *= shape[i];
  }
  std::vector<double> data(n);
  for (size_t i = 0; i < n; ++i) data[i] = get_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

} // namespace stcmix
