#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace duplex::num {

using Shape = std::vector<std::size_t>;

/// Raised when a value leaves the finite range or shapes disagree.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& shape);
std::size_t shape_product(const Shape& shape);

/// Dense row-major f32 array. Rank-2 is the working case for every
/// operator; higher ranks only appear as storage (checkpoints, latents).
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, float fill = 0.0F);
  Array(Shape shape, std::vector<float> data);

  static Array matrix(std::size_t rows, std::size_t cols, float fill = 0.0F) {
    return Array({rows, cols}, fill);
  }
  static Array from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Array scalar(float v) { return Array({1, 1}, std::vector<float>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  /// Leading extent.
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  /// Product of all trailing extents.
  std::size_t cols() const { return cols_; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::span<float> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const float> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Same data, new shape of equal element count.
  Array reshaped(Shape shape) const;
  void fill(float v);

  bool operator==(const Array& other) const = default;

 private:
  static std::size_t trailing(const Shape& shape);

  Shape shape_;
  std::vector<float> data_;
  std::size_t cols_ = 0;
};

/// Throws NumericError naming the first non-finite element.
void check_finite(const Array& a, std::string_view what);
bool all_finite(const Array& a);
void require_same_shape(const Array& a, const Array& b, std::string_view what);

float max_abs_diff(const Array& a, const Array& b);
/// FNV-1a over the raw bytes; used to compare arrays for identity.
std::uint64_t checksum(const Array& a);

// Plain (non-recorded) kernels. Accumulation happens in double.
Array matmul(const Array& a, const Array& b);
/// a * b^T
Array matmul_nt(const Array& a, const Array& b);
Array softmax_rows(const Array& m);
/// y = x W + b, with b a single row broadcast over x's rows (b may be empty).
Array linear_map(const Array& x, const Array& w, const Array& b);

}  // namespace duplex::num
