#include "duplex/numerics/array.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>

namespace duplex::num {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return shape.empty() ? 0 : n;
}

Array::Array(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill), cols_(trailing(shape_)) {}

Array::Array(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)), cols_(trailing(shape_)) {
  if (shape_product(shape_) != data_.size()) {
    throw NumericError("array: shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }
}

Array Array::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw NumericError("array: ragged initializer");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Array({r, c}, std::move(data));
}

std::size_t Array::trailing(const Shape& shape) {
  if (shape.size() < 2) return shape.empty() ? 0 : 1;
  std::size_t n = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) n *= shape[i];
  return n;
}

Array Array::reshaped(Shape shape) const {
  if (shape_product(shape) != data_.size()) {
    throw NumericError("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  return Array(std::move(shape), data_);
}

void Array::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void check_finite(const Array& a, std::string_view what) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i])) {
      std::ostringstream os;
      os << what << ": non-finite value " << a[i] << " at flat index " << i;
      if (a.rank() == 2) os << " (row " << i / a.cols() << ", col " << i % a.cols() << ")";
      throw NumericError(os.str());
    }
  }
}

bool all_finite(const Array& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](float v) { return std::isfinite(v); });
}

void require_same_shape(const Array& a, const Array& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw NumericError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                       " vs " + shape_string(b.shape()));
  }
}

float max_abs_diff(const Array& a, const Array& b) {
  require_same_shape(a, b, "max_abs_diff");
  float m = 0.0F;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::uint64_t checksum(const Array& a) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(a.data());
  for (std::size_t i = 0; i < a.size() * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  for (auto e : a.shape()) {
    h ^= e;
    h *= 1099511628211ULL;
  }
  return h;
}

Array matmul(const Array& a, const Array& b) {
  if (a.cols() != b.rows()) {
    throw NumericError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " * " +
                       shape_string(b.shape()));
  }
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  Array out = Array::matrix(m, n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* ar = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const float* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * br[j];
    }
    float* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

Array matmul_nt(const Array& a, const Array& b) {
  if (a.cols() != b.cols()) {
    throw NumericError("matmul_nt: inner dimensions disagree " + shape_string(a.shape()) +
                       " * " + shape_string(b.shape()) + "^T");
  }
  // transposing first lets the row kernel vectorise over the output columns
  const std::size_t n = b.rows();
  const std::size_t k = b.cols();
  Array bt = Array::matrix(k, n);
  for (std::size_t j = 0; j < n; ++j) {
    const float* br = b.data() + j * k;
    for (std::size_t p = 0; p < k; ++p) bt(p, j) = br[p];
  }
  return matmul(a, bt);
}

Array softmax_rows(const Array& m) {
  check_finite(m, "softmax_rows input");
  Array out(m.shape());
  const std::size_t c = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto o = out.row(r);
    const float mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(static_cast<double>(in[j]) - mx);
      o[j] = static_cast<float>(e);
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) o[j] = static_cast<float>(o[j] / sum);
  }
  return out;
}

Array linear_map(const Array& x, const Array& w, const Array& b) {
  if (x.cols() != w.rows()) {
    throw NumericError("linear_map: x " + shape_string(x.shape()) + " incompatible with W " +
                       shape_string(w.shape()));
  }
  Array y = matmul(x, w);
  if (!b.empty()) {
    if (b.size() != w.cols()) {
      throw NumericError("linear_map: bias " + shape_string(b.shape()) +
                         " incompatible with W " + shape_string(w.shape()));
    }
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto row = y.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
  }
  return y;
}

}  // namespace duplex::num
