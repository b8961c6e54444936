#ifndef DEEPSRQ_TENSOR_HPP
#define DEEPSRQ_TENSOR_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepsrq {

enum class NnErrc { ShapeMismatch, OddExtent, NoRecordedForward, BadConfig, UnknownLayer };

inline const char* to_string(NnErrc c) {
  switch (c) {
    case NnErrc::ShapeMismatch: return "ShapeMismatch";
    case NnErrc::OddExtent: return "OddExtent";
    case NnErrc::NoRecordedForward: return "NoRecordedForward";
    case NnErrc::BadConfig: return "BadConfig";
    case NnErrc::UnknownLayer: return "UnknownLayer";
  }
  return "Unknown";
}

class NnError : public std::runtime_error {
 public:
  NnError(NnErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  NnErrc code() const noexcept { return code_; }

 private:
  NnErrc code_;
};

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_string(const Shape& s) {
  if (s.size() == 1) return std::to_string(s[0]);
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + ")";
}

/// Dense row-major array. The last extent is contiguous.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(std::initializer_list<int> shape, T fill = T{}) : Tensor(Shape(shape), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_size(shape_))
      throw NnError(NnErrc::ShapeMismatch, "value count does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  int extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size())
      throw NnError(NnErrc::ShapeMismatch, "cannot reshape " + shape_string(shape_) + " to " + shape_string(s));
    return Tensor(std::move(s), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(v));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// A trainable tensor with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}
};

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw NnError(NnErrc::ShapeMismatch, std::string(what) + ": expected " + shape_string(expected) +
                                             ", got " + shape_string(t.shape()));
}

}  // namespace deepsrq

#endif  // DEEPSRQ_TENSOR_HPP
