#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "tiednet/error.hpp"

namespace tiednet {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::int64_t>;

const char* dtype_name(DType dtype);
std::string shape_str(const Shape& dims);
std::int64_t shape_numel(const Shape& dims);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

// Invokes f.template operator()<T>() with T the C++ type behind `dtype`.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) {
    return f.template operator()<float>();
  }
  return f.template operator()<double>();
}

// Flat, typed buffer shared between a tensor and all of its views.
struct Storage {
  std::variant<std::vector<float>, std::vector<double>> buffer;

  DType dtype() const { return buffer.index() == 0 ? DType::f32 : DType::f64; }
  std::size_t size() const;

  template <class T>
  std::vector<T>& vec() {
    return std::get<std::vector<T>>(buffer);
  }
  template <class T>
  const std::vector<T>& vec() const {
    return std::get<std::vector<T>>(buffer);
  }
};

class Tape;

/// Dense n-dimensional array. Copies are shallow: two Tensor values may
/// alias one Storage (views created by view_transposed / view_reshaped do).
/// A tensor produced by a recorded operation also carries a handle into the
/// tape that produced it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape dims, DType dtype);

  static Tensor zeros(Shape dims, DType dtype = DType::f32);
  static Tensor full(Shape dims, double value, DType dtype = DType::f32);
  static Tensor from_values(Shape dims, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_values(Shape dims, std::initializer_list<double> values,
                            DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return storage_ != nullptr; }
  const Shape& dims() const { return dims_; }
  const Shape& strides() const { return strides_; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(dims_.size()); }
  std::int64_t numel() const { return shape_numel(dims_); }
  DType dtype() const;
  bool is_contiguous() const;

  // Identity of the underlying buffer; equal for a tensor and its views.
  const void* storage_id() const { return storage_.get(); }

  double at(std::span<const std::int64_t> index) const;
  double at(std::initializer_list<std::int64_t> index) const;
  void set(std::span<const std::int64_t> index, double value);
  void set(std::initializer_list<std::int64_t> index, double value);
  double item() const;

  // Elements in logical row-major order, widened to double.
  std::vector<double> values() const;
  void copy_from(const Tensor& src);
  void fill(double value);

  Tensor contiguous() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  // Raw views sharing storage. Not recorded on any tape.
  Tensor view_transposed() const;
  Tensor view_reshaped(Shape dims) const;

  template <class T>
  T* data() {
    check_typed_access(dtype_of<T>());
    return storage_->vec<T>().data() + offset_;
  }
  template <class T>
  const T* data() const {
    check_typed_access(dtype_of<T>());
    return storage_->vec<T>().data() + offset_;
  }

  // Autograd handle. A tensor requires grad when it was produced on the
  // currently active tape from at least one tracked input.
  bool requires_grad() const;
  std::int32_t node() const { return node_; }
  std::uint64_t tape_serial() const { return tape_serial_; }
  Tensor detach() const;

 private:
  friend class Tape;

  std::int64_t offset_of(std::span<const std::int64_t> index) const;
  void check_typed_access(DType want) const;

  std::shared_ptr<Storage> storage_;
  Shape dims_;
  Shape strides_;
  std::int64_t offset_ = 0;
  std::uint64_t tape_serial_ = 0;
  std::int32_t node_ = -1;
};

Shape contiguous_strides(const Shape& dims);

}  // namespace tiednet
