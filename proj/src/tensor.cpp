#include "tiednet/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "tiednet/autograd.hpp"

namespace tiednet {

const char* dtype_name(DType dtype) {
  return dtype == DType::f32 ? "f32" : "f64";
}

std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ", ";
    os << dims[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& dims) {
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Shape contiguous_strides(const Shape& dims) {
  Shape strides(dims.size(), 1);
  for (int i = static_cast<int>(dims.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * dims[i + 1];
  }
  return strides;
}

std::size_t Storage::size() const {
  return std::visit([](const auto& v) { return v.size(); }, buffer);
}

Tensor::Tensor(Shape dims, DType dtype) : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d < 1) {
      throw ShapeError("tensor extents must be >= 1, got " + shape_str(dims_));
    }
  }
  strides_ = contiguous_strides(dims_);
  storage_ = std::make_shared<Storage>();
  const auto n = static_cast<std::size_t>(shape_numel(dims_));
  if (dtype == DType::f32) {
    storage_->buffer = std::vector<float>(n, 0.0f);
  } else {
    storage_->buffer = std::vector<double>(n, 0.0);
  }
}

Tensor Tensor::zeros(Shape dims, DType dtype) {
  return Tensor(std::move(dims), dtype);
}

Tensor Tensor::full(Shape dims, double value, DType dtype) {
  Tensor t(std::move(dims), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape dims, std::span<const double> values,
                           DType dtype) {
  Tensor t(std::move(dims), dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(t.dims()));
  }
  dispatch(dtype, [&]<typename T>() {
    auto* out = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      out[i] = static_cast<T>(values[i]);
    }
  });
  return t;
}

Tensor Tensor::from_values(Shape dims, std::initializer_list<double> values,
                           DType dtype) {
  return from_values(std::move(dims),
                     std::span<const double>(values.begin(), values.size()),
                     dtype);
}

Tensor Tensor::scalar(double value, DType dtype) {
  return full({}, value, dtype);
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw RankError("axis " + std::to_string(axis) + " out of range for " +
                    shape_str(dims_));
  }
  return dims_[axis];
}

DType Tensor::dtype() const {
  if (!storage_) throw ContractError("undefined tensor");
  return storage_->dtype();
}

bool Tensor::is_contiguous() const {
  return strides_ == contiguous_strides(dims_);
}

void Tensor::check_typed_access(DType want) const {
  if (!storage_) throw ContractError("access to undefined tensor");
  if (storage_->dtype() != want) {
    throw ContractError(std::string("dtype mismatch: tensor is ") +
                        dtype_name(storage_->dtype()) + ", accessed as " +
                        dtype_name(want));
  }
}

std::int64_t Tensor::offset_of(std::span<const std::int64_t> index) const {
  if (index.size() != dims_.size()) {
    throw RankError("index of rank " + std::to_string(index.size()) +
                    " for tensor " + shape_str(dims_));
  }
  std::int64_t off = offset_;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= dims_[i]) {
      throw IndexError("index " + std::to_string(index[i]) + " out of range " +
                       "on axis " + std::to_string(i) + " of " +
                       shape_str(dims_));
    }
    off += index[i] * strides_[i];
  }
  return off;
}

double Tensor::at(std::span<const std::int64_t> index) const {
  const auto off = offset_of(index);
  return dispatch(dtype(), [&]<typename T>() -> double {
    return static_cast<double>(storage_->vec<T>()[off]);
  });
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  return at(std::span<const std::int64_t>(index.begin(), index.size()));
}

void Tensor::set(std::span<const std::int64_t> index, double value) {
  const auto off = offset_of(index);
  dispatch(dtype(), [&]<typename T>() {
    storage_->vec<T>()[off] = static_cast<T>(value);
  });
}

void Tensor::set(std::initializer_list<std::int64_t> index, double value) {
  set(std::span<const std::int64_t>(index.begin(), index.size()), value);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(dims_));
  }
  return dispatch(dtype(), [&]<typename T>() -> double {
    return static_cast<double>(storage_->vec<T>()[offset_]);
  });
}

namespace {

// Visits every element offset of a strided tensor in logical order.
template <class F>
void for_each_offset(const Shape& dims, const Shape& strides,
                     std::int64_t base, F&& f) {
  const int r = static_cast<int>(dims.size());
  if (r == 0) {
    f(base);
    return;
  }
  std::vector<std::int64_t> idx(r, 0);
  const std::int64_t n = shape_numel(dims);
  std::int64_t off = base;
  for (std::int64_t i = 0; i < n; ++i) {
    f(off);
    for (int a = r - 1; a >= 0; --a) {
      if (++idx[a] < dims[a]) {
        off += strides[a];
        break;
      }
      off -= strides[a] * (dims[a] - 1);
      idx[a] = 0;
    }
  }
}

}  // namespace

std::vector<double> Tensor::values() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(numel()));
  dispatch(dtype(), [&]<typename T>() {
    const auto& buf = storage_->vec<T>();
    for_each_offset(dims_, strides_, offset_,
                    [&](std::int64_t off) { out.push_back(buf[off]); });
  });
  return out;
}

Tensor Tensor::contiguous() const {
  if (is_contiguous()) return *this;
  Tensor out(dims_, dtype());
  dispatch(dtype(), [&]<typename T>() {
    const auto& buf = storage_->vec<T>();
    T* dst = out.data<T>();
    for_each_offset(dims_, strides_, offset_,
                    [&](std::int64_t off) { *dst++ = buf[off]; });
  });
  return out;
}

Tensor Tensor::clone() const {
  Tensor out(dims_, dtype());
  out.copy_from(*this);
  return out;
}

Tensor Tensor::to(DType target) const {
  Tensor out(dims_, target);
  const auto v = values();
  dispatch(target, [&]<typename T>() {
    T* dst = out.data<T>();
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
  });
  return out;
}

void Tensor::copy_from(const Tensor& src) {
  if (src.dims() != dims_) {
    throw ShapeError("copy_from: " + shape_str(src.dims()) + " into " +
                     shape_str(dims_));
  }
  if (src.dtype() != dtype()) {
    throw ContractError("copy_from: dtype mismatch");
  }
  dispatch(dtype(), [&]<typename T>() {
    const Tensor s = src.contiguous();
    const T* from = s.data<T>();
    auto& buf = storage_->vec<T>();
    if (is_contiguous()) {
      std::copy(from, from + numel(), buf.begin() + offset_);
      return;
    }
    for_each_offset(dims_, strides_, offset_,
                    [&](std::int64_t off) { buf[off] = *from++; });
  });
}

void Tensor::fill(double value) {
  dispatch(dtype(), [&]<typename T>() {
    auto& buf = storage_->vec<T>();
    if (is_contiguous()) {
      std::fill_n(buf.begin() + offset_, numel(), static_cast<T>(value));
      return;
    }
    for_each_offset(dims_, strides_, offset_,
                    [&](std::int64_t off) { buf[off] = static_cast<T>(value); });
  });
}

Tensor Tensor::view_transposed() const {
  if (rank() != 2) {
    throw RankError("transpose needs a rank-2 tensor, got " +
                    shape_str(dims_));
  }
  Tensor v;
  v.storage_ = storage_;
  v.offset_ = offset_;
  v.dims_ = {dims_[1], dims_[0]};
  v.strides_ = {strides_[1], strides_[0]};
  return v;
}

Tensor Tensor::view_reshaped(Shape dims) const {
  if (shape_numel(dims) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(dims_) + " to " +
                     shape_str(dims));
  }
  if (!is_contiguous()) {
    throw ContractError("view_reshaped requires a contiguous tensor");
  }
  Tensor v;
  v.storage_ = storage_;
  v.offset_ = offset_;
  v.dims_ = std::move(dims);
  v.strides_ = contiguous_strides(v.dims_);
  return v;
}

bool Tensor::requires_grad() const {
  const Tape* tape = Tape::active();
  return node_ >= 0 && tape != nullptr && tape->serial() == tape_serial_;
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.node_ = -1;
  t.tape_serial_ = 0;
  return t;
}

}  // namespace tiednet
