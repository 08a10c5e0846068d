#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ralgen/errors.hpp"

namespace ralgen {

// Dense row-major tensor of doubles, rank 0..4. Convention for rank-4 data
// is NCHW. All training math runs in double; checkpoints store float32.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
      throw IoError("tensor shape/data mismatch");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW accessors.
  double& at4(int n, int c, int h, int w) {
    return data_[static_cast<size_t>(((int64_t(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at4(int n, int c, int h, int w) const {
    return data_[static_cast<size_t>(((int64_t(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double& at3(int c, int h, int w) {
    return data_[static_cast<size_t>((int64_t(c) * shape_[1] + h) * shape_[2] + w)];
  }
  double at3(int c, int h, int w) const {
    return data_[static_cast<size_t>((int64_t(c) * shape_[1] + h) * shape_[2] + w)];
  }
  double& at2(int i, int j) { return data_[static_cast<size_t>(int64_t(i) * shape_[1] + j)]; }
  double at2(int i, int j) const { return data_[static_cast<size_t>(int64_t(i) * shape_[1] + j)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  static int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

// Integer tensor for code indices, same layout conventions ([N,H,W] mostly).
class ITensor {
 public:
  ITensor() = default;
  explicit ITensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(Tensor::numel_of(shape_)), 0);
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  int32_t* data() { return data_.data(); }
  const int32_t* data() const { return data_.data(); }
  int32_t& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  int32_t operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  int32_t& at3(int n, int h, int w) {
    return data_[static_cast<size_t>((int64_t(n) * shape_[1] + h) * shape_[2] + w)];
  }
  int32_t at3(int n, int h, int w) const {
    return data_[static_cast<size_t>((int64_t(n) * shape_[1] + h) * shape_[2] + w)];
  }

 private:
  std::vector<int> shape_;
  std::vector<int32_t> data_;
};

}  // namespace ralgen
