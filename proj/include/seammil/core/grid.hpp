#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "seammil/core/error.hpp"

namespace seammil {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Vector storage aligned for Eigen's packet loads. Maps over it then take
// the same vectorized path regardless of heap layout, which keeps results
// bitwise reproducible under -march=native.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;

// Dense channels x height x width grid, row-major within each plane.
// Images, feature maps and activation maps all share this storage.
template <typename T>
class Grid {
 public:
  Grid() = default;

  Grid(int channels, int height, int width, T fill = T(0))
      : channels_(channels), height_(height), width_(width) {
    if (channels < 0 || height < 0 || width < 0) {
      throw DimensionError("negative grid dimension " + detail::shape_str(channels, height, width));
    }
    data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int plane() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  const T& operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  std::span<T> channel(int c) {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(c) * plane(), plane());
  }
  std::span<const T> channel(int c) const {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(c) * plane(), plane());
  }

  // channels x (height*width) view; instances/pixels are columns.
  MatrixMap<T> matrix() { return MatrixMap<T>(data_.data(), channels_, plane()); }
  ConstMatrixMap<T> matrix() const { return ConstMatrixMap<T>(data_.data(), channels_, plane()); }

  bool same_shape(const Grid& other) const {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }

  std::string shape() const { return detail::shape_str(channels_, height_, width_); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Grid& operator+=(const Grid& other) {
    require_same_shape(other, "grid +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Grid& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const Grid& other, const char* what) const {
    if (!same_shape(other)) {
      throw DimensionError(std::string(what) + ": shape " + shape() + " vs " + other.shape());
    }
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

  template <typename U>
  Grid<U> cast() const {
    Grid<U> out(channels_, height_, width_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static Grid from_matrix(const Matrix<T>& m, int height, int width) {
    if (m.cols() != static_cast<Eigen::Index>(height) * width) {
      throw DimensionError("matrix columns do not match " + std::to_string(height) + "x" +
                           std::to_string(width));
    }
    Grid g(static_cast<int>(m.rows()), height, width);
    g.matrix() = m;
    return g;
  }

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  Buffer<T> data_;
};

// Binary H x W mask.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<unsigned char> bits;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

  unsigned char& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  unsigned char at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

}  // namespace seammil
