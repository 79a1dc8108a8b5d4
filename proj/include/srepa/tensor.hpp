#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "srepa/rng.hpp"

namespace srepa {

// Dense row-major tensor. Immutable by convention once handed to the tape.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T(0))
      : shape(std::move(s)), data(numel_of(shape), fill) {}
  Tensor(std::vector<std::size_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("tensor: shape/data size mismatch: " +
                                  shape_str() + " vs " +
                                  std::to_string(data.size()));
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t(1),
                           std::multiplies<>());
  }

  std::size_t numel() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  bool is_scalar() const { return numel() == 1; }

  std::size_t rows() const {
    require_2d();
    return shape[0];
  }
  std::size_t cols() const {
    require_2d();
    return shape[1];
  }

  T& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data[i * cols() + j];
  }

  T scalar() const {
    if (!is_scalar()) throw std::invalid_argument("tensor: not a scalar");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

  static Tensor scalar_of(T v) { return Tensor({std::size_t(1)}, {v}); }

  static Tensor identity(std::size_t n) {
    Tensor m({n, n});
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = T(1);
    return m;
  }

  static Tensor random_uniform(std::vector<std::size_t> s, RngStream& rng,
                               double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor random_normal(std::vector<std::size_t> s, RngStream& rng,
                              double stddev = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void require_2d() const {
    if (shape.size() != 2)
      throw std::invalid_argument("tensor: expected 2-d, got " + shape_str());
  }
};

}  // namespace srepa
