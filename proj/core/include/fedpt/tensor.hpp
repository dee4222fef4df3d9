// Copyright 2026 The FedPT Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedpt {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool operator==(const Matrix&) const = default;
};

struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const TensorSpec&) const = default;
};

/// Named 2-D tensors laid out back to back in one flat buffer. Used for model
/// weights, adapters, gradients and optimizer moments alike, so elementwise
/// updates can run over flat().
class TensorMap {
 public:
  /// Appends a zero-filled tensor and returns its index.
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);

  std::size_t count() const { return specs_.size(); }
  const std::vector<TensorSpec>& specs() const { return specs_; }
  const TensorSpec& spec(std::size_t i) const { return specs_[i]; }

  /// Index of a named tensor; throws ContractViolation when absent.
  std::size_t index_of(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::span<double> view(std::size_t i) {
    return {data_.data() + specs_[i].offset, specs_[i].size()};
  }
  std::span<const double> view(std::size_t i) const {
    return {data_.data() + specs_[i].offset, specs_[i].size()};
  }
  std::span<double> view(std::string_view name) { return view(index_of(name)); }
  std::span<const double> view(std::string_view name) const {
    return view(index_of(name));
  }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  std::size_t size() const { return data_.size(); }

  /// A map with the same layout, filled with zeros.
  TensorMap zeros_like() const;
  /// Same names, shapes and order.
  bool congruent(const TensorMap& other) const { return specs_ == other.specs_; }
  bool all_finite() const;

  bool operator==(const TensorMap&) const = default;

 private:
  std::vector<TensorSpec> specs_;
  std::vector<double> data_;
};

}  // namespace fedpt
