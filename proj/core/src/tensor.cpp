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

#include "fedpt/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "fedpt/errors.hpp"

namespace fedpt {

std::size_t TensorMap::add(std::string name, std::size_t rows, std::size_t cols) {
  ensure(!contains(name), "duplicate tensor name: " + name);
  specs_.push_back({std::move(name), rows, cols, data_.size()});
  data_.resize(data_.size() + rows * cols, 0.0);
  return specs_.size() - 1;
}

std::size_t TensorMap::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    if (specs_[i].name == name) return i;
  }
  throw ContractViolation("no tensor named " + std::string(name));
}

bool TensorMap::contains(std::string_view name) const {
  return std::any_of(specs_.begin(), specs_.end(),
                     [&](const TensorSpec& s) { return s.name == name; });
}

TensorMap TensorMap::zeros_like() const {
  TensorMap out;
  out.specs_ = specs_;
  out.data_.assign(data_.size(), 0.0);
  return out;
}

bool TensorMap::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace fedpt
