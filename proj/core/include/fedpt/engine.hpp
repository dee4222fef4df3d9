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

// Transformer compute engine behind model, adapter and distillation APIs.
// Callers normally go through model.hpp / lora.hpp; this header exists for
// losses that need raw logit gradients (distillation) and for decoding.

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fedpt/model.hpp"
#include "fedpt/tensor.hpp"

namespace fedpt::engine {

/// One low-rank delta ΔW = B·A on a dout × din projection. `a` is r × din,
/// `b` is dout × r; `at`/`bt` hold the transposes used by the kernels.
struct LowRankFactor {
  int rank = 0;
  std::size_t din = 0;
  std::size_t dout = 0;
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> at;
  std::vector<double> bt;

  bool active() const { return rank > 0; }
};

enum Projection : int { kQuery = 0, kValue = 1 };

/// Deltas indexed [layer][Projection]; rank 0 marks an untouched projection.
struct LowRankDelta {
  std::vector<std::array<LowRankFactor, 2>> layers;
};

struct LowRankGrad {
  std::vector<double> a;  // r × din
  std::vector<double> b;  // dout × r
};
using LowRankGrads = std::vector<std::array<LowRankGrad, 2>>;

/// Zeroed gradient buffers matching `delta`.
LowRankGrads zero_grads(const LowRankDelta& delta);

/// Keys and values of already processed positions, per layer.
class KvCache {
 public:
  KvCache(const ModelConfig& config, std::size_t capacity);

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }

  /// A cache with `capacity` slots holding a copy of this cache's contents.
  KvCache fork(std::size_t capacity) const;

  double* k_row(std::size_t layer, std::size_t pos) {
    return k_.data() + (layer * capacity_ + pos) * width_;
  }
  const double* k_row(std::size_t layer, std::size_t pos) const {
    return k_.data() + (layer * capacity_ + pos) * width_;
  }
  double* v_row(std::size_t layer, std::size_t pos) {
    return v_.data() + (layer * capacity_ + pos) * width_;
  }
  const double* v_row(std::size_t layer, std::size_t pos) const {
    return v_.data() + (layer * capacity_ + pos) * width_;
  }
  /// Transposed keys: width × capacity, row c holds channel c of every key.
  double* kt(std::size_t layer) { return kt_.data() + layer * width_ * capacity_; }
  const double* kt(std::size_t layer) const {
    return kt_.data() + layer * width_ * capacity_;
  }

  void advance(std::size_t n) { length_ += n; }

 private:
  KvCache() = default;

  std::size_t layers_ = 0;
  std::size_t width_ = 0;
  std::size_t capacity_ = 0;
  std::size_t length_ = 0;
  std::vector<double> k_;
  std::vector<double> v_;
  std::vector<double> kt_;
};

/// Runs `tokens` through the model after the positions already in `cache`,
/// appending their keys/values. Returns logits for segment rows
/// [logits_from, tokens.size()). `delta` may be null.
Matrix forward(const ModelParams& params, const LowRankDelta* delta, KvCache& cache,
               std::span<const int> tokens, std::size_t logits_from);

/// Per-example loss over the target-position logits (row j predicts target
/// token j). Must write d(loss)/d(logits) into `dlogits` (pre-shaped like
/// `logits`) and return the loss.
using TargetLoss =
    std::function<double(std::size_t example, const Matrix& logits, Matrix& dlogits)>;

/// Mean of the per-example losses over `batch` and, when the sinks are
/// non-null, its gradient with respect to every model tensor (`full_grads`,
/// congruent with params.tensors()) and/or the low-rank factors. The longest
/// prompt prefix shared by all examples is computed once per call.
double backward_batch(const ModelParams& params, const LowRankDelta* delta,
                      std::span<const SequencePair> batch, const TargetLoss& loss,
                      TensorMap* full_grads, LowRankGrads* delta_grads);

/// Mean token NLL of `targets` under `logits` rows; fills `dlogits` with its
/// gradient when non-null.
double cross_entropy(const Matrix& logits, std::span<const int> targets, Matrix* dlogits);

/// Prompt followed by target, minus the final target token (which predicts
/// nothing), i.e. the model input for teacher forcing.
std::vector<int> teacher_forcing_input(const SequencePair& pair);

}  // namespace fedpt::engine
