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
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedpt/decode.hpp"
#include "fedpt/engine.hpp"
#include "fedpt/model.hpp"
#include "fedpt/tensor.hpp"

namespace fedpt {

/// A projection that carries a low-rank delta.
struct LoraTarget {
  int layer = 0;
  engine::Projection projection = engine::kQuery;
  std::size_t dout = 0;
  std::size_t din = 0;

  std::string name() const;
  bool operator==(const LoraTarget&) const = default;
};

/// Low-rank factors (B: dout × r, A: r × din) for every target projection,
/// so that W = W0 + B·A. Tensors are stored per target, B then A, in
/// target declaration order (query then value, layer by layer).
class LoraAdapter {
 public:
  LoraAdapter() = default;
  LoraAdapter(int rank, std::vector<LoraTarget> targets);

  int rank() const { return rank_; }
  const std::vector<LoraTarget>& targets() const { return targets_; }
  TensorMap& tensors() { return tensors_; }
  const TensorMap& tensors() const { return tensors_; }

  std::span<const double> b(std::size_t target) const { return tensors_.view(2 * target); }
  std::span<const double> a(std::size_t target) const { return tensors_.view(2 * target + 1); }
  std::span<double> b(std::size_t target) { return tensors_.view(2 * target); }
  std::span<double> a(std::size_t target) { return tensors_.view(2 * target + 1); }

  std::size_t parameter_count() const { return tensors_.size(); }
  /// Same rank, targets and dimensions.
  bool congruent(const LoraAdapter& other) const {
    return rank_ == other.rank_ && targets_ == other.targets_;
  }
  /// Every target exists in `config` with matching dimensions.
  bool compatible_with(const ModelConfig& config) const;

  bool operator==(const LoraAdapter&) const = default;

 private:
  int rank_ = 0;
  std::vector<LoraTarget> targets_;
  TensorMap tensors_;
};

/// Query and value projections of every layer.
std::vector<LoraTarget> attention_qv_targets(const ModelConfig& config);

/// B = 0, A ~ Gaussian(0, 0.02) seeded, over the query/value projections.
/// Requires 1 <= rank < min(dout, din).
LoraAdapter new_adapter(const ModelConfig& config, int rank, std::uint64_t seed);

/// Frozen base weights plus a trainable adapter.
struct AdaptedModel {
  std::shared_ptr<const ModelParams> base;
  LoraAdapter adapter;

  /// Throws ConfigError when the adapter does not fit the base.
  void validate() const;
};

/// Kernel-ready form of an adapter.
engine::LowRankDelta prepare_delta(const ModelConfig& config, const LoraAdapter& adapter);

/// Logits with the low-rank delta applied on the fly.
Matrix adapted_forward(const AdaptedModel& model, std::span<const int> tokens);

/// Standalone weights with W0 + B·A folded into each target. Base unchanged.
ModelParams merge(const AdaptedModel& model);

double nll_loss(const AdaptedModel& model, std::span<const int> prompt,
                std::span<const int> target);

/// Mean batch loss and its gradient with respect to the adapter only; the
/// result's grads map is congruent with adapter.tensors().
LossAndGrad backward(const AdaptedModel& model, std::span<const SequencePair> batch);

/// Same, for an arbitrary per-example loss on target logits.
LossAndGrad backward(const AdaptedModel& model, std::span<const SequencePair> batch,
                     const engine::TargetLoss& loss);

/// The adapted model as a decoding source (delta prepared once).
std::shared_ptr<const LogitSource> make_source(const AdaptedModel& model);

// ---------------------------------------------------------------------------
// Wire format:
//   bytes 0..7   magic "FPTLORA\0"
//   u32          format version (1)
//   u32          rank
//   u32          target count T
//   T × (u32 layer, u32 projection [0 = query, 1 = value], u32 dout, u32 din)
//   u64          number of float64 values that follow
//   float64[]    per target: B (dout × r, row-major) then A (r × din)
// All integers and floats little-endian.

inline constexpr std::uint32_t kAdapterFormatVersion = 1;

std::vector<std::uint8_t> serialize(const LoraAdapter& adapter);
/// Throws FormatError on bad magic, version mismatch, truncation or an
/// inconsistent length field.
LoraAdapter deserialize(std::span<const std::uint8_t> bytes);
std::size_t serialized_size(const LoraAdapter& adapter);
std::size_t serialized_header_size(std::size_t target_count);

/// Order-sensitive hash of shape and bit patterns.
std::uint64_t checksum(const LoraAdapter& adapter);

}  // namespace fedpt
