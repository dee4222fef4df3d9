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
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedpt/tensor.hpp"

namespace fedpt {

/// Token id space shared by every model in an experiment.
struct Vocab {
  int size = 0;
  int pad = 0;
  int bos = 0;
  int eos = 0;

  bool operator==(const Vocab&) const = default;
};

using VocabPtr = std::shared_ptr<const Vocab>;

/// Validates the invariants (size >= 4, distinct in-range specials).
VocabPtr make_vocab(int size, int pad, int bos, int eos);

struct ModelConfig {
  int layers = 2;
  int width = 64;
  int heads = 4;
  int context_len = 256;
  int ff_mult = 4;
  VocabPtr vocab;

  int head_dim() const { return width / heads; }
  int ff_width() const { return width * ff_mult; }
  /// Throws InputError on a violated invariant.
  void validate() const;
  std::size_t param_count() const;

  /// Same shapes and an equal vocabulary.
  bool same_shape(const ModelConfig& other) const;
};

/// Tensor names in their fixed storage (and checkpoint) order.
namespace names {
inline constexpr const char* kTokEmb = "tok_emb";
inline constexpr const char* kPosEmb = "pos_emb";
inline constexpr const char* kLnFGain = "ln_f.g";
inline constexpr const char* kLnFBias = "ln_f.b";
inline constexpr const char* kLmHead = "lm_head";
std::string layer(int l, const char* leaf);
}  // namespace names

/// Per-layer tensor slots; the order matches the storage layout.
enum class LayerSlot : int {
  kLn1Gain, kLn1Bias,
  kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
  kLn2Gain, kLn2Bias,
  kW1, kB1, kW2, kB2,
  kCount
};

/// Full weights of a pre-norm decoder-only transformer. Linear weights are
/// stored input-major (din × dout); biases as 1 × dout.
class ModelParams {
 public:
  /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit LayerNorm gains.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  /// Layout only, every value zero.
  static ModelParams zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Vocab& vocab() const { return *config_.vocab; }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }

  TensorMap& tensors() { return tensors_; }
  const TensorMap& tensors() const { return tensors_; }

  std::size_t layer_index(int layer, LayerSlot slot) const {
    return 2 + static_cast<std::size_t>(layer) * static_cast<std::size_t>(LayerSlot::kCount) +
           static_cast<std::size_t>(slot);
  }
  std::span<const double> layer_view(int layer, LayerSlot slot) const {
    return tensors_.view(layer_index(layer, slot));
  }
  std::span<double> layer_view(int layer, LayerSlot slot) {
    return tensors_.view(layer_index(layer, slot));
  }
  std::size_t tail_index() const {
    return 2 + static_cast<std::size_t>(config_.layers) *
                   static_cast<std::size_t>(LayerSlot::kCount);
  }

  bool all_finite() const { return tensors_.all_finite(); }

 private:
  ModelParams(ModelConfig config, std::uint64_t seed);

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  TensorMap tensors_;
};

/// A (prompt, response) pair in token space. Loss is taken on the response only.
struct SequencePair {
  std::vector<int> prompt;
  std::vector<int> target;
};

/// Checks token ranges and the combined length against the context window.
void validate_tokens(const ModelConfig& config, std::span<const int> tokens);
void validate_pair(const ModelConfig& config, const SequencePair& pair);

/// Next-token logits for every input position (rows = positions).
Matrix forward_logits(const ModelParams& params, std::span<const int> tokens);

/// Mean negative log-likelihood of `target` given `prompt`, prompt positions
/// masked out.
double nll_loss(const ModelParams& params, std::span<const int> prompt,
                std::span<const int> target);

struct LossAndGrad {
  double loss = 0.0;
  TensorMap grads;
};

/// Mean batch loss and its gradient with respect to every tensor of `params`
/// whose name is not in `frozen`; frozen tensors are absent from the result.
LossAndGrad backward(const ModelParams& params, std::span<const SequencePair> batch,
                     const std::set<std::string>& frozen = {});

// ---------------------------------------------------------------------------
// Optimizers and schedule.

/// p <- p - lr * g over congruent maps.
void sgd_step(TensorMap& params, const TensorMap& grads, double lr);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments live with the optimizer; state is a
/// deterministic function of the gradient sequence.
class AdamOptimizer {
 public:
  AdamOptimizer(const TensorMap& like, AdamOptions options = {});
  void step(TensorMap& params, const TensorMap& grads, double lr);
  long steps() const { return steps_; }

 private:
  AdamOptions options_;
  TensorMap m_;
  TensorMap v_;
  long steps_ = 0;
};

enum class OptimizerKind { kSgd, kAdam };

/// Either optimizer behind one call site.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, const TensorMap& like, AdamOptions options = {});
  void step(TensorMap& params, const TensorMap& grads, double lr);

 private:
  OptimizerKind kind_;
  std::unique_ptr<AdamOptimizer> adam_;
};

/// base_lr * 0.5 * (1 + cos(pi * t / (T - 1))); base_lr when T == 1.
double cosine_lr(int round, int total, double base_lr);

// ---------------------------------------------------------------------------
// Distribution helpers.

std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);
/// KL(p || q) for probability vectors; terms with p == 0 contribute nothing.
double kl_divergence(std::span<const double> p, std::span<const double> q);
std::size_t argmax(std::span<const double> v);

}  // namespace fedpt
