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

#include "fedpt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fedpt/engine.hpp"
#include "fedpt/errors.hpp"
#include "fedpt/rng.hpp"

namespace fedpt {

VocabPtr make_vocab(int size, int pad, int bos, int eos) {
  require(size >= 4, "vocab size must be >= 4");
  for (int id : {pad, bos, eos}) {
    require(id >= 0 && id < size, "special token id out of range");
  }
  require(pad != bos && pad != eos && bos != eos, "special token ids must be distinct");
  return std::make_shared<const Vocab>(Vocab{size, pad, bos, eos});
}

void ModelConfig::validate() const {
  require(vocab != nullptr, "model config: vocab missing");
  require(layers >= 1, "model config: layers must be >= 1");
  require(width >= 1, "model config: width must be >= 1");
  require(heads >= 1, "model config: heads must be >= 1");
  require(width % heads == 0, "model config: width must be divisible by heads");
  require(context_len >= 8, "model config: context_len must be >= 8");
  require(ff_mult >= 1, "model config: ff_mult must be >= 1");
}

std::size_t ModelConfig::param_count() const {
  const std::size_t d = static_cast<std::size_t>(width);
  const std::size_t ff = static_cast<std::size_t>(ff_width());
  const std::size_t v = static_cast<std::size_t>(vocab->size);
  const std::size_t per_layer = 4 * d              // two LayerNorms
                                + 4 * (d * d + d)  // q, k, v, o
                                + d * ff + ff + ff * d + d;
  return v * d + static_cast<std::size_t>(context_len) * d +
         static_cast<std::size_t>(layers) * per_layer + 2 * d + d * v;
}

bool ModelConfig::same_shape(const ModelConfig& other) const {
  return layers == other.layers && width == other.width && heads == other.heads &&
         context_len == other.context_len && ff_mult == other.ff_mult && vocab && other.vocab &&
         *vocab == *other.vocab;
}

std::string names::layer(int l, const char* leaf) {
  return "h" + std::to_string(l) + "." + leaf;
}

ModelParams::ModelParams(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed) {
  config_.validate();
  const std::size_t d = static_cast<std::size_t>(config_.width);
  const std::size_t ff = static_cast<std::size_t>(config_.ff_width());
  const std::size_t v = static_cast<std::size_t>(config_.vocab->size);
  tensors_.add(names::kTokEmb, v, d);
  tensors_.add(names::kPosEmb, static_cast<std::size_t>(config_.context_len), d);
  for (int l = 0; l < config_.layers; ++l) {
    tensors_.add(names::layer(l, "ln1.g"), 1, d);
    tensors_.add(names::layer(l, "ln1.b"), 1, d);
    tensors_.add(names::layer(l, "attn.wq"), d, d);
    tensors_.add(names::layer(l, "attn.bq"), 1, d);
    tensors_.add(names::layer(l, "attn.wk"), d, d);
    tensors_.add(names::layer(l, "attn.bk"), 1, d);
    tensors_.add(names::layer(l, "attn.wv"), d, d);
    tensors_.add(names::layer(l, "attn.bv"), 1, d);
    tensors_.add(names::layer(l, "attn.wo"), d, d);
    tensors_.add(names::layer(l, "attn.bo"), 1, d);
    tensors_.add(names::layer(l, "ln2.g"), 1, d);
    tensors_.add(names::layer(l, "ln2.b"), 1, d);
    tensors_.add(names::layer(l, "mlp.w1"), d, ff);
    tensors_.add(names::layer(l, "mlp.b1"), 1, ff);
    tensors_.add(names::layer(l, "mlp.w2"), ff, d);
    tensors_.add(names::layer(l, "mlp.b2"), 1, d);
  }
  tensors_.add(names::kLnFGain, 1, d);
  tensors_.add(names::kLnFBias, 1, d);
  tensors_.add(names::kLmHead, d, v);
  ensure(tensors_.size() == config_.param_count(), "parameter count mismatch");
}

ModelParams ModelParams::zeros(const ModelConfig& config) { return ModelParams(config, 0); }

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p(config, seed);
  Rng rng = Rng::stream(seed, "init");
  for (std::size_t i = 0; i < p.tensors_.count(); ++i) {
    const TensorSpec& s = p.tensors_.spec(i);
    auto view = p.tensors_.view(i);
    const bool is_gain = s.name.ends_with(".g");
    const bool is_bias = s.rows == 1 && !is_gain;
    if (is_gain) {
      std::fill(view.begin(), view.end(), 1.0);
    } else if (!is_bias) {
      for (double& w : view) w = rng.normal(0.0, 0.02);
    }
  }
  return p;
}

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.size() > static_cast<std::size_t>(config.context_len)) {
    throw InputError("sequence length " + std::to_string(tokens.size()) +
                     " exceeds context_len " + std::to_string(config.context_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab->size) {
      throw InputError("token id " + std::to_string(t) + " out of range");
    }
  }
}

void validate_pair(const ModelConfig& config, const SequencePair& pair) {
  require(!pair.prompt.empty(), "prompt must hold at least the begin token");
  require(!pair.target.empty(), "empty target");
  validate_tokens(config, pair.prompt);
  validate_tokens(config, pair.target);
  // The final target token is never fed to the model.
  if (pair.prompt.size() + pair.target.size() - 1 > static_cast<std::size_t>(config.context_len)) {
    throw InputError("prompt + target exceed context_len");
  }
}

Matrix forward_logits(const ModelParams& params, std::span<const int> tokens) {
  validate_tokens(params.config(), tokens);
  engine::KvCache cache(params.config(), tokens.size());
  return engine::forward(params, nullptr, cache, tokens, 0);
}

double nll_loss(const ModelParams& params, std::span<const int> prompt,
                std::span<const int> target) {
  SequencePair pair{{prompt.begin(), prompt.end()}, {target.begin(), target.end()}};
  validate_pair(params.config(), pair);
  const auto input = engine::teacher_forcing_input(pair);
  engine::KvCache cache(params.config(), input.size());
  Matrix logits = engine::forward(params, nullptr, cache, input, prompt.size() - 1);
  return engine::cross_entropy(logits, target, nullptr);
}

LossAndGrad backward(const ModelParams& params, std::span<const SequencePair> batch,
                     const std::set<std::string>& frozen) {
  TensorMap full = params.tensors().zeros_like();
  auto ce = [&](std::size_t e, const Matrix& logits, Matrix& dlogits) {
    return engine::cross_entropy(logits, batch[e].target, &dlogits);
  };
  const double loss = engine::backward_batch(params, nullptr, batch, ce, &full, nullptr);
  if (frozen.empty()) return {loss, std::move(full)};
  TensorMap trainable;
  for (std::size_t i = 0; i < full.count(); ++i) {
    const TensorSpec& s = full.spec(i);
    if (frozen.contains(s.name)) continue;
    const std::size_t k = trainable.add(s.name, s.rows, s.cols);
    std::ranges::copy(full.view(i), trainable.view(k).begin());
  }
  return {loss, std::move(trainable)};
}

void sgd_step(TensorMap& params, const TensorMap& grads, double lr) {
  ensure(params.congruent(grads), "sgd_step: shape mismatch");
  require(lr > 0.0, "sgd_step: lr must be > 0");
  auto p = params.flat();
  auto g = grads.flat();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

AdamOptimizer::AdamOptimizer(const TensorMap& like, AdamOptions options)
    : options_(options), m_(like.zeros_like()), v_(like.zeros_like()) {}

void AdamOptimizer::step(TensorMap& params, const TensorMap& grads, double lr) {
  ensure(params.congruent(grads) && params.congruent(m_), "adam: shape mismatch");
  require(lr >= 0.0, "adam: lr must be >= 0");
  ++steps_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  auto p = params.flat();
  auto g = grads.flat();
  auto m = m_.flat();
  auto v = v_.flat();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
  }
}

Optimizer::Optimizer(OptimizerKind kind, const TensorMap& like, AdamOptions options)
    : kind_(kind) {
  if (kind_ == OptimizerKind::kAdam) adam_ = std::make_unique<AdamOptimizer>(like, options);
}

void Optimizer::step(TensorMap& params, const TensorMap& grads, double lr) {
  if (kind_ == OptimizerKind::kAdam) {
    adam_->step(params, grads, lr);
  } else if (lr > 0.0) {
    sgd_step(params, grads, lr);
  }
}

double cosine_lr(int round, int total, double base_lr) {
  require(total >= 1, "cosine_lr: total must be >= 1");
  require(round >= 0 && round < total, "cosine_lr: round outside [0, total)");
  if (total == 1) return base_lr;
  const double frac = static_cast<double>(round) / static_cast<double>(total - 1);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  ensure(p.size() == q.size(), "kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return kl;
}

std::size_t argmax(std::span<const double> v) {
  ensure(!v.empty(), "argmax of empty vector");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace fedpt
