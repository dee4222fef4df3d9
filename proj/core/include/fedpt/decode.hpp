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

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "fedpt/engine.hpp"
#include "fedpt/model.hpp"
#include "fedpt/rng.hpp"
#include "fedpt/tensor.hpp"

namespace fedpt {

/// Incremental next-token logit computation over a growing token sequence.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;

  /// Appends `tokens` (non-empty). Returns one logit row per fed token when
  /// `all_rows`, otherwise only the row of the last fed token.
  virtual Matrix feed(std::span<const int> tokens, bool all_rows = false) = 0;
  virtual std::size_t length() const = 0;
  virtual std::unique_ptr<DecodeSession> clone() const = 0;
};

/// Anything that yields next-token logits: a plain model, an adapted model,
/// a proxy ensemble, or a test double.
class LogitSource {
 public:
  virtual ~LogitSource() = default;
  virtual const Vocab& vocab() const = 0;
  virtual int context_len() const = 0;
  virtual std::unique_ptr<DecodeSession> open() const = 0;

  /// Logits at every position of `tokens`.
  Matrix logits(std::span<const int> tokens) const;
};

/// Transformer weights, optionally with a low-rank delta, as a LogitSource.
class ModelSource final : public LogitSource {
 public:
  explicit ModelSource(std::shared_ptr<const ModelParams> params,
                       std::shared_ptr<const engine::LowRankDelta> delta = nullptr);

  const Vocab& vocab() const override { return params_->vocab(); }
  int context_len() const override { return params_->config().context_len; }
  std::unique_ptr<DecodeSession> open() const override;

  const ModelParams& params() const { return *params_; }

 private:
  std::shared_ptr<const ModelParams> params_;
  std::shared_ptr<const engine::LowRankDelta> delta_;
};

struct DecodeOptions {
  int max_new_tokens = 64;
  /// Greedy (argmax) unless set; sampling uses temperature and nucleus top_p.
  bool sample = false;
  double temperature = 1.0;
  double top_p = 1.0;
};

/// Continues from a session whose last fed position produced `next_logits`.
/// Stops at the end token, after max_new_tokens, or when the context is full.
/// `rng` is only consulted when sampling.
std::vector<int> continue_decoding(DecodeSession& session, std::vector<double> next_logits,
                                   const LogitSource& source, const DecodeOptions& options,
                                   Rng* rng);

/// Greedy decoding: repeatedly appends the argmax token. The end token is not
/// included in the result.
std::vector<int> greedy_decode(const LogitSource& source, std::span<const int> prompt,
                               int max_len);

std::vector<int> generate(const LogitSource& source, std::span<const int> prompt,
                          const DecodeOptions& options, Rng* rng);

}  // namespace fedpt
