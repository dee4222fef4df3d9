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

#include <memory>
#include <span>
#include <vector>

#include "fedpt/decode.hpp"
#include "fedpt/lora.hpp"
#include "fedpt/model.hpp"

namespace fedpt {

/// Frozen large model steered by the logit offset between a tuned and an
/// untuned small model: g_large + alpha * (g_tuned - g_pre), combined on raw
/// logits and normalized afterwards.
class ProxyEnsemble final : public LogitSource {
 public:
  /// Throws ConfigError unless all three models share one vocabulary, and
  /// InputError for a negative or non-finite alpha.
  ProxyEnsemble(std::shared_ptr<const ModelParams> large_base,
                std::shared_ptr<const ModelParams> small_base, AdaptedModel small_tuned,
                double alpha);

  const ModelParams& large_base() const { return *large_; }
  const ModelParams& small_base() const { return *small_; }
  const AdaptedModel& small_tuned() const { return tuned_; }
  double alpha() const { return alpha_; }

  const Vocab& vocab() const override { return large_->vocab(); }
  int context_len() const override;
  std::unique_ptr<DecodeSession> open() const override;

 private:
  std::shared_ptr<const ModelParams> large_;
  std::shared_ptr<const ModelParams> small_;
  AdaptedModel tuned_;
  std::shared_ptr<const LogitSource> large_src_;
  std::shared_ptr<const LogitSource> small_src_;
  std::shared_ptr<const LogitSource> tuned_src_;
  double alpha_ = 1.0;
};

/// Elementwise large + alpha * (tuned - pre) over equally shaped matrices.
Matrix combine_logits(const Matrix& large, const Matrix& tuned, const Matrix& pre, double alpha);

/// Proxy logits at every position of `tokens`.
Matrix proxy_logits(const ProxyEnsemble& e, std::span<const int> tokens);

/// Softmax of the last-position proxy logits.
std::vector<double> proxy_next_distribution(const ProxyEnsemble& e, std::span<const int> tokens);

/// Logit rows [from[i], seqs[i].size()) for each sequence, computing the
/// prefix shared by all sequences once.
std::vector<Matrix> shared_prefix_logits(const LogitSource& source,
                                         std::span<const std::vector<int>> seqs,
                                         std::span<const std::size_t> from);

}  // namespace fedpt
