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

#include "fedpt/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedpt/errors.hpp"

namespace fedpt {

namespace {

class ModelSession final : public DecodeSession {
 public:
  ModelSession(std::shared_ptr<const ModelParams> params,
               std::shared_ptr<const engine::LowRankDelta> delta)
      : params_(std::move(params)),
        delta_(std::move(delta)),
        cache_(params_->config(), static_cast<std::size_t>(params_->config().context_len)) {}

  Matrix feed(std::span<const int> tokens, bool all_rows) override {
    require(!tokens.empty(), "feed: no tokens");
    return engine::forward(*params_, delta_.get(), cache_, tokens,
                           all_rows ? 0 : tokens.size() - 1);
  }

  std::size_t length() const override { return cache_.length(); }

  std::unique_ptr<DecodeSession> clone() const override {
    return std::make_unique<ModelSession>(*this);
  }

 private:
  std::shared_ptr<const ModelParams> params_;
  std::shared_ptr<const engine::LowRankDelta> delta_;
  engine::KvCache cache_;
};

int sample_token(std::span<const double> logits, const DecodeOptions& options, Rng& rng) {
  std::vector<double> scaled(logits.begin(), logits.end());
  for (double& v : scaled) v /= options.temperature;
  std::vector<double> p = softmax(scaled);
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  // Smallest prefix of the sorted distribution with mass >= top_p.
  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < order.size() && (keep == 0 || mass < options.top_p)) {
    mass += p[order[keep]];
    ++keep;
  }
  double u = rng.uniform() * mass;
  for (std::size_t i = 0; i < keep; ++i) {
    u -= p[order[i]];
    if (u < 0.0) return static_cast<int>(order[i]);
  }
  return static_cast<int>(order[keep - 1]);
}

}  // namespace

Matrix LogitSource::logits(std::span<const int> tokens) const {
  if (tokens.empty()) return Matrix(0, static_cast<std::size_t>(vocab().size));
  return open()->feed(tokens, true);
}

ModelSource::ModelSource(std::shared_ptr<const ModelParams> params,
                         std::shared_ptr<const engine::LowRankDelta> delta)
    : params_(std::move(params)), delta_(std::move(delta)) {
  ensure(params_ != nullptr, "ModelSource: null params");
}

std::unique_ptr<DecodeSession> ModelSource::open() const {
  return std::make_unique<ModelSession>(params_, delta_);
}

std::vector<int> continue_decoding(DecodeSession& session, std::vector<double> next_logits,
                                   const LogitSource& source, const DecodeOptions& options,
                                   Rng* rng) {
  require(options.max_new_tokens >= 1, "max_len must be >= 1");
  if (options.sample) {
    require(rng != nullptr, "sampled decoding needs an rng");
    require(options.temperature > 0.0, "temperature must be > 0");
    require(options.top_p > 0.0 && options.top_p <= 1.0, "top_p must be in (0, 1]");
  }
  const int eos = source.vocab().eos;
  const std::size_t ctx = static_cast<std::size_t>(source.context_len());
  std::vector<int> out;
  for (int step = 0; step < options.max_new_tokens; ++step) {
    const int tok = options.sample ? sample_token(next_logits, options, *rng)
                                   : static_cast<int>(argmax(next_logits));
    if (tok == eos) break;
    out.push_back(tok);
    if (step + 1 == options.max_new_tokens || session.length() >= ctx) break;
    const int feed_tok[1] = {tok};
    Matrix row = session.feed(feed_tok);
    next_logits.assign(row.data.begin(), row.data.end());
  }
  return out;
}

std::vector<int> generate(const LogitSource& source, std::span<const int> prompt,
                          const DecodeOptions& options, Rng* rng) {
  require(!prompt.empty(), "decode: empty prompt");
  if (prompt.size() > static_cast<std::size_t>(source.context_len())) {
    throw InputError("prompt exceeds context_len");
  }
  auto session = source.open();
  Matrix last = session->feed(prompt);
  return continue_decoding(*session, std::move(last.data), source, options, rng);
}

std::vector<int> greedy_decode(const LogitSource& source, std::span<const int> prompt,
                               int max_len) {
  DecodeOptions options;
  options.max_new_tokens = max_len;
  return generate(source, prompt, options, nullptr);
}

}  // namespace fedpt
