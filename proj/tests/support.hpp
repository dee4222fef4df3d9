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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "fedpt/data.hpp"
#include "fedpt/decode.hpp"
#include "fedpt/federation.hpp"
#include "fedpt/lora.hpp"
#include "fedpt/model.hpp"
#include "fedpt/rng.hpp"

namespace fedpt::testing {

inline ModelConfig tiny_config(int layers = 2, int width = 8, int heads = 2, int vocab = 11,
                               int context = 32) {
  ModelConfig c;
  c.layers = layers;
  c.width = width;
  c.heads = heads;
  c.context_len = context;
  c.vocab = make_vocab(vocab, 0, 1, 2);
  return c;
}

inline std::shared_ptr<const ModelParams> shared_model(const ModelConfig& c, std::uint64_t seed) {
  return std::make_shared<const ModelParams>(ModelParams::init(c, seed));
}

/// Scales every weight so random models produce non-trivial distributions.
inline std::shared_ptr<const ModelParams> spicy_model(const ModelConfig& c, std::uint64_t seed,
                                                      double scale = 10.0) {
  ModelParams p = ModelParams::init(c, seed);
  Rng rng(seed ^ 0x5eed);
  for (double& v : p.tensors().flat()) v = v * scale + 0.01 * rng.normal();
  return std::make_shared<const ModelParams>(std::move(p));
}

inline std::vector<int> random_tokens(Rng& rng, std::size_t n, int vocab) {
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(rng.below(static_cast<std::size_t>(vocab)));
  return t;
}

inline SequencePair random_pair(Rng& rng, std::size_t prompt, std::size_t target, int vocab) {
  return {random_tokens(rng, prompt, vocab), random_tokens(rng, target, vocab)};
}

/// Adapter with every entry random (so B is nonzero).
inline LoraAdapter random_adapter(const ModelConfig& c, int rank, std::uint64_t seed,
                                  double scale = 0.3) {
  LoraAdapter a = new_adapter(c, rank, seed);
  Rng rng(seed * 31 + 7);
  for (double& v : a.tensors().flat()) v = scale * rng.normal();
  return a;
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

/// Same logits at every position.
class ConstantSource final : public LogitSource {
 public:
  ConstantSource(VocabPtr vocab, std::vector<double> row, int context = 64)
      : vocab_(std::move(vocab)), row_(std::move(row)), context_(context) {}
  const Vocab& vocab() const override { return *vocab_; }
  int context_len() const override { return context_; }
  std::unique_ptr<DecodeSession> open() const override {
    return std::make_unique<Session>(this);
  }

 private:
  struct Session final : DecodeSession {
    explicit Session(const ConstantSource* s) : s(s) {}
    Matrix feed(std::span<const int> tokens, bool all_rows) override {
      const std::size_t n = all_rows ? tokens.size() : 1;
      Matrix m(n, s->row_.size());
      for (std::size_t r = 0; r < n; ++r) std::copy(s->row_.begin(), s->row_.end(), m.row(r).begin());
      len += tokens.size();
      return m;
    }
    std::size_t length() const override { return len; }
    std::unique_ptr<DecodeSession> clone() const override {
      return std::make_unique<Session>(*this);
    }
    const ConstantSource* s;
    std::size_t len = 0;
  };
  VocabPtr vocab_;
  std::vector<double> row_;
  int context_;
};

/// Continues each known prompt with a fixed continuation, then the end token.
class TableSource final : public LogitSource {
 public:
  TableSource(VocabPtr vocab, std::vector<std::pair<std::vector<int>, std::vector<int>>> table,
              int context = 512)
      : vocab_(std::move(vocab)), table_(std::move(table)), context_(context) {}
  const Vocab& vocab() const override { return *vocab_; }
  int context_len() const override { return context_; }
  std::unique_ptr<DecodeSession> open() const override {
    return std::make_unique<Session>(this);
  }

 private:
  int next_after(const std::vector<int>& seq) const {
    for (const auto& [prompt, cont] : table_) {
      if (seq.size() < prompt.size() || !std::equal(prompt.begin(), prompt.end(), seq.begin())) {
        continue;
      }
      const std::size_t k = seq.size() - prompt.size();
      return k < cont.size() ? cont[k] : vocab_->eos;
    }
    return vocab_->eos;
  }
  struct Session final : DecodeSession {
    explicit Session(const TableSource* s) : s(s) {}
    Matrix feed(std::span<const int> tokens, bool all_rows) override {
      const std::size_t n = all_rows ? tokens.size() : 1;
      Matrix m(n, static_cast<std::size_t>(s->vocab_->size));
      const std::size_t base = seq.size();
      seq.insert(seq.end(), tokens.begin(), tokens.end());
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t upto = all_rows ? base + r + 1 : seq.size();
        const std::vector<int> prefix(seq.begin(), seq.begin() + static_cast<long>(upto));
        m(r, static_cast<std::size_t>(s->next_after(prefix))) = 10.0;
      }
      return m;
    }
    std::size_t length() const override { return seq.size(); }
    std::unique_ptr<DecodeSession> clone() const override {
      return std::make_unique<Session>(*this);
    }
    const TableSource* s;
    std::vector<int> seq;
  };
  VocabPtr vocab_;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> table_;
  int context_;
};

/// Small federation over random token data: vocab 11, width 8 models.
inline FederationState toy_state(const FedConfig& config, std::size_t per_device = 6,
                                 std::size_t public_size = 16) {
  auto vocab = make_vocab(11, 0, 1, 2);
  ModelConfig s = tiny_config(2, 8, 2, 11, 24);
  s.vocab = vocab;
  ModelConfig l = tiny_config(2, 12, 2, 11, 24);
  l.vocab = vocab;
  FederationState st;
  st.config = config;
  st.small_base = spicy_model(s, 100, 3.0);
  if (config.mode != Mode::kFedAvgSmall) st.large_base = spicy_model(l, 200, 3.0);
  Rng rng(config.seed + 17);
  // Every example shares a short prompt head, as templated data does.
  for (int d = 0; d < config.num_devices; ++d) {
    DeviceState dev{d, {}};
    for (std::size_t i = 0; i < per_device; ++i) {
      SequencePair p = random_pair(rng, 2 + rng.below(3), 2 + rng.below(3), 11);
      p.prompt.insert(p.prompt.begin(), {1, 5, 6});
      dev.data.push_back(std::move(p));
    }
    st.devices.push_back(std::move(dev));
  }
  for (std::size_t i = 0; i < public_size; ++i) {
    SequencePair p = random_pair(rng, 2 + rng.below(3), 2 + rng.below(3), 11);
    p.prompt.insert(p.prompt.begin(), {1, 5, 6});
    st.public_set.push_back(std::move(p));
  }
  st.adapter = initial_adapter(config, s);
  st.aggregated = st.adapter;
  return st;
}

}  // namespace fedpt::testing
