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

#include <gtest/gtest.h>

#include <cmath>

#include "fedpt/errors.hpp"
#include "fedpt/proxy.hpp"
#include "support.hpp"

namespace fedpt {
namespace {

using testing::tiny_config;

struct Trio {
  std::shared_ptr<const ModelParams> large;
  std::shared_ptr<const ModelParams> small;
};

Trio trio() {
  auto vocab = make_vocab(11, 0, 1, 2);
  ModelConfig s = tiny_config();
  s.vocab = vocab;
  ModelConfig l = tiny_config(3, 12, 3);
  l.vocab = vocab;
  return {testing::spicy_model(l, 1, 3.0), testing::spicy_model(s, 2, 3.0)};
}

TEST(Proxy, FreshAdapterCancelsForAnyAlpha) {
  const Trio t = trio();
  const AdaptedModel tuned{t.small, new_adapter(t.small->config(), 2, 5)};
  const std::vector<int> x = {1, 4, 4, 8, 10, 3};
  const Matrix large = forward_logits(*t.large, x);
  for (double alpha : {0.0, 1.0, 1.5, 2.0, 7.25}) {
    EXPECT_EQ(proxy_logits(ProxyEnsemble(t.large, t.small, tuned, alpha), x), large);
  }
}

TEST(Proxy, AlphaZeroIsLargeModel) {
  const Trio t = trio();
  const AdaptedModel tuned{t.small, testing::random_adapter(t.small->config(), 2, 5)};
  const std::vector<int> x = {1, 4, 9};
  EXPECT_EQ(proxy_logits(ProxyEnsemble(t.large, t.small, tuned, 0.0), x),
            forward_logits(*t.large, x));
}

TEST(Proxy, ScalarCombination) {
  Matrix large(1, 2), tuned(1, 2), pre(1, 2);
  tuned(0, 0) = 1.0;
  const Matrix out = combine_logits(large, tuned, pre, 2.0);
  EXPECT_EQ(out(0, 0), 2.0);
  EXPECT_EQ(out(0, 1), 0.0);
  const auto p = softmax(out.row(0));
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(p[0], e2 / (e2 + 1.0), 1e-15);
  EXPECT_NEAR(p[0], 0.8808, 1e-4);
  EXPECT_NEAR(p[1], 0.1192, 1e-4);
}

TEST(Proxy, UniformCombinedLogitsGiveUniformDistribution) {
  Matrix z(1, 7);
  const Matrix out = combine_logits(z, z, z, 1.5);
  for (double v : softmax(out.row(0))) EXPECT_NEAR(v, 1.0 / 7.0, 1e-15);
}

TEST(Proxy, NextDistributionMatchesSoftmaxOfLastRow) {
  const Trio t = trio();
  const ProxyEnsemble e(t.large, t.small,
                        {t.small, testing::random_adapter(t.small->config(), 2, 5)}, 1.5);
  const std::vector<int> x = {1, 4, 9, 3};
  const Matrix m = proxy_logits(e, x);
  const auto want = softmax(m.row(m.rows - 1));
  const auto got = proxy_next_distribution(e, x);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_DOUBLE_EQ(got[i], want[i]);
}

TEST(Proxy, AlphaInterpolatesCoordinatewise) {
  // A single positive offset on coordinate 0: its probability grows with alpha
  // and every other coordinate shrinks.
  Matrix large(1, 4), tuned(1, 4), pre(1, 4);
  large(0, 1) = 0.3;
  large(0, 2) = -0.2;
  tuned(0, 0) = 0.8;
  auto dist = [&](double a) { return softmax(combine_logits(large, tuned, pre, a).row(0)); };
  const auto p1 = dist(1.0), p15 = dist(1.5), p2 = dist(2.0);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_LE(std::min(p1[i], p2[i]), p15[i]);
    EXPECT_GE(std::max(p1[i], p2[i]), p15[i]);
  }
  EXPECT_LT(p1[0], p15[0]);
  EXPECT_LT(p15[0], p2[0]);
}

TEST(Proxy, VocabularyMismatchIsConfigError) {
  const Trio t = trio();
  const auto other = testing::shared_model(tiny_config(2, 8, 2, 12), 3);
  const AdaptedModel tuned{other, new_adapter(other->config(), 2, 1)};
  EXPECT_THROW(ProxyEnsemble(t.large, other, tuned, 1.0), ConfigError);
  const AdaptedModel ok{t.small, new_adapter(t.small->config(), 2, 1)};
  EXPECT_THROW(ProxyEnsemble(t.large, t.small, ok, -1.0), InputError);
}

TEST(Proxy, GreedyDecodeWithCancellationMatchesLarge) {
  const Trio t = trio();
  const ProxyEnsemble e(t.large, t.small, {t.small, new_adapter(t.small->config(), 2, 5)}, 1.5);
  const std::vector<int> prompt = {1, 6, 3};
  EXPECT_EQ(greedy_decode(e, prompt, 12), greedy_decode(ModelSource(t.large), prompt, 12));
}

TEST(Proxy, SessionMatchesFullRecompute) {
  const Trio t = trio();
  const ProxyEnsemble e(t.large, t.small,
                        {t.small, testing::random_adapter(t.small->config(), 2, 5)}, 1.5);
  const std::vector<int> x = {1, 4, 9, 3, 7, 7};
  auto s = e.open();
  s->feed(std::span(x).first(3));
  const Matrix tail = s->feed(std::span(x).subspan(3), true);
  const Matrix full = proxy_logits(e, x);
  for (std::size_t r = 0; r < tail.rows; ++r) {
    for (std::size_t v = 0; v < tail.cols; ++v) EXPECT_NEAR(tail(r, v), full(r + 3, v), 1e-10);
  }
}

TEST(Proxy, SharedPrefixLogitsMatchPerSequence) {
  const Trio t = trio();
  ModelSource src(t.large);
  const std::vector<std::vector<int>> seqs = {{1, 4, 5, 6, 7}, {1, 4, 5, 9}, {1, 4, 8, 8, 8, 3}};
  const std::vector<std::size_t> from = {2, 3, 1};
  const auto got = shared_prefix_logits(src, seqs, from);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const Matrix full = forward_logits(*t.large, seqs[i]);
    ASSERT_EQ(got[i].rows, seqs[i].size() - from[i]);
    for (std::size_t r = 0; r < got[i].rows; ++r) {
      for (std::size_t v = 0; v < full.cols; ++v) {
        EXPECT_NEAR(got[i](r, v), full(r + from[i], v), 1e-10);
      }
    }
  }
}

}  // namespace
}  // namespace fedpt
