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
#include <numbers>

#include "fedpt/distill.hpp"
#include "fedpt/errors.hpp"
#include "fedpt/model.hpp"
#include "support.hpp"

namespace fedpt {
namespace {

using testing::random_pair;
using testing::random_tokens;
using testing::rel_diff;
using testing::tiny_config;

// Straight-line scalar forward pass, written independently of the kernels.
std::vector<std::vector<double>> scalar_forward(const ModelParams& p, const std::vector<int>& t) {
  const ModelConfig& c = p.config();
  const std::size_t d = static_cast<std::size_t>(c.width);
  const std::size_t V = static_cast<std::size_t>(c.vocab->size);
  const std::size_t H = static_cast<std::size_t>(c.heads);
  const std::size_t hd = d / H;
  const std::size_t ff = static_cast<std::size_t>(c.ff_width());
  const std::size_t n = t.size();
  const TensorMap& tm = p.tensors();
  auto at = [&](const std::string& name, std::size_t i, std::size_t j, std::size_t cols) {
    return tm.view(name)[i * cols + j];
  };
  auto norm = [&](const std::vector<double>& x, const std::string& g, const std::string& b) {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i) {
      y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * tm.view(g)[i] + tm.view(b)[i];
    }
    return y;
  };
  auto lin = [&](const std::vector<double>& x, const std::string& w, const std::string& b,
                 std::size_t dout) {
    std::vector<double> y(dout, 0.0);
    for (std::size_t o = 0; o < dout; ++o) {
      double s = b.empty() ? 0.0 : tm.view(b)[o];
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * at(w, i, o, dout);
      y[o] = s;
    }
    return y;
  };
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      x[i][k] = at("tok_emb", static_cast<std::size_t>(t[i]), k, d) + at("pos_emb", i, k, d);
    }
  }
  for (int l = 0; l < c.layers; ++l) {
    auto L = [&](const char* leaf) { return names::layer(l, leaf); };
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = norm(x[i], L("ln1.g"), L("ln1.b"));
      q[i] = lin(a, L("attn.wq"), L("attn.bq"), d);
      k[i] = lin(a, L("attn.wk"), L("attn.bk"), d);
      v[i] = lin(a, L("attn.wv"), L("attn.bv"), d);
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> o(d, 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < hd; ++e) dot += q[i][h * hd + e] * k[j][h * hd + e];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (double& sj : s) z += (sj = std::exp(sj - mx));
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t e = 0; e < hd; ++e) o[h * hd + e] += s[j] / z * v[j][h * hd + e];
        }
      }
      const auto proj = lin(o, L("attn.wo"), L("attn.bo"), d);
      for (std::size_t e = 0; e < d; ++e) x[i][e] += proj[e];
      const auto m = norm(x[i], L("ln2.g"), L("ln2.b"));
      auto h1 = lin(m, L("mlp.w1"), L("mlp.b1"), ff);
      for (double& u : h1) {
        u = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (u + 0.044715 * u * u * u)));
      }
      const auto h2 = lin(h1, L("mlp.w2"), L("mlp.b2"), d);
      for (std::size_t e = 0; e < d; ++e) x[i][e] += h2[e];
    }
  }
  std::vector<std::vector<double>> logits(n);
  for (std::size_t i = 0; i < n; ++i) logits[i] = lin(norm(x[i], "ln_f.g", "ln_f.b"), "lm_head", "", V);
  return logits;
}

TEST(Model, ZeroOutputProjectionGivesZeroLogits) {
  ModelParams p = ModelParams::init(tiny_config(), 3);
  for (double& v : p.tensors().view(names::kLmHead)) v = 0.0;
  const Matrix m = forward_logits(p, std::vector<int>{1, 4, 5, 9});
  for (double v : m.data) EXPECT_EQ(v, 0.0);
}

TEST(Model, ForwardIsDeterministic) {
  const ModelParams p = ModelParams::init(tiny_config(), 5);
  const std::vector<int> t = {1, 3, 3, 7, 2, 10};
  EXPECT_EQ(forward_logits(p, t), forward_logits(p, t));
}

TEST(Model, ForwardMatchesScalarRecomputation) {
  const auto p = testing::spicy_model(tiny_config(2, 16, 2, 13), 11, 5.0);
  const std::vector<int> t = {1, 7, 3, 12, 5};
  const Matrix m = forward_logits(*p, t);
  const auto ref = scalar_forward(*p, t);
  ASSERT_EQ(m.rows, t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t v = 0; v < m.cols; ++v) {
      EXPECT_LE(std::abs(m(i, v) - ref[i][v]), 1e-6 * std::max(1.0, std::abs(ref[i][v])))
          << i << "," << v;
    }
  }
}

TEST(Model, ForwardRejectsBadTokens) {
  const ModelParams p = ModelParams::init(tiny_config(), 5);
  EXPECT_THROW(forward_logits(p, std::vector<int>{1, 11}), InputError);
  EXPECT_THROW(forward_logits(p, std::vector<int>{-1}), InputError);
  EXPECT_THROW(forward_logits(p, std::vector<int>(33, 3)), InputError);
}

TEST(Model, UniformLogitsGiveLogV) {
  ModelParams p = ModelParams::init(tiny_config(), 2);
  for (double& v : p.tensors().view(names::kLmHead)) v = 0.0;
  EXPECT_DOUBLE_EQ(nll_loss(p, std::vector<int>{1, 2}, std::vector<int>{4, 5, 6}),
                   std::log(11.0));
}

TEST(Model, SaturatedModelHasTinyLoss) {
  // Output depends only on the final norm bias; point it at token 6.
  ModelParams p = ModelParams::init(tiny_config(), 2);
  for (double& v : p.tensors().view(names::kLnFGain)) v = 0.0;
  auto bias = p.tensors().view(names::kLnFBias);
  std::fill(bias.begin(), bias.end(), 0.0);
  bias[0] = 1.0;
  auto head = p.tensors().view(names::kLmHead);
  std::fill(head.begin(), head.end(), 0.0);
  head[6] = 100.0;  // row 0, column 6
  EXPECT_LT(nll_loss(p, std::vector<int>{1}, std::vector<int>{6, 6, 6}), 1e-3);
}

TEST(Model, NllMatchesPerPositionOracle) {
  const auto p = testing::spicy_model(tiny_config(), 9, 3.0);
  Rng rng(4);
  const SequencePair pair = random_pair(rng, 4, 6, 11);
  std::vector<int> full = pair.prompt;
  full.insert(full.end(), pair.target.begin(), pair.target.end());
  double sum = 0.0;
  for (std::size_t k = 0; k < pair.target.size(); ++k) {
    const std::vector<int> prefix(full.begin(), full.begin() + static_cast<long>(pair.prompt.size() + k));
    const Matrix m = forward_logits(*p, prefix);
    sum -= log_softmax(m.row(m.rows - 1))[static_cast<std::size_t>(pair.target[k])];
  }
  const double want = sum / static_cast<double>(pair.target.size());
  EXPECT_LE(rel_diff(nll_loss(*p, pair.prompt, pair.target), want), 1e-8);
}

TEST(Model, EmptyTargetIsInputError) {
  const ModelParams p = ModelParams::init(tiny_config(), 5);
  EXPECT_THROW(nll_loss(p, std::vector<int>{1}, std::vector<int>{}), InputError);
}

TEST(Model, FrozenTensorsAbsentFromGradients) {
  const ModelParams p = ModelParams::init(tiny_config(), 5);
  Rng rng(1);
  const std::vector<SequencePair> batch = {random_pair(rng, 3, 3, 11)};
  const LossAndGrad lg = backward(p, batch, {"tok_emb", names::layer(0, "attn.wq")});
  EXPECT_FALSE(lg.grads.contains("tok_emb"));
  EXPECT_FALSE(lg.grads.contains(names::layer(0, "attn.wq")));
  EXPECT_TRUE(lg.grads.contains("lm_head"));
}

TEST(Model, GradientsMatchFiniteDifferences) {
  const auto p = testing::spicy_model(tiny_config(2, 8, 2, 11, 16), 21, 2.0);
  Rng rng(8);
  const std::vector<SequencePair> batch = {random_pair(rng, 3, 4, 11), random_pair(rng, 5, 2, 11)};
  const LossAndGrad lg = backward(*p, batch);
  ModelParams probe = *p;
  auto f = [&] {
    double s = 0.0;
    for (const auto& b : batch) s += nll_loss(probe, b.prompt, b.target);
    return s / static_cast<double>(batch.size());
  };
  // large weights: keep the step small so curvature does not swamp tiny gradients
  const GradCheckReport r = finite_difference_check(probe.tensors().flat(), lg.grads.flat(), f, 1e-5);
  EXPECT_EQ(r.coordinates, p->config().param_count());
  EXPECT_LE(r.max_rel_error, 1e-4) << "worst coordinate " << r.worst;
}

TEST(Model, DuplicatedBatchGivesSameGradient) {
  const ModelParams p = ModelParams::init(tiny_config(), 5);
  Rng rng(3);
  const SequencePair x = random_pair(rng, 4, 3, 11);
  const std::vector<SequencePair> one = {x};
  const std::vector<SequencePair> two = {x, x};
  const LossAndGrad a = backward(p, one);
  const LossAndGrad b = backward(p, two);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grads, b.grads);
}

TEST(Optimizer, SgdArithmetic) {
  TensorMap p;
  p.add("w", 1, 3);
  TensorMap g = p.zeros_like();
  std::fill(p.flat().begin(), p.flat().end(), 1.0);
  TensorMap before = p;
  sgd_step(p, g, 0.1);
  EXPECT_EQ(p, before);
  std::fill(g.flat().begin(), g.flat().end(), 0.5);
  sgd_step(p, g, 0.1);
  for (double v : p.flat()) EXPECT_DOUBLE_EQ(v, 0.95);
}

TEST(Optimizer, SgdStepsAreLinearInRate) {
  TensorMap p;
  p.add("w", 2, 2);
  Rng rng(1);
  for (double& v : p.flat()) v = rng.normal();
  TensorMap g = p.zeros_like();
  for (double& v : g.flat()) v = 0.25 * rng.normal();
  TensorMap twice = p;
  TensorMap once = p;
  sgd_step(twice, g, 0.25);
  sgd_step(twice, g, 0.5);
  sgd_step(once, g, 0.75);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(twice.flat()[i], once.flat()[i], 1e-15);
}

TEST(Optimizer, ShapeMismatchIsContractViolation) {
  TensorMap p;
  p.add("w", 1, 2);
  TensorMap g;
  g.add("w", 2, 1);
  EXPECT_THROW(sgd_step(p, g, 0.1), ContractViolation);
}

TEST(Schedule, CosineEndpointsAndMidpoint) {
  EXPECT_EQ(cosine_lr(0, 20, 3e-3), 3e-3);
  EXPECT_NEAR(cosine_lr(19, 20, 3e-3), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(5, 11, 1.0), 0.5, 1e-15);
  EXPECT_EQ(cosine_lr(0, 1, 2.0), 2.0);
  EXPECT_THROW(cosine_lr(20, 20, 1.0), InputError);
}

TEST(Decode, EndTokenFirstGivesEmptyGeneration) {
  auto vocab = make_vocab(11, 0, 1, 2);
  std::vector<double> row(11, 0.0);
  row[2] = 5.0;
  testing::ConstantSource src(vocab, row);
  EXPECT_TRUE(greedy_decode(src, std::vector<int>{1, 3}, 10).empty());
}

TEST(Decode, ConstantFavouriteRepeats) {
  auto vocab = make_vocab(11, 0, 1, 2);
  std::vector<double> row(11, 0.0);
  row[7] = 5.0;
  testing::ConstantSource src(vocab, row);
  EXPECT_EQ(greedy_decode(src, std::vector<int>{1}, 3), (std::vector<int>{7, 7, 7}));
}

TEST(Decode, IncrementalMatchesFullForward) {
  const auto p = testing::spicy_model(tiny_config(), 12, 3.0);
  ModelSource src(p);
  auto s = src.open();
  const std::vector<int> t = {1, 4, 9, 3, 3, 8};
  s->feed(std::span(t).first(2));
  const Matrix tail = s->feed(std::span(t).subspan(2), true);
  const Matrix full = forward_logits(*p, t);
  for (std::size_t r = 0; r < tail.rows; ++r) {
    for (std::size_t v = 0; v < tail.cols; ++v) EXPECT_NEAR(tail(r, v), full(r + 2, v), 1e-12);
  }
}

}  // namespace
}  // namespace fedpt
