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

#include <filesystem>

#include "fedpt/checkpoint.hpp"
#include "fedpt/errors.hpp"
#include "fedpt/lora.hpp"
#include "support.hpp"

namespace fedpt {
namespace {

using testing::random_adapter;
using testing::tiny_config;

// Max |B A| over all targets.
double max_delta(const LoraAdapter& a) {
  double m = 0.0;
  const auto r = static_cast<std::size_t>(a.rank());
  for (std::size_t t = 0; t < a.targets().size(); ++t) {
    const LoraTarget& tg = a.targets()[t];
    for (std::size_t o = 0; o < tg.dout; ++o) {
      for (std::size_t i = 0; i < tg.din; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < r; ++j) s += a.b(t)[o * r + j] * a.a(t)[j * tg.din + i];
        m = std::max(m, std::abs(s));
      }
    }
  }
  return m;
}

TEST(Adapter, FreshDeltaIsExactlyZero) {
  const LoraAdapter a = new_adapter(tiny_config(), 2, 9);
  EXPECT_EQ(max_delta(a), 0.0);
  double asum = 0.0;
  for (std::size_t t = 0; t < a.targets().size(); ++t) {
    for (double v : a.a(t)) asum += std::abs(v);
  }
  EXPECT_GT(asum, 0.0);
}

TEST(Adapter, SameSeedSameFactors) {
  EXPECT_EQ(new_adapter(tiny_config(), 2, 4), new_adapter(tiny_config(), 2, 4));
  EXPECT_NE(new_adapter(tiny_config(), 2, 4), new_adapter(tiny_config(), 2, 5));
}

TEST(Adapter, RankBounds) {
  EXPECT_THROW(new_adapter(tiny_config(), 8, 1), InputError);
  EXPECT_THROW(new_adapter(tiny_config(), 0, 1), InputError);
  EXPECT_NO_THROW(new_adapter(tiny_config(), 7, 1));
}

TEST(Adapter, FreshAdapterForwardIsBitwiseBase) {
  const auto base = testing::spicy_model(tiny_config(), 3, 3.0);
  const AdaptedModel m{base, new_adapter(base->config(), 2, 1)};
  const std::vector<int> t = {1, 5, 6, 3, 9};
  EXPECT_EQ(adapted_forward(m, t), forward_logits(*base, t));
}

TEST(Adapter, MergedForwardMatchesAdapted) {
  const auto base = testing::spicy_model(tiny_config(), 3, 3.0);
  const AdaptedModel m{base, random_adapter(base->config(), 2, 6)};
  const std::vector<int> t = {1, 5, 6, 3, 9, 10, 4};
  const Matrix a = adapted_forward(m, t);
  const Matrix b = forward_logits(merge(m), t);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    EXPECT_LE(std::abs(a.data[i] - b.data[i]), 1e-9 * std::max(1.0, std::abs(b.data[i])));
  }
}

TEST(Adapter, MergeWithFreshAdapterIsBase) {
  const auto base = testing::shared_model(tiny_config(), 3);
  const AdaptedModel m{base, new_adapter(base->config(), 2, 1)};
  EXPECT_EQ(merge(m).tensors(), base->tensors());
}

TEST(Adapter, MergeIsPure) {
  const auto base = testing::shared_model(tiny_config(), 3);
  const AdaptedModel m{base, random_adapter(base->config(), 3, 2)};
  EXPECT_EQ(merge(m).tensors(), merge(m).tensors());
}

TEST(Adapter, RankOneHandComputation) {
  // 1 layer, width 2: W0 + B A with B = [1; 0], A = [0 1].
  ModelParams p = ModelParams::init(tiny_config(1, 2, 1, 5, 8), 3);
  const auto wq = p.tensors().view(names::layer(0, "attn.wq"));
  const std::vector<double> w0(wq.begin(), wq.end());
  LoraAdapter a = new_adapter(p.config(), 1, 1);
  for (std::size_t t = 0; t < a.targets().size(); ++t) {
    std::fill(a.a(t).begin(), a.a(t).end(), 0.0);
    std::fill(a.b(t).begin(), a.b(t).end(), 0.0);
  }
  ASSERT_EQ(a.targets()[0].projection, engine::kQuery);
  a.b(0)[0] = 1.0;  // B[0][0]
  a.a(0)[1] = 1.0;  // A[0][1]
  const auto base = std::make_shared<const ModelParams>(p);
  const ModelParams merged = merge({base, a});
  // Input-major storage: W[i][o]; delta[o][i] = B[o]·A[i] is 1 only at o=0, i=1.
  const auto mq = merged.tensors().view(names::layer(0, "attn.wq"));
  EXPECT_EQ(mq[0], w0[0]);
  EXPECT_EQ(mq[1], w0[1]);
  EXPECT_EQ(mq[2], w0[2] + 1.0);
  EXPECT_EQ(mq[3], w0[3]);
}

TEST(Adapter, SerializeRoundTrip) {
  const LoraAdapter a = random_adapter(tiny_config(), 3, 8);
  const auto bytes = serialize(a);
  EXPECT_EQ(deserialize(bytes), a);
}

TEST(Adapter, SerializedLengthArithmetic) {
  const ModelConfig c = tiny_config(3, 8, 2);
  const LoraAdapter a = new_adapter(c, 2, 1);
  std::size_t params = 0;
  for (const auto& t : a.targets()) params += t.dout * 2 + 2 * t.din;
  EXPECT_EQ(serialize(a).size(), serialized_header_size(a.targets().size()) + 8 * params);
  EXPECT_EQ(serialized_size(a), serialize(a).size());
}

TEST(Adapter, CorruptedInputIsFormatError) {
  const auto good = serialize(random_adapter(tiny_config(), 2, 3));
  auto bad_count = good;
  const std::size_t count_at = serialized_header_size(4) - 8;
  bad_count[count_at] ^= 0x01;
  EXPECT_THROW(deserialize(bad_count), FormatError);
  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(deserialize(truncated), FormatError);
  auto bad_version = good;
  bad_version[8] = 9;
  EXPECT_THROW(deserialize(bad_version), FormatError);
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), FormatError);
}

TEST(Adapter, ChecksumTracksContent) {
  LoraAdapter a = random_adapter(tiny_config(), 2, 3);
  const auto c0 = checksum(a);
  EXPECT_EQ(checksum(deserialize(serialize(a))), c0);
  a.tensors().flat()[5] += 1e-12;
  EXPECT_NE(checksum(a), c0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto p = testing::spicy_model(tiny_config(), 17, 2.0);
  const auto bytes = encode_checkpoint(*p, {{"kind", "small"}});
  const Checkpoint ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.params.tensors(), p->tensors());
  EXPECT_TRUE(ck.params.config().same_shape(p->config()));
  EXPECT_EQ(ck.params.seed(), p->seed());
  EXPECT_EQ(ck.meta.at("kind"), "small");
  EXPECT_EQ(encode_checkpoint(ck.params, ck.meta), bytes);
}

TEST(Checkpoint, FileRoundTripAndErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "fedpt_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto p = testing::shared_model(tiny_config(), 2);
  save_checkpoint(dir / "m.ckpt", *p);
  EXPECT_EQ(load_checkpoint(dir / "m.ckpt").params.tensors(), p->tensors());
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), ConfigError);
  auto bytes = read_file(dir / "m.ckpt");
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(*p), make_vocab(12, 0, 1, 2)), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, AdapterFileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "fedpt_lora_test";
  std::filesystem::create_directories(dir);
  const LoraAdapter a = random_adapter(tiny_config(), 2, 4);
  save_adapter(dir / "a.lora", a);
  EXPECT_EQ(load_adapter(dir / "a.lora"), a);
  std::filesystem::remove_all(dir);
}

TEST(Adapter, TrainableFractionBelowOnePercentAtDefaults) {
  ModelConfig small;
  small.layers = 2;
  small.width = 64;
  small.heads = 4;
  small.context_len = 256;
  small.vocab = byte_vocab();
  const LoraAdapter a = new_adapter(small, 2, 1);
  EXPECT_LT(static_cast<double>(a.parameter_count()) / static_cast<double>(small.param_count()),
            0.01);
}

}  // namespace
}  // namespace fedpt
