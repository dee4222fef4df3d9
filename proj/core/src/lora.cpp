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

#include "fedpt/lora.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "binary_io.hpp"
#include "fedpt/errors.hpp"
#include "fedpt/rng.hpp"

namespace fedpt {

namespace {

constexpr char kMagic[8] = {'F', 'P', 'T', 'L', 'O', 'R', 'A', '\0'};

LayerSlot weight_slot(engine::Projection p) {
  return p == engine::kQuery ? LayerSlot::kWq : LayerSlot::kWv;
}

}  // namespace

std::string LoraTarget::name() const {
  return names::layer(layer, projection == engine::kQuery ? "attn.q" : "attn.v");
}

LoraAdapter::LoraAdapter(int rank, std::vector<LoraTarget> targets)
    : rank_(rank), targets_(std::move(targets)) {
  require(rank_ >= 1, "adapter rank must be >= 1");
  const std::size_t r = static_cast<std::size_t>(rank_);
  for (const LoraTarget& t : targets_) {
    tensors_.add(t.name() + ".lora_b", t.dout, r);
    tensors_.add(t.name() + ".lora_a", r, t.din);
  }
}

bool LoraAdapter::compatible_with(const ModelConfig& config) const {
  const std::size_t d = static_cast<std::size_t>(config.width);
  for (const LoraTarget& t : targets_) {
    if (t.layer < 0 || t.layer >= config.layers) return false;
    if (t.projection != engine::kQuery && t.projection != engine::kValue) return false;
    if (t.dout != d || t.din != d) return false;
  }
  for (std::size_t i = 0; i < targets_.size(); ++i) {
    for (std::size_t j = i + 1; j < targets_.size(); ++j) {
      if (targets_[i].layer == targets_[j].layer &&
          targets_[i].projection == targets_[j].projection) {
        return false;
      }
    }
  }
  return true;
}

std::vector<LoraTarget> attention_qv_targets(const ModelConfig& config) {
  const std::size_t d = static_cast<std::size_t>(config.width);
  std::vector<LoraTarget> out;
  for (int l = 0; l < config.layers; ++l) {
    out.push_back({l, engine::kQuery, d, d});
    out.push_back({l, engine::kValue, d, d});
  }
  return out;
}

LoraAdapter new_adapter(const ModelConfig& config, int rank, std::uint64_t seed) {
  config.validate();
  auto targets = attention_qv_targets(config);
  for (const LoraTarget& t : targets) {
    if (rank < 1 || static_cast<std::size_t>(rank) >= std::min(t.dout, t.din)) {
      throw InputError("adapter rank " + std::to_string(rank) + " must be in [1, " +
                       std::to_string(std::min(t.dout, t.din)) + ")");
    }
  }
  LoraAdapter adapter(rank, std::move(targets));
  Rng rng = Rng::stream(seed, "lora");
  for (std::size_t t = 0; t < adapter.targets().size(); ++t) {
    for (double& v : adapter.a(t)) v = rng.normal(0.0, 0.02);
  }
  return adapter;
}

void AdaptedModel::validate() const {
  if (!base) throw ConfigError("adapted model has no base");
  if (!adapter.compatible_with(base->config())) {
    throw ConfigError("adapter targets do not match the base model");
  }
}

engine::LowRankDelta prepare_delta(const ModelConfig& config, const LoraAdapter& adapter) {
  if (!adapter.compatible_with(config)) {
    throw ConfigError("adapter targets do not match the base model");
  }
  engine::LowRankDelta delta;
  delta.layers.resize(static_cast<std::size_t>(config.layers));
  const std::size_t r = static_cast<std::size_t>(adapter.rank());
  for (std::size_t t = 0; t < adapter.targets().size(); ++t) {
    const LoraTarget& tg = adapter.targets()[t];
    engine::LowRankFactor& f = delta.layers[static_cast<std::size_t>(tg.layer)][tg.projection];
    f.rank = adapter.rank();
    f.din = tg.din;
    f.dout = tg.dout;
    auto a = adapter.a(t);
    auto b = adapter.b(t);
    f.a.assign(a.begin(), a.end());
    f.b.assign(b.begin(), b.end());
    f.at.assign(tg.din * r, 0.0);
    f.bt.assign(r * tg.dout, 0.0);
    for (std::size_t j = 0; j < r; ++j) {
      for (std::size_t i = 0; i < tg.din; ++i) f.at[i * r + j] = a[j * tg.din + i];
    }
    for (std::size_t o = 0; o < tg.dout; ++o) {
      for (std::size_t j = 0; j < r; ++j) f.bt[j * tg.dout + o] = b[o * r + j];
    }
  }
  return delta;
}

Matrix adapted_forward(const AdaptedModel& model, std::span<const int> tokens) {
  model.validate();
  validate_tokens(model.base->config(), tokens);
  const auto delta = prepare_delta(model.base->config(), model.adapter);
  engine::KvCache cache(model.base->config(), tokens.size());
  return engine::forward(*model.base, &delta, cache, tokens, 0);
}

ModelParams merge(const AdaptedModel& model) {
  model.validate();
  ModelParams out = *model.base;
  const std::size_t r = static_cast<std::size_t>(model.adapter.rank());
  for (std::size_t t = 0; t < model.adapter.targets().size(); ++t) {
    const LoraTarget& tg = model.adapter.targets()[t];
    auto a = model.adapter.a(t);
    auto b = model.adapter.b(t);
    // Stored weights are din × dout, so W[i][o] += (B·A)[o][i].
    auto w = out.layer_view(tg.layer, weight_slot(tg.projection));
    for (std::size_t i = 0; i < tg.din; ++i) {
      for (std::size_t o = 0; o < tg.dout; ++o) {
        double s = 0.0;
        for (std::size_t j = 0; j < r; ++j) s += b[o * r + j] * a[j * tg.din + i];
        w[i * tg.dout + o] += s;
      }
    }
  }
  return out;
}

double nll_loss(const AdaptedModel& model, std::span<const int> prompt,
                std::span<const int> target) {
  model.validate();
  SequencePair pair{{prompt.begin(), prompt.end()}, {target.begin(), target.end()}};
  validate_pair(model.base->config(), pair);
  const auto delta = prepare_delta(model.base->config(), model.adapter);
  const auto input = engine::teacher_forcing_input(pair);
  engine::KvCache cache(model.base->config(), input.size());
  Matrix logits = engine::forward(*model.base, &delta, cache, input, prompt.size() - 1);
  return engine::cross_entropy(logits, target, nullptr);
}

LossAndGrad backward(const AdaptedModel& model, std::span<const SequencePair> batch) {
  auto ce = [&](std::size_t e, const Matrix& logits, Matrix& dlogits) {
    return engine::cross_entropy(logits, batch[e].target, &dlogits);
  };
  return backward(model, batch, ce);
}

LossAndGrad backward(const AdaptedModel& model, std::span<const SequencePair> batch,
                     const engine::TargetLoss& loss) {
  model.validate();
  require(!batch.empty(), "backward: empty batch");
  for (const SequencePair& p : batch) validate_pair(model.base->config(), p);
  const auto delta = prepare_delta(model.base->config(), model.adapter);
  engine::LowRankGrads lg;
  const double value = engine::backward_batch(*model.base, &delta, batch, loss, nullptr, &lg);
  TensorMap grads = model.adapter.tensors().zeros_like();
  for (std::size_t t = 0; t < model.adapter.targets().size(); ++t) {
    const LoraTarget& tg = model.adapter.targets()[t];
    const engine::LowRankGrad& g = lg[static_cast<std::size_t>(tg.layer)][tg.projection];
    std::ranges::copy(g.b, grads.view(2 * t).begin());
    std::ranges::copy(g.a, grads.view(2 * t + 1).begin());
  }
  return {value, std::move(grads)};
}

std::shared_ptr<const LogitSource> make_source(const AdaptedModel& model) {
  model.validate();
  auto delta = std::make_shared<const engine::LowRankDelta>(
      prepare_delta(model.base->config(), model.adapter));
  return std::make_shared<const ModelSource>(model.base, std::move(delta));
}

std::size_t serialized_header_size(std::size_t target_count) {
  return 8 + 4 + 4 + 4 + 16 * target_count + 8;
}

std::size_t serialized_size(const LoraAdapter& adapter) {
  return serialized_header_size(adapter.targets().size()) + 8 * adapter.parameter_count();
}

std::vector<std::uint8_t> serialize(const LoraAdapter& adapter) {
  std::vector<std::uint8_t> out;
  out.reserve(serialized_size(adapter));
  for (char c : kMagic) out.push_back(static_cast<std::uint8_t>(c));
  bin::put_u32(out, kAdapterFormatVersion);
  bin::put_u32(out, static_cast<std::uint32_t>(adapter.rank()));
  bin::put_u32(out, static_cast<std::uint32_t>(adapter.targets().size()));
  for (const LoraTarget& t : adapter.targets()) {
    bin::put_u32(out, static_cast<std::uint32_t>(t.layer));
    bin::put_u32(out, static_cast<std::uint32_t>(t.projection));
    bin::put_u32(out, static_cast<std::uint32_t>(t.dout));
    bin::put_u32(out, static_cast<std::uint32_t>(t.din));
  }
  bin::put_u64(out, adapter.parameter_count());
  bin::put_f64s(out, adapter.tensors().flat());
  return out;
}

LoraAdapter deserialize(std::span<const std::uint8_t> bytes) {
  bin::Reader in(bytes);
  std::uint8_t magic[8];
  in.bytes(magic);
  if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("adapter: bad magic");
  const std::uint32_t version = in.u32();
  if (version != kAdapterFormatVersion) {
    throw FormatError("adapter: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t rank = in.u32();
  const std::uint32_t count = in.u32();
  if (rank == 0) throw FormatError("adapter: rank 0");
  if (static_cast<std::uint64_t>(count) * 16 > in.remaining()) {
    throw FormatError("adapter: truncated target list");
  }
  std::vector<LoraTarget> targets;
  std::uint64_t expected = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    LoraTarget t;
    t.layer = static_cast<int>(in.u32());
    const std::uint32_t proj = in.u32();
    if (proj > 1) throw FormatError("adapter: unknown projection id");
    t.projection = static_cast<engine::Projection>(proj);
    t.dout = in.u32();
    t.din = in.u32();
    expected += static_cast<std::uint64_t>(rank) * (t.dout + t.din);
    targets.push_back(t);
  }
  const std::uint64_t values = in.u64();
  if (values != expected) throw FormatError("adapter: length field does not match dimensions");
  if (values * 8 != in.remaining()) throw FormatError("adapter: payload size mismatch");
  LoraAdapter adapter(static_cast<int>(rank), std::move(targets));
  in.f64s(adapter.tensors().flat());
  return adapter;
}

std::uint64_t checksum(const LoraAdapter& adapter) {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(adapter.rank()));
  for (const LoraTarget& t : adapter.targets()) {
    h = mix64(h ^ (static_cast<std::uint64_t>(t.layer) << 32 | t.projection));
    h = mix64(h ^ (t.dout << 32 | t.din));
  }
  for (double v : adapter.tensors().flat()) h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace fedpt
