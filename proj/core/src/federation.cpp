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

#include "fedpt/federation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "fedpt/errors.hpp"
#include "fedpt/proxy.hpp"
#include "fedpt/parallel.hpp"

namespace fedpt {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16) throw FormatError("round record: bad checksum " + s);
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw FormatError("round record: bad checksum " + s);
  }
  return v;
}

// Mean batch loss only; used when the step size is zero and the adapter
// cannot move.
double batch_loss(const ModelParams& base, const engine::LowRankDelta& delta,
                  std::span<const SequencePair> batch) {
  auto ce = [&](std::size_t e, const Matrix& logits, Matrix& dlogits) {
    return engine::cross_entropy(logits, batch[e].target, &dlogits);
  };
  return engine::backward_batch(base, &delta, batch, ce, nullptr, nullptr);
}

}  // namespace

std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::kFedPT: return "fedpt";
    case Mode::kFedAvgSmall: return "fedavg-small";
    case Mode::kFedAvgPlusPT: return "fedavg-plus-pt";
    case Mode::kBase: return "base";
  }
  return "fedpt";
}

std::optional<Mode> parse_mode(std::string_view s) {
  for (Mode m : {Mode::kFedPT, Mode::kFedAvgSmall, Mode::kFedAvgPlusPT, Mode::kBase}) {
    if (mode_name(m) == s) return m;
  }
  return std::nullopt;
}

void FedConfig::validate() const {
  require(num_devices >= 1, "num_devices must be >= 1");
  require(devices_per_round >= 1 && devices_per_round <= num_devices,
          "devices_per_round must be in [1, num_devices]");
  require(local_epochs >= 1, "local_epochs must be >= 1");
  require(rounds >= 1, "rounds must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(std::isfinite(base_lr) && base_lr >= 0.0, "lr must be >= 0");
  require(std::isfinite(alpha) && alpha >= 0.0, "alpha must be >= 0");
  require(rank >= 1, "rank must be >= 1");
  require(drop_prob >= 0.0 && drop_prob < 1.0, "drop_prob must be in [0, 1)");
  require(workers >= 1, "workers must be >= 1");
  kd.validate();
}

std::vector<int> select_devices(Rng& rng, int n, int k) {
  require(n >= 1, "select_devices: N must be >= 1");
  require(k >= 1, "select_devices: K must be >= 1");
  require(k <= n, "select_devices: K exceeds N");
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
    const std::size_t j = i + rng.below(ids.size() - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(static_cast<std::size_t>(k));
  return ids;
}

LocalResult local_update(std::shared_ptr<const ModelParams> small_base,
                         const LoraAdapter& adapter_in, const DeviceState& device,
                         const LocalOptions& options, Rng& rng) {
  require(options.epochs >= 1, "local_update: epochs must be >= 1");
  require(options.batch_size >= 1, "local_update: batch_size must be >= 1");
  require(std::isfinite(options.lr) && options.lr >= 0.0, "local_update: lr must be >= 0");
  AdaptedModel model{std::move(small_base), adapter_in};
  model.validate();
  LocalResult result;
  if (device.data.empty()) {
    result.adapter = adapter_in;
    result.skipped = true;
    return result;
  }
  Optimizer opt(options.optimizer, model.adapter.tensors());
  std::vector<std::size_t> order(device.data.size());
  double loss_sum = 0.0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      std::sort(idx.begin(), idx.end());
      std::vector<SequencePair> batch;
      batch.reserve(idx.size());
      for (std::size_t i : idx) batch.push_back(device.data[i]);
      if (options.lr == 0.0) {
        const auto delta = prepare_delta(model.base->config(), model.adapter);
        loss_sum += batch_loss(*model.base, delta, batch);
      } else {
        LossAndGrad lg = backward(model, batch);
        opt.step(model.adapter.tensors(), lg.grads, options.lr);
        loss_sum += lg.loss;
      }
      ++result.steps;
    }
  }
  result.mean_loss = loss_sum / static_cast<double>(result.steps);
  result.adapter = std::move(model.adapter);
  return result;
}

LoraAdapter aggregate(std::span<const LoraAdapter> adapters, std::span<const double> weights) {
  require(!adapters.empty(), "aggregate: no adapters");
  ensure(adapters.size() == weights.size(), "aggregate: adapter/weight count mismatch");
  double total = 0.0;
  for (double w : weights) {
    require(std::isfinite(w) && w >= 0.0, "aggregate: weights must be finite and >= 0");
    total += w;
  }
  require(total > 0.0, "aggregate: weights sum to zero");
  for (const LoraAdapter& a : adapters) {
    ensure(a.congruent(adapters[0]), "aggregate: adapter shapes differ");
  }
  if (adapters.size() == 1) return adapters[0];
  // identical uploads come back unchanged; the weighted sum would round
  if (std::all_of(adapters.begin() + 1, adapters.end(),
                  [&](const LoraAdapter& a) { return a == adapters[0]; })) {
    return adapters[0];
  }

  // Canonical order by content so any permutation of the inputs sums the
  // same terms in the same sequence.
  std::vector<std::size_t> order(adapters.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::uint64_t> keys(adapters.size());
  for (std::size_t i = 0; i < adapters.size(); ++i) keys[i] = checksum(adapters[i]);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (keys[a] != keys[b]) return keys[a] < keys[b];
    return std::bit_cast<std::uint64_t>(weights[a]) < std::bit_cast<std::uint64_t>(weights[b]);
  });
  double canonical_total = 0.0;
  for (std::size_t i : order) canonical_total += weights[i];

  LoraAdapter out = adapters[0];
  auto dst = out.tensors().flat();
  std::fill(dst.begin(), dst.end(), 0.0);
  for (std::size_t i : order) {
    const double w = weights[i] / canonical_total;
    auto src = adapters[i].tensors().flat();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += w * src[k];
  }
  return out;
}

std::string to_json_line(const RoundRecord& r) {
  nlohmann::ordered_json j;
  j["schema"] = RoundRecord::kSchemaVersion;
  j["round"] = r.round;
  j["lr"] = r.lr;
  j["selected"] = r.selected;
  j["dropped"] = r.dropped;
  j["skipped"] = r.skipped;
  nlohmann::ordered_json losses = nlohmann::ordered_json::array();
  for (const auto& [id, loss] : r.local_loss) losses.push_back({{"device", id}, {"loss", loss}});
  j["local_loss"] = losses;
  j["aggregate_checksum"] = hex64(r.aggregate_checksum);
  j["adapter_checksum"] = hex64(r.adapter_checksum);
  j["bytes"] = r.bytes;
  j["kd"] = {{"steps", r.kd_steps}, {"first_loss", r.kd_first_loss}, {"last_loss", r.kd_last_loss}};
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.metrics) metrics[k] = v;
  j["metrics"] = metrics;
  return j.dump();
}

RoundRecord parse_round_record(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    if (j.at("schema").get<int>() != RoundRecord::kSchemaVersion) {
      throw FormatError("round record: unsupported schema");
    }
    RoundRecord r;
    r.round = j.at("round").get<int>();
    r.lr = j.at("lr").get<double>();
    r.selected = j.at("selected").get<std::vector<int>>();
    r.dropped = j.at("dropped").get<std::vector<int>>();
    r.skipped = j.at("skipped").get<std::vector<int>>();
    for (const auto& e : j.at("local_loss")) {
      r.local_loss.emplace_back(e.at("device").get<int>(), e.at("loss").get<double>());
    }
    r.aggregate_checksum = parse_hex64(j.at("aggregate_checksum").get<std::string>());
    r.adapter_checksum = parse_hex64(j.at("adapter_checksum").get<std::string>());
    r.bytes = j.at("bytes").get<std::uint64_t>();
    r.kd_steps = j.at("kd").at("steps").get<int>();
    r.kd_first_loss = j.at("kd").at("first_loss").get<double>();
    r.kd_last_loss = j.at("kd").at("last_loss").get<double>();
    for (const auto& [k, v] : j.at("metrics").items()) r.metrics[k] = v.get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("round record: ") + e.what());
  }
}

LoraAdapter initial_adapter(const FedConfig& config, const ModelConfig& small) {
  return new_adapter(small, config.rank, mix64(config.seed ^ 0x6c6f7261ULL));
}

RoundRecord run_round(FederationState& state, int t) {
  const FedConfig& cfg = state.config;
  require(t >= 0 && t < cfg.rounds, "run_round: round index out of range");
  ensure(state.small_base != nullptr, "run_round: small base missing");
  require(static_cast<int>(state.devices.size()) == cfg.num_devices,
          "run_round: device count differs from num_devices");
  const std::uint64_t round = static_cast<std::uint64_t>(t);

  RoundRecord rec;
  rec.round = t + 1;
  rec.lr = cosine_lr(t, cfg.rounds, cfg.base_lr);

  Rng select_rng = Rng::stream(cfg.seed, "select", round);
  rec.selected = select_devices(select_rng, cfg.num_devices, cfg.devices_per_round);

  // Broadcast travels as bytes; each device decodes its own copy.
  const auto wire = serialize(state.adapter);
  const std::size_t payload = wire.size();

  std::vector<LocalResult> results(rec.selected.size());
  const LocalOptions local{cfg.local_epochs, rec.lr, cfg.batch_size, cfg.optimizer};
  parallel_for(rec.selected.size(), cfg.workers, [&](std::size_t i) {
    const int id = rec.selected[i];
    const LoraAdapter received = deserialize(wire);
    Rng rng = Rng::stream(cfg.seed, "local", round, static_cast<std::uint64_t>(id));
    results[i] = local_update(state.small_base, received,
                              state.devices[static_cast<std::size_t>(id)], local, rng);
  });

  Rng drop_rng = Rng::stream(cfg.seed, "drop", round);
  std::vector<std::pair<int, std::size_t>> survivors;  // (device id, result slot)
  std::uint64_t uploads = 0;
  for (std::size_t i = 0; i < rec.selected.size(); ++i) {
    const int id = rec.selected[i];
    const bool drop = cfg.drop_prob > 0.0 && drop_rng.uniform() < cfg.drop_prob;
    if (drop) {
      rec.dropped.push_back(id);
      continue;
    }
    if (results[i].skipped) {
      rec.skipped.push_back(id);
      continue;
    }
    rec.local_loss.emplace_back(id, results[i].mean_loss);
    survivors.emplace_back(id, i);
  }
  std::sort(survivors.begin(), survivors.end());

  std::vector<LoraAdapter> uploaded;
  std::vector<double> weights;
  for (const auto& [id, slot] : survivors) {
    const auto up = serialize(results[slot].adapter);
    uploads += up.size();
    uploaded.push_back(deserialize(up));
    weights.push_back(static_cast<double>(state.devices[static_cast<std::size_t>(id)].size()));
  }
  rec.bytes = static_cast<std::uint64_t>(rec.selected.size()) * payload + uploads;

  LoraAdapter aggregated = uploaded.empty() ? state.adapter : aggregate(uploaded, weights);
  rec.aggregate_checksum = checksum(aggregated);
  state.aggregated = aggregated;

  if (cfg.mode == Mode::kFedPT || cfg.mode == Mode::kFedAvgPlusPT) {
    ensure(state.large_base != nullptr, "run_round: large base missing");
    const ProxyEnsemble teacher(state.large_base, state.small_base,
                                AdaptedModel{state.small_base, aggregated}, cfg.alpha);
    DistillConfig kd = cfg.kd;
    if (cfg.mode == Mode::kFedAvgPlusPT) kd.iterations = 0;
    Rng kd_rng = Rng::stream(cfg.seed, "kd", round);
    DistillStats stats;
    state.adapter = distill(AdaptedModel{state.small_base, aggregated}, teacher, state.public_set,
                            kd, kd_rng, &stats);
    rec.kd_steps = stats.steps;
    rec.kd_first_loss = stats.first_loss;
    rec.kd_last_loss = stats.last_loss;
  } else {
    state.adapter = std::move(aggregated);
  }
  rec.adapter_checksum = checksum(state.adapter);
  return rec;
}

std::vector<RoundRecord> run_experiment(FederationState& state, const RoundHook& hook) {
  state.config.validate();
  std::vector<RoundRecord> records;
  if (state.config.mode == Mode::kBase) return records;
  for (int t = 0; t < state.config.rounds; ++t) {
    RoundRecord rec = run_round(state, t);
    if (hook) hook(state, rec);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace fedpt
