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
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedpt/distill.hpp"
#include "fedpt/lora.hpp"
#include "fedpt/model.hpp"
#include "fedpt/rng.hpp"

namespace fedpt {

/// fedpt: full protocol. fedavg-small: federated LoRA on the small model
/// only. fedavg-plus-pt: fedpt without distillation. base: no training.
enum class Mode { kFedPT, kFedAvgSmall, kFedAvgPlusPT, kBase };
std::string_view mode_name(Mode m);
std::optional<Mode> parse_mode(std::string_view s);

struct FedConfig {
  int num_devices = 10;
  int devices_per_round = 10;
  int local_epochs = 2;
  int rounds = 20;
  std::size_t batch_size = 64;
  double base_lr = 3e-3;
  std::uint64_t seed = 42;
  double alpha = 1.5;
  int rank = 2;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  /// Probability that a selected device fails to report back in a round.
  double drop_prob = 0.0;
  int workers = 1;
  Mode mode = Mode::kFedPT;
  /// kd.lambda is the mixing weight of the distillation objective.
  DistillConfig kd;

  /// Throws InputError naming the offending field.
  void validate() const;
};

struct DeviceState {
  int id = 0;
  std::vector<SequencePair> data;
  std::size_t size() const { return data.size(); }
};

/// K distinct ids from [0, N), uniformly without replacement, in draw order.
std::vector<int> select_devices(Rng& rng, int n, int k);

struct LocalOptions {
  int epochs = 1;
  double lr = 0.0;
  std::size_t batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::kAdam;
};

struct LocalResult {
  LoraAdapter adapter;
  double mean_loss = 0.0;
  int steps = 0;
  bool skipped = false;  // empty partition; adapter returned unchanged
};

/// `epochs` passes over the device data in seeded shuffled mini-batches
/// (indices within a batch kept in ascending order), updating only the
/// adapter with a fresh optimizer.
LocalResult local_update(std::shared_ptr<const ModelParams> small_base,
                         const LoraAdapter& adapter_in, const DeviceState& device,
                         const LocalOptions& options, Rng& rng);

/// Weighted mean of B factors and of A factors separately. Weights are
/// normalized to sum to one; inputs are combined in a canonical order so the
/// result does not depend on argument order.
LoraAdapter aggregate(std::span<const LoraAdapter> adapters, std::span<const double> weights);

struct RoundRecord {
  static constexpr int kSchemaVersion = 1;
  int round = 0;  // 1-based
  double lr = 0.0;
  std::vector<int> selected;
  std::vector<int> dropped;
  std::vector<int> skipped;
  /// Mean local training loss per selected device, in `selected` order
  /// (absent entries for dropped or skipped devices are not listed).
  std::vector<std::pair<int, double>> local_loss;
  std::uint64_t aggregate_checksum = 0;
  std::uint64_t adapter_checksum = 0;  // after distillation
  std::uint64_t bytes = 0;
  int kd_steps = 0;
  double kd_first_loss = 0.0;
  double kd_last_loss = 0.0;
  std::map<std::string, double> metrics;

  bool operator==(const RoundRecord&) const = default;
};

/// One JSON object per line.
std::string to_json_line(const RoundRecord& r);
RoundRecord parse_round_record(std::string_view line);

struct FederationState {
  FedConfig config;
  std::shared_ptr<const ModelParams> small_base;
  /// Null in fedavg-small mode.
  std::shared_ptr<const ModelParams> large_base;
  std::vector<DeviceState> devices;
  std::vector<SequencePair> public_set;
  /// Current global adapter (theta_s^t).
  LoraAdapter adapter;
  /// Aggregate of the last round before distillation.
  LoraAdapter aggregated;
};

/// Fresh global adapter seeded from the root seed.
LoraAdapter initial_adapter(const FedConfig& config, const ModelConfig& small);

/// select, broadcast, local updates, aggregate, proxy, distill (per mode).
/// `t` is the 0-based round index.
RoundRecord run_round(FederationState& state, int t);

/// Called after each round with the record (mutable, for extra metrics).
using RoundHook = std::function<void(const FederationState&, RoundRecord&)>;

/// All rounds in order; base mode runs none.
std::vector<RoundRecord> run_experiment(FederationState& state, const RoundHook& hook = {});

}  // namespace fedpt
