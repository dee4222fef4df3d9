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
#include <filesystem>
#include <string>
#include <vector>

#include "fedpt/data.hpp"
#include "fedpt/federation.hpp"
#include "fedpt/model.hpp"

namespace fedpt::cli {

struct ModelShape {
  int layers = 2;
  int width = 64;
  int heads = 4;
};

struct PretrainConfig {
  /// Target tokens per model; training stops at the first batch boundary
  /// at or past the budget.
  std::size_t tokens = 400000;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  double large_lr = 1e-3;
  /// Global gradient-norm cap.
  double clip = 1.0;
  std::size_t documents = 20000;
  std::size_t heldout_documents = 256;
  /// Fill the context window with several documents per sequence.
  bool pack = true;
};

struct EvalConfig {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<int> rounds = {1, 5, 10, 15, 20};
  std::vector<double> alphas = {1.5};
  int max_new_tokens = 64;
  bool sample = false;
  double temperature = 1.0;
  double top_p = 1.0;
  std::string split = "test";
  std::vector<int> dist_orders = {3, 4};
};

/// Everything an experiment needs. Serialized as JSON with sections model,
/// data, pretrain, federation, distill, eval (see README for every key).
struct ExperimentConfig {
  std::uint64_t seed = 42;
  Mode mode = Mode::kFedPT;
  int workers = 1;
  ModelShape small{2, 64, 4};
  ModelShape large{4, 128, 4};
  int context_len = 256;
  int rank = 2;
  CorpusOptions corpus;
  std::string partition = "pathological";
  double concentration = 0.5;
  std::string corpus_file;
  PretrainConfig pretrain;
  FedConfig fed;  // seed, mode, rank, workers mirrored from the fields above
  EvalConfig eval;

  ModelConfig small_config() const;
  ModelConfig large_config() const;
  /// FedConfig with the top-level fields copied in.
  FedConfig fed_config() const;
  /// ConfigError naming the first out-of-range field.
  void validate() const;
};

/// Strict parse: unknown keys and wrong types are ConfigErrors naming the
/// field. Missing keys keep their defaults.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON with every field present.
std::string config_json(const ExperimentConfig& config);

/// Default number of workers: available hardware threads.
int default_workers();

}  // namespace fedpt::cli
