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
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedpt/data.hpp"
#include "fedpt/eval.hpp"
#include "fedpt/federation.hpp"
#include "fedpt_cli/config.hpp"

namespace fedpt::cli {

namespace fs = std::filesystem;

/// Version string baked into manifests.
std::string code_version();

/// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "FEDPT_OUT_DIR";
/// $FEDPT_OUT_DIR when set, else "fedpt-out".
fs::path default_out_dir();

/// A failed post-condition check (e.g. large base not better than small).
class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------

struct PretrainResult {
  fs::path small_checkpoint;
  fs::path large_checkpoint;
  double small_heldout_nll = 0.0;
  double large_heldout_nll = 0.0;
  std::size_t small_tokens = 0;
  std::size_t large_tokens = 0;
  int steps = 0;
};

/// Trains both bases from scratch on generated general text and writes
/// <out>/pretrain/{small,large}.ckpt plus summary.json. Throws CheckFailed
/// when the large base does not reach a lower held-out loss.
PretrainResult cmd_pretrain(const ExperimentConfig& config, const fs::path& out,
                            std::ostream* log = nullptr);

/// Token-weighted mean NLL of `params` over documents.
double heldout_nll(const ModelParams& params, const std::vector<std::string>& docs,
                   int workers = 1);

// ---------------------------------------------------------------------------

struct RoundArtifacts {
  fs::path aggregated;  // aggregate before distillation
  fs::path adapter;     // global adapter after the round
};

struct RunManifest {
  static constexpr int kSchemaVersion = 1;
  std::string version;
  ExperimentConfig config;
  fs::path small_checkpoint;  // empty in base mode
  fs::path large_checkpoint;  // empty in fedavg-small mode
  std::uint64_t small_digest = 0;
  std::uint64_t large_digest = 0;
  fs::path log;
  std::map<int, RoundArtifacts> rounds;
};

std::string manifest_json(const RunManifest& m);
RunManifest parse_manifest(const std::string& text);
RunManifest load_manifest(const fs::path& path);

/// Content checksum of a file, for manifest integrity checks.
std::uint64_t file_digest(const fs::path& path);

/// Runs the configured mode and writes <out>/manifest.json, rounds.jsonl and
/// adapters for every eval round. Checkpoints are read from `checkpoints`
/// (directory holding small.ckpt / large.ckpt).
RunManifest cmd_run(const ExperimentConfig& config, const fs::path& checkpoints,
                    const fs::path& out, std::ostream* log = nullptr);

/// Re-executes a manifest's run into `out` using the recorded checkpoints,
/// which must still match their digests.
RunManifest cmd_rerun(const RunManifest& manifest, const fs::path& out,
                      std::ostream* log = nullptr);

// ---------------------------------------------------------------------------

/// The corpus a config describes (generated, or read from data.corpus_file).
Corpus load_corpus(const ExperimentConfig& config);

struct EvalRequest {
  /// Round whose adapters are evaluated; 0 picks the last saved round.
  int round = 0;
  std::string split = "test";
  std::vector<double> alphas;  // empty: the config's sweep
  bool include_base = false;   // also score the untuned large base
  /// Evaluate only the first `limit` examples of the split (0: all).
  std::size_t limit = 0;
  int workers = 1;
};

struct VariantReport {
  std::string variant;  // "base", "fedavg-small", "fedpt", "fedavg-plus-pt"
  double alpha = 0.0;   // 0 for variants without a proxy
  int round = 0;
  EvalReport report;
};

/// Scores the run's variants. Writes one JSON report per variant/alpha under
/// <run>/eval/ and appends rows to <run>/table.tsv. Unknown round: InputError.
std::vector<VariantReport> cmd_eval(const RunManifest& manifest, const fs::path& run_dir,
                                    const EvalRequest& request, std::ostream* log = nullptr);

// ---------------------------------------------------------------------------

struct DecodeRequest {
  std::string prompt;  // instruction text; must be non-empty
  std::string input;
  std::optional<double> alpha;  // default: federation.alpha
  int round = 0;                // 0: last saved round
  bool side_by_side = false;
  int max_new_tokens = 0;  // 0: eval.max_new_tokens
};

struct DecodeResult {
  std::optional<std::string> proxy;
  std::optional<std::string> large_base;
  std::optional<std::string> small_tuned;
};

DecodeResult cmd_decode(const RunManifest& manifest, const DecodeRequest& request);

// ---------------------------------------------------------------------------

DevicePartition make_partition(const ExperimentConfig& config, const Corpus& corpus);

/// Per-device category histogram as an aligned text table.
void print_partition(std::ostream& out, const Corpus& corpus, const DevicePartition& partition);

}  // namespace fedpt::cli
