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
#include <map>
#include <string>
#include <vector>

#include "fedpt/lora.hpp"
#include "fedpt/model.hpp"

namespace fedpt {

// Checkpoint layout:
//
//   fedpt-checkpoint 1
//   <key> <value>            config fields, seed, free-form metadata
//   ...
//   tensor <name> <rows> <cols>   one line per tensor, storage order
//   ...
//   end
//   <float64 little-endian values of every tensor, back to back>
//
// Required keys: layers width heads context_len ff_mult vocab_size pad bos
// eos seed. Keys and values contain no whitespace.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  /// Extra key/value lines (e.g. "kind large", "tokens 123456").
  std::map<std::string, std::string> meta;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params,
                                            const std::map<std::string, std::string>& meta = {});

/// `vocab`, when given, must match the stored vocabulary and is then shared
/// by the loaded model (ConfigError otherwise).
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, VocabPtr vocab = nullptr);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::map<std::string, std::string>& meta = {});
/// Missing file is a ConfigError; malformed content a FormatError.
Checkpoint load_checkpoint(const std::filesystem::path& path, VocabPtr vocab = nullptr);

void save_adapter(const std::filesystem::path& path, const LoraAdapter& adapter);
LoraAdapter load_adapter(const std::filesystem::path& path);

/// Whole-file helpers shared by the loaders.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames, so readers never observe a
/// partial file.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace fedpt
