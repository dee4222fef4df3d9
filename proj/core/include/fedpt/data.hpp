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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedpt/model.hpp"

namespace fedpt {

// ---------------------------------------------------------------------------
// Byte-level tokenizer: ids 0..255 are raw bytes, then pad, begin, end.

inline constexpr int kPadId = 256;
inline constexpr int kBosId = 257;
inline constexpr int kEosId = 258;
inline constexpr int kByteVocabSize = 259;

/// The one vocabulary object shared by every model built from byte tokens.
VocabPtr byte_vocab();

std::vector<int> tokenize(std::string_view text);
/// Throws InputError on any id that is not a byte.
std::string detokenize(std::span<const int> ids);

// ---------------------------------------------------------------------------
// Records.

enum class Split { kTrain, kVal, kTest, kPublic };
std::string_view split_name(Split s);
std::optional<Split> parse_split(std::string_view s);

struct Example {
  std::string instruction;
  std::string input;
  std::string response;
  std::string category;
  Split split = Split::kTrain;
  bool operator==(const Example&) const = default;
};

struct Corpus {
  std::vector<Example> examples;
  /// Category labels in canonical order; histograms index into this list.
  std::vector<std::string> categories;

  std::vector<std::size_t> indices(Split s) const;
  /// Position of `name` in `categories`; throws InputError when unknown.
  std::size_t category_index(std::string_view name) const;
};

/// Instruction template: preamble, [Instruction], optional [Input] (omitted
/// when the input is empty), [Response] header.
std::string wrap_prompt(const Example& e);

/// prompt = begin token + wrapped prompt bytes; target = response bytes + end.
SequencePair encode_example(const Example& e);
/// Prompt and response fit together in a `context_len` window.
bool fits_context(const Example& e, int context_len);

// ---------------------------------------------------------------------------
// Synthetic instruction tasks.

/// All task categories, in canonical order.
const std::vector<std::string>& task_categories();
/// The instruction text used for a category.
std::string task_instruction(std::string_view category);
/// Ground truth for a category applied to an input (the task oracle).
std::string run_task(std::string_view category, std::string_view input);

struct CorpusSizes {
  std::size_t train = 2000;
  std::size_t val = 200;
  std::size_t test = 120;
  std::size_t public_kd = 512;
};

struct CorpusOptions {
  CorpusSizes sizes;
  /// Number of categories taken from the front of task_categories().
  int categories = 8;
  int context_len = 256;
};

/// Deterministic per seed. Categories are balanced within each split
/// (round-robin), inputs drawn at random. Public inputs come from a hash
/// class of inputs that the other splits never use.
Corpus generate_corpus(std::uint64_t seed, const CorpusOptions& options);

/// General-text documents for base-model pretraining. Covers the same task
/// families in a plain "question / answer" layout that never uses the
/// instruction template.
std::vector<std::string> generate_pretraining_text(std::uint64_t seed, std::size_t count,
                                                   int categories);

/// Next-token training pair for a pretraining document.
SequencePair encode_document(std::string_view text);

/// Concatenates documents, each closed by end, into sequences of at most
/// `context_len` tokens so every position gets trained. A document never
/// straddles two sequences; one that cannot fit at all is dropped.
std::vector<SequencePair> pack_documents(std::span<const std::string> texts,
                                         std::size_t context_len);

// ---------------------------------------------------------------------------
// Corpus file: one JSON object per line with fields, in this order,
// instruction, input, response, category, split (train|val|test|public).
// Standard JSON string escaping.

void write_corpus(std::ostream& out, const Corpus& corpus);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
/// Categories are taken in first-appearance order unless `categories` is
/// given, in which case every record must use one of them. Malformed lines
/// are FormatErrors naming the line number. Records whose prompt + response
/// exceed `context_len` are dropped.
Corpus read_corpus(std::istream& in, const std::vector<std::string>& categories = {},
                   int context_len = 0);
Corpus read_corpus(const std::filesystem::path& path,
                   const std::vector<std::string>& categories = {}, int context_len = 0);

// ---------------------------------------------------------------------------
// Partitions of the train split across devices.

struct DevicePartition {
  /// Per device, sorted indices into Corpus::examples.
  std::vector<std::vector<std::size_t>> devices;
  /// Per device, sample count per category (Corpus::categories order).
  std::vector<std::vector<std::size_t>> histogram;

  std::size_t num_devices() const { return devices.size(); }
};

/// Exactly two categories per device, device sizes equal within one sample.
/// The first C devices pair neighbours perm[n], perm[(n + 1) mod C] of a
/// seeded category permutation; later devices take chords across that cycle
/// so category loads stay even. Per-device counts come from a flow over
/// those pairs. InputError when no such assignment exists.
DevicePartition partition_pathological(const Corpus& corpus, int num_devices, std::uint64_t seed);

/// Per category, device shares ~ Dirichlet(concentration), rounded by largest
/// remainder.
DevicePartition partition_dirichlet(const Corpus& corpus, int num_devices, double concentration,
                                    std::uint64_t seed);

/// Every device's training pairs, in index order.
std::vector<SequencePair> encode_indices(const Corpus& corpus, std::span<const std::size_t> idx);

}  // namespace fedpt
