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
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedpt/data.hpp"
#include "fedpt/decode.hpp"

namespace fedpt {

/// Lowercased words with every non-alphanumeric byte treated as a separator.
std::vector<std::string> rouge_words(std::string_view text);

/// Longest common subsequence length, O(|a|·|b|) dynamic program.
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Rouge-L F1 over rouge_words; 0 when either side is empty or nothing matches.
double rouge_l(std::string_view candidate, std::string_view reference);

/// Distinct n-grams over total n-grams across all texts (whitespace words).
/// Absent when no text has n words.
std::optional<double> dist_n(std::span<const std::string> texts, int n);

struct EvalOptions {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  DecodeOptions decode;
  std::vector<int> dist_orders = {3, 4};
  int workers = 1;
};

struct EvalReport {
  double rouge_mean = 0.0;  // in [0, 1]
  double rouge_std = 0.0;   // population std of per-seed means
  std::vector<double> per_seed;
  std::map<int, std::optional<double>> dist;
  std::map<std::string, double> per_category;
  std::size_t examples = 0;
  std::size_t failures = 0;
  EvalOptions settings;
  /// Generations of the first seed, in example order (empty when failed).
  std::vector<std::string> generations;
};

/// Decodes every example prompt once per seed (once in total when greedy,
/// since greedy decoding ignores the seed) and scores it against the
/// reference response. Failing examples are skipped and counted.
EvalReport evaluate(const LogitSource& source, const Corpus& corpus,
                    std::span<const std::size_t> indices, const EvalOptions& options);

/// The report as an indented JSON document (scores scaled ×100).
std::string report_json(const EvalReport& report, std::string_view title);

/// One row of the flat results table.
struct TableRow {
  int round = 0;
  std::string dataset;
  std::string variant;
  double alpha = 0.0;
  std::string metric;
  double value = 0.0;
};

/// Rows for one report: rouge_l mean/std, dist_n, per-category rouge_l.
std::vector<TableRow> table_rows(const EvalReport& report, int round, std::string_view dataset,
                                 std::string_view variant, double alpha);

/// Tab-separated with a header line.
void write_table(std::ostream& out, std::span<const TableRow> rows);
std::vector<TableRow> read_table(std::istream& in);

/// The alpha with the highest "rouge_l" value among rows of `variant`;
/// the first on ties.
std::optional<double> best_alpha(std::span<const TableRow> rows, std::string_view variant);

}  // namespace fedpt
