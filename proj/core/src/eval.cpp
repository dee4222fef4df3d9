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

#include "fedpt/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "fedpt/errors.hpp"
#include "fedpt/parallel.hpp"

namespace fedpt {

namespace {

std::vector<std::string> whitespace_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct Scored {
  bool ok = false;
  std::string text;
  double rouge = 0.0;
};

}  // namespace

std::vector<std::string> rouge_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = rouge_words(candidate);
  const auto r = rouge_words(reference);
  if (c.empty() || r.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(c, r));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(c.size());
  const double rec = l / static_cast<double>(r.size());
  return 2.0 * p * rec / (p + rec);
}

std::optional<double> dist_n(std::span<const std::string> texts, int n) {
  require(n >= 1, "dist_n: n must be >= 1");
  const std::size_t k = static_cast<std::size_t>(n);
  std::unordered_set<std::string> distinct;
  std::size_t total = 0;
  for (const std::string& t : texts) {
    const auto w = whitespace_words(t);
    for (std::size_t i = 0; i + k <= w.size(); ++i) {
      std::string key;
      for (std::size_t j = 0; j < k; ++j) {
        key += w[i + j];
        key += '\x1f';
      }
      distinct.insert(std::move(key));
      ++total;
    }
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

EvalReport evaluate(const LogitSource& source, const Corpus& corpus,
                    std::span<const std::size_t> indices, const EvalOptions& options) {
  require(!indices.empty(), "evaluate: empty split");
  require(!options.seeds.empty(), "evaluate: no seeds");
  EvalReport report;
  report.settings = options;
  report.examples = indices.size();

  std::vector<SequencePair> pairs = encode_indices(corpus, indices);
  const std::size_t ctx = static_cast<std::size_t>(source.context_len());

  // Prompt prefix shared by every example, decoded once and forked.
  std::size_t prefix = pairs[0].prompt.size();
  for (const SequencePair& p : pairs) {
    prefix = std::min(prefix, p.prompt.size() - 1);
    std::size_t j = 0;
    while (j < prefix && p.prompt[j] == pairs[0].prompt[j]) ++j;
    prefix = j;
  }
  prefix = std::min(prefix, ctx);
  auto base = source.open();
  if (prefix > 0) base->feed(std::span<const int>(pairs[0].prompt).first(prefix));

  const bool greedy = !options.decode.sample;
  const std::size_t passes = greedy ? 1 : options.seeds.size();
  std::vector<std::vector<Scored>> scored(passes, std::vector<Scored>(pairs.size()));

  for (std::size_t s = 0; s < passes; ++s) {
    parallel_for(pairs.size(), options.workers, [&](std::size_t i) {
      Scored& out = scored[s][i];
      try {
        const auto& prompt = pairs[i].prompt;
        if (prompt.size() > ctx) throw InputError("prompt exceeds context_len");
        auto session = base->clone();
        Matrix last = session->feed(std::span<const int>(prompt).subspan(prefix));
        Rng rng = Rng::stream(options.seeds[s], "decode", indices[i]);
        auto ids = continue_decoding(*session, std::move(last.data), source, options.decode,
                                     greedy ? nullptr : &rng);
        // decoding stops at end; any other special has no text form
        if (std::any_of(ids.begin(), ids.end(), [](int t) { return t < 0 || t > 255; })) {
          throw FormatError("decode emitted a special token");
        }
        out.text = detokenize(ids);
        out.rouge = rouge_l(out.text, corpus.examples[indices[i]].response);
        out.ok = true;
      } catch (const std::exception&) {
        out.ok = false;
      }
    });
  }

  const auto& first = scored[0];
  for (const Scored& sc : first) {
    if (!sc.ok) ++report.failures;
  }
  require(report.failures < pairs.size(), "evaluate: every example failed to decode");

  for (std::size_t s = 0; s < options.seeds.size(); ++s) {
    const auto& run = scored[greedy ? 0 : s];
    double sum = 0.0;
    std::size_t n = 0;
    for (const Scored& sc : run) {
      if (!sc.ok) continue;
      sum += sc.rouge;
      ++n;
    }
    report.per_seed.push_back(n ? sum / static_cast<double>(n) : 0.0);
  }
  double mean = 0.0;
  for (double v : report.per_seed) mean += v;
  mean /= static_cast<double>(report.per_seed.size());
  double var = 0.0;
  for (double v : report.per_seed) var += (v - mean) * (v - mean);
  report.rouge_mean = mean;
  report.rouge_std = std::sqrt(var / static_cast<double>(report.per_seed.size()));

  std::map<std::string, std::pair<double, std::size_t>> cat;
  for (std::size_t s = 0; s < options.seeds.size(); ++s) {
    const auto& run = scored[greedy ? 0 : s];
    for (std::size_t i = 0; i < run.size(); ++i) {
      if (!run[i].ok) continue;
      auto& acc = cat[corpus.examples[indices[i]].category];
      acc.first += run[i].rouge;
      ++acc.second;
    }
  }
  for (const auto& [name, acc] : cat) {
    report.per_category[name] = acc.first / static_cast<double>(acc.second);
  }

  std::vector<std::string> texts;
  for (const Scored& sc : first) {
    report.generations.push_back(sc.text);
    if (sc.ok) texts.push_back(sc.text);
  }
  for (int n : options.dist_orders) report.dist[n] = dist_n(texts, n);
  return report;
}

std::string report_json(const EvalReport& report, std::string_view title) {
  nlohmann::ordered_json j;
  j["title"] = std::string(title);
  j["rouge_l"] = {{"mean", 100.0 * report.rouge_mean}, {"std", 100.0 * report.rouge_std}};
  nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
  for (double v : report.per_seed) seeds.push_back(100.0 * v);
  j["rouge_l_per_seed"] = seeds;
  nlohmann::ordered_json dist = nlohmann::ordered_json::object();
  for (const auto& [n, v] : report.dist) {
    dist["dist_" + std::to_string(n)] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json();
  }
  j["dist"] = dist;
  nlohmann::ordered_json cats = nlohmann::ordered_json::object();
  for (const auto& [name, v] : report.per_category) cats[name] = 100.0 * v;
  j["per_category_rouge_l"] = cats;
  j["examples"] = report.examples;
  j["failures"] = report.failures;
  const EvalOptions& s = report.settings;
  j["settings"] = {{"seeds", s.seeds},
                   {"max_new_tokens", s.decode.max_new_tokens},
                   {"sample", s.decode.sample},
                   {"temperature", s.decode.temperature},
                   {"top_p", s.decode.top_p}};
  return j.dump(2);
}

std::vector<TableRow> table_rows(const EvalReport& report, int round, std::string_view dataset,
                                 std::string_view variant, double alpha) {
  std::vector<TableRow> rows;
  auto add = [&](std::string metric, double value) {
    rows.push_back({round, std::string(dataset), std::string(variant), alpha, std::move(metric),
                    value});
  };
  add("rouge_l", 100.0 * report.rouge_mean);
  add("rouge_l_std", 100.0 * report.rouge_std);
  for (const auto& [n, v] : report.dist) {
    if (v) add("dist_" + std::to_string(n), *v);
  }
  for (const auto& [name, v] : report.per_category) add("rouge_l." + name, 100.0 * v);
  return rows;
}

void write_table(std::ostream& out, std::span<const TableRow> rows) {
  out << "round\tdataset\tvariant\talpha\tmetric\tvalue\n";
  for (const TableRow& r : rows) {
    out << r.round << '\t' << r.dataset << '\t' << r.variant << '\t' << std::setprecision(17)
        << r.alpha << '\t' << r.metric << '\t' << r.value << '\n';
  }
}

std::vector<TableRow> read_table(std::istream& in) {
  std::vector<TableRow> rows;
  std::string line;
  if (!std::getline(in, line)) return rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    TableRow r;
    std::string round, alpha, value;
    if (!std::getline(ls, round, '\t') || !std::getline(ls, r.dataset, '\t') ||
        !std::getline(ls, r.variant, '\t') || !std::getline(ls, alpha, '\t') ||
        !std::getline(ls, r.metric, '\t') || !std::getline(ls, value)) {
      throw FormatError("table line " + std::to_string(lineno) + ": expected 6 fields");
    }
    try {
      r.round = std::stoi(round);
      r.alpha = std::stod(alpha);
      r.value = std::stod(value);
    } catch (const std::exception&) {
      throw FormatError("table line " + std::to_string(lineno) + ": bad number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::optional<double> best_alpha(std::span<const TableRow> rows, std::string_view variant) {
  std::optional<double> best;
  double best_value = 0.0;
  for (const TableRow& r : rows) {
    if (r.variant != variant || r.metric != "rouge_l") continue;
    if (!best || r.value > best_value) {
      best = r.alpha;
      best_value = r.value;
    }
  }
  return best;
}

}  // namespace fedpt
