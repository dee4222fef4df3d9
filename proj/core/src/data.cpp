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

#include "fedpt/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "fedpt/errors.hpp"
#include "fedpt/rng.hpp"

namespace fedpt {

namespace {

constexpr std::string_view kPreamble =
    "Below is an instruction that describes a task.\n"
    "Write a response that appropriately completes the request.\n\n";

constexpr std::array<std::string_view, 20> kWords = {
    "cat", "dog", "sun", "owl", "fox", "bee", "cow", "elk", "hen", "ant",
    "bat", "emu", "yak", "ram", "pig", "rat", "jay", "eel", "gnu", "koi"};

constexpr int kMaxAddend = 20;

struct Task {
  std::string_view name;
  std::string_view instruction;
};

constexpr std::array<Task, 8> kTasks = {{
    {"copy", "Repeat the words."},
    {"reverse", "Reverse the words."},
    {"uppercase", "Uppercase the words."},
    {"count", "Count the words."},
    {"add", "Add the numbers."},
    {"ends", "Give the first and last word."},
    {"sort", "Sort the words."},
    {"double", "Say each word twice."},
}};

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::uint64_t text_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return mix64(h);
}

// Public inputs form their own hash class, so no input ever appears both in
// device data and in the distillation set.
bool is_public_input(std::string_view input) { return text_hash(input) % 4 == 0; }

std::string sample_input(std::string_view category, Rng& rng) {
  if (category == "add") {
    const auto a = rng.below(kMaxAddend);
    const auto b = rng.below(kMaxAddend);
    return std::to_string(a) + " " + std::to_string(b);
  }
  const std::size_t n = 3 + rng.below(2);
  std::vector<std::string> words;
  for (std::size_t i = 0; i < n; ++i) words.emplace_back(kWords[rng.below(kWords.size())]);
  return join(words);
}

Example make_example(std::string_view category, Split split, Rng& rng) {
  const bool want_public = split == Split::kPublic;
  std::string input;
  do {
    input = sample_input(category, rng);
  } while (is_public_input(input) != want_public);
  Example e;
  e.instruction = task_instruction(category);
  e.input = input;
  e.response = run_task(category, input);
  e.category = std::string(category);
  e.split = split;
  return e;
}

// Edmonds-Karp over a dense capacity matrix; graphs here have a few dozen
// nodes.
long long max_flow(std::vector<std::vector<long long>>& cap, std::size_t s, std::size_t t) {
  const std::size_t n = cap.size();
  long long total = 0;
  while (true) {
    std::vector<std::size_t> parent(n, n);
    parent[s] = s;
    std::deque<std::size_t> queue{s};
    while (!queue.empty() && parent[t] == n) {
      const std::size_t u = queue.front();
      queue.pop_front();
      for (std::size_t v = 0; v < n; ++v) {
        if (parent[v] == n && cap[u][v] > 0) {
          parent[v] = u;
          queue.push_back(v);
        }
      }
    }
    if (parent[t] == n) return total;
    long long push = std::numeric_limits<long long>::max();
    for (std::size_t v = t; v != s; v = parent[v]) push = std::min(push, cap[parent[v]][v]);
    for (std::size_t v = t; v != s; v = parent[v]) {
      cap[parent[v]][v] -= push;
      cap[v][parent[v]] += push;
    }
    total += push;
  }
}

std::vector<std::vector<std::size_t>> train_by_category(const Corpus& corpus) {
  std::vector<std::vector<std::size_t>> by_cat(corpus.categories.size());
  for (std::size_t i : corpus.indices(Split::kTrain)) {
    by_cat[corpus.category_index(corpus.examples[i].category)].push_back(i);
  }
  return by_cat;
}

// Hands out each category's (shuffled) indices to devices in device order.
DevicePartition assign(const Corpus& corpus, std::vector<std::vector<std::size_t>> by_cat,
                       const std::vector<std::vector<std::size_t>>& counts, Rng rng) {
  const std::size_t n_dev = counts.size();
  DevicePartition p;
  p.devices.resize(n_dev);
  p.histogram.assign(n_dev, std::vector<std::size_t>(corpus.categories.size(), 0));
  for (std::size_t c = 0; c < by_cat.size(); ++c) {
    rng.shuffle(by_cat[c]);
    std::size_t next = 0;
    for (std::size_t d = 0; d < n_dev; ++d) {
      for (std::size_t k = 0; k < counts[d][c]; ++k) p.devices[d].push_back(by_cat[c][next++]);
      p.histogram[d][c] = counts[d][c];
    }
    ensure(next == by_cat[c].size(), "partition: category not fully assigned");
  }
  for (auto& dev : p.devices) std::sort(dev.begin(), dev.end());
  return p;
}

}  // namespace

VocabPtr byte_vocab() {
  static const VocabPtr vocab = make_vocab(kByteVocabSize, kPadId, kBosId, kEosId);
  return vocab;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255) throw InputError("detokenize: id " + std::to_string(id) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kPublic: return "public";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view s) {
  for (Split v : {Split::kTrain, Split::kVal, Split::kTest, Split::kPublic}) {
    if (split_name(v) == s) return v;
  }
  return std::nullopt;
}

std::vector<std::size_t> Corpus::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].split == s) out.push_back(i);
  }
  return out;
}

std::size_t Corpus::category_index(std::string_view name) const {
  for (std::size_t i = 0; i < categories.size(); ++i) {
    if (categories[i] == name) return i;
  }
  throw InputError("unknown category " + std::string(name));
}

std::string wrap_prompt(const Example& e) {
  std::string out(kPreamble);
  out += "[Instruction]\n";
  out += e.instruction;
  out += "\n\n";
  if (!e.input.empty()) {
    out += "[Input]\n";
    out += e.input;
    out += "\n\n";
  }
  out += "[Response]\n";
  return out;
}

SequencePair encode_example(const Example& e) {
  SequencePair p;
  p.prompt.push_back(kBosId);
  for (int t : tokenize(wrap_prompt(e))) p.prompt.push_back(t);
  p.target = tokenize(e.response);
  p.target.push_back(kEosId);
  return p;
}

std::vector<SequencePair> pack_documents(std::span<const std::string> texts,
                                         std::size_t context_len) {
  require(context_len >= 2, "pack_documents: context too short");
  std::vector<SequencePair> out;
  SequencePair cur;
  for (const std::string& t : texts) {
    std::vector<int> ids = tokenize(t);
    ids.push_back(kEosId);
    if (ids.size() + 1 > context_len) continue;
    if (!cur.target.empty() && 1 + cur.target.size() + ids.size() > context_len) {
      out.push_back(std::move(cur));
      cur = {};
    }
    if (cur.target.empty()) cur.prompt = {kBosId};
    cur.target.insert(cur.target.end(), ids.begin(), ids.end());
  }
  if (!cur.target.empty()) out.push_back(std::move(cur));
  return out;
}

bool fits_context(const Example& e, int context_len) {
  // 1 begin token + prompt + response + end token, minus the unfed last token.
  const std::size_t need = 1 + wrap_prompt(e).size() + e.response.size();
  return need <= static_cast<std::size_t>(context_len);
}

const std::vector<std::string>& task_categories() {
  static const std::vector<std::string> cats = [] {
    std::vector<std::string> out;
    for (const Task& t : kTasks) out.emplace_back(t.name);
    return out;
  }();
  return cats;
}

std::string task_instruction(std::string_view category) {
  for (const Task& t : kTasks) {
    if (t.name == category) return std::string(t.instruction);
  }
  throw InputError("unknown task category " + std::string(category));
}

std::string run_task(std::string_view category, std::string_view input) {
  auto words = split_words(input);
  if (category == "copy") return join(words);
  if (category == "reverse") {
    std::reverse(words.begin(), words.end());
    return join(words);
  }
  if (category == "uppercase") {
    std::string s = join(words);
    for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
  }
  if (category == "count") return "there are " + std::to_string(words.size()) + " words";
  if (category == "add") {
    require(words.size() == 2, "add task needs two numbers");
    const long a = std::stol(words[0]);
    const long b = std::stol(words[1]);
    return words[0] + " plus " + words[1] + " is " + std::to_string(a + b);
  }
  if (category == "ends") {
    require(!words.empty(), "ends task needs words");
    return words.front() + " and " + words.back();
  }
  if (category == "sort") {
    std::sort(words.begin(), words.end());
    return join(words);
  }
  if (category == "double") {
    std::vector<std::string> out;
    for (const auto& w : words) {
      out.push_back(w);
      out.push_back(w);
    }
    return join(out);
  }
  throw InputError("unknown task category " + std::string(category));
}

Corpus generate_corpus(std::uint64_t seed, const CorpusOptions& options) {
  require(options.categories >= 1 && options.categories <= static_cast<int>(kTasks.size()),
          "corpus: categories must be in [1, " + std::to_string(kTasks.size()) + "]");
  const CorpusSizes& sz = options.sizes;
  require(sz.train > 0 && sz.val > 0 && sz.test > 0 && sz.public_kd > 0,
          "corpus: split sizes must be positive");
  Corpus corpus;
  corpus.categories.assign(task_categories().begin(),
                           task_categories().begin() + options.categories);
  const std::pair<Split, std::size_t> plan[] = {
      {Split::kTrain, sz.train}, {Split::kVal, sz.val},
      {Split::kTest, sz.test}, {Split::kPublic, sz.public_kd}};
  for (const auto& [split, count] : plan) {
    Rng rng = Rng::stream(seed, "corpus", static_cast<std::uint64_t>(split));
    for (std::size_t i = 0; i < count; ++i) {
      const std::string& cat = corpus.categories[i % corpus.categories.size()];
      Example e = make_example(cat, split, rng);
      if (fits_context(e, options.context_len)) corpus.examples.push_back(std::move(e));
    }
  }
  return corpus;
}

std::vector<std::string> generate_pretraining_text(std::uint64_t seed, std::size_t count,
                                                   int categories) {
  require(categories >= 1 && categories <= static_cast<int>(kTasks.size()),
          "pretraining: bad category count");
  Rng rng = Rng::stream(seed, "pretrain-text");
  std::vector<std::string> docs;
  docs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string_view cat = kTasks[rng.below(static_cast<std::size_t>(categories))].name;
    const std::string input = sample_input(cat, rng);
    docs.push_back("Q: " + task_instruction(cat) + " " + input + "\nA: " + run_task(cat, input));
  }
  return docs;
}

SequencePair encode_document(std::string_view text) {
  require(!text.empty(), "empty document");
  SequencePair p;
  p.prompt = {kBosId};
  p.target = tokenize(text);
  p.target.push_back(kEosId);
  return p;
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const Example& e : corpus.examples) {
    nlohmann::ordered_json j;
    j["instruction"] = e.instruction;
    j["input"] = e.input;
    j["response"] = e.response;
    j["category"] = e.category;
    j["split"] = std::string(split_name(e.split));
    out << j.dump() << '\n';
  }
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  write_corpus(out, corpus);
}

Corpus read_corpus(std::istream& in, const std::vector<std::string>& categories,
                   int context_len) {
  Corpus corpus;
  corpus.categories = categories;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "corpus line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(where + ex.what());
    }
    if (!j.is_object()) throw FormatError(where + "not an object");
    auto field = [&](const char* key, bool required) -> std::string {
      auto it = j.find(key);
      if (it == j.end()) {
        if (required) throw FormatError(where + "missing field " + key);
        return {};
      }
      if (!it->is_string()) throw FormatError(where + "field " + key + " is not a string");
      return it->get<std::string>();
    };
    Example e;
    e.instruction = field("instruction", true);
    e.input = field("input", false);
    e.response = field("response", true);
    e.category = field("category", true);
    const std::string split = field("split", false);
    if (e.instruction.empty() || e.response.empty()) {
      throw FormatError(where + "instruction and response must be non-empty");
    }
    if (split.empty()) {
      e.split = Split::kTrain;
    } else if (auto s = parse_split(split)) {
      e.split = *s;
    } else {
      throw FormatError(where + "unknown split " + split);
    }
    const bool known = std::find(corpus.categories.begin(), corpus.categories.end(),
                                 e.category) != corpus.categories.end();
    if (!known) {
      if (!categories.empty()) throw FormatError(where + "unknown category " + e.category);
      corpus.categories.push_back(e.category);
    }
    if (context_len > 0 && !fits_context(e, context_len)) continue;
    corpus.examples.push_back(std::move(e));
  }
  return corpus;
}

Corpus read_corpus(const std::filesystem::path& path, const std::vector<std::string>& categories,
                   int context_len) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus " + path.string());
  return read_corpus(in, categories, context_len);
}

DevicePartition partition_pathological(const Corpus& corpus, int num_devices,
                                       std::uint64_t seed) {
  require(num_devices >= 1, "partition: num_devices must be >= 1");
  const std::size_t n_dev = static_cast<std::size_t>(num_devices);
  const std::size_t n_cat = corpus.categories.size();
  require(n_cat >= 2, "pathological partition needs at least two categories");
  auto by_cat = train_by_category(corpus);
  std::size_t total = 0;
  for (const auto& c : by_cat) total += c.size();

  std::vector<std::size_t> perm(n_cat);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng::stream(seed, "pathological-perm").shuffle(perm);

  std::vector<std::array<std::size_t, 2>> pair(n_dev);
  std::vector<long long> want(n_dev);
  for (std::size_t d = 0; d < n_dev; ++d) {
    if (d < n_cat || n_cat == 2) {
      pair[d] = {perm[d % n_cat], perm[(d + 1) % n_cat]};
    } else {
      // past one lap of the cycle, add chords so no category carries an
      // outsized share of devices
      const std::size_t k = d - n_cat;
      const std::size_t a = (2 * k + (2 * k) / n_cat) % n_cat;
      const std::size_t b = (a + std::max<std::size_t>(2, n_cat / 2)) % n_cat;
      pair[d] = {perm[a], perm[b]};
    }
    want[d] = static_cast<long long>(total / n_dev + (d < total % n_dev ? 1 : 0));
  }

  // Pre-assign a floor to both categories of every device, then route the
  // rest through a flow network: source -> device -> category -> sink.
  auto solve = [&](long long floor_div) -> std::optional<std::vector<std::vector<std::size_t>>> {
    std::vector<std::vector<std::size_t>> counts(n_dev, std::vector<std::size_t>(n_cat, 0));
    std::vector<long long> left(n_cat);
    for (std::size_t c = 0; c < n_cat; ++c) left[c] = static_cast<long long>(by_cat[c].size());
    std::vector<long long> lb(n_dev);
    for (std::size_t d = 0; d < n_dev; ++d) {
      lb[d] = floor_div > 0 ? std::max<long long>(1, want[d] / floor_div) : 1;
      if (2 * lb[d] > want[d]) return std::nullopt;
      for (std::size_t c : pair[d]) left[c] -= lb[d];
    }
    for (long long v : left) {
      if (v < 0) return std::nullopt;
    }
    const std::size_t src = 0, sink = 1 + n_dev + n_cat;
    std::vector<std::vector<long long>> cap(sink + 1, std::vector<long long>(sink + 1, 0));
    long long need = 0;
    for (std::size_t d = 0; d < n_dev; ++d) {
      cap[src][1 + d] = want[d] - 2 * lb[d];
      need += cap[src][1 + d];
      for (std::size_t c : pair[d]) cap[1 + d][1 + n_dev + c] = want[d];
    }
    for (std::size_t c = 0; c < n_cat; ++c) cap[1 + n_dev + c][sink] = left[c];
    const auto residual = cap;
    if (max_flow(cap, src, sink) != need) return std::nullopt;
    for (std::size_t d = 0; d < n_dev; ++d) {
      for (std::size_t c : pair[d]) {
        const long long used = residual[1 + d][1 + n_dev + c] - cap[1 + d][1 + n_dev + c];
        counts[d][c] = static_cast<std::size_t>(lb[d] + used);
      }
    }
    return counts;
  };

  auto counts = solve(4);
  if (!counts) counts = solve(0);
  if (!counts) {
    throw InputError("pathological partition infeasible: " + std::to_string(num_devices) +
                     " devices over " + std::to_string(n_cat) + " categories");
  }
  return assign(corpus, std::move(by_cat), *counts, Rng::stream(seed, "pathological-assign"));
}

DevicePartition partition_dirichlet(const Corpus& corpus, int num_devices, double concentration,
                                    std::uint64_t seed) {
  require(num_devices >= 1, "partition: num_devices must be >= 1");
  require(concentration > 0.0, "dirichlet concentration must be > 0");
  const std::size_t n_dev = static_cast<std::size_t>(num_devices);
  auto by_cat = train_by_category(corpus);
  std::vector<std::vector<std::size_t>> counts(n_dev,
                                               std::vector<std::size_t>(by_cat.size(), 0));
  for (std::size_t c = 0; c < by_cat.size(); ++c) {
    Rng rng = Rng::stream(seed, "dirichlet", c);
    std::vector<double> g(n_dev);
    double sum = 0.0;
    for (double& v : g) {
      v = rng.gamma(concentration);
      sum += v;
    }
    if (!(sum > 0.0)) {
      // Every draw underflowed; all mass on one seeded device.
      std::fill(g.begin(), g.end(), 0.0);
      g[rng.below(n_dev)] = 1.0;
      sum = 1.0;
    }
    const double m = static_cast<double>(by_cat[c].size());
    std::vector<double> frac(n_dev);
    std::size_t given = 0;
    for (std::size_t d = 0; d < n_dev; ++d) {
      const double exact = g[d] / sum * m;
      counts[d][c] = static_cast<std::size_t>(exact);
      frac[d] = exact - static_cast<double>(counts[d][c]);
      given += counts[d][c];
    }
    std::vector<std::size_t> order(n_dev);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; given < by_cat[c].size(); ++k, ++given) {
      ++counts[order[k % n_dev]][c];
    }
  }
  return assign(corpus, std::move(by_cat), counts, Rng::stream(seed, "dirichlet-assign"));
}

std::vector<SequencePair> encode_indices(const Corpus& corpus, std::span<const std::size_t> idx) {
  std::vector<SequencePair> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    ensure(i < corpus.examples.size(), "example index out of range");
    out.push_back(encode_example(corpus.examples[i]));
  }
  return out;
}

}  // namespace fedpt
