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

#include "fedpt_cli/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fedpt/errors.hpp"

namespace fedpt::cli {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Walks one JSON object, consuming known keys and rejecting the rest.
class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    const std::string name = field(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError(name + ": expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError(name + ": expected an integer");
        if (std::is_unsigned_v<T> && it->is_number_integer() && it->template get<long long>() < 0 &&
            !it->is_number_unsigned()) {
          throw ConfigError(name + ": must be >= 0");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(name + ": expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError(name + ": expected a string");
      }
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }

  template <typename T>
  void get_list(const char* key, std::vector<T>& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    const std::string name = field(key);
    if (!it->is_array()) throw ConfigError(name + ": expected a list");
    std::vector<T> values;
    for (const auto& v : *it) {
      if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(name + ": expected integers");
        if (std::is_unsigned_v<T> && v.template get<long long>() < 0 && !v.is_number_unsigned()) {
          throw ConfigError(name + ": must be >= 0");
        }
      } else {
        if (!v.is_number()) throw ConfigError(name + ": expected numbers");
      }
      values.push_back(v.template get<T>());
    }
    out = std::move(values);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError("unknown field " + field(it.key().c_str()));
    }
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_shape(Section& parent, const char* key, ModelShape& shape) {
  if (const json* j = parent.child(key)) {
    Section s(*j, parent.field(key));
    s.get("layers", shape.layers);
    s.get("width", shape.width);
    s.get("heads", shape.heads);
    s.finish();
  }
}

void check(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

ordered_json shape_json(const ModelShape& s) {
  return {{"layers", s.layers}, {"width", s.width}, {"heads", s.heads}};
}

}  // namespace

int default_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

ModelConfig ExperimentConfig::small_config() const {
  ModelConfig c;
  c.layers = small.layers;
  c.width = small.width;
  c.heads = small.heads;
  c.context_len = context_len;
  c.vocab = byte_vocab();
  return c;
}

ModelConfig ExperimentConfig::large_config() const {
  ModelConfig c = small_config();
  c.layers = large.layers;
  c.width = large.width;
  c.heads = large.heads;
  return c;
}

FedConfig ExperimentConfig::fed_config() const {
  FedConfig f = fed;
  f.seed = seed;
  f.mode = mode;
  f.rank = rank;
  f.workers = workers;
  return f;
}

void ExperimentConfig::validate() const {
  check(workers >= 1, "workers", "must be >= 1");
  for (const auto& [name, s] : {std::pair{"model.small", small}, std::pair{"model.large", large}}) {
    const std::string n = name;
    check(s.layers >= 1, n + ".layers", "must be >= 1");
    check(s.width >= 1, n + ".width", "must be >= 1");
    check(s.heads >= 1, n + ".heads", "must be >= 1");
    check(s.width % s.heads == 0, n + ".width", "must be divisible by heads");
  }
  check(context_len >= 8, "model.context_len", "must be >= 8");
  check(rank >= 1 && rank < small.width, "model.rank", "must be in [1, model.small.width)");
  check(corpus.sizes.train >= 1, "data.train", "must be >= 1");
  check(corpus.sizes.val >= 1, "data.val", "must be >= 1");
  check(corpus.sizes.test >= 1, "data.test", "must be >= 1");
  check(corpus.sizes.public_kd >= 1, "data.public", "must be >= 1");
  check(corpus.categories >= 1 && corpus.categories <= static_cast<int>(task_categories().size()),
        "data.categories", "must be in [1, " + std::to_string(task_categories().size()) + "]");
  check(partition == "pathological" || partition == "dirichlet", "data.partition",
        "must be pathological or dirichlet");
  check(std::isfinite(concentration) && concentration > 0.0, "data.concentration", "must be > 0");
  check(pretrain.tokens >= 1, "pretrain.tokens", "must be >= 1");
  check(pretrain.batch_size >= 1, "pretrain.batch_size", "must be >= 1");
  check(std::isfinite(pretrain.lr) && pretrain.lr > 0.0, "pretrain.lr", "must be > 0");
  check(std::isfinite(pretrain.large_lr) && pretrain.large_lr > 0.0, "pretrain.large_lr",
        "must be > 0");
  check(std::isfinite(pretrain.clip) && pretrain.clip > 0.0, "pretrain.clip", "must be > 0");
  check(pretrain.documents >= 1, "pretrain.documents", "must be >= 1");
  check(pretrain.heldout_documents >= 1, "pretrain.heldout_documents", "must be >= 1");
  const FedConfig& f = fed;
  check(f.num_devices >= 1, "federation.num_devices", "must be >= 1");
  check(f.devices_per_round >= 1 && f.devices_per_round <= f.num_devices,
        "federation.devices_per_round", "must be in [1, num_devices]");
  check(f.local_epochs >= 1, "federation.local_epochs", "must be >= 1");
  check(f.rounds >= 1, "federation.rounds", "must be >= 1");
  check(f.batch_size >= 1, "federation.batch_size", "must be >= 1");
  check(std::isfinite(f.base_lr) && f.base_lr >= 0.0, "federation.lr", "must be >= 0");
  check(std::isfinite(f.alpha) && f.alpha >= 0.0, "federation.alpha", "must be >= 0");
  check(f.drop_prob >= 0.0 && f.drop_prob < 1.0, "federation.drop_prob", "must be in [0, 1)");
  check(f.kd.lambda >= 0.0 && f.kd.lambda <= 1.0, "distill.lambda", "must be in [0, 1]");
  check(f.kd.data_size >= 1, "distill.data_size", "must be >= 1");
  check(f.kd.batch_size >= 1, "distill.batch_size", "must be >= 1");
  check(f.kd.iterations >= 0, "distill.iterations", "must be >= 0");
  check(std::isfinite(f.kd.lr) && f.kd.lr >= 0.0, "distill.lr", "must be >= 0");
  check(f.kd.data_size <= corpus.sizes.public_kd || !corpus_file.empty(), "distill.data_size",
        "exceeds data.public");
  check(!eval.seeds.empty(), "eval.seeds", "must not be empty");
  check(!eval.alphas.empty(), "eval.alphas", "must not be empty");
  for (double a : eval.alphas) check(std::isfinite(a) && a >= 0.0, "eval.alphas", "must be >= 0");
  for (int r : eval.rounds) check(r >= 1 && r <= f.rounds, "eval.rounds", "must be in [1, rounds]");
  check(eval.max_new_tokens >= 1, "eval.max_new_tokens", "must be >= 1");
  check(eval.temperature > 0.0, "eval.temperature", "must be > 0");
  check(eval.top_p > 0.0 && eval.top_p <= 1.0, "eval.top_p", "must be in (0, 1]");
  check(parse_split(eval.split).has_value(), "eval.split", "must be train, val, test or public");
  for (int n : eval.dist_orders) check(n >= 1, "eval.dist_orders", "must be >= 1");
}

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section top(root, "");
  top.get("seed", c.seed);
  std::string mode(mode_name(c.mode));
  top.get("mode", mode);
  if (auto m = parse_mode(mode)) {
    c.mode = *m;
  } else {
    throw ConfigError("mode: unknown mode " + mode);
  }
  top.get("workers", c.workers);

  if (const json* j = top.child("model")) {
    Section s(*j, "model");
    read_shape(s, "small", c.small);
    read_shape(s, "large", c.large);
    s.get("context_len", c.context_len);
    s.get("rank", c.rank);
    s.finish();
  }
  c.corpus.context_len = c.context_len;
  if (const json* j = top.child("data")) {
    Section s(*j, "data");
    s.get("train", c.corpus.sizes.train);
    s.get("val", c.corpus.sizes.val);
    s.get("test", c.corpus.sizes.test);
    s.get("public", c.corpus.sizes.public_kd);
    s.get("categories", c.corpus.categories);
    s.get("partition", c.partition);
    s.get("concentration", c.concentration);
    s.get("corpus_file", c.corpus_file);
    s.finish();
  }
  if (const json* j = top.child("pretrain")) {
    Section s(*j, "pretrain");
    s.get("tokens", c.pretrain.tokens);
    s.get("batch_size", c.pretrain.batch_size);
    s.get("lr", c.pretrain.lr);
    s.get("large_lr", c.pretrain.large_lr);
    s.get("clip", c.pretrain.clip);
    s.get("documents", c.pretrain.documents);
    s.get("heldout_documents", c.pretrain.heldout_documents);
    s.get("pack", c.pretrain.pack);
    s.finish();
  }
  if (const json* j = top.child("federation")) {
    Section s(*j, "federation");
    s.get("num_devices", c.fed.num_devices);
    s.get("devices_per_round", c.fed.devices_per_round);
    s.get("local_epochs", c.fed.local_epochs);
    s.get("rounds", c.fed.rounds);
    s.get("batch_size", c.fed.batch_size);
    s.get("lr", c.fed.base_lr);
    s.get("alpha", c.fed.alpha);
    s.get("drop_prob", c.fed.drop_prob);
    std::string opt = c.fed.optimizer == OptimizerKind::kAdam ? "adam" : "sgd";
    s.get("optimizer", opt);
    if (opt == "adam") {
      c.fed.optimizer = OptimizerKind::kAdam;
    } else if (opt == "sgd") {
      c.fed.optimizer = OptimizerKind::kSgd;
    } else {
      throw ConfigError("federation.optimizer: must be adam or sgd");
    }
    c.fed.kd.optimizer = c.fed.optimizer;
    s.finish();
  }
  if (const json* j = top.child("distill")) {
    Section s(*j, "distill");
    s.get("lambda", c.fed.kd.lambda);
    s.get("data_size", c.fed.kd.data_size);
    s.get("batch_size", c.fed.kd.batch_size);
    s.get("iterations", c.fed.kd.iterations);
    s.get("lr", c.fed.kd.lr);
    s.finish();
  }
  if (const json* j = top.child("eval")) {
    Section s(*j, "eval");
    s.get_list("seeds", c.eval.seeds);
    s.get_list("rounds", c.eval.rounds);
    s.get_list("alphas", c.eval.alphas);
    s.get("max_new_tokens", c.eval.max_new_tokens);
    s.get("sample", c.eval.sample);
    s.get("temperature", c.eval.temperature);
    s.get("top_p", c.eval.top_p);
    s.get("split", c.eval.split);
    s.get_list("dist_orders", c.eval.dist_orders);
    s.finish();
  }
  top.finish();
  // Rounds beyond the configured horizon are dropped from the default set.
  std::erase_if(c.eval.rounds, [&](int r) { return r > c.fed.rounds && !root.contains("eval"); });
  if (c.eval.rounds.empty()) c.eval.rounds = {c.fed.rounds};
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_json(const ExperimentConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["mode"] = std::string(mode_name(c.mode));
  j["workers"] = c.workers;
  j["model"] = {{"small", shape_json(c.small)},
                {"large", shape_json(c.large)},
                {"context_len", c.context_len},
                {"rank", c.rank}};
  j["data"] = {{"train", c.corpus.sizes.train},
               {"val", c.corpus.sizes.val},
               {"test", c.corpus.sizes.test},
               {"public", c.corpus.sizes.public_kd},
               {"categories", c.corpus.categories},
               {"partition", c.partition},
               {"concentration", c.concentration},
               {"corpus_file", c.corpus_file}};
  j["pretrain"] = {{"tokens", c.pretrain.tokens},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"large_lr", c.pretrain.large_lr},
                   {"clip", c.pretrain.clip},
                   {"documents", c.pretrain.documents},
                   {"heldout_documents", c.pretrain.heldout_documents},
                   {"pack", c.pretrain.pack}};
  j["federation"] = {{"num_devices", c.fed.num_devices},
                     {"devices_per_round", c.fed.devices_per_round},
                     {"local_epochs", c.fed.local_epochs},
                     {"rounds", c.fed.rounds},
                     {"batch_size", c.fed.batch_size},
                     {"lr", c.fed.base_lr},
                     {"alpha", c.fed.alpha},
                     {"drop_prob", c.fed.drop_prob},
                     {"optimizer", c.fed.optimizer == OptimizerKind::kAdam ? "adam" : "sgd"}};
  j["distill"] = {{"lambda", c.fed.kd.lambda},
                  {"data_size", c.fed.kd.data_size},
                  {"batch_size", c.fed.kd.batch_size},
                  {"iterations", c.fed.kd.iterations},
                  {"lr", c.fed.kd.lr}};
  j["eval"] = {{"seeds", c.eval.seeds},
               {"rounds", c.eval.rounds},
               {"alphas", c.eval.alphas},
               {"max_new_tokens", c.eval.max_new_tokens},
               {"sample", c.eval.sample},
               {"temperature", c.eval.temperature},
               {"top_p", c.eval.top_p},
               {"split", c.eval.split},
               {"dist_orders", c.eval.dist_orders}};
  return j.dump(2);
}

}  // namespace fedpt::cli
