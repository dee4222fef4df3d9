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

#include "fedpt_cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "fedpt/checkpoint.hpp"
#include "fedpt/errors.hpp"
#include "fedpt/parallel.hpp"
#include "fedpt/proxy.hpp"
#include "fedpt/rng.hpp"

#ifndef FEDPT_VERSION
#define FEDPT_VERSION "0.0.0"
#endif

namespace fedpt::cli {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr const char* kSmallFile = "small.ckpt";
constexpr const char* kLargeFile = "large.ckpt";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex(const std::string& s, const char* field) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw FormatError(std::string("manifest: bad ") + field);
  }
  return std::stoull(s, nullptr, 16);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void say(std::ostream* log, const std::string& line) {
  if (log) *log << line << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string round_tag(int round) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "r%02d", round);
  return buf;
}

// Decoded ids as text; specials show up as <pad>, <bos>, <eos>.
std::string render(std::span<const int> ids) {
  std::string s;
  for (int id : ids) {
    if (id >= 0 && id < 256) {
      s.push_back(static_cast<char>(id));
    } else if (id == kPadId) {
      s += "<pad>";
    } else if (id == kBosId) {
      s += "<bos>";
    } else {
      s += "<eos>";
    }
  }
  return s;
}

// -- pretraining --------------------------------------------------------------

std::vector<std::vector<std::size_t>> plan_batches(const std::vector<SequencePair>& docs,
                                                   const PretrainConfig& pc, std::uint64_t seed,
                                                   std::size_t* tokens) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::uint64_t epoch = 0;
  std::size_t total = 0;
  while (total < pc.tokens) {
    std::vector<std::size_t> batch;
    while (batch.size() < std::min(pc.batch_size, docs.size())) {
      if (cursor == order.size()) {
        order.resize(docs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng::stream(seed, "pretrain-order", epoch++).shuffle(order);
        cursor = 0;
      }
      const std::size_t d = order[cursor++];
      total += docs[d].prompt.size() + docs[d].target.size();
      batch.push_back(d);
    }
    std::sort(batch.begin(), batch.end());
    batches.push_back(std::move(batch));
  }
  *tokens = total;
  return batches;
}

void clip_norm(std::span<double> g, double max_norm) {
  double sq = 0.0;
  for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double k = max_norm / norm;
  for (double& v : g) v *= k;
}

// Linear warmup over the first 5% of steps, cosine decay afterwards.
double pretrain_lr(int step, int total, double base) {
  const int warm = std::max(1, total / 20);
  if (step < warm) return base * static_cast<double>(step + 1) / warm;
  return cosine_lr(step - warm, total - warm, base);
}

ModelParams pretrain_model(const ModelConfig& mc, std::uint64_t init_seed,
                           const std::vector<SequencePair>& docs,
                           const std::vector<std::vector<std::size_t>>& plan, double lr,
                           double clip, const std::string& name, std::ostream* log) {
  ModelParams params = ModelParams::init(mc, init_seed);
  AdamOptimizer opt(params.tensors());
  const int steps = static_cast<int>(plan.size());
  const int every = std::max(1, steps / 10);
  double window = 0.0;
  int in_window = 0;
  for (int s = 0; s < steps; ++s) {
    std::vector<SequencePair> batch;
    batch.reserve(plan[static_cast<std::size_t>(s)].size());
    for (std::size_t d : plan[static_cast<std::size_t>(s)]) batch.push_back(docs[d]);
    LossAndGrad lg = backward(params, batch);
    clip_norm(lg.grads.flat(), clip);
    opt.step(params.tensors(), lg.grads, pretrain_lr(s, steps, lr));
    window += lg.loss;
    ++in_window;
    if ((s + 1) % every == 0 || s + 1 == steps) {
      say(log, "pretrain " + name + ": step " + std::to_string(s + 1) + "/" +
                   std::to_string(steps) + " loss " + fmt_double(window / in_window));
      window = 0.0;
      in_window = 0;
    }
  }
  if (!params.all_finite()) throw CheckFailed("pretrain " + name + ": weights diverged");
  return params;
}

std::uint64_t init_seed(std::uint64_t root, std::size_t which) {
  return Rng::stream(root, "base-init", which).next_u64();
}

// -- manifest -----------------------------------------------------------------

ordered_json manifest_object(const RunManifest& m) {
  ordered_json j;
  j["schema"] = RunManifest::kSchemaVersion;
  j["version"] = m.version;
  j["mode"] = std::string(mode_name(m.config.mode));
  j["seeds"] = {{"root", m.config.seed}, {"eval", m.config.eval.seeds}};
  j["config"] = ordered_json::parse(config_json(m.config));
  ordered_json ck = ordered_json::object();
  if (!m.small_checkpoint.empty()) {
    ck["small"] = {{"path", m.small_checkpoint.string()}, {"digest", hex64(m.small_digest)}};
  }
  if (!m.large_checkpoint.empty()) {
    ck["large"] = {{"path", m.large_checkpoint.string()}, {"digest", hex64(m.large_digest)}};
  }
  j["checkpoints"] = ck;
  j["log"] = m.log.string();
  ordered_json rounds = ordered_json::array();
  for (const auto& [r, a] : m.rounds) {
    rounds.push_back(
        {{"round", r}, {"aggregated", a.aggregated.string()}, {"adapter", a.adapter.string()}});
  }
  j["rounds"] = rounds;
  return j;
}

struct LoadedBases {
  std::shared_ptr<const ModelParams> small;
  std::shared_ptr<const ModelParams> large;
};

std::shared_ptr<const ModelParams> load_base(const fs::path& path, const ModelConfig& expect,
                                             const char* which) {
  Checkpoint ck = load_checkpoint(path, byte_vocab());
  if (!ck.params.config().same_shape(expect)) {
    throw ConfigError(std::string(which) + " checkpoint " + path.string() +
                      " does not match the configured model shape");
  }
  return std::make_shared<const ModelParams>(std::move(ck.params));
}

void verify_digest(const fs::path& path, std::uint64_t digest) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  if (file_digest(path) != digest) {
    throw ConfigError("checkpoint " + path.string() + " changed since the manifest was written");
  }
}

LoadedBases load_bases(const RunManifest& m, bool need_small, bool need_large) {
  LoadedBases b;
  if (need_small) {
    if (m.small_checkpoint.empty()) throw ConfigError("manifest has no small checkpoint");
    verify_digest(m.small_checkpoint, m.small_digest);
    b.small = load_base(m.small_checkpoint, m.config.small_config(), "small");
  }
  if (need_large) {
    if (m.large_checkpoint.empty()) throw ConfigError("manifest has no large checkpoint");
    verify_digest(m.large_checkpoint, m.large_digest);
    b.large = load_base(m.large_checkpoint, m.config.large_config(), "large");
  }
  return b;
}

RunManifest execute(RunManifest m, const fs::path& out, std::ostream* log) {
  const ExperimentConfig& cfg = m.config;
  cfg.validate();
  const Mode mode = cfg.mode;
  fs::create_directories(out);
  m.version = code_version();
  m.log = fs::absolute(out / "rounds.jsonl");
  m.rounds.clear();
  const fs::path manifest_path = out / "manifest.json";

  const bool need_small = mode != Mode::kBase;
  const bool need_large = mode != Mode::kFedAvgSmall;
  LoadedBases bases = load_bases(m, need_small, need_large);
  std::ofstream records(m.log, std::ios::trunc);
  if (!records) throw ConfigError("cannot write " + m.log.string());
  write_text(manifest_path, manifest_json(m));
  if (mode == Mode::kBase) {
    say(log, "run base: no training");
    return m;
  }

  const auto t0 = std::chrono::steady_clock::now();
  const Corpus corpus = load_corpus(cfg);
  const DevicePartition part = make_partition(cfg, corpus);

  FederationState state;
  state.config = cfg.fed_config();
  state.small_base = bases.small;
  state.large_base = bases.large;
  for (std::size_t d = 0; d < part.devices.size(); ++d) {
    state.devices.push_back({static_cast<int>(d), encode_indices(corpus, part.devices[d])});
  }
  if (mode == Mode::kFedPT) {
    state.public_set = encode_indices(corpus, corpus.indices(Split::kPublic));
  }
  state.adapter = initial_adapter(state.config, cfg.small_config());
  state.aggregated = state.adapter;

  const std::set<int> save(cfg.eval.rounds.begin(), cfg.eval.rounds.end());
  auto hook = [&](const FederationState& s, RoundRecord& rec) {
    records << to_json_line(rec) << '\n';
    records.flush();
    if (save.contains(rec.round)) {
      RoundArtifacts a;
      a.aggregated = fs::absolute(out / ("aggregated_" + round_tag(rec.round) + ".lora"));
      a.adapter = fs::absolute(out / ("adapter_" + round_tag(rec.round) + ".lora"));
      save_adapter(a.aggregated, s.aggregated);
      save_adapter(a.adapter, s.adapter);
      m.rounds[rec.round] = a;
      write_text(manifest_path, manifest_json(m));
    }
    double loss = 0.0;
    for (const auto& [id, l] : rec.local_loss) loss += l;
    if (!rec.local_loss.empty()) loss /= static_cast<double>(rec.local_loss.size());
    std::ostringstream line;
    line << "run " << mode_name(mode) << ": round " << rec.round << "/" << cfg.fed.rounds
         << " local loss " << std::setprecision(5) << loss;
    if (rec.kd_steps > 0) line << " kd " << rec.kd_first_loss << " -> " << rec.kd_last_loss;
    line << " bytes " << rec.bytes << " (" << std::setprecision(4) << seconds_since(t0) << " s)";
    say(log, line.str());
  };
  run_experiment(state, hook);
  if (!records) throw ConfigError("failed writing " + m.log.string());
  write_text(manifest_path, manifest_json(m));
  return m;
}

int resolve_round(const RunManifest& m, int round) {
  if (m.rounds.empty()) {
    if (round != 0) {
      throw InputError("unknown round " + std::to_string(round) + ": run has no saved rounds");
    }
    return 0;
  }
  if (round == 0) return m.rounds.rbegin()->first;
  if (!m.rounds.contains(round)) {
    std::string known;
    for (const auto& [r, a] : m.rounds) known += (known.empty() ? "" : ", ") + std::to_string(r);
    throw InputError("unknown round " + std::to_string(round) + " (saved: " + known + ")");
  }
  return round;
}

DecodeOptions decode_options(const EvalConfig& e) {
  DecodeOptions d;
  d.max_new_tokens = e.max_new_tokens;
  d.sample = e.sample;
  d.temperature = e.temperature;
  d.top_p = e.top_p;
  return d;
}

std::string alpha_tag(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", a);
  return buf;
}

}  // namespace

std::string code_version() { return std::string("fedpt ") + FEDPT_VERSION; }

fs::path default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? fs::path(env) : fs::path("fedpt-out");
}

std::uint64_t file_digest(const fs::path& path) {
  const auto bytes = read_file(path);
  std::uint64_t h = mix64(bytes.size());
  std::size_t i = 0;
  for (; i + 8 <= bytes.size(); i += 8) {
    std::uint64_t w = 0;
    for (int k = 7; k >= 0; --k) w = (w << 8) | bytes[i + static_cast<std::size_t>(k)];
    h = mix64(h ^ w);
  }
  std::uint64_t tail = 0;
  for (std::size_t k = bytes.size(); k > i; --k) tail = (tail << 8) | bytes[k - 1];
  return mix64(h ^ tail ^ 0x7461696cULL);
}

double heldout_nll(const ModelParams& params, const std::vector<std::string>& docs, int workers) {
  std::vector<double> sums(docs.size());
  std::vector<std::size_t> counts(docs.size());
  parallel_for(docs.size(), workers, [&](std::size_t i) {
    const SequencePair p = encode_document(docs[i]);
    sums[i] = nll_loss(params, p.prompt, p.target) * static_cast<double>(p.target.size());
    counts[i] = p.target.size();
  });
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    s += sums[i];
    n += counts[i];
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

PretrainResult cmd_pretrain(const ExperimentConfig& config, const fs::path& out,
                            std::ostream* log) {
  require(config.pretrain.tokens > 0, "pretrain.tokens: budget must be > 0");
  config.validate();
  const PretrainConfig& pc = config.pretrain;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = out / "pretrain";
  fs::create_directories(dir);

  const auto texts = generate_pretraining_text(config.seed, pc.documents, config.corpus.categories);
  std::vector<SequencePair> docs;
  const ModelConfig sc = config.small_config();
  const ModelConfig lc = config.large_config();
  const auto ctx = static_cast<std::size_t>(config.context_len);
  if (pc.pack) {
    docs = pack_documents(texts, ctx);
  } else {
    for (const auto& t : texts) {
      SequencePair p = encode_document(t);
      if (p.prompt.size() + p.target.size() <= ctx) docs.push_back(std::move(p));
    }
  }
  if (docs.empty()) throw ConfigError("pretrain: no document fits model.context_len");
  const auto heldout = generate_pretraining_text(mix64(config.seed ^ 0x686f6c646f7574ULL),
                                                 pc.heldout_documents, config.corpus.categories);

  std::size_t tokens = 0;
  const auto plan = plan_batches(docs, pc, config.seed, &tokens);
  say(log, "pretrain: " + std::to_string(docs.size()) + " documents, " +
               std::to_string(plan.size()) + " steps, " + std::to_string(tokens) + " tokens");

  std::vector<std::unique_ptr<ModelParams>> models(2);
  parallel_for(2, config.workers, [&](std::size_t i) {
    const ModelConfig& mc = i == 0 ? sc : lc;
    models[i] = std::make_unique<ModelParams>(pretrain_model(
        mc, init_seed(config.seed, i), docs, plan,
        i == 0 ? pc.lr : pc.large_lr, pc.clip, i == 0 ? "small" : "large", log));
  });

  PretrainResult r;
  r.steps = static_cast<int>(plan.size());
  r.small_tokens = r.large_tokens = tokens;
  r.small_heldout_nll = heldout_nll(*models[0], heldout, config.workers);
  r.large_heldout_nll = heldout_nll(*models[1], heldout, config.workers);
  r.small_checkpoint = fs::absolute(dir / kSmallFile);
  r.large_checkpoint = fs::absolute(dir / kLargeFile);
  for (int i = 0; i < 2; ++i) {
    const double nll = i == 0 ? r.small_heldout_nll : r.large_heldout_nll;
    save_checkpoint(i == 0 ? r.small_checkpoint : r.large_checkpoint, *models[i],
                    {{"kind", i == 0 ? "small" : "large"},
                     {"tokens", std::to_string(tokens)},
                     {"steps", std::to_string(r.steps)},
                     {"heldout_nll", fmt_double(nll)}});
  }
  ordered_json summary = {{"version", code_version()},
                          {"seed", config.seed},
                          {"steps", r.steps},
                          {"tokens", tokens},
                          {"small", {{"path", r.small_checkpoint.string()},
                                     {"heldout_nll", r.small_heldout_nll}}},
                          {"large", {{"path", r.large_checkpoint.string()},
                                     {"heldout_nll", r.large_heldout_nll}}}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  say(log, "pretrain: held-out nll small " + fmt_double(r.small_heldout_nll) + ", large " +
               fmt_double(r.large_heldout_nll) + " (" + fmt_double(seconds_since(t0)) + " s)");
  if (!(r.large_heldout_nll < r.small_heldout_nll)) {
    throw CheckFailed("pretrain: large base held-out nll " + fmt_double(r.large_heldout_nll) +
                      " is not below small base " + fmt_double(r.small_heldout_nll));
  }
  return r;
}

std::string manifest_json(const RunManifest& m) { return manifest_object(m).dump(2) + "\n"; }

RunManifest parse_manifest(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  RunManifest m;
  try {
    if (j.at("schema").get<int>() != RunManifest::kSchemaVersion) {
      throw FormatError("manifest: unsupported schema " + j.at("schema").dump());
    }
    m.version = j.at("version").get<std::string>();
    m.config = parse_config(j.at("config").dump());
    const json& ck = j.at("checkpoints");
    if (ck.contains("small")) {
      m.small_checkpoint = ck["small"].at("path").get<std::string>();
      m.small_digest = parse_hex(ck["small"].at("digest").get<std::string>(), "small digest");
    }
    if (ck.contains("large")) {
      m.large_checkpoint = ck["large"].at("path").get<std::string>();
      m.large_digest = parse_hex(ck["large"].at("digest").get<std::string>(), "large digest");
    }
    m.log = j.at("log").get<std::string>();
    for (const json& r : j.at("rounds")) {
      m.rounds[r.at("round").get<int>()] = {r.at("aggregated").get<std::string>(),
                                            r.at("adapter").get<std::string>()};
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

RunManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("manifest not found: " + path.string());
  const auto bytes = read_file(path);
  return parse_manifest(std::string(bytes.begin(), bytes.end()));
}

RunManifest cmd_run(const ExperimentConfig& config, const fs::path& checkpoints,
                    const fs::path& out, std::ostream* log) {
  config.validate();
  RunManifest m;
  m.config = config;
  auto locate = [&](const char* file) {
    const fs::path p = fs::absolute(checkpoints / file);
    if (!fs::exists(p)) {
      throw ConfigError("missing checkpoint " + p.string() + " (run pretrain first)");
    }
    return p;
  };
  if (config.mode != Mode::kBase) {
    m.small_checkpoint = locate(kSmallFile);
    m.small_digest = file_digest(m.small_checkpoint);
  }
  if (config.mode != Mode::kFedAvgSmall) {
    m.large_checkpoint = locate(kLargeFile);
    m.large_digest = file_digest(m.large_checkpoint);
  }
  return execute(std::move(m), out, log);
}

RunManifest cmd_rerun(const RunManifest& manifest, const fs::path& out, std::ostream* log) {
  return execute(manifest, out, log);
}

Corpus load_corpus(const ExperimentConfig& config) {
  if (!config.corpus_file.empty()) {
    return read_corpus(fs::path(config.corpus_file), {}, config.context_len);
  }
  CorpusOptions opts = config.corpus;
  opts.context_len = config.context_len;
  return generate_corpus(config.seed, opts);
}

DevicePartition make_partition(const ExperimentConfig& config, const Corpus& corpus) {
  if (config.partition == "dirichlet") {
    return partition_dirichlet(corpus, config.fed.num_devices, config.concentration, config.seed);
  }
  return partition_pathological(corpus, config.fed.num_devices, config.seed);
}

std::vector<VariantReport> cmd_eval(const RunManifest& manifest, const fs::path& run_dir,
                                    const EvalRequest& request, std::ostream* log) {
  const ExperimentConfig& cfg = manifest.config;
  const Mode mode = cfg.mode;
  const int round = resolve_round(manifest, request.round);
  const auto split = parse_split(request.split);
  if (!split) throw InputError("unknown dataset split " + request.split);
  std::vector<double> alphas = request.alphas.empty() ? cfg.eval.alphas : request.alphas;
  for (double a : alphas) {
    if (!std::isfinite(a) || a < 0.0) throw InputError("alpha must be >= 0");
  }

  const bool want_base = mode == Mode::kBase || request.include_base;
  if (want_base && mode == Mode::kFedAvgSmall) {
    throw ConfigError("fedavg-small runs never load the large base");
  }
  const bool proxy = mode == Mode::kFedPT || mode == Mode::kFedAvgPlusPT;
  LoadedBases bases = load_bases(manifest, mode != Mode::kBase, mode != Mode::kFedAvgSmall);

  const Corpus corpus = load_corpus(cfg);
  std::vector<std::size_t> idx = corpus.indices(*split);
  if (request.limit > 0 && idx.size() > request.limit) idx.resize(request.limit);
  if (idx.empty()) throw InputError("split " + request.split + " is empty");

  EvalOptions opts;
  opts.seeds = cfg.eval.seeds;
  opts.decode = decode_options(cfg.eval);
  opts.dist_orders = cfg.eval.dist_orders;
  opts.workers = request.workers;

  std::vector<VariantReport> out;
  auto score = [&](const LogitSource& src, const std::string& variant, double alpha) {
    const auto t0 = std::chrono::steady_clock::now();
    VariantReport v{variant, alpha, round, evaluate(src, corpus, idx, opts)};
    say(log, "eval " + variant + (alpha > 0.0 ? " alpha " + alpha_tag(alpha) : std::string()) +
                 " round " + std::to_string(round) + ": rouge-l " +
                 fmt_double(100.0 * v.report.rouge_mean) + " (" +
                 fmt_double(seconds_since(t0)) + " s)");
    out.push_back(std::move(v));
  };

  if (want_base) score(ModelSource(bases.large), "base", 0.0);
  if (mode != Mode::kBase) {
    const RoundArtifacts& art = manifest.rounds.at(round);
    LoraAdapter adapter = load_adapter(art.aggregated);
    AdaptedModel tuned{bases.small, adapter};
    tuned.validate();
    if (proxy) {
      for (double a : alphas) {
        score(ProxyEnsemble(bases.large, bases.small, tuned, a), std::string(mode_name(mode)), a);
      }
    } else {
      score(*make_source(tuned), std::string(mode_name(mode)), 0.0);
    }
  }

  const fs::path eval_dir = run_dir / "eval";
  fs::create_directories(eval_dir);
  std::vector<TableRow> rows;
  const fs::path table = run_dir / "table.tsv";
  if (fs::exists(table)) {
    std::ifstream in(table);
    rows = read_table(in);
  }
  for (const VariantReport& v : out) {
    std::string name = v.variant + "_" + round_tag(round) + "_" + request.split;
    if (v.alpha > 0.0) name += "_a" + alpha_tag(v.alpha);
    write_text(eval_dir / (name + ".json"), report_json(v.report, name) + "\n");
    auto r = table_rows(v.report, round, request.split, v.variant, v.alpha);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::ostringstream tsv;
  write_table(tsv, rows);
  write_text(table, tsv.str());
  return out;
}

DecodeResult cmd_decode(const RunManifest& manifest, const DecodeRequest& request) {
  if (request.prompt.empty()) throw InputError("decode: empty prompt");
  const ExperimentConfig& cfg = manifest.config;
  const Mode mode = cfg.mode;
  const int round = resolve_round(manifest, request.round);
  const double alpha = request.alpha.value_or(cfg.fed.alpha);
  if (!std::isfinite(alpha) || alpha < 0.0) throw InputError("alpha must be >= 0");

  Example ex;
  ex.instruction = request.prompt;
  ex.input = request.input;
  const std::vector<int> prompt = encode_example(ex).prompt;
  if (prompt.size() + 1 > static_cast<std::size_t>(cfg.context_len)) {
    throw InputError("decode: prompt of " + std::to_string(prompt.size()) +
                     " tokens exceeds the context window of " + std::to_string(cfg.context_len));
  }
  DecodeOptions opts = decode_options(cfg.eval);
  if (request.max_new_tokens > 0) opts.max_new_tokens = request.max_new_tokens;
  auto run = [&](const LogitSource& src) {
    Rng rng = Rng::stream(cfg.seed, "decode");
    return render(generate(src, prompt, opts, &rng));
  };

  LoadedBases bases = load_bases(manifest, mode != Mode::kBase, mode != Mode::kFedAvgSmall);
  DecodeResult r;
  if (mode == Mode::kBase) {
    r.large_base = run(ModelSource(bases.large));
    return r;
  }
  AdaptedModel tuned{bases.small, load_adapter(manifest.rounds.at(round).aggregated)};
  tuned.validate();
  if (mode == Mode::kFedAvgSmall) {
    r.small_tuned = run(*make_source(tuned));
    return r;
  }
  r.proxy = run(ProxyEnsemble(bases.large, bases.small, tuned, alpha));
  if (request.side_by_side) {
    r.large_base = run(ModelSource(bases.large));
    r.small_tuned = run(*make_source(tuned));
  }
  return r;
}

void print_partition(std::ostream& out, const Corpus& corpus, const DevicePartition& partition) {
  std::size_t w = 6;
  for (const auto& c : corpus.categories) w = std::max(w, c.size() + 1);
  out << std::left << std::setw(8) << "device";
  for (const auto& c : corpus.categories) out << std::right << std::setw(static_cast<int>(w)) << c;
  out << std::right << std::setw(8) << "total" << '\n';
  for (std::size_t d = 0; d < partition.num_devices(); ++d) {
    out << std::left << std::setw(8) << d;
    for (std::size_t n : partition.histogram[d]) {
      out << std::right << std::setw(static_cast<int>(w)) << n;
    }
    out << std::right << std::setw(8) << partition.devices[d].size() << '\n';
  }
}

}  // namespace fedpt::cli
