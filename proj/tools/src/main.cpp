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

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "fedpt/errors.hpp"
#include "fedpt_cli/commands.hpp"

namespace {

using namespace fedpt;
using namespace fedpt::cli;

// Exit codes by failure category.
enum Exit : int {
  kOk = 0,
  kUsage = 2,
  kInput = 3,
  kConfig = 4,
  kFormat = 5,
  kCheck = 6,
  kInternal = 70,
};

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::string> mode;
  std::optional<double> alpha;
  std::optional<std::uint64_t> seed;
  std::optional<int> rounds;
  std::optional<int> workers;
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.config.empty()) c.workers = default_workers();
  if (g.mode) {
    auto m = parse_mode(*g.mode);
    if (!m) throw ConfigError("mode: unknown mode " + *g.mode);
    c.mode = *m;
  }
  if (g.alpha) {
    c.fed.alpha = *g.alpha;
    c.eval.alphas = {*g.alpha};
  }
  if (g.seed) c.seed = *g.seed;
  if (g.rounds) {
    c.fed.rounds = *g.rounds;
    std::erase_if(c.eval.rounds, [&](int r) { return r > *g.rounds; });
    if (c.eval.rounds.empty()) c.eval.rounds = {*g.rounds};
  }
  if (g.workers) c.workers = *g.workers;
  c.validate();
  return c;
}

fs::path out_dir(const Globals& g) { return g.out.empty() ? default_out_dir() : fs::path(g.out); }

fs::path run_dir_for(const Globals& g, const std::string& explicit_dir, Mode mode) {
  if (!explicit_dir.empty()) return explicit_dir;
  return out_dir(g) / std::string(mode_name(mode));
}

int fail(const char* category, const std::string& what, int code) {
  std::cerr << "fedpt: error [" << category << "]: " << what << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated proxy-tuning simulator"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--out", g.out, "Output directory (default $FEDPT_OUT_DIR or ./fedpt-out)");
  app.add_option("--mode", g.mode, "fedpt | fedavg-small | fedavg-plus-pt | base");
  app.add_option("--alpha", g.alpha, "Proxy strength");
  app.add_option("--seed", g.seed, "Root seed");
  app.add_option("--rounds", g.rounds, "Federated rounds");
  app.add_option("--workers", g.workers, "Worker threads (default: available cores)");

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the small and large bases");

  auto* run = app.add_subcommand("run", "Run one federated experiment");
  std::string checkpoints, run_manifest, run_dir;
  run->add_option("--checkpoints", checkpoints, "Directory with small.ckpt and large.ckpt");
  run->add_option("--manifest", run_manifest, "Re-execute the run recorded in a manifest");
  run->add_option("--run-dir", run_dir, "Run output directory (default <out>/<mode>)");

  auto* eval = app.add_subcommand("eval", "Score a run on a dataset split");
  std::string eval_manifest;
  EvalRequest er;
  eval->add_option("--manifest", eval_manifest, "Run manifest (default <out>/<mode>/manifest.json)");
  eval->add_option("--round", er.round, "Saved round to evaluate (default: last)");
  eval->add_option("--split", er.split, "train | val | test | public");
  eval->add_option("--alphas", er.alphas, "Alpha sweep, comma separated")->delimiter(',');
  eval->add_flag("--with-base", er.include_base, "Also score the untuned large base");
  eval->add_option("--limit", er.limit, "Only the first N examples");

  auto* decode = app.add_subcommand("decode", "Generate a response for one prompt");
  std::string decode_manifest;
  DecodeRequest dr;
  decode->add_option("--manifest", decode_manifest, "Run manifest");
  decode->add_option("--prompt", dr.prompt, "Instruction text")->required();
  decode->add_option("--input", dr.input, "Optional input text");
  decode->add_option("--round", dr.round, "Saved round (default: last)");
  decode->add_option("--max-new-tokens", dr.max_new_tokens, "Generation limit");
  decode->add_flag("--side-by-side", dr.side_by_side, "Also show large-base and small-tuned");

  auto* inspect = app.add_subcommand("partition-inspect", "Per-device category histograms");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    auto manifest_for = [&](const std::string& explicit_path) {
      if (!explicit_path.empty()) return load_manifest(explicit_path);
      const ExperimentConfig c = resolve_config(g);
      return load_manifest(out_dir(g) / std::string(mode_name(c.mode)) / "manifest.json");
    };

    if (*pretrain) {
      const ExperimentConfig c = resolve_config(g);
      const PretrainResult r = cmd_pretrain(c, out_dir(g), &std::cerr);
      std::cout << r.small_checkpoint.string() << '\n' << r.large_checkpoint.string() << '\n';
    } else if (*run) {
      RunManifest m;
      if (!run_manifest.empty()) {
        m = load_manifest(run_manifest);
        if (g.workers) m.config.workers = *g.workers;
        m = cmd_rerun(m, run_dir_for(g, run_dir, m.config.mode), &std::cerr);
      } else {
        const ExperimentConfig c = resolve_config(g);
        const fs::path ck = checkpoints.empty() ? out_dir(g) / "pretrain" : fs::path(checkpoints);
        m = cmd_run(c, ck, run_dir_for(g, run_dir, c.mode), &std::cerr);
      }
      std::cout << m.log.parent_path().string() << "/manifest.json\n";
    } else if (*eval) {
      RunManifest m = manifest_for(eval_manifest);
      if (g.alpha && er.alphas.empty()) er.alphas = {*g.alpha};
      er.workers = g.workers.value_or(default_workers());
      const fs::path dir = eval_manifest.empty()
                               ? out_dir(g) / std::string(mode_name(m.config.mode))
                               : fs::path(eval_manifest).parent_path();
      for (const VariantReport& v : cmd_eval(m, dir, er, &std::cerr)) {
        std::cout << v.variant << "\tround " << v.round << "\talpha " << v.alpha << "\trouge_l "
                  << 100.0 * v.report.rouge_mean << " +- " << 100.0 * v.report.rouge_std << '\n';
      }
    } else if (*decode) {
      if (dr.prompt.empty()) return fail("usage", "--prompt must not be empty", kUsage);
      RunManifest m = manifest_for(decode_manifest);
      dr.alpha = g.alpha;
      const DecodeResult r = cmd_decode(m, dr);
      const bool many = static_cast<int>(r.proxy.has_value()) + r.large_base.has_value() +
                            r.small_tuned.has_value() > 1;
      auto show = [&](const char* label, const std::optional<std::string>& text) {
        if (!text) return;
        if (many) std::cout << "[" << label << "]\n";
        std::cout << *text << '\n';
      };
      show("proxy", r.proxy);
      show("large-base", r.large_base);
      show("small-tuned", r.small_tuned);
    } else if (*inspect) {
      const ExperimentConfig c = resolve_config(g);
      const Corpus corpus = load_corpus(c);
      print_partition(std::cout, corpus, make_partition(c, corpus));
    }
  } catch (const InputError& e) {
    return fail("input", e.what(), kInput);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), kConfig);
  } catch (const FormatError& e) {
    return fail("format", e.what(), kFormat);
  } catch (const CheckFailed& e) {
    return fail("check", e.what(), kCheck);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kInternal);
  }
  return kOk;
}
