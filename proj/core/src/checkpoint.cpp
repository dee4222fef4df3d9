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

#include "fedpt/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "fedpt/errors.hpp"

namespace fedpt {

namespace {

constexpr const char* kMagicLine = "fedpt-checkpoint";

long long parse_int(const std::string& key, const std::string& value) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw FormatError("checkpoint: bad integer for " + key + ": " + value);
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw FormatError("checkpoint: bad integer for " + key + ": " + value);
  }
  return out;
}

bool has_space(const std::string& s) {
  return s.empty() || s.find_first_of(" \t\r\n") != std::string::npos;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params,
                                            const std::map<std::string, std::string>& meta) {
  const ModelConfig& c = params.config();
  std::ostringstream h;
  h << kMagicLine << ' ' << kCheckpointVersion << '\n'
    << "layers " << c.layers << '\n'
    << "width " << c.width << '\n'
    << "heads " << c.heads << '\n'
    << "context_len " << c.context_len << '\n'
    << "ff_mult " << c.ff_mult << '\n'
    << "vocab_size " << c.vocab->size << '\n'
    << "pad " << c.vocab->pad << '\n'
    << "bos " << c.vocab->bos << '\n'
    << "eos " << c.vocab->eos << '\n'
    << "seed " << params.seed() << '\n';
  for (const auto& [k, v] : meta) {
    require(!has_space(k) && !has_space(v), "checkpoint metadata must be non-empty tokens");
    require(k != "tensor" && k != "end", "reserved checkpoint key: " + k);
    h << k << ' ' << v << '\n';
  }
  for (const TensorSpec& s : params.tensors().specs()) {
    h << "tensor " << s.name << ' ' << s.rows << ' ' << s.cols << '\n';
  }
  h << "end\n";
  const std::string header = h.str();
  std::vector<std::uint8_t> out(header.begin(), header.end());
  bin::put_f64s(out, params.tensors().flat());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, VocabPtr vocab) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    std::string line;
    while (true) {
      if (pos >= bytes.size()) throw FormatError("checkpoint: truncated header");
      const char ch = static_cast<char>(bytes[pos++]);
      if (ch == '\n') return line;
      line.push_back(ch);
      if (line.size() > 4096) throw FormatError("checkpoint: header line too long");
    }
  };
  auto split = [](const std::string& line) {
    std::istringstream in(line);
    std::vector<std::string> parts;
    for (std::string p; in >> p;) parts.push_back(p);
    return parts;
  };

  const auto first = split(next_line());
  if (first.size() != 2 || first[0] != kMagicLine) throw FormatError("checkpoint: bad magic");
  if (parse_int("version", first[1]) != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + first[1]);
  }

  std::map<std::string, std::string> kv;
  std::vector<TensorSpec> tensors;
  while (true) {
    const auto parts = split(next_line());
    if (parts.size() == 1 && parts[0] == "end") break;
    if (!parts.empty() && parts[0] == "tensor") {
      if (parts.size() != 4) throw FormatError("checkpoint: malformed tensor line");
      tensors.push_back({parts[1], parse_u64("rows", parts[2]), parse_u64("cols", parts[3]), 0});
      continue;
    }
    if (parts.size() != 2) throw FormatError("checkpoint: malformed header line");
    if (!kv.emplace(parts[0], parts[1]).second) {
      throw FormatError("checkpoint: duplicate key " + parts[0]);
    }
  }

  auto take = [&](const char* key, long long max = 1LL << 16) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("checkpoint: missing key ") + key);
    const long long v = parse_int(key, it->second);
    kv.erase(it);
    if (v < 0 || v > max) throw FormatError(std::string("checkpoint: bad ") + key);
    return static_cast<int>(v);
  };
  ModelConfig config;
  config.layers = take("layers");
  config.width = take("width");
  config.heads = take("heads");
  config.context_len = take("context_len");
  config.ff_mult = take("ff_mult");
  const int vsize = take("vocab_size", 1LL << 24);
  const int pad = take("pad");
  const int bos = take("bos");
  const int eos = take("eos");
  auto seed_it = kv.find("seed");
  if (seed_it == kv.end()) throw FormatError("checkpoint: missing key seed");
  const std::uint64_t seed = parse_u64("seed", seed_it->second);
  kv.erase(seed_it);

  if (vocab) {
    if (vocab->size != vsize || vocab->pad != pad || vocab->bos != bos || vocab->eos != eos) {
      throw ConfigError("checkpoint vocabulary differs from the shared vocabulary");
    }
    config.vocab = std::move(vocab);
  } else {
    try {
      config.vocab = make_vocab(vsize, pad, bos, eos);
    } catch (const InputError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }
  try {
    config.validate();
  } catch (const InputError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  // Checked before allocating so a corrupt header cannot request huge buffers.
  if (bytes.size() - pos != 8 * config.param_count()) {
    throw FormatError("checkpoint: payload size mismatch");
  }
  Checkpoint ck{ModelParams::zeros(config), std::move(kv)};
  TensorMap& tm = ck.params.tensors();
  if (tensors.size() != tm.count()) throw FormatError("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const TensorSpec& s = tm.spec(i);
    if (tensors[i].name != s.name || tensors[i].rows != s.rows || tensors[i].cols != s.cols) {
      throw FormatError("checkpoint: unexpected tensor " + tensors[i].name);
    }
  }
  bin::Reader in(bytes.subspan(pos));
  in.f64s(tm.flat());
  ck.params.set_seed(seed);
  return ck;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return out;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::map<std::string, std::string>& meta) {
  write_file(path, encode_checkpoint(params, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, VocabPtr vocab) {
  if (!std::filesystem::exists(path)) throw ConfigError("missing checkpoint " + path.string());
  const auto bytes = read_file(path);
  return decode_checkpoint(bytes, std::move(vocab));
}

void save_adapter(const std::filesystem::path& path, const LoraAdapter& adapter) {
  write_file(path, serialize(adapter));
}

LoraAdapter load_adapter(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("missing adapter " + path.string());
  return deserialize(read_file(path));
}

}  // namespace fedpt
