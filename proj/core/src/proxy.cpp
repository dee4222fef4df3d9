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

#include "fedpt/proxy.hpp"

#include <algorithm>
#include <cmath>

#include "fedpt/errors.hpp"

namespace fedpt {

namespace {

class ProxySession final : public DecodeSession {
 public:
  ProxySession(std::unique_ptr<DecodeSession> large, std::unique_ptr<DecodeSession> pre,
               std::unique_ptr<DecodeSession> tuned, double alpha)
      : large_(std::move(large)), pre_(std::move(pre)), tuned_(std::move(tuned)), alpha_(alpha) {}

  Matrix feed(std::span<const int> tokens, bool all_rows) override {
    Matrix gl = large_->feed(tokens, all_rows);
    Matrix gp = pre_->feed(tokens, all_rows);
    Matrix gt = tuned_->feed(tokens, all_rows);
    return combine_logits(gl, gt, gp, alpha_);
  }

  std::size_t length() const override { return large_->length(); }

  std::unique_ptr<DecodeSession> clone() const override {
    return std::make_unique<ProxySession>(large_->clone(), pre_->clone(), tuned_->clone(), alpha_);
  }

 private:
  std::unique_ptr<DecodeSession> large_;
  std::unique_ptr<DecodeSession> pre_;
  std::unique_ptr<DecodeSession> tuned_;
  double alpha_;
};

}  // namespace

ProxyEnsemble::ProxyEnsemble(std::shared_ptr<const ModelParams> large_base,
                             std::shared_ptr<const ModelParams> small_base,
                             AdaptedModel small_tuned, double alpha)
    : large_(std::move(large_base)),
      small_(std::move(small_base)),
      tuned_(std::move(small_tuned)),
      alpha_(alpha) {
  if (!large_ || !small_ || !tuned_.base) throw ConfigError("proxy: missing model");
  if (!(large_->vocab() == small_->vocab()) || !(large_->vocab() == tuned_.base->vocab())) {
    throw ConfigError("proxy: models do not share one vocabulary");
  }
  require(std::isfinite(alpha_) && alpha_ >= 0.0, "proxy: alpha must be finite and >= 0");
  tuned_.validate();
  large_src_ = std::make_shared<const ModelSource>(large_);
  small_src_ = std::make_shared<const ModelSource>(small_);
  tuned_src_ = make_source(tuned_);
}

int ProxyEnsemble::context_len() const {
  return std::min({large_->config().context_len, small_->config().context_len,
                   tuned_.base->config().context_len});
}

std::unique_ptr<DecodeSession> ProxyEnsemble::open() const {
  return std::make_unique<ProxySession>(large_src_->open(), small_src_->open(),
                                        tuned_src_->open(), alpha_);
}

Matrix combine_logits(const Matrix& large, const Matrix& tuned, const Matrix& pre, double alpha) {
  ensure(large.rows == tuned.rows && large.cols == tuned.cols && large.rows == pre.rows &&
             large.cols == pre.cols,
         "combine_logits: shape mismatch");
  Matrix out(large.rows, large.cols);
  for (std::size_t k = 0; k < out.data.size(); ++k) {
    out.data[k] = large.data[k] + alpha * (tuned.data[k] - pre.data[k]);
  }
  return out;
}

Matrix proxy_logits(const ProxyEnsemble& e, std::span<const int> tokens) {
  validate_tokens(e.large_base().config(), tokens);
  validate_tokens(e.small_base().config(), tokens);
  return e.logits(tokens);
}

std::vector<double> proxy_next_distribution(const ProxyEnsemble& e, std::span<const int> tokens) {
  require(!tokens.empty(), "proxy: empty input");
  Matrix g = proxy_logits(e, tokens);
  return softmax(g.row(g.rows - 1));
}

std::vector<Matrix> shared_prefix_logits(const LogitSource& source,
                                         std::span<const std::vector<int>> seqs,
                                         std::span<const std::size_t> from) {
  ensure(seqs.size() == from.size(), "shared_prefix_logits: size mismatch");
  std::vector<Matrix> out;
  if (seqs.empty()) return out;
  // Prefix must leave at least one fed token per sequence and end before
  // the first requested row.
  std::size_t prefix = seqs[0].size();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    require(!seqs[i].empty() && from[i] < seqs[i].size(), "shared_prefix_logits: bad range");
    prefix = std::min(prefix, from[i]);
    std::size_t j = 0;
    while (j < prefix && seqs[i][j] == seqs[0][j]) ++j;
    prefix = j;
  }
  auto base = source.open();
  if (prefix > 0) base->feed(std::span<const int>(seqs[0]).first(prefix), false);
  out.reserve(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    auto session = seqs.size() == 1 ? std::move(base) : base->clone();
    Matrix rows = session->feed(std::span<const int>(seqs[i]).subspan(prefix), true);
    const std::size_t skip = from[i] - prefix;
    Matrix sel(rows.rows - skip, rows.cols);
    std::copy(rows.data.begin() + static_cast<std::ptrdiff_t>(skip * rows.cols), rows.data.end(),
              sel.data.begin());
    out.push_back(std::move(sel));
  }
  return out;
}

}  // namespace fedpt
