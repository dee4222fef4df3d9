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

#include <algorithm>
#include <cmath>
#include <string>

#include "fedpt/engine.hpp"
#include "fedpt/errors.hpp"
#include "kernels.hpp"

namespace fedpt::engine {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

void layer_norm(const double* x, std::size_t n, std::size_t d, const double* g,
                const double* b, double* y, double* mu, double* rs) {
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x + r * d;
    double* yr = y + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * rstd * g[j] + b[j];
    if (mu) mu[r] = mean;
    if (rs) rs[r] = rstd;
  }
}

// dx += LN backward of dy; dg/db accumulate when non-null.
void layer_norm_backward(const double* x, const double* mu, const double* rs,
                         const double* g, const double* dy, std::size_t n, std::size_t d,
                         double* dx, double* dg, double* db) {
  std::vector<double> xhat(d), dxhat(d);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x + r * d;
    const double* dyr = dy + r * d;
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mu[r]) * rs[r];
      dxhat[j] = dyr[j] * g[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat *= inv_d;
    mean_dxhat_xhat *= inv_d;
    double* dxr = dx + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] += rs[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
    if (dg) {
      for (std::size_t j = 0; j < d; ++j) {
        dg[j] += dyr[j] * xhat[j];
        db[j] += dyr[j];
      }
    }
  }
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// Causal attention for one query at absolute position `t`. `probs` receives
// heads rows of stride `stride` (first t + 1 entries used).
void attend_row(const double* q, const KvCache& cache, std::size_t layer, std::size_t t,
                int heads, int hd, double* probs, std::size_t stride, double* out) {
  const std::size_t cap = cache.capacity();
  const double* kt = cache.kt(layer);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t len = t + 1;
  for (int h = 0; h < heads; ++h) {
    double* p = probs + static_cast<std::size_t>(h) * stride;
    for (std::size_t j = 0; j < len; ++j) p[j] = 0.0;
    for (int c = h * hd; c < (h + 1) * hd; ++c) {
      const double qc = q[c];
      const double* __restrict krow = kt + static_cast<std::size_t>(c) * cap;
      for (std::size_t j = 0; j < len; ++j) p[j] += qc * krow[j];
    }
    double mx = -INFINITY;
    for (std::size_t j = 0; j < len; ++j) {
      p[j] *= scale;
      mx = std::max(mx, p[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < len; ++j) p[j] *= inv;
    double* oh = out + h * hd;
    for (int c = 0; c < hd; ++c) oh[c] = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      kernels::axpy(p[j], cache.v_row(layer, j) + h * hd, oh, static_cast<std::size_t>(hd));
    }
  }
}

struct LayerActs {
  Matrix x_in, a, q, uq, uv, probs, o, x_mid, m, h1, g;
  std::vector<double> mu1, rs1, mu2, rs2;
};

struct SegmentActs {
  std::size_t start = 0;  // absolute position of row 0
  std::size_t n = 0;
  std::vector<int> tokens;
  std::vector<LayerActs> layers;
  std::size_t logits_from = 0;
  Matrix x_top;  // residual stream after the last block, loss rows only
  Matrix f;      // final LayerNorm output, loss rows only
  std::vector<double> muf, rsf;
};

Matrix forward_impl(const ModelParams& params, const LowRankDelta* delta, KvCache& cache,
                    std::span<const int> tokens, std::size_t logits_from,
                    SegmentActs* acts) {
  const ModelConfig& cfg = params.config();
  const std::size_t n = tokens.size();
  const std::size_t d = static_cast<std::size_t>(cfg.width);
  const std::size_t ff = static_cast<std::size_t>(cfg.ff_width());
  const std::size_t start = cache.length();
  const int heads = cfg.heads;
  const int hd = cfg.head_dim();
  ensure(start + n <= cache.capacity(), "kv cache overflow");
  if (start + n > static_cast<std::size_t>(cfg.context_len)) {
    throw InputError("sequence length " + std::to_string(start + n) +
                     " exceeds context_len " + std::to_string(cfg.context_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab->size) {
      throw InputError("token id " + std::to_string(t) + " out of range");
    }
  }
  ensure(logits_from <= n, "logits_from beyond segment");
  if (delta) ensure(delta->layers.size() == static_cast<std::size_t>(cfg.layers), "delta layer count");

  const TensorMap& tm = params.tensors();
  auto tok_emb = tm.view(0);
  auto pos_emb = tm.view(1);

  Matrix x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* te = tok_emb.data() + static_cast<std::size_t>(tokens[i]) * d;
    const double* pe = pos_emb.data() + (start + i) * d;
    for (std::size_t j = 0; j < d; ++j) x(i, j) = te[j] + pe[j];
  }

  if (acts) {
    acts->start = start;
    acts->n = n;
    acts->tokens.assign(tokens.begin(), tokens.end());
    acts->layers.assign(static_cast<std::size_t>(cfg.layers), LayerActs{});
    acts->logits_from = logits_from;
  }

  const std::size_t kv_len = start + n;
  Matrix a(n, d), q(n, d), kv(n, d), o(n, d), tmp(n, d), m(n, d), h1(n, ff), g(n, ff);
  std::vector<double> mu1(n), rs1(n), mu2(n), rs2(n);
  Matrix probs(n * static_cast<std::size_t>(heads), kv_len);

  for (int l = 0; l < cfg.layers; ++l) {
    const std::size_t L = static_cast<std::size_t>(l);
    auto V = [&](LayerSlot s) { return params.layer_view(l, s).data(); };
    const LowRankFactor* dq = nullptr;
    const LowRankFactor* dv = nullptr;
    if (delta) {
      if (delta->layers[L][kQuery].active()) dq = &delta->layers[L][kQuery];
      if (delta->layers[L][kValue].active()) dv = &delta->layers[L][kValue];
    }

    layer_norm(x.data.data(), n, d, V(LayerSlot::kLn1Gain), V(LayerSlot::kLn1Bias),
               a.data.data(), mu1.data(), rs1.data());

    kernels::linear(a.data.data(), n, d, V(LayerSlot::kWq), V(LayerSlot::kBq), d,
                    q.data.data());
    Matrix uq, uv;
    if (dq) {
      uq = Matrix(n, static_cast<std::size_t>(dq->rank));
      kernels::linear(a.data.data(), n, d, dq->at.data(), nullptr, uq.cols, uq.data.data());
      kernels::linear_add(uq.data.data(), n, uq.cols, dq->bt.data(), d, q.data.data());
    }

    kernels::linear(a.data.data(), n, d, V(LayerSlot::kWk), V(LayerSlot::kBk), d,
                    kv.data.data());
    double* kt = cache.kt(L);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(kv.row(i).data(), d, cache.k_row(L, start + i));
      for (std::size_t c = 0; c < d; ++c) kt[c * cache.capacity() + start + i] = kv(i, c);
    }
    kernels::linear(a.data.data(), n, d, V(LayerSlot::kWv), V(LayerSlot::kBv), d,
                    kv.data.data());
    if (dv) {
      uv = Matrix(n, static_cast<std::size_t>(dv->rank));
      kernels::linear(a.data.data(), n, d, dv->at.data(), nullptr, uv.cols, uv.data.data());
      kernels::linear_add(uv.data.data(), n, uv.cols, dv->bt.data(), d, kv.data.data());
    }
    for (std::size_t i = 0; i < n; ++i) std::copy_n(kv.row(i).data(), d, cache.v_row(L, start + i));

    for (std::size_t i = 0; i < n; ++i) {
      attend_row(q.row(i).data(), cache, L, start + i, heads, hd,
                 probs.row(i * static_cast<std::size_t>(heads)).data(), kv_len,
                 o.row(i).data());
    }

    if (acts) {
      LayerActs& la = acts->layers[L];
      la.x_in = x;
      la.a = a;
      la.q = q;
      la.uq = std::move(uq);
      la.uv = std::move(uv);
      la.probs = probs;
      la.o = o;
      la.mu1 = mu1;
      la.rs1 = rs1;
    }

    kernels::linear(o.data.data(), n, d, V(LayerSlot::kWo), V(LayerSlot::kBo), d,
                    tmp.data.data());
    for (std::size_t k = 0; k < x.data.size(); ++k) x.data[k] = x.data[k] + tmp.data[k];

    layer_norm(x.data.data(), n, d, V(LayerSlot::kLn2Gain), V(LayerSlot::kLn2Bias),
               m.data.data(), mu2.data(), rs2.data());
    kernels::linear(m.data.data(), n, d, V(LayerSlot::kW1), V(LayerSlot::kB1), ff,
                    h1.data.data());
    for (std::size_t k = 0; k < h1.data.size(); ++k) g.data[k] = gelu(h1.data[k]);

    if (acts) {
      LayerActs& la = acts->layers[L];
      la.x_mid = x;
      la.m = m;
      la.h1 = h1;
      la.g = g;
      la.mu2 = mu2;
      la.rs2 = rs2;
    }

    kernels::linear(g.data.data(), n, ff, V(LayerSlot::kW2), V(LayerSlot::kB2), d,
                    tmp.data.data());
    for (std::size_t k = 0; k < x.data.size(); ++k) x.data[k] = x.data[k] + tmp.data[k];
  }
  cache.advance(n);

  const std::size_t rows = n - logits_from;
  const std::size_t vsz = static_cast<std::size_t>(cfg.vocab->size);
  const std::size_t tail = params.tail_index();
  Matrix f(rows, d);
  std::vector<double> muf(rows), rsf(rows);
  layer_norm(x.data.data() + logits_from * d, rows, d, tm.view(tail).data(),
             tm.view(tail + 1).data(), f.data.data(), muf.data(), rsf.data());
  Matrix logits(rows, vsz);
  kernels::linear(f.data.data(), rows, d, tm.view(tail + 2).data(), nullptr, vsz,
                  logits.data.data());
  if (acts) {
    acts->x_top = Matrix(rows, d);
    std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(logits_from * d), x.data.end(),
              acts->x_top.data.begin());
    acts->f = std::move(f);
    acts->muf = std::move(muf);
    acts->rsf = std::move(rsf);
  }
  return logits;
}

// Transposed weights (dout × din) for input-gradient products.
struct Transposed {
  struct Layer {
    std::vector<double> wq, wk, wv, wo, w1, w2;
  };
  std::vector<Layer> layers;
  std::vector<double> head;  // vocab × width
};

Transposed transpose_weights(const ModelParams& params) {
  const ModelConfig& cfg = params.config();
  const std::size_t d = static_cast<std::size_t>(cfg.width);
  const std::size_t ff = static_cast<std::size_t>(cfg.ff_width());
  const std::size_t vsz = static_cast<std::size_t>(cfg.vocab->size);
  Transposed t;
  t.layers.resize(static_cast<std::size_t>(cfg.layers));
  auto tr = [](std::span<const double> w, std::size_t din, std::size_t dout) {
    std::vector<double> out(din * dout);
    kernels::transpose(w.data(), din, dout, out.data());
    return out;
  };
  for (int l = 0; l < cfg.layers; ++l) {
    auto& L = t.layers[static_cast<std::size_t>(l)];
    L.wq = tr(params.layer_view(l, LayerSlot::kWq), d, d);
    L.wk = tr(params.layer_view(l, LayerSlot::kWk), d, d);
    L.wv = tr(params.layer_view(l, LayerSlot::kWv), d, d);
    L.wo = tr(params.layer_view(l, LayerSlot::kWo), d, d);
    L.w1 = tr(params.layer_view(l, LayerSlot::kW1), d, ff);
    L.w2 = tr(params.layer_view(l, LayerSlot::kW2), ff, d);
  }
  t.head = tr(params.tensors().view(params.tail_index() + 2), d, vsz);
  return t;
}

// Backpropagates one segment. `dlogits` covers the loss rows (may be null
// when the segment has none). `extra_dk/extra_dv` add key/value gradients for
// this segment's own rows (contributions from later segments attending to
// it). Gradients for keys/values of earlier positions (the shared prefix) are
// added into `prefix_dk/prefix_dv`.
void backward_segment(const ModelParams& params, const LowRankDelta* delta,
                      const Transposed& wt, const SegmentActs& acts, const KvCache& cache,
                      const Matrix* dlogits, const std::vector<Matrix>* extra_dk,
                      const std::vector<Matrix>* extra_dv, std::vector<Matrix>* prefix_dk,
                      std::vector<Matrix>* prefix_dv, TensorMap* full, LowRankGrads* lg) {
  const ModelConfig& cfg = params.config();
  const std::size_t n = acts.n;
  const std::size_t P = acts.start;
  const std::size_t d = static_cast<std::size_t>(cfg.width);
  const std::size_t ff = static_cast<std::size_t>(cfg.ff_width());
  const std::size_t vsz = static_cast<std::size_t>(cfg.vocab->size);
  const int heads = cfg.heads;
  const int hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t kv_len = P + n;
  const std::size_t tail = params.tail_index();
  const TensorMap& tm = params.tensors();

  auto G = [&](std::size_t idx) -> double* { return full ? full->view(idx).data() : nullptr; };

  Matrix dx(n, d);
  if (dlogits && dlogits->rows > 0) {
    const std::size_t rows = dlogits->rows;
    ensure(rows == n - acts.logits_from, "dlogits rows");
    if (full) {
      kernels::linear_grad_weight(acts.f.data.data(), dlogits->data.data(), rows, d, vsz,
                                  G(tail + 2), nullptr);
    }
    Matrix df(rows, d);
    kernels::linear(dlogits->data.data(), rows, vsz, wt.head.data(), nullptr, d, df.data.data());
    layer_norm_backward(acts.x_top.data.data(), acts.muf.data(), acts.rsf.data(),
                        tm.view(tail).data(), df.data.data(), rows, d,
                        dx.data.data() + acts.logits_from * d, G(tail), G(tail + 1));
  }

  Matrix dg(n, ff), dm(n, d), dmid(n, d), dout(n, d), dq(n, d), da(n, d);
  Matrix dk(kv_len, d), dv(kv_len, d);
  std::vector<double> vt(d * kv_len);
  std::vector<double> dp(kv_len);

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const std::size_t L = static_cast<std::size_t>(l);
    const LayerActs& la = acts.layers[L];
    const auto& W = wt.layers[L];
    auto slot = [&](LayerSlot s) { return G(params.layer_index(l, s)); };

    // MLP block: x_out = x_mid + gelu(m W1 + b1) W2 + b2.
    kernels::linear(dx.data.data(), n, d, W.w2.data(), nullptr, ff, dg.data.data());
    if (full) {
      kernels::linear_grad_weight(la.g.data.data(), dx.data.data(), n, ff, d,
                                  slot(LayerSlot::kW2), slot(LayerSlot::kB2));
    }
    for (std::size_t k = 0; k < dg.data.size(); ++k) dg.data[k] *= gelu_grad(la.h1.data[k]);
    if (full) {
      kernels::linear_grad_weight(la.m.data.data(), dg.data.data(), n, d, ff,
                                  slot(LayerSlot::kW1), slot(LayerSlot::kB1));
    }
    kernels::linear(dg.data.data(), n, ff, W.w1.data(), nullptr, d, dm.data.data());
    dmid = dx;
    layer_norm_backward(la.x_mid.data.data(), la.mu2.data(), la.rs2.data(),
                        params.layer_view(l, LayerSlot::kLn2Gain).data(), dm.data.data(), n,
                        d, dmid.data.data(), slot(LayerSlot::kLn2Gain),
                        slot(LayerSlot::kLn2Bias));

    // Attention output projection: x_mid = x_in + o Wo + bo.
    if (full) {
      kernels::linear_grad_weight(la.o.data.data(), dmid.data.data(), n, d, d,
                                  slot(LayerSlot::kWo), slot(LayerSlot::kBo));
    }
    kernels::linear(dmid.data.data(), n, d, W.wo.data(), nullptr, d, dout.data.data());

    // Attention core.
    std::fill(dq.data.begin(), dq.data.end(), 0.0);
    std::fill(dk.data.begin(), dk.data.end(), 0.0);
    std::fill(dv.data.begin(), dv.data.end(), 0.0);
    for (std::size_t j = 0; j < kv_len; ++j) {
      const double* vr = cache.v_row(L, j);
      for (std::size_t c = 0; c < d; ++c) vt[c * kv_len + j] = vr[c];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = P + i + 1;
      const double* doi = dout.row(i).data();
      const double* qi = la.q.row(i).data();
      for (int h = 0; h < heads; ++h) {
        const double* p = la.probs.row(i * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)).data();
        const int c0 = h * hd;
        for (std::size_t j = 0; j < len; ++j) dp[j] = 0.0;
        for (int c = c0; c < c0 + hd; ++c) {
          const double g = doi[c];
          const double* __restrict vrow = vt.data() + static_cast<std::size_t>(c) * kv_len;
          for (std::size_t j = 0; j < len; ++j) dp[j] += g * vrow[j];
        }
        double pdp = 0.0;
        for (std::size_t j = 0; j < len; ++j) pdp += p[j] * dp[j];
        double* dqi = dq.row(i).data() + c0;
        for (std::size_t j = 0; j < len; ++j) {
          kernels::axpy(p[j], doi + c0, dv.row(j).data() + c0, static_cast<std::size_t>(hd));
          const double ds = p[j] * (dp[j] - pdp) * scale;
          kernels::axpy(ds, cache.k_row(L, j) + c0, dqi, static_cast<std::size_t>(hd));
          kernels::axpy(ds, qi + c0, dk.row(j).data() + c0, static_cast<std::size_t>(hd));
        }
      }
    }
    if (prefix_dk && P > 0) {
      Matrix& pk = (*prefix_dk)[L];
      Matrix& pv = (*prefix_dv)[L];
      for (std::size_t k = 0; k < P * d; ++k) {
        pk.data[k] += dk.data[k];
        pv.data[k] += dv.data[k];
      }
    }
    double* dk_own = dk.data.data() + P * d;
    double* dv_own = dv.data.data() + P * d;
    if (extra_dk) {
      const Matrix& ek = (*extra_dk)[L];
      const Matrix& ev = (*extra_dv)[L];
      for (std::size_t k = 0; k < n * d; ++k) {
        dk_own[k] += ek.data[k];
        dv_own[k] += ev.data[k];
      }
    }

    // Projections back to the LayerNorm output.
    kernels::linear(dq.data.data(), n, d, W.wq.data(), nullptr, d, da.data.data());
    kernels::linear_add(dk_own, n, d, W.wk.data(), d, da.data.data());
    kernels::linear_add(dv_own, n, d, W.wv.data(), d, da.data.data());
    if (full) {
      kernels::linear_grad_weight(la.a.data.data(), dq.data.data(), n, d, d,
                                  slot(LayerSlot::kWq), slot(LayerSlot::kBq));
      kernels::linear_grad_weight(la.a.data.data(), dk_own, n, d, d, slot(LayerSlot::kWk),
                                  slot(LayerSlot::kBk));
      kernels::linear_grad_weight(la.a.data.data(), dv_own, n, d, d, slot(LayerSlot::kWv),
                                  slot(LayerSlot::kBv));
    }
    if (delta) {
      for (int p = 0; p < 2; ++p) {
        const LowRankFactor& f = delta->layers[L][static_cast<std::size_t>(p)];
        if (!f.active()) continue;
        const double* dy = p == kQuery ? dq.data.data() : dv_own;
        const Matrix& u = p == kQuery ? la.uq : la.uv;
        const std::size_t r = static_cast<std::size_t>(f.rank);
        Matrix du(n, r);
        // du = dy · B, with B stored dout × r.
        kernels::linear(dy, n, d, f.b.data(), nullptr, r, du.data.data());
        if (lg) {
          LowRankGrad& grad = (*lg)[L][static_cast<std::size_t>(p)];
          // dB[o][j] += Σ dy[o] u[j]; dA[j][i] += Σ du[j] a[i].
          std::vector<double> dbt(r * d, 0.0), dat(d * r, 0.0);
          kernels::linear_grad_weight(u.data.data(), dy, n, r, d, dbt.data(), nullptr);
          kernels::linear_grad_weight(la.a.data.data(), du.data.data(), n, d, r, dat.data(),
                                      nullptr);
          for (std::size_t o = 0; o < d; ++o) {
            for (std::size_t j = 0; j < r; ++j) grad.b[o * r + j] += dbt[j * d + o];
          }
          for (std::size_t j = 0; j < r; ++j) {
            for (std::size_t i = 0; i < d; ++i) grad.a[j * d + i] += dat[i * r + j];
          }
        }
        kernels::linear_add(du.data.data(), n, r, f.a.data(), d, da.data.data());
      }
    }

    // dx_in = dx_mid + LN1 backward.
    dx = dmid;
    layer_norm_backward(la.x_in.data.data(), la.mu1.data(), la.rs1.data(),
                        params.layer_view(l, LayerSlot::kLn1Gain).data(), da.data.data(), n, d,
                        dx.data.data(), slot(LayerSlot::kLn1Gain), slot(LayerSlot::kLn1Bias));
  }

  if (full) {
    double* dte = G(0);
    double* dpe = G(1);
    for (std::size_t i = 0; i < n; ++i) {
      kernels::axpy(1.0, dx.row(i).data(), dte + static_cast<std::size_t>(acts.tokens[i]) * d, d);
      kernels::axpy(1.0, dx.row(i).data(), dpe + (P + i) * d, d);
    }
  }
}

void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
}

}  // namespace

LowRankGrads zero_grads(const LowRankDelta& delta) {
  LowRankGrads g(delta.layers.size());
  for (std::size_t l = 0; l < delta.layers.size(); ++l) {
    for (std::size_t p = 0; p < 2; ++p) {
      const LowRankFactor& f = delta.layers[l][p];
      g[l][p].a.assign(f.a.size(), 0.0);
      g[l][p].b.assign(f.b.size(), 0.0);
    }
  }
  return g;
}

KvCache::KvCache(const ModelConfig& config, std::size_t capacity)
    : layers_(static_cast<std::size_t>(config.layers)),
      width_(static_cast<std::size_t>(config.width)),
      capacity_(capacity),
      k_(layers_ * capacity * width_),
      v_(layers_ * capacity * width_),
      kt_(layers_ * capacity * width_) {}

KvCache KvCache::fork(std::size_t capacity) const {
  ensure(capacity >= length_, "fork capacity below cache length");
  KvCache out;
  out.layers_ = layers_;
  out.width_ = width_;
  out.capacity_ = capacity;
  out.length_ = length_;
  out.k_.assign(layers_ * capacity * width_, 0.0);
  out.v_.assign(layers_ * capacity * width_, 0.0);
  out.kt_.assign(layers_ * capacity * width_, 0.0);
  for (std::size_t l = 0; l < layers_; ++l) {
    std::copy_n(k_row(l, 0), length_ * width_, out.k_row(l, 0));
    std::copy_n(v_row(l, 0), length_ * width_, out.v_row(l, 0));
    for (std::size_t c = 0; c < width_; ++c) {
      std::copy_n(kt(l) + c * capacity_, length_, out.kt(l) + c * capacity);
    }
  }
  return out;
}

Matrix forward(const ModelParams& params, const LowRankDelta* delta, KvCache& cache,
               std::span<const int> tokens, std::size_t logits_from) {
  return forward_impl(params, delta, cache, tokens, logits_from, nullptr);
}

std::vector<int> teacher_forcing_input(const SequencePair& pair) {
  std::vector<int> seq(pair.prompt);
  seq.insert(seq.end(), pair.target.begin(), pair.target.end());
  seq.pop_back();
  return seq;
}

double cross_entropy(const Matrix& logits, std::span<const int> targets, Matrix* dlogits) {
  ensure(logits.rows == targets.size(), "cross_entropy rows");
  const std::size_t vsz = logits.cols;
  const double inv = 1.0 / static_cast<double>(targets.size());
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto row = logits.row(r);
    double mx = -INFINITY;
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    total += lse - row[static_cast<std::size_t>(targets[r])];
    if (dlogits) {
      auto dr = dlogits->row(r);
      for (std::size_t j = 0; j < vsz; ++j) dr[j] = std::exp(row[j] - lse) * inv;
      dr[static_cast<std::size_t>(targets[r])] -= inv;
    }
  }
  return total / static_cast<double>(targets.size());
}

double backward_batch(const ModelParams& params, const LowRankDelta* delta,
                      std::span<const SequencePair> batch, const TargetLoss& loss,
                      TensorMap* full_grads, LowRankGrads* delta_grads) {
  require(!batch.empty(), "backward: empty batch");
  const ModelConfig& cfg = params.config();
  for (const auto& pair : batch) validate_pair(cfg, pair);
  if (full_grads) {
    ensure(full_grads->congruent(params.tensors()), "gradient map layout");
    std::fill(full_grads->flat().begin(), full_grads->flat().end(), 0.0);
  }
  if (delta_grads) {
    ensure(delta != nullptr, "delta gradients requested without a delta");
    *delta_grads = zero_grads(*delta);
  }
  const bool need_grad = full_grads || delta_grads;

  std::vector<std::vector<int>> inputs;
  inputs.reserve(batch.size());
  std::size_t shared = SIZE_MAX;
  for (const auto& pair : batch) {
    inputs.push_back(teacher_forcing_input(pair));
    shared = std::min(shared, pair.prompt.size() - 1);
  }
  for (std::size_t i = 1; i < inputs.size() && shared > 0; ++i) {
    std::size_t k = 0;
    while (k < shared && inputs[i][k] == inputs[0][k]) ++k;
    shared = k;
  }
  const std::size_t P = shared;
  const std::size_t d = static_cast<std::size_t>(cfg.width);

  KvCache prefix_cache(cfg, P);
  SegmentActs prefix_acts;
  if (P > 0) {
    forward_impl(params, delta, prefix_cache, std::span<const int>(inputs[0]).first(P), P,
                 need_grad ? &prefix_acts : nullptr);
  }

  Transposed wt;
  if (need_grad) wt = transpose_weights(params);
  std::vector<Matrix> prefix_dk, prefix_dv;
  if (need_grad && P > 0) {
    prefix_dk.assign(static_cast<std::size_t>(cfg.layers), Matrix(P, d));
    prefix_dv.assign(static_cast<std::size_t>(cfg.layers), Matrix(P, d));
  }
  TensorMap scratch_full;
  if (full_grads) scratch_full = full_grads->zeros_like();
  LowRankGrads scratch_delta;
  if (delta_grads) scratch_delta = zero_grads(*delta);

  auto reset_scratch = [&] {
    if (full_grads) std::fill(scratch_full.flat().begin(), scratch_full.flat().end(), 0.0);
    if (delta_grads) scratch_delta = zero_grads(*delta);
  };
  auto flush_scratch = [&] {
    if (full_grads) {
      auto dst = full_grads->flat();
      auto src = scratch_full.flat();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    if (delta_grads) {
      for (std::size_t l = 0; l < delta_grads->size(); ++l) {
        for (std::size_t p = 0; p < 2; ++p) {
          add_into((*delta_grads)[l][p].a, scratch_delta[l][p].a);
          add_into((*delta_grads)[l][p].b, scratch_delta[l][p].b);
        }
      }
    }
  };

  double total = 0.0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const auto& input = inputs[e];
    const std::size_t n = input.size() - P;
    KvCache cache = prefix_cache.fork(P + n);
    SegmentActs acts;
    const std::size_t from = batch[e].prompt.size() - 1 - P;
    Matrix logits = forward_impl(params, delta, cache, std::span<const int>(input).subspan(P),
                                 from, need_grad ? &acts : nullptr);
    Matrix dlogits(logits.rows, logits.cols);
    total += loss(e, logits, dlogits);
    if (need_grad) {
      reset_scratch();
      backward_segment(params, delta, wt, acts, cache, &dlogits, nullptr, nullptr,
                       P > 0 ? &prefix_dk : nullptr, P > 0 ? &prefix_dv : nullptr,
                       full_grads ? &scratch_full : nullptr,
                       delta_grads ? &scratch_delta : nullptr);
      flush_scratch();
    }
  }
  if (need_grad && P > 0) {
    reset_scratch();
    backward_segment(params, delta, wt, prefix_acts, prefix_cache, nullptr, &prefix_dk,
                     &prefix_dv, nullptr, nullptr, full_grads ? &scratch_full : nullptr,
                     delta_grads ? &scratch_delta : nullptr);
    flush_scratch();
  }

  const double count = static_cast<double>(batch.size());
  if (full_grads) {
    for (double& g : full_grads->flat()) g /= count;
  }
  if (delta_grads) {
    for (auto& layer : *delta_grads) {
      for (auto& g : layer) {
        for (double& v : g.a) v /= count;
        for (double& v : g.b) v /= count;
      }
    }
  }
  return total / count;
}

}  // namespace fedpt::engine
