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

#include "kernels.hpp"

#include <cstring>

namespace fedpt::kernels {

namespace {

inline void init_rows(double* y, std::size_t rows, std::size_t dout, const double* b) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y + r * dout;
    if (b) {
      for (std::size_t j = 0; j < dout; ++j) yr[j] = b[j];
    } else {
      for (std::size_t j = 0; j < dout; ++j) yr[j] = 0.0;
    }
  }
}

using v8 = double __attribute__((vector_size(64)));

// R rows by 8V columns held in registers across the whole reduction.
template <std::size_t R, std::size_t V>
inline void tile(const double* x, std::size_t din, const double* w, std::size_t dout,
                 double* y) {
  v8 acc[R][V];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < V; ++c) std::memcpy(&acc[r][c], y + r * dout + 8 * c, 64);
  }
  for (std::size_t i = 0; i < din; ++i) {
    const double* wi = w + i * dout;
    v8 wv[V];
    for (std::size_t c = 0; c < V; ++c) std::memcpy(&wv[c], wi + 8 * c, 64);
    for (std::size_t r = 0; r < R; ++r) {
      const double a = x[r * din + i];
      for (std::size_t c = 0; c < V; ++c) acc[r][c] += a * wv[c];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < V; ++c) std::memcpy(y + r * dout + 8 * c, &acc[r][c], 64);
  }
}

void rows(const double* x, std::size_t n, std::size_t din, const double* w, std::size_t cols,
          std::size_t dout, double* y) {
  for (std::size_t r = 0; r < n; ++r) {
    double* __restrict yr = y + r * dout;
    const double* xr = x + r * din;
    for (std::size_t i = 0; i < din; ++i) {
      const double* __restrict wi = w + i * dout;
      const double a = xr[i];
      for (std::size_t j = 0; j < cols; ++j) yr[j] += a * wi[j];
    }
  }
}

void accumulate(const double* x, std::size_t n, std::size_t din, const double* w,
                std::size_t dout, double* y) {
  constexpr std::size_t kRows = 4;
  std::size_t r = 0;
  for (; r + kRows <= n; r += kRows) {
    const double* xb = x + r * din;
    double* yb = y + r * dout;
    std::size_t j = 0;
    for (; j + 16 <= dout; j += 16) tile<kRows, 2>(xb, din, w + j, dout, yb + j);
    for (; j + 8 <= dout; j += 8) tile<kRows, 1>(xb, din, w + j, dout, yb + j);
    if (j < dout) rows(xb, kRows, din, w + j, dout - j, dout, yb + j);
  }
  if (r < n) rows(x + r * din, n - r, din, w, dout, dout, y + r * dout);
}

}  // namespace

void linear(const double* x, std::size_t n, std::size_t din, const double* w,
            const double* b, std::size_t dout, double* y) {
  init_rows(y, n, dout, b);
  accumulate(x, n, din, w, dout, y);
}

void linear_add(const double* x, std::size_t n, std::size_t din, const double* w,
                std::size_t dout, double* y) {
  accumulate(x, n, din, w, dout, y);
}

void linear_grad_weight(const double* x, const double* dy, std::size_t n,
                        std::size_t din, std::size_t dout, double* dw, double* db) {
  for (std::size_t i = 0; i < din; ++i) {
    double* __restrict dwi = dw + i * dout;
    std::size_t r = 0;
    for (; r + 2 <= n; r += 2) {
      const double a0 = x[r * din + i];
      const double a1 = x[(r + 1) * din + i];
      const double* __restrict g0 = dy + r * dout;
      const double* __restrict g1 = g0 + dout;
      for (std::size_t j = 0; j < dout; ++j) dwi[j] += a0 * g0[j] + a1 * g1[j];
    }
    for (; r < n; ++r) {
      const double a = x[r * din + i];
      const double* __restrict g = dy + r * dout;
      for (std::size_t j = 0; j < dout; ++j) dwi[j] += a * g[j];
    }
  }
  if (db) {
    for (std::size_t r = 0; r < n; ++r) {
      const double* g = dy + r * dout;
      for (std::size_t j = 0; j < dout; ++j) db[j] += g[j];
    }
  }
}

void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

}  // namespace fedpt::kernels
