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

// Dense kernels shared by the training and decoding paths. Every output element
// is accumulated in ascending input order regardless of how rows are blocked,
// so a row computed alone and the same row computed inside a block are
// bitwise identical. The build disables floating-point contraction for the
// same reason.

#include <cstddef>

namespace fedpt::kernels {

/// Y[n×dout] = X[n×din]·W[din×dout] (+ b). `b` may be null.
void linear(const double* x, std::size_t n, std::size_t din, const double* w,
            const double* b, std::size_t dout, double* y);

/// Y[n×dout] += X[n×din]·W[din×dout].
void linear_add(const double* x, std::size_t n, std::size_t din, const double* w,
                std::size_t dout, double* y);

/// DW[din×dout] += Xᵀ·DY. `db` (length dout) += column sums of DY when non-null.
void linear_grad_weight(const double* x, const double* dy, std::size_t n,
                        std::size_t din, std::size_t dout, double* dw, double* db);

/// Transposes src[rows×cols] into dst[cols×rows].
void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst);

inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* __restrict x, double* __restrict y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace fedpt::kernels
