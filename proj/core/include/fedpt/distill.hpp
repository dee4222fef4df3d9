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

#include <functional>
#include <span>
#include <vector>

#include "fedpt/decode.hpp"
#include "fedpt/lora.hpp"
#include "fedpt/model.hpp"
#include "fedpt/rng.hpp"

namespace fedpt {

struct DistillConfig {
  double lambda = 0.1;
  std::size_t data_size = 128;
  std::size_t batch_size = 16;
  int iterations = 8;
  double lr = 3e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;

  /// Throws InputError naming the offending field.
  void validate() const;
};

/// Teacher next-token distributions at each target position of each pair,
/// computed without gradients (one matrix per pair, rows = target tokens).
std::vector<Matrix> teacher_distributions(const LogitSource& teacher,
                                          std::span<const SequencePair> batch);

struct KdTerms {
  double mle = 0.0;  // mean token NLL of the ground-truth response
  double kl = 0.0;   // mean token KL(teacher || student)
  double total = 0.0;
};

/// One example's (1 - lambda)·MLE + lambda·KL over target rows; writes the
/// logit gradient when `dlogits` is non-null.
KdTerms kd_example(const Matrix& student_logits, std::span<const int> targets,
                   const Matrix& teacher_probs, double lambda, Matrix* dlogits);

/// Batch mean of kd_example. ConfigError when vocabularies differ.
KdTerms kd_terms(const AdaptedModel& student, const LogitSource& teacher,
                 std::span<const SequencePair> batch, double lambda);
double kd_loss(const AdaptedModel& student, const LogitSource& teacher,
               std::span<const SequencePair> batch, double lambda);

/// Loss and gradient with respect to the student adapter; the teacher is a
/// constant.
LossAndGrad kd_backward(const AdaptedModel& student, std::span<const SequencePair> batch,
                        std::span<const Matrix> teacher_probs, double lambda);

struct DistillStats {
  int steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

/// `iterations` optimizer steps on kd_loss over seeded mini-batches of a
/// seeded `data_size` subset of `public_set`; only the adapter changes.
LoraAdapter distill(const AdaptedModel& student_in, const LogitSource& teacher,
                    std::span<const SequencePair> public_set, const DistillConfig& config,
                    Rng& rng, DistillStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Central finite differences.

struct GradCheckReport {
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst = 0;
};

/// Compares `analytic` to (f(x+h) - f(x-h)) / 2h coordinatewise, perturbing
/// `x` in place (restored afterwards). Relative error is
/// |a - n| / max(|a|, |n|, floor).
GradCheckReport finite_difference_check(std::span<double> x, std::span<const double> analytic,
                                         const std::function<double()>& f, double h = 1e-4,
                                         double floor = 1e-6);

/// Finite-difference validation of d(kd_loss)/d(adapter).
GradCheckReport kd_gradient_check(const AdaptedModel& student, const LogitSource& teacher,
                                  std::span<const SequencePair> batch, double lambda,
                                  double h = 1e-4);

}  // namespace fedpt
