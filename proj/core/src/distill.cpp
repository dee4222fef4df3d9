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

#include "fedpt/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedpt/errors.hpp"
#include "fedpt/proxy.hpp"

namespace fedpt {

namespace {

void check_vocab(const AdaptedModel& student, const LogitSource& teacher) {
  if (!(student.base->vocab() == teacher.vocab())) {
    throw ConfigError("distill: teacher and student vocabularies differ");
  }
}

}  // namespace

void DistillConfig::validate() const {
  require(lambda >= 0.0 && lambda <= 1.0, "kd_lambda must be in [0, 1]");
  require(data_size >= 1, "kd_data_size must be >= 1");
  require(batch_size >= 1, "kd_batch_size must be >= 1");
  require(iterations >= 0, "kd_iterations must be >= 0");
  require(std::isfinite(lr) && lr >= 0.0, "kd_lr must be >= 0");
}

std::vector<Matrix> teacher_distributions(const LogitSource& teacher,
                                          std::span<const SequencePair> batch) {
  std::vector<std::vector<int>> inputs;
  std::vector<std::size_t> from;
  inputs.reserve(batch.size());
  for (const SequencePair& p : batch) {
    require(!p.prompt.empty() && !p.target.empty(), "distill: empty prompt or target");
    inputs.push_back(engine::teacher_forcing_input(p));
    from.push_back(p.prompt.size() - 1);
  }
  std::vector<Matrix> logits = shared_prefix_logits(teacher, inputs, from);
  for (Matrix& m : logits) {
    for (std::size_t r = 0; r < m.rows; ++r) {
      auto p = softmax(m.row(r));
      std::copy(p.begin(), p.end(), m.row(r).begin());
    }
  }
  return logits;
}

KdTerms kd_example(const Matrix& student_logits, std::span<const int> targets,
                   const Matrix& teacher_probs, double lambda, Matrix* dlogits) {
  ensure(student_logits.rows == targets.size() && teacher_probs.rows == targets.size() &&
             student_logits.cols == teacher_probs.cols,
         "kd_example: shape mismatch");
  const double inv = 1.0 / static_cast<double>(targets.size());
  KdTerms t;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto logq = log_softmax(student_logits.row(r));
    const auto p = teacher_probs.row(r);
    t.mle -= logq[static_cast<std::size_t>(targets[r])];
    double kl = 0.0;
    for (std::size_t v = 0; v < p.size(); ++v) {
      if (p[v] > 0.0) kl += p[v] * (std::log(p[v]) - logq[v]);
    }
    t.kl += kl;
    if (dlogits) {
      auto g = dlogits->row(r);
      for (std::size_t v = 0; v < g.size(); ++v) {
        const double q = std::exp(logq[v]);
        const double onehot = static_cast<int>(v) == targets[r] ? 1.0 : 0.0;
        g[v] = ((1.0 - lambda) * (q - onehot) + lambda * (q - p[v])) * inv;
      }
    }
  }
  const double count = static_cast<double>(targets.size());
  t.mle /= count;
  t.kl /= count;
  t.total = (1.0 - lambda) * t.mle + lambda * t.kl;
  return t;
}

KdTerms kd_terms(const AdaptedModel& student, const LogitSource& teacher,
                 std::span<const SequencePair> batch, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, "lambda must be in [0, 1]");
  require(!batch.empty(), "kd_loss: empty batch");
  student.validate();
  check_vocab(student, teacher);
  const auto probs = teacher_distributions(teacher, batch);
  auto source = make_source(student);
  std::vector<std::vector<int>> inputs;
  std::vector<std::size_t> from;
  for (const SequencePair& p : batch) {
    validate_pair(student.base->config(), p);
    inputs.push_back(engine::teacher_forcing_input(p));
    from.push_back(p.prompt.size() - 1);
  }
  const auto logits = shared_prefix_logits(*source, inputs, from);
  KdTerms sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const KdTerms t = kd_example(logits[i], batch[i].target, probs[i], lambda, nullptr);
    sum.mle += t.mle;
    sum.kl += t.kl;
    sum.total += t.total;
  }
  const double n = static_cast<double>(batch.size());
  return {sum.mle / n, sum.kl / n, sum.total / n};
}

double kd_loss(const AdaptedModel& student, const LogitSource& teacher,
               std::span<const SequencePair> batch, double lambda) {
  return kd_terms(student, teacher, batch, lambda).total;
}

LossAndGrad kd_backward(const AdaptedModel& student, std::span<const SequencePair> batch,
                        std::span<const Matrix> teacher_probs, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, "lambda must be in [0, 1]");
  ensure(batch.size() == teacher_probs.size(), "kd_backward: teacher/batch size mismatch");
  auto loss = [&](std::size_t e, const Matrix& logits, Matrix& dlogits) {
    return kd_example(logits, batch[e].target, teacher_probs[e], lambda, &dlogits).total;
  };
  return backward(student, batch, loss);
}

LoraAdapter distill(const AdaptedModel& student_in, const LogitSource& teacher,
                    std::span<const SequencePair> public_set, const DistillConfig& config,
                    Rng& rng, DistillStats* stats) {
  config.validate();
  student_in.validate();
  check_vocab(student_in, teacher);
  AdaptedModel student = student_in;
  if (stats) *stats = {};
  if (config.iterations == 0) return student.adapter;
  if (public_set.empty()) throw ConfigError("distill: public dataset is empty");
  if (public_set.size() < config.data_size) {
    throw ConfigError("distill: public dataset has " + std::to_string(public_set.size()) +
                      " examples, kd_data_size is " + std::to_string(config.data_size));
  }

  std::vector<std::size_t> pool(public_set.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  rng.shuffle(pool);
  pool.resize(config.data_size);

  Optimizer opt(config.optimizer, student.adapter.tensors());
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (int it = 0; it < config.iterations; ++it) {
    std::vector<SequencePair> batch;
    while (batch.size() < std::min(config.batch_size, pool.size())) {
      if (cursor == order.size()) {
        order = pool;
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(public_set[order[cursor++]]);
    }
    const auto probs = teacher_distributions(teacher, batch);
    LossAndGrad lg = kd_backward(student, batch, probs, config.lambda);
    opt.step(student.adapter.tensors(), lg.grads, config.lr);
    if (stats) {
      if (it == 0) stats->first_loss = lg.loss;
      stats->last_loss = lg.loss;
      ++stats->steps;
    }
  }
  return student.adapter;
}

GradCheckReport finite_difference_check(std::span<double> x, std::span<const double> analytic,
                                         const std::function<double()>& f, double h,
                                         double floor) {
  ensure(x.size() == analytic.size(), "finite_difference_check: size mismatch");
  GradCheckReport rep;
  rep.coordinates = x.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f();
    x[i] = orig - h;
    const double fm = f();
    x[i] = orig;
    const double num = (fp - fm) / (2.0 * h);
    const double abs_err = std::abs(num - analytic[i]);
    const double rel = abs_err / std::max({std::abs(num), std::abs(analytic[i]), floor});
    rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst = i;
    }
  }
  return rep;
}

GradCheckReport kd_gradient_check(const AdaptedModel& student, const LogitSource& teacher,
                                  std::span<const SequencePair> batch, double lambda, double h) {
  check_vocab(student, teacher);
  const auto probs = teacher_distributions(teacher, batch);
  const LossAndGrad lg = kd_backward(student, batch, probs, lambda);
  AdaptedModel probe = student;
  auto f = [&] {
    const LossAndGrad v = kd_backward(probe, batch, probs, lambda);
    return v.loss;
  };
  return finite_difference_check(probe.adapter.tensors().flat(), lg.grads.flat(), f, h);
}

}  // namespace fedpt
