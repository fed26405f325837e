#include "mopd/batch.hpp"

#include <algorithm>
#include <exception>

#include "mopd/eval.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mopd {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

// Runs fn(i) for i in [0, n). Items must write only to their own slot.
template <class Fn>
void for_items(std::size_t n, Execution exec, Fn&& fn) {
  if (exec == Execution::serial) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const auto count = static_cast<std::ptrdiff_t>(n);
  // Exceptions cannot cross the OpenMP region boundary.
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(mopd_batch_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

// Fixed-order reduction of per-item gradients.
void reduce_into(BatchGradient& out, std::span<const std::vector<double>> grads, std::span<const double> losses,
                 std::span<const std::size_t> tokens) {
  for (std::size_t i = 0; i < grads.size(); ++i) {
    out.loss_sum += losses[i];
    out.tokens += tokens[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < g.size(); ++j) out.grad[j] += g[j];
  }
}

}  // namespace

std::vector<Trajectory> sample_batch(const PolicyParams& params, std::span<const TokenId> condition,
                                     const SamplerConfig& cfg, std::uint64_t first_stream, std::size_t count,
                                     Execution exec) {
  cfg.validate(params.arch().vocab);
  std::vector<Trajectory> out(count);
  for_items(count, exec, [&](std::size_t i) { out[i] = sample_sequence(params, condition, cfg, first_stream + i); });
  return out;
}

BatchGradient opd_batch(const PolicyParams& student, const TeacherEnsemble& ensemble,
                        std::span<const Trajectory> trajectories, double beta, Execution exec) {
  const std::size_t n = trajectories.size();
  std::vector<OpdResult> results(n);
  for_items(n, exec, [&](std::size_t i) { results[i] = opd_loss_multi(trajectories[i], student, ensemble, beta); });

  BatchGradient out;
  out.grad.assign(student.weights().size(), 0.0);
  std::vector<std::vector<double>> grads(n);
  std::vector<double> losses(n);
  std::vector<std::size_t> tokens(n);
  for (std::size_t i = 0; i < n; ++i) {
    grads[i] = std::move(results[i].grad);
    losses[i] = results[i].loss;
    tokens[i] = results[i].tokens;
    out.neg_z.push_back(std::move(results[i].trace.neg_z));
    out.off_policy += results[i].on_policy ? 0 : 1;
  }
  reduce_into(out, grads, losses, tokens);
  return out;
}

BatchGradient nll_batch(const PolicyParams& params, std::span<const Example> batch, Execution exec) {
  const std::size_t n = batch.size();
  std::vector<std::vector<double>> grads(n);
  std::vector<double> losses(n);
  std::vector<std::size_t> tokens(n);
  for_items(n, exec, [&](std::size_t i) {
    grads[i].assign(params.weights().size(), 0.0);
    losses[i] = -accumulate_logprob_gradient(params, batch[i].condition, batch[i].target, -1.0, grads[i]);
    tokens[i] = batch[i].target.length() + 1;
  });
  BatchGradient out;
  out.grad.assign(params.weights().size(), 0.0);
  reduce_into(out, grads, losses, tokens);
  return out;
}

BatchGradient pg_batch(const PolicyParams& params, std::span<const TokenId> condition,
                       std::span<const Sequence> sequences, std::span<const double> advantages, Execution exec) {
  if (sequences.size() != advantages.size()) throw Error("pg_batch: sequence/advantage count mismatch");
  const std::size_t n = sequences.size();
  std::vector<std::vector<double>> grads(n);
  std::vector<double> losses(n);
  std::vector<std::size_t> tokens(n);
  for_items(n, exec, [&](std::size_t i) {
    grads[i].assign(params.weights().size(), 0.0);
    const double a = advantages[i];
    losses[i] = -a * accumulate_logprob_gradient(params, condition, sequences[i], -a, grads[i]);
    tokens[i] = sequences[i].length() + 1;
  });
  BatchGradient out;
  out.grad.assign(params.weights().size(), 0.0);
  reduce_into(out, grads, losses, tokens);
  return out;
}

std::vector<double> score_batch(Property p, std::span<const Sequence> sequences, Execution exec) {
  std::vector<double> out(sequences.size());
  for_items(sequences.size(), exec, [&](std::size_t i) { out[i] = score(p, sequences[i]).value; });
  return out;
}

std::vector<double> perplexity_batch(const PolicyParams& reference, std::span<const Sequence> sequences,
                                     Execution exec) {
  std::vector<double> out(sequences.size());
  for_items(sequences.size(), exec, [&](std::size_t i) { out[i] = perplexity(reference, sequences[i]); });
  return out;
}

std::vector<double> novelty_batch(std::span<const Sequence> sequences, std::span<const Sequence> reference,
                                  Execution exec) {
  std::vector<double> out(sequences.size());
  for_items(sequences.size(), exec, [&](std::size_t i) { out[i] = novelty(sequences[i], reference); });
  return out;
}

}  // namespace mopd
