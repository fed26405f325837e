#pragma once

// Batch kernels over independent rollouts / sequences. Every kernel has a
// serial reference path and an OpenMP path; per-item results are computed
// independently and reduced in index order, so both paths are bit-identical.

#include <cstdint>
#include <span>
#include <vector>

#include "mopd/core.hpp"
#include "mopd/distill.hpp"
#include "mopd/oracles.hpp"
#include "mopd/policy.hpp"

namespace mopd {

enum class Execution { serial, parallel };

// Rollout i uses RNG stream first_stream + i.
std::vector<Trajectory> sample_batch(const PolicyParams& params, std::span<const TokenId> condition,
                                     const SamplerConfig& cfg, std::uint64_t first_stream, std::size_t count,
                                     Execution exec = Execution::parallel);

struct BatchGradient {
  double loss_sum = 0.0;
  std::size_t tokens = 0;
  std::vector<double> grad;                   // summed over items
  std::vector<std::vector<double>> neg_z;     // per trajectory, multi-teacher only
  std::size_t off_policy = 0;                 // trajectories not sampled from the evaluated params
};

BatchGradient opd_batch(const PolicyParams& student, const TeacherEnsemble& ensemble,
                        std::span<const Trajectory> trajectories, double beta, Execution exec = Execution::parallel);

// Sum over items of -log p(y|x) and its gradient.
BatchGradient nll_batch(const PolicyParams& params, std::span<const Example> batch,
                        Execution exec = Execution::parallel);

// Sum over items of -advantage_i * log p(y_i|x) and its gradient.
BatchGradient pg_batch(const PolicyParams& params, std::span<const TokenId> condition,
                       std::span<const Sequence> sequences, std::span<const double> advantages,
                       Execution exec = Execution::parallel);

std::vector<double> score_batch(Property p, std::span<const Sequence> sequences,
                                Execution exec = Execution::parallel);

std::vector<double> perplexity_batch(const PolicyParams& reference, std::span<const Sequence> sequences,
                                     Execution exec = Execution::parallel);

std::vector<double> novelty_batch(std::span<const Sequence> sequences, std::span<const Sequence> reference,
                                  Execution exec = Execution::parallel);

int max_threads();

}  // namespace mopd
