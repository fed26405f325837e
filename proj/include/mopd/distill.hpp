#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mopd/core.hpp"
#include "mopd/policy.hpp"

namespace mopd {

class TeacherEnsemble {
 public:
  static constexpr double kDefaultTemperature = 0.7;

  TeacherEnsemble(std::vector<PolicyParams> teachers, std::vector<double> weights,
                  double teacher_temperature = kDefaultTemperature);

  std::size_t size() const { return teachers_.size(); }
  const std::vector<PolicyParams>& teachers() const { return teachers_; }
  std::span<const double> weights() const { return weights_; }
  double temperature() const { return temperature_; }

  // Each teacher's next-token distribution at its temperature.
  std::vector<TokenDistribution> distributions(std::span<const TokenId> condition,
                                               std::span<const TokenId> prefix) const;

 private:
  std::vector<PolicyParams> teachers_;
  std::vector<double> weights_;
  double temperature_;
};

// Validates a simplex weight vector (non-negative, sums to 1 within 1e-12).
void check_simplex(std::span<const double> weights);

struct ConsensusStep {
  TokenDistribution poe;
  double z;  // log normalizer, <= 0
};

struct DisagreementTrace {
  std::vector<double> neg_z;  // one entry per step, >= 0

  double mean() const;
  double max() const;
};

// beta * KL(p||m) + (1-beta) * KL(q||m), m = beta p + (1-beta) q.
double jsd_beta(const TokenDistribution& p, const TokenDistribution& q, double beta);

// d JSD_beta(softmax(logits) || teacher) / d logits.
std::vector<double> jsd_gradient_wrt_student_logits(std::span<const double> student_logits,
                                                    const TokenDistribution& teacher, double beta);

// Normalized weighted geometric mean: softmax(sum_i w_i log p_i), z = logsumexp of the same.
ConsensusStep poe_consensus(std::span<const TokenDistribution> teacher_dists, std::span<const double> weights);

// Objective minimized by the consensus target: sum_i w_i KL(q || p_i).
double weighted_kl_objective(std::span<const double> q, std::span<const TokenDistribution> teacher_dists,
                             std::span<const double> weights);

// Brute-force check that the PoE target minimizes the weighted-KL objective
// against a dense simplex grid plus `trials` Dirichlet(1) draws. |V| <= 6.
bool verify_consensus_optimality(std::span<const TokenDistribution> teacher_dists, std::span<const double> weights,
                                 std::size_t trials, std::uint64_t seed = 0);

struct OpdResult {
  double loss = 0.0;                 // sum over steps of JSD_beta
  std::size_t tokens = 0;            // number of steps (body length + 1)
  std::vector<double> grad;          // d loss / d student params
  std::vector<double> step_losses;
  DisagreementTrace trace;           // empty for a single teacher
  std::uint64_t student_hash = 0;    // parameters the loss was evaluated at
  bool on_policy = false;            // trajectory came from these parameters
};

OpdResult opd_loss_single(const Trajectory& traj, const PolicyParams& student, const PolicyParams& teacher,
                          double beta, double teacher_temperature = 1.0);

// Uses cached traj.teacher_dists when present, otherwise evaluates the ensemble.
OpdResult opd_loss_multi(const Trajectory& traj, const PolicyParams& student, const TeacherEnsemble& ensemble,
                         double beta);

// Fills traj.teacher_dists from the ensemble at every visited prefix.
void attach_teacher_distributions(Trajectory& traj, const TeacherEnsemble& ensemble);

struct Example {
  Condition condition;
  Sequence target;
};

struct SftResult {
  double loss = 0.0;  // mean negative log-likelihood per sequence
  std::vector<double> grad;
};

SftResult sft_loss(const PolicyParams& params, std::span<const Example> batch);

}  // namespace mopd
