#include "mopd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mopd/rng.hpp"

namespace mopd {

void check_simplex(std::span<const double> weights) {
  if (weights.empty()) throw Error("weight vector is empty");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error("teacher weights must be finite and non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw Error("teacher weights must sum to 1");
}

TeacherEnsemble::TeacherEnsemble(std::vector<PolicyParams> teachers, std::vector<double> weights,
                                 double teacher_temperature)
    : teachers_(std::move(teachers)), weights_(std::move(weights)), temperature_(teacher_temperature) {
  if (teachers_.empty()) throw Error("ensemble needs at least one teacher");
  if (teachers_.size() != weights_.size()) throw Error("ensemble: teacher/weight count mismatch");
  check_simplex(weights_);
  if (!(temperature_ > 0.0)) throw Error("teacher temperature must be positive");
}

std::vector<TokenDistribution> TeacherEnsemble::distributions(std::span<const TokenId> condition,
                                                              std::span<const TokenId> prefix) const {
  std::vector<TokenDistribution> out;
  out.reserve(teachers_.size());
  StepActivations act;
  for (const auto& t : teachers_) {
    forward(t, context_window(t.arch().context_width, condition, prefix), act);
    out.push_back(softmax_with_temperature(act.logits, temperature_));
  }
  return out;
}

double DisagreementTrace::mean() const {
  if (neg_z.empty()) return 0.0;
  return std::accumulate(neg_z.begin(), neg_z.end(), 0.0) / static_cast<double>(neg_z.size());
}

double DisagreementTrace::max() const {
  return neg_z.empty() ? 0.0 : *std::max_element(neg_z.begin(), neg_z.end());
}

// ---------------------------------------------------------------------------

namespace {

void check_beta(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw Error("beta must lie in [0, 1]");
}

// log(beta e^a + (1-beta) e^b) for 0 < beta < 1.
double log_mixture(double log_beta, double log_one_minus_beta, double a, double b) {
  if (a == b) return a;
  const double x = log_beta + a;
  const double y = log_one_minus_beta + b;
  const double hi = std::max(x, y);
  return hi + std::log(std::exp(x - hi) + std::exp(y - hi));
}

}  // namespace

double jsd_beta(const TokenDistribution& p, const TokenDistribution& q, double beta) {
  check_beta(beta);
  if (p.size() != q.size()) throw Error("jsd_beta: dimension mismatch");
  if (beta == 0.0 || beta == 1.0) return 0.0;
  const double lb = std::log(beta), l1b = std::log1p(-beta);
  double js = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    const double lp = p.logprob(v), lq = q.logprob(v);
    const double lm = log_mixture(lb, l1b, lp, lq);
    js += beta * std::exp(lp) * (lp - lm) + (1.0 - beta) * std::exp(lq) * (lq - lm);
  }
  return std::max(js, 0.0);
}

std::vector<double> jsd_gradient_wrt_student_logits(std::span<const double> student_logits,
                                                    const TokenDistribution& teacher, double beta) {
  check_beta(beta);
  const std::size_t n = student_logits.size();
  if (teacher.size() != n) throw Error("jsd gradient: dimension mismatch");
  std::vector<double> grad(n, 0.0);
  if (beta == 0.0 || beta == 1.0) return grad;
  const double lse = log_sum_exp(student_logits);
  const double lb = std::log(beta), l1b = std::log1p(-beta);
  // dJ/dp_v = beta * log(p_v / m_v); chain through softmax.
  std::vector<double> p(n), g(n);
  double mean_g = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double lp = student_logits[v] - lse;
    p[v] = std::exp(lp);
    g[v] = beta * (lp - log_mixture(lb, l1b, lp, teacher.logprob(v)));
    mean_g += p[v] * g[v];
  }
  for (std::size_t v = 0; v < n; ++v) grad[v] = p[v] * (g[v] - mean_g);
  return grad;
}

ConsensusStep poe_consensus(std::span<const TokenDistribution> teacher_dists, std::span<const double> weights) {
  if (teacher_dists.empty()) throw Error("poe_consensus: no teachers");
  if (teacher_dists.size() != weights.size()) throw Error("poe_consensus: teacher/weight count mismatch");
  check_simplex(weights);
  const std::size_t n = teacher_dists.front().size();
  for (std::size_t i = 0; i < teacher_dists.size(); ++i) {
    if (teacher_dists[i].size() != n) throw Error("poe_consensus: vocabulary mismatch");
    if (weights[i] == 1.0) return {teacher_dists[i], 0.0};
  }
  std::vector<double> acc(n, 0.0);
  for (std::size_t i = 0; i < teacher_dists.size(); ++i) {
    if (teacher_dists[i].size() != n) throw Error("poe_consensus: vocabulary mismatch");
    if (weights[i] == 0.0) continue;
    for (std::size_t v = 0; v < n; ++v) acc[v] += weights[i] * teacher_dists[i].logprob(v);
  }
  const double z = log_sum_exp(acc);
  for (double& a : acc) a -= z;
  return {TokenDistribution::from_logprobs(std::move(acc)), z};
}

double weighted_kl_objective(std::span<const double> q, std::span<const TokenDistribution> teacher_dists,
                             std::span<const double> weights) {
  double total = 0.0;
  for (std::size_t i = 0; i < teacher_dists.size(); ++i) {
    double kl = 0.0;
    for (std::size_t v = 0; v < q.size(); ++v) {
      if (q[v] > 0.0) kl += q[v] * (std::log(q[v]) - teacher_dists[i].logprob(v));
    }
    total += weights[i] * kl;
  }
  return total;
}

namespace {

// Visits every composition of `total` into q.size() non-negative parts.
template <class Fn>
void for_each_composition(std::vector<int>& parts, std::size_t index, int remaining, Fn&& fn) {
  if (index + 1 == parts.size()) {
    parts[index] = remaining;
    fn(parts);
    return;
  }
  for (int c = 0; c <= remaining; ++c) {
    parts[index] = c;
    for_each_composition(parts, index + 1, remaining - c, fn);
  }
}

int grid_resolution(std::size_t vocab) {
  switch (vocab) {
    case 1: return 1;
    case 2: return 400;
    case 3: return 80;
    case 4: return 32;
    case 5: return 20;
    default: return 14;
  }
}

}  // namespace

bool verify_consensus_optimality(std::span<const TokenDistribution> teacher_dists, std::span<const double> weights,
                                 std::size_t trials, std::uint64_t seed) {
  constexpr double kSlack = 1e-10;
  const auto consensus = poe_consensus(teacher_dists, weights);
  const std::size_t n = consensus.poe.size();
  if (n > 6) throw Error("verify_consensus_optimality supports vocabularies of at most 6 tokens");
  const auto poe = consensus.poe.probs();
  const double best = weighted_kl_objective(poe, teacher_dists, weights);

  bool ok = true;
  const int res = grid_resolution(n);
  std::vector<int> parts(n);
  std::vector<double> q(n);
  for_each_composition(parts, 0, res, [&](const std::vector<int>& c) {
    for (std::size_t v = 0; v < n; ++v) q[v] = static_cast<double>(c[v]) / res;
    if (weighted_kl_objective(q, teacher_dists, weights) < best - kSlack) ok = false;
  });

  Rng rng(seed, 0xD1);
  for (std::size_t t = 0; t < trials && ok; ++t) {
    double total = 0.0;
    for (auto& x : q) total += (x = rng.gamma(1.0));
    for (auto& x : q) x /= total;
    if (weighted_kl_objective(q, teacher_dists, weights) < best - kSlack) ok = false;
  }
  return ok;
}

// ---------------------------------------------------------------------------

namespace {

// Shared per-step loop. target_at(n, prefix) returns the step's target distribution.
template <class TargetFn>
OpdResult opd_loss_impl(const Trajectory& traj, const PolicyParams& student, double beta, TargetFn&& target_at) {
  check_beta(beta);
  OpdResult r;
  r.grad.assign(student.weights().size(), 0.0);
  r.student_hash = student.hash();
  r.on_policy = traj.params_hash == r.student_hash;
  const auto tokens = traj.body.tokens();
  StepActivations act;
  for (std::size_t n = 0; n <= tokens.size(); ++n) {
    const auto prefix = tokens.first(n);
    const auto window = context_window(student.arch().context_width, traj.condition, prefix);
    forward(student, window, act);
    const auto target = target_at(n, prefix);
    const auto ps = softmax_with_temperature(act.logits, 1.0);
    const double step = jsd_beta(ps, target, beta);
    r.step_losses.push_back(step);
    r.loss += step;
    const auto dlogits = jsd_gradient_wrt_student_logits(act.logits, target, beta);
    backward(student, window, act, dlogits, r.grad);
  }
  r.tokens = tokens.size() + 1;
  return r;
}

}  // namespace

OpdResult opd_loss_single(const Trajectory& traj, const PolicyParams& student, const PolicyParams& teacher,
                          double beta, double teacher_temperature) {
  StepActivations tact;
  return opd_loss_impl(traj, student, beta, [&](std::size_t, std::span<const TokenId> prefix) {
    forward(teacher, context_window(teacher.arch().context_width, traj.condition, prefix), tact);
    return softmax_with_temperature(tact.logits, teacher_temperature);
  });
}

OpdResult opd_loss_multi(const Trajectory& traj, const PolicyParams& student, const TeacherEnsemble& ensemble,
                         double beta) {
  const bool cached = !traj.teacher_dists.empty();
  if (cached && traj.teacher_dists.size() != traj.body.length() + 1) {
    throw Error("cached teacher distributions do not cover every step");
  }
  std::vector<double> neg_z;
  auto r = opd_loss_impl(traj, student, beta, [&](std::size_t n, std::span<const TokenId> prefix) {
    auto dists = cached ? traj.teacher_dists[n] : ensemble.distributions(traj.condition, prefix);
    if (dists.size() != ensemble.size()) throw Error("teacher distribution row has wrong teacher count");
    auto step = poe_consensus(dists, ensemble.weights());
    neg_z.push_back(-step.z);
    return std::move(step.poe);
  });
  r.trace.neg_z = std::move(neg_z);
  return r;
}

void attach_teacher_distributions(Trajectory& traj, const TeacherEnsemble& ensemble) {
  const auto tokens = traj.body.tokens();
  traj.teacher_dists.clear();
  for (std::size_t n = 0; n <= tokens.size(); ++n) {
    traj.teacher_dists.push_back(ensemble.distributions(traj.condition, tokens.first(n)));
  }
}

SftResult sft_loss(const PolicyParams& params, std::span<const Example> batch) {
  if (batch.empty()) throw Error("sft_loss: empty batch");
  SftResult r;
  r.grad.assign(params.weights().size(), 0.0);
  const double scale = -1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    r.loss += scale * accumulate_logprob_gradient(params, ex.condition, ex.target, scale, r.grad);
  }
  return r;
}

}  // namespace mopd
