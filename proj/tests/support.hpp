#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "mopd/core.hpp"
#include "mopd/distill.hpp"
#include "mopd/policy.hpp"
#include "mopd/rng.hpp"

namespace testing {

using mopd::Rng;
using mopd::TokenDistribution;

// Dirichlet(alpha) draw, floored away from zero.
inline std::vector<double> random_simplex(Rng& rng, std::size_t n, double alpha = 1.0) {
  std::vector<double> x(n);
  double total = 0.0;
  for (auto& v : x) {
    v = std::max(rng.gamma(alpha), 1e-12);
    total += v;
  }
  for (auto& v : x) v /= total;
  return x;
}

inline TokenDistribution random_dist(Rng& rng, std::size_t n, double alpha = 1.0) {
  return TokenDistribution::from_probs(random_simplex(rng, n, alpha));
}

inline std::vector<double> random_logits(Rng& rng, std::size_t n, double scale = 2.0) {
  std::vector<double> x(n);
  for (auto& v : x) v = scale * rng.normal();
  return x;
}

inline double max_tv(const std::vector<TokenDistribution>& ds) {
  double worst = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = i + 1; j < ds.size(); ++j) {
      const auto a = ds[i].probs();
      const auto b = ds[j].probs();
      double tv = 0.0;
      for (std::size_t v = 0; v < a.size(); ++v) tv += std::abs(a[v] - b[v]);
      worst = std::max(worst, 0.5 * tv);
    }
  }
  return worst;
}

inline bool close_rel(double a, double b, double rtol, double atol = 1e-9) {
  return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

// Central difference of f along coordinate i of x.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                 std::size_t i, double eps = 1e-5) {
  const double x0 = x[i];
  x[i] = x0 + eps;
  const double hi = f(x);
  x[i] = x0 - eps;
  const double lo = f(x);
  return (hi - lo) / (2.0 * eps);
}

// Fraction of `coords` where the analytic gradient matches central differences.
struct GradCheck {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst_rel = 0.0;
};

inline GradCheck check_gradient(const std::function<double(const std::vector<double>&)>& f,
                                const std::vector<double>& x, std::span<const double> grad,
                                const std::vector<std::size_t>& coords, double rtol = 1e-4, double atol = 1e-7) {
  GradCheck r;
  for (std::size_t i : coords) {
    const double fd = central_difference(f, x, i);
    ++r.checked;
    if (!close_rel(grad[i], fd, rtol, atol)) ++r.failed;
    const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-12});
    r.worst_rel = std::max(r.worst_rel, std::abs(grad[i] - fd) / denom);
  }
  return r;
}

inline std::vector<std::size_t> random_coords(Rng& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> c(count);
  for (auto& i : c) i = static_cast<std::size_t>(rng.below(n));
  return c;
}

// Parameters drawn at a scale where every layer, including the output layer,
// is non-trivial.
inline mopd::PolicyParams random_params(const mopd::Architecture& arch, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed, 99);
  std::vector<double> w(arch.parameter_count());
  for (auto& v : w) v = scale * rng.normal();
  return mopd::PolicyParams(arch, std::move(w));
}

inline mopd::Sequence random_sequence(Rng& rng, std::size_t len) {
  std::vector<mopd::TokenId> t(len);
  for (auto& v : t) v = static_cast<mopd::TokenId>(rng.below(mopd::Vocabulary::kNumAminoAcids));
  return mopd::Sequence(std::move(t));
}

// ---------------------------------------------------------------------------
// Mode seeking on an 8-symbol line. The teacher has two separated modes; the
// student family is a discretized Gaussian bump no wider than one mode, so it
// can cover one mode well or both modes badly.

inline constexpr std::size_t kLineSize = 8;

inline TokenDistribution bimodal_teacher() {
  std::vector<double> p = {0.15, 0.25, 0.15, 0.002, 0.002, 0.12, 0.21, 0.12};
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= total;
  return TokenDistribution::from_probs(p);
}

inline std::vector<std::size_t> mode_a() { return {0, 1, 2}; }
inline std::vector<std::size_t> mode_b() { return {5, 6, 7}; }

inline std::vector<double> bump_logits(double mu, double log_sharpness) {
  std::vector<double> l(kLineSize);
  const double a = std::exp(log_sharpness);
  for (std::size_t v = 0; v < kLineSize; ++v) l[v] = -a * (static_cast<double>(v) - mu) * (static_cast<double>(v) - mu);
  return l;
}

inline double mass(const std::vector<double>& p, const std::vector<std::size_t>& idx) {
  double m = 0.0;
  for (auto i : idx) m += p[i];
  return m;
}

struct FittedBump {
  double mu;
  double log_sharpness;
  std::vector<double> probs;
};

// Exhaustive grid search over the bump family.
inline FittedBump fit_bump(const std::function<double(const TokenDistribution&)>& loss) {
  FittedBump best{0.0, 0.0, {}};
  double best_loss = std::numeric_limits<double>::infinity();
  for (int i = -100; i <= 800; i += 2) {
    const double mu = 0.01 * i;
    for (int j = -7; j <= 30; ++j) {  // sharpness exp(s) >= 0.5
      const double s = 0.1 * j;
      const auto q = mopd::softmax_with_temperature(bump_logits(mu, s), 1.0);
      const double l = loss(q);
      if (l < best_loss) {
        best_loss = l;
        best = {mu, s, q.probs()};
      }
    }
  }
  return best;
}

struct ModeSeekingOutcome {
  double teacher_a, teacher_b;
  double jsd_a, jsd_b;
  double sft_a, sft_b;
  bool jsd_concentrates;  // JSD student's larger mode exceeds the teacher's mass on that mode
  bool sft_spreads;       // SFT student's smaller mode exceeds the JSD student's smaller mode
};

inline ModeSeekingOutcome mode_seeking_experiment(std::size_t sft_samples = 20000, std::uint64_t seed = 3) {
  const auto teacher = bimodal_teacher();
  const auto tp = teacher.probs();
  const auto jsd = fit_bump([&](const TokenDistribution& q) { return mopd::jsd_beta(q, teacher, 0.5); });

  // Maximum likelihood on teacher samples (forward KL to the empirical distribution).
  Rng rng(seed, 0);
  std::vector<double> counts(kLineSize, 0.0);
  for (std::size_t i = 0; i < sft_samples; ++i) counts[mopd::draw_categorical(tp, rng)] += 1.0;
  const auto sft = fit_bump([&](const TokenDistribution& q) {
    double nll = 0.0;
    for (std::size_t v = 0; v < kLineSize; ++v) nll -= counts[v] * q.logprob(v);
    return nll;
  });

  ModeSeekingOutcome o{};
  o.teacher_a = mass(tp, mode_a());
  o.teacher_b = mass(tp, mode_b());
  o.jsd_a = mass(jsd.probs, mode_a());
  o.jsd_b = mass(jsd.probs, mode_b());
  o.sft_a = mass(sft.probs, mode_a());
  o.sft_b = mass(sft.probs, mode_b());
  const bool a_major = o.jsd_a >= o.jsd_b;
  o.jsd_concentrates = a_major ? o.jsd_a > o.teacher_a : o.jsd_b > o.teacher_b;
  o.sft_spreads = std::min(o.sft_a, o.sft_b) > std::min(o.jsd_a, o.jsd_b);
  return o;
}

}  // namespace testing
