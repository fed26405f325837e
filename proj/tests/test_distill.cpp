#include <cmath>

#include "doctest.h"
#include "mopd/distill.hpp"
#include "support.hpp"

using namespace mopd;

namespace {

const Architecture kToy{2, 3, 4, Vocabulary::kSize};

TokenDistribution dist(std::vector<double> p) { return TokenDistribution::from_probs(p); }

std::vector<double> weights_of(Rng& rng, std::size_t m) { return testing::random_simplex(rng, m); }

Trajectory trajectory_for(const PolicyParams& p, const Sequence& body) {
  Trajectory t;
  t.body = body;
  t.params_hash = p.hash();
  return t;
}

}  // namespace

TEST_CASE("jsd_beta worked examples") {
  const auto p = dist({1.0 - 1e-15, 1e-15});
  const auto q = dist({1e-15, 1.0 - 1e-15});
  CHECK(jsd_beta(p, q, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-10));
  // Disjoint supports give the binary entropy of beta.
  const double b = 0.3;
  CHECK(jsd_beta(p, q, b) == doctest::Approx(-b * std::log(b) - (1 - b) * std::log(1 - b)).epsilon(1e-10));

  Rng rng(31, 0);
  const auto a = testing::random_dist(rng, 6);
  const auto c = testing::random_dist(rng, 6);
  CHECK(jsd_beta(a, c, 0.0) == 0.0);
  CHECK(jsd_beta(a, c, 1.0) == 0.0);
  CHECK(jsd_beta(a, a, 0.5) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(jsd_beta(a, c, 1.5), Error);
  CHECK_THROWS_AS(jsd_beta(a, testing::random_dist(rng, 5), 0.5), Error);
}

TEST_CASE("jsd_beta symmetry and bounds") {
  Rng rng(32, 0);
  for (int t = 0; t < 500; ++t) {
    const auto p = testing::random_dist(rng, 2 + rng.below(20), 0.5);
    const auto q = testing::random_dist(rng, p.size(), 0.5);
    const double beta = rng.uniform();
    const double j = jsd_beta(p, q, beta);
    CHECK(j >= 0.0);
    CHECK(j <= -beta * std::log(beta) - (1 - beta) * std::log(1 - beta) + 1e-12);
    CHECK(std::abs(j - jsd_beta(q, p, 1.0 - beta)) < 1e-12);
  }
}

TEST_CASE("jsd gradient with respect to student logits") {
  Rng rng(33, 0);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(21);
    const auto logits = testing::random_logits(rng, n);
    const auto teacher = testing::random_dist(rng, n);
    const double beta = 0.05 + 0.9 * rng.uniform();
    const auto grad = jsd_gradient_wrt_student_logits(logits, teacher, beta);
    double sum = 0.0;
    for (double g : grad) sum += g;
    CHECK(std::abs(sum) < 1e-12);
    auto f = [&](const std::vector<double>& l) { return jsd_beta(softmax_with_temperature(l, 1.0), teacher, beta); };
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    CHECK(testing::check_gradient(f, logits, grad, coords, 1e-5, 1e-8).failed == 0);
  }
  const std::vector<double> l = {0.1, 0.2};
  for (double g : jsd_gradient_wrt_student_logits(l, dist({0.3, 0.7}), 0.0)) CHECK(g == 0.0);
}

TEST_CASE("product-of-experts consensus worked examples") {
  // Two teachers on two tokens with weights 1/2: geometric mean sqrt(.9*.4), sqrt(.1*.6).
  const std::vector<TokenDistribution> ts = {dist({0.9, 0.1}), dist({0.4, 0.6})};
  const std::vector<double> w = {0.5, 0.5};
  const auto c = poe_consensus(ts, w);
  CHECK(c.z == doctest::Approx(std::log(0.6 + std::sqrt(0.06))).epsilon(1e-14));
  CHECK(c.poe.probs()[0] == doctest::Approx(0.6 / (0.6 + std::sqrt(0.06))).epsilon(1e-14));

  const std::vector<TokenDistribution> one = {dist({0.2, 0.3, 0.5})};
  const std::vector<double> w1 = {1.0};
  const auto c1 = poe_consensus(one, w1);
  CHECK(std::abs(c1.z) < 1e-15);
  for (std::size_t v = 0; v < 3; ++v) CHECK(c1.poe.probs()[v] == doctest::Approx(one[0].probs()[v]).epsilon(1e-14));

  const std::vector<double> bad = {0.6, 0.6};
  CHECK_THROWS_AS(poe_consensus(ts, bad), Error);
  const std::vector<double> neg = {1.5, -0.5};
  CHECK_THROWS_AS(poe_consensus(ts, neg), Error);
}

TEST_CASE("consensus normalizer is non-positive and zero only under agreement") {
  Rng rng(34, 0);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = 2 + rng.below(4);
    const std::size_t n = 2 + rng.below(21);
    std::vector<TokenDistribution> ts;
    for (std::size_t i = 0; i < m; ++i) ts.push_back(testing::random_dist(rng, n, 0.7));
    const auto w = weights_of(rng, m);
    const auto c = poe_consensus(ts, w);
    CHECK(c.z <= 1e-12);
    // Strictly negative unless the teachers coincide.
    if (testing::max_tv(ts) > 1e-3) CHECK(c.z < 0.0);
    const auto same = std::vector<TokenDistribution>(m, ts[0]);
    CHECK(std::abs(poe_consensus(same, w).z) < 1e-12);
  }
}

TEST_CASE("consensus target minimizes the weighted reverse KL") {
  Rng rng(35, 0);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = 2 + rng.below(3);
    const std::size_t n = 2 + rng.below(4);
    std::vector<TokenDistribution> ts;
    for (std::size_t i = 0; i < m; ++i) ts.push_back(testing::random_dist(rng, n));
    const auto w = weights_of(rng, m);
    CHECK(verify_consensus_optimality(ts, w, 200, t));
  }
  SUBCASE("small perturbations of the target do worse") {
    const std::vector<TokenDistribution> ts = {dist({0.5, 0.3, 0.2}), dist({0.1, 0.3, 0.6})};
    const std::vector<double> w = {0.4, 0.6};
    const auto q = poe_consensus(ts, w).poe.probs();
    const double best = weighted_kl_objective(q, ts, w);
    for (std::size_t a = 0; a < 3; ++a) {
      for (std::size_t b = 0; b < 3; ++b) {
        if (a == b) continue;
        auto r = q;
        r[a] += 1e-3;
        r[b] -= 1e-3;
        CHECK(weighted_kl_objective(r, ts, w) > best);
      }
    }
  }
}

TEST_CASE("consensus moves toward a teacher as its weight grows") {
  const std::vector<TokenDistribution> ts = {dist({0.7, 0.2, 0.1}), dist({0.1, 0.3, 0.6})};
  double prev_kl = INFINITY;
  for (int i = 0; i <= 10; ++i) {
    const double w0 = 0.1 * i;
    const std::vector<double> w = {w0, 1.0 - w0};
    const auto c = poe_consensus(ts, w);
    const double kl = kl_divergence(c.poe, ts[0]);
    CHECK(kl <= prev_kl + 1e-12);
    prev_kl = kl;
  }
  CHECK(prev_kl < 1e-12);
}

TEST_CASE("ensemble validation") {
  const auto p = PolicyParams::random(kToy, 1);
  CHECK_THROWS_AS(TeacherEnsemble({}, {}), Error);
  CHECK_THROWS_AS(TeacherEnsemble({p, p}, {1.0}), Error);
  CHECK_THROWS_AS(TeacherEnsemble({p, p}, {0.7, 0.7}), Error);
  CHECK_THROWS_AS(TeacherEnsemble({p}, {1.0}, 0.0), Error);
  const TeacherEnsemble e({p, p}, {0.5, 0.5}, 0.7);
  const auto d = e.distributions({}, {});
  REQUIRE(d.size() == 2);
  const auto direct = softmax_with_temperature(next_token_logits(p, {}, {}), 0.7);
  for (std::size_t v = 0; v < Vocabulary::kSize; ++v) CHECK(d[0].logprob(v) == direct.logprob(v));
}

TEST_CASE("distillation loss") {
  const auto student = testing::random_params(kToy, 51);
  const auto t1 = testing::random_params(kToy, 52);
  const auto t2 = testing::random_params(kToy, 53);
  const auto body = Sequence::from_string("ACDKLV");
  const auto traj = trajectory_for(student, body);

  SUBCASE("single-teacher multi run matches the single-teacher loss") {
    const TeacherEnsemble one({t1}, {1.0}, 0.7);
    const auto a = opd_loss_single(traj, student, t1, 0.5, 0.7);
    const auto b = opd_loss_multi(traj, student, one, 0.5);
    CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
    for (std::size_t i = 0; i < a.grad.size(); ++i) CHECK(std::abs(a.grad[i] - b.grad[i]) < 1e-12);
    for (double nz : b.trace.neg_z) CHECK(std::abs(nz) < 1e-12);
    CHECK(a.tokens == body.length() + 1);
    CHECK(a.on_policy);
  }
  SUBCASE("loss is the sum of per-step divergences to the consensus") {
    const TeacherEnsemble ens({t1, t2}, {0.3, 0.7}, 0.7);
    const auto r = opd_loss_multi(traj, student, ens, 0.5);
    double total = 0.0;
    for (std::size_t n = 0; n <= body.length(); ++n) {
      const auto prefix = body.tokens().first(n);
      const auto ps = softmax_with_temperature(next_token_logits(student, {}, prefix), 1.0);
      const auto c = poe_consensus(ens.distributions({}, prefix), ens.weights());
      const double step = jsd_beta(ps, c.poe, 0.5);
      CHECK(r.step_losses[n] == doctest::Approx(step).epsilon(1e-12));
      CHECK(r.trace.neg_z[n] == doctest::Approx(-c.z).epsilon(1e-12));
      CHECK(r.trace.neg_z[n] > 0.0);
      total += step;
    }
    CHECK(r.loss == doctest::Approx(total).epsilon(1e-12));
  }
  SUBCASE("cached teacher distributions give the same result") {
    const TeacherEnsemble ens({t1, t2}, {0.5, 0.5}, 0.7);
    auto cached = traj;
    attach_teacher_distributions(cached, ens);
    CHECK(cached.teacher_dists.size() == body.length() + 1);
    const auto a = opd_loss_multi(traj, student, ens, 0.5);
    const auto b = opd_loss_multi(cached, student, ens, 0.5);
    CHECK(a.loss == b.loss);
    CHECK(a.grad == b.grad);
    cached.teacher_dists.pop_back();
    CHECK_THROWS_AS(opd_loss_multi(cached, student, ens, 0.5), Error);
  }
  SUBCASE("identical teachers leave no disagreement") {
    const TeacherEnsemble ens({t1, t1, t1}, {0.2, 0.3, 0.5}, 0.7);
    const auto r = opd_loss_multi(traj, student, ens, 0.5);
    CHECK(r.trace.max() < 1e-12);
    const auto s = opd_loss_single(traj, student, t1, 0.5, 0.7);
    CHECK(r.loss == doctest::Approx(s.loss).epsilon(1e-10));
  }
  SUBCASE("off-policy trajectories are flagged") {
    auto other = traj;
    other.params_hash = t1.hash();
    CHECK_FALSE(opd_loss_single(other, student, t1, 0.5).on_policy);
  }
  SUBCASE("gradient matches finite differences") {
    const TeacherEnsemble ens({t1, t2}, {0.4, 0.6}, 0.7);
    const auto r = opd_loss_multi(traj, student, ens, 0.5);
    auto f = [&](const std::vector<double>& w) { return opd_loss_multi(traj, PolicyParams(kToy, w), ens, 0.5).loss; };
    const std::vector<double> w(student.weights().begin(), student.weights().end());
    std::vector<std::size_t> coords(w.size());
    std::iota(coords.begin(), coords.end(), 0);
    const auto check = testing::check_gradient(f, w, r.grad, coords);
    CHECK(check.failed == 0);
  }
}

TEST_CASE("student equal to the teacher is a fixed point") {
  const auto t = testing::random_params(kToy, 61);
  const auto r = opd_loss_single(trajectory_for(t, Sequence::from_string("KLMN")), t, t, 0.5, 1.0);
  CHECK(r.loss < 1e-14);
  for (double g : r.grad) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("sft loss") {
  const auto p = testing::random_params(kToy, 71);
  const std::vector<Example> batch = {{{}, Sequence::from_string("ACD")}, {{}, Sequence::from_string("KKLV")}};
  const auto r = sft_loss(p, batch);
  const double expected = -(sequence_logprob(p, {}, batch[0].target) + sequence_logprob(p, {}, batch[1].target)) / 2;
  CHECK(r.loss == doctest::Approx(expected).epsilon(1e-13));

  const PolicyParams zero(kToy);
  CHECK(sft_loss(zero, batch).loss == doctest::Approx(-4.5 * std::log(1.0 / 22)).epsilon(1e-13));

  auto f = [&](const std::vector<double>& w) { return sft_loss(PolicyParams(kToy, w), batch).loss; };
  const std::vector<double> w(p.weights().begin(), p.weights().end());
  std::vector<std::size_t> coords(w.size());
  std::iota(coords.begin(), coords.end(), 0);
  CHECK(testing::check_gradient(f, w, r.grad, coords).failed == 0);
  CHECK_THROWS_AS(sft_loss(p, std::span<const Example>{}), Error);
}

TEST_CASE("divergence fitting seeks a mode while likelihood fitting spreads") {
  const auto o = testing::mode_seeking_experiment();
  INFO("teacher " << o.teacher_a << "/" << o.teacher_b << " jsd " << o.jsd_a << "/" << o.jsd_b << " sft " << o.sft_a
                  << "/" << o.sft_b);
  CHECK(o.jsd_concentrates);
  CHECK(o.sft_spreads);
  CHECK(std::max(o.jsd_a, o.jsd_b) > 0.9);
}
