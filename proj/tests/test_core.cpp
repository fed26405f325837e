#include <cmath>
#include <numbers>

#include "doctest.h"
#include "mopd/core.hpp"
#include "support.hpp"

using namespace mopd;

TEST_CASE("vocabulary ids are bijective with symbols") {
  for (TokenId id = 0; id < Vocabulary::kNumAminoAcids; ++id) {
    const char c = Vocabulary::symbol(id);
    REQUIRE(Vocabulary::id_of(c).has_value());
    CHECK(*Vocabulary::id_of(c) == id);
  }
  CHECK_FALSE(Vocabulary::id_of('X').has_value());
  CHECK(Vocabulary::size() == 22);
  CHECK_FALSE(Vocabulary::is_amino_acid(Vocabulary::kBos));
  CHECK_FALSE(Vocabulary::is_amino_acid(Vocabulary::kEos));
}

TEST_CASE("sequences reject special tokens and round-trip through text") {
  const auto s = Sequence::from_string("ACDEFGHIKLMNPQRSTVWY");
  CHECK(s.length() == 20);
  CHECK(s.to_string() == "ACDEFGHIKLMNPQRSTVWY");
  CHECK_THROWS_AS(Sequence::from_string("ACXD"), Error);
  CHECK_THROWS_AS(Sequence(std::vector<TokenId>{0, Vocabulary::kEos}), Error);
  CHECK_THROWS_AS(Sequence(std::vector<TokenId>{Vocabulary::kBos}), Error);
}

TEST_CASE("log_sum_exp examples") {
  const std::vector<double> a = {0.0, 0.0};
  CHECK(log_sum_exp(a) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  const std::vector<double> b = {-1000.0, -1000.0};
  CHECK(log_sum_exp(b) == doctest::Approx(-1000.0 + std::numbers::ln2).epsilon(1e-15));
  const std::vector<double> c = {std::log(0.3), std::log(0.7)};
  CHECK(std::abs(log_sum_exp(c)) < 1e-15);
  CHECK_THROWS_AS(log_sum_exp(std::vector<double>{}), Error);
}

TEST_CASE("log_sum_exp is shift equivariant") {
  Rng rng(1, 0);
  for (int t = 0; t < 200; ++t) {
    auto x = testing::random_logits(rng, 1 + rng.below(30), 5.0);
    const double c = 100.0 * (rng.uniform() - 0.5);
    auto y = x;
    for (auto& v : y) v += c;
    CHECK(std::abs(log_sum_exp(y) - (log_sum_exp(x) + c)) < 1e-12);
  }
}

TEST_CASE("token distributions validate normalization and finiteness") {
  CHECK_NOTHROW(TokenDistribution::from_logprobs({std::log(0.25), std::log(0.75)}));
  CHECK_THROWS_AS(TokenDistribution::from_logprobs({std::log(0.25), std::log(0.70)}), Error);
  CHECK_THROWS_AS(TokenDistribution::from_logprobs({0.0, -INFINITY}), Error);
  CHECK_THROWS_AS(TokenDistribution::from_logprobs({NAN, 0.0}), Error);
  Rng rng(2, 0);
  for (int t = 0; t < 500; ++t) {
    const auto d = testing::random_dist(rng, 2 + rng.below(21), 0.3);
    double total = 0.0;
    for (double lp : d.logprobs()) total += std::exp(lp);
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("kl divergence examples") {
  const auto p = TokenDistribution::from_probs(std::vector<double>{0.9, 0.1});
  const auto q = TokenDistribution::from_probs(std::vector<double>{0.5, 0.5});
  CHECK(kl_divergence(p, p) == 0.0);
  // 0.9 log 1.8 + 0.1 log 0.2
  CHECK(kl_divergence(p, q) == doctest::Approx(0.3680642071684971).epsilon(1e-12));
  CHECK(std::abs(kl_divergence(p, q) - kl_divergence(q, p)) > 1e-3);
  const auto r = TokenDistribution::from_probs(std::vector<double>{0.2, 0.3, 0.5});
  CHECK_THROWS_AS(kl_divergence(p, r), Error);
}

TEST_CASE("kl divergence is non-negative and zero on equal arguments") {
  Rng rng(3, 0);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.below(21);
    const auto p = testing::random_dist(rng, n, 0.5);
    const auto q = testing::random_dist(rng, n, 0.5);
    CHECK(kl_divergence(p, q) >= 0.0);
    CHECK(std::abs(kl_divergence(p, p)) < 1e-12);
  }
}

TEST_CASE("softmax with temperature examples") {
  const std::vector<double> flat = {1.5, 1.5, 1.5, 1.5};
  for (double t : {0.1, 1.0, 7.0}) {
    for (double p : softmax_with_temperature(flat, t).probs()) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
  }
  const std::vector<double> two = {2.0, 0.0};
  const auto d = softmax_with_temperature(two, 1.0).probs();
  CHECK(d[0] == doctest::Approx(0.8807970779778823).epsilon(1e-14));
  CHECK(d[1] == doctest::Approx(0.11920292202211755).epsilon(1e-13));
  double prev = 1.0;
  for (double t : {1.0, 2.0, 4.0, 16.0, 256.0, 65536.0}) {
    const double top = softmax_with_temperature(two, t).probs()[0];
    CHECK(top < prev);
    CHECK(top > 0.5);
    prev = top;
  }
  CHECK(prev == doctest::Approx(0.5).epsilon(1e-4));
  CHECK_THROWS_AS(softmax_with_temperature(two, 0.0), Error);
  CHECK_THROWS_AS(softmax_with_temperature(two, -1.0), Error);
}

TEST_CASE("softmax is shift invariant") {
  Rng rng(4, 0);
  for (int t = 0; t < 200; ++t) {
    const auto x = testing::random_logits(rng, 2 + rng.below(21), 3.0);
    auto y = x;
    const double c = 50.0 * (rng.uniform() - 0.5);
    for (auto& v : y) v += c;
    const double temp = 0.2 + 2.0 * rng.uniform();
    const auto a = softmax_with_temperature(x, temp).probs();
    const auto b = softmax_with_temperature(y, temp).probs();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  }
}
