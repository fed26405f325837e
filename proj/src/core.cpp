#include "mopd/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mopd {

char Vocabulary::symbol(TokenId id) {
  if (id < kNumAminoAcids) return kAminoAcids[id];
  if (id == kBos) return '^';
  if (id == kEos) return '$';
  throw Error("token id out of range: " + std::to_string(int(id)));
}

std::optional<TokenId> Vocabulary::id_of(char symbol) {
  auto pos = kAminoAcids.find(symbol);
  if (pos == std::string_view::npos) return std::nullopt;
  return static_cast<TokenId>(pos);
}

Sequence::Sequence(std::vector<TokenId> tokens) : tokens_(std::move(tokens)) {
  for (TokenId t : tokens_) {
    if (!Vocabulary::is_amino_acid(t)) {
      throw Error("sequence contains non amino-acid token " + std::to_string(int(t)));
    }
  }
}

Sequence Sequence::from_string(std::string_view letters) {
  std::vector<TokenId> tokens;
  tokens.reserve(letters.size());
  for (char c : letters) {
    auto id = Vocabulary::id_of(c);
    if (!id) throw Error(std::string("unknown amino-acid symbol '") + c + "'");
    tokens.push_back(*id);
  }
  return Sequence(std::move(tokens));
}

std::string Sequence::to_string() const {
  std::string out;
  out.reserve(tokens_.size());
  for (TokenId t : tokens_) out.push_back(Vocabulary::symbol(t));
  return out;
}

TokenDistribution TokenDistribution::from_logprobs(std::vector<double> logprobs) {
  if (logprobs.empty()) throw Error("empty token distribution");
  double total = 0.0;
  for (double lp : logprobs) {
    if (!std::isfinite(lp)) throw Error("token distribution has non-finite log-probability");
    total += std::exp(lp);
  }
  if (std::abs(total - 1.0) > kNormTolerance) {
    throw Error("token distribution not normalized (mass " + std::to_string(total) + ")");
  }
  TokenDistribution d;
  d.logprobs_ = std::move(logprobs);
  return d;
}

TokenDistribution TokenDistribution::from_probs(std::span<const double> probs) {
  std::vector<double> lp(probs.size());
  std::transform(probs.begin(), probs.end(), lp.begin(), [](double p) { return std::log(p); });
  return from_logprobs(std::move(lp));
}

std::vector<double> TokenDistribution::probs() const {
  std::vector<double> p(logprobs_.size());
  std::transform(logprobs_.begin(), logprobs_.end(), p.begin(), [](double lp) { return std::exp(lp); });
  return p;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw Error("log_sum_exp of empty input");
  const double hi = *std::max_element(values.begin(), values.end());
  if (hi == -std::numeric_limits<double>::infinity()) return hi;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

double kl_divergence(const TokenDistribution& p, const TokenDistribution& q) {
  if (p.size() != q.size()) throw Error("kl_divergence: dimension mismatch");
  double kl = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    kl += std::exp(p.logprob(v)) * (p.logprob(v) - q.logprob(v));
  }
  // Rounding can leave a tiny negative residue when p == q.
  return std::max(kl, 0.0);
}

TokenDistribution softmax_with_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw Error("softmax temperature must be positive");
  if (logits.empty()) throw Error("softmax of empty logits");
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw Error("softmax: non-finite logit");
    scaled[i] = logits[i] / temperature;
  }
  const double lse = log_sum_exp(scaled);
  for (double& s : scaled) s -= lse;
  return TokenDistribution::from_logprobs(std::move(scaled));
}

}  // namespace mopd
