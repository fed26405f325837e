#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mopd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TokenId = std::uint8_t;

// 20 canonical amino acids followed by BOS and EOS. Ids are stable.
class Vocabulary {
 public:
  static constexpr std::size_t kNumAminoAcids = 20;
  static constexpr std::size_t kSize = 22;
  static constexpr TokenId kBos = 20;
  static constexpr TokenId kEos = 21;
  static constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWY";

  static constexpr std::size_t size() { return kSize; }
  static constexpr bool is_amino_acid(TokenId id) { return id < kNumAminoAcids; }
  static char symbol(TokenId id);
  static std::optional<TokenId> id_of(char symbol);
};

// Amino-acid body of a generated or natural protein. Never holds BOS/EOS.
class Sequence {
 public:
  Sequence() = default;
  explicit Sequence(std::vector<TokenId> tokens);

  static Sequence from_string(std::string_view letters);
  std::string to_string() const;

  std::span<const TokenId> tokens() const { return tokens_; }
  std::size_t length() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  TokenId operator[](std::size_t i) const { return tokens_[i]; }

  friend bool operator==(const Sequence&, const Sequence&) = default;

 private:
  std::vector<TokenId> tokens_;
};

// Conditioning context x. Empty for unconditional generation.
using Condition = std::vector<TokenId>;

// Natural-log next-token distribution with strictly positive mass everywhere.
class TokenDistribution {
 public:
  static constexpr double kNormTolerance = 1e-9;

  TokenDistribution() = default;
  // Validates normalization and finiteness.
  static TokenDistribution from_logprobs(std::vector<double> logprobs);
  static TokenDistribution from_probs(std::span<const double> probs);

  std::span<const double> logprobs() const { return logprobs_; }
  double logprob(std::size_t v) const { return logprobs_[v]; }
  std::vector<double> probs() const;
  std::size_t size() const { return logprobs_.size(); }

 private:
  std::vector<double> logprobs_;
};

struct Trajectory {
  Condition condition;
  Sequence body;
  // One entry per generated token plus the terminal EOS decision.
  std::vector<TokenDistribution> student_dists;
  // Per step, one distribution per teacher. Empty until targets are attached.
  std::vector<std::vector<TokenDistribution>> teacher_dists;
  bool terminated_by_eos = false;
  // Hash of the parameters that produced this rollout.
  std::uint64_t params_hash = 0;
};

double log_sum_exp(std::span<const double> values);
double kl_divergence(const TokenDistribution& p, const TokenDistribution& q);
TokenDistribution softmax_with_temperature(std::span<const double> logits, double temperature);

}  // namespace mopd
