#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "mopd/core.hpp"

namespace mopd {

// Fixed-window autoregressive model:
//   window of k tokens -> embedding lookup -> tanh hidden layer -> linear logits.
struct Architecture {
  std::size_t context_width = 8;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 64;
  std::size_t vocab = Vocabulary::kSize;

  std::size_t parameter_count() const {
    return vocab * embed_dim + context_width * embed_dim * hidden_dim + hidden_dim + hidden_dim * vocab + vocab;
  }
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

class PolicyParams {
 public:
  PolicyParams() = default;
  explicit PolicyParams(Architecture arch);  // zero weights
  PolicyParams(Architecture arch, std::vector<double> weights);

  // Small Gaussian initialization; output layer starts at zero.
  static PolicyParams random(Architecture arch, std::uint64_t seed, double scale = 0.1);

  const Architecture& arch() const { return arch_; }
  std::span<const double> weights() const { return weights_; }
  std::span<double> mutable_weights() { return weights_; }

  // Layout: embedding [vocab x embed] | w1 [(k*embed) x hidden] | b1 [hidden] | w2 [hidden x vocab] | b2 [vocab]
  std::size_t embedding_offset() const { return 0; }
  std::size_t w1_offset() const { return arch_.vocab * arch_.embed_dim; }
  std::size_t b1_offset() const { return w1_offset() + arch_.context_width * arch_.embed_dim * arch_.hidden_dim; }
  std::size_t w2_offset() const { return b1_offset() + arch_.hidden_dim; }
  std::size_t b2_offset() const { return w2_offset() + arch_.hidden_dim * arch_.vocab; }

  // Seeds that produced this parameter vector, oldest first.
  const std::vector<std::uint64_t>& lineage() const { return lineage_; }
  void append_lineage(std::uint64_t seed) { lineage_.push_back(seed); }
  void set_lineage(std::vector<std::uint64_t> lineage) { lineage_ = std::move(lineage); }

  // FNV-1a over the raw bytes of the weights.
  std::uint64_t hash() const;

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

 private:
  Architecture arch_;
  std::vector<double> weights_;
  std::vector<std::uint64_t> lineage_;
};

// Last k tokens of  condition ++ [BOS] ++ prefix, left-padded with BOS.
std::vector<TokenId> context_window(std::size_t k, std::span<const TokenId> condition, std::span<const TokenId> prefix);

struct StepActivations {
  std::vector<double> hidden;
  std::vector<double> logits;
};

void forward(const PolicyParams& params, std::span<const TokenId> window, StepActivations& out);
// Accumulates d(loss)/d(params) given d(loss)/d(logits) for one step.
void backward(const PolicyParams& params, std::span<const TokenId> window, const StepActivations& act,
              std::span<const double> dlogits, std::span<double> grad);

std::vector<double> next_token_logits(const PolicyParams& params, std::span<const TokenId> condition,
                                      std::span<const TokenId> prefix);

// Per-step log-probabilities of y_1..y_N and the closing EOS.
std::vector<double> step_logprobs(const PolicyParams& params, std::span<const TokenId> condition, const Sequence& y);

// log p(y|x) including the EOS step.
double sequence_logprob(const PolicyParams& params, std::span<const TokenId> condition, const Sequence& y);

// grad += scale * d log p(y|x) / d params. Returns log p(y|x).
double accumulate_logprob_gradient(const PolicyParams& params, std::span<const TokenId> condition, const Sequence& y,
                                   double scale, std::span<double> grad);

std::vector<double> logprob_gradient(const PolicyParams& params, std::span<const TokenId> condition, const Sequence& y);

// ---------------------------------------------------------------------------
// Sampling

struct SamplerConfig {
  double temperature = 1.0;
  std::optional<std::size_t> top_k = Vocabulary::kSize;
  std::optional<double> top_p = 0.95;
  std::size_t max_len = 64;
  std::uint64_t seed = 0;

  void validate(std::size_t vocab = Vocabulary::kSize) const;
};

// Applies temperature -> top-k -> top-p -> renormalize to raw logits. Entries
// flagged in `forbidden` are removed before any of it. The top-p support is the
// shortest descending-probability prefix with cumulative mass >= top_p; the
// final support is the intersection with the top-k set.
std::vector<double> sampling_distribution(std::span<const double> logits, const SamplerConfig& cfg,
                                          std::span<const bool> forbidden = {});

// Same masking applied to an explicit probability vector (temperature 1).
std::vector<double> mask_distribution(std::span<const double> probs, std::optional<std::size_t> top_k,
                                      std::optional<double> top_p);

class Rng;
std::size_t draw_categorical(std::span<const double> probs, Rng& rng);

// Rolls out one sequence on RNG stream (cfg.seed, stream). BOS is never
// emitted; EOS is disallowed at the first step so bodies are non-empty.
Trajectory sample_sequence(const PolicyParams& params, std::span<const TokenId> condition, const SamplerConfig& cfg,
                           std::uint64_t stream);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params);
PolicyParams load_checkpoint(const std::filesystem::path& path);

}  // namespace mopd
