#include "mopd/policy.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "mopd/rng.hpp"

namespace mopd {

PolicyParams::PolicyParams(Architecture arch) : arch_(arch), weights_(arch.parameter_count(), 0.0) {}

PolicyParams::PolicyParams(Architecture arch, std::vector<double> weights) : arch_(arch), weights_(std::move(weights)) {
  if (weights_.size() != arch_.parameter_count()) {
    throw Error("parameter vector has " + std::to_string(weights_.size()) + " entries, architecture needs " +
                std::to_string(arch_.parameter_count()));
  }
  for (double w : weights_) {
    if (!std::isfinite(w)) throw Error("non-finite policy parameter");
  }
}

PolicyParams PolicyParams::random(Architecture arch, std::uint64_t seed, double scale) {
  PolicyParams p(arch);
  Rng rng(seed, 0);
  auto w = p.mutable_weights();
  for (std::size_t i = 0; i < p.w2_offset(); ++i) w[i] = scale * rng.normal();
  // Biases of the hidden layer start at zero too.
  std::fill(w.begin() + static_cast<std::ptrdiff_t>(p.b1_offset()),
            w.begin() + static_cast<std::ptrdiff_t>(p.w2_offset()), 0.0);
  p.append_lineage(seed);
  return p;
}

std::uint64_t PolicyParams::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double w : weights_) {
    auto bits = std::bit_cast<std::uint64_t>(w);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::vector<TokenId> context_window(std::size_t k, std::span<const TokenId> condition,
                                    std::span<const TokenId> prefix) {
  std::vector<TokenId> window(k, Vocabulary::kBos);
  // Stream is condition ++ [BOS] ++ prefix; fill from the right.
  std::size_t slot = k;
  for (auto it = prefix.rbegin(); it != prefix.rend() && slot > 0; ++it) window[--slot] = *it;
  if (slot > 0) window[--slot] = Vocabulary::kBos;
  for (auto it = condition.rbegin(); it != condition.rend() && slot > 0; ++it) window[--slot] = *it;
  return window;
}

void forward(const PolicyParams& params, std::span<const TokenId> window, StepActivations& out) {
  const auto& a = params.arch();
  const std::size_t d = a.embed_dim, hd = a.hidden_dim, nv = a.vocab;
  const auto w = params.weights();
  const double* emb = w.data() + params.embedding_offset();
  const double* w1 = w.data() + params.w1_offset();
  const double* b1 = w.data() + params.b1_offset();
  const double* w2 = w.data() + params.w2_offset();
  const double* b2 = w.data() + params.b2_offset();

  out.hidden.assign(b1, b1 + hd);
  for (std::size_t pos = 0; pos < a.context_width; ++pos) {
    const double* e = emb + static_cast<std::size_t>(window[pos]) * d;
    for (std::size_t i = 0; i < d; ++i) {
      const double x = e[i];
      const double* row = w1 + (pos * d + i) * hd;
      for (std::size_t j = 0; j < hd; ++j) out.hidden[j] += x * row[j];
    }
  }
  for (double& h : out.hidden) h = std::tanh(h);

  out.logits.assign(b2, b2 + nv);
  for (std::size_t j = 0; j < hd; ++j) {
    const double h = out.hidden[j];
    const double* row = w2 + j * nv;
    for (std::size_t v = 0; v < nv; ++v) out.logits[v] += h * row[v];
  }
}

void backward(const PolicyParams& params, std::span<const TokenId> window, const StepActivations& act,
              std::span<const double> dlogits, std::span<double> grad) {
  const auto& a = params.arch();
  const std::size_t d = a.embed_dim, hd = a.hidden_dim, nv = a.vocab;
  const auto w = params.weights();
  const double* emb = w.data() + params.embedding_offset();
  const double* w1 = w.data() + params.w1_offset();
  const double* w2 = w.data() + params.w2_offset();
  double* g_emb = grad.data() + params.embedding_offset();
  double* g_w1 = grad.data() + params.w1_offset();
  double* g_b1 = grad.data() + params.b1_offset();
  double* g_w2 = grad.data() + params.w2_offset();
  double* g_b2 = grad.data() + params.b2_offset();

  for (std::size_t v = 0; v < nv; ++v) g_b2[v] += dlogits[v];

  std::vector<double> dpre(hd);
  for (std::size_t j = 0; j < hd; ++j) {
    const double h = act.hidden[j];
    const double* row = w2 + j * nv;
    double* grow = g_w2 + j * nv;
    double dh = 0.0;
    for (std::size_t v = 0; v < nv; ++v) {
      grow[v] += h * dlogits[v];
      dh += row[v] * dlogits[v];
    }
    dpre[j] = dh * (1.0 - h * h);
    g_b1[j] += dpre[j];
  }

  for (std::size_t pos = 0; pos < a.context_width; ++pos) {
    const std::size_t tok = window[pos];
    const double* e = emb + tok * d;
    double* ge = g_emb + tok * d;
    for (std::size_t i = 0; i < d; ++i) {
      const double x = e[i];
      const double* row = w1 + (pos * d + i) * hd;
      double* grow = g_w1 + (pos * d + i) * hd;
      double de = 0.0;
      for (std::size_t j = 0; j < hd; ++j) {
        grow[j] += x * dpre[j];
        de += row[j] * dpre[j];
      }
      ge[i] += de;
    }
  }
}

std::vector<double> next_token_logits(const PolicyParams& params, std::span<const TokenId> condition,
                                      std::span<const TokenId> prefix) {
  StepActivations act;
  forward(params, context_window(params.arch().context_width, condition, prefix), act);
  return std::move(act.logits);
}

namespace {

double log_softmax_at(std::span<const double> logits, std::size_t index) {
  return logits[index] - log_sum_exp(logits);
}

}  // namespace

std::vector<double> step_logprobs(const PolicyParams& params, std::span<const TokenId> condition, const Sequence& y) {
  const auto tokens = y.tokens();
  std::vector<double> out;
  out.reserve(tokens.size() + 1);
  StepActivations act;
  for (std::size_t n = 0; n <= tokens.size(); ++n) {
    forward(params, context_window(params.arch().context_width, condition, tokens.first(n)), act);
    const std::size_t target = n < tokens.size() ? tokens[n] : Vocabulary::kEos;
    out.push_back(log_softmax_at(act.logits, target));
  }
  return out;
}

double sequence_logprob(const PolicyParams& params, std::span<const TokenId> condition, const Sequence& y) {
  const auto steps = step_logprobs(params, condition, y);
  return std::accumulate(steps.begin(), steps.end(), 0.0);
}

double accumulate_logprob_gradient(const PolicyParams& params, std::span<const TokenId> condition, const Sequence& y,
                                   double scale, std::span<double> grad) {
  if (grad.size() != params.weights().size()) throw Error("gradient buffer size mismatch");
  const auto tokens = y.tokens();
  const std::size_t nv = params.arch().vocab;
  StepActivations act;
  std::vector<double> dlogits(nv);
  double total = 0.0;
  for (std::size_t n = 0; n <= tokens.size(); ++n) {
    const auto window = context_window(params.arch().context_width, condition, tokens.first(n));
    forward(params, window, act);
    const std::size_t target = n < tokens.size() ? tokens[n] : Vocabulary::kEos;
    const double lse = log_sum_exp(act.logits);
    total += act.logits[target] - lse;
    // d log softmax_target / d logits = onehot - p
    for (std::size_t v = 0; v < nv; ++v) dlogits[v] = -scale * std::exp(act.logits[v] - lse);
    dlogits[target] += scale;
    backward(params, window, act, dlogits, grad);
  }
  return total;
}

std::vector<double> logprob_gradient(const PolicyParams& params, std::span<const TokenId> condition, const Sequence& y) {
  std::vector<double> grad(params.weights().size(), 0.0);
  accumulate_logprob_gradient(params, condition, y, 1.0, grad);
  return grad;
}

// ---------------------------------------------------------------------------

void SamplerConfig::validate(std::size_t vocab) const {
  if (!(temperature > 0.0)) throw Error("sampler temperature must be positive");
  if (top_k && (*top_k == 0 || *top_k > vocab)) throw Error("top_k must be in [1, vocab]");
  if (top_p && !(*top_p > 0.0 && *top_p <= 1.0)) throw Error("top_p must be in (0, 1]");
  if (max_len == 0) throw Error("max_len must be positive");
}

std::vector<double> mask_distribution(std::span<const double> probs, std::optional<std::size_t> top_k,
                                      std::optional<double> top_p) {
  const std::size_t n = probs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });

  std::size_t keep = n;
  // Zero-mass entries (forbidden tokens) never enter the support.
  while (keep > 0 && probs[order[keep - 1]] <= 0.0) --keep;
  if (top_k) keep = std::min(keep, *top_k);
  if (top_p) {
    double cum = 0.0;
    std::size_t nucleus = 0;
    while (nucleus < n) {
      cum += probs[order[nucleus++]];
      if (cum >= *top_p) break;
    }
    keep = std::min(keep, nucleus);
  }
  if (keep == 0) throw Error("sampling support is empty");

  std::vector<double> out(n, 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) mass += probs[order[i]];
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / mass;
  return out;
}

std::vector<double> sampling_distribution(std::span<const double> logits, const SamplerConfig& cfg,
                                          std::span<const bool> forbidden) {
  std::vector<double> scaled(logits.size());
  for (std::size_t v = 0; v < logits.size(); ++v) {
    const bool blocked = !forbidden.empty() && forbidden[v];
    scaled[v] = blocked ? -std::numeric_limits<double>::infinity() : logits[v] / cfg.temperature;
  }
  const double lse = log_sum_exp(scaled);
  std::vector<double> probs(scaled.size());
  for (std::size_t v = 0; v < scaled.size(); ++v) probs[v] = std::exp(scaled[v] - lse);
  return mask_distribution(probs, cfg.top_k, cfg.top_p);
}

std::size_t draw_categorical(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t v = 0; v < probs.size(); ++v) {
    if (probs[v] <= 0.0) continue;
    cum += probs[v];
    last = v;
    if (u < cum) return v;
  }
  return last;
}

Trajectory sample_sequence(const PolicyParams& params, std::span<const TokenId> condition, const SamplerConfig& cfg,
                           std::uint64_t stream) {
  cfg.validate(params.arch().vocab);
  Rng rng(cfg.seed, stream);
  Trajectory traj;
  traj.condition.assign(condition.begin(), condition.end());
  traj.params_hash = params.hash();

  std::array<bool, Vocabulary::kSize> forbidden{};
  forbidden[Vocabulary::kBos] = true;

  std::vector<TokenId> body;
  StepActivations act;
  const std::size_t k = params.arch().context_width;
  for (;;) {
    forward(params, context_window(k, condition, body), act);
    traj.student_dists.push_back(softmax_with_temperature(act.logits, 1.0));
    if (body.size() == cfg.max_len) break;
    forbidden[Vocabulary::kEos] = body.empty();
    const auto probs = sampling_distribution(act.logits, cfg, forbidden);
    const auto tok = static_cast<TokenId>(draw_categorical(probs, rng));
    if (tok == Vocabulary::kEos) {
      traj.terminated_by_eos = true;
      break;
    }
    body.push_back(tok);
  }
  traj.body = Sequence(std::move(body));
  return traj;
}

// ---------------------------------------------------------------------------

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw Error("adam_step: parameter/gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw Error("adam_step: optimizer state size mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * params[i]);
  }
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'O', 'P', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u64(std::ostream& os, std::uint64_t x) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((x >> (8 * i)) & 0xFF);
  os.write(b.data(), 8);
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw Error("truncated checkpoint");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return x;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  const auto& a = params.arch();
  os.write(kMagic.data(), kMagic.size());
  put_u64(os, kCheckpointVersion);
  put_u64(os, a.context_width);
  put_u64(os, a.embed_dim);
  put_u64(os, a.hidden_dim);
  put_u64(os, a.vocab);
  put_u64(os, params.lineage().size());
  for (auto s : params.lineage()) put_u64(os, s);
  put_u64(os, params.weights().size());
  for (double w : params.weights()) put_u64(os, std::bit_cast<std::uint64_t>(w));
  if (!os) throw Error("failed writing checkpoint " + path.string());
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw Error("not a checkpoint: " + path.string());
  const auto version = get_u64(is);
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  Architecture a;
  a.context_width = get_u64(is);
  a.embed_dim = get_u64(is);
  a.hidden_dim = get_u64(is);
  a.vocab = get_u64(is);
  if (a.vocab != Vocabulary::kSize) throw Error("checkpoint vocabulary size mismatch");
  std::vector<std::uint64_t> lineage(get_u64(is));
  for (auto& s : lineage) s = get_u64(is);
  const auto n = get_u64(is);
  if (n != a.parameter_count()) throw Error("checkpoint parameter count mismatch");
  std::vector<double> weights(n);
  for (auto& w : weights) w = std::bit_cast<double>(get_u64(is));
  PolicyParams p(a, std::move(weights));
  p.set_lineage(std::move(lineage));
  return p;
}

}  // namespace mopd
