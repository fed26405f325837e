#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mopd/core.hpp"

namespace mopd {

enum class Property { sol, thermo, fold };

inline constexpr std::array<Property, 3> kAllProperties = {Property::sol, Property::thermo, Property::fold};

std::string_view property_name(Property p);
Property parse_property(std::string_view name);

struct PropertyScore {
  Property name;
  double value;
};

// Composition-based stand-ins for external property predictors.
PropertyScore score_sol(const Sequence& seq);     // hydrophilic fraction
PropertyScore score_thermo(const Sequence& seq);  // logistic in charged fraction
PropertyScore score_fold(const Sequence& seq);    // peaks at balanced hydrophobicity
PropertyScore score(Property p, const Sequence& seq);

bool is_hydrophilic(TokenId t);
bool is_hydrophobic(TokenId t);
bool is_charged(TokenId t);

struct ScoreSet {
  double sol = 0.0;
  double thermo = 0.0;
  double fold = 0.0;

  double get(Property p) const;
  static ScoreSet of(const Sequence& seq);
};

// Counts every evaluation so training procedures can report oracle cost.
class CountingOracle {
 public:
  explicit CountingOracle(Property property) : property_(property) {}
  CountingOracle(const CountingOracle& other) : property_(other.property_), queries_(other.queries()) {}

  double operator()(const Sequence& seq) {
    queries_.fetch_add(1, std::memory_order_relaxed);
    return score(property_, seq).value;
  }
  Property property() const { return property_; }
  std::uint64_t queries() const { return queries_.load(std::memory_order_relaxed); }

 private:
  Property property_;
  std::atomic<std::uint64_t> queries_{0};
};

struct FilterSpec {
  Property property;
  double threshold;
};

struct CorpusRecord {
  std::string id;
  Sequence sequence;
  std::optional<ScoreSet> scores;

  ScoreSet resolved_scores() const { return scores ? *scores : ScoreSet::of(sequence); }
};

using Corpus = std::vector<CorpusRecord>;

// Order-2 Markov chain over the 20 amino acids used as the natural-sequence
// source. Transition weights are a closed-form function of residue classes.
class NaturalChain {
 public:
  static constexpr std::size_t kStates = Vocabulary::kNumAminoAcids;

  NaturalChain();

  // P(next | prev2, prev1)
  double transition(TokenId prev2, TokenId prev1, TokenId next) const {
    return table_[(static_cast<std::size_t>(prev2) * kStates + prev1) * kStates + next];
  }
  const std::vector<double>& table() const { return table_; }

  static constexpr std::size_t kBurnIn = 64;

 private:
  std::vector<double> table_;
};

struct LengthRange {
  std::size_t min = 24;
  std::size_t max = 48;
};

Corpus generate_natural_corpus(std::uint64_t seed, std::size_t n_sequences, LengthRange lengths,
                               std::string_view id_prefix = "nat");

// Keeps records whose score meets the threshold, in input order, up to max_count.
Corpus build_preference_dataset(const Corpus& corpus, FilterSpec spec, std::size_t max_count = 200);
std::size_t count_survivors(const Corpus& corpus, FilterSpec spec);
// Records scored before build_preference_dataset has collected max_count survivors.
std::size_t preference_scan_cost(const Corpus& corpus, FilterSpec spec, std::size_t max_count = 200);

inline constexpr std::size_t kMinPreferenceDataset = 10;

// FASTA-like text: ">id score_sol=.. score_thermo=.. score_fold=.." then one line of residues.
void write_fasta(const std::filesystem::path& path, const Corpus& corpus, bool with_scores = true);
Corpus read_fasta(const std::filesystem::path& path);
std::string format_fasta(const Corpus& corpus, bool with_scores = true);
Corpus parse_fasta(std::string_view text);

std::vector<Sequence> sequences_of(const Corpus& corpus);

}  // namespace mopd
