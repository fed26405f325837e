#include "mopd/oracles.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mopd/rng.hpp"

namespace mopd {

namespace {

constexpr std::string_view kHydrophilic = "DEKRHNQST";
constexpr std::string_view kHydrophobic = "AVLIMFWC";
constexpr std::string_view kCharged = "DEKR";

bool in_set(TokenId t, std::string_view set) {
  return Vocabulary::is_amino_acid(t) && set.find(Vocabulary::kAminoAcids[t]) != std::string_view::npos;
}

template <class Pred>
double fraction(const Sequence& seq, Pred pred) {
  if (seq.empty()) throw Error("cannot score an empty sequence");
  std::size_t hits = 0;
  for (TokenId t : seq.tokens()) hits += pred(t) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(seq.length());
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string_view property_name(Property p) {
  switch (p) {
    case Property::sol: return "sol";
    case Property::thermo: return "thermo";
    case Property::fold: return "fold";
  }
  return "?";
}

Property parse_property(std::string_view name) {
  for (Property p : kAllProperties) {
    if (property_name(p) == name) return p;
  }
  throw Error("unknown property '" + std::string(name) + "' (expected sol, thermo or fold)");
}

bool is_hydrophilic(TokenId t) { return in_set(t, kHydrophilic); }
bool is_hydrophobic(TokenId t) { return in_set(t, kHydrophobic); }
bool is_charged(TokenId t) { return in_set(t, kCharged); }

PropertyScore score_sol(const Sequence& seq) { return {Property::sol, fraction(seq, is_hydrophilic)}; }

PropertyScore score_thermo(const Sequence& seq) {
  return {Property::thermo, logistic(10.0 * (fraction(seq, is_charged) - 0.25))};
}

PropertyScore score_fold(const Sequence& seq) {
  return {Property::fold, 1.0 - 2.0 * std::abs(fraction(seq, is_hydrophobic) - 0.5)};
}

PropertyScore score(Property p, const Sequence& seq) {
  switch (p) {
    case Property::sol: return score_sol(seq);
    case Property::thermo: return score_thermo(seq);
    case Property::fold: return score_fold(seq);
  }
  throw Error("unknown property");
}

double ScoreSet::get(Property p) const {
  switch (p) {
    case Property::sol: return sol;
    case Property::thermo: return thermo;
    case Property::fold: return fold;
  }
  throw Error("unknown property");
}

ScoreSet ScoreSet::of(const Sequence& seq) {
  return {score_sol(seq).value, score_thermo(seq).value, score_fold(seq).value};
}

// ---------------------------------------------------------------------------

namespace {

enum ResidueClass : int { kClassHydrophobic = 0, kClassHydrophilic = 1, kClassOther = 2 };

int residue_class(TokenId t) {
  if (is_hydrophobic(t)) return kClassHydrophobic;
  if (is_hydrophilic(t)) return kClassHydrophilic;
  return kClassOther;
}

// Relative frequency of each residue within its class, indexed like kAminoAcids
// ("ACDEFGHIKLMNPQRSTVWY").
constexpr std::array<double, 20> kResidueWeight = {
    1.0,  // A
    0.3,  // C
    0.7,  // D
    0.8,  // E
    0.5,  // F
    1.0,  // G
    0.4,  // H
    0.8,  // I
    0.7,  // K
    1.2,  // L
    0.3,  // M
    0.6,  // N
    0.8,  // P
    0.6,  // Q
    0.6,  // R
    1.1,  // S
    0.9,  // T
    0.9,  // V
    0.2,  // W
    0.5,  // Y
};

// Target class mix and how strongly a run of one class persists.
constexpr std::array<double, 3> kClassWeight = {0.35, 0.42, 0.23};
constexpr double kStayAfterPair = 0.85;   // previous two residues share a class
constexpr double kStayAfterSingle = 0.65; // previous two residues differ in class
constexpr double kRepeatPenalty = 0.5;    // immediate repeat of the same residue

}  // namespace

NaturalChain::NaturalChain() : table_(kStates * kStates * kStates, 0.0) {
  std::array<double, 3> class_total{};
  for (std::size_t v = 0; v < kStates; ++v) class_total[residue_class(static_cast<TokenId>(v))] += kResidueWeight[v];

  for (std::size_t a = 0; a < kStates; ++a) {
    for (std::size_t b = 0; b < kStates; ++b) {
      const int ca = residue_class(static_cast<TokenId>(a));
      const int cb = residue_class(static_cast<TokenId>(b));
      const double stay = (ca == cb) ? kStayAfterPair : kStayAfterSingle;
      std::array<double, 3> class_prob{};
      double leave_mass = 0.0;
      for (int c = 0; c < 3; ++c) {
        if (c != cb) leave_mass += kClassWeight[c];
      }
      for (int c = 0; c < 3; ++c) {
        class_prob[c] = (c == cb) ? stay : (1.0 - stay) * kClassWeight[c] / leave_mass;
      }
      double* row = &table_[(a * kStates + b) * kStates];
      double total = 0.0;
      for (std::size_t v = 0; v < kStates; ++v) {
        const int cv = residue_class(static_cast<TokenId>(v));
        double w = class_prob[cv] * kResidueWeight[v] / class_total[cv];
        if (v == b) w *= kRepeatPenalty;
        row[v] = w;
        total += w;
      }
      for (std::size_t v = 0; v < kStates; ++v) row[v] /= total;
    }
  }
}

Corpus generate_natural_corpus(std::uint64_t seed, std::size_t n_sequences, LengthRange lengths,
                               std::string_view id_prefix) {
  if (n_sequences == 0) throw Error("corpus size must be at least 1");
  if (lengths.min == 0 || lengths.min > lengths.max) throw Error("invalid corpus length range");
  static const NaturalChain chain;
  Corpus corpus;
  corpus.reserve(n_sequences);
  for (std::size_t i = 0; i < n_sequences; ++i) {
    Rng rng(seed, i);
    const std::size_t len = lengths.min + rng.below(lengths.max - lengths.min + 1);
    std::vector<TokenId> tokens;
    tokens.reserve(len);
    TokenId prev2 = 0, prev1 = 0;
    for (std::size_t step = 0; step < NaturalChain::kBurnIn + len; ++step) {
      const double u = rng.uniform();
      double cum = 0.0;
      TokenId next = NaturalChain::kStates - 1;
      for (std::size_t v = 0; v < NaturalChain::kStates; ++v) {
        cum += chain.transition(prev2, prev1, static_cast<TokenId>(v));
        if (u < cum) {
          next = static_cast<TokenId>(v);
          break;
        }
      }
      if (step >= NaturalChain::kBurnIn) tokens.push_back(next);
      prev2 = prev1;
      prev1 = next;
    }
    char id[64];
    std::snprintf(id, sizeof id, "%.*s_%06zu", static_cast<int>(id_prefix.size()), id_prefix.data(), i);
    Sequence seq(std::move(tokens));
    auto scores = ScoreSet::of(seq);
    corpus.push_back({id, std::move(seq), scores});
  }
  return corpus;
}

std::size_t count_survivors(const Corpus& corpus, FilterSpec spec) {
  std::size_t n = 0;
  for (const auto& r : corpus) n += r.resolved_scores().get(spec.property) >= spec.threshold ? 1 : 0;
  return n;
}

Corpus build_preference_dataset(const Corpus& corpus, FilterSpec spec, std::size_t max_count) {
  if (!(spec.threshold >= 0.0 && spec.threshold <= 1.0)) {
    throw Error("filter threshold must lie in [0, 1]");
  }
  Corpus out;
  for (const auto& r : corpus) {
    if (out.size() == max_count) break;
    if (r.resolved_scores().get(spec.property) >= spec.threshold) out.push_back(r);
  }
  if (out.size() < kMinPreferenceDataset) {
    throw Error("preference dataset for " + std::string(property_name(spec.property)) + " >= " +
                std::to_string(spec.threshold) + " has only " + std::to_string(out.size()) +
                " sequences; lower the threshold");
  }
  return out;
}

std::size_t preference_scan_cost(const Corpus& corpus, FilterSpec spec, std::size_t max_count) {
  std::size_t kept = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].resolved_scores().get(spec.property) >= spec.threshold && ++kept == max_count) return i + 1;
  }
  return corpus.size();
}

std::vector<Sequence> sequences_of(const Corpus& corpus) {
  std::vector<Sequence> out;
  out.reserve(corpus.size());
  for (const auto& r : corpus) out.push_back(r.sequence);
  return out;
}

// ---------------------------------------------------------------------------

std::string format_fasta(const Corpus& corpus, bool with_scores) {
  std::string out;
  char buf[160];
  for (const auto& r : corpus) {
    out += '>';
    out += r.id;
    if (with_scores) {
      const auto s = r.resolved_scores();
      std::snprintf(buf, sizeof buf, " score_sol=%.17g score_thermo=%.17g score_fold=%.17g", s.sol, s.thermo, s.fold);
      out += buf;
    }
    out += '\n';
    out += r.sequence.to_string();
    out += '\n';
  }
  return out;
}

void write_fasta(const std::filesystem::path& path, const Corpus& corpus, bool with_scores) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << format_fasta(corpus, with_scores);
}

Corpus parse_fasta(std::string_view text) {
  Corpus corpus;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] != '>') throw Error("fasta line " + std::to_string(line_no) + ": expected header");
    std::istringstream header(line.substr(1));
    CorpusRecord rec;
    header >> rec.id;
    if (rec.id.empty()) throw Error("fasta line " + std::to_string(line_no) + ": missing id");
    ScoreSet s;
    int seen = 0;
    std::string field;
    while (header >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) continue;
      const auto key = field.substr(0, eq);
      double value = 0.0;
      const auto* first = field.data() + eq + 1;
      const auto* last = field.data() + field.size();
      if (std::from_chars(first, last, value).ec != std::errc{}) {
        throw Error("fasta line " + std::to_string(line_no) + ": bad value for " + key);
      }
      if (key == "score_sol") s.sol = value, seen |= 1;
      else if (key == "score_thermo") s.thermo = value, seen |= 2;
      else if (key == "score_fold") s.fold = value, seen |= 4;
    }
    if (!std::getline(in, line)) throw Error("fasta: record '" + rec.id + "' has no sequence line");
    ++line_no;
    rec.sequence = Sequence::from_string(line);
    if (seen == 7) rec.scores = s;
    else rec.scores = ScoreSet::of(rec.sequence);
    corpus.push_back(std::move(rec));
  }
  return corpus;
}

Corpus read_fasta(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_fasta(ss.str());
}

}  // namespace mopd
