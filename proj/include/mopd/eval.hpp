#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mopd/core.hpp"
#include "mopd/policy.hpp"

namespace mopd {

struct MetricRecord {
  std::string sequence_id;
  double ppl = 1.0;
  double novelty_u = 0.0;
  double novelty_t = 0.0;
  double sol = 0.0;
  double thermo = 0.0;
  double fold = 0.0;

  void validate() const;
  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

enum class Metric { ppl, novelty_u, novelty_t, sol, thermo, fold };

std::string_view metric_name(Metric m);
Metric parse_metric(std::string_view name);
double metric_value(const MetricRecord& r, Metric m);

// log(1+PPL) oriented downward, everything else oriented upward.
double oriented_value(const MetricRecord& r, Metric m);

inline const std::vector<Metric> kDefaultHvAxes = {Metric::ppl, Metric::novelty_t, Metric::sol, Metric::thermo,
                                                   Metric::fold};

struct ParetoPoint {
  std::vector<double> z;
  friend bool operator==(const ParetoPoint&, const ParetoPoint&) = default;
};

// exp(-(1/L) sum log p_ref), L = body length + 1 (EOS step included).
double perplexity(const PolicyParams& reference, const Sequence& seq);

// Normalized longest common subsequence: LCS(a, b) / max(|a|, |b|).
double similarity(const Sequence& a, const Sequence& b);

// 1 - max similarity to any reference sequence.
double novelty(const Sequence& seq, std::span<const Sequence> reference);
double mean_novelty(std::span<const Sequence> generated, std::span<const Sequence> reference);

// Min-max normalization of oriented metrics using extremes over `universe`.
class Normalizer {
 public:
  Normalizer(std::span<const MetricRecord> universe, std::vector<Metric> axes);

  ParetoPoint apply(const MetricRecord& r) const;
  const std::vector<Metric>& axes() const { return axes_; }
  // Axes whose universe extremes coincide; they map to 0.5.
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  std::vector<Metric> axes_;
  std::vector<double> lo_, hi_;
  std::vector<std::string> warnings_;
};

std::vector<ParetoPoint> orient_and_normalize(std::span<const MetricRecord> records,
                                              std::span<const MetricRecord> universe,
                                              const std::vector<Metric>& axes = kDefaultHvAxes);

// Points not weakly dominated by a distinct point. Duplicates kept once.
std::vector<ParetoPoint> non_dominated(std::span<const ParetoPoint> points);

// Lebesgue measure of the union of boxes [0, z] for z in points.
double hypervolume(std::span<const ParetoPoint> points);

// ---------------------------------------------------------------------------
// Two-axis front analysis: x = normalized designability (oriented log-PPL),
// y = mean of normalized fold, sol and thermo.

struct MethodRecords {
  std::string method;
  std::vector<MetricRecord> records;
};

struct FrontPoint {
  std::string variant;  // "all" or "novel"
  std::string method;
  double designability = 0.0;
  double alignment = 0.0;
  friend bool operator==(const FrontPoint&, const FrontPoint&) = default;
};

struct FrontReport {
  double novelty_threshold = 0.7;
  std::vector<FrontPoint> points;         // front members, sorted by (variant, method, designability)
  std::vector<std::string> empty_fronts;  // "variant/method" entries with no surviving points
  std::vector<std::string> warnings;
};

FrontReport pareto_front_report(std::span<const MethodRecords> methods, double novelty_threshold = 0.7);
// Fronts recomputed from (variant, method, x, y) rows of every candidate point.
std::vector<FrontPoint> fronts_from_points(std::span<const FrontPoint> candidates);
// All candidate points before front extraction.
std::vector<FrontPoint> front_candidates(std::span<const MethodRecords> methods, double novelty_threshold = 0.7);

std::string front_points_csv(std::span<const FrontPoint> points);
std::vector<FrontPoint> parse_front_points_csv(std::string_view text);

// MetricRecord export.
std::string metric_records_csv(std::span<const MetricRecord> records);
std::vector<MetricRecord> parse_metric_records_csv(std::string_view text);
std::string metric_records_jsonl(std::span<const MetricRecord> records);

// Shortest decimal text that parses back to the same double.
std::string format_double(double x);

}  // namespace mopd
