#include "mopd/eval.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace mopd {

void MetricRecord::validate() const {
  auto unit = [](double x) { return std::isfinite(x) && x >= 0.0 && x <= 1.0; };
  if (!std::isfinite(ppl) || !(ppl > 0.0)) throw Error("metric record " + sequence_id + ": invalid ppl");
  if (!unit(novelty_u) || !unit(novelty_t)) throw Error("metric record " + sequence_id + ": novelty outside [0,1]");
  if (!unit(sol) || !unit(thermo) || !unit(fold)) throw Error("metric record " + sequence_id + ": score outside [0,1]");
}

std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::ppl: return "ppl";
    case Metric::novelty_u: return "novelty_u";
    case Metric::novelty_t: return "novelty_t";
    case Metric::sol: return "sol";
    case Metric::thermo: return "thermo";
    case Metric::fold: return "fold";
  }
  return "?";
}

Metric parse_metric(std::string_view name) {
  for (Metric m : {Metric::ppl, Metric::novelty_u, Metric::novelty_t, Metric::sol, Metric::thermo, Metric::fold}) {
    if (metric_name(m) == name) return m;
  }
  throw Error("unknown metric '" + std::string(name) + "'");
}

double metric_value(const MetricRecord& r, Metric m) {
  switch (m) {
    case Metric::ppl: return r.ppl;
    case Metric::novelty_u: return r.novelty_u;
    case Metric::novelty_t: return r.novelty_t;
    case Metric::sol: return r.sol;
    case Metric::thermo: return r.thermo;
    case Metric::fold: return r.fold;
  }
  throw Error("unknown metric");
}

double oriented_value(const MetricRecord& r, Metric m) {
  const double raw = metric_value(r, m);
  return m == Metric::ppl ? -std::log1p(raw) : raw;
}

// ---------------------------------------------------------------------------

double perplexity(const PolicyParams& reference, const Sequence& seq) {
  if (seq.empty()) throw Error("perplexity of an empty sequence");
  const double lp = sequence_logprob(reference, {}, seq);
  return std::exp(-lp / static_cast<double>(seq.length() + 1));
}

namespace {

std::size_t lcs_dp(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Bit-parallel LCS for |a| <= 64 (Hyyrö's formulation of Allison-Dix).
std::size_t lcs_bits(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::array<std::uint64_t, Vocabulary::kSize> match{};
  for (std::size_t i = 0; i < a.size(); ++i) match[a[i]] |= std::uint64_t{1} << i;
  const std::uint64_t full = a.size() == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << a.size()) - 1;
  std::uint64_t v = full;
  for (TokenId c : b) {
    const std::uint64_t u = v & match[c];
    v = ((v + u) | (v - u)) & full;
  }
  return a.size() - static_cast<std::size_t>(std::popcount(v));
}

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  if (a.size() <= 64) return lcs_bits(a, b);
  if (b.size() <= 64) return lcs_bits(b, a);
  return lcs_dp(a, b);
}

}  // namespace

double similarity(const Sequence& a, const Sequence& b) {
  if (a.empty() || b.empty()) throw Error("similarity of an empty sequence");
  const auto l = lcs_length(a.tokens(), b.tokens());
  return static_cast<double>(l) / static_cast<double>(std::max(a.length(), b.length()));
}

double novelty(const Sequence& seq, std::span<const Sequence> reference) {
  if (reference.empty()) throw Error("novelty against an empty reference corpus");
  double best = 0.0;
  for (const auto& r : reference) {
    best = std::max(best, similarity(seq, r));
    if (best == 1.0) break;
  }
  return 1.0 - best;
}

double mean_novelty(std::span<const Sequence> generated, std::span<const Sequence> reference) {
  if (generated.empty()) throw Error("mean novelty of an empty set");
  double total = 0.0;
  for (const auto& s : generated) total += novelty(s, reference);
  return total / static_cast<double>(generated.size());
}

// ---------------------------------------------------------------------------

Normalizer::Normalizer(std::span<const MetricRecord> universe, std::vector<Metric> axes) : axes_(std::move(axes)) {
  if (universe.empty()) throw Error("normalization universe is empty");
  lo_.assign(axes_.size(), HUGE_VAL);
  hi_.assign(axes_.size(), -HUGE_VAL);
  for (const auto& r : universe) {
    for (std::size_t k = 0; k < axes_.size(); ++k) {
      const double a = oriented_value(r, axes_[k]);
      lo_[k] = std::min(lo_[k], a);
      hi_[k] = std::max(hi_[k], a);
    }
  }
  for (std::size_t k = 0; k < axes_.size(); ++k) {
    if (!(hi_[k] > lo_[k])) {
      warnings_.push_back("metric " + std::string(metric_name(axes_[k])) +
                          " is constant over the union; normalized to 0.5");
    }
  }
}

ParetoPoint Normalizer::apply(const MetricRecord& r) const {
  ParetoPoint p;
  p.z.resize(axes_.size());
  for (std::size_t k = 0; k < axes_.size(); ++k) {
    if (!(hi_[k] > lo_[k])) {
      p.z[k] = 0.5;
      continue;
    }
    const double a = oriented_value(r, axes_[k]);
    if (a < lo_[k] || a > hi_[k]) throw Error("record " + r.sequence_id + " lies outside the normalization universe");
    p.z[k] = (a - lo_[k]) / (hi_[k] - lo_[k]);
  }
  return p;
}

std::vector<ParetoPoint> orient_and_normalize(std::span<const MetricRecord> records,
                                              std::span<const MetricRecord> universe,
                                              const std::vector<Metric>& axes) {
  Normalizer norm(universe, axes);
  std::vector<ParetoPoint> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(norm.apply(r));
  return out;
}

namespace {

bool weakly_dominates(const std::vector<double>& q, const std::vector<double>& p) {
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (q[k] < p[k]) return false;
  }
  return true;
}

}  // namespace

std::vector<ParetoPoint> non_dominated(std::span<const ParetoPoint> points) {
  std::vector<ParetoPoint> sorted(points.begin(), points.end());
  std::sort(sorted.begin(), sorted.end(), [](const ParetoPoint& a, const ParetoPoint& b) { return a.z > b.z; });
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  // After a descending lexicographic sort, a dominator always precedes the
  // points it dominates, so only kept points need checking.
  std::vector<ParetoPoint> front;
  for (const auto& p : sorted) {
    bool dominated = false;
    for (const auto& q : front) {
      if (weakly_dominates(q.z, p.z)) {
        dominated = true;
        break;
      }
    }
    if (!dominated) front.push_back(p);
  }
  return front;
}

namespace {

double hv_2d(std::vector<std::array<double, 2>> pts) {
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a[0] > b[0]; });
  double area = 0.0, ymax = 0.0;
  for (const auto& p : pts) {
    if (p[1] > ymax) {
      area += p[0] * (p[1] - ymax);
      ymax = p[1];
    }
  }
  return area;
}

// Slices along the last coordinate and recurses on the projections.
double hv_recursive(std::vector<std::vector<double>> pts, std::size_t dims) {
  if (pts.empty()) return 0.0;
  if (dims == 1) {
    double m = 0.0;
    for (const auto& p : pts) m = std::max(m, p[0]);
    return m;
  }
  if (dims == 2) {
    std::vector<std::array<double, 2>> flat;
    flat.reserve(pts.size());
    for (const auto& p : pts) flat.push_back({p[0], p[1]});
    return hv_2d(std::move(flat));
  }
  std::sort(pts.begin(), pts.end(), [dims](const auto& a, const auto& b) { return a[dims - 1] > b[dims - 1]; });
  double volume = 0.0;
  std::vector<std::vector<double>> slice;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> proj(pts[i].begin(), pts[i].begin() + static_cast<std::ptrdiff_t>(dims - 1));
    bool dominated = false;
    for (const auto& q : slice) {
      if (weakly_dominates(q, proj)) {
        dominated = true;
        break;
      }
    }
    if (!dominated) {
      std::erase_if(slice, [&](const std::vector<double>& q) { return weakly_dominates(proj, q); });
      slice.push_back(std::move(proj));
    }
    const double next = i + 1 < pts.size() ? pts[i + 1][dims - 1] : 0.0;
    const double height = pts[i][dims - 1] - next;
    if (height > 0.0) volume += height * hv_recursive(slice, dims - 1);
  }
  return volume;
}

}  // namespace

double hypervolume(std::span<const ParetoPoint> points) {
  if (points.empty()) return 0.0;
  const std::size_t dims = points.front().z.size();
  if (dims == 0 || dims > 6) throw Error("hypervolume supports 1 to 6 objectives");
  std::vector<std::vector<double>> pts;
  for (const auto& p : points) {
    if (p.z.size() != dims) throw Error("hypervolume: inconsistent point dimensions");
    for (double x : p.z) {
      if (!(x >= 0.0 && x <= 1.0)) throw Error("hypervolume: coordinates must lie in [0,1]");
    }
  }
  for (const auto& p : non_dominated(points)) pts.push_back(p.z);
  return hv_recursive(std::move(pts), dims);
}

// ---------------------------------------------------------------------------

std::vector<FrontPoint> front_candidates(std::span<const MethodRecords> methods, double novelty_threshold) {
  if (methods.empty()) throw Error("front report needs at least one method");
  std::vector<MetricRecord> universe;
  for (const auto& m : methods) universe.insert(universe.end(), m.records.begin(), m.records.end());
  const Normalizer norm(universe, {Metric::ppl, Metric::fold, Metric::sol, Metric::thermo});
  std::vector<FrontPoint> out;
  for (const auto& m : methods) {
    for (const auto& r : m.records) {
      const auto p = norm.apply(r);
      const double align = (p.z[1] + p.z[2] + p.z[3]) / 3.0;
      out.push_back({"all", m.method, p.z[0], align});
      if (r.novelty_u > novelty_threshold) out.push_back({"novel", m.method, p.z[0], align});
    }
  }
  return out;
}

std::vector<FrontPoint> fronts_from_points(std::span<const FrontPoint> candidates) {
  std::map<std::pair<std::string, std::string>, std::vector<ParetoPoint>> groups;
  for (const auto& c : candidates) groups[{c.variant, c.method}].push_back({{c.designability, c.alignment}});
  std::vector<FrontPoint> out;
  for (const auto& [key, pts] : groups) {
    auto front = non_dominated(pts);
    std::sort(front.begin(), front.end(), [](const auto& a, const auto& b) { return a.z < b.z; });
    for (const auto& p : front) out.push_back({key.first, key.second, p.z[0], p.z[1]});
  }
  return out;
}

FrontReport pareto_front_report(std::span<const MethodRecords> methods, double novelty_threshold) {
  FrontReport report;
  report.novelty_threshold = novelty_threshold;
  const auto candidates = front_candidates(methods, novelty_threshold);
  report.points = fronts_from_points(candidates);
  for (const char* variant : {"all", "novel"}) {
    for (const auto& m : methods) {
      const bool any = std::any_of(report.points.begin(), report.points.end(), [&](const FrontPoint& p) {
        return p.variant == variant && p.method == m.method;
      });
      if (!any) report.empty_fronts.push_back(std::string(variant) + "/" + m.method);
    }
  }
  return report;
}

std::string format_double(double x) {
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), res.ptr);
}

namespace {

double parse_double(std::string_view s) {
  double x = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw Error("bad number '" + std::string(s) + "'");
  return x;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    auto line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) fn(line);
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
}

}  // namespace

std::string front_points_csv(std::span<const FrontPoint> points) {
  std::string out = "variant,method,designability,alignment\n";
  for (const auto& p : points) {
    out += p.variant + "," + p.method + "," + format_double(p.designability) + "," + format_double(p.alignment) + "\n";
  }
  return out;
}

std::vector<FrontPoint> parse_front_points_csv(std::string_view text) {
  std::vector<FrontPoint> out;
  bool header = true;
  for_each_line(text, [&](std::string_view line) {
    if (header) {
      header = false;
      return;
    }
    const auto f = split_csv(line);
    if (f.size() != 4) throw Error("front csv: expected 4 fields");
    out.push_back({std::string(f[0]), std::string(f[1]), parse_double(f[2]), parse_double(f[3])});
  });
  return out;
}

std::string metric_records_csv(std::span<const MetricRecord> records) {
  std::string out = "sequence_id,ppl,novelty_u,novelty_t,sol,thermo,fold\n";
  for (const auto& r : records) {
    out += r.sequence_id;
    for (double x : {r.ppl, r.novelty_u, r.novelty_t, r.sol, r.thermo, r.fold}) out += "," + format_double(x);
    out += "\n";
  }
  return out;
}

std::vector<MetricRecord> parse_metric_records_csv(std::string_view text) {
  std::vector<MetricRecord> out;
  bool header = true;
  for_each_line(text, [&](std::string_view line) {
    if (header) {
      header = false;
      return;
    }
    const auto f = split_csv(line);
    if (f.size() != 7) throw Error("metric csv: expected 7 fields");
    MetricRecord r{std::string(f[0]), parse_double(f[1]), parse_double(f[2]), parse_double(f[3]),
                   parse_double(f[4]), parse_double(f[5]), parse_double(f[6])};
    r.validate();
    out.push_back(std::move(r));
  });
  return out;
}

std::string metric_records_jsonl(std::span<const MetricRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["sequence_id"] = r.sequence_id;
    j["ppl"] = r.ppl;
    j["novelty_u"] = r.novelty_u;
    j["novelty_t"] = r.novelty_t;
    j["sol"] = r.sol;
    j["thermo"] = r.thermo;
    j["fold"] = r.fold;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace mopd
