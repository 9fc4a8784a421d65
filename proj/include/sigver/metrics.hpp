#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sigver/error.hpp"

namespace sigver {

// Decision convention throughout: accept iff score >= threshold.

struct UserScores {
  std::string user_id;
  std::vector<double> genuine;
  std::vector<double> skilled;
  std::vector<double> random;
};

struct ErrorRates {
  double frr = 0;
  double far = 0;
};

inline ErrorRates far_frr_at(std::span<const double> genuine, std::span<const double> forgeries, double threshold) {
  require(!genuine.empty() && !forgeries.empty(), Errc::EmptyScores, "far_frr_at needs genuine and forgery scores");
  std::size_t rejected = 0, accepted = 0;
  for (double s : genuine) rejected += s < threshold;
  for (double s : forgeries) accepted += s >= threshold;
  return {static_cast<double>(rejected) / static_cast<double>(genuine.size()),
          static_cast<double>(accepted) / static_cast<double>(forgeries.size())};
}

struct EerResult {
  double eer = 0;
  double threshold = 0;
  double frr = 0;
  double far = 0;
};

/// Scans every distinct score plus one threshold above the maximum. The
/// |FAR - FRR| comparison is done on integer cross products, so it is exact.
inline EerResult eer_global(std::span<const double> genuine, std::span<const double> forgeries) {
  require(!genuine.empty() && !forgeries.empty(), Errc::EmptyScores, "EER needs genuine and forgery scores");
  std::vector<double> g(genuine.begin(), genuine.end()), f(forgeries.begin(), forgeries.end());
  std::sort(g.begin(), g.end());
  std::sort(f.begin(), f.end());
  std::vector<double> cand(g);
  cand.insert(cand.end(), f.begin(), f.end());
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  cand.push_back(std::nextafter(cand.back(), std::numeric_limits<double>::infinity()));

  const auto n = static_cast<std::int64_t>(g.size()), m = static_cast<std::int64_t>(f.size());
  std::int64_t best_diff = std::numeric_limits<std::int64_t>::max();
  EerResult best;
  for (double t : cand) {
    // rejected genuine: scores < t; accepted forgeries: scores >= t
    const auto rej = static_cast<std::int64_t>(std::lower_bound(g.begin(), g.end(), t) - g.begin());
    const auto acc = m - static_cast<std::int64_t>(std::lower_bound(f.begin(), f.end(), t) - f.begin());
    const std::int64_t diff = std::llabs(rej * m - acc * n);
    if (diff < best_diff) {
      best_diff = diff;
      best.threshold = t;
      best.frr = static_cast<double>(rej) / static_cast<double>(n);
      best.far = static_cast<double>(acc) / static_cast<double>(m);
      // one rounding of the exact (rej/n + acc/m)/2
      best.eer = static_cast<double>(rej * m + acc * n) / static_cast<double>(2 * n * m);
    }
  }
  return best;
}

/// Unweighted mean of per-user EERs (genuine vs skilled).
inline double eer_user(std::span<const UserScores> users) {
  double sum = 0;
  std::size_t k = 0;
  for (const auto& u : users) {
    if (u.genuine.empty() || u.skilled.empty()) continue;
    sum += eer_global(u.genuine, u.skilled).eer;
    ++k;
  }
  require(k > 0, Errc::EmptyScores, "no user has both genuine and skilled scores");
  return sum / static_cast<double>(k);
}

/// Same as eer_user but against random forgeries.
inline double eer_user_random(std::span<const UserScores> users) {
  double sum = 0;
  std::size_t k = 0;
  for (const auto& u : users) {
    if (u.genuine.empty() || u.random.empty()) continue;
    sum += eer_global(u.genuine, u.random).eer;
    ++k;
  }
  require(k > 0, Errc::EmptyScores, "no user has both genuine and random scores");
  return sum / static_cast<double>(k);
}

struct AucCounts {
  std::uint64_t greater = 0;
  std::uint64_t equal = 0;
  std::uint64_t pairs = 0;
  double value() const { return (2.0 * static_cast<double>(greater) + static_cast<double>(equal)) / (2.0 * static_cast<double>(pairs)); }
};

/// Pair counts for P(genuine > forgery) + P(equal)/2, in O((n+m) log(n+m)).
inline AucCounts auc_counts(std::span<const double> genuine, std::span<const double> forgeries) {
  require(!genuine.empty() && !forgeries.empty(), Errc::EmptyScores, "AUC needs genuine and forgery scores");
  std::vector<double> f(forgeries.begin(), forgeries.end());
  std::sort(f.begin(), f.end());
  AucCounts c;
  for (double s : genuine) {
    const auto lo = std::lower_bound(f.begin(), f.end(), s);
    const auto hi = std::upper_bound(lo, f.end(), s);
    c.greater += static_cast<std::uint64_t>(lo - f.begin());
    c.equal += static_cast<std::uint64_t>(hi - lo);
  }
  c.pairs = static_cast<std::uint64_t>(genuine.size()) * forgeries.size();
  return c;
}

inline double roc_auc(std::span<const double> genuine, std::span<const double> forgeries) {
  return auc_counts(genuine, forgeries).value();
}

inline double mean_auc(std::span<const UserScores> users) {
  double sum = 0;
  std::size_t k = 0;
  for (const auto& u : users) {
    if (u.genuine.empty() || u.skilled.empty()) continue;
    sum += roc_auc(u.genuine, u.skilled);
    ++k;
  }
  require(k > 0, Errc::EmptyScores, "no user has both genuine and skilled scores");
  return sum / static_cast<double>(k);
}

/// Pools genuine and skilled scores over validation users and returns the
/// global-EER threshold.
inline double select_validation_threshold(std::span<const UserScores> validation) {
  std::vector<double> g, s;
  for (const auto& u : validation) {
    g.insert(g.end(), u.genuine.begin(), u.genuine.end());
    s.insert(s.end(), u.skilled.begin(), u.skilled.end());
  }
  return eer_global(g, s).threshold;
}

// ---------------------------------------------------------------- reports

struct UserMetrics {
  std::string user_id;
  double frr = 0, far_random = 0, far_skilled = 0, eer = 0, eer_random = 0, auc = 0;
};

/// One run's metrics, in percent except AUC.
struct RunMetrics {
  double frr = 0;
  double far_random = 0;
  double far_skilled = 0;
  double eer_global = 0;
  double eer_user = 0;
  double mean_auc = 0;
  double eer_user_random = 0;
  double threshold = 0;
  std::vector<UserMetrics> per_user;
};

inline RunMetrics evaluate_run(std::span<const UserScores> users, double threshold) {
  require(!users.empty(), Errc::EmptyScores, "no users to evaluate");
  RunMetrics r;
  r.threshold = threshold;
  std::vector<double> g, s, rnd;
  for (const auto& u : users) {
    g.insert(g.end(), u.genuine.begin(), u.genuine.end());
    s.insert(s.end(), u.skilled.begin(), u.skilled.end());
    rnd.insert(rnd.end(), u.random.begin(), u.random.end());
    UserMetrics um;
    um.user_id = u.user_id;
    if (!u.genuine.empty() && !u.skilled.empty()) {
      um.frr = 100 * far_frr_at(u.genuine, u.skilled, threshold).frr;
      um.far_skilled = 100 * far_frr_at(u.genuine, u.skilled, threshold).far;
      um.eer = 100 * eer_global(u.genuine, u.skilled).eer;
      um.auc = roc_auc(u.genuine, u.skilled);
    }
    if (!u.genuine.empty() && !u.random.empty()) {
      um.far_random = 100 * far_frr_at(u.genuine, u.random, threshold).far;
      um.eer_random = 100 * eer_global(u.genuine, u.random).eer;
    }
    r.per_user.push_back(std::move(um));
  }
  r.frr = 100 * far_frr_at(g, s, threshold).frr;
  r.far_skilled = 100 * far_frr_at(g, s, threshold).far;
  if (!rnd.empty()) {
    r.far_random = 100 * far_frr_at(g, rnd, threshold).far;
    r.eer_user_random = 100 * eer_user_random(users);
  }
  r.eer_global = 100 * eer_global(g, s).eer;
  r.eer_user = 100 * eer_user(users);
  r.mean_auc = mean_auc(users);
  return r;
}

struct MeanStd {
  double mean = 0;
  double std = 0;
};

/// Arithmetic mean and sample (n-1) standard deviation; 0 for a single value.
inline MeanStd mean_std(std::span<const double> v) {
  MeanStd out;
  if (v.empty()) return out;
  double s = 0;
  for (double x : v) s += x;
  out.mean = s / static_cast<double>(v.size());
  if (v.size() > 1) {
    double q = 0;
    for (double x : v) q += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(q / static_cast<double>(v.size() - 1));
  }
  return out;
}

struct EvalReport {
  std::size_t runs = 0;
  MeanStd frr, far_random, far_skilled, eer_global, eer_user, mean_auc, eer_user_random, threshold;
  std::vector<RunMetrics> per_run;
};

inline EvalReport aggregate_runs(std::span<const RunMetrics> runs) {
  require(!runs.empty(), Errc::InvalidArgument, "aggregate_runs needs at least one run");
  EvalReport rep;
  rep.runs = runs.size();
  auto field = [&](double RunMetrics::*p) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.*p);
    // sorted so that the summation order, and so the result, is permutation invariant
    std::sort(v.begin(), v.end());
    return mean_std(v);
  };
  rep.frr = field(&RunMetrics::frr);
  rep.far_random = field(&RunMetrics::far_random);
  rep.far_skilled = field(&RunMetrics::far_skilled);
  rep.eer_global = field(&RunMetrics::eer_global);
  rep.eer_user = field(&RunMetrics::eer_user);
  rep.mean_auc = field(&RunMetrics::mean_auc);
  rep.eer_user_random = field(&RunMetrics::eer_user_random);
  rep.threshold = field(&RunMetrics::threshold);
  rep.per_run.assign(runs.begin(), runs.end());
  return rep;
}

inline nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

inline nlohmann::json to_json(const RunMetrics& r) {
  nlohmann::json users = nlohmann::json::array();
  for (const auto& u : r.per_user)
    users.push_back({{"user_id", u.user_id},
                     {"FRR", u.frr},
                     {"FAR_random", u.far_random},
                     {"FAR_skilled", u.far_skilled},
                     {"EER", u.eer},
                     {"EER_random", u.eer_random},
                     {"AUC", u.auc}});
  return {{"FRR", r.frr},           {"FAR_random", r.far_random}, {"FAR_skilled", r.far_skilled},
          {"EER_global", r.eer_global}, {"EER_user", r.eer_user},   {"mean_AUC", r.mean_auc},
          {"EER_user_random", r.eer_user_random}, {"threshold", r.threshold}, {"per_user", users}};
}

inline nlohmann::json to_json(const EvalReport& rep) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : rep.per_run) runs.push_back(to_json(r));
  return {{"decision_rule", "accept iff score >= threshold"},
          {"units", "percent (AUC as fraction)"},
          {"runs", rep.runs},
          {"FRR", to_json(rep.frr)},
          {"FAR_random", to_json(rep.far_random)},
          {"FAR_skilled", to_json(rep.far_skilled)},
          {"EER_global", to_json(rep.eer_global)},
          {"EER_user", to_json(rep.eer_user)},
          {"mean_AUC", to_json(rep.mean_auc)},
          {"EER_user_random", to_json(rep.eer_user_random)},
          {"threshold", to_json(rep.threshold)},
          {"per_run", runs}};
}

inline std::string format_table(const EvalReport& rep, const std::string& title = {}) {
  auto cell = [](const MeanStd& m, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f +- %.*f", prec, m.mean, prec, m.std);
    return std::string(buf);
  };
  char line[512];
  std::string out;
  if (!title.empty()) out += title + "\n";
  out += "# decision rule: accept iff score >= threshold; rates in %, " + std::to_string(rep.runs) + " run(s)\n";
  std::snprintf(line, sizeof line, "%-18s %-18s %-18s %-18s %-18s %-18s\n", "FRR", "FAR_random", "FAR_skilled",
                "EER_global", "EER_user", "Mean AUC");
  out += line;
  std::snprintf(line, sizeof line, "%-18s %-18s %-18s %-18s %-18s %-18s\n", cell(rep.frr, 2).c_str(),
                cell(rep.far_random, 2).c_str(), cell(rep.far_skilled, 2).c_str(), cell(rep.eer_global, 2).c_str(),
                cell(rep.eer_user, 2).c_str(), cell(rep.mean_auc, 4).c_str());
  out += line;
  return out;
}

}  // namespace sigver
