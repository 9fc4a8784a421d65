#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sigver/error.hpp"
#include "sigver/rng.hpp"

namespace sigver {

using FeatureVector = std::vector<double>;

enum class KernelKind { linear, rbf };

constexpr std::string_view kernel_name(KernelKind k) { return k == KernelKind::linear ? "linear" : "rbf"; }

inline KernelKind parse_kernel(std::string_view s) {
  if (s == "linear") return KernelKind::linear;
  if (s == "rbf") return KernelKind::rbf;
  fail(Errc::InvalidArgument, "unknown kernel '" + std::string(s) + "'");
}

struct Kernel {
  KernelKind kind = KernelKind::linear;
  double gamma = 1.0;

  double operator()(std::span<const double> a, std::span<const double> b) const {
    if (kind == KernelKind::linear) {
      double s = 0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      return s;
    }
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double t = a[i] - b[i];
      d += t * t;
    }
    return std::exp(-gamma * d);
  }
};

// ---------------------------------------------------------------- training sets

struct DevUser {
  std::string user_id;
  std::vector<FeatureVector> genuine;
};

struct WdTrainingSet {
  std::string user_id;
  std::vector<FeatureVector> positives;  // after duplication
  std::vector<FeatureVector> negatives;
  std::size_t duplication_factor = 1;
  std::vector<std::size_t> positive_indices;  // chosen genuine samples (before duplication)
  std::vector<std::size_t> held_out_indices;  // remaining genuine samples, for testing
  std::vector<std::string> negative_users;
};

struct WdSetOptions {
  std::size_t negatives = 14;
};

/// Duplication factor that roughly balances r positives against the negatives.
inline std::size_t duplication_factor(std::size_t r, std::size_t negatives) {
  require(r >= 1, Errc::InvalidArgument, "r must be >= 1");
  const long f = std::lround(static_cast<double>(negatives) / static_cast<double>(r));
  return static_cast<std::size_t>(std::max(1L, f));
}

/// Picks r genuine positives (seeded), one genuine signature from each of
/// `opts.negatives` distinct development users, then duplicates the positive
/// set as a whole. Development users listed in `exploitation_users` are a
/// protocol violation.
inline WdTrainingSet build_wd_training_set(const std::string& user_id, std::span<const FeatureVector> user_genuine,
                                           std::size_t r, std::span<const DevUser> dev_pool, std::uint64_t seed,
                                           const WdSetOptions& opts = {},
                                           const std::set<std::string>* exploitation_users = nullptr) {
  require(r >= 1 && user_genuine.size() >= r, Errc::InsufficientSamples,
          "user " + user_id + " has " + std::to_string(user_genuine.size()) + " genuine samples, need " +
              std::to_string(r));
  Rng rng(seed);
  WdTrainingSet set;
  set.user_id = user_id;

  std::vector<std::size_t> idx(user_genuine.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  set.positive_indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(r));
  set.held_out_indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(r), idx.end());

  std::vector<std::size_t> eligible;
  for (std::size_t u = 0; u < dev_pool.size(); ++u) {
    if (exploitation_users && exploitation_users->count(dev_pool[u].user_id))
      fail(Errc::InvalidArgument, "negative pool contains exploitation user " + dev_pool[u].user_id);
    if (dev_pool[u].user_id != user_id && !dev_pool[u].genuine.empty()) eligible.push_back(u);
  }
  require(eligible.size() >= opts.negatives, Errc::InsufficientSamples,
          "need " + std::to_string(opts.negatives) + " distinct development users for negatives, have " +
              std::to_string(eligible.size()));
  std::shuffle(eligible.begin(), eligible.end(), rng);
  for (std::size_t k = 0; k < opts.negatives; ++k) {
    const DevUser& du = dev_pool[eligible[k]];
    std::uniform_int_distribution<std::size_t> pick(0, du.genuine.size() - 1);
    set.negatives.push_back(du.genuine[pick(rng)]);
    set.negative_users.push_back(du.user_id);
  }

  set.duplication_factor = duplication_factor(r, opts.negatives);
  for (std::size_t d = 0; d < set.duplication_factor; ++d)
    for (auto i : set.positive_indices) set.positives.push_back(user_genuine[i]);
  return set;
}

// ---------------------------------------------------------------- SMO solver

struct DualSolution {
  std::vector<double> alpha;
  double bias = 0;  // decision = sum(alpha_i y_i K(x_i, x)) + bias
  double kkt_violation = 0;
  std::size_t iterations = 0;
  bool converged = false;
};

struct SmoOptions {
  double tolerance = 1e-3;
  std::size_t max_iterations = 0;  // 0: max(10'000'000, 100 n)
};

/// Soft-margin dual, min 1/2 a'Qa - e'a with 0 <= a_i <= C_i and y'a = 0,
/// solved by SMO with second-order working-set selection. Stops when the
/// maximal KKT violation m(a) - M(a) drops below the tolerance.
inline DualSolution solve_svm_dual(const std::vector<std::vector<double>>& gram, std::span<const int> y,
                                   std::span<const double> upper, const SmoOptions& opts = {}) {
  const std::size_t n = y.size();
  require(n >= 2 && gram.size() == n && upper.size() == n, Errc::DimensionMismatch, "SMO input sizes disagree");
  constexpr double tau = 1e-12;
  auto Q = [&](std::size_t i, std::size_t j) { return y[i] * y[j] * gram[i][j]; };

  DualSolution sol;
  sol.alpha.assign(n, 0.0);
  std::vector<double> G(n, -1.0);
  auto& a = sol.alpha;
  auto is_upper = [&](std::size_t t) { return a[t] >= upper[t]; };
  auto is_lower = [&](std::size_t t) { return a[t] <= 0.0; };
  const std::size_t cap = opts.max_iterations ? opts.max_iterations : std::max<std::size_t>(10'000'000, 100 * n);

  for (;;) {
    double gmax = -std::numeric_limits<double>::infinity();
    std::ptrdiff_t i = -1;
    for (std::size_t t = 0; t < n; ++t) {
      if (y[t] == 1) {
        if (!is_upper(t) && -G[t] >= gmax) gmax = -G[t], i = static_cast<std::ptrdiff_t>(t);
      } else if (!is_lower(t) && G[t] >= gmax) {
        gmax = G[t], i = static_cast<std::ptrdiff_t>(t);
      }
    }
    double gmax2 = -std::numeric_limits<double>::infinity();
    std::ptrdiff_t j = -1;
    double best_obj = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      if (y[t] == 1) {
        if (is_lower(t)) continue;
        gmax2 = std::max(gmax2, G[t]);
        const double grad_diff = gmax + G[t];
        if (i >= 0 && grad_diff > 0) {
          const auto iu = static_cast<std::size_t>(i);
          double quad = gram[iu][iu] + gram[t][t] - 2.0 * y[iu] * Q(iu, t);
          const double obj = -(grad_diff * grad_diff) / (quad > 0 ? quad : tau);
          if (obj <= best_obj) best_obj = obj, j = static_cast<std::ptrdiff_t>(t);
        }
      } else {
        if (is_upper(t)) continue;
        gmax2 = std::max(gmax2, -G[t]);
        const double grad_diff = gmax - G[t];
        if (i >= 0 && grad_diff > 0) {
          const auto iu = static_cast<std::size_t>(i);
          double quad = gram[iu][iu] + gram[t][t] + 2.0 * y[iu] * Q(iu, t);
          const double obj = -(grad_diff * grad_diff) / (quad > 0 ? quad : tau);
          if (obj <= best_obj) best_obj = obj, j = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    sol.kkt_violation = std::max(0.0, gmax + gmax2);
    if (i < 0 || j < 0 || gmax + gmax2 < opts.tolerance) {
      sol.converged = true;
      break;
    }
    if (sol.iterations >= cap) break;
    ++sol.iterations;

    const auto ii = static_cast<std::size_t>(i), jj = static_cast<std::size_t>(j);
    const double Ci = upper[ii], Cj = upper[jj];
    const double old_ai = a[ii], old_aj = a[jj];
    if (y[ii] != y[jj]) {
      double quad = gram[ii][ii] + gram[jj][jj] + 2 * Q(ii, jj);
      if (quad <= 0) quad = tau;
      const double delta = (-G[ii] - G[jj]) / quad;
      const double diff = a[ii] - a[jj];
      a[ii] += delta;
      a[jj] += delta;
      if (diff > 0) {
        if (a[jj] < 0) a[jj] = 0, a[ii] = diff;
      } else if (a[ii] < 0) {
        a[ii] = 0, a[jj] = -diff;
      }
      if (diff > Ci - Cj) {
        if (a[ii] > Ci) a[ii] = Ci, a[jj] = Ci - diff;
      } else if (a[jj] > Cj) {
        a[jj] = Cj, a[ii] = Cj + diff;
      }
    } else {
      double quad = gram[ii][ii] + gram[jj][jj] - 2 * Q(ii, jj);
      if (quad <= 0) quad = tau;
      const double delta = (G[ii] - G[jj]) / quad;
      const double sum = a[ii] + a[jj];
      a[ii] -= delta;
      a[jj] += delta;
      if (sum > Ci) {
        if (a[ii] > Ci) a[ii] = Ci, a[jj] = sum - Ci;
      } else if (a[jj] < 0) {
        a[jj] = 0, a[ii] = sum;
      }
      if (sum > Cj) {
        if (a[jj] > Cj) a[jj] = Cj, a[ii] = sum - Cj;
      } else if (a[ii] < 0) {
        a[ii] = 0, a[jj] = sum;
      }
    }
    const double dai = a[ii] - old_ai, daj = a[jj] - old_aj;
    for (std::size_t t = 0; t < n; ++t) G[t] += Q(ii, t) * dai + Q(jj, t) * daj;
  }

  // Offset from free variables, else the midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity();
  double sum_free = 0;
  std::size_t nfree = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yG = y[t] * G[t];
    if (is_upper(t)) {
      if (y[t] == -1) ub = std::min(ub, yG);
      else lb = std::max(lb, yG);
    } else if (is_lower(t)) {
      if (y[t] == 1) ub = std::min(ub, yG);
      else lb = std::max(lb, yG);
    } else {
      ++nfree;
      sum_free += yG;
    }
  }
  const double rho = nfree > 0 ? sum_free / static_cast<double>(nfree) : (ub + lb) / 2;
  sol.bias = -rho;
  return sol;
}

/// Dual objective in maximisation form: sum(a) - 1/2 sum a_i a_j y_i y_j K_ij.
inline double dual_objective(const std::vector<std::vector<double>>& gram, std::span<const int> y,
                             std::span<const double> alpha) {
  double lin = 0, quad = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    lin += alpha[i];
    for (std::size_t j = 0; j < y.size(); ++j) quad += alpha[i] * alpha[j] * y[i] * y[j] * gram[i][j];
  }
  return lin - 0.5 * quad;
}

inline std::vector<std::vector<double>> gram_matrix(const std::vector<FeatureVector>& x, const Kernel& k) {
  std::vector<std::vector<double>> g(x.size(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i; j < x.size(); ++j) g[i][j] = g[j][i] = k(x[i], x[j]);
  return g;
}

// ---------------------------------------------------------------- WD model

struct WdModel {
  KernelKind kind = KernelKind::linear;
  std::string user_id;
  std::size_t dim = 0;
  std::vector<double> weights;                     // linear
  std::vector<FeatureVector> support_vectors;      // rbf
  std::vector<double> dual_coef;                   // alpha_i * y_i per support vector
  std::vector<int> support_labels;
  double bias = 0;
  double C = 1;
  double gamma = 0;
  bool converged = true;  // false: iteration cap hit, best iterate returned
  double kkt_violation = 0;
  std::size_t iterations = 0;
  std::string extractor_hash;
};

struct SvmParams {
  KernelKind kind = KernelKind::linear;
  double C = 1.0;
  double gamma = 0;  // <= 0: 1 / (N * var(features))
  double positive_weight = 1.0;  // class-weighted C for positives
  SmoOptions smo;
};

/// 1 / (N * variance of all feature values), or 1/N for constant features.
inline double default_rbf_gamma(const std::vector<FeatureVector>& x) {
  require(!x.empty() && !x[0].empty(), Errc::InvalidArgument, "empty feature set");
  const std::size_t d = x[0].size();
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& v : x)
    for (double f : v) sum += f, sq += f * f, ++n;
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  return var > 1e-300 ? 1.0 / (static_cast<double>(d) * var) : 1.0 / static_cast<double>(d);
}

struct TrainedSvm {
  WdModel model;
  DualSolution solution;
  std::vector<FeatureVector> points;
  std::vector<int> labels;
};

inline TrainedSvm train_svm_full(const std::vector<FeatureVector>& positives,
                                 const std::vector<FeatureVector>& negatives, const SvmParams& params,
                                 const std::string& user_id = {}) {
  require(!positives.empty() && !negatives.empty(), Errc::InsufficientSamples, "both classes must be non-empty");
  require(params.C > 0, Errc::InvalidArgument, "C must be positive");
  TrainedSvm t;
  t.points = positives;
  t.points.insert(t.points.end(), negatives.begin(), negatives.end());
  const std::size_t dim = t.points[0].size();
  for (const auto& p : t.points) require(p.size() == dim, Errc::DimensionMismatch, "feature dimension mismatch");
  t.labels.assign(positives.size(), 1);
  t.labels.insert(t.labels.end(), negatives.size(), -1);

  Kernel k{params.kind, params.kind == KernelKind::rbf
                            ? (params.gamma > 0 ? params.gamma : default_rbf_gamma(t.points))
                            : 0.0};
  std::vector<double> upper(t.points.size());
  for (std::size_t i = 0; i < upper.size(); ++i)
    upper[i] = t.labels[i] == 1 ? params.C * params.positive_weight : params.C;
  t.solution = solve_svm_dual(gram_matrix(t.points, k), t.labels, upper, params.smo);

  WdModel& m = t.model;
  m.kind = params.kind;
  m.user_id = user_id;
  m.dim = dim;
  m.bias = t.solution.bias;
  m.C = params.C;
  m.gamma = k.gamma;
  m.converged = t.solution.converged;
  m.kkt_violation = t.solution.kkt_violation;
  m.iterations = t.solution.iterations;
  if (m.kind == KernelKind::linear) m.weights.assign(dim, 0.0);
  for (std::size_t i = 0; i < t.points.size(); ++i) {
    const double a = t.solution.alpha[i];
    if (a <= 0) continue;
    if (m.kind == KernelKind::linear) {
      for (std::size_t d = 0; d < dim; ++d) m.weights[d] += a * t.labels[i] * t.points[i][d];
    } else {
      m.support_vectors.push_back(t.points[i]);
      m.dual_coef.push_back(a * t.labels[i]);
      m.support_labels.push_back(t.labels[i]);
    }
  }
  return t;
}

inline WdModel train_svm(const WdTrainingSet& set, const SvmParams& params) {
  return train_svm_full(set.positives, set.negatives, params, set.user_id).model;
}

/// Margin score; positive means genuine.
inline double decision_value(const WdModel& m, std::span<const double> x) {
  require(x.size() == m.dim, Errc::DimensionMismatch,
          "query has " + std::to_string(x.size()) + " features, model expects " + std::to_string(m.dim));
  if (m.kind == KernelKind::linear) {
    double s = m.bias;
    for (std::size_t d = 0; d < m.dim; ++d) s += m.weights[d] * x[d];
    return s;
  }
  Kernel k{KernelKind::rbf, m.gamma};
  double s = m.bias;
  for (std::size_t i = 0; i < m.support_vectors.size(); ++i) s += m.dual_coef[i] * k(m.support_vectors[i], x);
  return s;
}

/// decision_value guarded by the feature-extractor identity.
inline double score_checked(const WdModel& m, std::span<const double> x, const std::string& extractor_hash) {
  require(m.extractor_hash == extractor_hash, Errc::ModelMismatch,
          "WD model for user " + m.user_id + " was trained on features from extractor " + m.extractor_hash +
              ", refusing to score features from " + extractor_hash);
  return decision_value(m, x);
}

inline nlohmann::json to_json(const WdModel& m) {
  return {{"format", "sigver-wd"},
          {"version", 1},
          {"kind", kernel_name(m.kind)},
          {"user_id", m.user_id},
          {"dim", m.dim},
          {"weights", m.weights},
          {"support_vectors", m.support_vectors},
          {"dual_coef", m.dual_coef},
          {"support_labels", m.support_labels},
          {"bias", m.bias},
          {"C", m.C},
          {"gamma", m.gamma},
          {"converged", m.converged},
          {"kkt_violation", m.kkt_violation},
          {"iterations", m.iterations},
          {"extractor_hash", m.extractor_hash}};
}

inline WdModel wd_model_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "sigver-wd" && j.value("version", 0) == 1, Errc::InvalidArgument,
          "not a sigver WD model");
  WdModel m;
  m.kind = parse_kernel(j.at("kind").get<std::string>());
  m.user_id = j.at("user_id").get<std::string>();
  m.dim = j.at("dim").get<std::size_t>();
  m.weights = j.at("weights").get<std::vector<double>>();
  m.support_vectors = j.at("support_vectors").get<std::vector<FeatureVector>>();
  m.dual_coef = j.at("dual_coef").get<std::vector<double>>();
  m.support_labels = j.at("support_labels").get<std::vector<int>>();
  m.bias = j.at("bias").get<double>();
  m.C = j.at("C").get<double>();
  m.gamma = j.at("gamma").get<double>();
  m.converged = j.at("converged").get<bool>();
  m.kkt_violation = j.at("kkt_violation").get<double>();
  m.iterations = j.at("iterations").get<std::size_t>();
  m.extractor_hash = j.at("extractor_hash").get<std::string>();
  return m;
}

}  // namespace sigver
