#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sigver/error.hpp"
#include "sigver/image.hpp"
#include "sigver/parallel.hpp"
#include "sigver/rng.hpp"

namespace sigver {

struct EmbeddedSample {
  std::string user_id;
  SignatureLabel label = SignatureLabel::genuine;
  std::vector<double> features;
};

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), Errc::DimensionMismatch, "vectors differ in length");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

struct DistancePopulations {
  std::vector<double> gg;  // genuine-genuine, same user
  std::vector<double> gr;  // genuine vs other users' genuine
  std::vector<double> gs;  // genuine vs skilled forgery of the same user
};

/// Enumerates every qualifying unordered pair. Users are visited in id
/// order and samples in input order, so the output order is deterministic.
inline DistancePopulations distance_populations(const std::vector<EmbeddedSample>& samples) {
  std::map<std::string, std::pair<std::vector<const EmbeddedSample*>, std::vector<const EmbeddedSample*>>> by_user;
  for (const auto& s : samples) {
    auto& slot = by_user[s.user_id];
    if (s.label == SignatureLabel::genuine) slot.first.push_back(&s);
    else if (s.label == SignatureLabel::skilled_forgery) slot.second.push_back(&s);
  }
  DistancePopulations pop;
  for (const auto& [uid, gs] : by_user) {
    require(gs.first.size() >= 2, Errc::InsufficientSamples,
            "user " + uid + " has " + std::to_string(gs.first.size()) + " genuine embeddings, need >= 2");
    const auto& g = gs.first;
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = i + 1; j < g.size(); ++j) pop.gg.push_back(euclidean(g[i]->features, g[j]->features));
    for (const auto* a : g)
      for (const auto* f : gs.second) pop.gs.push_back(euclidean(a->features, f->features));
  }
  for (auto u = by_user.begin(); u != by_user.end(); ++u)
    for (auto v = std::next(u); v != by_user.end(); ++v)
      for (const auto* a : u->second.first)
        for (const auto* b : v->second.first) pop.gr.push_back(euclidean(a->features, b->features));
  return pop;
}

struct CumulativeCurves {
  std::vector<double> distance;
  std::vector<double> gg_invcdf;  // fraction of gg pairs with distance > d
  std::vector<double> gr_cdf;     // fraction of gr pairs with distance < d
  std::vector<double> gs_cdf;     // fraction of gs pairs with distance < d
};

/// Linear-interpolated percentile, q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  require(!v.empty(), Errc::EmptyScores, "percentile of empty list");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// `points` evenly spaced values from 0 to the 99.5th percentile of all distances.
inline std::vector<double> default_grid(const DistancePopulations& pop, std::size_t points = 512) {
  std::vector<double> all(pop.gg);
  all.insert(all.end(), pop.gr.begin(), pop.gr.end());
  all.insert(all.end(), pop.gs.begin(), pop.gs.end());
  const double top = percentile(std::move(all), 99.5);
  std::vector<double> grid(points);
  for (std::size_t i = 0; i < points; ++i)
    grid[i] = points == 1 ? 0.0 : top * static_cast<double>(i) / static_cast<double>(points - 1);
  return grid;
}

inline CumulativeCurves cumulative_curves(const DistancePopulations& pop, const std::vector<double>& grid) {
  require(!pop.gg.empty() && !pop.gr.empty() && !pop.gs.empty(), Errc::EmptyScores,
          "cumulative curves need non-empty gg, gr and gs populations");
  auto sorted = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto gg = sorted(pop.gg), gr = sorted(pop.gr), gs = sorted(pop.gs);
  auto below = [](const std::vector<double>& v, double d) {
    return static_cast<double>(std::lower_bound(v.begin(), v.end(), d) - v.begin()) / static_cast<double>(v.size());
  };
  auto above = [](const std::vector<double>& v, double d) {
    return static_cast<double>(v.end() - std::upper_bound(v.begin(), v.end(), d)) / static_cast<double>(v.size());
  };
  CumulativeCurves c;
  c.distance = grid;
  for (double d : grid) {
    c.gg_invcdf.push_back(above(gg, d));
    c.gr_cdf.push_back(below(gr, d));
    c.gs_cdf.push_back(below(gs, d));
  }
  return c;
}

/// Area where the gg inverse-CDF and a forgery CDF are both high:
/// trapezoid integral of min(gg_invcdf, cdf) over the grid.
inline double curve_overlap(const std::vector<double>& grid, const std::vector<double>& gg_invcdf,
                            const std::vector<double>& cdf) {
  double area = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double a = std::min(gg_invcdf[i - 1], cdf[i - 1]), b = std::min(gg_invcdf[i], cdf[i]);
    area += 0.5 * (a + b) * (grid[i] - grid[i - 1]);
  }
  return area;
}

inline std::string curves_csv(const CumulativeCurves& c) {
  std::ostringstream os;
  os.precision(17);
  os << "distance,gg_invcdf,gr_cdf,gs_cdf\n";
  for (std::size_t i = 0; i < c.distance.size(); ++i)
    os << c.distance[i] << ',' << c.gg_invcdf[i] << ',' << c.gr_cdf[i] << ',' << c.gs_cdf[i] << '\n';
  return os.str();
}

// ---------------------------------------------------------------- t-SNE

using Matrix = std::vector<std::vector<double>>;

inline Matrix squared_distances(const std::vector<std::vector<double>>& x) {
  Matrix d(x.size(), std::vector<double>(x.size(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < x[i].size(); ++k) s += (x[i][k] - x[j][k]) * (x[i][k] - x[j][k]);
      d[i][j] = d[j][i] = s;
    }
  return d;
}

struct TsneAffinities {
  std::vector<double> sigma;
  std::vector<double> perplexity;  // achieved, per point
  Matrix conditional;              // row i: p_{j|i}
  Matrix joint;                    // (p_{j|i} + p_{i|j}) / 2n
};

/// Bisection on beta = 1/(2 sigma^2) per point until 2^H(P_i) is within
/// `tolerance` of the target perplexity.
inline TsneAffinities tsne_calibrate(const Matrix& sqdist, double perplexity, double tolerance = 1e-3,
                                     int max_steps = 200) {
  const std::size_t n = sqdist.size();
  require(n >= 3, Errc::InsufficientSamples, "t-SNE needs at least 3 points");
  require(perplexity > 0 && perplexity < static_cast<double>(n), Errc::InvalidArgument,
          "perplexity must be in (0, n), got " + std::to_string(perplexity) + " for n=" + std::to_string(n));
  TsneAffinities out;
  out.sigma.resize(n);
  out.perplexity.resize(n);
  out.conditional.assign(n, std::vector<double>(n, 0.0));

  std::vector<double> dshift(n), p(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity(), dsum = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, sqdist[i][j]);
    for (std::size_t j = 0; j < n; ++j) {
      dshift[j] = j == i ? 0 : sqdist[i][j] - dmin;
      if (j != i) dsum += dshift[j];
    }
    // starting at 1/mean keeps the search covariant when distances are rescaled
    double beta = dsum > 0 ? static_cast<double>(n - 1) / dsum : 1.0;
    double lo = 0, hi = std::numeric_limits<double>::infinity();
    bool ok = false;
    double perp = 0;
    for (int step = 0; step <= max_steps; ++step) {
      double z = 0, wsum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        p[j] = j == i ? 0 : std::exp(-beta * dshift[j]);
        z += p[j];
        wsum += p[j] * dshift[j];
      }
      const double h = std::log(z) + beta * wsum / z;  // nats
      perp = std::exp(h);
      if (std::abs(perp - perplexity) < tolerance) {
        ok = true;
        break;
      }
      if (perp > perplexity) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
      } else {
        hi = beta;
        beta = (beta + lo) / 2;
      }
    }
    require(ok, Errc::NoConvergence,
            "perplexity bisection for point " + std::to_string(i) + " did not converge (reached " +
                std::to_string(perp) + ", target " + std::to_string(perplexity) + ")");
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += p[j];
    for (std::size_t j = 0; j < n; ++j) out.conditional[i][j] = p[j] / z;
    out.sigma[i] = std::sqrt(1.0 / (2.0 * beta));
    out.perplexity[i] = perp;
  }
  out.joint.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.joint[i][j] = (out.conditional[i][j] + out.conditional[j][i]) / (2.0 * static_cast<double>(n));
  return out;
}

struct TsneConfig {
  double perplexity = 30;
  int iterations = 1000;
  double learning_rate = 200;
  double early_exaggeration = 12;
  int exaggeration_iterations = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  int momentum_switch = 250;
  double init_std = 1e-4;
  std::uint64_t seed = 1;
  unsigned threads = 1;

  void validate() const {
    require(perplexity > 0, Errc::InvalidArgument, "perplexity must be positive");
    require(iterations >= 1, Errc::InvalidArgument, "iterations must be >= 1");
    require(learning_rate > 0, Errc::InvalidArgument, "learning rate must be positive");
  }
};

struct TsneResult {
  std::vector<std::array<double, 2>> y;
  std::vector<double> kl_trace;  // KL(P||Q) before each update, then the final value
  double initial_kl = 0;
  double final_kl = 0;
};

namespace detail {

// Student-t affinities; returns KL(P||Q) and fills the unnormalised kernel.
inline double tsne_kernel(const std::vector<std::array<double, 2>>& y, const Matrix& P, Matrix& num, double& z,
                          unsigned threads) {
  const std::size_t n = y.size();
  std::vector<double> rowsum(n, 0.0);
  parallel_for(n, threads, [&](std::size_t i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) {
        num[i][j] = 0;
        continue;
      }
      const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
      num[i][j] = 1.0 / (1.0 + dx * dx + dy * dy);
      s += num[i][j];
    }
    rowsum[i] = s;
  });
  z = 0;
  for (double s : rowsum) z += s;
  std::vector<double> klrow(n, 0.0);
  parallel_for(n, threads, [&](std::size_t i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && P[i][j] > 0) s += P[i][j] * std::log(P[i][j] / std::max(num[i][j] / z, 1e-300));
    klrow[i] = s;
  });
  double kl = 0;
  for (double s : klrow) kl += s;
  return kl;
}

}  // namespace detail

/// Exact-gradient t-SNE with momentum, per-coordinate gains and early
/// exaggeration.
inline TsneResult tsne_embed(const Matrix& P, const TsneConfig& cfg) {
  cfg.validate();
  const std::size_t n = P.size();
  require(n >= 2, Errc::InsufficientSamples, "t-SNE needs at least 2 points");
  TsneResult res;
  res.y.resize(n);
  Rng rng(cfg.seed);
  std::normal_distribution<double> init(0.0, cfg.init_std);
  for (auto& p : res.y) p = {init(rng), init(rng)};

  std::vector<std::array<double, 2>> vel(n, {0, 0}), gains(n, {1, 1}), grad(n, {0, 0});
  Matrix num(n, std::vector<double>(n, 0.0));
  double z = 0;
  for (int it = 0; it < cfg.iterations; ++it) {
    const double kl = detail::tsne_kernel(res.y, P, num, z, cfg.threads);
    res.kl_trace.push_back(kl);
    if (it == 0) res.initial_kl = kl;
    const double exag = it < cfg.exaggeration_iterations ? cfg.early_exaggeration : 1.0;
    const double mom = it < cfg.momentum_switch ? cfg.initial_momentum : cfg.final_momentum;
    parallel_for(n, cfg.threads, [&](std::size_t i) {
      double gx = 0, gy = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double m = (exag * P[i][j] - num[i][j] / z) * num[i][j];
        gx += m * (res.y[i][0] - res.y[j][0]);
        gy += m * (res.y[i][1] - res.y[j][1]);
      }
      grad[i] = {4 * gx, 4 * gy};
    });
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 2; ++k) {
        const bool same_sign = (grad[i][k] > 0) == (vel[i][k] > 0);
        gains[i][k] = std::max(0.01, same_sign ? gains[i][k] * 0.8 : gains[i][k] + 0.2);
        vel[i][k] = mom * vel[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
        res.y[i][k] += vel[i][k];
      }
    double cx = 0, cy = 0;
    for (const auto& p : res.y) cx += p[0], cy += p[1];
    cx /= static_cast<double>(n);
    cy /= static_cast<double>(n);
    for (auto& p : res.y) p[0] -= cx, p[1] -= cy;
  }
  res.final_kl = detail::tsne_kernel(res.y, P, num, z, cfg.threads);
  res.kl_trace.push_back(res.final_kl);
  return res;
}

inline std::string tsne_csv(const std::vector<EmbeddedSample>& samples, const TsneResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "point_id,user_id,label,x,y\n";
  for (std::size_t i = 0; i < r.y.size(); ++i)
    os << i << ',' << samples[i].user_id << ',' << label_name(samples[i].label) << ',' << r.y[i][0] << ','
       << r.y[i][1] << '\n';
  return os.str();
}

}  // namespace sigver
