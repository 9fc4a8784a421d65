#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "sigver/embedview.hpp"

using namespace sigver;

namespace {

EmbeddedSample sample(std::string uid, SignatureLabel l, std::vector<double> f) {
  return EmbeddedSample{std::move(uid), l, std::move(f)};
}

// Random population: each user has a cluster center, genuine close, skilled a bit further.
std::vector<EmbeddedSample> random_samples(std::uint64_t seed, std::size_t users, std::size_t dim) {
  Rng rng(seed);
  std::uniform_int_distribution<int> ng(2, 6), ns(0, 4);
  std::normal_distribution<double> z(0, 1);
  std::vector<EmbeddedSample> out;
  for (std::size_t u = 0; u < users; ++u) {
    std::vector<double> c(dim);
    for (auto& v : c) v = 3 * z(rng);
    const int g = ng(rng), s = ns(rng);
    for (int k = 0; k < g + s; ++k) {
      std::vector<double> f(c);
      const double spread = k < g ? 0.5 : 1.2;
      for (auto& v : f) v += spread * z(rng);
      out.push_back(sample("u" + std::to_string(u), k < g ? SignatureLabel::genuine : SignatureLabel::skilled_forgery,
                           std::move(f)));
    }
  }
  return out;
}

std::vector<std::vector<double>> random_points(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z(0, 1);
  std::vector<std::vector<double>> x(n, std::vector<double>(dim));
  for (auto& p : x)
    for (auto& v : p) v = z(rng);
  return x;
}

}  // namespace

TEST(Distances, Examples) {
  EXPECT_DOUBLE_EQ(euclidean({0, 0}, {3, 4}), 5.0);
  EXPECT_EQ(euclidean({1.5, -2, 7}, {1.5, -2, 7}), 0.0);
  EXPECT_THROW(euclidean({1}, {1, 2}), Error);

  const std::vector<EmbeddedSample> one{sample("a", SignatureLabel::genuine, {0, 0}),
                                        sample("a", SignatureLabel::genuine, {3, 4}),
                                        sample("a", SignatureLabel::genuine, {3, 4})};
  const auto pop = distance_populations(one);
  ASSERT_EQ(pop.gg.size(), 3u);
  EXPECT_DOUBLE_EQ(pop.gg[0], 5.0);
  EXPECT_DOUBLE_EQ(pop.gg[1], 5.0);
  EXPECT_EQ(pop.gg[2], 0.0);
  EXPECT_TRUE(pop.gr.empty());
  EXPECT_TRUE(pop.gs.empty());
}

TEST(Distances, InsufficientGenuine) {
  const std::vector<EmbeddedSample> s{sample("a", SignatureLabel::genuine, {0}),
                                      sample("a", SignatureLabel::genuine, {1}),
                                      sample("b", SignatureLabel::genuine, {2}),
                                      sample("b", SignatureLabel::skilled_forgery, {3})};
  try {
    distance_populations(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InsufficientSamples);
  }
}

TEST(Distances, PairCountsAreExact) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const auto s = random_samples(seed, 2 + seed % 5, 3);
    std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
    for (const auto& e : s) {
      if (e.label == SignatureLabel::genuine) ++counts[e.user_id].first;
      else ++counts[e.user_id].second;
    }
    std::size_t gg = 0, gs = 0, gr = 0, total_g = 0;
    for (const auto& [u, c] : counts) {
      gg += c.first * (c.first - 1) / 2;
      gs += c.first * c.second;
      total_g += c.first;
    }
    for (const auto& [u, c] : counts) gr += c.first * (total_g - c.first);
    gr /= 2;
    const auto pop = distance_populations(s);
    EXPECT_EQ(pop.gg.size(), gg);
    EXPECT_EQ(pop.gs.size(), gs);
    EXPECT_EQ(pop.gr.size(), gr);
    for (const auto* v : {&pop.gg, &pop.gr, &pop.gs})
      for (double d : *v) EXPECT_GE(d, 0.0);
  }
}

TEST(Curves, Examples) {
  DistancePopulations pop{{1, 2, 3}, {4, 5}, {2, 6}};
  const auto c = cumulative_curves(pop, {0.5, 2.5});
  EXPECT_EQ(c.gg_invcdf[0], 1.0);
  EXPECT_EQ(c.gr_cdf[0], 0.0);
  EXPECT_EQ(c.gs_cdf[0], 0.0);
  EXPECT_DOUBLE_EQ(c.gg_invcdf[1], 1.0 / 3.0);
  EXPECT_EQ(c.gs_cdf[1], 0.5);
  EXPECT_EQ(c.gr_cdf[1], 0.0);
  try {
    cumulative_curves(DistancePopulations{{1}, {}, {1}}, {0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyScores);
  }
}

TEST(Curves, MonotoneOnDefaultGrid) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto pop = distance_populations(random_samples(seed, 4, 5));
    if (pop.gs.empty()) continue;
    const auto grid = default_grid(pop, 128);
    ASSERT_EQ(grid.size(), 128u);
    EXPECT_EQ(grid.front(), 0.0);
    const auto c = cumulative_curves(pop, grid);
    for (std::size_t i = 1; i < grid.size(); ++i) {
      EXPECT_LE(c.gg_invcdf[i], c.gg_invcdf[i - 1]);
      EXPECT_GE(c.gr_cdf[i], c.gr_cdf[i - 1]);
      EXPECT_GE(c.gs_cdf[i], c.gs_cdf[i - 1]);
    }
    for (const auto* v : {&c.gg_invcdf, &c.gr_cdf, &c.gs_cdf})
      for (double f : *v) {
        EXPECT_GE(f, 0.0);
        EXPECT_LE(f, 1.0);
      }
    const double ov = curve_overlap(grid, c.gg_invcdf, c.gs_cdf);
    EXPECT_GE(ov, 0.0);
    EXPECT_LE(ov, grid.back());
  }
}

// A verifier holding one genuine reference accepts a query iff its distance is < d.
// Simulating it over every (reference, query) assignment must reproduce the curves.
TEST(Curves, MatchOneReferenceClassifier) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto s = random_samples(seed + 100, 5, 4);
    const auto pop = distance_populations(s);
    if (pop.gs.empty()) continue;
    const auto grid = default_grid(pop, 40);
    const auto c = cumulative_curves(pop, grid);
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
      const double d = grid[gi];
      std::size_t rejected = 0, genuine_trials = 0, accepted = 0, forgery_trials = 0, rand_acc = 0, rand_trials = 0;
      for (std::size_t r = 0; r < s.size(); ++r) {
        if (s[r].label != SignatureLabel::genuine) continue;
        for (std::size_t q = 0; q < s.size(); ++q) {
          if (q == r) continue;
          const double dist = euclidean(s[r].features, s[q].features);
          const bool accept = dist < d;
          if (s[q].user_id == s[r].user_id && s[q].label == SignatureLabel::genuine) {
            ++genuine_trials;
            // the classifier rejects a genuine query that is further than d
            if (dist > d) ++rejected;
          } else if (s[q].user_id == s[r].user_id) {
            ++forgery_trials;
            if (accept) ++accepted;
          } else if (s[q].label == SignatureLabel::genuine) {
            ++rand_trials;
            if (accept) ++rand_acc;
          }
        }
      }
      EXPECT_DOUBLE_EQ(c.gg_invcdf[gi], double(rejected) / double(genuine_trials));
      EXPECT_DOUBLE_EQ(c.gs_cdf[gi], double(accepted) / double(forgery_trials));
      EXPECT_DOUBLE_EQ(c.gr_cdf[gi], double(rand_acc) / double(rand_trials));
    }
  }
}

TEST(Curves, Csv) {
  DistancePopulations pop{{1, 2}, {3}, {4}};
  const auto csv = curves_csv(cumulative_curves(pop, {0, 1, 2}));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "distance,gg_invcdf,gr_cdf,gs_cdf");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Percentile, Interpolates) {
  EXPECT_EQ(percentile({3, 1, 2}, 50), 2.0);
  EXPECT_EQ(percentile({0, 10}, 25), 2.5);
  EXPECT_EQ(percentile({5}, 99), 5.0);
  EXPECT_THROW(percentile({}, 50), Error);
}

TEST(TsneCalibrate, EquidistantTriple) {
  const Matrix d{{0, 4, 4}, {4, 0, 4}, {4, 4, 0}};
  const auto a = tsne_calibrate(d, 2.0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(a.perplexity[i], 2.0, 1e-12);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(a.conditional[i][j], i == j ? 0.0 : 0.5);
  }
  double sum = 0;
  for (const auto& r : a.joint)
    for (double v : r) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(TsneCalibrate, Preconditions) {
  const Matrix d{{0, 1, 2}, {1, 0, 1}, {2, 1, 0}};
  for (double p : {3.0, 4.0, 0.0}) {
    try {
      tsne_calibrate(d, p);
      FAIL() << p;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::InvalidArgument);
    }
  }
  EXPECT_THROW(tsne_calibrate(Matrix{{0, 1}, {1, 0}}, 1.0), Error);
  TsneConfig cfg;
  cfg.iterations = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(TsneCalibrate, PerplexityHitsTargetEverywhere) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto x = random_points(60, 8, seed);
    const auto sq = squared_distances(x);
    for (double target : {5.0, 15.0, 30.0}) {
      const auto a = tsne_calibrate(sq, target);
      for (std::size_t i = 0; i < x.size(); ++i) {
        // recompute 2^H in bits from the returned conditional row
        double h = 0, rowsum = 0;
        for (double p : a.conditional[i]) {
          rowsum += p;
          if (p > 0) h -= p * std::log2(p);
        }
        EXPECT_NEAR(rowsum, 1.0, 1e-12);
        EXPECT_LT(std::abs(std::exp2(h) - target), 1e-3) << i;
        EXPECT_LT(std::abs(a.perplexity[i] - target), 1e-3);
      }
      for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < x.size(); ++j) EXPECT_EQ(a.joint[i][j], a.joint[j][i]);
    }
  }
}

TEST(TsneCalibrate, ScaleCovariance) {
  const auto x = random_points(30, 4, 9);
  const auto sq = squared_distances(x);
  const double c = 3.0;
  Matrix scaled(sq);
  for (auto& r : scaled)
    for (auto& v : r) v *= c * c;  // distances scaled by c
  const auto a = tsne_calibrate(sq, 10.0, 1e-9), b = tsne_calibrate(scaled, 10.0, 1e-9);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(b.sigma[i], c * a.sigma[i], 1e-6 * c * a.sigma[i]);
    for (std::size_t j = 0; j < x.size(); ++j) EXPECT_NEAR(a.conditional[i][j], b.conditional[i][j], 1e-7);
  }
}

TEST(TsneEmbed, KlDecreasesAndStaysNonNegative) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto x = random_points(100, 10, seed);
    const auto a = tsne_calibrate(squared_distances(x), 30.0);
    TsneConfig cfg;
    cfg.seed = seed;  // default schedule: 1000 iterations
    const auto r = tsne_embed(a.joint, cfg);
    ASSERT_EQ(r.y.size(), 100u);
    EXPECT_EQ(r.kl_trace.size(), 1001u);
    EXPECT_LT(r.final_kl, r.initial_kl);
    // exaggerated iterations are evaluated against the unscaled P, KL >= 0 holds throughout
    for (double kl : r.kl_trace) EXPECT_GE(kl, -1e-12);
    for (const auto& p : r.y) {
      EXPECT_TRUE(std::isfinite(p[0]));
      EXPECT_TRUE(std::isfinite(p[1]));
    }
  }
}

TEST(TsneEmbed, DuplicatesLandTogether) {
  auto x = random_points(90, 10, 4);
  for (std::size_t i = 0; i < 10; ++i) x.push_back(x[i]);
  const auto a = tsne_calibrate(squared_distances(x), 30.0);
  TsneConfig cfg;
  cfg.seed = 5;
  const auto r = tsne_embed(a.joint, cfg);
  std::vector<double> all;
  for (std::size_t i = 0; i < r.y.size(); ++i)
    for (std::size_t j = i + 1; j < r.y.size(); ++j) all.push_back(std::hypot(r.y[i][0] - r.y[j][0], r.y[i][1] - r.y[j][1]));
  const double p1 = percentile(all, 1.0);
  for (std::size_t i = 0; i < 10; ++i) {
    const double d = std::hypot(r.y[i][0] - r.y[90 + i][0], r.y[i][1] - r.y[90 + i][1]);
    EXPECT_LE(d, p1) << i;
  }
}

TEST(TsneEmbed, DeterministicAcrossThreads) {
  const auto x = random_points(40, 5, 2);
  const auto a = tsne_calibrate(squared_distances(x), 10.0);
  TsneConfig cfg;
  cfg.iterations = 150;
  cfg.seed = 3;
  const auto r1 = tsne_embed(a.joint, cfg);
  cfg.threads = 4;
  const auto r4 = tsne_embed(a.joint, cfg);
  EXPECT_EQ(r1.y, r4.y);
  EXPECT_EQ(r1.kl_trace, r4.kl_trace);
}

TEST(TsneEmbed, Csv) {
  std::vector<EmbeddedSample> s{sample("u1", SignatureLabel::genuine, {0, 0}),
                                sample("u1", SignatureLabel::skilled_forgery, {1, 0}),
                                sample("u2", SignatureLabel::genuine, {0, 3})};
  std::vector<std::vector<double>> f;
  for (const auto& e : s) f.push_back(e.features);
  TsneConfig cfg;
  cfg.perplexity = 1.5;
  cfg.iterations = 20;
  const auto r = tsne_embed(tsne_calibrate(squared_distances(f), 1.5).joint, cfg);
  const auto csv = tsne_csv(s, r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "point_id,user_id,label,x,y");
  EXPECT_NE(csv.find("1,u1,skilled_forgery,"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
