#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

#include "sigver/svm.hpp"

using namespace sigver;
using namespace oracle;

namespace {

// Weighted soft-margin primal in 2D: 1/2|w|^2 + sum c_i hinge_i, by zooming
// grid search over (w1, w2, b).
std::array<double, 3> grid_primal_2d(const std::vector<FeatureVector>& x, const std::vector<int>& y,
                                     const std::vector<double>& c) {
  auto f = [&](double w1, double w2, double b) {
    double v = 0.5 * (w1 * w1 + w2 * w2);
    for (std::size_t i = 0; i < x.size(); ++i)
      v += c[i] * std::max(0.0, 1 - y[i] * (w1 * x[i][0] + w2 * x[i][1] + b));
    return v;
  };
  std::array<double, 3> best{0, 0, 0}, width{10, 10, 10};
  double best_v = f(0, 0, 0);
  const int s = 20;
  for (int level = 0; level < 200; ++level) {
    std::array<double, 3> cur = best;
    for (int i = -s; i <= s; ++i)
      for (int j = -s; j <= s; ++j)
        for (int k = -s; k <= s; ++k) {
          const double w1 = best[0] + width[0] * i / s, w2 = best[1] + width[1] * j / s,
                       b = best[2] + width[2] * k / s;
          const double v = f(w1, w2, b);
          if (v < best_v) best_v = v, cur = {w1, w2, b};
        }
    best = cur;
    for (auto& w : width) w *= 0.9;
  }
  return best;
}

std::pair<std::vector<FeatureVector>, std::vector<FeatureVector>> separable_2d(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ang(0, 2 * M_PI), u(-1, 1), gap(0.2, 1.0);
  std::uniform_int_distribution<int> cnt(3, 15);
  const double t = ang(rng), g = gap(rng);
  const double nx = std::cos(t), ny = std::sin(t);
  std::vector<FeatureVector> pos, neg;
  for (int side : {1, -1}) {
    const int m = cnt(rng);
    for (int i = 0; i < m; ++i) {
      const double along = 3 * u(rng), across = side * (g + 2 * std::abs(u(rng)));
      FeatureVector p{along * -ny + across * nx + 0.5, along * nx + across * ny - 0.3};
      (side > 0 ? pos : neg).push_back(p);
    }
  }
  return {pos, neg};
}

std::vector<DevUser> pool(std::size_t users, std::size_t per, std::size_t dim, std::uint64_t seed,
                          const std::string& prefix = "d") {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  std::vector<DevUser> out;
  for (std::size_t u = 0; u < users; ++u) {
    DevUser du{prefix + std::to_string(u), {}};
    for (std::size_t i = 0; i < per; ++i) {
      FeatureVector v(dim);
      for (auto& f : v) f = n(rng) + double(u);
      du.genuine.push_back(v);
    }
    out.push_back(du);
  }
  return out;
}

}  // namespace

TEST(Duplication, Factors) {
  EXPECT_EQ(duplication_factor(14, 14), 1u);
  EXPECT_EQ(duplication_factor(5, 14), 3u);
  EXPECT_EQ(duplication_factor(30, 14), 1u);
  EXPECT_EQ(duplication_factor(1, 14), 14u);
}

TEST(TrainingSet, FullScaleShapes) {
  const auto dev = pool(30, 10, 4, 1);
  const auto user = pool(1, 24, 4, 2, "u")[0];
  const auto s14 = build_wd_training_set("u0", user.genuine, 14, dev, 5);
  EXPECT_EQ(s14.positives.size(), 14u);
  EXPECT_EQ(s14.negatives.size(), 14u);
  EXPECT_EQ(s14.duplication_factor, 1u);
  EXPECT_EQ(s14.held_out_indices.size(), 10u);
  const auto s5 = build_wd_training_set("u0", user.genuine, 5, dev, 5);
  EXPECT_EQ(s5.duplication_factor, 3u);
  EXPECT_EQ(s5.positives.size(), 15u);
  EXPECT_EQ(s5.negatives.size(), 14u);
  // whole-set duplication: each round repeats the same r samples in order
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(s5.positives[i], user.genuine[s5.positive_indices[i % 5]]);
}

TEST(TrainingSet, BalanceWithinOneRoundProperty) {
  std::mt19937_64 rng(3);
  const auto dev = pool(40, 3, 2, 7);
  for (int t = 0; t < 200; ++t) {
    const std::size_t r = 1 + rng() % 20;
    const std::size_t negs = 1 + rng() % 30;
    const auto user = pool(1, r + rng() % 5, 2, rng(), "u")[0];
    WdSetOptions o;
    o.negatives = negs;
    const auto s = build_wd_training_set("u0", user.genuine, r, dev, rng(), o);
    const long p = long(s.positives.size()), n = long(s.negatives.size());
    EXPECT_EQ(n, long(negs));
    EXPECT_LE(std::abs(p - n), long(r)) << "r=" << r << " negs=" << negs;
    EXPECT_EQ(s.positive_indices.size(), r);
  }
}

TEST(TrainingSet, NegativesFromDistinctUsers) {
  const auto dev = pool(20, 5, 3, 4);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto s = build_wd_training_set("d3", dev[3].genuine, 3, dev, seed);
    std::set<std::string> users(s.negative_users.begin(), s.negative_users.end());
    EXPECT_EQ(users.size(), 14u);
    EXPECT_FALSE(users.count("d3"));
    for (std::size_t k = 0; k < s.negatives.size(); ++k) {
      const auto& du = *std::find_if(dev.begin(), dev.end(), [&](auto& d) { return d.user_id == s.negative_users[k]; });
      EXPECT_NE(std::find(du.genuine.begin(), du.genuine.end(), s.negatives[k]), du.genuine.end());
    }
  }
}

TEST(TrainingSet, Errors) {
  const auto dev = pool(20, 5, 3, 4);
  const auto user = pool(1, 4, 3, 2, "u")[0];
  try {
    build_wd_training_set("u0", user.genuine, 5, dev, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InsufficientSamples);
  }
  try {
    build_wd_training_set("u0", user.genuine, 2, std::span(dev).first(10), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InsufficientSamples);
  }
  const std::set<std::string> exploit{"d7"};
  EXPECT_THROW(build_wd_training_set("u0", user.genuine, 2, dev, 1, {}, &exploit), Error);
}

TEST(TrainingSet, SeedDeterminism) {
  const auto dev = pool(20, 5, 3, 4);
  const auto user = pool(1, 24, 3, 2, "u")[0];
  const auto a = build_wd_training_set("u0", user.genuine, 5, dev, 42);
  const auto b = build_wd_training_set("u0", user.genuine, 5, dev, 42);
  const auto c = build_wd_training_set("u0", user.genuine, 5, dev, 43);
  EXPECT_EQ(a.positives, b.positives);
  EXPECT_EQ(a.negatives, b.negatives);
  EXPECT_TRUE(a.positive_indices != c.positive_indices || a.negative_users != c.negative_users);
}

TEST(Svm, SymmetricPair) {
  SvmParams p;
  p.C = 1e6;
  const auto t = train_svm_full({{1, 0}}, {{-1, 0}}, p);
  EXPECT_NEAR(t.model.weights[0], 1, 1e-6);
  EXPECT_NEAR(t.model.weights[1], 0, 1e-9);
  EXPECT_NEAR(t.model.bias, 0, 1e-6);
  EXPECT_NEAR(2 / std::hypot(t.model.weights[0], t.model.weights[1]), 2, 1e-5);
  EXPECT_NEAR(decision_value(t.model, std::vector<double>{1, 0}), 1, 1e-6);
  EXPECT_NEAR(decision_value(t.model, std::vector<double>{0, 5}), 0, 1e-6);
}

TEST(Svm, XorRbf) {
  SvmParams p;
  p.kind = KernelKind::rbf;
  p.gamma = 1;
  p.C = 10;
  const auto t = train_svm_full({{0, 0}, {1, 1}}, {{0, 1}, {1, 0}}, p);
  EXPECT_EQ(t.model.support_vectors.size(), 4u);
  EXPECT_GT(decision_value(t.model, std::vector<double>{0, 0}), 0);
  EXPECT_GT(decision_value(t.model, std::vector<double>{1, 1}), 0);
  EXPECT_LT(decision_value(t.model, std::vector<double>{0, 1}), 0);
  EXPECT_LT(decision_value(t.model, std::vector<double>{1, 0}), 0);
  EXPECT_TRUE(t.model.converged);
}

TEST(Svm, DecisionArithmetic) {
  WdModel m;
  m.kind = KernelKind::linear;
  m.dim = 2;
  m.weights = {1, 2};
  m.bias = -1;
  EXPECT_DOUBLE_EQ(decision_value(m, std::vector<double>{1, 1}), 2);
  try {
    decision_value(m, std::vector<double>{1, 1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
  }
  std::mt19937_64 rng(1);
  auto [pos, neg] = separable_2d(rng);
  SvmParams p;
  p.kind = KernelKind::rbf;
  WdModel r = train_svm_full(pos, neg, p).model;
  const auto x = pos[0];
  const double before = decision_value(r, x);
  r.bias += 0.37;
  EXPECT_NEAR(decision_value(r, x), before + 0.37, 1e-12);
}

TEST(Svm, MarginSupportVectorScoresOne) {
  std::mt19937_64 rng(12);
  auto [pos, neg] = separable_2d(rng);
  SvmParams p;
  p.C = 1e4;
  const auto t = train_svm_full(pos, neg, p);
  for (std::size_t i = 0; i < t.points.size(); ++i) {
    const double a = t.solution.alpha[i];
    if (a > 1e-6 && a < p.C - 1e-6) {
      EXPECT_NEAR(decision_value(t.model, t.points[i]), t.labels[i], 2e-3);
    }
  }
}

TEST(Svm, SeparableSetsPerfectAndKkt) {
  std::mt19937_64 rng(2024);
  for (int s = 0; s < 50; ++s) {
    auto [pos, neg] = separable_2d(rng);
    for (KernelKind kind : {KernelKind::linear, KernelKind::rbf}) {
      SvmParams p;
      p.kind = kind;
      p.C = 1e3;
      const auto t = train_svm_full(pos, neg, p);
      EXPECT_TRUE(t.solution.converged);
      EXPECT_LT(t.solution.kkt_violation, 1e-3);
      for (std::size_t i = 0; i < t.points.size(); ++i) {
        EXPECT_GT(decision_value(t.model, t.points[i]) * t.labels[i], 0) << s;
      }
      for (double a : t.solution.alpha) {
        EXPECT_GE(a, 0);
        EXPECT_LE(a, p.C);
      }
      double ya = 0;
      for (std::size_t i = 0; i < t.points.size(); ++i) ya += t.labels[i] * t.solution.alpha[i];
      EXPECT_NEAR(ya, 0, 1e-9);
      if (kind == KernelKind::rbf) {
        EXPECT_NE(std::find(t.model.support_labels.begin(), t.model.support_labels.end(), 1),
                  t.model.support_labels.end());
        EXPECT_NE(std::find(t.model.support_labels.begin(), t.model.support_labels.end(), -1),
                  t.model.support_labels.end());
      }
    }
  }
}

TEST(Svm, DualMatchesGridOracle) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + t % 4;  // 2..5 points
    std::vector<FeatureVector> x(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = {u(rng), u(rng)};
      y[i] = i == 0 ? 1 : i == 1 ? -1 : (rng() % 2 ? 1 : -1);
    }
    const Kernel k{t % 2 ? KernelKind::rbf : KernelKind::linear, 0.7};
    const double C = 0.5 + (t % 3);
    const Gram g = gram_matrix(x, k);
    const std::vector<double> upper(n, C);
    SmoOptions o;
    o.tolerance = 1e-6;
    const auto sol = solve_svm_dual(g, y, upper, o);
    const double smo = dual_objective(g, y, sol.alpha);
    const double grid = grid_dual_optimum(g, y, C);
    EXPECT_NEAR(smo, grid, 1e-4) << "case " << t << " n=" << n;
    EXPECT_LE(grid, smo + 1e-9);
  }
}

TEST(Svm, DuplicationEqualsClassWeight) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0, 1);
  for (int t = 0; t < 5; ++t) {
    std::vector<FeatureVector> pos, neg;
    for (int i = 0; i < 3; ++i) pos.push_back({nd(rng) + 0.8, nd(rng) + 0.5});
    for (int i = 0; i < 6; ++i) neg.push_back({nd(rng) - 0.8, nd(rng) - 0.2});
    const std::size_t k = 2 + t % 2;
    std::vector<FeatureVector> dup;
    for (std::size_t r = 0; r < k; ++r) dup.insert(dup.end(), pos.begin(), pos.end());
    SvmParams p;
    p.C = 0.7;
    p.smo.tolerance = 1e-7;
    const auto a = train_svm_full(dup, neg, p).model;
    SvmParams pw = p;
    pw.positive_weight = double(k);
    const auto b = train_svm_full(pos, neg, pw).model;

    std::vector<FeatureVector> x = pos;
    x.insert(x.end(), neg.begin(), neg.end());
    std::vector<int> y(pos.size(), 1);
    y.insert(y.end(), neg.size(), -1);
    std::vector<double> c(pos.size(), p.C * double(k));
    c.insert(c.end(), neg.size(), p.C);
    const auto w = grid_primal_2d(x, y, c);

    auto angle = [](double a1, double a2, double b1, double b2) {
      return std::abs(std::atan2(a1 * b2 - a2 * b1, a1 * b1 + a2 * b2));
    };
    EXPECT_LT(angle(a.weights[0], a.weights[1], w[0], w[1]), 1e-3) << t;
    EXPECT_LT(angle(b.weights[0], b.weights[1], w[0], w[1]), 1e-3) << t;
    EXPECT_NEAR(a.bias, w[2], 1e-2);
  }
}

TEST(Svm, DeterministicBytesAndJson) {
  const auto dev = pool(20, 5, 6, 4);
  const auto user = pool(1, 20, 6, 9, "u")[0];
  const auto set = build_wd_training_set("u0", user.genuine, 14, dev, 8);
  for (KernelKind kind : {KernelKind::linear, KernelKind::rbf}) {
    SvmParams p;
    p.kind = kind;
    WdModel a = train_svm(set, p), b = train_svm(set, p);
    a.extractor_hash = b.extractor_hash = "abc";
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    const WdModel back = wd_model_from_json(nlohmann::json::parse(to_json(a).dump()));
    EXPECT_EQ(to_json(back).dump(), to_json(a).dump());
    for (const auto& q : user.genuine) EXPECT_EQ(decision_value(back, q), decision_value(a, q));
    EXPECT_EQ(score_checked(a, user.genuine[0], "abc"), decision_value(a, user.genuine[0]));
    try {
      score_checked(a, user.genuine[0], "other");
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::ModelMismatch);
    }
  }
}

TEST(Svm, IterationCapFlagsNonConvergence) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0, 1);
  std::vector<FeatureVector> pos, neg;
  for (int i = 0; i < 30; ++i) pos.push_back({nd(rng), nd(rng)}), neg.push_back({nd(rng), nd(rng)});
  SvmParams p;
  p.C = 100;
  p.smo.max_iterations = 2;
  const auto t = train_svm_full(pos, neg, p);
  EXPECT_FALSE(t.model.converged);
  EXPECT_GE(t.model.kkt_violation, 1e-3);
  for (double v : t.model.weights) EXPECT_TRUE(std::isfinite(v));
}

TEST(Svm, DefaultGamma) {
  const std::vector<FeatureVector> x{{0, 2}, {2, 0}};
  EXPECT_DOUBLE_EQ(default_rbf_gamma(x), 1.0 / (2 * 1.0));
  EXPECT_DOUBLE_EQ(default_rbf_gamma({{3, 3}, {3, 3}}), 0.5);
}
