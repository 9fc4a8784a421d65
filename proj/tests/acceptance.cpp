// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <random>
#include <set>
#include <string>

#include "oracles.hpp"
#include "sigver/sigver.hpp"

using namespace sigver;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void line(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  failures += !ok;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------- 1

void gradient_fidelity() {
  const auto t0 = Clock::now();
  BuildOptions o;
  o.first_conv_stride = 1;
  // conv, max-pool, dense and batchnorm layers all on the path
  Network<double> net(build_network(Family::alexnet_reduced, 64, 3, 34, 48, 0.05, o), 3);
  Tensor<double> x({4, 1, 34, 48});
  Rng rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : x.data()) v = u(rng);
  const std::vector<int> y{0, 1, 2, 1};
  const auto rep = finite_difference_check(net, x, y, 1e-5, 100, 5);
  const double secs = seconds_since(t0);
  const bool ok = rep.max_rel_error < 1e-4 && secs < 60 && rep.checked > 0;
  line(1, "gradient fidelity", ok,
       fmt("max rel %.2e (conv %.2e, dense %.2e, bn %.2e, input/pool %.2e), %zu coords, %.1f s", rep.max_rel_error,
           rep.max_rel_conv, rep.max_rel_dense, rep.max_rel_batchnorm, rep.max_rel_input, rep.checked, secs));
}

// ---------------------------------------------------------------- 2

void shape_plans() {
  std::size_t built = 0;
  std::string counts;
  bool counts_ok = true;
  const std::pair<Family, std::size_t> expected[] = {
      {Family::alexnet_reduced, 6}, {Family::alexnet, 8}, {Family::vgg_reduced, 13}, {Family::vgg, 19}};
  for (const auto& [f, want] : expected) {
    std::size_t got = 0;
    for (std::size_t n : {512u, 1024u, 2048u, 4096u}) {
      try {
        const auto s = build_network(f, n, 531, 170, 242);
        const auto plan = shape_plan(s);
        if (plan.back().channels == 531 && plan[s.index_of("FC1")].channels == n) ++built;
        got = s.learnable_count();
      } catch (const Error& e) {
        std::printf("  %s N=%zu: %s\n", std::string(family_name(f)).c_str(), n, e.what());
      }
    }
    counts += fmt("%s %zu/%zu ", std::string(family_name(f)).c_str(), got, want);
    counts_ok = counts_ok && got == want;
  }
  const auto plan = shape_plan(build_network(Family::alexnet, 2048, 531, 170, 242));
  const bool conv1 = plan[0].channels == 96 && plan[0].height == 40 && plan[0].width == 58;
  line(2, "shape plans", built == 16 && conv1 && counts_ok,
       fmt("%zu/16 valid plans; alexnet conv1 %zux%zux%zu; learnable got/want: %s", built, plan[0].channels,
           plan[0].height, plan[0].width, counts.c_str()));
}

// ---------------------------------------------------------------- 3

void metric_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> n(1, 40), coin(0, 1);
  std::size_t eer_ok = 0, auc_ok = 0;
  for (int t = 0; t < 1000; ++t) {
    const bool ties = coin(rng);
    std::normal_distribution<double> gd(1, 1), fd(0, 1);
    std::vector<double> g(n(rng)), f(n(rng));
    for (auto& s : g) s = ties ? std::round(gd(rng) * 2) / 2 : gd(rng);
    for (auto& s : f) s = ties ? std::round(fd(rng) * 2) / 2 : fd(rng);
    const auto e = eer_global(g, f);
    const auto b = oracle::brute_eer(g, f);
    const double beer = static_cast<double>((b.frr + b.far) / 2);
    eer_ok += e.threshold == b.threshold && e.frr == static_cast<double>(b.frr) &&
              e.far == static_cast<double>(b.far) && e.eer == beer;
    auc_ok += roc_auc(g, f) == static_cast<double>(oracle::brute_auc(g, f));
  }
  const double secs = seconds_since(t0);
  line(3, "metric oracles", eer_ok == 1000 && auc_ok == 1000 && secs < 30,
       fmt("eer_global exact %zu/1000, roc_auc exact %zu/1000, %.1f s", eer_ok, auc_ok, secs));
}

// ---------------------------------------------------------------- 4

void svm_oracle() {
  std::mt19937_64 rng(2024);
  std::size_t perfect = 0;
  double worst_kkt = 0;
  for (int s = 0; s < 50; ++s) {
    std::uniform_real_distribution<double> ang(0, 2 * M_PI), u(-1, 1), gap(0.2, 1.0);
    std::uniform_int_distribution<int> cnt(3, 15);
    const double th = ang(rng), g = gap(rng), nx = std::cos(th), ny = std::sin(th);
    std::vector<FeatureVector> pos, neg;
    for (int side : {1, -1}) {
      const int m = cnt(rng);
      for (int i = 0; i < m; ++i) {
        const double along = 3 * u(rng), across = side * (g + 2 * std::abs(u(rng)));
        (side > 0 ? pos : neg).push_back({along * -ny + across * nx, along * nx + across * ny});
      }
    }
    SvmParams p;
    p.kind = s % 2 ? KernelKind::rbf : KernelKind::linear;
    p.C = 1e3;
    const auto t = train_svm_full(pos, neg, p);
    bool all = true;
    for (std::size_t i = 0; i < t.points.size(); ++i) all = all && decision_value(t.model, t.points[i]) * t.labels[i] > 0;
    perfect += all;
    worst_kkt = std::max(worst_kkt, t.solution.kkt_violation);
  }
  std::mt19937_64 r2(77);
  std::uniform_real_distribution<double> u(-2, 2);
  double worst_gap = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + t % 4;
    std::vector<FeatureVector> x(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = {u(r2), u(r2)};
      y[i] = i == 0 ? 1 : i == 1 ? -1 : (r2() % 2 ? 1 : -1);
    }
    const Kernel k{t % 2 ? KernelKind::rbf : KernelKind::linear, 0.7};
    const double C = 0.5 + (t % 3);
    const auto g = gram_matrix(x, k);
    SmoOptions o;
    o.tolerance = 1e-6;
    const auto sol = solve_svm_dual(g, y, std::vector<double>(n, C), o);
    worst_gap = std::max(worst_gap, std::abs(dual_objective(g, y, sol.alpha) - oracle::grid_dual_optimum(g, y, C)));
  }
  line(4, "svm oracle", perfect == 50 && worst_kkt < 1e-3 && worst_gap < 1e-4,
       fmt("100%% training accuracy on %zu/50 sets, worst KKT %.2e, worst dual gap vs grid %.2e", perfect,
           worst_kkt, worst_gap));
}

// ---------------------------------------------------------------- 5

void preprocessing() {
  PreprocConfig cfg;
  cfg.scale_factor = 0.2;
  const auto [cr, cc] = canvas_center(cfg.scaled_canvas_h(), cfg.scaled_canvas_w());
  std::size_t centred = 0, deterministic = 0;
  double worst = 0;
  for (std::uint64_t s = 1; s <= 100; ++s) {
    SynthWriterParams p;
    p.seed = s;
    p.height = 60 + static_cast<int>(s % 5) * 20;
    p.width = 100 + static_cast<int>(s % 7) * 20;
    const GrayImage raw = synthesize_genuine(synthesize_writer(p), s);
    const auto st = preprocess_stages(raw, cfg);
    const auto com = center_of_mass(st.centered);
    const double d = std::hypot(com.row - cr, com.col - cc);
    worst = std::max(worst, d);
    centred += d <= 1.0;
    deterministic += preprocess(raw, cfg) == st.resized && encode_pgm(preprocess(raw, cfg)) == encode_pgm(st.resized);
  }
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(3, 40), val(0, 255);
  std::size_t otsu_ok = 0;
  for (int i = 0; i < 100; ++i) {
    const int h = dim(rng), w = dim(rng);
    std::vector<std::uint8_t> px(static_cast<std::size_t>(h * w));
    for (auto& v : px) v = static_cast<std::uint8_t>(val(rng));
    otsu_ok += otsu_threshold(GrayImage(h, w, px)) == oracle::otsu_oracle(px);
  }
  line(5, "preprocessing", centred == 100 && otsu_ok == 100 && deterministic == 100,
       fmt("COM within 1 px on %zu/100 (worst %.3f px), Otsu matches scan %zu/100, deterministic %zu/100", centred,
           worst, otsu_ok, deterministic));
}

// ---------------------------------------------------------------- 6

void tsne() {
  Rng rng(6);
  std::normal_distribution<double> z(0, 1);
  std::vector<std::vector<double>> x(190, std::vector<double>(10));
  for (auto& p : x)
    for (auto& v : p) v = z(rng);
  for (std::size_t i = 0; i < 10; ++i) x.push_back(x[i]);  // 200 points, 10 duplicated pairs
  const auto aff = tsne_calibrate(squared_distances(x), 30.0);
  double worst_perp = 0;
  for (double p : aff.perplexity) worst_perp = std::max(worst_perp, std::abs(p - 30.0));
  TsneConfig cfg;
  cfg.seed = 6;
  const auto r = tsne_embed(aff.joint, cfg);
  std::vector<double> d;
  for (std::size_t i = 0; i < r.y.size(); ++i)
    for (std::size_t j = i + 1; j < r.y.size(); ++j) d.push_back(std::hypot(r.y[i][0] - r.y[j][0], r.y[i][1] - r.y[j][1]));
  const double p1 = percentile(d, 1.0);
  std::size_t close = 0;
  for (std::size_t i = 0; i < 10; ++i) close += std::hypot(r.y[i][0] - r.y[190 + i][0], r.y[i][1] - r.y[190 + i][1]) <= p1;
  line(6, "t-SNE", worst_perp < 1e-3 && r.final_kl < r.initial_kl && close == 10,
       fmt("worst perplexity error %.2e on 200 points, KL %.4f -> %.4f, duplicates in 1st percentile %zu/10",
           worst_perp, r.initial_kl, r.final_kl, close));
}

// ---------------------------------------------------------------- 7

void end_to_end() {
  const auto t0 = Clock::now();
  const fs::path base = fs::temp_directory_path() / "sigver_acceptance";
  fs::remove_all(base);
  ExperimentConfig cfg = ExperimentConfig::desk();
  cfg.out_dir = (base / "cnn").string();
  const EvalReport cnn = run_experiment(cfg, nullptr);
  ExperimentConfig raw = cfg;
  raw.out_dir = (base / "raw_pixels").string();
  raw.wd.features = "raw_pixels";
  const EvalReport px = run_experiment(raw, nullptr);
  const double secs = seconds_since(t0);

  const auto cs = nlohmann::json::parse(read_file(fs::path(cfg.out_dir) / "cnn" / "summary.json"));
  const auto an = nlohmann::json::parse(read_file(fs::path(cfg.out_dir) / "analysis" / "summary.json"));
  const double acc = cs.at("final_dev_val_accuracy").get<double>(), chance = cs.at("chance_accuracy").get<double>();
  const double gr = an.at("overlap_gg_gr").get<double>(), gs = an.at("overlap_gg_gs").get<double>();
  const bool a = acc >= 5 * chance;
  const bool b = cnn.eer_user_random.mean <= 5.0;
  const bool c = cnn.eer_user.mean < 50.0 && cnn.eer_user.mean < px.eer_user.mean;
  const bool d = gr < gs;
  line(7, "end-to-end synthetic run", a && b && c && d && secs < 900,
       fmt("(a) dev_val acc %.3f vs 5x chance %.3f; (b) random EER_user %.2f%%; (c) skilled EER_user %.2f%% vs "
           "raw-pixel %.2f%%; (d) overlap gg/gr %.4f < gg/gs %.4f; %.0f s",
           acc, 5 * chance, cnn.eer_user_random.mean, cnn.eer_user.mean, px.eer_user.mean, gr, gs, secs));
  fs::remove_all(base);
}

// ---------------------------------------------------------------- 8

void protocol() {
  std::mt19937_64 rng(8);
  std::size_t overlap = 0, e_negatives = 0, unbalanced = 0, guard_missed = 0, configs = 0;
  while (configs < 100) {
    // D needs 14 distinct users to supply the default 14 negatives
    const std::size_t e = 1 + rng() % 40, dn = 14 + rng() % 40, n = e + dn;
    const std::size_t v = rng() % dn;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(std::to_string(1 + rng() % 1000000));
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (e + v >= ids.size()) continue;
    std::shuffle(ids.begin(), ids.end(), rng);
    const SplitPlan p = split(ids, e, v);
    ++configs;
    std::set<std::string> seen;
    for (const auto* part : {&p.exploitation, &p.dev_train, &p.dev_val})
      for (const auto& id : *part) overlap += !seen.insert(id).second;
    overlap += seen.size() != ids.size();

    const std::set<std::string> E(p.exploitation.begin(), p.exploitation.end());
    std::normal_distribution<double> z(0, 1);
    auto samples = [&](std::size_t k) {
      std::vector<FeatureVector> out(k, FeatureVector(3));
      for (auto& f : out)
        for (auto& x : f) x = z(rng);
      return out;
    };
    std::vector<DevUser> pool;
    for (const auto& id : p.development) pool.push_back({id, samples(3)});
    const std::size_t r = 1 + rng() % 14;
    const auto& target = p.exploitation[rng() % p.exploitation.size()];
    const auto set = build_wd_training_set(target, samples(r + 10), r, pool, rng(), {}, &E);
    for (const auto& u : set.negative_users) e_negatives += E.count(u);
    const long pos = static_cast<long>(set.positives.size());
    unbalanced += std::abs(pos - 14) > static_cast<long>(r);
    // a pool that leaks an exploitation user must be refused
    auto leaky = pool;
    leaky.push_back({p.exploitation.front() == target && p.exploitation.size() > 1 ? p.exploitation.back()
                                                                                   : p.exploitation.front(),
                     samples(3)});
    try {
      build_wd_training_set(target, samples(r + 10), r, leaky, rng(), {}, &E);
      ++guard_missed;
    } catch (const Error&) {
    }
  }
  line(8, "protocol invariants", overlap == 0 && e_negatives == 0 && unbalanced == 0 && guard_missed == 0,
       fmt("%zu split configs: %zu overlaps, %zu negatives from E, %zu leaky pools accepted, %zu sets outside one "
           "duplication round of 14",
           configs, overlap, e_negatives, guard_missed, unbalanced));
}

}  // namespace

int main() {
  const std::pair<const char*, void (*)()> checks[] = {
      {"gradient fidelity", gradient_fidelity}, {"shape plans", shape_plans}, {"metric oracles", metric_oracles},
      {"svm oracle", svm_oracle},               {"preprocessing", preprocessing}, {"t-SNE", tsne},
      {"end-to-end", end_to_end},               {"protocol", protocol}};
  int id = 0;
  for (const auto& [name, fn] : checks) {
    ++id;
    try {
      fn();
    } catch (const std::exception& e) {
      line(id, name, false, std::string("threw: ") + e.what());
    }
  }
  std::printf("%d criterion(s) failed\n", failures);
  return failures ? 1 : 0;
}
