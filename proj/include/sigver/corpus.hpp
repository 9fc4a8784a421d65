#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sigver/error.hpp"
#include "sigver/hash.hpp"
#include "sigver/image.hpp"
#include "sigver/image_io.hpp"
#include "sigver/parallel.hpp"
#include "sigver/rng.hpp"

namespace sigver {

// ---------------------------------------------------------------- manifest

struct UserEntry {
  std::string user_id;
  std::vector<std::string> genuine;  // paths relative to the manifest root
  std::vector<std::string> skilled;
};

struct DatasetManifest {
  std::string root;
  std::vector<UserEntry> users;  // ascending user id
};

/// Ordering for user ids: numeric ids by value, then anything else lexically.
inline bool user_id_less(const std::string& a, const std::string& b) {
  auto numeric = [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
  };
  const bool na = numeric(a), nb = numeric(b);
  if (na != nb) return na;
  if (na) {
    const auto ta = a.substr(std::min(a.find_first_not_of('0'), a.size() - 1));
    const auto tb = b.substr(std::min(b.find_first_not_of('0'), b.size() - 1));
    if (ta.size() != tb.size()) return ta.size() < tb.size();
    if (ta != tb) return ta < tb;
  }
  return a < b;
}

/// Numeric ids compare by value, so "7" and "007" name the same user.
inline bool same_user_id(const std::string& a, const std::string& b) {
  auto key = [](const std::string& s) {
    const bool num = !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
    return num ? s.substr(std::min(s.find_first_not_of('0'), s.size() - 1)) : s;
  };
  return key(a) == key(b);
}

inline void validate_manifest(const DatasetManifest& m) {
  require(!m.users.empty(), Errc::MalformedTree, "manifest has no users");
  for (std::size_t i = 1; i < m.users.size(); ++i)
    require(!same_user_id(m.users[i - 1].user_id, m.users[i].user_id), Errc::DuplicateUser,
            "duplicate user id " + m.users[i].user_id);
  for (const auto& u : m.users)
    require(!u.genuine.empty(), Errc::MalformedTree, "user " + u.user_id + " has no genuine signatures");
}

/// Scans root/<user_id>/{genuine,forgery}/<nn>.{png,pgm}.
inline DatasetManifest load_manifest(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  require(fs::is_directory(root), Errc::MalformedTree, "corpus root " + root.string() + " is not a directory");
  DatasetManifest m;
  m.root = root.string();
  auto list_images = [&](const fs::path& dir, const std::string& uid) {
    std::vector<std::string> out;
    if (!fs::exists(dir)) return out;
    require(fs::is_directory(dir), Errc::MalformedTree, dir.string() + " is not a directory");
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto ext = e.path().extension().string();
      require(e.is_regular_file() && (ext == ".png" || ext == ".pgm"), Errc::MalformedTree,
              "unexpected entry " + e.path().string() + " for user " + uid);
      out.push_back(fs::relative(e.path(), root).generic_string());
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_directory()) {
      const auto name = e.path().filename().string();
      if (name == "manifest.json") continue;
      fail(Errc::MalformedTree, "unexpected file " + e.path().string() + " in corpus root");
    }
    UserEntry u;
    u.user_id = e.path().filename().string();
    for (const auto& sub : fs::directory_iterator(e.path())) {
      const auto name = sub.path().filename().string();
      require(name == "genuine" || name == "forgery", Errc::MalformedTree,
              "unexpected entry " + sub.path().string() + " (expected genuine/ or forgery/)");
    }
    u.genuine = list_images(e.path() / "genuine", u.user_id);
    u.skilled = list_images(e.path() / "forgery", u.user_id);
    m.users.push_back(std::move(u));
  }
  std::sort(m.users.begin(), m.users.end(),
            [](const UserEntry& a, const UserEntry& b) { return user_id_less(a.user_id, b.user_id); });
  validate_manifest(m);
  return m;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json users = nlohmann::json::array();
  for (const auto& u : m.users)
    users.push_back({{"user_id", u.user_id},
                     {"genuine", u.genuine},
                     {"skilled", u.skilled},
                     {"counts", {{"genuine", u.genuine.size()}, {"skilled", u.skilled.size()}}}});
  return {{"format", "sigver-manifest"}, {"version", 1}, {"root", m.root}, {"users", users}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "sigver-manifest", Errc::MalformedTree, "not a sigver manifest");
  DatasetManifest m;
  m.root = j.at("root").get<std::string>();
  for (const auto& u : j.at("users"))
    m.users.push_back({u.at("user_id").get<std::string>(), u.at("genuine").get<std::vector<std::string>>(),
                       u.at("skilled").get<std::vector<std::string>>()});
  std::sort(m.users.begin(), m.users.end(),
            [](const UserEntry& a, const UserEntry& b) { return user_id_less(a.user_id, b.user_id); });
  validate_manifest(m);
  return m;
}

// ---------------------------------------------------------------- split

struct SplitPlan {
  std::vector<std::string> exploitation;
  std::vector<std::string> development;
  std::vector<std::string> dev_train;
  std::vector<std::string> dev_val;
};

/// E = first `exploit_count` ids in ascending order, D = the rest, dev_val
/// = last `val_count` of D.
inline SplitPlan split(std::vector<std::string> user_ids, std::size_t exploit_count, std::size_t val_count) {
  std::sort(user_ids.begin(), user_ids.end(), user_id_less);
  for (std::size_t i = 1; i < user_ids.size(); ++i)
    require(!same_user_id(user_ids[i - 1], user_ids[i]), Errc::DuplicateUser, "duplicate user id " + user_ids[i]);
  require(exploit_count + val_count < user_ids.size(), Errc::TooFewUsers,
          std::to_string(user_ids.size()) + " users cannot hold " + std::to_string(exploit_count) +
              " exploitation + " + std::to_string(val_count) + " validation users and a training set");
  SplitPlan p;
  const auto e_end = user_ids.begin() + static_cast<std::ptrdiff_t>(exploit_count);
  p.exploitation.assign(user_ids.begin(), e_end);
  p.development.assign(e_end, user_ids.end());
  const auto v_begin = user_ids.end() - static_cast<std::ptrdiff_t>(val_count);
  p.dev_train.assign(e_end, v_begin);
  p.dev_val.assign(v_begin, user_ids.end());
  return p;
}

inline SplitPlan split(const DatasetManifest& m, std::size_t exploit_count, std::size_t val_count) {
  std::vector<std::string> ids;
  for (const auto& u : m.users) ids.push_back(u.user_id);
  return split(std::move(ids), exploit_count, val_count);
}

// ---------------------------------------------------------------- synthetic writers

struct SynthWriterParams {
  std::uint64_t seed = 1;
  int strokes = 3;
  int control_points = 7;
  double jitter = 0.02;          // per-sample control-point noise, fraction of the box
  double tremor = 2.0;           // forgery tremor amplitude in pixels
  double skeleton_error = 0.03;  // forger's systematic control-point error, fraction of the box
  int height = 140;
  int width = 240;

  void validate() const {
    require(strokes >= 1 && control_points >= 2, Errc::InvalidArgument, "writer needs strokes with >= 2 points");
    require(jitter >= 0 && tremor >= 0 && skeleton_error >= 0, Errc::InvalidArgument,
            "jitter, tremor and skeleton error must be non-negative");
    require(height >= 16 && width >= 16, Errc::InvalidArgument, "synthetic image must be at least 16x16");
  }
};

struct Point2 {
  double x = 0, y = 0;
};

struct StrokeStyle {
  double darkness = 0.8;   // mean ink darkness in [0,1]
  double amplitude = 0.2;  // pressure modulation depth
  double frequency = 2;    // pressure cycles per stroke
  double phase = 0;
  double radius = 2.2;     // pen radius in pixels
};

struct SynthWriter {
  SynthWriterParams params;
  std::vector<std::vector<Point2>> strokes;  // control points in [0,1]^2, y down
  std::vector<StrokeStyle> styles;
  double slant = 0;  // shear factor
  double box_w = 0.8, box_h = 0.6;
};

inline SynthWriter synthesize_writer(const SynthWriterParams& params) {
  params.validate();
  Rng rng(derive_seed(params.seed, "writer"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SynthWriter w;
  w.params = params;
  w.slant = (u(rng) - 0.5) * 0.6;
  w.box_w = 0.6 + 0.2 * u(rng);
  w.box_h = 0.45 + 0.3 * u(rng);
  const int S = params.strokes, K = params.control_points;
  for (int s = 0; s < S; ++s) {
    std::vector<Point2> cp;
    const double x0 = static_cast<double>(s) / S, x1 = static_cast<double>(s + 1) / S;
    for (int k = 0; k < K; ++k) {
      const double t = static_cast<double>(k) / (K - 1);
      // forward drift with loops: x wanders around its slot, y anywhere in the band
      const double x = x0 + (x1 - x0) * (0.15 + 0.7 * t) + (u(rng) - 0.5) * 0.6 * (x1 - x0);
      cp.push_back({std::clamp(x, 0.0, 1.0), 0.1 + 0.8 * u(rng)});
    }
    w.strokes.push_back(std::move(cp));
    StrokeStyle st;
    st.darkness = 0.6 + 0.3 * u(rng);
    st.amplitude = 0.15 + 0.2 * u(rng);
    st.frequency = 1 + 3 * u(rng);
    st.phase = 2 * std::numbers::pi * u(rng);
    st.radius = 1.6 + 1.2 * u(rng);
    w.styles.push_back(st);
  }
  return w;
}

namespace detail {

inline Point2 catmull_rom(const Point2& p0, const Point2& p1, const Point2& p2, const Point2& p3, double t) {
  const double t2 = t * t, t3 = t2 * t;
  auto f = [&](double a, double b, double c, double d) {
    return 0.5 * (2 * b + (-a + c) * t + (2 * a - 5 * b + 4 * c - d) * t2 + (-a + 3 * b - 3 * c + d) * t3);
  };
  return {f(p0.x, p1.x, p2.x, p3.x), f(p0.y, p1.y, p2.y, p3.y)};
}

/// Dense polyline through the control points.
inline std::vector<Point2> spline(const std::vector<Point2>& cp, int per_segment) {
  std::vector<Point2> out;
  const std::size_t n = cp.size();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Point2& p0 = cp[i == 0 ? 0 : i - 1];
    const Point2& p3 = cp[std::min(i + 2, n - 1)];
    for (int k = 0; k < per_segment; ++k)
      out.push_back(catmull_rom(p0, cp[i], cp[i + 1], p3, static_cast<double>(k) / per_segment));
  }
  out.push_back(cp.back());
  return out;
}

struct Canvas {
  int h, w;
  std::vector<double> ink;  // darkness in [0,1]

  void stamp(double cx, double cy, double r, double dark) {
    const int r0 = static_cast<int>(std::floor(cy - r - 1)), r1 = static_cast<int>(std::ceil(cy + r + 1));
    const int c0 = static_cast<int>(std::floor(cx - r - 1)), c1 = static_cast<int>(std::ceil(cx + r + 1));
    for (int y = std::max(0, r0); y <= std::min(h - 1, r1); ++y)
      for (int x = std::max(0, c0); x <= std::min(w - 1, c1); ++x) {
        const double d = std::hypot(x - cx, y - cy);
        const double cover = std::clamp(r + 0.5 - d, 0.0, 1.0);
        double& v = ink[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)];
        v = std::max(v, cover * dark);
      }
  }
};

struct RenderStyle {
  bool flatten = false;        // forger: flattened pressure dynamics
  double tremor_px = 0;        // forger: wobble perpendicular to the stroke
  double tremor_wavelength = 7;
};

inline GrayImage render(const SynthWriter& w, const std::vector<std::vector<Point2>>& strokes, double scale,
                        double rotation, Point2 shift, const RenderStyle& style, Rng& rng) {
  const int H = w.params.height, W = w.params.width;
  Canvas cv{H, W, std::vector<double>(static_cast<std::size_t>(H) * static_cast<std::size_t>(W), 0.0)};
  const double cs = std::cos(rotation), sn = std::sin(rotation);
  const double bw = w.box_w * W, bh = w.box_h * H;
  auto to_px = [&](const Point2& p) {
    // box coordinates centred on the origin, slanted, then affine
    double x = (p.x - 0.5) * bw, y = (p.y - 0.5) * bh;
    x += w.slant * (-y);
    const double rx = scale * (cs * x - sn * y), ry = scale * (sn * x + cs * y);
    return Point2{W / 2.0 + rx + shift.x, H / 2.0 + ry + shift.y};
  };
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t s = 0; s < strokes.size(); ++s) {
    std::vector<Point2> px;
    for (const auto& p : strokes[s]) px.push_back(to_px(p));
    auto path = spline(px, 40);
    const StrokeStyle& st = w.styles[s];
    // arc-length parametrisation for pressure and tremor
    std::vector<double> arc(path.size(), 0.0);
    for (std::size_t i = 1; i < path.size(); ++i)
      arc[i] = arc[i - 1] + std::hypot(path[i].x - path[i - 1].x, path[i].y - path[i - 1].y);
    const double len = std::max(arc.back(), 1e-9);
    const double tphase = 2 * std::numbers::pi * u(rng);
    const double tphase2 = 2 * std::numbers::pi * u(rng);
    // resample at half-pixel steps so stamps overlap
    std::size_t seg = 0;
    for (double a = 0; a <= len; a += 0.5) {
      while (seg + 2 < path.size() && arc[seg + 1] < a) ++seg;
      const double span = std::max(arc[seg + 1] - arc[seg], 1e-12);
      const double f = std::clamp((a - arc[seg]) / span, 0.0, 1.0);
      double x = path[seg].x + f * (path[seg + 1].x - path[seg].x);
      double y = path[seg].y + f * (path[seg + 1].y - path[seg].y);
      if (style.tremor_px > 0) {
        const double tx = (path[seg + 1].x - path[seg].x) / span, ty = (path[seg + 1].y - path[seg].y) / span;
        const double k = 2 * std::numbers::pi / style.tremor_wavelength;
        const double off = style.tremor_px * (0.7 * std::sin(k * a + tphase) + 0.3 * std::sin(2.3 * k * a + tphase2));
        x += -ty * off;
        y += tx * off;
      }
      const double t = a / len;
      double pressure = std::sin(std::numbers::pi * t);  // pen-down and lift tapering
      pressure = 0.35 + 0.65 * pressure;
      double dark, rad;
      if (style.flatten) {
        dark = st.darkness;
        rad = st.radius * 0.95;
      } else {
        const double mod = st.amplitude * std::sin(2 * std::numbers::pi * st.frequency * t + st.phase);
        dark = std::clamp(st.darkness * (0.75 + 0.25 * pressure) + mod, 0.2, 1.0);
        rad = st.radius * (0.6 + 0.5 * pressure);
      }
      cv.stamp(x, y, rad, dark);
    }
  }
  // light, slightly noisy page
  std::normal_distribution<double> noise(0.0, 2.5);
  const double page = 236 + 10 * u(rng);
  std::vector<std::uint8_t> pixels(cv.ink.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double bg = page + noise(rng);
    const double v = bg - cv.ink[i] * (bg - 25.0);
    pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 254L));
  }
  return GrayImage(H, W, std::move(pixels));
}

inline std::vector<std::vector<Point2>> perturb(const std::vector<std::vector<Point2>>& strokes, double sigma,
                                                Rng& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  auto out = strokes;
  if (sigma <= 0) return out;
  for (auto& s : out)
    for (auto& p : s) p.x += n(rng), p.y += n(rng);
  return out;
}

}  // namespace detail

/// Genuine sample `index`: jittered control points plus a small global
/// affine change (scale within 5%, rotation within 3 degrees).
inline GrayImage synthesize_genuine(const SynthWriter& w, std::uint64_t index) {
  Rng rng(derive_seed(derive_seed(w.params.seed, "genuine"), index));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto strokes = detail::perturb(w.strokes, w.params.jitter, rng);
  const double scale = 1.0 + 0.05 * u(rng);
  const double rot = 3.0 * std::numbers::pi / 180.0 * u(rng);
  const Point2 shift{0.02 * w.params.width * u(rng), 0.02 * w.params.height * u(rng)};
  GrayImage img = detail::render(w, strokes, scale, rot, shift, {}, rng);
  img.label = SignatureLabel::genuine;
  return img;
}

/// Skilled forgery of `target` by forger `forger_seed`: the target skeleton
/// with the forger's systematic error, then tremor and flat ink dynamics.
inline GrayImage synthesize_skilled_forgery(const SynthWriter& target, std::uint64_t forger_seed,
                                            std::uint64_t index = 0) {
  Rng forger(derive_seed(forger_seed, "forger"));
  const auto skeleton = detail::perturb(target.strokes, target.params.skeleton_error, forger);
  Rng rng(derive_seed(derive_seed(forger_seed, "forgery"), index));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto strokes = detail::perturb(skeleton, target.params.jitter, rng);
  const double scale = 1.0 + 0.05 * u(rng);
  const double rot = 3.0 * std::numbers::pi / 180.0 * u(rng);
  const Point2 shift{0.02 * target.params.width * u(rng), 0.02 * target.params.height * u(rng)};
  detail::RenderStyle style;
  style.flatten = true;
  style.tremor_px = target.params.tremor;
  GrayImage img = detail::render(target, strokes, scale, rot, shift, style, rng);
  img.label = SignatureLabel::skilled_forgery;
  return img;
}

// ---------------------------------------------------------------- corpus

struct CorpusConfig {
  std::size_t users = 35;
  std::size_t genuine_per_user = 24;
  std::size_t skilled_per_user = 30;
  std::size_t forgers_per_user = 5;
  std::uint64_t seed = 1;
  SynthWriterParams writer;  // seed field is overwritten per user
  unsigned threads = 1;
};

struct SyntheticUser {
  std::string user_id;
  std::vector<GrayImage> genuine;
  std::vector<GrayImage> skilled;
};

inline std::string format_user_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

inline SynthWriterParams writer_params(const CorpusConfig& cfg, std::size_t user_index) {
  SynthWriterParams p = cfg.writer;
  p.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(user_index));
  return p;
}

inline SyntheticUser synthesize_user(const CorpusConfig& cfg, std::size_t user_index) {
  const SynthWriter w = synthesize_writer(writer_params(cfg, user_index));
  SyntheticUser u;
  u.user_id = format_user_id(user_index + 1);
  for (std::size_t g = 0; g < cfg.genuine_per_user; ++g) {
    u.genuine.push_back(synthesize_genuine(w, g));
    u.genuine.back().writer_id = u.user_id;
  }
  const std::size_t forgers = std::max<std::size_t>(1, cfg.forgers_per_user);
  for (std::size_t k = 0; k < cfg.skilled_per_user; ++k) {
    const std::uint64_t forger_seed = derive_seed(derive_seed(w.params.seed, "forgers"), k % forgers);
    u.skilled.push_back(synthesize_skilled_forgery(w, forger_seed, k / forgers));
    u.skilled.back().writer_id = u.user_id;
  }
  return u;
}

inline std::vector<SyntheticUser> synthesize_corpus(const CorpusConfig& cfg) {
  std::vector<SyntheticUser> users(cfg.users);
  parallel_for(cfg.users, cfg.threads, [&](std::size_t i) { users[i] = synthesize_user(cfg, i); });
  return users;
}

inline std::string image_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02zu.pgm", i + 1);
  return buf;
}

/// Writes root/<user_id>/{genuine,forgery}/<nn>.pgm plus manifest.json.
inline DatasetManifest write_corpus(const std::filesystem::path& root, const CorpusConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  DatasetManifest m;
  m.root = ".";  // paths are relative to the tree, so the tree can move
  m.users.resize(cfg.users);
  parallel_for(cfg.users, cfg.threads, [&](std::size_t i) {
    const SyntheticUser u = synthesize_user(cfg, i);
    UserEntry e;
    e.user_id = u.user_id;
    for (std::size_t g = 0; g < u.genuine.size(); ++g) {
      const std::string rel = u.user_id + "/genuine/" + image_name(g);
      write_pgm(root / rel, u.genuine[g]);
      e.genuine.push_back(rel);
    }
    for (std::size_t s = 0; s < u.skilled.size(); ++s) {
      const std::string rel = u.user_id + "/forgery/" + image_name(s);
      write_pgm(root / rel, u.skilled[s]);
      e.skilled.push_back(rel);
    }
    m.users[i] = std::move(e);
  });
  validate_manifest(m);
  write_file(root / "manifest.json", to_json(m).dump(1) + "\n");
  return m;
}

}  // namespace sigver
