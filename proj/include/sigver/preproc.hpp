#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "sigver/error.hpp"
#include "sigver/image.hpp"

namespace sigver {

struct PreprocConfig {
  int canvas_h = 840;
  int canvas_w = 1360;
  int target_h = 170;
  int target_w = 242;
  double scale_factor = 1.0;

  int scaled(int v) const { return std::max(1, static_cast<int>(std::lround(v * scale_factor))); }
  int scaled_canvas_h() const { return scaled(canvas_h); }
  int scaled_canvas_w() const { return scaled(canvas_w); }
  int scaled_target_h() const { return scaled(target_h); }
  int scaled_target_w() const { return scaled(target_w); }

  void validate() const {
    require(scale_factor > 0.0 && std::isfinite(scale_factor), Errc::InvalidArgument,
            "scale_factor must be positive");
    require(target_h >= 1 && target_w >= 1, Errc::InvalidArgument, "target dims must be >= 1");
    require(target_h <= canvas_h && target_w <= canvas_w, Errc::InvalidArgument,
            "target dims must not exceed canvas dims");
  }
};

namespace detail {

using u128 = unsigned __int128;

// Exact comparison of a*b against c*d for a,c < 2^128 and b,d < 2^64.
inline int compare_products(u128 a, std::uint64_t b, u128 c, std::uint64_t d) {
  auto mul = [](u128 x, std::uint64_t y) {
    const u128 lo = static_cast<u128>(static_cast<std::uint64_t>(x)) * y;
    const u128 hi = (x >> 64) * y + (lo >> 64);
    return std::pair<u128, std::uint64_t>{hi, static_cast<std::uint64_t>(lo)};
  };
  const auto l = mul(a, b);
  const auto r = mul(c, d);
  if (l.first != r.first) return l.first < r.first ? -1 : 1;
  if (l.second != r.second) return l.second < r.second ? -1 : 1;
  return 0;
}

}  // namespace detail

/// Otsu threshold over the 256-bin histogram. Pixels <= threshold form the
/// dark (ink) class. The between-class variance is compared in exact integer
/// arithmetic, so ties resolve to the lowest threshold.
inline int otsu_threshold(const GrayImage& img) {
  require(!img.empty(), Errc::InvalidArgument, "empty image");
  std::array<std::uint64_t, 256> hist{};
  for (auto p : img.pixels()) ++hist[p];

  std::uint64_t total_n = 0, total_s = 0;
  for (int v = 0; v < 256; ++v) {
    total_n += hist[v];
    total_s += hist[v] * static_cast<std::uint64_t>(v);
  }

  // n0*n1*(mu0-mu1)^2 = (n1*S0 - n0*S1)^2 / (n0*n1); maximise that ratio.
  int best = -1;
  detail::u128 best_num = 0;
  std::uint64_t best_den = 1;
  std::uint64_t n0 = 0, s0 = 0;
  for (int t = 0; t < 255; ++t) {
    n0 += hist[t];
    s0 += hist[t] * static_cast<std::uint64_t>(t);
    const std::uint64_t n1 = total_n - n0;
    if (n0 == 0 || n1 == 0) continue;
    const std::uint64_t s1 = total_s - s0;
    const auto a = static_cast<detail::u128>(n1) * s0;
    const auto b = static_cast<detail::u128>(n0) * s1;
    const detail::u128 diff = a > b ? a - b : b - a;
    const detail::u128 num = diff * diff;
    const std::uint64_t den = n0 * n1;
    if (best < 0 || detail::compare_products(num, best_den, best_num, den) > 0) {
      best = t;
      best_num = num;
      best_den = den;
    }
  }
  require(best >= 0, Errc::ConstantImage, "image has a single intensity value");
  return best;
}

/// Background (pixels lighter than `threshold`) becomes 0; ink becomes 255 - v.
inline GrayImage invert_and_clean(const GrayImage& img, int threshold) {
  GrayImage out = with_provenance(GrayImage(img.height(), img.width(), std::uint8_t{0}), img);
  auto src = img.pixels();
  auto dst = out.pixels();
  for (std::size_t i = 0; i < src.size(); ++i)
    dst[i] = src[i] > threshold ? std::uint8_t{0} : static_cast<std::uint8_t>(255 - src[i]);
  return out;
}

struct CenterOfMass {
  double row = 0.0;
  double col = 0.0;
  std::uint64_t mass = 0;
};

/// Intensity-weighted center of mass of the non-zero pixels.
inline CenterOfMass center_of_mass(const GrayImage& img) {
  std::uint64_t mass = 0, sr = 0, sc = 0;
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c) {
      const std::uint64_t v = img.at(r, c);
      mass += v;
      sr += v * static_cast<std::uint64_t>(r);
      sc += v * static_cast<std::uint64_t>(c);
    }
  if (mass == 0) return {};
  return {static_cast<double>(sr) / static_cast<double>(mass),
          static_cast<double>(sc) / static_cast<double>(mass), mass};
}

/// Canvas reference point used for centering: (h/2, w/2) in integer pixels.
inline std::pair<int, int> canvas_center(int h, int w) { return {h / 2, w / 2}; }

/// Places a cleaned image (background 0) on a zero canvas so that its ink
/// center of mass lands on the canvas center. Ink pixels are copied unchanged.
inline GrayImage center_on_canvas(const GrayImage& img, int canvas_h, int canvas_w) {
  require(canvas_h >= 1 && canvas_w >= 1, Errc::InvalidArgument, "canvas dims must be >= 1");
  const CenterOfMass com = center_of_mass(img);
  require(com.mass > 0, Errc::EmptyForeground, "no ink pixels to center");

  int r0 = img.height(), r1 = -1, c0 = img.width(), c1 = -1;
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      if (img.at(r, c) != 0) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }

  const auto [cr, cc] = canvas_center(canvas_h, canvas_w);
  const int dr = static_cast<int>(std::lround(cr - com.row));
  const int dc = static_cast<int>(std::lround(cc - com.col));
  require(r0 + dr >= 0 && r1 + dr < canvas_h && c0 + dc >= 0 && c1 + dc < canvas_w, Errc::DoesNotFit,
          "ink bounding box " + std::to_string(r1 - r0 + 1) + "x" + std::to_string(c1 - c0 + 1) +
              " does not fit centered on a " + std::to_string(canvas_h) + "x" +
              std::to_string(canvas_w) + " canvas");

  GrayImage out = with_provenance(GrayImage(canvas_h, canvas_w, std::uint8_t{0}), img);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c)
      if (const auto v = img.at(r, c); v != 0) out.at(r + dr, c + dc) = v;
  return out;
}

inline GrayImage center_on_canvas(const GrayImage& img, const PreprocConfig& cfg) {
  cfg.validate();
  return center_on_canvas(img, cfg.scaled_canvas_h(), cfg.scaled_canvas_w());
}

/// Bilinear resize with corner-aligned sampling (output corners map onto
/// input corners) and round-half-up to integer intensities.
inline GrayImage resize_bilinear(const GrayImage& img, int target_h, int target_w) {
  require(target_h >= 1 && target_w >= 1, Errc::InvalidArgument, "target dims must be >= 1");
  GrayImage out = with_provenance(GrayImage(target_h, target_w, std::uint8_t{0}), img);
  if (target_h == img.height() && target_w == img.width()) {
    std::copy(img.pixels().begin(), img.pixels().end(), out.pixels().begin());
    return out;
  }

  // Source coordinate i*(src-1)/(dst-1) as an exact integer part plus fraction.
  struct Tap {
    int lo, hi;
    double frac;
  };
  auto taps = [](int src, int dst) {
    std::vector<Tap> t(static_cast<std::size_t>(dst));
    for (int i = 0; i < dst; ++i) {
      long num = 0, den = 1;
      if (dst > 1) {
        num = static_cast<long>(i) * (src - 1);
        den = dst - 1;
      } else {
        num = src - 1;
        den = 2;
      }
      const int lo = static_cast<int>(num / den);
      const long rem = num % den;
      t[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, src - 1),
                                        static_cast<double>(rem) / static_cast<double>(den)};
    }
    return t;
  };
  const auto ty = taps(img.height(), target_h);
  const auto tx = taps(img.width(), target_w);
  for (int r = 0; r < target_h; ++r) {
    const Tap& a = ty[static_cast<std::size_t>(r)];
    for (int c = 0; c < target_w; ++c) {
      const Tap& b = tx[static_cast<std::size_t>(c)];
      const double top = img.at(a.lo, b.lo) * (1.0 - b.frac) + img.at(a.lo, b.hi) * b.frac;
      const double bot = img.at(a.hi, b.lo) * (1.0 - b.frac) + img.at(a.hi, b.hi) * b.frac;
      const double v = top * (1.0 - a.frac) + bot * a.frac;
      out.at(r, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
    }
  }
  return out;
}

struct PreprocStages {
  int threshold = 0;
  GrayImage cleaned;
  GrayImage centered;
  GrayImage resized;
};

/// Full chain with intermediates: otsu -> invert_and_clean -> center -> resize.
inline PreprocStages preprocess_stages(const GrayImage& raw, const PreprocConfig& cfg) {
  cfg.validate();
  // A pure-white page inverts to all zeros whatever the threshold.
  const bool blank = std::all_of(raw.pixels().begin(), raw.pixels().end(),
                                 [](std::uint8_t v) { return v == 255; });
  require(!blank, Errc::EmptyForeground, "blank page");
  PreprocStages s;
  s.threshold = otsu_threshold(raw);
  s.cleaned = invert_and_clean(raw, s.threshold);
  s.centered = center_on_canvas(s.cleaned, cfg.scaled_canvas_h(), cfg.scaled_canvas_w());
  s.resized = resize_bilinear(s.centered, cfg.scaled_target_h(), cfg.scaled_target_w());
  return s;
}

inline GrayImage preprocess(const GrayImage& raw, const PreprocConfig& cfg) {
  return preprocess_stages(raw, cfg).resized;
}

}  // namespace sigver
