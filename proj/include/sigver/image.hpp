#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sigver/error.hpp"

namespace sigver {

enum class SignatureLabel { genuine, skilled_forgery, random_forgery };

constexpr std::string_view label_name(SignatureLabel l) {
  switch (l) {
    case SignatureLabel::genuine: return "genuine";
    case SignatureLabel::skilled_forgery: return "skilled_forgery";
    case SignatureLabel::random_forgery: return "random_forgery";
  }
  return "genuine";
}

/// 8-bit grayscale raster, row-major, with provenance.
class GrayImage {
 public:
  GrayImage() = default;

  GrayImage(int height, int width, std::uint8_t fill = 0)
      : height_(height), width_(width) {
    require(height >= 1 && width >= 1, Errc::InvalidArgument,
            "image dimensions must be >= 1, got " + std::to_string(height) + "x" +
                std::to_string(width));
    pixels_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
  }

  GrayImage(int height, int width, std::vector<std::uint8_t> pixels)
      : height_(height), width_(width), pixels_(std::move(pixels)) {
    require(height >= 1 && width >= 1, Errc::InvalidArgument, "image dimensions must be >= 1");
    require(pixels_.size() == static_cast<std::size_t>(height) * static_cast<std::size_t>(width),
            Errc::ShapeMismatch, "pixel buffer does not match dimensions");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return pixels_.size(); }
  bool empty() const noexcept { return pixels_.empty(); }

  std::uint8_t& at(int r, int c) { return pixels_[index(r, c)]; }
  std::uint8_t at(int r, int c) const { return pixels_[index(r, c)]; }

  std::span<std::uint8_t> pixels() noexcept { return pixels_; }
  std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }

  std::string writer_id;
  SignatureLabel label = SignatureLabel::genuine;

  friend bool operator==(const GrayImage& a, const GrayImage& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.pixels_ == b.pixels_;
  }

 private:
  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(c);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> pixels_;
};

/// Copies metadata from `src` onto `dst` and returns it.
inline GrayImage with_provenance(GrayImage dst, const GrayImage& src) {
  dst.writer_id = src.writer_id;
  dst.label = src.label;
  return dst;
}

}  // namespace sigver
