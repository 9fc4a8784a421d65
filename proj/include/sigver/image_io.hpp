#pragma once

#include <png.h>

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "sigver/error.hpp"
#include "sigver/image.hpp"

namespace sigver {

namespace detail {

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reads one whitespace-delimited PNM header token, skipping '#' comments.
inline std::string pnm_token(const std::vector<unsigned char>& buf, std::size_t& pos) {
  for (;;) {
    while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::string tok;
  while (pos < buf.size() && !std::isspace(buf[pos]) && buf[pos] != '#') tok.push_back(char(buf[pos++]));
  return tok;
}

}  // namespace detail

inline GrayImage decode_pgm(const std::vector<unsigned char>& buf, const std::string& origin = "<memory>") {
  std::size_t pos = 0;
  const std::string magic = detail::pnm_token(buf, pos);
  if (magic == "P6" || magic == "P3")
    fail(Errc::InvalidArgument, origin + ": color PNM input is not supported");
  require(magic == "P5", Errc::Io, origin + ": not a binary PGM (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(detail::pnm_token(buf, pos));
    h = std::stoi(detail::pnm_token(buf, pos));
    maxval = std::stoi(detail::pnm_token(buf, pos));
  } catch (const std::exception&) {
    fail(Errc::Io, origin + ": malformed PGM header");
  }
  require(w >= 1 && h >= 1, Errc::Io, origin + ": bad PGM dimensions");
  require(maxval >= 1 && maxval <= 255, Errc::Io, origin + ": only 8-bit PGM is supported");
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  require(buf.size() >= pos + n, Errc::Io, origin + ": truncated PGM data");
  std::vector<std::uint8_t> px(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                               buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
  if (maxval != 255)
    for (auto& p : px) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  return GrayImage(h, w, std::move(px));
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels().data()), img.size());
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), Errc::Io, "cannot write " + path.string());
  const auto s = encode_pgm(img);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
  require(static_cast<bool>(out), Errc::Io, "write failed for " + path.string());
}

inline GrayImage read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  require(fp != nullptr, Errc::Io, "cannot open " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, Errc::Io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(Errc::Io, "png_create_info_struct failed");
  }
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  std::vector<std::uint8_t> px;
  std::vector<png_bytep> rows;
  png_uint_32 w = 0, h = 0;
  int depth = 0, color = 0;
  bool is_color = false;
  if (setjmp(png_jmpbuf(png))) fail(Errc::Io, path.string() + ": corrupt PNG");
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_get_IHDR(png, info, &w, &h, &depth, &color, nullptr, nullptr, nullptr);
  if (color != PNG_COLOR_TYPE_GRAY || depth > 8) {
    is_color = color != PNG_COLOR_TYPE_GRAY;
  } else {
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    px.resize(static_cast<std::size_t>(w) * h);
    rows.resize(h);
    for (png_uint_32 r = 0; r < h; ++r) rows[r] = px.data() + static_cast<std::size_t>(r) * w;
    png_read_image(png, rows.data());
  }
  if (is_color) fail(Errc::InvalidArgument, path.string() + ": color PNG input is not supported");
  require(!px.empty(), Errc::InvalidArgument, path.string() + ": only 8-bit grayscale PNG is supported");
  return GrayImage(static_cast<int>(h), static_cast<int>(w), std::move(px));
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  return decode_pgm(detail::slurp(path), path.string());
}

/// Dispatches on file signature: PNG or binary PGM.
inline GrayImage read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::Io, "cannot open " + path.string());
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  in.close();
  if (png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  return read_pgm(path);
}

}  // namespace sigver
