#pragma once

// Binary netpbm I/O: P6 (RGB, 8-bit) and P5 (gray, 8-bit).

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ccam/errors.hpp"

namespace ccam {

struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;  // 3 for P6, 1 for P5
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels
};

inline void write_netpbm(const std::string& path, const RawImage& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("netpbm: unsupported channel count for " + path);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw IoError("failed writing: " + path);
}

namespace detail {

inline bool next_header_int(const std::string& buf, std::size_t& pos, int& out) {
  while (pos < buf.size()) {
    if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
      ++pos;
    } else if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  if (pos >= buf.size() || !std::isdigit(static_cast<unsigned char>(buf[pos]))) return false;
  long v = 0;
  while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
    v = v * 10 + (buf[pos] - '0');
    if (v > 1 << 20) return false;
    ++pos;
  }
  out = static_cast<int>(v);
  return true;
}

}  // namespace detail

/// Reads a P5 or P6 file. `label` is used in error messages (e.g. a record id).
inline RawImage read_netpbm(const std::string& path, const std::string& label) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("missing file for " + label + ": " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
    throw IoError("not a binary netpbm file for " + label + ": " + path);
  }
  RawImage img;
  img.channels = buf[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  int maxval = 0;
  if (!detail::next_header_int(buf, pos, img.width) || !detail::next_header_int(buf, pos, img.height) ||
      !detail::next_header_int(buf, pos, maxval) || pos >= buf.size() ||
      !std::isspace(static_cast<unsigned char>(buf[pos]))) {
    throw IoError("corrupt netpbm header for " + label + ": " + path);
  }
  ++pos;
  if (maxval != 255 || img.width <= 0 || img.height <= 0) {
    throw IoError("unsupported netpbm header for " + label + ": " + path);
  }
  const std::size_t need = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (buf.size() - pos != need) {
    throw IoError("truncated or oversized pixel data for " + label + ": " + path);
  }
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.end());
  return img;
}

}  // namespace ccam
