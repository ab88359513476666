#pragma once

// Procedural scenes: one class-specific glyph (the foreground) painted over a
// class-specific background texture. The foreground/background pairing is
// drawn from a co-occurrence matrix, which lets the train split carry a
// strong pairing bias while the test split is unbiased.

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "ccam/errors.hpp"
#include "ccam/image_io.hpp"
#include "ccam/rng.hpp"
#include "ccam/tensor.hpp"

namespace ccam {

/// Inclusive pixel box.
struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0 + 1; }
  int height() const { return y1 - y0 + 1; }
  long area() const { return static_cast<long>(width()) * height(); }
  bool operator==(const BBox&) const = default;
};

inline constexpr int kMaxFgClasses = 8;
inline constexpr int kMaxBgClasses = 8;

struct CoocMatrix {
  int rows = 0;  // foreground classes
  int cols = 0;  // background classes
  std::vector<double> probs;

  double at(int fg, int bg) const { return probs[static_cast<std::size_t>(fg) * cols + bg]; }
};

/// Row i puts `bias` on background (i mod K_bg) and spreads the rest evenly.
inline CoocMatrix build_cooc_matrix(int k_fg, int k_bg, double bias) {
  if (k_fg < 2 || k_bg < 2) throw ShapeError("build_cooc_matrix: need at least 2 classes per axis");
  if (k_fg > kMaxFgClasses || k_bg > kMaxBgClasses) {
    throw ShapeError("build_cooc_matrix: at most 8 foreground and 8 background classes are renderable");
  }
  const double lo = 1.0 / k_bg;
  if (!(bias >= lo - 1e-12 && bias <= 1.0)) {
    throw ShapeError("build_cooc_matrix: bias must lie in [1/K_bg, 1], got " + std::to_string(bias));
  }
  CoocMatrix m{k_fg, k_bg, std::vector<double>(static_cast<std::size_t>(k_fg) * k_bg)};
  const double rest = (1.0 - bias) / (k_bg - 1);
  for (int i = 0; i < k_fg; ++i) {
    for (int j = 0; j < k_bg; ++j) m.probs[static_cast<std::size_t>(i) * k_bg + j] = j == i % k_bg ? bias : rest;
  }
  return m;
}

struct SceneSpec {
  int fg_class = 0;
  int bg_class = 0;
  double cx = 0.0, cy = 0.0;  // glyph centre in pixels
  double scale = 0.35;        // glyph diameter as a fraction of the image side
  double rotation = 0.0;      // radians
  std::uint64_t seed = 0;     // drives colour jitter, texture phase and noise
};

inline constexpr double kMinGlyphScale = 0.25;
inline constexpr double kMaxGlyphScale = 0.45;

namespace detail {

// Valid centre range for a glyph of radius r that keeps a 1-pixel margin.
inline std::pair<double, double> centre_range(double r, int size) {
  return {r + 1.5, static_cast<double>(size) - r - 1.5};
}

}  // namespace detail

inline SceneSpec sample_scene_spec(const CoocMatrix& cooc, Rng& rng, int size = 64) {
  SceneSpec s;
  s.fg_class = static_cast<int>(rng.below(static_cast<std::uint64_t>(cooc.rows)));
  const double u = rng.uniform();
  double acc = 0.0;
  s.bg_class = cooc.cols - 1;
  for (int j = 0; j < cooc.cols; ++j) {
    acc += cooc.at(s.fg_class, j);
    if (u < acc) {
      s.bg_class = j;
      break;
    }
  }
  s.scale = rng.uniform(kMinGlyphScale, kMaxGlyphScale);
  const double r = s.scale * size / 2.0;
  const auto [lo, hi] = detail::centre_range(r, size);
  s.cx = rng.uniform(lo, hi);
  s.cy = rng.uniform(lo, hi);
  s.rotation = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.seed = rng.next_u64();
  return s;
}

enum class Split { Train, Test };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

struct Scene {
  std::string id;
  Split split = Split::Train;
  Tensor image;  // [3, S, S], values k/255
  Tensor mask;   // [S, S], 0 or 1
  BBox bbox;
  int fg_class = 0;
  int bg_class = 0;
};

/// Tight box of the nonzero cells of an [S,S] mask; throws on an empty mask.
inline BBox mask_bbox(const Tensor& mask) {
  const int h = mask.dim(0), w = mask.dim(1);
  BBox b{w, h, -1, -1};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask[static_cast<std::size_t>(y) * w + x] != 0.0f) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
      }
    }
  }
  if (b.x1 < 0) throw ShapeError("mask_bbox: empty mask");
  return b;
}

namespace detail {

// Glyph membership in the unit disk frame (u, v), |(u, v)| <= 1 for every shape.
inline bool glyph_contains(int cls, double u, double v) {
  const double rho2 = u * u + v * v;
  switch (cls) {
    case 0:  // disk
      return rho2 <= 1.0;
    case 1: {  // equilateral triangle inscribed in the unit circle
      for (double a : {-std::numbers::pi / 2, std::numbers::pi / 6, 5 * std::numbers::pi / 6}) {
        if (u * std::cos(a) + v * std::sin(a) > 0.5) return false;
      }
      return true;
    }
    case 2:  // plus-shaped cross
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 3:  // ring
      return rho2 <= 1.0 && rho2 >= 0.55 * 0.55;
    case 4:  // square
      return std::abs(u) <= 0.7 && std::abs(v) <= 0.7;
    case 5:  // diamond
      return std::abs(u) + std::abs(v) <= 1.0;
    case 6: {  // hexagon
      for (double a : {0.0, std::numbers::pi / 3, 2 * std::numbers::pi / 3}) {
        if (std::abs(u * std::cos(a) + v * std::sin(a)) > 0.86) return false;
      }
      return true;
    }
    default: {  // crescent
      const double du = u - 0.45;
      return rho2 <= 1.0 && du * du + v * v > 0.75 * 0.75;
    }
  }
}

// Saturated, bright foreground colour families.
inline constexpr std::array<std::array<double, 3>, kMaxFgClasses> kFgColors = {{
    {0.95, 0.15, 0.10},  // red
    {0.95, 0.90, 0.10},  // yellow
    {0.10, 0.90, 0.95},  // cyan
    {0.95, 0.20, 0.90},  // magenta
    {1.00, 0.55, 0.05},  // orange
    {0.45, 1.00, 0.10},  // lime
    {0.97, 0.97, 0.97},  // white
    {0.35, 0.45, 1.00},  // light blue
}};

// Muted, darker background base colours.
inline constexpr std::array<std::array<double, 3>, kMaxBgClasses> kBgColors = {{
    {0.22, 0.38, 0.18},  // moss
    {0.14, 0.20, 0.42},  // navy
    {0.42, 0.28, 0.16},  // brown
    {0.32, 0.22, 0.38},  // plum
    {0.18, 0.36, 0.36},  // teal
    {0.36, 0.36, 0.34},  // slate
    {0.40, 0.18, 0.20},  // maroon
    {0.30, 0.32, 0.14},  // olive
}};

// Class-specific texture value in [-1, 1] at pixel (x, y).
inline double texture(int cls, double x, double y, double phase) {
  constexpr double tau = 2.0 * std::numbers::pi;
  switch (cls) {
    case 0:
      return std::sin(tau * y / 8.0 + phase);  // horizontal stripes
    case 1:
      return std::sin(tau * (x + y) / 11.0 + phase);  // diagonal waves
    case 2:
      return std::sin(tau * x / 12.0 + phase) * std::sin(tau * y / 12.0);  // checker blobs
    case 3: {
      const double r = std::hypot(x - 32.0, y - 32.0);
      return std::sin(tau * r / 7.0 + phase);  // concentric rings
    }
    case 4:
      return std::sin(tau * x / 6.0 + phase);  // vertical stripes
    case 5:
      return std::sin(tau * (x - y) / 9.0 + phase);  // anti-diagonal waves
    case 6:
      return std::sin(tau * x / 16.0 + phase) * std::cos(tau * y / 5.0);  // woven
    default:
      return std::sin(tau * std::sqrt(x * x + 2.0 * y * y) / 10.0 + phase);
  }
}

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Renders a scene. Geometry that would clip the glyph is resampled from the
/// spec seed up to 16 times before giving up.
inline Scene render_scene(SceneSpec spec, int size, std::string id = {}) {
  if (size < 32) throw ShapeError("render_scene: image size must be at least 32");
  if (spec.fg_class < 0 || spec.fg_class >= kMaxFgClasses || spec.bg_class < 0 || spec.bg_class >= kMaxBgClasses) {
    throw ShapeError("render_scene: class index out of range");
  }
  const double r = spec.scale * size / 2.0;
  auto [lo, hi] = detail::centre_range(r, size);
  if (!(spec.scale > 0.0) || lo > hi) throw ShapeError("render_scene: glyph does not fit in the image");
  Rng geo(Rng::mix(spec.seed ^ 0x5EEDULL));
  auto fits = [&](const SceneSpec& s) { return s.cx >= lo && s.cx <= hi && s.cy >= lo && s.cy <= hi; };
  int tries = 0;
  while (!fits(spec)) {
    if (++tries > 16) throw ShapeError("render_scene: could not place glyph inside the image");
    spec.cx = geo.uniform(lo, hi);
    spec.cy = geo.uniform(lo, hi);
  }

  Rng rng(spec.seed);
  const auto& fc = detail::kFgColors[static_cast<std::size_t>(spec.fg_class)];
  const auto& bc = detail::kBgColors[static_cast<std::size_t>(spec.bg_class)];
  std::array<double, 3> fg_col;
  for (int c = 0; c < 3; ++c) fg_col[c] = std::clamp(fc[c] + rng.uniform(-0.06, 0.06), 0.0, 1.0);
  std::array<double, 3> bg_col;
  for (int c = 0; c < 3; ++c) bg_col[c] = bc[c] + rng.uniform(-0.03, 0.03);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = 0.12;
  const double cr = std::cos(spec.rotation), sr = std::sin(spec.rotation);

  Scene sc;
  sc.id = std::move(id);
  sc.fg_class = spec.fg_class;
  sc.bg_class = spec.bg_class;
  sc.image = Tensor({3, size, size});
  sc.mask = Tensor({size, size});
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx = (px - spec.cx) / r, dy = (py - spec.cy) / r;
      const double u = cr * dx + sr * dy, v = -sr * dx + cr * dy;
      const std::size_t idx = static_cast<std::size_t>(y) * size + x;
      const bool inside = detail::glyph_contains(spec.fg_class, u, v);
      // Noise is drawn for every pixel so the stream does not depend on the glyph.
      const double noise = rng.uniform(-0.03, 0.03);
      for (int c = 0; c < 3; ++c) {
        double val;
        if (inside) {
          val = fg_col[c] * (0.9 + 0.1 * (1.0 - u * u));  // soft shading keeps the colour family
        } else {
          val = bg_col[c] + amp * detail::texture(spec.bg_class, px, py, phase) + noise;
          val = std::clamp(val, 0.02, 0.62);
        }
        sc.image[c * plane + idx] = static_cast<float>(detail::to_u8(val)) / 255.0f;
      }
      sc.mask[idx] = inside ? 1.0f : 0.0f;
    }
  }
  sc.bbox = mask_bbox(sc.mask);
  return sc;
}

// ---------------------------------------------------------------- dataset files

struct DatasetConfig {
  std::uint64_t seed = 7;
  int image_size = 64;
  int num_fg_classes = 4;
  int num_bg_classes = 4;
  double cooc_bias = 0.9;
  int train_size = 2000;
  int test_size = 500;
};

struct ManifestRow {
  std::string id;
  Split split = Split::Train;
  int fg_class = 0;
  int bg_class = 0;
  BBox bbox;
};

struct DatasetManifest {
  std::vector<ManifestRow> rows;
};

inline constexpr const char* kManifestHeader = "id\tsplit\tfg_class\tbg_class\tx0\ty0\tx1\ty1";

inline std::string scene_id(Split split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05d", split_name(split), index);
  return buf;
}

/// Scenes of one split, generated in memory. Train uses the biased matrix,
/// test the uniform one.
inline std::vector<Scene> generate_scenes(const DatasetConfig& cfg, Split split) {
  const bool train = split == Split::Train;
  const auto cooc = build_cooc_matrix(cfg.num_fg_classes, cfg.num_bg_classes,
                                      train ? cfg.cooc_bias : 1.0 / cfg.num_bg_classes);
  const int count = train ? cfg.train_size : cfg.test_size;
  Rng rng = Rng(cfg.seed).fork(train ? 1 : 2);
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    const SceneSpec spec = sample_scene_spec(cooc, rng, cfg.image_size);
    Scene sc = render_scene(spec, cfg.image_size, scene_id(split, i));
    sc.split = split;
    out.push_back(std::move(sc));
  }
  return out;
}

inline RawImage scene_rgb(const Tensor& image) {
  const int s = image.dim(1), w = image.dim(2);
  RawImage img{w, s, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(s) * w * 3)};
  const std::size_t plane = static_cast<std::size_t>(s) * w;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) img.pixels[i * 3 + c] = detail::to_u8(image[c * plane + i]);
  }
  return img;
}

inline RawImage mask_gray(const Tensor& mask) {
  RawImage img{mask.dim(1), mask.dim(0), 1, std::vector<std::uint8_t>(mask.numel())};
  for (std::size_t i = 0; i < mask.numel(); ++i) img.pixels[i] = mask[i] != 0.0f ? 255 : 0;
  return img;
}

namespace detail {

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec || !std::filesystem::is_directory(p)) throw IoError("cannot create directory: " + p.string());
}

}  // namespace detail

/// Writes both splits under out_dir (manifest.tsv, images/, masks/).
inline DatasetManifest generate_split(const DatasetConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const fs::path root(out_dir);
  detail::ensure_dir(root / "images");
  detail::ensure_dir(root / "masks");
  DatasetManifest manifest;
  std::ostringstream tsv;
  tsv << kManifestHeader << '\n';
  for (Split split : {Split::Train, Split::Test}) {
    for (const Scene& sc : generate_scenes(cfg, split)) {
      write_netpbm((root / "images" / (sc.id + ".ppm")).string(), scene_rgb(sc.image));
      write_netpbm((root / "masks" / (sc.id + ".pgm")).string(), mask_gray(sc.mask));
      tsv << sc.id << '\t' << split_name(split) << '\t' << sc.fg_class << '\t' << sc.bg_class << '\t'
          << sc.bbox.x0 << '\t' << sc.bbox.y0 << '\t' << sc.bbox.x1 << '\t' << sc.bbox.y1 << '\n';
      manifest.rows.push_back({sc.id, split, sc.fg_class, sc.bg_class, sc.bbox});
    }
  }
  const fs::path mpath = root / "manifest.tsv";
  std::ofstream f(mpath, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write manifest: " + mpath.string());
  const std::string text = tsv.str();
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw IoError("failed writing manifest: " + mpath.string());
  return manifest;
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

inline int parse_int_field(const std::string& s, const std::string& id, const char* what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("manifest row " + id + ": bad " + what + " '" + s + "'");
  }
}

inline Split parse_split(const std::string& s, const std::string& id) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw IoError("manifest row " + id + ": bad split '" + s + "'");
}

inline std::vector<std::vector<std::string>> read_manifest_rows(const std::filesystem::path& root) {
  const auto mpath = root / "manifest.tsv";
  std::ifstream f(mpath);
  if (!f) throw IoError("missing manifest: " + mpath.string());
  std::string line;
  if (!std::getline(f, line) || line != kManifestHeader) throw IoError("bad manifest header: " + mpath.string());
  std::vector<std::vector<std::string>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != 8) throw IoError("manifest row with wrong field count: " + line);
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline Tensor load_rgb(const std::filesystem::path& p, const std::string& id) {
  const RawImage img = read_netpbm(p.string(), id);
  if (img.channels != 3) throw IoError("image for " + id + " is not RGB: " + p.string());
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  Tensor t({3, img.height, img.width});
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) t[c * plane + i] = static_cast<float>(img.pixels[i * 3 + c]) / 255.0f;
  }
  return t;
}

}  // namespace detail

/// Loads every scene listed in the manifest, validating masks and boxes.
inline std::vector<Scene> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::vector<Scene> out;
  for (const auto& f : detail::read_manifest_rows(root)) {
    Scene sc;
    sc.id = f[0];
    sc.split = detail::parse_split(f[1], sc.id);
    sc.fg_class = detail::parse_int_field(f[2], sc.id, "fg_class");
    sc.bg_class = detail::parse_int_field(f[3], sc.id, "bg_class");
    sc.bbox = {detail::parse_int_field(f[4], sc.id, "x0"), detail::parse_int_field(f[5], sc.id, "y0"),
               detail::parse_int_field(f[6], sc.id, "x1"), detail::parse_int_field(f[7], sc.id, "y1")};
    sc.image = detail::load_rgb(root / "images" / (sc.id + ".ppm"), sc.id);
    const RawImage m = read_netpbm((root / "masks" / (sc.id + ".pgm")).string(), sc.id);
    if (m.channels != 1 || m.width != sc.image.dim(2) || m.height != sc.image.dim(1)) {
      throw IoError("mask for " + sc.id + " does not match its image");
    }
    sc.mask = Tensor({m.height, m.width});
    for (std::size_t i = 0; i < m.pixels.size(); ++i) {
      if (m.pixels[i] != 0 && m.pixels[i] != 255) throw IoError("mask for " + sc.id + " is not binary");
      sc.mask[i] = m.pixels[i] ? 1.0f : 0.0f;
    }
    BBox tight;
    try {
      tight = mask_bbox(sc.mask);
    } catch (const ShapeError&) {
      throw IoError("mask for " + sc.id + " is empty");
    }
    if (!(tight == sc.bbox)) throw IoError("manifest box for " + sc.id + " disagrees with its mask");
    out.push_back(std::move(sc));
  }
  return out;
}

/// An image without labels, for label-free consumers such as test-time adaptation.
struct UnlabeledImage {
  std::string id;
  Tensor image;
};

/// Loads the images of one split reading only the id and split columns.
inline std::vector<UnlabeledImage> load_images(const std::string& dir, Split split) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::vector<UnlabeledImage> out;
  for (const auto& f : detail::read_manifest_rows(root)) {
    if (detail::parse_split(f[1], f[0]) != split) continue;
    out.push_back({f[0], detail::load_rgb(root / "images" / (f[0] + ".ppm"), f[0])});
  }
  return out;
}

inline std::vector<Scene> filter_split(const std::vector<Scene>& scenes, Split split) {
  std::vector<Scene> out;
  for (const auto& s : scenes) {
    if (s.split == split) out.push_back(s);
  }
  return out;
}

}  // namespace ccam
