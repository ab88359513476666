#pragma once

// CAM-to-box protocol and localization metrics.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ccam/image_io.hpp"
#include "ccam/model.hpp"
#include "ccam/synthdata.hpp"

namespace ccam {

/// 0.00, 0.01, ..., 0.99
inline std::vector<double> default_threshold_grid() {
  std::vector<double> g(100);
  for (int k = 0; k < 100; ++k) g[static_cast<std::size_t>(k)] = k / 100.0;
  return g;
}

inline const std::vector<double>& default_iou_levels() {
  static const std::vector<double> levels{0.3, 0.5, 0.7};
  return levels;
}

/// Tight box of the largest 8-connected component of {H >= tau}. Equal-area
/// components resolve to the one whose first pixel comes first in row-major
/// order. With no pixel above tau, the 1x1 box at the (first) argmax.
inline BBox extract_bbox(const Tensor& H, double tau) {
  if (H.rank() != 2) throw ShapeError("extract_bbox: map must be 2-D");
  const int h = H.dim(0), w = H.dim(1);
  std::vector<int> label(static_cast<std::size_t>(h) * w, 0);
  std::vector<int> stack;
  BBox best;
  long best_area = 0;
  int next = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p0 = static_cast<std::size_t>(y) * w + x;
      if (label[p0] || !(H[p0] >= tau)) continue;
      label[p0] = ++next;
      stack.assign(1, static_cast<int>(p0));
      BBox b{x, y, x, y};
      long area = 0;
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        ++area;
        const int py = p / w, px = p % w;
        b.x0 = std::min(b.x0, px);
        b.x1 = std::max(b.x1, px);
        b.y0 = std::min(b.y0, py);
        b.y1 = std::max(b.y1, py);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int qy = py + dy, qx = px + dx;
            if (qy < 0 || qy >= h || qx < 0 || qx >= w) continue;
            const std::size_t q = static_cast<std::size_t>(qy) * w + qx;
            if (!label[q] && H[q] >= tau) {
              label[q] = next;
              stack.push_back(static_cast<int>(q));
            }
          }
        }
      }
      if (area > best_area) {
        best_area = area;
        best = b;
      }
    }
  }
  if (best_area > 0) return best;
  std::size_t arg = 0;
  for (std::size_t p = 1; p < H.numel(); ++p) {
    if (H[p] > H[arg]) arg = p;
  }
  const int ay = static_cast<int>(arg) / w, ax = static_cast<int>(arg) % w;
  return {ax, ay, ax, ay};
}

/// Intersection over union with inclusive pixel areas.
inline double iou(const BBox& a, const BBox& b) {
  const int ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const int ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  const long inter = (ix1 < ix0 || iy1 < iy0) ? 0 : static_cast<long>(ix1 - ix0 + 1) * (iy1 - iy0 + 1);
  const long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

struct AccuracySuite {
  double top1_cls = 0.0;
  double top1_loc = 0.0;
  double gt_known = 0.0;
};

inline constexpr double kGtKnownIoU = 0.5;

inline AccuracySuite accuracy_suite(std::span<const int> preds, std::span<const int> labels,
                                    std::span<const BBox> boxes, std::span<const BBox> gts) {
  if (preds.size() != labels.size() || preds.size() != boxes.size() || preds.size() != gts.size()) {
    throw ShapeError("accuracy_suite: input lengths differ");
  }
  if (preds.empty()) throw ShapeError("accuracy_suite: empty input");
  long cls = 0, loc = 0, known = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool c = preds[i] == labels[i];
    const bool k = iou(boxes[i], gts[i]) >= kGtKnownIoU;
    cls += c;
    known += k;
    loc += c && k;
  }
  const double n = static_cast<double>(preds.size());
  return {cls / n, loc / n, known / n};
}

/// Mean over IoU levels of the best (over thresholds) fraction of images whose
/// extracted box reaches that level.
inline double max_box_acc_v2(std::span<const Tensor> maps, std::span<const BBox> gts,
                             const std::vector<double>& grid = default_threshold_grid(),
                             const std::vector<double>& levels = default_iou_levels()) {
  if (maps.empty()) throw ShapeError("max_box_acc_v2: empty input");
  if (maps.size() != gts.size()) throw ShapeError("max_box_acc_v2: maps and boxes differ in length");
  std::vector<std::vector<long>> hits(levels.size(), std::vector<long>(grid.size(), 0));
  for (std::size_t i = 0; i < maps.size(); ++i) {
    for (std::size_t t = 0; t < grid.size(); ++t) {
      const double v = iou(extract_bbox(maps[i], grid[t]), gts[i]);
      for (std::size_t l = 0; l < levels.size(); ++l) hits[l][t] += v >= levels[l];
    }
  }
  const double n = static_cast<double>(maps.size());
  double total = 0.0;
  for (const auto& h : hits) total += static_cast<double>(*std::max_element(h.begin(), h.end())) / n;
  return total / static_cast<double>(levels.size());
}

/// Area under the dataset-pooled pixel precision-recall curve, step rule over
/// recall from an implicit recall-0 start. Thresholds where nothing is
/// predicted positive have no precision and are skipped; among points with
/// equal recall the highest precision is credited.
inline double pxap(std::span<const Tensor> maps, std::span<const Tensor> masks,
                   const std::vector<double>& grid = default_threshold_grid()) {
  if (maps.size() != masks.size()) throw ShapeError("pxap: maps and masks differ in length");
  const std::size_t nt = grid.size();
  // tp[t], pos[t]: foreground / all pixels scoring >= grid[t].
  std::vector<long> tp(nt + 1, 0), pos(nt + 1, 0);
  long fg_total = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].shape() != masks[i].shape()) throw ShapeError("pxap: map and mask sizes differ");
    for (std::size_t p = 0; p < maps[i].numel(); ++p) {
      const double v = maps[i][p];
      // number of thresholds this pixel passes
      const auto k = static_cast<std::size_t>(std::upper_bound(grid.begin(), grid.end(), v) - grid.begin());
      const bool fg = masks[i][p] > 0.5f;
      fg_total += fg;
      if (k == 0) continue;
      pos[k - 1] += 1;
      tp[k - 1] += fg;
    }
  }
  if (fg_total == 0) throw ShapeError("pxap: masks contain no foreground pixels");
  for (std::size_t t = nt - 1; t-- > 0;) {
    tp[t] += tp[t + 1];
    pos[t] += pos[t + 1];
  }
  std::vector<std::pair<double, double>> pts;  // (recall, precision)
  for (std::size_t t = 0; t < nt; ++t) {
    if (pos[t] == 0) continue;
    pts.emplace_back(static_cast<double>(tp[t]) / static_cast<double>(fg_total),
                     static_cast<double>(tp[t]) / static_cast<double>(pos[t]));
  }
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second > b.second;
  });
  double area = 0.0, prev_recall = 0.0;
  for (const auto& [r, p] : pts) {
    area += p * (r - prev_recall);
    prev_recall = r;
  }
  return area;
}

/// Share of the map's total mass that falls outside the mask.
inline double background_activation_ratio(const Tensor& H, const Tensor& mask) {
  if (H.shape() != mask.shape()) throw ShapeError("background_activation_ratio: size mismatch");
  double total = 0.0, outside = 0.0;
  for (std::size_t p = 0; p < H.numel(); ++p) {
    total += H[p];
    if (!(mask[p] > 0.5f)) outside += H[p];
  }
  return total > 0.0 ? outside / total : 0.0;
}

// ---------------------------------------------------------------- full protocol

struct EvalConfig {
  double seg_threshold = 0.15;
  std::vector<double> threshold_grid = default_threshold_grid();
  std::vector<double> iou_levels = default_iou_levels();
  CamSource cam_source = CamSource::Foreground;
  CombinationScheme scheme = CombinationScheme::Top1;
  bool keep_maps = false;

  void validate() const {
    if (!(seg_threshold > 0.0 && seg_threshold < 1.0)) throw ConfigError("seg_threshold must lie in (0, 1)");
    for (std::size_t i = 1; i < threshold_grid.size(); ++i) {
      if (!(threshold_grid[i] > threshold_grid[i - 1])) throw ConfigError("threshold grid must be increasing");
    }
  }
};

struct ImageRecord {
  std::string id;
  int pred = 0;
  int fg_class = 0;
  double iou = 0.0;
  BBox box;
  BBox gt;
};

struct EvalReport {
  double top1_cls = 0.0;
  double top1_loc = 0.0;
  double gt_known = 0.0;
  double maxboxaccv2 = 0.0;
  double pxap = 0.0;
  double bg_activation_ratio = 0.0;
  std::vector<ImageRecord> records;
  std::vector<Tensor> maps;  // normalized maps, filled when keep_maps is set

  std::vector<std::pair<std::string, double>> metrics() const {
    return {{"top1_cls", top1_cls},         {"top1_loc", top1_loc}, {"gt_known", gt_known},
            {"maxboxaccv2", maxboxaccv2}, {"pxap", pxap},         {"bg_activation_ratio", bg_activation_ratio}};
  }
};

struct ImageInference {
  PredictionBundle prediction;
  LocalizationMap map;
};

/// Eval-mode forward of one [3,S,S] image through to its localization map.
inline ImageInference infer_image(const Tensor& image, ModelParams& p, CamSource source,
                                  CombinationScheme scheme) {
  Graph g = Graph::inference();
  Shape bs{1};
  bs.insert(bs.end(), image.shape().begin(), image.shape().end());
  const Tensor batch(bs, std::vector<float>(image.data().begin(), image.data().end()));
  auto X = forward_backbone(g, batch, p, Mode::Eval);
  auto fb = decouple_features(g, X, p);
  auto z_o = classify(g, fb.O, p);
  auto z_f = classify(g, fb.F, p);
  ImageInference out;
  out.prediction = ensemble_predict(z_o.data(), z_f.data());
  const Tensor& src = source == CamSource::Foreground ? fb.X_f : fb.X;
  const Tensor maps = reshape(g, src, {src.dim(1), src.dim(2), src.dim(3)});
  const auto ranking = rank_classes(out.prediction.s);
  out.map = combine_cams(compute_all_cams(maps, p.cls_weight), ranking, scheme, image.dim(-1));
  return out;
}

/// `dataset_classes` is the number of foreground classes the dataset was
/// generated with; it must match the model's class count.
inline EvalReport evaluate(std::span<const Scene> scenes, const ModelParams& params, int dataset_classes,
                           const EvalConfig& cfg) {
  cfg.validate();
  if (scenes.empty()) throw ShapeError("evaluate: empty dataset");
  if (dataset_classes != params.num_classes()) {
    throw MismatchError("model has " + std::to_string(params.num_classes()) + " classes but the dataset has " +
                        std::to_string(dataset_classes));
  }
  ModelParams p = params.clone();
  EvalReport rep;
  std::vector<Tensor> maps, masks;
  std::vector<int> preds, labels;
  std::vector<BBox> boxes, gts;
  std::vector<double> bg;
  for (const auto& sc : scenes) {
    if (sc.fg_class < 0 || sc.fg_class >= dataset_classes) {
      throw MismatchError("scene " + sc.id + " has a label outside the model's class range");
    }
    const auto inf = infer_image(sc.image, p, cfg.cam_source, cfg.scheme);
    const BBox box = extract_bbox(inf.map.norm, cfg.seg_threshold);
    rep.records.push_back({sc.id, inf.prediction.pred, sc.fg_class, iou(box, sc.bbox), box, sc.bbox});
    preds.push_back(inf.prediction.pred);
    labels.push_back(sc.fg_class);
    boxes.push_back(box);
    gts.push_back(sc.bbox);
    bg.push_back(background_activation_ratio(inf.map.norm, sc.mask));
    maps.push_back(inf.map.norm);
    masks.push_back(sc.mask);
  }
  const auto acc = accuracy_suite(preds, labels, boxes, gts);
  rep.top1_cls = acc.top1_cls;
  rep.top1_loc = acc.top1_loc;
  rep.gt_known = acc.gt_known;
  rep.maxboxaccv2 = max_box_acc_v2(maps, gts, cfg.threshold_grid, cfg.iou_levels);
  rep.pxap = pxap(maps, masks, cfg.threshold_grid);
  // summed in sorted order so the mean does not depend on dataset order
  std::sort(bg.begin(), bg.end());
  double bg_sum = 0.0;
  for (double v : bg) bg_sum += v;
  rep.bg_activation_ratio = bg_sum / static_cast<double>(scenes.size());
  if (cfg.keep_maps) rep.maps = std::move(maps);
  return rep;
}

// ---------------------------------------------------------------- outputs

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_metrics_csv(const std::string& path, const EvalReport& rep) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "metric,value\n";
  for (const auto& [k, v] : rep.metrics()) f << k << ',' << format_metric(v) << '\n';
  if (!f) throw IoError("failed writing: " + path);
}

inline void write_per_image_csv(const std::string& path, const EvalReport& rep) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "id,pred,fg_class,iou,x0,y0,x1,y1\n";
  for (const auto& r : rep.records) {
    f << r.id << ',' << r.pred << ',' << r.fg_class << ',' << format_metric(r.iou) << ',' << r.box.x0 << ','
      << r.box.y0 << ',' << r.box.x1 << ',' << r.box.y1 << '\n';
  }
  if (!f) throw IoError("failed writing: " + path);
}

inline constexpr std::array<std::uint8_t, 3> kPredBoxColor{0, 255, 0};
inline constexpr std::array<std::uint8_t, 3> kGtBoxColor{255, 0, 255};

namespace detail {

// Blue -> cyan -> yellow -> red ramp.
inline std::array<double, 3> heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const double r = std::clamp(2.0 * v - 0.5, 0.0, 1.0);
  const double g = std::clamp(1.5 - std::abs(2.0 * v - 1.0) * 1.5, 0.0, 1.0);
  const double b = std::clamp(1.0 - 2.0 * v, 0.0, 1.0);
  return {r, g, b};
}

inline RawImage map_gray(const Tensor& H) {
  RawImage img{H.dim(1), H.dim(0), 1, std::vector<std::uint8_t>(H.numel())};
  for (std::size_t i = 0; i < H.numel(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(H[i]), 0.0, 1.0) * 255.0));
  }
  return img;
}

inline void draw_box(RawImage& img, const BBox& b, const std::array<std::uint8_t, 3>& c) {
  auto put = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    const std::size_t o = (static_cast<std::size_t>(y) * img.width + x) * 3;
    for (int k = 0; k < 3; ++k) img.pixels[o + k] = c[static_cast<std::size_t>(k)];
  };
  for (int x = b.x0; x <= b.x1; ++x) {
    put(x, b.y0);
    put(x, b.y1);
  }
  for (int y = b.y0; y <= b.y1; ++y) {
    put(b.x0, y);
    put(b.x1, y);
  }
}

}  // namespace detail

/// cams/<id>.pgm (map x 255) and overlays/<id>.ppm for every evaluated scene.
/// Requires a report produced with keep_maps.
inline void dump_cams(const std::string& dir, std::span<const Scene> scenes, const EvalReport& rep) {
  if (rep.maps.size() != scenes.size()) throw ShapeError("dump_cams: report holds no maps for these scenes");
  namespace fs = std::filesystem;
  const fs::path root(dir);
  detail::ensure_dir(root / "cams");
  detail::ensure_dir(root / "overlays");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Tensor& H = rep.maps[i];
    write_netpbm((root / "cams" / (scenes[i].id + ".pgm")).string(), detail::map_gray(H));
    RawImage ov = scene_rgb(scenes[i].image);
    for (std::size_t p = 0; p < H.numel(); ++p) {
      const auto c = detail::heat_color(H[p]);
      for (int k = 0; k < 3; ++k) {
        const double v = 0.5 * ov.pixels[p * 3 + k] + 0.5 * 255.0 * c[static_cast<std::size_t>(k)];
        ov.pixels[p * 3 + k] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
    detail::draw_box(ov, scenes[i].bbox, kGtBoxColor);
    detail::draw_box(ov, rep.records[i].box, kPredBoxColor);
    write_netpbm((root / "overlays" / (scenes[i].id + ".ppm")).string(), ov);
  }
}

}  // namespace ccam
