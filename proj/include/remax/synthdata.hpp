#pragma once

// Deterministic synthetic panoptic scenes: a stack of horizontal stuff
// bands with things (circles, rectangles, triangles) painted back to
// front, so later shapes occlude earlier ones. Ground truth lives on the
// stride-4 mask grid; the image renders each grid cell as a 4x4 block of
// its class color plus per-pixel gaussian noise.
//
// Dataset file format "RMXDS1": magic, u16 thing/stuff class counts,
// u32 sample count, then per sample the dims, image (f32), label map (u8)
// and segment table; a CRC32 footer closes the file.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "remax/io.hpp"
#include "remax/matching.hpp"
#include "remax/model.hpp"
#include "remax/metrics.hpp"
#include "remax/relax.hpp"
#include "remax/rng.hpp"

namespace remax {

struct SceneConfig {
  int height = 32;  // image pixels; the mask grid is height/4 x width/4
  int width = 32;
  int n_thing_classes = 4;
  int n_stuff_classes = 2;
  int min_things = 1;
  int max_things = 4;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  int n_classes() const { return n_thing_classes + n_stuff_classes; }
  int grid_h() const { return height / kPatchStride; }
  int grid_w() const { return width / kPatchStride; }
  std::size_t grid_cells() const {
    return static_cast<std::size_t>(grid_h()) * static_cast<std::size_t>(grid_w());
  }

  void validate() const {
    if (height < 16 || width < 16 || height % kPatchStride || width % kPatchStride) {
      throw TensorError("scene: height/width must be >= 16 and divisible by 4");
    }
    if (n_thing_classes < 0 || n_stuff_classes < 1 || min_things < 0 ||
        max_things < min_things || (max_things > 0 && n_thing_classes == 0)) {
      throw TensorError("scene: invalid class/shape counts");
    }
    if (n_stuff_classes > grid_h()) {
      throw TensorError("scene: more stuff bands than grid rows");
    }
    if (noise_std < 0.0) throw TensorError("scene: negative noise std");
  }
};

struct PanopticSample {
  int height = 0, width = 0;    // image dims
  int grid_h = 0, grid_w = 0;   // mask grid dims
  std::vector<float> image;     // H*W*3, values in [0,1]
  std::vector<int> labels;      // per grid cell: semantic class
  std::vector<GroundTruthSegment> segments;
  Tensor S;  // grid_cells x n_classes binary, derived from labels

  std::vector<double> image_f64() const {
    return std::vector<double>(image.begin(), image.end());
  }

  SemanticMaskGT semantic_gt() const {
    SemanticMaskGT gt;
    gt.S = S;
    gt.class_pixel_count.assign(S.cols(), 0);
    for (std::size_t c = 0; c < S.cols(); ++c) {
      for (std::size_t i = 0; i < S.rows(); ++i) gt.class_pixel_count[c] += S.at(i, c) > 0.5;
    }
    return gt;
  }

  PanopticMap panoptic_gt() const {
    PanopticMap map;
    map.grid_h = grid_h;
    map.grid_w = grid_w;
    map.class_id.assign(labels.begin(), labels.end());
    map.segment_id.assign(labels.size(), 0);
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const int id = static_cast<int>(s) + 1;
      map.segments.push_back({id, segments[s].class_id, segments[s].is_thing,
                              segments[s].pixel_count()});
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (segments[s].mask[i]) map.segment_id[i] = id;
      }
    }
    return map;
  }
};

// ---- rasterization -----------------------------------------------------------

struct ShapeSpec {
  enum Kind { kCircle, kRectangle, kTriangle } kind = kCircle;
  int class_id = 0;
  // Circle: (cx, cy, r). Rectangle: cell box [x0,x1] x [y0,y1]. Triangle:
  // vertices (x0,y0) (x1,y1) (x2,y2) in cell coordinates.
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0, x2 = 0, y2 = 0, r = 0;

  bool covers(double x, double y) const {
    switch (kind) {
      case kCircle:
        return (x - x0) * (x - x0) + (y - y0) * (y - y0) <= r * r;
      case kRectangle:
        return x >= x0 && x <= x1 && y >= y0 && y <= y1;
      case kTriangle: {
        auto side = [](double ax, double ay, double bx, double by, double px, double py) {
          return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
        };
        const double d0 = side(x0, y0, x1, y1, x, y);
        const double d1 = side(x1, y1, x2, y2, x, y);
        const double d2 = side(x2, y2, x0, y0, x, y);
        const bool any_neg = d0 < 0 || d1 < 0 || d2 < 0;
        const bool any_pos = d0 > 0 || d1 > 0 || d2 > 0;
        return !(any_neg && any_pos);
      }
    }
    return false;
  }
};

// Paints stuff bands then things in order (painter's algorithm: later
// shapes overwrite). Returns per-cell semantic labels and instance ids
// (0..n_bands-1 for bands, n_bands+t for thing t).
struct RasterScene {
  std::vector<int> labels;
  std::vector<int> instance;
};

inline RasterScene rasterize(int grid_h, int grid_w, const std::vector<int>& band_rows,
                             const std::vector<int>& band_classes,
                             const std::vector<ShapeSpec>& things) {
  const std::size_t cells = static_cast<std::size_t>(grid_h) * static_cast<std::size_t>(grid_w);
  RasterScene rs;
  rs.labels.assign(cells, -1);
  rs.instance.assign(cells, -1);
  for (int y = 0; y < grid_h; ++y) {
    int band = 0;
    while (band + 1 < static_cast<int>(band_rows.size()) && y >= band_rows[band + 1]) ++band;
    for (int x = 0; x < grid_w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * grid_w + x;
      rs.labels[i] = band_classes[static_cast<std::size_t>(band)];
      rs.instance[i] = band;
    }
  }
  for (std::size_t t = 0; t < things.size(); ++t) {
    for (int y = 0; y < grid_h; ++y) {
      for (int x = 0; x < grid_w; ++x) {
        if (things[t].covers(x + 0.5, y + 0.5)) {
          const std::size_t i = static_cast<std::size_t>(y) * grid_w + x;
          rs.labels[i] = things[t].class_id;
          rs.instance[i] = static_cast<int>(band_rows.size()) + static_cast<int>(t);
        }
      }
    }
  }
  return rs;
}

namespace detail {

inline bool connected_4(const std::vector<std::uint8_t>& mask, int gh, int gw) {
  std::size_t total = 0, start = mask.size();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      ++total;
      if (start == mask.size()) start = i;
    }
  }
  if (total == 0) return false;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<std::size_t> stack{start};
  seen[start] = 1;
  std::size_t reached = 0;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    ++reached;
    const int y = static_cast<int>(i) / gw, x = static_cast<int>(i) % gw;
    const int ny[4] = {y - 1, y + 1, y, y};
    const int nx[4] = {x, x, x - 1, x + 1};
    for (int k = 0; k < 4; ++k) {
      if (ny[k] < 0 || ny[k] >= gh || nx[k] < 0 || nx[k] >= gw) continue;
      const std::size_t j = static_cast<std::size_t>(ny[k]) * gw + nx[k];
      if (mask[j] && !seen[j]) {
        seen[j] = 1;
        stack.push_back(j);
      }
    }
  }
  return reached == total;
}

// Deterministic palette: a fixed hue wheel, one base color per class.
inline void class_color(int class_id, int n_classes, double rgb[3]) {
  const double h = 6.0 * static_cast<double>(class_id) / static_cast<double>(n_classes);
  const int sector = static_cast<int>(h) % 6;
  const double f = h - static_cast<double>(static_cast<int>(h));
  const double v = 0.85, s = 0.75;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

}  // namespace detail

// Builds the sample's GT structures from a final raster, dropping stuff
// bands that ended up fully occluded. Throws if a thing is empty or
// disconnected (the generator retries; direct callers must pass valid
// rasters or accept the error).
inline PanopticSample assemble_sample(const RasterScene& rs, const SceneConfig& cfg,
                                      const std::vector<int>& band_classes,
                                      const std::vector<ShapeSpec>& things,
                                      RngStream& noise_rng) {
  cfg.validate();
  const int gh = cfg.grid_h(), gw = cfg.grid_w();
  const std::size_t cells = cfg.grid_cells();

  PanopticSample s;
  s.height = cfg.height;
  s.width = cfg.width;
  s.grid_h = gh;
  s.grid_w = gw;
  s.labels = rs.labels;

  const int n_bands = static_cast<int>(band_classes.size());
  for (int b = 0; b < n_bands; ++b) {
    GroundTruthSegment seg;
    seg.mask.assign(cells, 0);
    for (std::size_t i = 0; i < cells; ++i) seg.mask[i] = rs.instance[i] == b;
    if (seg.pixel_count() == 0) continue;  // fully occluded band
    seg.class_id = band_classes[static_cast<std::size_t>(b)];
    seg.is_thing = false;
    s.segments.push_back(std::move(seg));
  }
  for (std::size_t t = 0; t < things.size(); ++t) {
    GroundTruthSegment seg;
    seg.mask.assign(cells, 0);
    for (std::size_t i = 0; i < cells; ++i)
      seg.mask[i] = rs.instance[i] == n_bands + static_cast<int>(t);
    if (seg.pixel_count() == 0 || !detail::connected_4(seg.mask, gh, gw)) {
      throw TensorError("scene: thing became empty or disconnected");
    }
    seg.class_id = things[t].class_id;
    seg.is_thing = true;
    s.segments.push_back(std::move(seg));
  }

  s.S = Tensor::zeros({cells, static_cast<std::size_t>(cfg.n_classes())});
  for (std::size_t i = 0; i < cells; ++i) s.S.at(i, static_cast<std::size_t>(s.labels[i])) = 1.0;

  // Render: each grid cell becomes a 4x4 block of its class color, with
  // per-pixel noise, quantized to f32 so file round-trips are exact.
  s.image.assign(static_cast<std::size_t>(cfg.height) * cfg.width * 3, 0.0f);
  for (int py = 0; py < cfg.height; ++py) {
    for (int px = 0; px < cfg.width; ++px) {
      const std::size_t cell = static_cast<std::size_t>(py / kPatchStride) * gw +
                               static_cast<std::size_t>(px / kPatchStride);
      double rgb[3];
      detail::class_color(s.labels[cell], cfg.n_classes(), rgb);
      for (int ch = 0; ch < 3; ++ch) {
        const double v = rgb[ch] + cfg.noise_std * noise_rng.normal();
        s.image[(static_cast<std::size_t>(py) * cfg.width + px) * 3 + ch] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return s;
}

// Deterministic generation; the per-sample stream is seeded with
// cfg.seed ^ sample_index. Scenes whose things end up occluded into
// disconnection are redrawn from the same stream.
inline PanopticSample generate(std::uint64_t sample_index, const SceneConfig& cfg) {
  cfg.validate();
  RngStream rng(cfg.seed ^ sample_index);
  const int gh = cfg.grid_h(), gw = cfg.grid_w();

  for (int attempt = 0; attempt < 1000; ++attempt) {
    // Horizontal stuff bands with distinct stuff classes, top to bottom;
    // distinct cut rows keep every band nonempty before occlusion.
    const int n_bands = cfg.n_stuff_classes;
    std::vector<int> band_rows{0};
    while (static_cast<int>(band_rows.size()) < n_bands) {
      const int cut = static_cast<int>(rng.uniform_int(1, gh - 1));
      if (std::find(band_rows.begin(), band_rows.end(), cut) == band_rows.end()) {
        band_rows.push_back(cut);
      }
    }
    std::sort(band_rows.begin(), band_rows.end());
    std::vector<int> band_classes(static_cast<std::size_t>(n_bands));
    for (int b = 0; b < n_bands; ++b)
      band_classes[static_cast<std::size_t>(b)] = cfg.n_thing_classes + b;

    const int n_things =
        static_cast<int>(rng.uniform_int(cfg.min_things, cfg.max_things));
    std::vector<ShapeSpec> things;
    const double max_r = std::max(1.0, std::min(gh, gw) / 3.0);
    for (int t = 0; t < n_things; ++t) {
      ShapeSpec sp;
      sp.kind = static_cast<ShapeSpec::Kind>(rng.uniform_int(0, 2));
      sp.class_id = static_cast<int>(rng.uniform_int(0, cfg.n_thing_classes - 1));
      switch (sp.kind) {
        case ShapeSpec::kCircle:
          sp.r = rng.uniform(1.0, max_r);
          sp.x0 = rng.uniform(sp.r, gw - sp.r);
          sp.y0 = rng.uniform(sp.r, gh - sp.r);
          break;
        case ShapeSpec::kRectangle: {
          const double w = rng.uniform(1.5, 2.0 * max_r);
          const double h = rng.uniform(1.5, 2.0 * max_r);
          sp.x0 = rng.uniform(0.0, std::max(0.1, gw - w));
          sp.y0 = rng.uniform(0.0, std::max(0.1, gh - h));
          sp.x1 = sp.x0 + w;
          sp.y1 = sp.y0 + h;
          break;
        }
        case ShapeSpec::kTriangle: {
          const double cx = rng.uniform(1.0, gw - 1.0);
          const double cy = rng.uniform(1.0, gh - 1.0);
          const double rr = rng.uniform(1.2, max_r + 1.0);
          for (int v = 0; v < 3; ++v) {
            const double ang = rng.uniform(0.0, 6.283185307179586);
            (v == 0 ? sp.x0 : v == 1 ? sp.x1 : sp.x2) = cx + rr * std::cos(ang);
            (v == 0 ? sp.y0 : v == 1 ? sp.y1 : sp.y2) = cy + rr * std::sin(ang);
          }
          break;
        }
      }
      things.push_back(sp);
    }

    const RasterScene rs = rasterize(gh, gw, band_rows, band_classes, things);
    try {
      return assemble_sample(rs, cfg, band_classes, things, rng);
    } catch (const TensorError&) {
      continue;  // occlusion broke a thing apart; redraw
    }
  }
  throw TensorError("scene: could not draw a valid sample in 1000 attempts");
}

// ---- dataset file ---------------------------------------------------------------

inline constexpr char kDatasetMagic[] = "RMXDS1";

inline void write_dataset(const std::string& path, const std::vector<PanopticSample>& samples,
                          const SceneConfig& cfg) {
  ByteWriter w;
  w.str(kDatasetMagic);
  w.u16(static_cast<std::uint16_t>(cfg.n_thing_classes));
  w.u16(static_cast<std::uint16_t>(cfg.n_stuff_classes));
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    w.u32(static_cast<std::uint32_t>(s.height));
    w.u32(static_cast<std::uint32_t>(s.width));
    w.u32(static_cast<std::uint32_t>(s.grid_h));
    w.u32(static_cast<std::uint32_t>(s.grid_w));
    for (float v : s.image) w.f32(v);
    for (int l : s.labels) w.u8(static_cast<std::uint8_t>(l));
    w.u32(static_cast<std::uint32_t>(s.segments.size()));
    for (const auto& seg : s.segments) {
      w.u8(static_cast<std::uint8_t>(seg.class_id));
      w.u8(seg.is_thing ? 1 : 0);
      w.u32(static_cast<std::uint32_t>(seg.pixel_count()));
      for (std::size_t i = 0; i < seg.mask.size(); ++i) {
        if (seg.mask[i]) w.u32(static_cast<std::uint32_t>(i));
      }
    }
  }
  w.finish_with_crc(path);
}

struct Dataset {
  int n_thing_classes = 0;
  int n_stuff_classes = 0;
  std::vector<PanopticSample> samples;

  int n_classes() const { return n_thing_classes + n_stuff_classes; }
};

inline Dataset read_dataset(const std::string& path) {
  ByteReader r = ByteReader::load_with_crc(path);
  if (r.str(sizeof(kDatasetMagic) - 1) != kDatasetMagic) {
    throw IoError("not a dataset file (bad magic): " + path);
  }
  Dataset ds;
  ds.n_thing_classes = r.u16();
  ds.n_stuff_classes = r.u16();
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    PanopticSample s;
    s.height = static_cast<int>(r.u32());
    s.width = static_cast<int>(r.u32());
    s.grid_h = static_cast<int>(r.u32());
    s.grid_w = static_cast<int>(r.u32());
    const std::size_t cells = static_cast<std::size_t>(s.grid_h) * s.grid_w;
    s.image.resize(static_cast<std::size_t>(s.height) * s.width * 3);
    for (auto& v : s.image) v = r.f32();
    s.labels.resize(cells);
    for (auto& l : s.labels) l = r.u8();
    const std::uint32_t n_segs = r.u32();
    for (std::uint32_t i = 0; i < n_segs; ++i) {
      GroundTruthSegment seg;
      seg.class_id = r.u8();
      seg.is_thing = r.u8() != 0;
      seg.mask.assign(cells, 0);
      const std::uint32_t npix = r.u32();
      for (std::uint32_t j = 0; j < npix; ++j) {
        const std::uint32_t idx = r.u32();
        if (idx >= cells) throw IoError("dataset: segment index out of range");
        seg.mask[idx] = 1;
      }
      s.segments.push_back(std::move(seg));
    }
    s.S = Tensor::zeros({cells, static_cast<std::size_t>(ds.n_classes())});
    for (std::size_t i = 0; i < cells; ++i) {
      if (s.labels[i] >= ds.n_classes()) throw IoError("dataset: label out of range");
      s.S.at(i, static_cast<std::size_t>(s.labels[i])) = 1.0;
    }
    ds.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw IoError("dataset: trailing bytes");
  return ds;
}

}  // namespace remax
