#include "hattn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "hattn/serialize.hpp"
#include "json.hpp"

namespace hattn {

std::size_t BinaryMask::area() const {
  std::size_t n = 0;
  for (std::uint8_t v : grid) n += v;
  return n;
}

const char* to_string(MaskProvenance p) {
  return p == MaskProvenance::original_box ? "original_box" : "refined_intersection";
}

namespace {

MaskProvenance provenance_from_string(const std::string& s) {
  if (s == "original_box") return MaskProvenance::original_box;
  if (s == "refined_intersection") return MaskProvenance::refined_intersection;
  throw std::runtime_error("unknown mask provenance: " + s);
}

struct DrawBounds {
  int min_x = 1 << 30, min_y = 1 << 30, max_x = -1, max_y = -1;
  void cover(int x, int y) {
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  bool any() const { return max_x >= 0; }
};

// adds the signed contrast at (x,y) on all channels, clamped to [0,1]
void put_pixel(Tensor& image, int x, int y, double contrast, DrawBounds& bounds) {
  const std::size_t h = image.extent(1), w = image.extent(2);
  if (x < 0 || y < 0 || x >= static_cast<int>(w) || y >= static_cast<int>(h)) return;
  auto v = image.values();
  for (std::size_t c = 0; c < 3; ++c) {
    double& px = v[(c * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
    px = std::clamp(px + contrast, 0.0, 1.0);
  }
  bounds.cover(x, y);
}

struct CanvasEllipse {
  double cx = 0, cy = 0, ax = 1, ay = 1;
  double radius2(double x, double y) const {
    const double dx = (x - cx) / ax, dy = (y - cy) / ay;
    return dx * dx + dy * dy;
  }
  bool contains(int x, int y, double margin = 0.92) const {
    return radius2(static_cast<double>(x), static_cast<double>(y)) <= margin * margin;
  }
  bool contains_box(int x0, int y0, int x1, int y1) const {
    return contains(x0, y0) && contains(x1, y0) && contains(x0, y1) && contains(x1, y1);
  }
};

// Picks a center so the shape's bounding box sits inside the canvas.
template <typename Fits>
std::pair<int, int> place_inside(Rng& rng, int lo_x, int hi_x, int lo_y, int hi_y, const Fits& fits) {
  int cx = 0, cy = 0;
  for (int attempt = 0; attempt < 64; ++attempt) {
    cx = rng.uniform_int(lo_x, hi_x);
    cy = rng.uniform_int(lo_y, hi_y);
    if (fits(cx, cy)) break;
  }
  return {cx, cy};
}

void draw_disc(Tensor& image, Rng& rng, std::size_t n, double contrast, const CanvasEllipse& canvas,
               DrawBounds& bounds) {
  const int ni = static_cast<int>(n);
  const int r = rng.uniform_int(std::max(2, ni / 16), std::max(3, ni / 7));
  auto [cx, cy] = place_inside(rng, r, ni - 1 - r, r, ni - 1 - r, [&](int x, int y) {
    return canvas.contains_box(x - r, y - r, x + r, y + r);
  });
  for (int y = cy - r; y <= cy + r; ++y) {
    for (int x = cx - r; x <= cx + r; ++x) {
      const int dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy <= r * r) put_pixel(image, x, y, contrast, bounds);
    }
  }
}

void draw_square_outline(Tensor& image, Rng& rng, std::size_t n, double contrast, const CanvasEllipse& canvas,
                         DrawBounds& bounds) {
  const int ni = static_cast<int>(n);
  const int half = rng.uniform_int(std::max(3, ni / 12), std::max(4, ni / 5));
  const int thick = rng.uniform_int(1, 2);
  auto [cx, cy] = place_inside(rng, half, ni - 1 - half, half, ni - 1 - half, [&](int x, int y) {
    return canvas.contains_box(x - half, y - half, x + half, y + half);
  });
  for (int y = cy - half; y <= cy + half; ++y) {
    for (int x = cx - half; x <= cx + half; ++x) {
      const int bx = std::min(x - (cx - half), (cx + half) - x);
      const int by = std::min(y - (cy - half), (cy + half) - y);
      if (std::min(bx, by) < thick) put_pixel(image, x, y, contrast, bounds);
    }
  }
}

// Cross-shaped distractor, not any class. Drawn into positives and
// negatives alike, anywhere in the image, so it carries no label signal;
// class attention that fires on it is exactly the noise the attention
// hierarchy is meant to prune.
void draw_cross(Tensor& image, Rng& rng, std::size_t n, double contrast, DrawBounds& bounds) {
  const int ni = static_cast<int>(n);
  const int arm = rng.uniform_int(std::max(2, ni / 20), std::max(3, ni / 9));
  const int thick = rng.uniform_int(1, 2);
  const int cx = rng.uniform_int(arm, ni - 1 - arm);
  const int cy = rng.uniform_int(arm, ni - 1 - arm);
  for (int t = 0; t < thick; ++t) {
    for (int d = -arm; d <= arm; ++d) {
      put_pixel(image, cx + d, cy + t, contrast, bounds);
      put_pixel(image, cx + t, cy + d, contrast, bounds);
    }
  }
}

void draw_bar(Tensor& image, Rng& rng, std::size_t n, double contrast, const CanvasEllipse& canvas,
              DrawBounds& bounds) {
  const int ni = static_cast<int>(n);
  const int len = rng.uniform_int(std::max(6, ni / 5), std::max(8, (2 * ni) / 5));
  const int thick = rng.uniform_int(2, 3);
  const bool horizontal = rng.bernoulli(0.5);
  const int ext_x = horizontal ? len : thick;
  const int ext_y = horizontal ? thick : len;
  auto [x0, y0] = place_inside(rng, 0, ni - ext_x, 0, ni - ext_y, [&](int x, int y) {
    return canvas.contains_box(x, y, x + ext_x - 1, y + ext_y - 1);
  });
  for (int y = y0; y < y0 + ext_y; ++y) {
    for (int x = x0; x < x0 + ext_x; ++x) put_pixel(image, x, y, contrast, bounds);
  }
}

// bilinearly sampled value-noise plane in [-1, 1]
std::vector<double> value_noise(Rng& rng, std::size_t coarse, std::size_t n) {
  std::vector<double> grid(coarse * coarse);
  for (double& v : grid) v = rng.uniform(-1.0, 1.0);
  std::vector<double> plane(n * n);
  const double scale = static_cast<double>(coarse) / static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y) {
    double sy = std::clamp((static_cast<double>(y) + 0.5) * scale - 0.5, 0.0, static_cast<double>(coarse - 1));
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), coarse - 2);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < n; ++x) {
      double sx = std::clamp((static_cast<double>(x) + 0.5) * scale - 0.5, 0.0, static_cast<double>(coarse - 1));
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), coarse - 2);
      const double fx = sx - static_cast<double>(x0);
      plane[y * n + x] = (1 - fy) * ((1 - fx) * grid[y0 * coarse + x0] + fx * grid[y0 * coarse + x0 + 1]) +
                         fy * ((1 - fx) * grid[(y0 + 1) * coarse + x0] + fx * grid[(y0 + 1) * coarse + x0 + 1]);
    }
  }
  return plane;
}

Tensor textured_scene(Rng& rng, std::size_t n, CanvasEllipse& canvas) {
  // two octaves of value noise plus a bright elliptical canvas; class
  // shapes are always placed on the canvas while distractors are not,
  // giving the foreground attention a structure worth learning
  std::vector<double> low = value_noise(rng, 5, n);
  std::vector<double> mid = value_noise(rng, std::max<std::size_t>(9, n / 6), n);
  const double nd = static_cast<double>(n);
  canvas.cx = nd * rng.uniform(0.42, 0.58);
  canvas.cy = nd * rng.uniform(0.42, 0.58);
  canvas.ax = nd * rng.uniform(0.30, 0.40);
  canvas.ay = nd * rng.uniform(0.30, 0.40);
  const double lift = rng.uniform(0.16, 0.24);

  Tensor image(Shape{3, n, n});
  auto iv = image.values();
  std::vector<double> channel_offset(3);
  for (double& v : channel_offset) v = rng.uniform(-0.02, 0.02);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t i = y * n + x;
      const double r = std::sqrt(canvas.radius2(static_cast<double>(x), static_cast<double>(y)));
      const double rim = std::clamp((1.0 - r) * 5.0, 0.0, 1.0);  // soft edge
      const double base = 0.32 + 0.08 * low[i] + 0.05 * mid[i] + lift * rim + 0.8 * rng.uniform(-0.04, 0.04);
      for (std::size_t c = 0; c < 3; ++c) {
        iv[(c * n + y) * n + x] = std::clamp(base + channel_offset[c], 0.0, 1.0);
      }
    }
  }
  return image;
}

}  // namespace}  // namespace

std::vector<Sample> generate_synthetic(const GenerateConfig& config) {
  if (config.annotated_fraction < 0.0 || config.annotated_fraction > 1.0 || config.positive_fraction < 0.0 ||
      config.positive_fraction > 1.0) {
    throw std::invalid_argument("generate_synthetic: fractions must lie in [0,1]");
  }
  if (config.num_classes == 0 || config.num_classes > 3) {
    throw std::invalid_argument("generate_synthetic: supported class counts are 1..3");
  }
  Rng master(config.seed);
  std::vector<Sample> samples;
  samples.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) {
    Rng rng = master.fork(i);
    Sample s;
    char id[32];
    std::snprintf(id, sizeof(id), "syn%05zu", i);
    s.id = id;
    s.labels.y.assign(config.num_classes, 0);
    CanvasEllipse canvas;
    s.image = textured_scene(rng, config.image_size, canvas);

    // label-free distractor marks on every image
    const int n_crosses = rng.uniform_int(1, 3);
    for (int j = 0; j < n_crosses; ++j) {
      double contrast = rng.uniform(0.25, 0.45);
      if (rng.bernoulli(0.5)) contrast = -contrast;
      DrawBounds ignored;
      draw_cross(s.image, rng, config.image_size, contrast, ignored);
    }

    if (rng.bernoulli(config.positive_fraction)) {
      std::vector<int> classes(config.num_classes);
      for (std::size_t k = 0; k < config.num_classes; ++k) classes[k] = static_cast<int>(k);
      rng.shuffle(classes);
      const int n_shapes = rng.uniform_int(1, static_cast<int>(std::min<std::size_t>(3, config.num_classes)));
      for (int j = 0; j < n_shapes; ++j) {
        const int cls = classes[static_cast<std::size_t>(j)];
        double contrast = rng.uniform(0.25, 0.45);
        if (rng.bernoulli(0.5)) contrast = -contrast;
        DrawBounds bounds;
        switch (cls) {
          case 0: draw_disc(s.image, rng, config.image_size, contrast, canvas, bounds); break;
          case 1: draw_square_outline(s.image, rng, config.image_size, contrast, canvas, bounds); break;
          default: draw_bar(s.image, rng, config.image_size, contrast, canvas, bounds); break;
        }
        if (!bounds.any()) continue;
        s.labels.y[static_cast<std::size_t>(cls)] = 1;
        BoxAnnotation box;
        box.class_id = cls;
        box.x = bounds.min_x;
        box.y = bounds.min_y;
        box.w = bounds.max_x - bounds.min_x + 1;
        box.h = bounds.max_y - bounds.min_y + 1;
        s.boxes.push_back(box);
      }
      if (!rng.bernoulli(config.annotated_fraction)) s.boxes.clear();
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

BinaryMask mask_from_boxes(const std::vector<BoxAnnotation>& boxes, std::size_t height, std::size_t width,
                           int class_id) {
  BinaryMask mask;
  mask.class_id = class_id;
  mask.height = height;
  mask.width = width;
  mask.grid.assign(height * width, 0);
  for (const BoxAnnotation& b : boxes) {
    if (b.w < 1 || b.h < 1 || b.x < 0 || b.y < 0 || b.x + b.w > static_cast<int>(width) ||
        b.y + b.h > static_cast<int>(height)) {
      throw std::invalid_argument("mask_from_boxes: box outside image bounds");
    }
    for (int yy = b.y; yy < b.y + b.h; ++yy) {
      for (int xx = b.x; xx < b.x + b.w; ++xx) {
        mask.grid[static_cast<std::size_t>(yy) * width + static_cast<std::size_t>(xx)] = 1;
      }
    }
  }
  return mask;
}

BinaryMask mask_from_boxes(const std::vector<BoxAnnotation>& boxes, std::size_t image_size, int class_id) {
  return mask_from_boxes(boxes, image_size, image_size, class_id);
}

std::optional<BinaryMask> ground_truth_mask(const Sample& sample, int class_id) {
  auto it = sample.refined_masks.find(class_id);
  if (it != sample.refined_masks.end()) return it->second;
  std::vector<BoxAnnotation> class_boxes;
  for (const BoxAnnotation& b : sample.boxes) {
    if (b.class_id == class_id) class_boxes.push_back(b);
  }
  if (class_boxes.empty()) return std::nullopt;
  return mask_from_boxes(class_boxes, sample.image.extent(1), sample.image.extent(2), class_id);
}

Sample flip_horizontal(const Sample& sample) {
  Sample out = sample;
  const std::size_t h = sample.image.extent(1), w = sample.image.extent(2);
  auto src = sample.image.values();
  out.image = Tensor(sample.image.shape());
  auto dst = out.image.values();
  for (std::size_t c = 0; c < sample.image.extent(0); ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        dst[(c * h + y) * w + x] = src[(c * h + y) * w + (w - 1 - x)];
      }
    }
  }
  for (BoxAnnotation& b : out.boxes) b.x = static_cast<int>(w) - b.x - b.w;
  for (auto& [cls, mask] : out.refined_masks) {
    BinaryMask flipped = mask;
    for (std::size_t y = 0; y < mask.height; ++y) {
      for (std::size_t x = 0; x < mask.width; ++x) {
        flipped.grid[y * mask.width + x] = mask.grid[y * mask.width + (mask.width - 1 - x)];
      }
    }
    mask = std::move(flipped);
  }
  return out;
}

Sample translate(const Sample& sample, int dx, int dy) {
  Sample out = sample;
  const std::size_t ch = sample.image.extent(0), h = sample.image.extent(1), w = sample.image.extent(2);
  auto src = sample.image.values();
  out.image = Tensor(sample.image.shape());  // zero padded
  auto dst = out.image.values();
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y) - dy;
      if (sy < 0 || sy >= static_cast<long>(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = static_cast<long>(x) - dx;
        if (sx < 0 || sx >= static_cast<long>(w)) continue;
        dst[(c * h + y) * w + x] = src[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
      }
    }
  }
  std::vector<BoxAnnotation> kept;
  for (BoxAnnotation b : out.boxes) {
    b.x += dx;
    b.y += dy;
    const int x2 = std::min(b.x + b.w, static_cast<int>(w));
    const int y2 = std::min(b.y + b.h, static_cast<int>(h));
    b.x = std::max(b.x, 0);
    b.y = std::max(b.y, 0);
    if (x2 <= b.x || y2 <= b.y) continue;  // pushed fully outside: drop, keep label
    b.w = x2 - b.x;
    b.h = y2 - b.y;
    kept.push_back(b);
  }
  out.boxes = std::move(kept);
  for (auto& [cls, mask] : out.refined_masks) {
    BinaryMask moved = mask;
    std::fill(moved.grid.begin(), moved.grid.end(), std::uint8_t{0});
    for (std::size_t y = 0; y < mask.height; ++y) {
      const long ty = static_cast<long>(y) + dy;
      if (ty < 0 || ty >= static_cast<long>(mask.height)) continue;
      for (std::size_t x = 0; x < mask.width; ++x) {
        const long tx = static_cast<long>(x) + dx;
        if (tx < 0 || tx >= static_cast<long>(mask.width)) continue;
        moved.grid[static_cast<std::size_t>(ty) * mask.width + static_cast<std::size_t>(tx)] = mask.grid[y * mask.width + x];
      }
    }
    mask = std::move(moved);
  }
  return out;
}

Sample augment(const Sample& sample, Rng& rng) {
  const int max_dx = static_cast<int>(sample.image.extent(2) / 10);
  const int max_dy = static_cast<int>(sample.image.extent(1) / 10);
  const bool flip = rng.bernoulli(0.5);
  const int dx = rng.uniform_int(-max_dx, max_dx);
  const int dy = rng.uniform_int(-max_dy, max_dy);
  Sample out = flip ? flip_horizontal(sample) : sample;
  if (dx != 0 || dy != 0) out = translate(out, dx, dy);
  return out;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                  const std::string& manifest_name) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::ofstream mf(dir / manifest_name, std::ios::trunc);
  if (!mf) throw std::runtime_error("save_dataset: cannot write manifest in " + dir.string());
  for (const Sample& s : samples) {
    const std::string image_rel = "images/" + s.id + ".htsr";
    write_htsr(dir / image_rel, s.image);
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["image_path"] = image_rel;
    j["labels"] = s.labels.y;
    nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
    for (const BoxAnnotation& b : s.boxes) {
      boxes.push_back({{"class", b.class_id}, {"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
    }
    j["boxes"] = boxes;
    if (!s.split.empty()) j["split"] = s.split;
    if (!s.refined_masks.empty()) {
      nlohmann::ordered_json masks = nlohmann::ordered_json::array();
      for (const auto& [cls, mask] : s.refined_masks) {
        const std::string mask_rel = "masks/" + s.id + "_c" + std::to_string(cls) + ".htsr";
        Tensor m(Shape{mask.height, mask.width});
        auto mv = m.values();
        for (std::size_t i = 0; i < mask.grid.size(); ++i) mv[i] = mask.grid[i];
        write_htsr(dir / mask_rel, m);
        auto prov = s.mask_provenance.find(cls);
        masks.push_back({{"class", cls},
                         {"mask_path", mask_rel},
                         {"provenance", prov == s.mask_provenance.end()
                                            ? "refined_intersection"
                                            : to_string(prov->second)}});
      }
      j["refined_masks"] = masks;
    }
    mf << j.dump() << "\n";
  }
}

std::vector<Sample> load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("load_manifest: cannot open " + manifest_path.string());
  const std::filesystem::path base = manifest_path.parent_path();
  std::vector<Sample> samples;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Sample s;
    s.id = j["id"].get<std::string>();
    s.image = read_htsr(base / j["image_path"].get<std::string>());
    s.labels.y = j["labels"].get<std::vector<int>>();
    for (const auto& bj : j["boxes"]) {
      BoxAnnotation b;
      b.class_id = bj["class"].get<int>();
      b.x = bj["x"].get<int>();
      b.y = bj["y"].get<int>();
      b.w = bj["w"].get<int>();
      b.h = bj["h"].get<int>();
      if (b.w < 1 || b.h < 1 || b.x < 0 || b.y < 0 || b.x + b.w > static_cast<int>(s.image.extent(2)) ||
          b.y + b.h > static_cast<int>(s.image.extent(1))) {
        throw std::runtime_error("load_manifest: invalid box for sample " + s.id);
      }
      if (b.class_id < 0 || b.class_id >= static_cast<int>(s.labels.y.size()) ||
          !s.labels.y[static_cast<std::size_t>(b.class_id)]) {
        throw std::runtime_error("load_manifest: box class without positive label in sample " + s.id);
      }
      s.boxes.push_back(b);
    }
    if (j.contains("split")) s.split = j["split"].get<std::string>();
    if (j.contains("refined_masks")) {
      for (const auto& mj : j["refined_masks"]) {
        const int cls = mj["class"].get<int>();
        Tensor m = read_htsr(base / mj["mask_path"].get<std::string>());
        BinaryMask mask;
        mask.class_id = cls;
        mask.height = m.extent(0);
        mask.width = m.extent(1);
        mask.grid.resize(m.size());
        auto mv = m.values();
        for (std::size_t i = 0; i < mask.grid.size(); ++i) mask.grid[i] = mv[i] != 0.0 ? 1 : 0;
        s.refined_masks[cls] = std::move(mask);
        s.mask_provenance[cls] = provenance_from_string(mj["provenance"].get<std::string>());
      }
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(std::vector<Sample> samples, double train_fraction,
                                                                  std::uint64_t seed) {
  if (train_fraction < 0.0 || train_fraction > 1.0) throw std::invalid_argument("split_dataset: bad train fraction");
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(samples.size())));
  std::vector<Sample> train, eval;
  for (std::size_t i = 0; i < order.size(); ++i) {
    Sample s = std::move(samples[order[i]]);
    if (i < n_train) {
      s.split = "train";
      train.push_back(std::move(s));
    } else {
      s.split = "eval";
      eval.push_back(std::move(s));
    }
  }
  return {std::move(train), std::move(eval)};
}

}  // namespace hattn
