#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hattn/data.hpp"
#include "oracles.hpp"

using namespace hattn;

namespace {

GenerateConfig small_config(std::uint64_t seed = 42) {
  GenerateConfig c;
  c.count = 100;
  c.num_classes = 3;
  c.image_size = 64;
  c.annotated_fraction = 1.0;
  c.positive_fraction = 0.7;
  c.seed = seed;
  return c;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generate_synthetic: degenerate and invariant-by-construction configs") {
  SUBCASE("positive_fraction zero gives all-negative label sets and no boxes") {
    GenerateConfig c = small_config();
    c.positive_fraction = 0.0;
    auto samples = generate_synthetic(c);
    REQUIRE(samples.size() == c.count);
    for (const Sample& s : samples) {
      CHECK_FALSE(s.labels.positive());
      CHECK(s.boxes.empty());
    }
  }
  SUBCASE("annotated_fraction one keeps boxes on every positive") {
    auto samples = generate_synthetic(small_config());
    for (const Sample& s : samples) {
      if (s.labels.positive()) {
        CHECK(!s.boxes.empty());
        for (const BoxAnnotation& b : s.boxes) {
          CHECK(s.labels.y[static_cast<std::size_t>(b.class_id)] == 1);
        }
      } else {
        CHECK(s.boxes.empty());
      }
    }
  }
  SUBCASE("invalid fractions rejected") {
    GenerateConfig c = small_config();
    c.positive_fraction = 1.5;
    CHECK_THROWS_AS(generate_synthetic(c), std::invalid_argument);
  }
  SUBCASE("pixels live in [0,1] and boxes inside bounds") {
    auto samples = generate_synthetic(small_config());
    for (const Sample& s : samples) {
      for (double v : s.image.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      for (const BoxAnnotation& b : s.boxes) {
        CHECK(b.x >= 0);
        CHECK(b.y >= 0);
        CHECK(b.w >= 1);
        CHECK(b.h >= 1);
        CHECK(b.x + b.w <= 64);
        CHECK(b.y + b.h <= 64);
      }
    }
  }
}

TEST_CASE("generate_synthetic: fixed seed is byte-identical and class frequencies are sane") {
  GenerateConfig c = small_config(7);
  auto a = generate_synthetic(c);
  auto b = generate_synthetic(c);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].labels.y == b[i].labels.y);
    REQUIRE(a[i].image.size() == b[i].image.size());
    bool same = true;
    for (std::size_t j = 0; j < a[i].image.size(); ++j) same = same && a[i].image.values()[j] == b[i].image.values()[j];
    CHECK(same);
    REQUIRE(a[i].boxes.size() == b[i].boxes.size());
  }

  // written datasets are byte-identical too
  auto dir1 = std::filesystem::temp_directory_path() / "hattn_gen1";
  auto dir2 = std::filesystem::temp_directory_path() / "hattn_gen2";
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);
  save_dataset(dir1, a);
  save_dataset(dir2, b);
  CHECK(file_bytes(dir1 / "manifest.jsonl") == file_bytes(dir2 / "manifest.jsonl"));
  CHECK(file_bytes(dir1 / "images" / (a[0].id + ".htsr")) == file_bytes(dir2 / "images" / (b[0].id + ".htsr")));
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);

  // positives within binomial 3 sigma of the configured fraction
  GenerateConfig big = small_config(11);
  big.count = 400;
  auto samples = generate_synthetic(big);
  std::size_t n_pos = 0;
  for (const Sample& s : samples) n_pos += s.labels.positive() ? 1 : 0;
  const double expect = big.positive_fraction * static_cast<double>(big.count);
  const double sigma = std::sqrt(big.count * big.positive_fraction * (1 - big.positive_fraction));
  CHECK(std::abs(static_cast<double>(n_pos) - expect) < 3.0 * sigma);
  // every class appears in a healthy share of positives
  for (std::size_t k = 0; k < 3; ++k) {
    std::size_t n_k = 0;
    for (const Sample& s : samples) n_k += s.labels.y[k];
    CHECK(n_k > 0.25 * static_cast<double>(n_pos));
  }
}

TEST_CASE("mask_from_boxes") {
  SUBCASE("one 10x10 box covers 100 pixels") {
    BinaryMask m = mask_from_boxes({{0, 5, 7, 10, 10}}, 64, 0);
    CHECK(m.area() == 100);
  }
  SUBCASE("disjoint boxes add up") {
    BinaryMask m = mask_from_boxes({{0, 0, 0, 10, 10}, {0, 20, 20, 5, 5}}, 64, 0);
    CHECK(m.area() == 125);
  }
  SUBCASE("overlapping boxes against the per-pixel membership oracle") {
    std::vector<BoxAnnotation> boxes{{0, 3, 4, 12, 9}, {0, 8, 6, 10, 12}};
    BinaryMask m = mask_from_boxes(boxes, 32, 0);
    std::size_t expect = 0;
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        bool inside = false;
        for (const BoxAnnotation& b : boxes) {
          inside = inside || (x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h);
        }
        expect += inside ? 1 : 0;
        CHECK(m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == (inside ? 1 : 0));
      }
    }
    CHECK(m.area() == expect);
  }
  SUBCASE("out-of-bounds box rejected") {
    CHECK_THROWS_AS(mask_from_boxes({{0, 60, 60, 10, 10}}, 64, 0), std::invalid_argument);
  }
}

TEST_CASE("augment sub-operations") {
  GenerateConfig c = small_config(3);
  c.count = 20;
  auto samples = generate_synthetic(c);
  const Sample* boxed = nullptr;
  for (const Sample& s : samples) {
    if (!s.boxes.empty()) {
      boxed = &s;
      break;
    }
  }
  REQUIRE(boxed != nullptr);

  SUBCASE("flip twice restores image and boxes") {
    Sample once = flip_horizontal(*boxed);
    Sample twice = flip_horizontal(once);
    for (std::size_t i = 0; i < boxed->image.size(); ++i) {
      CHECK(twice.image.values()[i] == boxed->image.values()[i]);
    }
    REQUIRE(twice.boxes.size() == boxed->boxes.size());
    for (std::size_t i = 0; i < twice.boxes.size(); ++i) {
      CHECK(twice.boxes[i].x == boxed->boxes[i].x);
      CHECK(twice.boxes[i].y == boxed->boxes[i].y);
      CHECK(twice.boxes[i].w == boxed->boxes[i].w);
      CHECK(twice.boxes[i].h == boxed->boxes[i].h);
    }
  }
  SUBCASE("zero translation is the identity") {
    Sample t = translate(*boxed, 0, 0);
    for (std::size_t i = 0; i < boxed->image.size(); ++i) CHECK(t.image.values()[i] == boxed->image.values()[i]);
    REQUIRE(t.boxes.size() == boxed->boxes.size());
  }
  SUBCASE("translation shifts boxes by exactly the offset, clipped") {
    Sample t = translate(*boxed, 3, -2);
    for (std::size_t i = 0, j = 0; i < boxed->boxes.size(); ++i) {
      const BoxAnnotation& before = boxed->boxes[i];
      int nx = before.x + 3, ny = before.y - 2;
      int x2 = std::min(nx + before.w, 64), y2 = std::min(ny + before.h, 64);
      nx = std::max(nx, 0);
      ny = std::max(ny, 0);
      if (x2 <= nx || y2 <= ny) continue;  // dropped by the clipping rule
      const BoxAnnotation& after = t.boxes[j++];
      CHECK(after.x == nx);
      CHECK(after.y == ny);
      CHECK(after.w == x2 - nx);
      CHECK(after.h == y2 - ny);
    }
  }
  SUBCASE("translated content matches the coordinate arithmetic") {
    Sample t = translate(*boxed, 5, 4);
    const std::size_t h = 64, w = 64;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double expect = 0.0;
          if (y >= 4 && x >= 5) expect = boxed->image.values()[(ch * h + y - 4) * w + (x - 5)];
          CHECK(t.image.values()[(ch * h + y) * w + x] == expect);
        }
      }
    }
  }
  SUBCASE("augment preserves labels and box count for interior boxes") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      Sample a = augment(*boxed, rng);
      CHECK(a.labels.y == boxed->labels.y);
      CHECK(a.boxes.size() <= boxed->boxes.size());
    }
  }
}

TEST_CASE("manifest round trip preserves samples") {
  GenerateConfig c = small_config(9);
  c.count = 12;
  auto samples = generate_synthetic(c);
  samples[0].split = "train";
  auto dir = std::filesystem::temp_directory_path() / "hattn_manifest_rt";
  std::filesystem::remove_all(dir);
  save_dataset(dir, samples);
  auto loaded = load_manifest(dir / "manifest.jsonl");
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].id == samples[i].id);
    CHECK(loaded[i].labels.y == samples[i].labels.y);
    CHECK(loaded[i].boxes.size() == samples[i].boxes.size());
    bool same = true;
    for (std::size_t j = 0; j < samples[i].image.size(); ++j) {
      same = same && loaded[i].image.values()[j] == samples[i].image.values()[j];
    }
    CHECK(same);
  }
  CHECK(loaded[0].split == "train");
  std::filesystem::remove_all(dir);
}

TEST_CASE("refined masks survive the manifest round trip") {
  GenerateConfig c = small_config(21);
  c.count = 10;
  auto samples = generate_synthetic(c);
  Sample* boxed = nullptr;
  for (Sample& s : samples) {
    if (!s.boxes.empty()) {
      boxed = &s;
      break;
    }
  }
  REQUIRE(boxed != nullptr);
  const int cls = boxed->boxes[0].class_id;
  BinaryMask mask = mask_from_boxes({boxed->boxes[0]}, 64, cls);
  boxed->refined_masks[cls] = mask;
  boxed->mask_provenance[cls] = MaskProvenance::refined_intersection;

  auto dir = std::filesystem::temp_directory_path() / "hattn_refined_rt";
  std::filesystem::remove_all(dir);
  save_dataset(dir, samples);
  auto loaded = load_manifest(dir / "manifest.jsonl");
  const Sample* found = nullptr;
  for (const Sample& s : loaded) {
    if (s.id == boxed->id) found = &s;
  }
  REQUIRE(found != nullptr);
  REQUIRE(found->refined_masks.count(cls) == 1);
  CHECK(found->refined_masks.at(cls).grid == mask.grid);
  CHECK(found->mask_provenance.at(cls) == MaskProvenance::refined_intersection);
  std::filesystem::remove_all(dir);
}

TEST_CASE("split_dataset is deterministic and tags splits") {
  GenerateConfig c = small_config(33);
  c.count = 40;
  auto samples = generate_synthetic(c);
  auto [train1, eval1] = split_dataset(samples, 0.75, 5);
  auto [train2, eval2] = split_dataset(samples, 0.75, 5);
  CHECK(train1.size() == 30);
  CHECK(eval1.size() == 10);
  REQUIRE(train1.size() == train2.size());
  for (std::size_t i = 0; i < train1.size(); ++i) CHECK(train1[i].id == train2[i].id);
  for (const Sample& s : train1) CHECK(s.split == "train");
  for (const Sample& s : eval1) CHECK(s.split == "eval");
}

TEST_CASE("ground truth masks equal mask_from_boxes of the stored boxes") {
  auto samples = generate_synthetic(small_config(17));
  for (const Sample& s : samples) {
    for (std::size_t k = 0; k < 3; ++k) {
      std::vector<BoxAnnotation> class_boxes;
      for (const BoxAnnotation& b : s.boxes) {
        if (b.class_id == static_cast<int>(k)) class_boxes.push_back(b);
      }
      auto gt = ground_truth_mask(s, static_cast<int>(k));
      if (class_boxes.empty()) {
        CHECK_FALSE(gt.has_value());
      } else {
        REQUIRE(gt.has_value());
        CHECK(gt->grid == mask_from_boxes(class_boxes, 64, static_cast<int>(k)).grid);
      }
    }
  }
}
