#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "hattn/eval.hpp"
#include "oracles.hpp"

using namespace hattn;

namespace {

BinaryMask mask_of(std::size_t h, std::size_t w, std::initializer_list<std::pair<int, int>> pixels) {
  BinaryMask m;
  m.height = h;
  m.width = w;
  m.grid.assign(h * w, 0);
  for (auto [y, x] : pixels) m.grid[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = 1;
  return m;
}

}  // namespace

TEST_CASE("attention_to_regions") {
  SUBCASE("all-zero map yields no regions") {
    Tensor map(Shape{8, 8}, 0.0);
    ExtractedRegions r = attention_to_regions(map, 0.5);
    CHECK(r.boxes.empty());
    CHECK(r.region_mask.area() == 0);
  }
  SUBCASE("solid block gives exactly its tight box") {
    Tensor map(Shape{12, 12}, 0.0);
    for (std::size_t y = 3; y < 8; ++y) {
      for (std::size_t x = 4; x < 9; ++x) map.values()[y * 12 + x] = 1.0;
    }
    ExtractedRegions r = attention_to_regions(map, 0.999);
    REQUIRE(r.boxes.size() == 1);
    CHECK(r.boxes[0].x == 4);
    CHECK(r.boxes[0].y == 3);
    CHECK(r.boxes[0].w == 5);
    CHECK(r.boxes[0].h == 5);
    CHECK(r.region_mask.area() == 25);
  }
  SUBCASE("diagonal-touching blocks merge under 8-connectivity") {
    // two 2x2 blocks meeting only at a corner
    Tensor map(Shape{8, 8}, 0.0);
    for (std::size_t y = 0; y < 2; ++y) {
      for (std::size_t x = 0; x < 2; ++x) map.values()[y * 8 + x] = 1.0;
    }
    for (std::size_t y = 2; y < 4; ++y) {
      for (std::size_t x = 2; x < 4; ++x) map.values()[y * 8 + x] = 1.0;
    }
    ExtractedRegions r = attention_to_regions(map, 0.5, 1);
    REQUIRE(r.boxes.size() == 1);  // one component; 4-connectivity would give two
    CHECK(r.boxes[0].w == 4);
    CHECK(r.boxes[0].h == 4);

    // flood-fill oracle with 4-connectivity for contrast
    std::size_t components4 = 0;
    std::vector<int> label(64, 0);
    auto at = [&](std::size_t y, std::size_t x) { return map.values()[y * 8 + x] > 0.5; };
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        if (!at(y, x) || label[y * 8 + x]) continue;
        ++components4;
        std::vector<std::pair<std::size_t, std::size_t>> stack{{y, x}};
        label[y * 8 + x] = 1;
        while (!stack.empty()) {
          auto [cy, cx] = stack.back();
          stack.pop_back();
          const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
          for (int d = 0; d < 4; ++d) {
            long ny = static_cast<long>(cy) + dy[d], nx = static_cast<long>(cx) + dx[d];
            if (ny < 0 || nx < 0 || ny >= 8 || nx >= 8) continue;
            if (at(ny, nx) && !label[ny * 8 + nx]) {
              label[ny * 8 + nx] = 1;
              stack.push_back({static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)});
            }
          }
        }
      }
    }
    CHECK(components4 == 2);
  }
  SUBCASE("min_area suppresses speckle") {
    Tensor map(Shape{8, 8}, 0.0);
    map.values()[0] = 1.0;  // single pixel
    for (std::size_t y = 4; y < 7; ++y) {
      for (std::size_t x = 4; x < 7; ++x) map.values()[y * 8 + x] = 1.0;
    }
    ExtractedRegions r = attention_to_regions(map, 0.5, 4);
    REQUIRE(r.boxes.size() == 1);
    CHECK(r.region_mask.area() == 9);
  }
  SUBCASE("binarization is strict") {
    Tensor map(Shape{4, 4}, 0.999);
    ExtractedRegions r = attention_to_regions(map, 0.999, 1);
    CHECK(r.boxes.empty());
  }
}

TEST_CASE("iou and ior") {
  SUBCASE("identical regions score 1") {
    BinaryMask a = mask_of(8, 8, {{1, 1}, {1, 2}, {2, 1}});
    CHECK(iou(a, a) == 1.0);
    CHECK(ior(a, a) == 1.0);
  }
  SUBCASE("disjoint regions score 0") {
    BinaryMask a = mask_of(8, 8, {{0, 0}});
    BinaryMask b = mask_of(8, 8, {{5, 5}});
    CHECK(iou(a, b) == 0.0);
    CHECK(ior(a, b) == 0.0);
  }
  SUBCASE("boxes (0,0,10,10) vs (5,5,10,10) give IoU 1/7 by pixel enumeration") {
    BinaryMask a = mask_from_boxes({{0, 0, 0, 10, 10}}, 20, 0);
    BinaryMask b = mask_from_boxes({{0, 5, 5, 10, 10}}, 20, 0);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.grid.size(); ++i) {
      inter += (a.grid[i] && b.grid[i]) ? 1 : 0;
      uni += (a.grid[i] || b.grid[i]) ? 1 : 0;
    }
    CHECK(inter == 25);
    CHECK(uni == 175);
    CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
    CHECK(ior(a, b) == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("empty prediction has IoR 0") {
    BinaryMask empty = mask_of(4, 4, {});
    BinaryMask gt = mask_of(4, 4, {{1, 1}});
    CHECK(ior(empty, gt) == 0.0);
  }
  SUBCASE("symmetry and the IoU/IoR consistency identity on random regions") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      BinaryMask a = mask_of(6, 6, {});
      BinaryMask b = mask_of(6, 6, {});
      for (std::size_t i = 0; i < 36; ++i) {
        a.grid[i] = rng.bernoulli(0.4);
        b.grid[i] = rng.bernoulli(0.4);
      }
      CHECK(iou(a, b) == iou(b, a));
      // iou == ior * |pred| / |union|
      std::size_t uni = 0;
      for (std::size_t i = 0; i < 36; ++i) uni += (a.grid[i] || b.grid[i]) ? 1 : 0;
      if (uni > 0 && a.area() > 0) {
        CHECK(iou(a, b) ==
              doctest::Approx(ior(a, b) * static_cast<double>(a.area()) / static_cast<double>(uni)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("correct_ratio") {
  SUBCASE("perfect and empty localizers") {
    std::vector<LocalizationCase> cases;
    for (int k = 0; k < 2; ++k) {
      LocalizationCase c;
      c.class_id = k;
      c.ground_truth = mask_from_boxes({{k, 4, 4, 6, 6}}, 16, k);
      c.predicted = c.ground_truth;
      cases.push_back(c);
    }
    for (double t : {0.1, 0.5, 0.7}) {
      auto report = correct_ratio(cases, {LocalizationCriterion::Kind::IoU, t}, 0.5, 2);
      CHECK(report.mean == 1.0);
    }
    for (auto& c : cases) c.predicted = mask_of(16, 16, {});
    auto report = correct_ratio(cases, {LocalizationCriterion::Kind::IoU, 0.1}, 0.5, 2);
    CHECK(report.mean == 0.0);
  }
  SUBCASE("three hand-built cases at T(IoU)=0.1") {
    // metric values 0.05, 0.2, 0.5 -> two of three strictly exceed 0.1
    std::vector<LocalizationCase> cases;
    auto push = [&](std::size_t overlap, std::size_t total) {
      // gt is |total| pixels in a row; prediction covers `overlap` of them
      LocalizationCase c;
      c.class_id = 0;
      c.ground_truth = mask_of(1, 100, {});
      c.predicted = mask_of(1, 100, {});
      for (std::size_t i = 0; i < total; ++i) c.ground_truth.grid[i] = 1;
      for (std::size_t i = 0; i < overlap; ++i) c.predicted.grid[i] = 1;
      cases.push_back(c);
    };
    push(1, 20);   // IoU 1/20 = 0.05
    push(10, 50);  // IoU 10/50 = 0.2
    push(20, 40);  // IoU 0.5
    auto report = correct_ratio(cases, {LocalizationCriterion::Kind::IoU, 0.1}, 0.5, 1);
    CHECK(report.per_class[0].n_cases == 3);
    CHECK(report.per_class[0].n_correct == 2);
    CHECK(report.mean == doctest::Approx(2.0 / 3.0));
  }
  SUBCASE("classes without cases are excluded from the mean") {
    std::vector<LocalizationCase> cases;
    LocalizationCase c;
    c.class_id = 1;
    c.ground_truth = mask_of(8, 8, {{1, 1}});
    c.predicted = c.ground_truth;
    cases.push_back(c);
    auto report = correct_ratio(cases, {LocalizationCriterion::Kind::IoU, 0.1}, 0.5, 3);
    CHECK(report.mean == 1.0);
    CHECK(report.per_class[0].n_cases == 0);
    CHECK(report.per_class[2].n_cases == 0);
  }
  SUBCASE("non-increasing in the criterion threshold") {
    Rng rng(5);
    std::vector<LocalizationCase> cases;
    for (int trial = 0; trial < 40; ++trial) {
      LocalizationCase c;
      c.class_id = 0;
      c.ground_truth = mask_of(8, 8, {});
      c.predicted = mask_of(8, 8, {});
      for (std::size_t i = 0; i < 64; ++i) {
        c.ground_truth.grid[i] = rng.bernoulli(0.3);
        c.predicted.grid[i] = rng.bernoulli(0.3);
      }
      cases.push_back(c);
    }
    double prev = 2.0;
    for (double t : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7}) {
      auto report = correct_ratio(cases, {LocalizationCriterion::Kind::IoU, t}, 0.5, 1);
      CHECK(report.mean <= prev + 1e-15);
      prev = report.mean;
    }
  }
}

TEST_CASE("auc") {
  SUBCASE("perfect separation") {
    CHECK(auc({0.9, 0.1}, {1, 0}) == 1.0);
  }
  SUBCASE("all ties give one half") {
    CHECK(auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
  }
  SUBCASE("pairwise enumeration example") {
    CHECK(auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75).epsilon(1e-15));
  }
  SUBCASE("single-class input is an error") {
    CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 1}), std::invalid_argument);
  }
  SUBCASE("matches the pairwise oracle exactly on random cases") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 3 + rng.uniform_int(40);
      std::vector<double> scores(n);
      std::vector<int> labels(n);
      bool has_pos = false, has_neg = false;
      for (std::size_t i = 0; i < n; ++i) {
        // quantized scores force ties
        scores[i] = std::round(rng.uniform() * 8.0) / 8.0;
        labels[i] = rng.bernoulli(0.5) ? 1 : 0;
        (labels[i] ? has_pos : has_neg) = true;
      }
      if (!has_pos || !has_neg) continue;
      CHECK(auc(scores, labels) == oracle::auc_pairwise(scores, labels));
    }
  }
  SUBCASE("invariant under strictly monotone transforms") {
    Rng rng(9);
    std::vector<double> scores(30);
    std::vector<int> labels(30);
    for (std::size_t i = 0; i < 30; ++i) {
      scores[i] = rng.uniform(-2.0, 2.0);
      labels[i] = i % 3 == 0 ? 1 : 0;
    }
    const double base = auc(scores, labels);
    std::vector<double> transformed(30);
    for (std::size_t i = 0; i < 30; ++i) transformed[i] = std::tanh(3.0 * scores[i]) + 5.0;
    CHECK(auc(transformed, labels) == base);
    for (std::size_t i = 0; i < 30; ++i) transformed[i] = std::exp(scores[i]);
    CHECK(auc(transformed, labels) == base);
  }
}

TEST_CASE("thresholding monotonicity: lower bin_threshold grows the region") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor map = oracle::random_tensor(rng, {16, 16}, 0.0, 1.0);
    std::size_t prev_area = 1 << 20;
    for (double t : {0.1, 0.5, 0.999}) {
      ExtractedRegions r = attention_to_regions(map, t, 1);
      CHECK(r.region_mask.area() <= prev_area);
      prev_area = r.region_mask.area();
    }
    // superset property at the pixel level: every pixel kept at 0.5 is kept at 0.1
    ExtractedRegions lo = attention_to_regions(map, 0.1, 1);
    ExtractedRegions hi = attention_to_regions(map, 0.5, 1);
    for (std::size_t i = 0; i < lo.region_mask.grid.size(); ++i) {
      if (hi.region_mask.grid[i]) CHECK(lo.region_mask.grid[i] == 1);
    }
  }
}
