#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hattn/rng.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

struct LabelSet {
  std::vector<int> y;  // D binary abnormality labels
  bool positive() const {
    for (int v : y) {
      if (v) return true;
    }
    return false;
  }
  int count_positive() const {
    int n = 0;
    for (int v : y) n += v ? 1 : 0;
    return n;
  }
};

struct BoxAnnotation {
  int class_id = 0;
  int x = 0, y = 0;  // top-left pixel
  int w = 1, h = 1;
};

struct BinaryMask {
  int class_id = 0;
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> grid;  // row-major {0,1}

  std::uint8_t at(std::size_t yy, std::size_t xx) const { return grid[yy * width + xx]; }
  std::size_t area() const;
};

enum class MaskProvenance { original_box, refined_intersection };
const char* to_string(MaskProvenance p);

struct Sample {
  std::string id;
  Tensor image;  // 3 x H x W, values in [0,1]
  LabelSet labels;
  std::vector<BoxAnnotation> boxes;
  // refined ground-truth masks by class; when absent the rasterized boxes
  // are the ground truth
  std::map<int, BinaryMask> refined_masks;
  std::map<int, MaskProvenance> mask_provenance;
  std::string split;  // "", "train" or "eval"
};

struct GenerateConfig {
  std::size_t count = 0;
  std::size_t num_classes = 3;  // D: 0 disc, 1 square outline, 2 thin bar
  std::size_t image_size = 64;
  double annotated_fraction = 0.1;
  double positive_fraction = 0.7;
  std::uint64_t seed = 0;
};

// Negatives are textured-noise backgrounds; positives add 1..3 shapes of
// distinct classes with random position, scale, and signed intensity
// contrast. Tight boxes come from the drawn pixels; only an
// annotated_fraction of positives keep their boxes.
std::vector<Sample> generate_synthetic(const GenerateConfig& config);

BinaryMask mask_from_boxes(const std::vector<BoxAnnotation>& boxes, std::size_t image_size, int class_id);
BinaryMask mask_from_boxes(const std::vector<BoxAnnotation>& boxes, std::size_t height, std::size_t width,
                           int class_id);

// Ground truth for one class of one sample: the refined mask when present,
// otherwise the rasterized union of that class's boxes. Empty optional when
// the sample has neither for the class.
std::optional<BinaryMask> ground_truth_mask(const Sample& sample, int class_id);

// deterministic sub-operations of augment
Sample flip_horizontal(const Sample& sample);
Sample translate(const Sample& sample, int dx, int dy);

// random translation within +/-10% of each extent plus horizontal flip;
// boxes and masks move with the image, boxes pushed fully outside are
// dropped (labels are kept)
Sample augment(const Sample& sample, Rng& rng);

// ---- manifest (JSON lines, one object per sample) ----
void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                  const std::string& manifest_name = "manifest.jsonl");
std::vector<Sample> load_manifest(const std::filesystem::path& manifest_path);

// deterministic shuffled split; tags each sample's split field
std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(std::vector<Sample> samples, double train_fraction,
                                                                  std::uint64_t seed);

}  // namespace hattn
