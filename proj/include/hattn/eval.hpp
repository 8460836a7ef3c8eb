#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hattn/data.hpp"
#include "hattn/model.hpp"

namespace hattn {

struct LocalizationCriterion {
  enum class Kind { IoU, IoR };
  Kind kind = Kind::IoU;
  double threshold = 0.1;  // a prediction is correct iff metric > threshold
};

const char* to_string(LocalizationCriterion::Kind k);

struct ExtractedRegions {
  std::vector<BoxAnnotation> boxes;  // tight box per retained component
  BinaryMask region_mask;            // pixels of the retained components
};

// Binarize at `bin_threshold` (strict >), label 8-connected components,
// drop components below min_area, and report each survivor's tight box.
ExtractedRegions attention_to_regions(const Tensor& map, double bin_threshold, std::size_t min_area = 4);

double iou(const BinaryMask& a, const BinaryMask& b);
// intersection over the detected region; 0 when the prediction is empty
double ior(const BinaryMask& pred, const BinaryMask& gt);

struct LocalizationCase {
  int class_id = 0;
  BinaryMask predicted;
  BinaryMask ground_truth;
};

struct CorrectRatioReport {
  struct PerClass {
    int class_id = 0;
    std::size_t n_cases = 0;
    std::size_t n_correct = 0;
    double ratio = 0.0;
  };
  std::vector<PerClass> per_class;
  double mean = 0.0;  // unweighted over classes with n_cases > 0
  LocalizationCriterion criterion;
  double attention_threshold = 0.0;
};

CorrectRatioReport correct_ratio(const std::vector<LocalizationCase>& cases, LocalizationCriterion criterion,
                                 double attention_threshold, std::size_t num_classes);

// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie). Throws when only one
// class is present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct EvalOptions {
  std::vector<LocalizationCriterion> criteria;
  double bin_threshold = 0.999;
  std::size_t min_area = 4;
  std::optional<std::filesystem::path> heatmap_dir;
};

struct EvalReport {
  std::vector<CorrectRatioReport> ratios;  // one per criterion
  std::vector<double> auc_per_class;       // NaN where undefined
  double mean_auc = 0.0;                   // over classes with defined AUC
};

// Full measurement pass: per (sample, class) case the prediction is the
// union of extracted region boxes and the ground truth the union of that
// class's annotation boxes. Classification scores are sigmoids of the
// abnormality logits.
EvalReport evaluate(Network& net, const std::vector<Sample>& samples, const EvalOptions& options);

void write_report_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace hattn
