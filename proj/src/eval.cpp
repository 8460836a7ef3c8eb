#include "hattn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "hattn/serialize.hpp"
#include "json.hpp"

namespace hattn {

const char* to_string(LocalizationCriterion::Kind k) {
  return k == LocalizationCriterion::Kind::IoU ? "IoU" : "IoR";
}

ExtractedRegions attention_to_regions(const Tensor& map, double bin_threshold, std::size_t min_area) {
  if (map.rank() != 2) throw std::invalid_argument("attention_to_regions: expected H x W map");
  const std::size_t h = map.extent(0), w = map.extent(1);
  auto mv = map.values();

  std::vector<std::uint8_t> binary(h * w, 0);
  for (std::size_t i = 0; i < binary.size(); ++i) binary[i] = mv[i] > bin_threshold ? 1 : 0;

  ExtractedRegions out;
  out.region_mask.height = h;
  out.region_mask.width = w;
  out.region_mask.grid.assign(h * w, 0);

  std::vector<std::uint8_t> seen(h * w, 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!binary[start] || seen[start]) continue;
    // flood fill one 8-connected component
    std::vector<std::size_t> pixels;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      pixels.push_back(p);
      const long py = static_cast<long>(p / w), px = static_cast<long>(p % w);
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const long ny = py + dy, nx = px + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (binary[q] && !seen[q]) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
      }
    }
    if (pixels.size() < min_area) continue;
    std::size_t min_x = w, max_x = 0, min_y = h, max_y = 0;
    for (std::size_t p : pixels) {
      out.region_mask.grid[p] = 1;
      const std::size_t py = p / w, px = p % w;
      min_x = std::min(min_x, px);
      max_x = std::max(max_x, px);
      min_y = std::min(min_y, py);
      max_y = std::max(max_y, py);
    }
    BoxAnnotation box;
    box.class_id = -1;
    box.x = static_cast<int>(min_x);
    box.y = static_cast<int>(min_y);
    box.w = static_cast<int>(max_x - min_x + 1);
    box.h = static_cast<int>(max_y - min_y + 1);
    out.boxes.push_back(box);
  }
  return out;
}

namespace {

void check_same_grid(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("iou/ior: masks live on different grids");
  }
}

}  // namespace

double iou(const BinaryMask& a, const BinaryMask& b) {
  check_same_grid(a, b);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.grid.size(); ++i) {
    const bool in_a = a.grid[i] != 0, in_b = b.grid[i] != 0;
    inter += (in_a && in_b) ? 1 : 0;
    uni += (in_a || in_b) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double ior(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_grid(pred, gt);
  std::size_t inter = 0, p = 0;
  for (std::size_t i = 0; i < pred.grid.size(); ++i) {
    const bool in_p = pred.grid[i] != 0;
    p += in_p ? 1 : 0;
    inter += (in_p && gt.grid[i] != 0) ? 1 : 0;
  }
  return p == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(p);
}

CorrectRatioReport correct_ratio(const std::vector<LocalizationCase>& cases, LocalizationCriterion criterion,
                                 double attention_threshold, std::size_t num_classes) {
  CorrectRatioReport report;
  report.criterion = criterion;
  report.attention_threshold = attention_threshold;
  report.per_class.resize(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) report.per_class[k].class_id = static_cast<int>(k);
  for (const LocalizationCase& c : cases) {
    if (c.class_id < 0 || c.class_id >= static_cast<int>(num_classes)) {
      throw std::invalid_argument("correct_ratio: case class out of range");
    }
    const double metric = criterion.kind == LocalizationCriterion::Kind::IoU ? iou(c.predicted, c.ground_truth)
                                                                             : ior(c.predicted, c.ground_truth);
    auto& pc = report.per_class[static_cast<std::size_t>(c.class_id)];
    pc.n_cases += 1;
    if (metric > criterion.threshold) pc.n_correct += 1;
  }
  double sum = 0.0;
  std::size_t counted = 0;
  for (auto& pc : report.per_class) {
    pc.ratio = pc.n_cases == 0 ? 0.0 : static_cast<double>(pc.n_correct) / static_cast<double>(pc.n_cases);
    if (pc.n_cases > 0) {
      sum += pc.ratio;
      ++counted;
    }
  }
  report.mean = counted == 0 ? 0.0 : sum / static_cast<double>(counted);
  return report;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) throw std::invalid_argument("auc: bad input lengths");
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auc: both classes must be present");

  // midrank formulation of the Mann-Whitney statistic
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) rank_sum_pos += midrank;
    }
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

EvalReport evaluate(Network& net, const std::vector<Sample>& samples, const EvalOptions& options) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const std::size_t d = net.config().num_classes;
  for (const Sample& s : samples) {
    if (s.labels.y.size() != d) {
      throw std::invalid_argument("evaluate: manifest has " + std::to_string(s.labels.y.size()) +
                                  " classes, checkpoint expects " + std::to_string(d));
    }
  }
  if (options.heatmap_dir) std::filesystem::create_directories(*options.heatmap_dir);

  std::vector<LocalizationCase> cases;
  std::vector<std::vector<double>> scores(d);
  std::vector<std::vector<int>> score_labels(d);

  for (const Sample& s : samples) {
    Network::Output out = net.forward(nullptr, s.image, /*training=*/false);
    auto logits = out.heads.abnormality_logits.values();
    for (std::size_t k = 0; k < d; ++k) {
      const double p = 1.0 / (1.0 + std::exp(-logits[k]));
      scores[k].push_back(p);
      score_labels[k].push_back(s.labels.y[k]);
    }

    AttentionMap up = upsample_to_image(nullptr, out.heads.abnormality_attention);
    for (std::size_t k = 0; k < d; ++k) {
      std::vector<BoxAnnotation> gt_boxes;
      for (const BoxAnnotation& b : s.boxes) {
        if (b.class_id == static_cast<int>(k)) gt_boxes.push_back(b);
      }
      Tensor plane = ops::select_class(nullptr, up.maps, k);
      if (!gt_boxes.empty()) {
        ExtractedRegions regions = attention_to_regions(plane, options.bin_threshold, options.min_area);
        LocalizationCase c;
        c.class_id = static_cast<int>(k);
        c.predicted = mask_from_boxes(regions.boxes, up.image_h, up.image_w, static_cast<int>(k));
        c.ground_truth = mask_from_boxes(gt_boxes, up.image_h, up.image_w, static_cast<int>(k));
        cases.push_back(std::move(c));
      }
      if (options.heatmap_dir) {
        AttentionMap soft = soft_mask(nullptr, out.heads.abnormality_attention, net.config().soft_alpha,
                                      net.config().soft_beta);
        AttentionMap soft_up = upsample_to_image(nullptr, soft);
        Tensor heat = ops::select_class(nullptr, soft_up.maps, k);
        const std::string base = s.id + "_class" + std::to_string(k);
        write_pgm(*options.heatmap_dir / (base + ".pgm"), heat);
        nlohmann::ordered_json side;
        side["class"] = k;
        side["stage"] = "soft_masked";
        side["alpha"] = net.config().soft_alpha;
        side["beta"] = net.config().soft_beta;
        side["bin_threshold"] = options.bin_threshold;
        std::ofstream sf(*options.heatmap_dir / (base + ".json"), std::ios::trunc);
        sf << side.dump(2) << "\n";
      }
    }
  }

  EvalReport report;
  for (const LocalizationCriterion& crit : options.criteria) {
    report.ratios.push_back(correct_ratio(cases, crit, options.bin_threshold, d));
  }
  report.auc_per_class.assign(d, std::numeric_limits<double>::quiet_NaN());
  double auc_sum = 0.0;
  std::size_t auc_n = 0;
  for (std::size_t k = 0; k < d; ++k) {
    bool has_pos = false, has_neg = false;
    for (int l : score_labels[k]) (l ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) continue;  // AUC undefined for single-class columns
    report.auc_per_class[k] = auc(scores[k], score_labels[k]);
    auc_sum += report.auc_per_class[k];
    ++auc_n;
  }
  report.mean_auc = auc_n == 0 ? std::numeric_limits<double>::quiet_NaN() : auc_sum / static_cast<double>(auc_n);
  return report;
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_report_csv: cannot open " + path.string());
  f << "section,class,kind,threshold,n_cases,n_correct,value\n";
  char line[256];
  for (const CorrectRatioReport& r : report.ratios) {
    for (const auto& pc : r.per_class) {
      std::snprintf(line, sizeof(line), "localization,%d,%s,%.6g,%zu,%zu,%.17g\n", pc.class_id,
                    to_string(r.criterion.kind), r.criterion.threshold, pc.n_cases, pc.n_correct, pc.ratio);
      f << line;
    }
    std::snprintf(line, sizeof(line), "localization_mean,,%s,%.6g,,,%.17g\n", to_string(r.criterion.kind),
                  r.criterion.threshold, r.mean);
    f << line;
  }
  for (std::size_t k = 0; k < report.auc_per_class.size(); ++k) {
    std::snprintf(line, sizeof(line), "classification,%zu,AUC,,,,%.17g\n", k, report.auc_per_class[k]);
    f << line;
  }
  std::snprintf(line, sizeof(line), "classification_mean,,AUC,,,,%.17g\n", report.mean_auc);
  f << line;
}

}  // namespace hattn
