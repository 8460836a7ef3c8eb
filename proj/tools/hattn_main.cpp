#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hattn/data.hpp"
#include "hattn/eval.hpp"
#include "hattn/model.hpp"
#include "hattn/train.hpp"

namespace {

std::vector<double> parse_thresholds(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::optional<std::uint64_t> seed_override_from_env() {
  const char* env = std::getenv("HATTN_SEED");
  if (!env || !*env) return std::nullopt;
  return std::strtoull(env, nullptr, 10);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hattn: weakly-supervised abnormality localization via hierarchical attention"};
  app.require_subcommand(1);

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "generate a synthetic shapes dataset");
  std::string gen_out;
  hattn::GenerateConfig gen_config;
  gen_config.count = 480;
  double gen_train_fraction = -1.0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_config.count, "number of samples");
  gen->add_option("--classes", gen_config.num_classes, "number of abnormality classes (1..3)");
  gen->add_option("--image-size", gen_config.image_size, "square image extent in pixels");
  gen->add_option("--annotated-fraction", gen_config.annotated_fraction, "fraction of positives keeping boxes");
  gen->add_option("--positive-fraction", gen_config.positive_fraction, "fraction of positive samples");
  gen->add_option("--seed", gen_config.seed, "generator seed");
  gen->add_option("--train-fraction", gen_train_fraction,
                  "also write train.jsonl/eval.jsonl at this train fraction");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_data, tr_out;
  tr->add_option("--config", tr_config, "TrainConfig JSON file")->required();
  tr->add_option("--data", tr_data, "dataset manifest (JSON lines)")->required();
  tr->add_option("--out", tr_out, "output directory")->required();

  // ---- refine ----
  auto* rf = app.add_subcommand("refine", "self-refine box annotations with an SR checkpoint");
  std::string rf_checkpoint, rf_data, rf_out;
  double rf_bin_threshold = 0.5;
  std::size_t rf_min_area = 4;
  rf->add_option("--checkpoint", rf_checkpoint, "SR network checkpoint directory")->required();
  rf->add_option("--data", rf_data, "annotated training manifest")->required();
  rf->add_option("--out", rf_out, "output dataset directory with refined masks")->required();
  rf->add_option("--bin-threshold", rf_bin_threshold, "attention binarization threshold");
  rf->add_option("--min-area", rf_min_area, "minimum connected-component area");

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "train and compare the ablation lattice");
  std::string ab_config, ab_out, ab_data, ab_eval_data, ab_work;
  ab->add_option("--config", ab_config, "TrainConfig JSON; may carry train_manifest/eval_manifest keys")->required();
  ab->add_option("--out", ab_out, "output CSV path")->required();
  ab->add_option("--data", ab_data, "training manifest (overrides config)");
  ab->add_option("--eval-data", ab_eval_data, "evaluation manifest (overrides config)");
  ab->add_option("--work-dir", ab_work, "directory for per-row checkpoints (default: alongside CSV)");

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_checkpoint, ev_data, ev_out = "report.csv", ev_heatmaps;
  std::string ev_tiou = "0.1,0.3,0.5", ev_tior = "0.1,0.25,0.5";
  double ev_bin_threshold = 0.999;
  std::size_t ev_min_area = 4;
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "evaluation manifest")->required();
  ev->add_option("--tiou", ev_tiou, "comma-separated T(IoU) thresholds");
  ev->add_option("--tior", ev_tior, "comma-separated T(IoR) thresholds");
  ev->add_option("--bin-threshold", ev_bin_threshold, "attention binarization threshold");
  ev->add_option("--min-area", ev_min_area, "minimum connected-component area");
  ev->add_option("--dump-heatmaps", ev_heatmaps, "directory for PGM heatmap dumps");
  ev->add_option("--out", ev_out, "report CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      if (auto seed = seed_override_from_env()) gen_config.seed = *seed;
      std::vector<hattn::Sample> samples = hattn::generate_synthetic(gen_config);
      hattn::save_dataset(gen_out, samples);
      if (gen_train_fraction >= 0.0) {
        auto [train_split, eval_split] = hattn::split_dataset(samples, gen_train_fraction, gen_config.seed);
        hattn::save_dataset(gen_out, train_split, "train.jsonl");
        hattn::save_dataset(gen_out, eval_split, "eval.jsonl");
        std::cout << "wrote " << train_split.size() << " train / " << eval_split.size() << " eval samples\n";
      }
      std::cout << "wrote " << samples.size() << " samples to " << gen_out << "\n";
    } else if (tr->parsed()) {
      hattn::TrainConfig config = hattn::load_train_config(tr_config);
      if (auto seed = seed_override_from_env()) config.seed = *seed;
      std::vector<hattn::Sample> dataset = hattn::load_manifest(tr_data);
      hattn::TrainResult result = hattn::train(dataset, config, tr_out);
      std::cout << "checkpoint: " << result.checkpoint_dir << "\nlog: " << result.log_path << "\n";
    } else if (rf->parsed()) {
      hattn::Network net = hattn::load_checkpoint(rf_checkpoint);
      std::vector<hattn::Sample> samples = hattn::load_manifest(rf_data);
      std::vector<hattn::RefinedAnnotation> refinements =
          hattn::self_refine(samples, net, rf_bin_threshold, rf_min_area);
      hattn::apply_refinements(samples, refinements);
      hattn::save_dataset(rf_out, samples);
      std::size_t refined = 0;
      for (const auto& r : refinements) refined += r.provenance == hattn::MaskProvenance::refined_intersection;
      std::cout << "refined " << refined << " of " << refinements.size() << " annotations; dataset written to "
                << rf_out << "\n";
    } else if (ab->parsed()) {
      std::ifstream cf(ab_config);
      if (!cf) throw std::runtime_error("cannot open " + ab_config);
      nlohmann::json cj = nlohmann::json::parse(cf);
      hattn::TrainConfig base = hattn::train_config_from_json(cj);
      if (auto seed = seed_override_from_env()) base.seed = *seed;
      std::string train_manifest = cj.value("train_manifest", ab_data);
      std::string eval_manifest = cj.value("eval_manifest", ab_eval_data);
      if (!ab_data.empty()) train_manifest = ab_data;
      if (!ab_eval_data.empty()) eval_manifest = ab_eval_data;
      if (train_manifest.empty() || eval_manifest.empty()) {
        throw std::runtime_error("ablate needs train and eval manifests (flags or config keys)");
      }
      const double bin_threshold = cj.value("bin_threshold", 0.5);
      std::vector<hattn::AblationRow> rows = hattn::ablation_lattice();
      if (cj.contains("rows")) {
        std::vector<hattn::AblationRow> chosen;
        for (const auto& name : cj["rows"]) {
          bool found = false;
          for (const auto& row : rows) {
            if (row.name == name.get<std::string>()) {
              chosen.push_back(row);
              found = true;
            }
          }
          if (!found) throw std::runtime_error("unknown ablation row " + name.get<std::string>());
        }
        rows = std::move(chosen);
      }
      std::filesystem::path work = ab_work.empty() ? std::filesystem::path(ab_out).parent_path() / "ablation_runs"
                                                   : std::filesystem::path(ab_work);
      auto results = hattn::run_ablation(hattn::load_manifest(train_manifest), hattn::load_manifest(eval_manifest),
                                         base, rows, bin_threshold, work);
      hattn::write_ablation_csv(ab_out, results);
      for (const auto& r : results) {
        std::cout << r.name << ": auc " << r.mean_auc << ", correct-ratio@IoU0.1 " << r.mean_correct_ratio << "\n";
      }
    } else if (ev->parsed()) {
      hattn::Network net = hattn::load_checkpoint(ev_checkpoint);
      std::vector<hattn::Sample> samples = hattn::load_manifest(ev_data);
      hattn::EvalOptions options;
      for (double t : parse_thresholds(ev_tiou)) {
        options.criteria.push_back({hattn::LocalizationCriterion::Kind::IoU, t});
      }
      for (double t : parse_thresholds(ev_tior)) {
        options.criteria.push_back({hattn::LocalizationCriterion::Kind::IoR, t});
      }
      options.bin_threshold = ev_bin_threshold;
      options.min_area = ev_min_area;
      if (!ev_heatmaps.empty()) options.heatmap_dir = ev_heatmaps;
      hattn::EvalReport report = hattn::evaluate(net, samples, options);
      hattn::write_report_csv(ev_out, report);
      std::cout << "mean AUC: " << report.mean_auc << "\n";
      for (const auto& r : report.ratios) {
        std::cout << to_string(r.criterion.kind) << ">" << r.criterion.threshold << ": mean ratio " << r.mean << "\n";
      }
      std::cout << "report: " << ev_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
