#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hattn/data.hpp"
#include "hattn/eval.hpp"
#include "hattn/losses.hpp"
#include "hattn/model.hpp"

namespace hattn {

// Adam with decoupled weight decay. With zero gradient and fresh state a
// step moves a parameter by exactly -lr * weight_decay * p.
class AdamW {
 public:
  AdamW(std::vector<Param>& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 1e-4);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void step();

 private:
  std::vector<Param>* params_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct AblationFlags {
  bool use_fab = true;
  bool use_channel_attn = true;
  bool use_position_attn = true;
  bool use_positive_head = true;
  bool use_bound = true;
  bool use_union = true;
  bool use_amse = true;
  bool gap_pooling = false;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double lr_decay_factor = 10.0;    // divide by this ...
  std::size_t lr_decay_every = 10;  // ... every this many epochs
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  std::uint64_t seed = 0;
  bool augment = true;
  AblationFlags flags;
  ModelConfig model;

  // Copies the ablation flags into the model config and enforces that the
  // bound/union losses require the positive head.
  void normalize();
};

nlohmann::ordered_json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

struct TrainResult {
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;
  double first_epoch_l_ab = 0.0;
  double last_epoch_l_ab = 0.0;
};

// Full loop: seeded init, AdamW, step-decayed learning rate, per-step CSV
// log of the loss breakdown, checkpoint refreshed every epoch. Aborts on a
// non-finite loss, naming the offending batch.
TrainResult train(const std::vector<Sample>& dataset, const TrainConfig& config, const std::filesystem::path& out_dir);

struct RefinedAnnotation {
  std::string sample_id;
  int class_id = 0;
  BinaryMask mask;
  MaskProvenance provenance = MaskProvenance::original_box;
};

// One class of one sample: intersect the box mask with the attention
// region when their IoU reaches 0.3, otherwise keep the original box mask.
RefinedAnnotation refine_mask(const BinaryMask& attention_region, const BinaryMask& box_mask);

// Box-annotation self-refinement with a separately trained network: when
// the SR network's attention region overlaps a class's box mask with
// IoU >= 0.3 the mask becomes their intersection, otherwise the original
// box mask is kept. Samples without boxes are untouched; eval-split
// samples are rejected.
std::vector<RefinedAnnotation> self_refine(const std::vector<Sample>& annotated, Network& sr_net,
                                           double bin_threshold, std::size_t min_area = 4);

// writes refined masks back into matching samples
void apply_refinements(std::vector<Sample>& samples, const std::vector<RefinedAnnotation>& refinements);

struct AblationRow {
  std::string name;
  AblationFlags flags;
};

// canonical lattice, in the reporting order
std::vector<AblationRow> ablation_lattice();

struct AblationResult {
  std::string name;
  double mean_auc = 0.0;
  double mean_correct_ratio = 0.0;  // at T(IoU) = 0.1
  std::vector<double> per_class_ratio;
};

// Trains every row with the shared seed from base, evaluates each at
// T(IoU) = 0.1 and reports rows in lattice order.
std::vector<AblationResult> run_ablation(const std::vector<Sample>& train_split,
                                         const std::vector<Sample>& eval_split, const TrainConfig& base,
                                         const std::vector<AblationRow>& rows, double bin_threshold,
                                         const std::filesystem::path& work_dir);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationResult>& rows);

}  // namespace hattn
