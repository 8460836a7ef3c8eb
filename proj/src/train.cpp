#include "hattn/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hattn {

AdamW::AdamW(std::vector<Param>& params, double lr, double beta1, double beta2, double eps, double weight_decay)
    : params_(&params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  m_.resize(params.size());
  v_.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    m_[i].assign(params[i].tensor.size(), 0.0);
    v_[i].assign(params[i].tensor.size(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_->size(); ++i) {
    Param& p = (*params_)[i];
    if (!p.trainable) continue;
    auto values = p.tensor.values();
    auto grads = p.tensor.grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grads[j];
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      values[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * values[j]);
    }
  }
}

void TrainConfig::normalize() {
  if (!flags.use_positive_head) {
    flags.use_bound = false;
    flags.use_union = false;
  }
  if (!flags.use_fab) {
    flags.use_channel_attn = false;
    flags.use_position_attn = false;
  }
  model.use_fab = flags.use_fab;
  model.use_channel_attn = flags.use_channel_attn;
  model.use_position_attn = flags.use_position_attn;
  model.use_positive_head = flags.use_positive_head;
  model.gap_pooling = flags.gap_pooling;
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["lr_decay"] = {{"factor", c.lr_decay_factor}, {"every_n_epochs", c.lr_decay_every}};
  j["weight_decay"] = c.weight_decay;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["weights"] = {{"z", c.weights.z},
                  {"lambda1", c.weights.lambda1},
                  {"lambda2", c.weights.lambda2},
                  {"lambda3", c.weights.lambda3}};
  j["seed"] = c.seed;
  j["augment"] = c.augment;
  j["ablation_flags"] = {{"use_fab", c.flags.use_fab},
                         {"use_channel_attn", c.flags.use_channel_attn},
                         {"use_position_attn", c.flags.use_position_attn},
                         {"use_positive_head", c.flags.use_positive_head},
                         {"use_bound", c.flags.use_bound},
                         {"use_union", c.flags.use_union},
                         {"use_amse", c.flags.use_amse},
                         {"pooling", c.flags.gap_pooling ? "gap" : "lse"}};
  j["model"] = to_json(c.model);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("lr_decay")) {
    c.lr_decay_factor = j["lr_decay"].value("factor", c.lr_decay_factor);
    c.lr_decay_every = j["lr_decay"].value("every_n_epochs", c.lr_decay_every);
  }
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("adam_beta1")) c.adam_beta1 = j["adam_beta1"].get<double>();
  if (j.contains("adam_beta2")) c.adam_beta2 = j["adam_beta2"].get<double>();
  if (j.contains("adam_eps")) c.adam_eps = j["adam_eps"].get<double>();
  if (j.contains("weights")) {
    c.weights.z = j["weights"].value("z", c.weights.z);
    c.weights.lambda1 = j["weights"].value("lambda1", c.weights.lambda1);
    c.weights.lambda2 = j["weights"].value("lambda2", c.weights.lambda2);
    c.weights.lambda3 = j["weights"].value("lambda3", c.weights.lambda3);
  }
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("augment")) c.augment = j["augment"].get<bool>();
  if (j.contains("ablation_flags")) {
    const auto& f = j["ablation_flags"];
    c.flags.use_fab = f.value("use_fab", c.flags.use_fab);
    c.flags.use_channel_attn = f.value("use_channel_attn", c.flags.use_channel_attn);
    c.flags.use_position_attn = f.value("use_position_attn", c.flags.use_position_attn);
    c.flags.use_positive_head = f.value("use_positive_head", c.flags.use_positive_head);
    c.flags.use_bound = f.value("use_bound", c.flags.use_bound);
    c.flags.use_union = f.value("use_union", c.flags.use_union);
    c.flags.use_amse = f.value("use_amse", c.flags.use_amse);
    c.flags.gap_pooling = f.value("pooling", std::string("lse")) == "gap";
  }
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  c.normalize();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_train_config: cannot open " + path.string());
  return train_config_from_json(nlohmann::json::parse(f));
}

TrainResult train(const std::vector<Sample>& dataset, const TrainConfig& config_in,
                  const std::filesystem::path& out_dir) {
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  TrainConfig config = config_in;
  config.normalize();
  config.model.validate();

  std::filesystem::create_directories(out_dir);
  Network net(config.model, config.seed);
  AdamW opt(net.params(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps,
            config.weight_decay);
  Rng rng(Rng(config.seed).fork(0x7261696e));  // train-loop stream

  LossOptions loss_options;
  loss_options.weights = config.weights;
  loss_options.alpha = config.model.soft_alpha;
  loss_options.beta = config.model.soft_beta;
  loss_options.use_bound = config.flags.use_bound;
  loss_options.use_union = config.flags.use_union;
  loss_options.use_amse = config.flags.use_amse;

  TrainResult result;
  result.log_path = out_dir / "train_log.csv";
  result.checkpoint_dir = out_dir / "checkpoint";
  std::ofstream log(result.log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot open log " + result.log_path.string());
  log << "step,l_ab,l_pn,l_bound,l_union,l_amse,total\n";

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::int64_t step = 0;
  char line[512];
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_lr(config.learning_rate / std::pow(config.lr_decay_factor,
                                               static_cast<double>(epoch / std::max<std::size_t>(1, config.lr_decay_every))));
    rng.shuffle(order);
    double epoch_l_ab = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Sample> batch;
      std::vector<const Sample*> batch_ptr;
      std::vector<Tensor> images;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Sample& src = dataset[order[i]];
        batch.push_back(config.augment ? augment(src, rng) : src);
      }
      for (const Sample& s : batch) {
        batch_ptr.push_back(&s);
        images.push_back(s.image);
      }

      Tape tape;
      std::vector<Network::Output> outs = net.forward_batch(&tape, images, /*training=*/true);
      SampleLoss loss = batch_loss(&tape, outs, batch_ptr, loss_options);

      if (!std::isfinite(loss.breakdown.total)) {
        std::ostringstream ids;
        for (const Sample& s : batch) ids << s.id << " ";
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + "; batch: " + ids.str());
      }
      const double residual = loss.breakdown.recomposition_residual(config.weights);
      if (std::abs(residual) > 1e-12) {
        throw std::runtime_error("train: loss recomposition residual " + std::to_string(residual) + " at step " +
                                 std::to_string(step));
      }

      net.zero_grads();
      tape.backward(loss.total);
      opt.step();

      std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    static_cast<long long>(step), loss.breakdown.l_ab, loss.breakdown.l_pn, loss.breakdown.l_bound,
                    loss.breakdown.l_union, loss.breakdown.l_amse, loss.breakdown.total);
      log << line;
      epoch_l_ab += loss.breakdown.l_ab;
      ++epoch_steps;
      ++step;
    }
    if (epoch_steps > 0) {
      const double mean_l_ab = epoch_l_ab / static_cast<double>(epoch_steps);
      if (epoch == 0) result.first_epoch_l_ab = mean_l_ab;
      result.last_epoch_l_ab = mean_l_ab;
    }
    save_checkpoint(result.checkpoint_dir, net, step, config.seed);
  }
  return result;
}

RefinedAnnotation refine_mask(const BinaryMask& attention_region, const BinaryMask& box_mask) {
  RefinedAnnotation r;
  r.class_id = box_mask.class_id;
  if (iou(attention_region, box_mask) < 0.3) {
    r.mask = box_mask;
    r.provenance = MaskProvenance::original_box;
  } else {
    r.mask = box_mask;
    for (std::size_t i = 0; i < r.mask.grid.size(); ++i) {
      r.mask.grid[i] = static_cast<std::uint8_t>(r.mask.grid[i] & attention_region.grid[i]);
    }
    r.provenance = MaskProvenance::refined_intersection;
  }
  return r;
}

std::vector<RefinedAnnotation> self_refine(const std::vector<Sample>& annotated, Network& sr_net,
                                           double bin_threshold, std::size_t min_area) {
  std::vector<RefinedAnnotation> refinements;
  for (const Sample& s : annotated) {
    if (s.split == "eval") {
      throw std::invalid_argument("self_refine: refusing to refine evaluation-split sample " + s.id);
    }
    if (s.boxes.empty()) continue;  // refinement never touches box-free samples

    Network::Output out = sr_net.forward(nullptr, s.image, /*training=*/false);
    AttentionMap up = upsample_to_image(nullptr, out.heads.abnormality_attention);

    for (std::size_t k = 0; k < s.labels.y.size(); ++k) {
      std::vector<BoxAnnotation> class_boxes;
      for (const BoxAnnotation& b : s.boxes) {
        if (b.class_id == static_cast<int>(k)) class_boxes.push_back(b);
      }
      if (class_boxes.empty()) continue;
      BinaryMask box_mask = mask_from_boxes(class_boxes, up.image_h, up.image_w, static_cast<int>(k));
      Tensor plane = ops::select_class(nullptr, up.maps, k);
      ExtractedRegions regions = attention_to_regions(plane, bin_threshold, min_area);

      RefinedAnnotation r = refine_mask(regions.region_mask, box_mask);
      r.sample_id = s.id;
      refinements.push_back(std::move(r));
    }
  }
  return refinements;
}

void apply_refinements(std::vector<Sample>& samples, const std::vector<RefinedAnnotation>& refinements) {
  for (const RefinedAnnotation& r : refinements) {
    for (Sample& s : samples) {
      if (s.id != r.sample_id) continue;
      s.refined_masks[r.class_id] = r.mask;
      s.mask_provenance[r.class_id] = r.provenance;
      break;
    }
  }
}

std::vector<AblationRow> ablation_lattice() {
  std::vector<AblationRow> rows;
  auto base = [] {
    AblationFlags f;
    f.use_fab = false;
    f.use_channel_attn = false;
    f.use_position_attn = false;
    f.use_positive_head = false;
    f.use_bound = false;
    f.use_union = false;
    f.use_amse = false;
    f.gap_pooling = false;
    return f;
  };
  {
    AblationFlags f = base();
    f.gap_pooling = true;
    rows.push_back({"cnn8-gap", f});
  }
  rows.push_back({"cnn8-lse", base()});
  {
    AblationFlags f = base();
    f.use_fab = true;
    f.use_channel_attn = true;
    rows.push_back({"+fab-c", f});
  }
  {
    AblationFlags f = base();
    f.use_fab = true;
    f.use_position_attn = true;
    rows.push_back({"+fab-p", f});
  }
  {
    AblationFlags f = base();
    f.use_fab = true;
    f.use_channel_attn = true;
    f.use_position_attn = true;
    rows.push_back({"+fab", f});
  }
  {
    AblationFlags f = base();
    f.use_fab = true;
    f.use_channel_attn = true;
    f.use_position_attn = true;
    f.use_positive_head = true;
    rows.push_back({"+fab+pa", f});
  }
  {
    AblationFlags f = base();
    f.use_fab = true;
    f.use_channel_attn = true;
    f.use_position_attn = true;
    f.use_positive_head = true;
    f.use_bound = true;
    rows.push_back({"+fab+pa+bound", f});
  }
  {
    AblationFlags f = base();
    f.use_fab = true;
    f.use_channel_attn = true;
    f.use_position_attn = true;
    f.use_positive_head = true;
    f.use_bound = true;
    f.use_union = true;
    rows.push_back({"+fab+pa+abu", f});
  }
  return rows;
}

std::vector<AblationResult> run_ablation(const std::vector<Sample>& train_split,
                                         const std::vector<Sample>& eval_split, const TrainConfig& base,
                                         const std::vector<AblationRow>& rows, double bin_threshold,
                                         const std::filesystem::path& work_dir) {
  std::vector<AblationResult> results;
  for (const AblationRow& row : rows) {
    TrainConfig config = base;  // shared seed across rows
    config.flags = row.flags;
    config.normalize();
    const std::filesystem::path row_dir = work_dir / row.name;
    TrainResult tr = train(train_split, config, row_dir);
    Network net = load_checkpoint(tr.checkpoint_dir);

    EvalOptions eval_options;
    eval_options.criteria = {LocalizationCriterion{LocalizationCriterion::Kind::IoU, 0.1}};
    eval_options.bin_threshold = bin_threshold;
    EvalReport report = evaluate(net, eval_split, eval_options);

    AblationResult res;
    res.name = row.name;
    res.mean_auc = report.mean_auc;
    res.mean_correct_ratio = report.ratios[0].mean;
    for (const auto& pc : report.ratios[0].per_class) res.per_class_ratio.push_back(pc.ratio);
    results.push_back(std::move(res));
  }
  return results;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationResult>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_ablation_csv: cannot open " + path.string());
  f << "config,mean_auc,mean_correct_ratio_tiou_0.1";
  if (!rows.empty()) {
    for (std::size_t k = 0; k < rows[0].per_class_ratio.size(); ++k) f << ",class" << k;
  }
  f << "\n";
  char buf[64];
  for (const AblationResult& r : rows) {
    f << r.name;
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", r.mean_auc, r.mean_correct_ratio);
    f << buf;
    for (double v : r.per_class_ratio) {
      std::snprintf(buf, sizeof(buf), ",%.17g", v);
      f << buf;
    }
    f << "\n";
  }
}

}  // namespace hattn
