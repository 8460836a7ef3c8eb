#include "hattn/model.hpp"

#include <fstream>
#include <stdexcept>

#include "hattn/serialize.hpp"

namespace hattn {

void ModelConfig::validate() const {
  backbone.validate();
  if (num_classes == 0) throw std::invalid_argument("ModelConfig: num_classes must be positive");
  if (!(lse_r > 0.0)) throw std::invalid_argument("ModelConfig: lse_r must be positive");
  if (use_fab && !use_channel_attn && !use_position_attn) {
    throw std::invalid_argument("ModelConfig: FAB enabled with both attention branches off");
  }
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["input_size"] = {c.backbone.input_h, c.backbone.input_w};
  j["in_channels"] = c.backbone.in_channels;
  j["stage_channels"] = c.backbone.stage_channels;
  j["dilated_channels"] = c.backbone.dilated_channels;
  j["encoded_channels"] = c.backbone.encoded_channels;
  j["downsample_factor"] = c.backbone.downsample_factor;
  j["fab_reduced_channels"] = c.backbone.fab_reduced_channels;
  j["se_ratio"] = c.backbone.se_ratio;
  j["num_classes"] = c.num_classes;
  j["lse_r"] = c.lse_r;
  j["soft_alpha"] = c.soft_alpha;
  j["soft_beta"] = c.soft_beta;
  j["use_fab"] = c.use_fab;
  j["use_channel_attn"] = c.use_channel_attn;
  j["use_position_attn"] = c.use_position_attn;
  j["use_positive_head"] = c.use_positive_head;
  j["pooling"] = c.gap_pooling ? "gap" : "lse";
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("input_size")) {
    c.backbone.input_h = j["input_size"][0].get<std::size_t>();
    c.backbone.input_w = j["input_size"][1].get<std::size_t>();
  }
  if (j.contains("in_channels")) c.backbone.in_channels = j["in_channels"].get<std::size_t>();
  if (j.contains("stage_channels")) c.backbone.stage_channels = j["stage_channels"].get<std::vector<std::size_t>>();
  if (j.contains("dilated_channels")) c.backbone.dilated_channels = j["dilated_channels"].get<std::size_t>();
  if (j.contains("encoded_channels")) c.backbone.encoded_channels = j["encoded_channels"].get<std::size_t>();
  if (j.contains("downsample_factor")) c.backbone.downsample_factor = j["downsample_factor"].get<std::size_t>();
  if (j.contains("fab_reduced_channels")) c.backbone.fab_reduced_channels = j["fab_reduced_channels"].get<std::size_t>();
  if (j.contains("se_ratio")) c.backbone.se_ratio = j["se_ratio"].get<std::size_t>();
  if (j.contains("num_classes")) c.num_classes = j["num_classes"].get<std::size_t>();
  if (j.contains("lse_r")) c.lse_r = j["lse_r"].get<double>();
  if (j.contains("soft_alpha")) c.soft_alpha = j["soft_alpha"].get<double>();
  if (j.contains("soft_beta")) c.soft_beta = j["soft_beta"].get<double>();
  if (j.contains("use_fab")) c.use_fab = j["use_fab"].get<bool>();
  if (j.contains("use_channel_attn")) c.use_channel_attn = j["use_channel_attn"].get<bool>();
  if (j.contains("use_position_attn")) c.use_position_attn = j["use_position_attn"].get<bool>();
  if (j.contains("use_positive_head")) c.use_positive_head = j["use_positive_head"].get<bool>();
  if (j.contains("pooling")) c.gap_pooling = j["pooling"].get<std::string>() == "gap";
  c.validate();
  return c;
}

Network::Network(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  backbone_ = Backbone(rng, config_.backbone);
  const std::size_t bb_ch = config_.backbone.dilated_channels;
  std::size_t encode_in = bb_ch;
  if (config_.use_fab) {
    const std::size_t red = config_.backbone.fab_reduced_channels;
    reduce_ = Conv2dLayer(rng, red, bb_ch, 3, 1, 1, 1);
    reduce_bn_ = BatchNorm(red);
    fab_ = ForegroundAttentionBlock(rng, red, config_.backbone.se_ratio);
    encode_in = bb_ch + red;
  }
  encode_ = Conv2dLayer(rng, config_.backbone.encoded_channels, encode_in, 3, 1, 1, 1);
  encode_bn_ = BatchNorm(config_.backbone.encoded_channels);
  heads_ = Heads(rng, config_.backbone.encoded_channels, config_.num_classes, config_.lse_r,
                 config_.use_positive_head, config_.gap_pooling);
  register_params();
}

void Network::register_params() {
  params_.clear();
  auto add = [&](const std::string& name, const Tensor& t, bool trainable) {
    if (t.defined()) params_.push_back(Param{name, t, trainable});
  };
  auto add_bn = [&](const std::string& prefix, BatchNorm& bn) {
    add(prefix + ".gamma", bn.gamma, true);
    add(prefix + ".beta", bn.beta, true);
    add(prefix + ".running_mean", bn.running_mean, false);
    add(prefix + ".running_var", bn.running_var, false);
  };
  for (std::size_t i = 0; i < backbone_.convs.size(); ++i) {
    add("backbone.conv" + std::to_string(i) + ".kernel", backbone_.convs[i].kernel, true);
    add_bn("backbone.bn" + std::to_string(i), backbone_.norms[i]);
  }
  if (config_.use_fab) {
    add("reduce.kernel", reduce_.kernel, true);
    add_bn("reduce.bn", reduce_bn_);
    if (config_.use_channel_attn) {
      add("fab.score_kernel", fab_.score_kernel, true);
      add("fab.se.w1", fab_.excite.w1, true);
      add("fab.se.w2", fab_.excite.w2, true);
    }
    if (config_.use_position_attn) {
      add("fab.position_kernel", fab_.position_kernel, true);
      add_bn("fab.position_bn", fab_.position_bn);
    }
  }
  add("encode.kernel", encode_.kernel, true);
  add_bn("encode.bn", encode_bn_);
  add("heads.w_pn", heads_.w_pn, true);
  add("heads.w_ab", heads_.w_ab, true);
}

void Network::zero_grads() {
  for (Param& p : params_) p.tensor.zero_grad();
}

std::vector<Network::Output> Network::forward_batch(Tape* tape, const std::vector<Tensor>& images, bool training) {
  const std::size_t image_h = config_.backbone.input_h, image_w = config_.backbone.input_w;
  for (const Tensor& img : images) {
    if (img.rank() != 3 || img.extent(0) != config_.backbone.in_channels || img.extent(1) != image_h ||
        img.extent(2) != image_w) {
      throw std::invalid_argument("Network: image shape " + shape_str(img.shape()) + " does not match config");
    }
  }
  std::vector<Tensor> feats = backbone_.forward(tape, images, training);

  std::vector<Tensor> encode_in;
  std::vector<Tensor> foreground;
  if (config_.use_fab) {
    std::vector<Tensor> reduced_pre;
    reduced_pre.reserve(feats.size());
    for (const Tensor& f : feats) reduced_pre.push_back(reduce_.forward(tape, f));
    std::vector<Tensor> reduced_bn = reduce_bn_.forward(tape, reduced_pre, training);
    std::vector<Tensor> reduced;
    reduced.reserve(feats.size());
    for (const Tensor& f : reduced_bn) reduced.push_back(ops::relu(tape, f));

    ForegroundAttentionBlock::Output fab_out =
        fab_.forward(tape, reduced, training, config_.use_channel_attn, config_.use_position_attn);
    foreground = fab_out.foreground;
    encode_in.reserve(feats.size());
    for (std::size_t i = 0; i < feats.size(); ++i) {
      encode_in.push_back(ops::concat_channels(tape, feats[i], fab_out.features[i]));
    }
  } else {
    encode_in = feats;
  }

  std::vector<Tensor> enc_pre;
  enc_pre.reserve(encode_in.size());
  for (const Tensor& f : encode_in) enc_pre.push_back(encode_.forward(tape, f));
  std::vector<Tensor> enc_bn = encode_bn_.forward(tape, enc_pre, training);

  std::vector<Output> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    Output o;
    o.encoded = ops::relu(tape, enc_bn[i]);
    o.heads = heads_.forward(tape, o.encoded, image_h, image_w);
    if (!foreground.empty()) o.foreground = foreground[i];
    out.push_back(std::move(o));
  }
  return out;
}

Network::Output Network::forward(Tape* tape, const Tensor& image, bool training) {
  return forward_batch(tape, {image}, training)[0];
}

void save_checkpoint(const std::filesystem::path& dir, const Network& net, std::int64_t step, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "hattn-checkpoint-v1";
  manifest["config"] = to_json(net.config());
  manifest["step"] = step;
  manifest["seed"] = seed;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  const auto& params = net.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    char file[32];
    std::snprintf(file, sizeof(file), "p%03zu.htsr", i);
    nlohmann::ordered_json entry;
    entry["name"] = params[i].name;
    entry["file"] = file;
    entry["trainable"] = params[i].trainable;
    tensors.push_back(entry);
    write_htsr(dir / file, params[i].tensor);
  }
  manifest["tensors"] = tensors;
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

Checkpoint read_checkpoint_meta(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("read_checkpoint_meta: cannot open manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(f);
  if (manifest.value("format", "") != "hattn-checkpoint-v1") {
    throw std::runtime_error("read_checkpoint_meta: unknown checkpoint format in " + dir.string());
  }
  Checkpoint ck;
  ck.config = model_config_from_json(manifest["config"]);
  ck.step = manifest["step"].get<std::int64_t>();
  ck.seed = manifest["seed"].get<std::uint64_t>();
  return ck;
}

Network load_checkpoint(const std::filesystem::path& dir, Checkpoint* meta) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("load_checkpoint: cannot open manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(f);
  Checkpoint ck;
  ck.config = model_config_from_json(manifest["config"]);
  ck.step = manifest["step"].get<std::int64_t>();
  ck.seed = manifest["seed"].get<std::uint64_t>();
  if (meta) *meta = ck;

  Network net(ck.config, ck.seed);
  auto& params = net.params();
  std::size_t loaded = 0;
  for (const auto& entry : manifest["tensors"]) {
    const std::string name = entry["name"].get<std::string>();
    Tensor blob = read_htsr(dir / entry["file"].get<std::string>());
    bool found = false;
    for (Param& p : params) {
      if (p.name != name) continue;
      if (p.tensor.shape() != blob.shape()) {
        throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
      }
      std::copy(blob.values().begin(), blob.values().end(), p.tensor.values().begin());
      found = true;
      ++loaded;
      break;
    }
    if (!found) throw std::runtime_error("load_checkpoint: unknown tensor " + name);
  }
  if (loaded != params.size()) {
    throw std::runtime_error("load_checkpoint: checkpoint covers " + std::to_string(loaded) + " of " +
                             std::to_string(params.size()) + " tensors");
  }
  return net;
}

}  // namespace hattn
