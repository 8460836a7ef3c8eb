#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hattn/backbone.hpp"
#include "hattn/heads.hpp"

#include "json.hpp"

namespace hattn {

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t num_classes = 3;  // D
  double lse_r = 6.0;
  double soft_alpha = 100.0;
  double soft_beta = 0.4;
  bool use_fab = true;
  bool use_channel_attn = true;
  bool use_position_attn = true;
  bool use_positive_head = true;
  bool gap_pooling = false;

  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Param {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

// The whole model: backbone -> (Conv1 reduce -> FAB) -> concat -> Conv3
// encode -> coupled classification heads.
class Network {
 public:
  Network(const ModelConfig& config, std::uint64_t init_seed);

  struct Output {
    HeadOutputs heads;
    Tensor encoded;
    Tensor foreground;  // 1 x h x w FAB map; undefined when FAB or its position branch is off
  };

  std::vector<Output> forward_batch(Tape* tape, const std::vector<Tensor>& images, bool training);
  Output forward(Tape* tape, const Tensor& image, bool training = false);

  const ModelConfig& config() const { return config_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  ForegroundAttentionBlock& fab() { return fab_; }
  Heads& heads() { return heads_; }
  Backbone& backbone() { return backbone_; }
  Conv2dLayer& reduce_conv() { return reduce_; }
  BatchNorm& reduce_bn() { return reduce_bn_; }
  Conv2dLayer& encode_conv() { return encode_; }
  BatchNorm& encode_bn() { return encode_bn_; }

  void zero_grads();

 private:
  void register_params();

  ModelConfig config_;
  Backbone backbone_;
  Conv2dLayer reduce_;
  BatchNorm reduce_bn_;
  ForegroundAttentionBlock fab_;
  Conv2dLayer encode_;
  BatchNorm encode_bn_;
  Heads heads_;
  std::vector<Param> params_;
};

// Checkpoint directory: manifest.json plus one HTSR blob per tensor.
void save_checkpoint(const std::filesystem::path& dir, const Network& net, std::int64_t step, std::uint64_t seed);

struct Checkpoint {
  ModelConfig config;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

Checkpoint read_checkpoint_meta(const std::filesystem::path& dir);
// Rebuilds the network from the stored config and loads every tensor.
Network load_checkpoint(const std::filesystem::path& dir, Checkpoint* meta = nullptr);

}  // namespace hattn
