#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "rainforge/attention_blocks.hpp"
#include "rainforge/losses.hpp"
#include "rainforge/serialize.hpp"
#include "rainforge/window_transformer.hpp"

namespace rainforge {

/// Architecture, loss weights and seeds. Defaults are the desk-scale model.
struct ModelConfig {
  int64_t base_channels = 8;
  int mab_per_level = 3;
  int levels = 3;  // fixed
  int64_t window = 4;
  int stage2_blocks = 2;
  int64_t ffn_ratio = 4;
  int64_t nlffm_rank = 0;  // 0: base_channels / 2
  int64_t heads = 2;
  Activation activation = Activation::relu;
  GatedBranch gated_branch = GatedBranch::spatial;
  bool ffn_literal = false;

  double lambda = 0.1;
  std::vector<double> omega;
  double eps_cr = 1e-7;
  double eps_proj = 1e-4;
  std::vector<int64_t> feature_widths = {16, 32, 64};

  uint64_t init_seed = 1;
  uint64_t feature_seed = 2;
  uint64_t data_seed = 3;

  void validate() const;
  int64_t rank() const { return nlffm_rank > 0 ? nlffm_rank : base_channels / 2; }
  /// Extents are padded to a multiple of this.
  int64_t pad_multiple() const;
  LossConfig loss() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are an error.
  static ModelConfig from_json(const nlohmann::json& j);
};

struct ModelOutput {
  Tensor stage1;
  Tensor stage2;
};

/// Two-stage network: encoder-decoder + SAM, then dual transformer blocks
/// fused through NLFFM, with a zero-initialized residual head.
class Model : public Module {
 public:
  explicit Model(const ModelConfig& cfg, DType dt = DType::f32);

  /// Unclamped outputs for the loss path. rainy: N x 3 x H x W.
  ModelOutput forward(const Tensor& rainy) const;
  /// No tape, outputs clamped to [0, 1].
  ModelOutput infer(const Tensor& rainy) const;

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  const ModelConfig& config() const { return config_; }
  DType dtype() const { return dtype_; }

  EncoderDecoder stage1;
  SupervisedAttentionModule sam;
  Conv2dLayer shallow2;
  std::vector<DualTransformerBlock> blocks;
  std::vector<Nlffm> fusions;
  Conv2dLayer tail;

 private:
  ModelConfig config_;
  DType dtype_;
};

/// Everything besides the model weights that a checkpoint carries.
struct TrainingState {
  int64_t iteration = 0;
  nlohmann::json extra = nlohmann::json::object();  // rng states, best metric, adam step ...
  TensorTable tensors;                              // optimizer moments, named by the caller
};

inline constexpr uint32_t kCheckpointVersion = 1;

/// "RFCK", u32 version, JSON {"config", "state"} as a length-prefixed
/// string, then the tensor table: parameters followed by state tensors.
void save_checkpoint(const std::string& path, const Model& model, const TrainingState& state = {});

struct Checkpoint {
  ModelConfig config;
  TensorTable parameters;
  TrainingState state;
};

Checkpoint read_checkpoint(const std::string& path);
/// Copies checkpoint parameters into `model`; names and shapes must match.
void load_parameters(Model& model, const Checkpoint& ckpt);
/// Builds a model from the checkpoint's own config.
Model load_model(const std::string& path, Checkpoint* out = nullptr);

}  // namespace rainforge
