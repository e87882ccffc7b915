#pragma once

#include <functional>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "rainforge/data.hpp"
#include "rainforge/model.hpp"

namespace rainforge {

/// Cosine decay from lr_init at iteration 0 to lr_final at total_iters.
struct Schedule {
  double lr_init = 2e-4;
  double lr_final = 1e-6;
  int64_t total_iters = 1000;

  double lr_at(int64_t iter) const;
};

struct AdamConfig {
  double beta1 = 0.99;  // 0.9 / 0.999 is the usual choice
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  int64_t step = 0;
  std::map<std::string, Tensor> m, v;

  /// Moments as "adam.m.<name>" / "adam.v.<name>" plus the step in `extra`.
  void save(TrainingState& out) const;
  static AdamState load(const TrainingState& in, const AdamConfig& config);
};

/// One bias-corrected Adam update of every parameter from its .grad().
/// Throws if a parameter has no gradient.
void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr);

struct TrainConfig {
  int64_t iterations = 1000;
  int64_t batch = 4;
  int64_t crop = 24;
  bool augment = true;
  double lr_init = 2e-4, lr_final = 1e-6;
  AdamConfig adam;

  // Without directories, procedural scenes with synthesized rain are used.
  int train_items = 64;
  int64_t train_size = 48;
  int val_items = 8;
  int64_t val_size = 48;
  std::string clean_dir, rainy_dir;          // rainy_dir empty: synthesize
  std::string val_clean_dir, val_rainy_dir;  // same rule
  std::string feature_weights;               // empty: seeded random extractor

  int64_t val_every = 100;
  std::string out_dir = "run";

  Schedule schedule() const { return {lr_init, lr_final, iterations}; }
  void validate() const;
};

/// The whole configuration document: {"model": ..., "rain": ..., "train": ...}.
struct RunConfig {
  ModelConfig model;
  RainParams rain;
  TrainConfig train;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  /// One seed for initialization, data order and rain synthesis.
  void set_seed(uint64_t seed);
};

struct TrainOptions {
  std::string resume;    // checkpoint to continue from
  int64_t stop_at = -1;  // stop (and checkpoint) before this iteration; -1: run to the end
  bool quiet = true;
  std::function<void(int64_t iter, double loss)> on_step;
};

struct TrainResult {
  std::vector<double> losses;  // one per iteration run in this call
  double val_psnr = 0, val_ssim = 0;
  double rainy_psnr = 0, rainy_ssim = 0;  // the inputs against ground truth
  double best_psnr = 0;
  int64_t last_iteration = 0;
};

struct ValidationScore {
  double psnr = 0, ssim = 0;
  double rainy_psnr = 0, rainy_ssim = 0;
};

/// Mean stage-2 PSNR/SSIM over the dataset, full images, clamped outputs.
ValidationScore validate(const Model& model, const PairedDataset& ds);

/// Builds the train and validation sets described by the config.
PairedDataset training_set(const RunConfig& cfg);
PairedDataset validation_set(const RunConfig& cfg);

/// Runs the loop, writing out_dir/log.csv, out_dir/latest.ckpt and
/// out_dir/best.ckpt. Loss per iteration: total_loss(stage 2) + psnr_loss(stage 1).
TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {});

/// Loss on one batch for a freshly built model; the forward pass and the
/// loss parts are exposed so callers can compare configurations.
struct LossBreakdown {
  double stage2_psnr_loss = 0, contrastive = 0, stage1_psnr_loss = 0, total = 0;
};
LossBreakdown loss_breakdown(const Model& model, const FeatureExtractor& fx, const Batch& batch);

FeatureExtractor make_feature_extractor(const RunConfig& cfg);

/// PSNR/SSIM of each restored image against the clean image of the same name.
std::vector<EvalRow> evaluate_dirs(const std::string& clean_dir, const std::string& restored_dir);

}  // namespace rainforge
