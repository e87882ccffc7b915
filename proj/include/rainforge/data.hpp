#pragma once

#include <iosfwd>
#include <json.hpp>
#include <string>
#include <vector>

#include "rainforge/tensor.hpp"

namespace rainforge {

/// Synthetic rain: I = (1 - alpha) B + alpha R, with R a layer of bright
/// anti-aliased line streaks.
struct RainParams {
  double alpha = 0.6;
  int streak_count = 40;
  double angle_min = -20.0, angle_max = 20.0;  // degrees from vertical
  double length_min = 4.0, length_max = 12.0;  // pixels
  double thickness = 1.0;                      // pixels
  double intensity_min = 0.6, intensity_max = 1.0;
  int blur_radius = 0;  // 0: no blur
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static RainParams from_json(const nlohmann::json& j);
};

struct RainResult {
  Tensor rainy;
  Tensor rain;
};

/// clean: 3 x H x W in [0, 1]. Deterministic given p.seed.
RainResult synth_rain(const Tensor& clean, const RainParams& p);
/// The streak layer alone (3 x H x W, identical channels).
Tensor render_rain_layer(int64_t h, int64_t w, const RainParams& p);

/// 8-bit RGB PNG -> 3 x H x W f32 with values v / 255.
Tensor load_image(const std::string& path);
/// 3 x H x W (or 1 x 3 x H x W) clamped to [0, 1], quantized floor(255 v + 0.5).
void save_image(const Tensor& img, const std::string& path);
/// PNG files in a directory, sorted by name.
std::vector<std::string> list_images(const std::string& dir);

/// A random but reproducible scene: gradient background, shapes, texture.
Tensor procedural_scene(Rng& rng, int64_t h, int64_t w);

/// Crop window followed by optional flips and a k * 90 degree rotation.
struct Augmentation {
  int64_t top = 0, left = 0, size = 0;
  bool flip_h = false, flip_v = false;
  int rot90 = 0;  // counter-clockwise quarter turns
};

Augmentation draw_augmentation(Rng& rng, int64_t h, int64_t w, int64_t crop, bool flips_and_rotations = true);
Tensor apply_augmentation(const Tensor& img, const Augmentation& a);

struct Pair {
  Tensor clean, rainy;  // 3 x H x W
};

/// The same drawn transform applied to both images of a pair.
Pair augment(const Pair& p, Rng& rng, int64_t crop, bool flips_and_rotations = true);

struct Batch {
  Tensor clean, rainy;  // N x 3 x crop x crop
};

class PairedDataset {
 public:
  PairedDataset() = default;
  PairedDataset(std::vector<Pair> pairs, std::vector<std::string> names = {});

  /// Pairs PNGs with identical names under clean_dir and rainy_dir.
  static PairedDataset from_dirs(const std::string& clean_dir, const std::string& rainy_dir);
  /// Rainy counterparts synthesized per image, seed derived from p.seed and index.
  static PairedDataset synthesize(const std::vector<Tensor>& cleans, const RainParams& p);
  /// `count` procedural scenes of size x size, seeded by `seed`.
  static PairedDataset procedural(int count, int64_t size, uint64_t seed, const RainParams& p);

  size_t size() const { return pairs_.size(); }
  const Pair& at(size_t i) const { return pairs_.at(i); }
  const std::string& name(size_t i) const { return names_.at(i); }

  int64_t crop = 24;
  bool augment = true;

 private:
  std::vector<Pair> pairs_;
  std::vector<std::string> names_;
};

/// Deterministic permutation of [0, n) for (seed, epoch).
std::vector<size_t> epoch_order(size_t n, uint64_t seed, int64_t epoch);
int64_t batches_per_epoch(const PairedDataset& ds, int64_t batch_size);
/// Batch b of the given epoch; a pure function of (seed, epoch, b).
Batch make_batch(const PairedDataset& ds, int64_t batch_size, uint64_t seed, int64_t epoch, int64_t b);
/// All full batches of an epoch in order; the trailing partial batch is dropped.
std::vector<Batch> batch_iter(const PairedDataset& ds, int64_t batch_size, uint64_t seed, int64_t epoch);
/// Batch for a global training iteration.
Batch batch_for_iteration(const PairedDataset& ds, int64_t batch_size, uint64_t seed, int64_t iteration);

/// Stateless seed combination (splitmix64 finalizer).
uint64_t mix_seed(uint64_t a, uint64_t b);

struct EvalRow {
  std::string filename;
  double psnr_db = 0, ssim = 0;
};

/// Header "filename,psnr_db,ssim", one row per image, then a "mean" row.
void write_eval_csv(std::ostream& os, const std::vector<EvalRow>& rows);

}  // namespace rainforge
