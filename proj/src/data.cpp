#include "rainforge/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <ostream>

#include "rainforge/ops.hpp"

namespace rainforge {

using nlohmann::json;

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------- rain

void RainParams::validate() const {
  if (!(alpha >= 0 && alpha <= 1)) throw Error("rain: alpha must lie in [0, 1]");
  if (streak_count < 0) throw Error("rain: streak_count must be >= 0");
  if (!(angle_min <= angle_max)) throw Error("rain: empty angle range");
  if (!(length_min > 0 && length_min <= length_max)) throw Error("rain: length range must be positive and nonempty");
  if (!(thickness > 0)) throw Error("rain: thickness must be > 0");
  if (!(intensity_min >= 0 && intensity_min <= intensity_max && intensity_max <= 1)) {
    throw Error("rain: intensity range must be nonempty within [0, 1]");
  }
  if (blur_radius < 0) throw Error("rain: blur_radius must be >= 0");
}

json RainParams::to_json() const {
  return json{{"alpha", alpha},
              {"streak_count", streak_count},
              {"angle_min", angle_min},
              {"angle_max", angle_max},
              {"length_min", length_min},
              {"length_max", length_max},
              {"thickness", thickness},
              {"intensity_min", intensity_min},
              {"intensity_max", intensity_max},
              {"blur_radius", blur_radius},
              {"seed", seed}};
}

RainParams RainParams::from_json(const json& j) {
  if (!j.is_object()) throw Error("config: rain section must be a JSON object");
  RainParams p;
  json merged = p.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!merged.contains(key)) throw Error("config: unknown rain key \"" + key + "\"");
    merged[key] = value;
  }
  try {
    p.alpha = merged["alpha"].get<double>();
    p.streak_count = merged["streak_count"].get<int>();
    p.angle_min = merged["angle_min"].get<double>();
    p.angle_max = merged["angle_max"].get<double>();
    p.length_min = merged["length_min"].get<double>();
    p.length_max = merged["length_max"].get<double>();
    p.thickness = merged["thickness"].get<double>();
    p.intensity_min = merged["intensity_min"].get<double>();
    p.intensity_max = merged["intensity_max"].get<double>();
    p.blur_radius = merged["blur_radius"].get<int>();
    p.seed = merged["seed"].get<uint64_t>();
  } catch (const json::exception& e) {
    throw Error(std::string("config: bad rain value: ") + e.what());
  }
  p.validate();
  return p;
}

namespace {

// Distance from (px, py) to the segment a-b.
double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = ax + t * dx - px, ey = ay + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

std::vector<double> gaussian_blur(const std::vector<double>& src, int64_t h, int64_t w, int radius) {
  const double sigma = std::max(0.5, radius / 2.0);
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double z = 0;
  for (int i = -radius; i <= radius; ++i) z += k[static_cast<size_t>(i + radius)] = std::exp(-i * i / (2 * sigma * sigma));
  for (auto& v : k) v /= z;
  auto at = [&](const std::vector<double>& img, int64_t y, int64_t x) {
    y = std::clamp<int64_t>(y, 0, h - 1);
    x = std::clamp<int64_t>(x, 0, w - 1);
    return img[static_cast<size_t>(y * w + x)];
  };
  std::vector<double> tmp(src.size()), out(src.size());
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<size_t>(i + radius)] * at(src, y, x + i);
      tmp[static_cast<size_t>(y * w + x)] = acc;
    }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<size_t>(i + radius)] * at(tmp, y + i, x);
      out[static_cast<size_t>(y * w + x)] = acc;
    }
  return out;
}

void require_image(const Tensor& t, const char* op) {
  if (t.dim() != 3 || t.size(0) != 3) throw Error(std::string(op) + ": expected 3 x H x W, got " + shape_str(t.shape()));
}

}  // namespace

Tensor render_rain_layer(int64_t h, int64_t w, const RainParams& p) {
  p.validate();
  Rng rng(p.seed);
  std::vector<double> layer(static_cast<size_t>(h * w), 0.0);
  for (int s = 0; s < p.streak_count; ++s) {
    const double cx = rng.uniform(0.0, static_cast<double>(w)), cy = rng.uniform(0.0, static_cast<double>(h));
    const double angle = rng.uniform(p.angle_min, p.angle_max) * std::numbers::pi / 180.0;
    const double len = rng.uniform(p.length_min, p.length_max);
    const double intensity = rng.uniform(p.intensity_min, p.intensity_max);
    const double dx = std::sin(angle) * len / 2, dy = std::cos(angle) * len / 2;
    const double ax = cx - dx, ay = cy - dy, bx = cx + dx, by = cy + dy;
    const double reach = p.thickness / 2 + 1;
    const auto y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(ay, by) - reach)));
    const auto y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(std::max(ay, by) + reach)));
    const auto x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(ax, bx) - reach)));
    const auto x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(std::max(ax, bx) + reach)));
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) {
        // Pixel coverage falls off linearly over one pixel past the half-thickness.
        const double d = segment_distance(x + 0.5, y + 0.5, ax, ay, bx, by);
        const double cover = std::clamp(p.thickness / 2 + 0.5 - d, 0.0, 1.0);
        auto& v = layer[static_cast<size_t>(y * w + x)];
        v = std::max(v, intensity * cover);
      }
  }
  if (p.blur_radius > 0) layer = gaussian_blur(layer, h, w, p.blur_radius);
  Tensor out = Tensor::zeros({3, h, w});
  auto d = out.mutable_data<float>();
  for (int64_t c = 0; c < 3; ++c)
    for (size_t i = 0; i < layer.size(); ++i) d[static_cast<size_t>(c) * layer.size() + i] = static_cast<float>(layer[i]);
  return out;
}

RainResult synth_rain(const Tensor& clean, const RainParams& p) {
  require_image(clean, "synth_rain");
  Tensor rain = render_rain_layer(clean.size(1), clean.size(2), p);
  Tensor b = clean.to(DType::f32);
  Tensor rainy = Tensor::zeros(clean.shape());
  auto out = rainy.mutable_data<float>();
  auto bv = b.data<float>(), rv = rain.data<float>();
  const double a = p.alpha;
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = (1.0 - a) * bv[i] + a * rv[i];
    out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return {rainy, rain};
}

// ---------------------------------------------------------------- PNG

Tensor load_image(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw Error("cannot read image " + path + ": " + img.message);
  }
  const bool rgb8 = (img.format & PNG_FORMAT_FLAG_COLOR) && !(img.format & PNG_FORMAT_FLAG_ALPHA) &&
                    !(img.format & PNG_FORMAT_FLAG_LINEAR);
  if (!rgb8) {
    png_image_free(&img);
    throw Error("image " + path + " is not an 8-bit RGB PNG");
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    throw Error("cannot decode image " + path + ": " + img.message);
  }
  const int64_t h = img.height, w = img.width;
  Tensor t = Tensor::zeros({3, h, w});
  auto d = t.mutable_data<float>();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        d[static_cast<size_t>((c * h + y) * w + x)] = static_cast<float>(buf[static_cast<size_t>((y * w + x) * 3 + c)] / 255.0);
      }
  return t;
}

void save_image(const Tensor& img, const std::string& path) {
  Tensor t = img;
  if (t.dim() == 4 && t.size(0) == 1) t = reshape(t, {t.size(1), t.size(2), t.size(3)});
  require_image(t, "save_image");
  const int64_t h = t.size(1), w = t.size(2);
  const auto v = t.to_vector();
  std::vector<png_byte> buf(static_cast<size_t>(h * w * 3));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        double s = v[static_cast<size_t>((c * h + y) * w + x)];
        s = std::isnan(s) ? 0.0 : std::clamp(s, 0.0, 1.0);
        buf[static_cast<size_t>((y * w + x) * 3 + c)] = static_cast<png_byte>(std::floor(s * 255.0 + 0.5));
      }
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(w);
  out.height = static_cast<png_uint_32>(h);
  out.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&out, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw Error("cannot write image " + path + ": " + out.message);
  }
}

std::vector<std::string> list_images(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------- scenes

Tensor procedural_scene(Rng& rng, int64_t h, int64_t w) {
  std::vector<double> img(static_cast<size_t>(3 * h * w));
  auto px = [&](int64_t c, int64_t y, int64_t x) -> double& { return img[static_cast<size_t>((c * h + y) * w + x)]; };
  // Linear gradient between two colors.
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.1, 0.9);
    c1[c] = rng.uniform(0.1, 0.9);
  }
  const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
  const double gx = std::cos(theta), gy = std::sin(theta);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double t = 0.5 + 0.5 * (gx * (x / double(w) - 0.5) + gy * (y / double(h) - 0.5)) * 1.4;
      for (int c = 0; c < 3; ++c) px(c, y, x) = c0[c] + (c1[c] - c0[c]) * std::clamp(t, 0.0, 1.0);
    }
  // Flat shapes.
  const int shapes = 3 + static_cast<int>(rng.below(5));
  for (int s = 0; s < shapes; ++s) {
    double col[3];
    for (auto& v : col) v = rng.uniform(0.0, 1.0);
    const double cx = rng.uniform(0.0, double(w)), cy = rng.uniform(0.0, double(h));
    const double rx = rng.uniform(0.08, 0.3) * w, ry = rng.uniform(0.08, 0.3) * h;
    const bool ellipse = rng.below(2) == 0;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
        const bool inside = ellipse ? u * u + v * v <= 1.0 : std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
        if (inside)
          for (int c = 0; c < 3; ++c) px(c, y, x) = col[c];
      }
  }
  // Mild sinusoidal texture.
  const double fx = rng.uniform(0.2, 0.8), fy = rng.uniform(0.2, 0.8), amp = rng.uniform(0.0, 0.06);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double t = amp * std::sin(fx * x + fy * y);
      for (int c = 0; c < 3; ++c) px(c, y, x) = std::clamp(px(c, y, x) + t, 0.0, 1.0);
    }
  return Tensor::from_vector({3, h, w}, img, DType::f32);
}

// ---------------------------------------------------------------- augmentation

Augmentation draw_augmentation(Rng& rng, int64_t h, int64_t w, int64_t crop, bool flips_and_rotations) {
  if (crop < 1 || crop > h || crop > w) {
    throw Error("augment: crop " + std::to_string(crop) + " exceeds image " + std::to_string(h) + "x" + std::to_string(w));
  }
  Augmentation a;
  a.size = crop;
  a.top = static_cast<int64_t>(rng.below(static_cast<uint64_t>(h - crop + 1)));
  a.left = static_cast<int64_t>(rng.below(static_cast<uint64_t>(w - crop + 1)));
  if (flips_and_rotations) {
    a.flip_h = rng.below(2) == 1;
    a.flip_v = rng.below(2) == 1;
    a.rot90 = static_cast<int>(rng.below(4));
  }
  return a;
}

Tensor apply_augmentation(const Tensor& img, const Augmentation& a) {
  require_image(img, "augment");
  const int64_t h = img.size(1), w = img.size(2), s = a.size;
  if (s < 1 || a.top < 0 || a.left < 0 || a.top + s > h || a.left + s > w) {
    throw Error("augment: crop window exceeds image " + std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor out = Tensor::zeros({3, s, s}, img.dtype());
  dispatch(img.dtype(), [&]<typename T>() {
    auto src = img.data<T>();
    auto dst = out.mutable_data<T>();
    for (int64_t y = 0; y < s; ++y)
      for (int64_t x = 0; x < s; ++x) {
        // Map the output coordinate back through rotation, then flips, into the crop.
        int64_t u = y, v = x;
        for (int r = 0; r < a.rot90; ++r) {
          const int64_t nu = v, nv = s - 1 - u;
          u = nu;
          v = nv;
        }
        if (a.flip_v) u = s - 1 - u;
        if (a.flip_h) v = s - 1 - v;
        for (int64_t c = 0; c < 3; ++c) {
          dst[static_cast<size_t>((c * s + y) * s + x)] = src[static_cast<size_t>((c * h + a.top + u) * w + a.left + v)];
        }
      }
  });
  return out;
}

Pair augment(const Pair& p, Rng& rng, int64_t crop, bool flips_and_rotations) {
  if (p.clean.shape() != p.rainy.shape()) {
    throw Error("augment: pair extents differ " + shape_str(p.clean.shape()) + " vs " + shape_str(p.rainy.shape()));
  }
  const Augmentation a = draw_augmentation(rng, p.clean.size(1), p.clean.size(2), crop, flips_and_rotations);
  return {apply_augmentation(p.clean, a), apply_augmentation(p.rainy, a)};
}

// ---------------------------------------------------------------- datasets

PairedDataset::PairedDataset(std::vector<Pair> pairs, std::vector<std::string> names)
    : pairs_(std::move(pairs)), names_(std::move(names)) {
  if (names_.empty()) {
    for (size_t i = 0; i < pairs_.size(); ++i) names_.push_back("item" + std::to_string(i) + ".png");
  }
  if (names_.size() != pairs_.size()) throw Error("dataset: name count differs from pair count");
  for (size_t i = 0; i < pairs_.size(); ++i) {
    require_image(pairs_[i].clean, "dataset");
    if (pairs_[i].clean.shape() != pairs_[i].rainy.shape()) {
      throw Error("dataset: pair " + names_[i] + " has mismatched extents");
    }
  }
}

PairedDataset PairedDataset::from_dirs(const std::string& clean_dir, const std::string& rainy_dir) {
  const auto names = list_images(clean_dir);
  std::vector<Pair> pairs;
  for (const auto& n : names) {
    const auto rainy_path = std::filesystem::path(rainy_dir) / n;
    if (!std::filesystem::exists(rainy_path)) throw Error("dataset: no rainy counterpart for " + n + " in " + rainy_dir);
    pairs.push_back({load_image((std::filesystem::path(clean_dir) / n).string()), load_image(rainy_path.string())});
  }
  return PairedDataset(std::move(pairs), names);
}

PairedDataset PairedDataset::synthesize(const std::vector<Tensor>& cleans, const RainParams& p) {
  std::vector<Pair> pairs;
  for (size_t i = 0; i < cleans.size(); ++i) {
    RainParams q = p;
    q.seed = mix_seed(p.seed, i);
    pairs.push_back({cleans[i].to(DType::f32), synth_rain(cleans[i], q).rainy});
  }
  return PairedDataset(std::move(pairs));
}

PairedDataset PairedDataset::procedural(int count, int64_t size, uint64_t seed, const RainParams& p) {
  std::vector<Tensor> cleans;
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
    cleans.push_back(procedural_scene(rng, size, size));
  }
  return synthesize(cleans, p);
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int64_t epoch) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

int64_t batches_per_epoch(const PairedDataset& ds, int64_t batch_size) {
  if (ds.size() == 0) throw Error("dataset is empty");
  if (batch_size < 1) throw Error("batch size must be >= 1");
  return static_cast<int64_t>(ds.size()) / batch_size;
}

Batch make_batch(const PairedDataset& ds, int64_t batch_size, uint64_t seed, int64_t epoch, int64_t b) {
  const int64_t per_epoch = batches_per_epoch(ds, batch_size);
  if (per_epoch == 0) {
    throw Error("dataset of " + std::to_string(ds.size()) + " items cannot fill a batch of " + std::to_string(batch_size));
  }
  if (b < 0 || b >= per_epoch) throw Error("batch index out of range");
  const auto order = epoch_order(ds.size(), seed, epoch);
  std::vector<Tensor> cleans, rainys;
  for (int64_t i = 0; i < batch_size; ++i) {
    const size_t idx = order[static_cast<size_t>(b * batch_size + i)];
    Rng rng(mix_seed(mix_seed(seed, static_cast<uint64_t>(epoch)), static_cast<uint64_t>(b * batch_size + i)));
    const Pair& p = ds.at(idx);
    Pair out = augment(p, rng, std::min({ds.crop, p.clean.size(1), p.clean.size(2)}), ds.augment);
    cleans.push_back(reshape(out.clean, {1, 3, out.clean.size(1), out.clean.size(2)}));
    rainys.push_back(reshape(out.rainy, {1, 3, out.rainy.size(1), out.rainy.size(2)}));
  }
  return {concat(cleans, 0), concat(rainys, 0)};
}

std::vector<Batch> batch_iter(const PairedDataset& ds, int64_t batch_size, uint64_t seed, int64_t epoch) {
  std::vector<Batch> out;
  const int64_t n = batches_per_epoch(ds, batch_size);
  for (int64_t b = 0; b < n; ++b) out.push_back(make_batch(ds, batch_size, seed, epoch, b));
  return out;
}

Batch batch_for_iteration(const PairedDataset& ds, int64_t batch_size, uint64_t seed, int64_t iteration) {
  const int64_t n = batches_per_epoch(ds, batch_size);
  if (n == 0) {
    throw Error("dataset of " + std::to_string(ds.size()) + " items cannot fill a batch of " + std::to_string(batch_size));
  }
  return make_batch(ds, batch_size, seed, iteration / n, iteration % n);
}

// ---------------------------------------------------------------- CSV

void write_eval_csv(std::ostream& os, const std::vector<EvalRow>& rows) {
  auto fmt = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  os << "filename,psnr_db,ssim\n";
  double sp = 0, ss = 0;
  for (const auto& r : rows) {
    os << r.filename << ',' << fmt(r.psnr_db) << ',' << fmt(r.ssim) << '\n';
    sp += r.psnr_db;
    ss += r.ssim;
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  os << "mean," << fmt(sp / n) << ',' << fmt(ss / n) << '\n';
}

}  // namespace rainforge
