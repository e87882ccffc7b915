#include <doctest.h>
#include <png.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rainforge/data.hpp"
#include "rainforge/ops.hpp"

using namespace rainforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rainforge_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor scene(uint64_t seed, int64_t h = 20, int64_t w = 20) {
  Rng rng(seed);
  return procedural_scene(rng, h, w);
}

std::vector<unsigned char> raw_pixels(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  REQUIRE(png_image_begin_read_from_file(&img, path.c_str()));
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  REQUIRE(png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr));
  return buf;
}

void write_png(const std::string& path, int w, int h, uint32_t format, int channels) {
  std::vector<unsigned char> buf(static_cast<size_t>(w * h * channels), 77);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  REQUIRE(png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr));
}

// Forward oracle: push every source pixel through crop, flips and CCW quarter
// turns, recording where it lands. A CCW turn moves (r, c) to (s - 1 - c, r).
std::vector<std::pair<int64_t, int64_t>> landing_sources(const Augmentation& a) {
  const int64_t s = a.size;
  std::vector<std::pair<int64_t, int64_t>> src(static_cast<size_t>(s * s));
  for (int64_t sy = a.top; sy < a.top + s; ++sy)
    for (int64_t sx = a.left; sx < a.left + s; ++sx) {
      int64_t r = sy - a.top, c = sx - a.left;
      if (a.flip_v) r = s - 1 - r;
      if (a.flip_h) c = s - 1 - c;
      for (int k = 0; k < a.rot90; ++k) {
        const int64_t nr = s - 1 - c, nc = r;
        r = nr;
        c = nc;
      }
      src[static_cast<size_t>(r * s + c)] = {sy, sx};
    }
  return src;
}

}  // namespace

TEST_CASE("rain model endpoints") {
  Tensor clean = scene(1);
  RainParams p;
  p.seed = 5;
  p.alpha = 0;
  CHECK(synth_rain(clean, p).rainy.to_vector() == clean.to_vector());
  p.alpha = 1;
  auto r = synth_rain(clean, p);
  CHECK(r.rainy.to_vector() == r.rain.to_vector());
  p.alpha = 0.6;
  p.streak_count = 0;
  r = synth_rain(clean, p);
  for (double v : r.rain.to_vector()) CHECK(v == 0.0);
  const auto cv = clean.to_vector(), rv = r.rainy.to_vector();
  for (size_t i = 0; i < cv.size(); ++i) CHECK(rv[i] == static_cast<float>(0.4 * cv[i]));
}

TEST_CASE("rain layer") {
  RainParams p;
  p.seed = 9;
  p.streak_count = 30;
  Tensor a = render_rain_layer(32, 32, p), b = render_rain_layer(32, 32, p);
  CHECK(a.to_vector() == b.to_vector());
  p.seed = 10;
  CHECK(render_rain_layer(32, 32, p).to_vector() != a.to_vector());

  bool partial = false, full = false;
  for (double v : a.to_vector()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    partial = partial || (v > 0.05 && v < 0.5);
    full = full || v >= 0.6;
  }
  CHECK(partial);
  CHECK(full);
  // Channels are identical.
  CHECK(slice(a, 0, 0, 1).to_vector() == slice(a, 0, 2, 3).to_vector());

  // A single vertical streak: covered pixels along its column, nothing far away.
  RainParams one;
  one.streak_count = 1;
  one.angle_min = one.angle_max = 0;
  one.length_min = one.length_max = 10;
  one.intensity_min = one.intensity_max = 0.8;
  one.seed = 3;
  Tensor layer = render_rain_layer(40, 40, one);
  int64_t best_col = -1;
  double best = 0;
  for (int64_t x = 0; x < 40; ++x) {
    double col = 0;
    for (int64_t y = 0; y < 40; ++y) col += layer.at(y * 40 + x);
    if (col > best) best = col, best_col = x;
  }
  REQUIRE(best_col >= 0);
  for (int64_t y = 0; y < 40; ++y)
    for (int64_t x = 0; x < 40; ++x) {
      if (std::abs(x - best_col) > 1) CHECK(layer.at(y * 40 + x) == 0.0);
    }
  CHECK(best > 0.8 * 8);

  RainParams bad;
  bad.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = RainParams{};
  bad.length_min = 5;
  bad.length_max = 4;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(RainParams::from_json({{"alfa", 0.5}}), Error);
  CHECK(RainParams::from_json({{"alpha", 0.25}}).alpha == 0.25);

  p.blur_radius = 2;
  Tensor blurred = render_rain_layer(32, 32, p);
  double sa = 0, sb = 0;
  p.blur_radius = 0;
  for (double v : render_rain_layer(32, 32, p).to_vector()) sa += v;
  for (double v : blurred.to_vector()) sb += v;
  CHECK(sb == doctest::Approx(sa).epsilon(0.1));
}

TEST_CASE("png round trip") {
  const auto dir = scratch("png");
  Tensor codes = Tensor::zeros({3, 4, 5});
  {
    auto d = codes.mutable_data<float>();
    for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(((i * 37) % 256) / 255.0);
    d[0] = 1.0f;
    d[1] = 0.5f;
    d[2] = 0.0f;
  }
  const auto path = (dir / "a.png").string();
  save_image(codes, path);
  auto px = raw_pixels(path);
  CHECK(int(px[0]) == 255);
  CHECK(int(px[3]) == 128);  // 127.5 rounds up
  CHECK(int(px[6]) == 0);
  Tensor back = load_image(path);
  CHECK(back.shape() == Shape{3, 4, 5});
  CHECK(back.at(0) == 1.0);
  for (size_t i = 3; i < back.to_vector().size(); ++i) {
    CHECK(back.to_vector()[i] == static_cast<float>(((i * 37) % 256) / 255.0));
  }

  // Lossless through load -> save -> load.
  const auto second = (dir / "b.png").string();
  save_image(back, second);
  CHECK(raw_pixels(second) == px);

  Rng rng(3);
  Tensor noisy = rng.uniform_tensor({1, 3, 6, 7}, -0.2, 1.2);
  save_image(noisy, path);
  Tensor q = load_image(path);
  const auto nv = noisy.to_vector(), qv = q.to_vector();
  for (size_t i = 0; i < nv.size(); ++i) CHECK(std::abs(std::clamp(nv[i], 0.0, 1.0) - qv[i]) <= 1.0 / 510 + 1e-7);

  write_png((dir / "gray.png").string(), 4, 4, PNG_FORMAT_GRAY, 1);
  write_png((dir / "rgba.png").string(), 4, 4, PNG_FORMAT_RGBA, 4);
  CHECK_THROWS_AS(load_image((dir / "gray.png").string()), Error);
  CHECK_THROWS_AS(load_image((dir / "rgba.png").string()), Error);
  CHECK_THROWS_AS(load_image((dir / "missing.png").string()), Error);
  {
    std::ofstream os(dir / "junk.png");
    os << "not a png";
  }
  CHECK_THROWS_AS(load_image((dir / "junk.png").string()), Error);
  CHECK_THROWS_AS(save_image(codes, (dir / "no" / "such" / "dir.png").string()), Error);
  CHECK_THROWS_AS(save_image(Tensor::zeros({1, 4, 4}), path), Error);
  fs::remove_all(dir);
}

TEST_CASE("augmentation") {
  Tensor img = scene(2, 10, 12);
  Augmentation id;
  id.size = 10;
  CHECK(apply_augmentation(slice(img, 2, 0, 10), id).to_vector() == slice(img, 2, 0, 10).to_vector());

  Tensor sq = slice(img, 2, 1, 11);
  Augmentation half;
  half.size = 10;
  half.rot90 = 2;
  CHECK(apply_augmentation(apply_augmentation(sq, half), half).to_vector() == sq.to_vector());
  half.rot90 = 1;
  Tensor r = sq;
  for (int i = 0; i < 4; ++i) r = apply_augmentation(r, half);
  CHECK(r.to_vector() == sq.to_vector());

  // Coordinate tags: each pixel stores its own source index; rainy is a fixed offset of clean.
  const int64_t h = 9, w = 11;
  std::vector<double> tags(static_cast<size_t>(3 * h * w)), shifted(tags.size());
  for (size_t i = 0; i < tags.size(); ++i) {
    tags[i] = static_cast<double>(i);
    shifted[i] = static_cast<double>(i) + 1000.0;
  }
  Pair pair{Tensor::from_vector({3, h, w}, tags, DType::f64), Tensor::from_vector({3, h, w}, shifted, DType::f64)};
  Rng rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    Rng probe = rng;
    Augmentation a = draw_augmentation(probe, h, w, 6);
    Pair out = augment(pair, rng, 6);
    const auto landing = landing_sources(a);
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < 6; ++y)
        for (int64_t x = 0; x < 6; ++x) {
          const auto [sy, sx] = landing[static_cast<size_t>(y * 6 + x)];
          const double tag = out.clean.at((c * 6 + y) * 6 + x);
          CHECK(tag == static_cast<double>((c * h + sy) * w + sx));
          CHECK(out.rainy.at((c * 6 + y) * 6 + x) == tag + 1000.0);
        }
  }
  CHECK_THROWS_AS(augment(pair, rng, 10), Error);
  CHECK_THROWS_AS(augment(Pair{pair.clean, slice(pair.rainy, 2, 0, 10)}, rng, 4), Error);
}

TEST_CASE("batches") {
  RainParams p;
  p.seed = 11;
  PairedDataset ds = PairedDataset::procedural(10, 32, 7, p);
  ds.crop = 24;
  CHECK(ds.size() == 10);
  CHECK(batches_per_epoch(ds, 6) == 1);
  auto e0 = batch_iter(ds, 6, 99, 0);
  REQUIRE(e0.size() == 1);
  CHECK(e0[0].clean.shape() == Shape{6, 3, 24, 24});
  CHECK(e0[0].rainy.shape() == Shape{6, 3, 24, 24});
  auto again = batch_iter(ds, 6, 99, 0);
  CHECK(again[0].clean.to_vector() == e0[0].clean.to_vector());
  CHECK(again[0].rainy.to_vector() == e0[0].rainy.to_vector());

  CHECK(epoch_order(10, 99, 0) != epoch_order(10, 99, 1));
  CHECK(epoch_order(10, 99, 3) == epoch_order(10, 99, 3));
  auto order = epoch_order(10, 99, 0);
  std::sort(order.begin(), order.end());
  for (size_t i = 0; i < 10; ++i) CHECK(order[i] == i);

  for (double v : e0[0].clean.to_vector()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // Iteration 3 with 2 batches per epoch is epoch 1, batch 1.
  CHECK(batch_for_iteration(ds, 5, 99, 3).rainy.to_vector() == make_batch(ds, 5, 99, 1, 1).rainy.to_vector());

  CHECK_THROWS_AS(batch_iter(PairedDataset{}, 2, 0, 0), Error);
  CHECK_THROWS_AS(make_batch(ds, 11, 0, 0, 0), Error);
}

TEST_CASE("directory datasets") {
  const auto root = scratch("dirs");
  fs::create_directories(root / "clean");
  fs::create_directories(root / "rainy");
  for (int i = 0; i < 3; ++i) {
    save_image(scene(static_cast<uint64_t>(i), 12, 12), (root / "clean" / ("im" + std::to_string(i) + ".png")).string());
    save_image(scene(static_cast<uint64_t>(i + 10), 12, 12), (root / "rainy" / ("im" + std::to_string(i) + ".png")).string());
  }
  {
    std::ofstream os(root / "clean" / "notes.txt");
    os << "ignored";
  }
  auto ds = PairedDataset::from_dirs((root / "clean").string(), (root / "rainy").string());
  CHECK(ds.size() == 3);
  CHECK(ds.name(2) == "im2.png");
  CHECK(ds.at(1).clean.shape() == Shape{3, 12, 12});

  save_image(scene(5, 12, 12), (root / "clean" / "lonely.png").string());
  CHECK_THROWS_AS(PairedDataset::from_dirs((root / "clean").string(), (root / "rainy").string()), Error);
  CHECK_THROWS_AS(list_images((root / "nowhere").string()), Error);
  fs::remove_all(root);
}

TEST_CASE("eval csv") {
  std::ostringstream os;
  write_eval_csv(os, {{"a.png", 30.5, 0.9}, {"b.png", 20.0, 0.7}});
  CHECK(os.str() ==
        "filename,psnr_db,ssim\n"
        "a.png,30.500000,0.900000\n"
        "b.png,20.000000,0.700000\n"
        "mean,25.250000,0.800000\n");
}
