#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rainforge/ops.hpp"
#include "rainforge/train.hpp"

using namespace rainforge;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rainforge_train_" + name);
  fs::remove_all(p);
  return p;
}

RunConfig tiny_config(const std::string& out) {
  RunConfig c;
  c.model.mab_per_level = 1;
  c.train.iterations = 20;
  c.train.batch = 2;
  c.train.train_items = 6;
  c.train.train_size = 32;
  c.train.val_items = 2;
  c.train.val_size = 24;
  c.train.val_every = 10;
  c.train.out_dir = out;
  return c;
}

std::vector<std::string> lines(const std::string& path) {
  std::ifstream is(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

TEST_CASE("cosine schedule endpoints, midpoint and monotonicity") {
  Schedule s{2e-4, 1e-6, 1000};
  CHECK(s.lr_at(0) == 2e-4);
  CHECK(s.lr_at(1000) == 1e-6);
  CHECK(s.lr_at(500) == doctest::Approx(1.005e-4).epsilon(1e-12));
  for (int64_t i = 1; i <= 1000; ++i) CHECK(s.lr_at(i) <= s.lr_at(i - 1));
  CHECK_THROWS_AS(s.lr_at(-1), Error);
  CHECK_THROWS_AS(s.lr_at(1001), Error);
}

namespace {

// Plain scalar Adam, written out independently of the library.
struct ScalarAdam {
  double b1, b2, eps, m = 0, v = 0;
  int t = 0;
  double step(double w, double g, double lr) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    return w - lr * mh / (std::sqrt(vh) + eps);
  }
};

NamedTensor scalar_param(double w) {
  Tensor t = Tensor::scalar(w, DType::f64);
  t.set_requires_grad(true);
  return {"w", t};
}

}  // namespace

TEST_CASE("adam on w^2 follows the scalar oracle") {
  for (AdamConfig cfg : {AdamConfig{}, AdamConfig{0.9, 0.999, 1e-8}}) {
    NamedTensor p = scalar_param(1.0);
    AdamState st;
    st.config = cfg;
    ScalarAdam ref{cfg.beta1, cfg.beta2, cfg.eps};
    double w_ref = 1.0, prev = 1.0;
    for (int i = 0; i < 100; ++i) {
      p.tensor.zero_grad();
      Tape tape;
      {
        TapeScope scope(tape);
        tape.backward(square(p.tensor));
      }
      const double g = 2.0 * w_ref;
      adam_step({p}, st, 0.1);
      w_ref = ref.step(w_ref, g, 0.1);
      CHECK(std::abs(p.tensor.item() - w_ref) <= 1e-10);
      if (i < 10) {
        CHECK(std::abs(p.tensor.item()) < prev);
        prev = std::abs(p.tensor.item());
      }
    }
    CHECK(st.step == 100);
  }
}

TEST_CASE("adam first step is lr * sign(g); zero gradient is a fixed point") {
  for (double g : {3.0, -0.25}) {
    NamedTensor p = scalar_param(0.5);
    p.tensor.set_grad(Tensor::scalar(g, DType::f64));
    AdamState st;
    adam_step({p}, st, 0.01);
    CHECK(p.tensor.item() == doctest::Approx(0.5 - 0.01 * (g > 0 ? 1 : -1)).epsilon(1e-9));
  }
  NamedTensor p = scalar_param(0.5);
  AdamState st;
  p.tensor.set_grad(Tensor::scalar(1.0, DType::f64));
  adam_step({p}, st, 0.01);
  const double w = p.tensor.item(), m = st.m["w"].item(), v = st.v["w"].item();
  p.tensor.set_grad(Tensor::scalar(0.0, DType::f64));
  AdamState fresh;
  NamedTensor q = scalar_param(0.5);
  q.tensor.set_grad(Tensor::scalar(0.0, DType::f64));
  adam_step({q}, fresh, 0.01);
  CHECK(q.tensor.item() == 0.5);
  adam_step({p}, st, 0.01);
  CHECK(std::abs(st.m["w"].item()) < std::abs(m));
  CHECK(st.v["w"].item() < v);
  CHECK(p.tensor.item() != w);  // momentum still carries the earlier gradient

  NamedTensor missing = scalar_param(1.0);
  AdamState s2;
  CHECK_THROWS_WITH_AS(adam_step({missing}, s2, 0.1), doctest::Contains("w"), Error);
  CHECK(s2.step == 0);
}

TEST_CASE("run config JSON round trip and rejection of bad documents") {
  RunConfig c;
  c.set_seed(7);
  c.train.iterations = 33;
  c.rain.alpha = 0.25;
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.model.init_seed == 7);
  CHECK(back.model.data_seed == 7);
  CHECK(back.rain.seed == 7);
  CHECK(RunConfig::from_json(nlohmann::json::object()).to_json() == RunConfig{}.to_json());
  CHECK(RunConfig{}.train.adam.beta1 == 0.99);
  CHECK(RunConfig{}.train.adam.beta2 == 0.99);
  CHECK_THROWS_AS(RunConfig::from_json({{"trian", nlohmann::json::object()}}), Error);
  CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"iteratons", 5}}}}), Error);
  CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"iterations", "many"}}}}), Error);
  CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"iterations", 0}}}}), Error);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/config.json"), Error);
}

TEST_CASE("resumed training reproduces the uninterrupted run bitwise") {
  const fs::path a = scratch("full"), b = scratch("resumed");
  const TrainResult full = train(tiny_config(a.string()));
  REQUIRE(full.losses.size() == 20);

  TrainOptions first;
  first.stop_at = 10;
  const TrainResult head = train(tiny_config(b.string()), first);
  REQUIRE(head.losses.size() == 10);
  TrainOptions second;
  second.resume = (b / "latest.ckpt").string();
  const TrainResult tail = train(tiny_config(b.string()), second);
  REQUIRE(tail.losses.size() == 10);

  for (size_t i = 0; i < 10; ++i) {
    CHECK(head.losses[i] == full.losses[i]);
    CHECK(tail.losses[i] == full.losses[10 + i]);
  }
  CHECK(slurp((a / "latest.ckpt").string()) == slurp((b / "latest.ckpt").string()));
  CHECK(slurp((a / "log.csv").string()) == slurp((b / "log.csv").string()));

  const auto log = lines((a / "log.csv").string());
  REQUIRE(log.size() == 21);
  CHECK(log[0] == "iter,loss,lr,val_psnr,val_ssim");
  CHECK(split(log[1]).size() == 5);
  CHECK(split(log[1])[3].empty());
  CHECK(!split(log[10])[3].empty());  // iteration 9 closes the first validation interval
  CHECK(fs::exists(a / "best.ckpt"));

  Checkpoint ck = read_checkpoint((a / "latest.ckpt").string());
  CHECK(ck.state.iteration == 20);
  CHECK(ck.state.extra.at("adam_step").get<int64_t>() == 20);
  CHECK(ck.state.extra.contains("best_psnr"));
}

TEST_CASE("a non-finite loss aborts with the iteration and keeps the last good checkpoint") {
  const fs::path dir = scratch("nan");
  RunConfig cfg = tiny_config(dir.string());
  TrainOptions opts;
  opts.stop_at = 10;
  train(cfg, opts);
  const std::string latest = (dir / "latest.ckpt").string();
  const std::string good = slurp(latest);

  Checkpoint ck = read_checkpoint(latest);
  Model broken(ck.config);
  load_parameters(broken, ck);
  broken.tail.bias.mutable_data<float>()[0] = std::nanf("");
  const std::string bad = (dir / "bad.ckpt").string();
  save_checkpoint(bad, broken, ck.state);

  TrainOptions resume;
  resume.resume = bad;
  CHECK_THROWS_WITH_AS(train(cfg, resume), doctest::Contains("iteration 10"), Error);
  CHECK(slurp(latest) == good);
}

TEST_CASE("lambda changes only the loss at iteration 0") {
  RunConfig c0 = tiny_config(scratch("lambda0").string()), c1 = tiny_config(scratch("lambda1").string());
  c0.model.lambda = 0.0;
  c1.model.lambda = 0.1;
  Model m0(c0.model), m1(c1.model);
  const FeatureExtractor fx = make_feature_extractor(c0);
  const PairedDataset ds = training_set(c0);
  const Batch b = batch_for_iteration(ds, 2, 11, 0);
  const ModelOutput o0 = m0.infer(b.rainy), o1 = m1.infer(b.rainy);
  CHECK(o0.stage2.to_vector() == o1.stage2.to_vector());
  const LossBreakdown l0 = loss_breakdown(m0, fx, b), l1 = loss_breakdown(m1, fx, b);
  CHECK(l0.stage2_psnr_loss == l1.stage2_psnr_loss);
  CHECK(l0.contrastive == l1.contrastive);
  CHECK(l1.contrastive > 0);
  CHECK(l1.total - l0.total == doctest::Approx(0.1 * l1.contrastive).epsilon(1e-5));

  c0.train.iterations = c1.train.iterations = 1;
  train(c0);
  train(c1);
  const auto r0 = split(lines(c0.train.out_dir + "/log.csv").at(1));
  const auto r1 = split(lines(c1.train.out_dir + "/log.csv").at(1));
  CHECK(r0[0] == r1[0]);
  CHECK(r0[1] != r1[1]);
  CHECK(r0[2] == r1[2]);
}

TEST_CASE("200 iterations on the desk synthetic set reduce the loss") {
  RunConfig c;
  c.train.iterations = 200;
  c.train.val_items = 2;
  c.train.out_dir = scratch("smoke").string();
  const TrainResult r = train(c);
  REQUIRE(r.losses.size() == 200);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += r.losses[static_cast<size_t>(i)] / 20;
    last += r.losses[static_cast<size_t>(180 + i)] / 20;
  }
  MESSAGE("mean loss first 20: " << first << ", last 20: " << last);
  CHECK(last <= 0.8 * first);
  // The PSNR parts of the loss alone also have to improve.
  CHECK(r.val_psnr > r.rainy_psnr);
}

TEST_CASE("evaluate_dirs on identical images gives the clamp PSNR and SSIM 1") {
  const fs::path dir = scratch("eval");
  fs::create_directories(dir / "clean");
  fs::create_directories(dir / "restored");
  Rng rng(5);
  for (int i = 0; i < 3; ++i) {
    const Tensor img = procedural_scene(rng, 20, 24);
    const std::string name = "img" + std::to_string(i) + ".png";
    save_image(img, (dir / "clean" / name).string());
    fs::copy_file(dir / "clean" / name, dir / "restored" / name);
  }
  const auto rows = evaluate_dirs((dir / "clean").string(), (dir / "restored").string());
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.psnr_db == 100.0);
    CHECK(std::abs(r.ssim - 1.0) <= 1e-6);
  }
  fs::remove(dir / "restored" / "img1.png");
  CHECK_THROWS_WITH_AS(evaluate_dirs((dir / "clean").string(), (dir / "restored").string()),
                       doctest::Contains("img1.png"), Error);
}
