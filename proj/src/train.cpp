#include "rainforge/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>

#include "rainforge/ops.hpp"

namespace rainforge {

using nlohmann::json;
namespace fs = std::filesystem;

double Schedule::lr_at(int64_t iter) const {
  if (total_iters <= 0) throw Error("schedule: total_iters must be positive, got " + std::to_string(total_iters));
  if (iter < 0 || iter > total_iters) {
    throw Error("schedule: iteration " + std::to_string(iter) + " outside [0, " + std::to_string(total_iters) + "]");
  }
  if (iter == total_iters) return lr_final;
  const double c = std::cos(std::numbers::pi * static_cast<double>(iter) / static_cast<double>(total_iters));
  return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + c);
}

// ---------------------------------------------------------------- Adam

void AdamState::save(TrainingState& out) const {
  out.extra["adam_step"] = step;
  for (const auto& [name, t] : m) out.tensors.emplace_back("adam.m." + name, t);
  for (const auto& [name, t] : v) out.tensors.emplace_back("adam.v." + name, t);
}

AdamState AdamState::load(const TrainingState& in, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  s.step = in.extra.value("adam_step", int64_t{0});
  for (const auto& [name, t] : in.tensors) {
    if (name.rfind("adam.m.", 0) == 0) s.m[name.substr(7)] = t.clone();
    if (name.rfind("adam.v.", 0) == 0) s.v[name.substr(7)] = t.clone();
  }
  return s;
}

void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr) {
  for (const auto& p : params) {
    if (!p.tensor.grad().defined()) throw Error("adam_step: parameter " + p.name + " has no gradient");
    if (p.tensor.grad().shape() != p.tensor.shape()) throw Error("adam_step: gradient shape mismatch for " + p.name);
  }
  state.step += 1;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t), bc2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& p : params) {
    Tensor param = p.tensor;
    const Tensor g = param.grad();
    Tensor& m = state.m[p.name];
    Tensor& v = state.v[p.name];
    if (!m.defined()) m = Tensor::zeros(param.shape(), param.dtype());
    if (!v.defined()) v = Tensor::zeros(param.shape(), param.dtype());
    if (m.shape() != param.shape() || v.shape() != param.shape()) {
      throw Error("adam_step: moment shape mismatch for " + p.name);
    }
    dispatch(param.dtype(), [&]<typename T>() {
      auto w = param.mutable_data<T>();
      auto gd = g.data<T>();
      auto md = m.mutable_data<T>();
      auto vd = v.mutable_data<T>();
      for (size_t i = 0; i < w.size(); ++i) {
        const double gi = gd[i];
        const double mi = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
        const double vi = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
        md[i] = static_cast<T>(mi);
        vd[i] = static_cast<T>(vi);
        w[i] = static_cast<T>(w[i] - lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps));
      }
    });
  }
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw Error("config: " + what);
  };
  need(iterations > 0, "train.iterations must be positive");
  need(batch > 0, "train.batch must be positive");
  need(crop > 0, "train.crop must be positive");
  need(lr_init > 0 && lr_final > 0 && lr_final <= lr_init, "train.lr_final must be in (0, lr_init]");
  need(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1, "adam betas must be in [0, 1)");
  need(adam.eps > 0, "adam eps must be positive");
  need(val_every > 0, "train.val_every must be positive");
  need(clean_dir.empty() ? train_items > 0 && train_size >= crop : true,
       "train.train_items must be positive and train_size >= crop");
  need(val_clean_dir.empty() ? val_items > 0 && val_size > 0 : true, "train.val_items must be positive");
  need(!out_dir.empty(), "train.out_dir must not be empty");
}

namespace {

json train_to_json(const TrainConfig& t) {
  return json{{"iterations", t.iterations},
              {"batch", t.batch},
              {"crop", t.crop},
              {"augment", t.augment},
              {"lr_init", t.lr_init},
              {"lr_final", t.lr_final},
              {"adam_beta1", t.adam.beta1},
              {"adam_beta2", t.adam.beta2},
              {"adam_eps", t.adam.eps},
              {"train_items", t.train_items},
              {"train_size", t.train_size},
              {"val_items", t.val_items},
              {"val_size", t.val_size},
              {"clean_dir", t.clean_dir},
              {"rainy_dir", t.rainy_dir},
              {"val_clean_dir", t.val_clean_dir},
              {"val_rainy_dir", t.val_rainy_dir},
              {"feature_weights", t.feature_weights},
              {"val_every", t.val_every},
              {"out_dir", t.out_dir}};
}

TrainConfig train_from_json(const json& j) {
  if (!j.is_object()) throw Error("config: train section must be a JSON object");
  TrainConfig t;
  const json defaults = train_to_json(t);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw Error("config: unknown train key \"" + key + "\"");
  }
  auto get = [&]<typename T>(const char* key, T& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(std::string("config: bad value for \"") + key + "\": " + e.what());
    }
  };
  get("iterations", t.iterations);
  get("batch", t.batch);
  get("crop", t.crop);
  get("augment", t.augment);
  get("lr_init", t.lr_init);
  get("lr_final", t.lr_final);
  get("adam_beta1", t.adam.beta1);
  get("adam_beta2", t.adam.beta2);
  get("adam_eps", t.adam.eps);
  get("train_items", t.train_items);
  get("train_size", t.train_size);
  get("val_items", t.val_items);
  get("val_size", t.val_size);
  get("clean_dir", t.clean_dir);
  get("rainy_dir", t.rainy_dir);
  get("val_clean_dir", t.val_clean_dir);
  get("val_rainy_dir", t.val_rainy_dir);
  get("feature_weights", t.feature_weights);
  get("val_every", t.val_every);
  get("out_dir", t.out_dir);
  t.validate();
  return t;
}

}  // namespace

json RunConfig::to_json() const {
  return json{{"model", model.to_json()}, {"rain", rain.to_json()}, {"train", train_to_json(train)}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error("config: top level must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "model" && key != "rain" && key != "train") throw Error("config: unknown section \"" + key + "\"");
  }
  RunConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("rain")) c.rain = RainParams::from_json(j.at("rain"));
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read config " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw Error("config " + path + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::set_seed(uint64_t seed) {
  model.init_seed = seed;
  model.data_seed = seed;
  rain.seed = seed;
}

// ---------------------------------------------------------------- data

namespace {

constexpr uint64_t kTrainStream = 1, kValStream = 2, kBatchStream = 3;

PairedDataset dataset_from(const std::string& clean_dir, const std::string& rainy_dir, int items, int64_t size,
                           uint64_t data_seed, RainParams rain, uint64_t stream) {
  rain.seed = mix_seed(rain.seed, stream);
  if (clean_dir.empty()) return PairedDataset::procedural(items, size, mix_seed(data_seed, stream), rain);
  if (!rainy_dir.empty()) return PairedDataset::from_dirs(clean_dir, rainy_dir);
  std::vector<Tensor> cleans;
  std::vector<std::string> names;
  for (const auto& name : list_images(clean_dir)) {
    cleans.push_back(load_image((fs::path(clean_dir) / name).string()));
    names.push_back(name);
  }
  if (cleans.empty()) throw Error("no PNG images in " + clean_dir);
  PairedDataset synth = PairedDataset::synthesize(cleans, rain);
  std::vector<Pair> pairs;
  for (size_t i = 0; i < synth.size(); ++i) pairs.push_back(synth.at(i));
  return PairedDataset(std::move(pairs), std::move(names));
}

Tensor batched(const Tensor& img) { return reshape(img, {1, img.size(0), img.size(1), img.size(2)}); }

}  // namespace

PairedDataset training_set(const RunConfig& cfg) {
  const auto& t = cfg.train;
  PairedDataset ds = dataset_from(t.clean_dir, t.rainy_dir, t.train_items, t.train_size, cfg.model.data_seed,
                                  cfg.rain, kTrainStream);
  ds.crop = t.crop;
  ds.augment = t.augment;
  return ds;
}

PairedDataset validation_set(const RunConfig& cfg) {
  const auto& t = cfg.train;
  return dataset_from(t.val_clean_dir, t.val_rainy_dir, t.val_items, t.val_size, cfg.model.data_seed, cfg.rain,
                      kValStream);
}

ValidationScore validate(const Model& model, const PairedDataset& ds) {
  if (ds.size() == 0) throw Error("validate: empty dataset");
  ValidationScore s;
  for (size_t i = 0; i < ds.size(); ++i) {
    const Tensor clean = batched(ds.at(i).clean).to(model.dtype());
    const Tensor rainy = batched(ds.at(i).rainy).to(model.dtype());
    const Tensor out = model.infer(rainy).stage2;
    s.psnr += psnr(out, clean);
    s.ssim += ssim(out, clean);
    s.rainy_psnr += psnr(rainy, clean);
    s.rainy_ssim += ssim(rainy, clean);
  }
  const double n = static_cast<double>(ds.size());
  s.psnr /= n;
  s.ssim /= n;
  s.rainy_psnr /= n;
  s.rainy_ssim /= n;
  return s;
}

FeatureExtractor make_feature_extractor(const RunConfig& cfg) {
  FeatureExtractor fx(cfg.model.feature_seed, DType::f32, cfg.model.feature_widths);
  if (!cfg.train.feature_weights.empty()) fx.load_weights(cfg.train.feature_weights);
  return fx;
}

// ---------------------------------------------------------------- loop

namespace {

Tensor training_loss(const ModelOutput& out, const Batch& b, const FeatureExtractor& fx, const LossConfig& lc) {
  return add(total_loss(out.stage2, b.clean, b.rainy, fx, lc), psnr_loss(out.stage1, b.clean));
}

void check_finite_grads(const Model& model, int64_t iter) {
  for (const auto& p : model.named_parameters()) {
    const Tensor g = p.tensor.grad();
    if (!g.defined()) continue;
    for (double v : g.to_vector()) {
      if (!std::isfinite(v)) {
        throw Error("non-finite gradient for " + p.name + " at iteration " + std::to_string(iter));
      }
    }
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

LossBreakdown loss_breakdown(const Model& model, const FeatureExtractor& fx, const Batch& batch) {
  NoGradGuard guard;
  const ModelOutput out = model.forward(batch.rainy);
  const LossConfig lc = model.config().loss();
  LossBreakdown b;
  b.stage2_psnr_loss = psnr_loss(out.stage2, batch.clean).item();
  b.contrastive = contrastive_reg(out.stage2, batch.clean, batch.rainy, fx, lc).item();
  b.stage1_psnr_loss = psnr_loss(out.stage1, batch.clean).item();
  b.total = training_loss(out, batch, fx, lc).item();
  return b;
}

TrainResult train(const RunConfig& cfg_in, const TrainOptions& opts) {
  RunConfig cfg = cfg_in;
  cfg.model.validate();
  cfg.rain.validate();
  cfg.train.validate();
  const TrainConfig& tc = cfg.train;
  fs::create_directories(tc.out_dir);
  const std::string latest = (fs::path(tc.out_dir) / "latest.ckpt").string();
  const std::string best = (fs::path(tc.out_dir) / "best.ckpt").string();
  const std::string log_path = (fs::path(tc.out_dir) / "log.csv").string();

  Model model(cfg.model);
  AdamState adam;
  adam.config = tc.adam;
  int64_t start = 0;
  double best_psnr = -std::numeric_limits<double>::infinity();
  if (!opts.resume.empty()) {
    Checkpoint ck = read_checkpoint(opts.resume);
    if (ck.config.to_json() != cfg.model.to_json()) {
      throw Error("resume: model config in " + opts.resume + " differs from the requested config");
    }
    load_parameters(model, ck);
    adam = AdamState::load(ck.state, tc.adam);
    start = ck.state.iteration;
    if (ck.state.extra.contains("best_psnr")) best_psnr = ck.state.extra.at("best_psnr").get<double>();
    if (start > tc.iterations) throw Error("resume: checkpoint is past the configured iteration count");
  }

  const PairedDataset train_ds = training_set(cfg);
  const PairedDataset val_ds = validation_set(cfg);
  const FeatureExtractor fx = make_feature_extractor(cfg);
  const LossConfig lc = cfg.model.loss();
  const Schedule sched = tc.schedule();
  const uint64_t batch_seed = mix_seed(cfg.model.data_seed, kBatchStream);
  const auto params = model.named_parameters();

  std::ofstream log(log_path, start == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw Error("cannot write " + log_path);
  if (start == 0) log << "iter,loss,lr,val_psnr,val_ssim\n";

  auto checkpoint = [&](int64_t iteration, const std::string& path) {
    TrainingState st;
    st.iteration = iteration;
    if (std::isfinite(best_psnr)) st.extra["best_psnr"] = best_psnr;
    adam.save(st);
    save_checkpoint(path, model, st);
  };

  TrainResult result;
  int64_t it = start;
  bool saved = false;
  for (; it < tc.iterations; ++it) {
    if (opts.stop_at >= 0 && it >= opts.stop_at) break;
    saved = false;
    const Batch b = batch_for_iteration(train_ds, tc.batch, batch_seed, it);
    model.zero_grad();
    Tape tape;
    double loss_value = 0;
    try {
      TapeScope scope(tape);
      const Tensor loss = training_loss(model.forward(b.rainy), b, fx, lc);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw Error("non-finite loss");
      tape.backward(loss);
    } catch (const Error& e) {
      // NaN inputs also surface as domain errors inside the loss (log of NaN).
      throw Error(std::string(e.what()) + " at iteration " + std::to_string(it) + "; last good checkpoint kept at " +
                  latest);
    }
    check_finite_grads(model, it);
    const double lr = sched.lr_at(it);
    adam_step(params, adam, lr);
    result.losses.push_back(loss_value);
    if (opts.on_step) opts.on_step(it, loss_value);

    std::string vp, vs;
    const bool do_val = (it + 1) % tc.val_every == 0 || it + 1 == tc.iterations;
    if (do_val) {
      const ValidationScore s = validate(model, val_ds);
      result.val_psnr = s.psnr;
      result.val_ssim = s.ssim;
      result.rainy_psnr = s.rainy_psnr;
      result.rainy_ssim = s.rainy_ssim;
      vp = fmt("%.6f", s.psnr);
      vs = fmt("%.6f", s.ssim);
      const bool improved = s.psnr > best_psnr;
      if (improved) best_psnr = s.psnr;
      checkpoint(it + 1, latest);
      if (improved) checkpoint(it + 1, best);
      saved = true;
      if (!opts.quiet) {
        std::cerr << "iter " << it + 1 << " loss " << loss_value << " val psnr " << vp << " (input " << s.rainy_psnr
                  << ") ssim " << vs << "\n";
      }
    }
    log << it << ',' << fmt("%.9g", loss_value) << ',' << fmt("%.9g", lr) << ',' << vp << ',' << vs << '\n';
  }
  if (!saved && it > start) checkpoint(it, latest);
  log.flush();
  result.best_psnr = best_psnr;
  result.last_iteration = it;
  return result;
}

std::vector<EvalRow> evaluate_dirs(const std::string& clean_dir, const std::string& restored_dir) {
  if (!fs::is_directory(restored_dir)) throw Error("not a directory: " + restored_dir);
  const auto cleans = list_images(clean_dir);
  if (cleans.empty()) throw Error("no PNG images in " + clean_dir);
  std::vector<EvalRow> rows;
  for (const auto& name : cleans) {
    const std::string path = (fs::path(clean_dir) / name).string();
    const std::string other = (fs::path(restored_dir) / name).string();
    if (!fs::exists(other)) throw Error("missing restored image " + other);
    const Tensor c = batched(load_image(path)), r = batched(load_image(other));
    if (c.shape() != r.shape()) throw Error("size mismatch for " + name);
    rows.push_back({name, psnr(r, c), ssim(r, c)});
  }
  return rows;
}

}  // namespace rainforge
