// rainforge command-line tool: train | derain | eval | synth | gradcheck

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "rainforge/gradcheck_suite.hpp"
#include "rainforge/ops.hpp"
#include "rainforge/train.hpp"

using namespace rainforge;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<uint64_t> seed;

  RunConfig load() const {
    RunConfig c = config.empty() ? RunConfig{} : RunConfig::load(config);
    if (seed) c.set_seed(*seed);
    return c;
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config with model/rain/train sections")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Seed for initialization, data order and rain synthesis");
}

// Rain flags; each overrides the config only when given.
struct RainFlags {
  std::optional<double> alpha, angle_min, angle_max, length_min, length_max, thickness;
  std::optional<int> streaks, blur;

  void add(CLI::App* sub) {
    sub->add_option("--alpha", alpha, "Blend weight of the rain layer, in [0, 1]");
    sub->add_option("--streaks", streaks, "Streaks per image");
    sub->add_option("--angle-min", angle_min, "Degrees from vertical");
    sub->add_option("--angle-max", angle_max, "Degrees from vertical");
    sub->add_option("--length-min", length_min, "Streak length in pixels");
    sub->add_option("--length-max", length_max, "Streak length in pixels");
    sub->add_option("--thickness", thickness, "Streak thickness in pixels");
    sub->add_option("--blur", blur, "Gaussian blur radius of the rain layer (0: none)");
  }
  void apply(RainParams& p) const {
    if (alpha) p.alpha = *alpha;
    if (streaks) p.streak_count = *streaks;
    if (angle_min) p.angle_min = *angle_min;
    if (angle_max) p.angle_max = *angle_max;
    if (length_min) p.length_min = *length_min;
    if (length_max) p.length_max = *length_max;
    if (thickness) p.thickness = *thickness;
    if (blur) p.blur_radius = *blur;
    p.validate();
  }
};

std::vector<std::pair<std::string, std::string>> inputs_of(const std::string& in) {
  std::vector<std::pair<std::string, std::string>> out;  // (path, file name)
  if (fs::is_directory(in)) {
    for (const auto& name : list_images(in)) out.emplace_back((fs::path(in) / name).string(), name);
    if (out.empty()) throw Error("no PNG images in " + in);
  } else {
    if (!fs::exists(in)) throw Error("no such file or directory: " + in);
    out.emplace_back(in, fs::path(in).filename().string());
  }
  return out;
}

int run_train(const Common& common, const RainFlags& rain, const std::map<std::string, std::string>& s,
              std::optional<int64_t> iterations, std::optional<double> lambda, const std::string& resume) {
  RunConfig cfg = common.load();
  rain.apply(cfg.rain);
  if (iterations) cfg.train.iterations = *iterations;
  if (lambda) cfg.model.lambda = *lambda;
  if (s.count("out")) cfg.train.out_dir = s.at("out");
  if (s.count("clean")) cfg.train.clean_dir = s.at("clean");
  if (s.count("rainy")) cfg.train.rainy_dir = s.at("rainy");
  if (s.count("val-clean")) cfg.train.val_clean_dir = s.at("val-clean");
  if (s.count("val-rainy")) cfg.train.val_rainy_dir = s.at("val-rainy");
  cfg = RunConfig::from_json(cfg.to_json());  // validates the merged result
  fs::create_directories(cfg.train.out_dir);
  std::ofstream(fs::path(cfg.train.out_dir) / "config.json") << cfg.to_json().dump(2) << "\n";
  TrainOptions opts;
  opts.resume = resume;
  opts.quiet = false;
  const TrainResult r = train(cfg, opts);
  std::cout << "iterations " << r.last_iteration << "\n"
            << "val_psnr " << r.val_psnr << " (input " << r.rainy_psnr << ")\n"
            << "val_ssim " << r.val_ssim << " (input " << r.rainy_ssim << ")\n"
            << "checkpoints in " << cfg.train.out_dir << "\n";
  return 0;
}

int run_derain(const std::string& in, const std::string& out, const std::string& ckpt) {
  const Model model = load_model(ckpt);
  fs::create_directories(out);
  for (const auto& [path, name] : inputs_of(in)) {
    const Tensor img = load_image(path);
    const Tensor x = reshape(img, {1, img.size(0), img.size(1), img.size(2)});
    save_image(model.infer(x).stage2, (fs::path(out) / name).string());
    std::cout << name << "\n";
  }
  return 0;
}

int run_eval(const std::string& clean, const std::string& restored, const std::string& csv) {
  const auto rows = evaluate_dirs(clean, restored);
  write_eval_csv(std::cout, rows);
  if (!csv.empty()) {
    std::ofstream os(csv);
    if (!os) throw Error("cannot write " + csv);
    write_eval_csv(os, rows);
  }
  return 0;
}

int run_synth(const Common& common, const RainFlags& flags, const std::string& clean, const std::string& out) {
  RunConfig cfg = common.load();
  flags.apply(cfg.rain);
  if (!fs::is_directory(clean)) throw Error("not a directory: " + clean);
  const auto names = list_images(clean);
  if (names.empty()) throw Error("no PNG images in " + clean);
  fs::create_directories(out);
  for (size_t i = 0; i < names.size(); ++i) {
    RainParams p = cfg.rain;
    p.seed = mix_seed(cfg.rain.seed, i);
    const Tensor img = load_image((fs::path(clean) / names[i]).string());
    save_image(synth_rain(img, p).rainy, (fs::path(out) / names[i]).string());
  }
  std::cout << "wrote " << names.size() << " images to " << out << "\n";
  return 0;
}

int run_gradcheck() {
  int failures = 0;
  run_gradcheck_suite([&](const GradCheckCase& c) {
    std::printf("%-4s %-28s max_rel_err %.3e (tol %.0e, %lld checked, %zu kinks skipped)\n",
                c.report.passed ? "PASS" : "FAIL", c.name.c_str(), c.report.max_rel_error, c.tol,
                static_cast<long long>(c.report.checked), c.report.excluded.size());
    if (!c.report.passed) ++failures;
  });
  if (failures) std::fprintf(stderr, "%d gradient checks failed\n", failures);
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rainforge: two-stage single-image rain removal"};
  app.require_subcommand(1);

  Common common;
  RainFlags rain;

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd, common);
  rain.add(train_cmd);
  std::map<std::string, std::string> train_paths;
  std::optional<int64_t> iterations;
  std::optional<double> lambda;
  std::string resume;
  for (const char* key : {"out", "clean", "rainy", "val-clean", "val-rainy"}) {
    train_cmd->add_option_function<std::string>(std::string("--") + key,
                                                [&train_paths, key](const std::string& v) { train_paths[key] = v; });
  }
  train_cmd->add_option("--iterations", iterations, "Training iterations");
  train_cmd->add_option("--lambda", lambda, "Weight of the contrastive term");
  train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  std::string in, out, ckpt;
  auto* derain_cmd = app.add_subcommand("derain", "Write stage-2 outputs for an image or directory");
  add_common(derain_cmd, common);
  derain_cmd->add_option("--in", in, "Input PNG or directory")->required();
  derain_cmd->add_option("--out", out, "Output directory")->required();
  derain_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);

  std::string clean, restored, csv;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM of restored images against clean ones");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--clean", clean, "Directory of ground-truth PNGs")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--restored", restored, "Directory of restored PNGs, same names")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--csv", csv, "Also write the table to this file");

  std::string synth_clean, synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Add synthetic rain to clean images");
  add_common(synth_cmd, common);
  rain.add(synth_cmd);
  synth_cmd->add_option("--clean", synth_clean, "Directory of clean PNGs")->required();
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and layer (64-bit)");
  add_common(grad_cmd, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (const int threads = worker_threads(); threads != 1) {
      std::cerr << "note: RAINFORGE_THREADS=" << threads << " requested; computation is single-threaded\n";
    }
    if (*train_cmd) return run_train(common, rain, train_paths, iterations, lambda, resume);
    if (*derain_cmd) return run_derain(in, out, ckpt);
    if (*eval_cmd) return run_eval(clean, restored, csv);
    if (*synth_cmd) return run_synth(common, rain, synth_clean, synth_out);
    if (*grad_cmd) return run_gradcheck();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
