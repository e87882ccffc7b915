// Acceptance suite: one PASS/FAIL line per criterion. Arguments select a
// subset of criteria by number (default: all).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "rainforge/frequency.hpp"
#include "rainforge/gradcheck_suite.hpp"
#include "rainforge/ops.hpp"
#include "rainforge/train.hpp"

using namespace rainforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string num(double v, const char* f = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto x = a.to_vector(), y = b.to_vector();
  if (x.size() != y.size()) return INFINITY;
  double m = 0;
  for (size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

double frobenius(const Tensor& t) {
  double s = 0;
  for (double v : t.to_vector()) s += v * v;
  return std::sqrt(s);
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rainforge_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  int failed = 0;
  size_t cases = 0;
  int64_t checked = 0;
  double worst_op = 0, worst_block = 0;
  for (const auto& c : run_gradcheck_suite()) {
    ++cases;
    checked += c.report.checked;
    if (!c.report.passed) {
      ++failed;
      o.require(false, c.name + " rel err " + num(c.report.max_rel_error));
    }
    o.require(c.report.checked > 0, c.name + " checked no elements");
    (c.tol == kOpTolerance ? worst_op : worst_block) =
        std::max(c.tol == kOpTolerance ? worst_op : worst_block, c.report.max_rel_error);
  }
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime " + num(secs) + " s");
  o.note(std::to_string(cases) + " cases, " + std::to_string(checked) + " elements, worst op " + num(worst_op) +
         " (tol 1e-6), worst block " + num(worst_block) + " (tol 1e-4), " + num(secs, "%.1f") + " s");
  return o;
}

// ---------------------------------------------------------------- 2

Outcome haar() {
  Outcome o;
  Rng rng(21);
  double rt = 0, energy_rel = 0;
  for (int trial = 0; trial < 4; ++trial) {
    const Tensor x = rng.uniform_tensor({2, 3, 16, 12}, 0.0, 1.0);
    const DwtSubbands s = dwt2_haar(x);
    rt = std::max(rt, max_abs_diff(idwt2_haar(s), x));
    double e_in = 0, e_out = 0;
    for (double v : x.to_vector()) e_in += v * v;
    for (const Tensor* b : {&s.ll, &s.lh, &s.hl, &s.hh})
      for (double v : b->to_vector()) e_out += v * v;
    energy_rel = std::max(energy_rel, std::abs(e_out - e_in) / e_in);
  }
  o.require(rt <= 1e-5, "round trip error " + num(rt));
  o.require(energy_rel <= 1e-4, "energy relative error " + num(energy_rel));
  const DwtSubbands b = dwt2_haar(Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4}));
  const double ll = b.ll.item(), hl = b.hl.item(), lh = b.lh.item(), hh = b.hh.item();
  o.require(ll == 5 && hl == -1 && lh == -2 && hh == 0,
            "block [[1,2],[3,4]] gave LL " + num(ll) + " HL " + num(hl) + " LH " + num(lh) + " HH " + num(hh));
  o.note("round trip " + num(rt) + ", energy rel " + num(energy_rel) + ", [[1,2],[3,4]] -> (" + num(ll) + ", " +
         num(hl) + ", " + num(lh) + ", " + num(hh) + ")");
  return o;
}

// ---------------------------------------------------------------- 3

// Token-by-token attention inside each window, from the projection weights.
std::vector<double> attention_by_tokens(const Tensor& xw, const WindowAttention& a, const Tensor& mask) {
  using Rows = std::vector<std::vector<double>>;
  auto linear = [](const Rows& x, const LinearLayer& l) {
    const int64_t out = l.weight.size(0), in = l.weight.size(1);
    Rows y(x.size(), std::vector<double>(static_cast<size_t>(out)));
    for (size_t t = 0; t < x.size(); ++t)
      for (int64_t r = 0; r < out; ++r) {
        double acc = l.bias.at(r);
        for (int64_t i = 0; i < in; ++i) acc += x[t][static_cast<size_t>(i)] * l.weight.at(r * in + i);
        y[t][static_cast<size_t>(r)] = acc;
      }
    return y;
  };
  const int64_t nb = xw.size(0), t = xw.size(1), d = xw.size(2), hd = d / a.heads;
  std::vector<double> out;
  for (int64_t w = 0; w < nb; ++w) {
    Rows x(static_cast<size_t>(t), std::vector<double>(static_cast<size_t>(d)));
    for (int64_t i = 0; i < t; ++i)
      for (int64_t c = 0; c < d; ++c) x[static_cast<size_t>(i)][static_cast<size_t>(c)] = xw.at((w * t + i) * d + c);
    const Rows q = linear(x, a.proj_q), k = linear(x, a.proj_k), v = linear(x, a.proj_v);
    Rows heads_out(static_cast<size_t>(t), std::vector<double>(static_cast<size_t>(d), 0.0));
    for (int64_t h = 0; h < a.heads; ++h)
      for (int64_t i = 0; i < t; ++i) {
        std::vector<double> s(static_cast<size_t>(t));
        double top = -INFINITY, z = 0;
        for (int64_t j = 0; j < t; ++j) {
          double dot = 0;
          for (int64_t e = 0; e < hd; ++e) dot += q[i][h * hd + e] * k[j][h * hd + e];
          s[j] = dot / std::sqrt(static_cast<double>(hd)) +
                 (mask.defined() ? mask.at(((w % mask.size(0)) * t + i) * t + j) : 0.0);
          top = std::max(top, s[j]);
        }
        for (auto& e : s) z += (e = std::exp(e - top));
        for (int64_t j = 0; j < t; ++j)
          for (int64_t e = 0; e < hd; ++e) heads_out[i][h * hd + e] += s[j] / z * v[j][h * hd + e];
      }
    for (const auto& row : linear(heads_out, a.proj_out)) out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

Outcome attention() {
  Outcome o;
  Rng rng(31);
  double oracle_err = 0, cross = 0, row_err = 0;
  for (auto [window, heads, shift] : {std::array<int64_t, 3>{4, 2, 2}, {4, 1, 0}, {2, 2, 1}, {3, 1, 1}}) {
    const int64_t h = 2 * window, w = 3 * window, dim = 4;
    WindowAttention a(dim, dim, heads, window, rng, DType::f32);
    const Tensor img = rng.normal_tensor({1, dim, h, w}, 1.0);
    const Tensor xw = window_partition(roll(roll(img, 2, -shift), 3, -shift), window);
    const Tensor mask = shift > 0 ? shifted_mask(h, w, window, shift) : Tensor();
    const auto expect = attention_by_tokens(xw, a, mask);
    const auto got = a.forward(xw, mask).to_vector();
    for (size_t i = 0; i < got.size(); ++i) oracle_err = std::max(oracle_err, std::abs(got[i] - expect[i]));

    const Tensor weights = a.attention_weights(xw, mask);  // [B, heads, T, T]
    const int64_t t = window * window, nb = xw.size(0);
    for (int64_t b = 0; b < nb; ++b)
      for (int64_t hh = 0; hh < heads; ++hh)
        for (int64_t i = 0; i < t; ++i) {
          double row = 0;
          for (int64_t j = 0; j < t; ++j) {
            const double wv = weights.at(((b * heads + hh) * t + i) * t + j);
            row += wv;
            if (mask.defined() && mask.at(((b % mask.size(0)) * t + i) * t + j) != 0.0) cross = std::max(cross, wv);
          }
          row_err = std::max(row_err, std::abs(row - 1.0));
        }
    const Tensor big = rng.normal_tensor({2, 3, h, w}, 1.0);
    o.require(window_merge(window_partition(big, window), 2, h, w).to_vector() == big.to_vector(),
              "partition/merge round trip, window " + std::to_string(window));
  }
  o.require(oracle_err <= 1e-5, "token-loop oracle difference " + num(oracle_err));
  o.require(cross <= 1e-12, "masked cross-region weight " + num(cross));
  o.require(row_err <= 1e-6, "softmax row sum error " + num(row_err));
  o.note("oracle diff " + num(oracle_err) + ", max masked weight " + num(cross) + ", row sum err " + num(row_err) +
         ", partition/merge bitwise");
  return o;
}

// ---------------------------------------------------------------- 4

Outcome projector() {
  Outcome o;
  Rng rng(41);
  double sym = 0, idem = 0, orth = 0;
  for (auto [l, k] : {std::array<int64_t, 2>{64, 4}, {144, 8}, {36, 2}}) {
    const Tensor v = rng.normal_tensor({1, l, k}, 1.0);
    const Tensor p = subspace_projector(v, 1e-4);
    sym = std::max(sym, frobenius(sub(p, transpose(p, 1, 2))) / frobenius(p));
    idem = std::max(idem, frobenius(sub(matmul(p, p), p)) / frobenius(p));
    const Tensor m = rng.normal_tensor({1, l, 3}, 1.0);
    const Tensor resid = sub(m, subspace_project(v, m, 1e-4));
    orth = std::max(orth, frobenius(matmul(transpose(v, 1, 2), resid)) / (frobenius(v) * frobenius(m)));
  }
  o.require(sym <= 1e-5, "symmetry " + num(sym));
  o.require(idem <= 1e-4, "idempotence " + num(idem));
  o.require(orth <= 1e-3, "residual orthogonality " + num(orth));
  o.note("symmetry " + num(sym) + ", idempotence " + num(idem) + ", residual orthogonality " + num(orth));
  return o;
}

// ---------------------------------------------------------------- 5

Outcome gate() {
  Outcome o;
  double worst_sum = 0;
  for (double theta : {-20.0, 0.0, 20.0}) {
    const BlendCoefficients c = blend_coefficients(theta);
    worst_sum = std::max(worst_sum, std::abs(c.pixel + c.spatial + c.channel - 1.0));
  }
  o.require(worst_sum <= 1e-12, "coefficient sum error " + num(worst_sum));

  Rng rng(51);
  MultiAttentionBlock mab(6, rng, DType::f32);
  mab.theta.mutable_data<float>()[0] = 20.0f;
  const Tensor x = rng.normal_tensor({2, 6, 10, 12}, 1.0);
  const Tensor b = mab.body(x);
  const Tensor sa_only = add(x, mul(b, mab.spatial_map(b)));
  const double diff = max_abs_diff(mab.forward(x), sa_only);
  o.require(diff <= 1e-5, "theta = 20 output vs spatial-attention path " + num(diff));
  o.note("max |sum - 1| " + num(worst_sum) + ", theta 20 vs SA-only path " + num(diff));
  return o;
}

// ---------------------------------------------------------------- 6

Outcome loss_geometry() {
  Outcome o;
  Rng rng(61);
  const Tensor clean = rng.uniform_tensor({2, 3, 16, 16}, 0.0, 1.0);
  RainParams rp;
  // Rainy batch: the rain model applied image by image.
  std::vector<Tensor> rainy_parts;
  for (int64_t n = 0; n < 2; ++n) {
    rp.seed = static_cast<uint64_t>(n);
    const Tensor img = reshape(slice(clean, 0, n, n + 1), {3, 16, 16});
    const Tensor r = synth_rain(img, rp).rainy;
    rainy_parts.push_back(reshape(r, {1, 3, 16, 16}));
  }
  const Tensor rainy = concat(rainy_parts, 0);
  const FeatureExtractor fx(2);
  const LossConfig cfg;
  const double cr_clean = contrastive_reg(clean, clean, rainy, fx, cfg).item();
  const double cr_rainy = contrastive_reg(rainy, clean, rainy, fx, cfg).item();
  const double tl_clean = total_loss(clean, clean, rainy, fx, cfg).item();
  const double tl_rainy = total_loss(rainy, clean, rainy, fx, cfg).item();
  o.require(cr_clean == 0.0, "contrastive_reg(clean) = " + num(cr_clean));
  o.require(cr_rainy > cr_clean, "contrastive_reg(rainy) not greater");
  o.require(tl_clean < tl_rainy, "total_loss(clean) not below total_loss(rainy)");
  o.require(cfg.lambda == 0.1 && ModelConfig{}.lambda == 0.1, "default lambda is not 0.1");
  o.note("CR(clean) " + num(cr_clean) + ", CR(rainy) " + num(cr_rainy) + ", total(clean) " + num(tl_clean) +
         ", total(rainy) " + num(tl_rainy) + ", lambda " + num(cfg.lambda));
  return o;
}

// ---------------------------------------------------------------- 7

Outcome zero_step() {
  Outcome o;
  ModelConfig cfg;
  const Model model(cfg);
  Rng rng(71);
  bool identity = true;
  for (auto [h, w] : {std::array<int64_t, 2>{24, 24}, {21, 19}, {32, 40}}) {
    const Tensor rainy = rng.uniform_tensor({2, 3, h, w}, 0.0, 1.0);
    NoGradGuard guard;
    identity = identity && model.forward(rainy).stage2.to_vector() == rainy.to_vector();
    identity = identity && model.infer(rainy).stage2.to_vector() == rainy.to_vector();
  }
  o.require(identity, "fresh model output differs from its input");

  const fs::path dir = scratch("zero_step");
  fs::create_directories(dir);
  // Move away from the initialization so the round trip covers nonzero heads.
  Model trained(cfg);
  Rng noise(72);
  for (const auto& p : trained.named_parameters()) {
    Tensor t = p.tensor;
    const Tensor n = noise.normal_tensor(t.shape(), 0.05);
    auto d = t.mutable_data<float>();
    auto nd = n.data<float>();
    for (size_t i = 0; i < d.size(); ++i) d[i] += nd[i];
  }
  save_checkpoint((dir / "a.ckpt").string(), trained);
  const Model loaded = load_model((dir / "a.ckpt").string());
  const auto pa = trained.named_parameters(), pb = loaded.named_parameters();
  bool bitwise = pa.size() == pb.size();
  for (size_t i = 0; bitwise && i < pa.size(); ++i) {
    const auto x = pa[i].tensor.data<float>(), y = pb[i].tensor.data<float>();
    bitwise = pa[i].name == pb[i].name && x.size() == y.size() &&
              std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
  }
  o.require(bitwise, "loaded parameters differ");
  save_checkpoint((dir / "b.ckpt").string(), loaded);
  o.require(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"), "re-saved checkpoint differs");
  const Tensor probe = rng.uniform_tensor({1, 3, 24, 24}, 0.0, 1.0);
  o.require(trained.infer(probe).stage2.to_vector() == loaded.infer(probe).stage2.to_vector(),
            "outputs differ after reload");
  o.note("stage2 == rainy bitwise at 24x24, 21x19, 32x40; " + std::to_string(pa.size()) +
         " tensors round-trip bitwise");
  return o;
}

// ---------------------------------------------------------------- 8

Outcome smoke_training() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double gain_sum = 0;
  bool all_plus2 = true;
  std::string rows;
  for (uint64_t seed : {1, 2, 3}) {
    double psnr_at[2] = {0, 0};
    for (int li = 0; li < 2; ++li) {
      const double lambda = li == 0 ? 0.0 : 0.1;
      RunConfig cfg;
      cfg.set_seed(seed);
      cfg.model.lambda = lambda;
      cfg.train.iterations = 1000;
      cfg.train.out_dir = scratch("smoke_" + std::to_string(seed) + "_" + std::to_string(li)).string();
      const TrainResult r = train(cfg);
      psnr_at[li] = r.val_psnr;
      const bool plus2 = r.val_psnr >= r.rainy_psnr + 2.0;
      all_plus2 = all_plus2 && plus2;
      rows += " [seed " + std::to_string(seed) + " lambda " + num(lambda) + ": " + num(r.val_psnr, "%.3f") +
              " dB vs input " + num(r.rainy_psnr, "%.3f") + " dB]";
      std::fprintf(stderr, "  seed %llu lambda %.1f: derained %.3f dB, input %.3f dB, SSIM %.4f (input %.4f)\n",
                   static_cast<unsigned long long>(seed), lambda, r.val_psnr, r.rainy_psnr, r.val_ssim,
                   r.rainy_ssim);
    }
    gain_sum += psnr_at[1] - psnr_at[0];
  }
  const double mean_gain = gain_sum / 3.0;
  const double secs = seconds_since(t0);
  o.require(all_plus2, "a run is below input PSNR + 2 dB");
  o.require(mean_gain >= 0.2, "mean gain of lambda 0.1 over lambda 0 is " + num(mean_gain, "%.3f") + " dB");
  o.note("mean lambda gain " + num(mean_gain, "%.3f") + " dB, " + num(secs / 60.0, "%.1f") + " min for 6 runs;" +
         rows);
  if (secs >= 15 * 60) o.note("runtime above the 15 min target");
  return o;
}

// ---------------------------------------------------------------- 9

Outcome metrics() {
  Outcome o;
  Rng rng(91);
  Tensor x = rng.uniform_tensor({1, 3, 20, 24}, 0.0, 254.0 / 255.0, DType::f64);
  const Tensor y = add_scalar(x, 1.0 / 255.0);
  const double p = psnr(x, y);
  const double expected = 20.0 * std::log10(255.0);
  o.require(std::abs(p - expected) <= 1e-3 && std::abs(p - 48.1308) <= 1e-3, "psnr " + num(p, "%.6f"));
  const double s = ssim(x, x);
  o.require(std::abs(s - 1.0) <= 1e-6, "ssim(x, x) " + num(s, "%.9f"));

  std::ostringstream os;
  write_eval_csv(os, {{"a.png", 30.0, 0.5}, {"b.png", 40.0, 0.7}});
  const std::string want = "filename,psnr_db,ssim\na.png,30.000000,0.500000\nb.png,40.000000,0.700000\n"
                           "mean,35.000000,0.600000\n";
  o.require(os.str() == want, "eval CSV was:\n" + os.str());

  const fs::path dir = scratch("metrics");
  fs::create_directories(dir / "clean");
  fs::create_directories(dir / "restored");
  Rng scene(92);
  for (int i = 0; i < 2; ++i) {
    const std::string name = "v" + std::to_string(i) + ".png";
    save_image(procedural_scene(scene, 24, 32), (dir / "clean" / name).string());
    fs::copy_file(dir / "clean" / name, dir / "restored" / name);
  }
  std::ostringstream self;
  write_eval_csv(self, evaluate_dirs((dir / "clean").string(), (dir / "restored").string()));
  o.require(self.str().find("\nmean,100.000000,1.000000\n") != std::string::npos, "self-evaluation mean row");
  o.note("psnr " + num(p, "%.6f") + " dB (expect " + num(expected, "%.6f") + "), ssim(x,x) " + num(s, "%.9f") +
         ", CSV schema exact");
  return o;
}

// ---------------------------------------------------------------- 10

Outcome determinism() {
  Outcome o;
  setenv("RAINFORGE_THREADS", "1", 1);
  std::string bytes[2];
  for (int run = 0; run < 2; ++run) {
    RunConfig cfg;
    cfg.set_seed(17);
    cfg.train.iterations = 50;
    cfg.train.out_dir = scratch("determinism_" + std::to_string(run)).string();
    train(cfg);
    bytes[run] = slurp(fs::path(cfg.train.out_dir) / "latest.ckpt");
  }
  o.require(!bytes[0].empty() && bytes[0] == bytes[1], "checkpoints differ");
  o.note("two 50-iteration runs, checkpoints of " + std::to_string(bytes[0].size()) + " bytes identical");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"Haar DWT", haar},
      {"window attention", attention},
      {"NLFFM projector", projector},
      {"attention gate", gate},
      {"loss geometry", loss_geometry},
      {"zero-step identity and checkpoint round trip", zero_step},
      {"desk smoke training", smoke_training},
      {"metrics", metrics},
      {"determinism", determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failures;
    std::printf("criterion %2d %s: %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
