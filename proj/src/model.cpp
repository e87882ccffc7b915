#include "rainforge/model.hpp"

#include <array>
#include <fstream>
#include <numeric>

#include "rainforge/ops.hpp"

namespace rainforge {

using nlohmann::json;

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'R', 'F', 'C', 'K'};

Conv2dLayer conv3(int64_t in, int64_t out, Rng& rng, DType dt) {
  Conv2dOptions o;
  o.in_channels = in;
  o.out_channels = out;
  return Conv2dLayer(o, rng, dt);
}

std::string activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw Error("config: activation must be \"relu\" or \"gelu\", got \"" + s + "\"");
}

std::string gate_name(GatedBranch g) { return g == GatedBranch::pixel ? "pixel" : "spatial"; }

GatedBranch parse_gate(const std::string& s) {
  if (s == "spatial") return GatedBranch::spatial;
  if (s == "pixel") return GatedBranch::pixel;
  throw Error("config: gated_branch must be \"spatial\" or \"pixel\", got \"" + s + "\"");
}

void copy_into(Tensor dst, const Tensor& src) {
  Tensor s = src.to(dst.dtype());
  dispatch(dst.dtype(), [&]<typename T>() {
    auto d = dst.mutable_data<T>();
    auto v = s.data<T>();
    std::copy(v.begin(), v.end(), d.begin());
  });
}

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (base_channels < 2 || base_channels % 2 != 0) throw Error("config: base_channels must be even and >= 2");
  if (heads < 1 || base_channels % heads != 0) throw Error("config: base_channels must be divisible by heads");
  if (mab_per_level < 1) throw Error("config: mab_per_level must be >= 1");
  if (levels != EncoderDecoder::kLevels) throw Error("config: levels is fixed at 3");
  if (window < 1) throw Error("config: window must be >= 1");
  if (stage2_blocks < 1) throw Error("config: stage2_blocks must be >= 1");
  if (ffn_ratio < 1) throw Error("config: ffn_ratio must be >= 1");
  if (nlffm_rank < 0 || rank() < 1) throw Error("config: nlffm_rank must be >= 1 (or 0 for base_channels / 2)");
  if (!(eps_proj > 0)) throw Error("config: eps_proj must be > 0");
  if (feature_widths.empty()) throw Error("config: feature_widths must be nonempty");
  loss().validate();
  if (!omega.empty() && omega.size() != feature_widths.size()) {
    throw Error("config: omega needs one weight per feature stage");
  }
}

int64_t ModelConfig::pad_multiple() const { return std::lcm<int64_t>(4, window); }

LossConfig ModelConfig::loss() const {
  LossConfig c;
  c.lambda = lambda;
  c.omega = omega;
  c.eps_cr = eps_cr;
  return c;
}

json ModelConfig::to_json() const {
  return json{{"base_channels", base_channels},
              {"mab_per_level", mab_per_level},
              {"levels", levels},
              {"window", window},
              {"stage2_blocks", stage2_blocks},
              {"ffn_ratio", ffn_ratio},
              {"nlffm_rank", nlffm_rank},
              {"heads", heads},
              {"activation", activation_name(activation)},
              {"gated_branch", gate_name(gated_branch)},
              {"ffn_literal", ffn_literal},
              {"lambda", lambda},
              {"omega", omega},
              {"eps_cr", eps_cr},
              {"eps_proj", eps_proj},
              {"feature_widths", feature_widths},
              {"init_seed", init_seed},
              {"feature_seed", feature_seed},
              {"data_seed", data_seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error("config: model section must be a JSON object");
  ModelConfig c;
  const json defaults = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw Error("config: unknown model key \"" + key + "\"");
  }
  auto get = [&]<typename T>(const char* key, T& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(std::string("config: bad value for \"") + key + "\": " + e.what());
    }
  };
  get("base_channels", c.base_channels);
  get("mab_per_level", c.mab_per_level);
  get("levels", c.levels);
  get("window", c.window);
  get("stage2_blocks", c.stage2_blocks);
  get("ffn_ratio", c.ffn_ratio);
  get("nlffm_rank", c.nlffm_rank);
  get("heads", c.heads);
  std::string act = activation_name(c.activation), gate = gate_name(c.gated_branch);
  get("activation", act);
  get("gated_branch", gate);
  c.activation = parse_activation(act);
  c.gated_branch = parse_gate(gate);
  get("ffn_literal", c.ffn_literal);
  get("lambda", c.lambda);
  get("omega", c.omega);
  get("eps_cr", c.eps_cr);
  get("eps_proj", c.eps_proj);
  get("feature_widths", c.feature_widths);
  get("init_seed", c.init_seed);
  get("feature_seed", c.feature_seed);
  get("data_seed", c.data_seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- model

Model::Model(const ModelConfig& cfg, DType dt) : config_(cfg), dtype_(dt) {
  cfg.validate();
  Rng rng(cfg.init_seed);
  const int64_t c = cfg.base_channels;
  stage1 = EncoderDecoder(c, cfg.mab_per_level, rng, dt, cfg.activation, cfg.gated_branch);
  sam = SupervisedAttentionModule(c, rng, dt);
  shallow2 = conv3(3, c, rng, dt);
  for (int i = 0; i < cfg.stage2_blocks; ++i) {
    const int64_t shift = (i % 2 == 1) ? cfg.window / 2 : 0;
    blocks.emplace_back(c, cfg.heads, cfg.window, shift, cfg.ffn_ratio, rng, dt, cfg.activation, cfg.ffn_literal);
    fusions.emplace_back(c, cfg.rank(), cfg.eps_proj, rng, dt);
  }
  tail = conv3(c, 3, rng, dt);
  tail.zero_init();
}

ModelOutput Model::forward(const Tensor& rainy) const {
  if (rainy.dim() != 4 || rainy.size(1) != 3) {
    throw Error("model: expected N x 3 x H x W input, got " + shape_str(rainy.shape()));
  }
  const int64_t h = rainy.size(2), w = rainy.size(3), m = config_.pad_multiple();
  const int64_t ph = (m - h % m) % m, pw = (m - w % m) % m;
  if (ph >= h || pw >= w) {
    throw Error("model: image " + std::to_string(h) + "x" + std::to_string(w) + " too small to pad to a multiple of " +
                std::to_string(m));
  }
  Tensor x = (ph || pw) ? reflection_pad(rainy, 0, ph, 0, pw) : rainy;

  auto sam_out = sam.forward(stage1.forward(x), x);
  Tensor low = add(shallow2.forward(sam_out.restored), sam_out.gated_features);
  Tensor h_feat = low;
  for (size_t i = 0; i < blocks.size(); ++i) h_feat = fusions[i].forward(low, blocks[i].forward(h_feat));
  Tensor stage2 = add(x, tail.forward(h_feat));

  ModelOutput out{sam_out.restored, stage2};
  if (ph || pw) {
    out.stage1 = crop(out.stage1, 0, 0, h, w);
    out.stage2 = crop(out.stage2, 0, 0, h, w);
  }
  return out;
}

ModelOutput Model::infer(const Tensor& rainy) const {
  NoGradGuard guard;
  ModelOutput out = forward(rainy);
  auto clamp01 = [](Tensor t) {
    Tensor c = t.clone();
    dispatch(c.dtype(), [&]<typename T>() {
      for (auto& v : c.mutable_data<T>()) v = std::clamp(v, T(0), T(1));
    });
    return c;
  };
  return {clamp01(out.stage1), clamp01(out.stage2)};
}

void Model::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  stage1.collect_parameters(join_name(prefix, "stage1"), out);
  sam.collect_parameters(join_name(prefix, "sam"), out);
  shallow2.collect_parameters(join_name(prefix, "shallow2"), out);
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect_parameters(join_name(prefix, "block" + std::to_string(i)), out);
    fusions[i].collect_parameters(join_name(prefix, "fusion" + std::to_string(i)), out);
  }
  tail.collect_parameters(join_name(prefix, "tail"), out);
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const std::string& path, const Model& model, const TrainingState& state) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + path);
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    write_u32(os, kCheckpointVersion);
    json header{{"config", model.config().to_json()},
                {"state", {{"iteration", state.iteration}, {"extra", state.extra}}},
                {"parameter_count", model.named_parameters().size()}};
    write_string(os, header.dump());
    TensorTable table;
    for (const auto& p : model.named_parameters()) table.emplace_back(p.name, p.tensor);
    for (const auto& t : state.tensors) table.push_back(t);
    write_tensor_table(os, table);
    os.flush();
    if (!os) throw Error("write failed: " + path);
  }
  // Replace atomically so a crash never leaves a truncated checkpoint behind.
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read checkpoint " + path);
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw Error("checkpoint " + path + ": bad header, expected magic RFCK");
  const uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) {
    throw Error("checkpoint " + path + ": format version " + std::to_string(version) + ", expected " +
                std::to_string(kCheckpointVersion));
  }
  json header;
  try {
    header = json::parse(read_string(is, 1 << 24));
  } catch (const json::exception& e) {
    throw Error("checkpoint " + path + ": corrupt header: " + e.what());
  }
  Checkpoint ck;
  ck.config = ModelConfig::from_json(header.at("config"));
  ck.state.iteration = header.at("state").at("iteration").get<int64_t>();
  ck.state.extra = header.at("state").at("extra");
  const auto n_params = header.at("parameter_count").get<size_t>();
  TensorTable all = read_tensor_table(is);
  if (all.size() < n_params) throw Error("checkpoint " + path + ": truncated tensor table");
  ck.parameters.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_params));
  ck.state.tensors.assign(all.begin() + static_cast<std::ptrdiff_t>(n_params), all.end());
  return ck;
}

void load_parameters(Model& model, const Checkpoint& ckpt) {
  const auto params = model.named_parameters();
  if (params.size() != ckpt.parameters.size()) {
    throw Error("checkpoint has " + std::to_string(ckpt.parameters.size()) + " parameter tensors, model expects " +
                std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.parameters[i];
    if (name != params[i].name) throw Error("checkpoint tensor " + name + " where model expects " + params[i].name);
    if (t.shape() != params[i].tensor.shape()) {
      throw Error("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                  shape_str(params[i].tensor.shape()));
    }
  }
  for (size_t i = 0; i < params.size(); ++i) copy_into(params[i].tensor, ckpt.parameters[i].second);
}

Model load_model(const std::string& path, Checkpoint* out) {
  Checkpoint ck = read_checkpoint(path);
  Model m(ck.config);
  load_parameters(m, ck);
  if (out) *out = std::move(ck);
  return m;
}

}  // namespace rainforge
