#include "refuseg/model/model.hpp"

#include <cmath>

#include "refuseg/errors.hpp"
#include "refuseg/rng.hpp"

namespace refuseg::model {

namespace g = refuseg::grad;

void ModelConfig::validate() const {
  require(stages >= 2, ErrorKind::configuration, "stages must be at least 2");
  require(stages <= 8, ErrorKind::configuration, "stages must be at most 8");
  require(base_width >= 4, ErrorKind::configuration, "base_width must be at least 4");
  require(blocks_per_stage >= 1, ErrorKind::configuration, "blocks_per_stage must be at least 1");
  require(proj_dim >= 2, ErrorKind::configuration, "proj_dim must be at least 2");
  require(num_classes >= 2, ErrorKind::configuration, "num_classes must be at least 2");
  require(input_height > 0 && input_width > 0, ErrorKind::configuration, "input size must be positive");
  require(input_height % spatial_divisor() == 0 && input_width % spatial_divisor() == 0,
          ErrorKind::configuration,
          "input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
              " is not divisible by " + std::to_string(spatial_divisor()));
}

Tensor& Model::at(const std::string& name) {
  auto it = params.find(name);
  require(it != params.end(), ErrorKind::contract, "model has no tensor named " + name);
  return it->second;
}

int64_t Model::trainable_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params)
    if (t.requires_grad) n += t.numel();
  return n;
}

std::string encoder_prefix(Modality m) { return "enc." + std::string(name_of(m)) + "."; }
std::string projection_prefix(Modality m) { return "proj." + std::string(name_of(m)) + "."; }

bool belongs_to(const std::string& name, Modality m) {
  return name.starts_with(encoder_prefix(m)) || name.starts_with(projection_prefix(m));
}

namespace {

uint64_t name_hash(const std::string& name) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Builder {
 public:
  Builder(TensorMap& params, uint64_t seed) : params_(params), seed_(seed) {}

  void conv(const std::string& name, int64_t cin, int64_t cout, int64_t k) {
    weight(name + ".w", {cout, cin, k, k}, cin * k * k);
    trainable(name + ".b", Tensor::zeros({cout}));
  }
  void linear(const std::string& name, int64_t din, int64_t dout) {
    weight(name + ".w", {dout, din}, din);
    trainable(name + ".b", Tensor::zeros({dout}));
  }
  void norm(const std::string& name, int64_t channels) {
    trainable(name + ".gamma", Tensor::full({channels}, 1.0f));
    trainable(name + ".shift", Tensor::zeros({channels}));
    params_[name + ".running_mean"] = Tensor::zeros({channels});
    params_[name + ".running_var"] = Tensor::full({channels}, 1.0f);
  }

 private:
  // He fan-in normal; each tensor draws from its own stream keyed by name.
  void weight(const std::string& name, g::Shape shape, int64_t fan_in) {
    Rng rng(mix_seed(seed_, name_hash(name)));
    Tensor t = Tensor::zeros(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, sd));
    trainable(name, std::move(t));
  }
  void trainable(const std::string& name, Tensor t) {
    t.requires_grad = true;
    params_[name] = std::move(t);
  }

  TensorMap& params_;
  uint64_t seed_;
};

std::string block_name(const std::string& prefix, int stage, int block) {
  return prefix + "s" + std::to_string(stage) + ".b" + std::to_string(block);
}

FVar param(FTape& tape, Model& model, const std::string& name) { return tape.parameter(model.at(name)); }

FVar conv(FTape& tape, Model& model, const std::string& name, FVar x, int padding) {
  return g::conv2d(x, param(tape, model, name + ".w"), param(tape, model, name + ".b"), 1, padding);
}

FVar norm(FTape& tape, Model& model, const std::string& name, FVar x, bool training) {
  g::BatchNormOptions opt;
  opt.training = training;
  return g::batchnorm(x, param(tape, model, name + ".gamma"), param(tape, model, name + ".shift"),
                      model.at(name + ".running_mean"), model.at(name + ".running_var"), opt);
}

FVar conv_norm_relu(FTape& tape, Model& model, const std::string& name, FVar x, bool training) {
  return g::relu(norm(tape, model, name + ".bn", conv(tape, model, name + ".conv", x, 1), training));
}

// Basic residual block; the first block of a deeper stage halves the extent
// with a 2x2 max-pool and projects the shortcut with a 1x1 conv.
FVar residual_block(FTape& tape, Model& model, const std::string& name, FVar x, bool downsample,
                    bool project, bool training) {
  if (downsample) x = g::maxpool2d(x);
  FVar h = g::relu(norm(tape, model, name + ".bn1", conv(tape, model, name + ".conv1", x, 1), training));
  h = norm(tape, model, name + ".bn2", conv(tape, model, name + ".conv2", h, 1), training);
  FVar shortcut = x;
  if (project)
    shortcut = norm(tape, model, name + ".down.bn", conv(tape, model, name + ".down.conv", x, 0), training);
  return g::relu(g::add(h, shortcut));
}

void check_extent(const ModelConfig& cfg, const g::Shape& shape, const char* what) {
  require(shape.size() == 4, ErrorKind::dimension,
          std::string(what) + " must be [N,C,H,W], got " + g::shape_string(shape));
  const int64_t d = cfg.spatial_divisor();
  require(shape[2] % d == 0 && shape[3] % d == 0, ErrorKind::configuration,
          std::string(what) + " extent " + std::to_string(shape[2]) + "x" + std::to_string(shape[3]) +
              " is not divisible by 2^(stages-1) = " + std::to_string(d));
}

}  // namespace

Model build_model(const ModelConfig& cfg, uint64_t init_seed) {
  cfg.validate();
  Model model;
  model.config = cfg;
  Builder b(model.params, init_seed);
  for (auto m : kModalities) {
    const auto enc = encoder_prefix(m);
    b.conv(enc + "stem.conv", 1, cfg.width(1), 3);
    b.norm(enc + "stem.bn", cfg.width(1));
    for (int s = 1; s <= cfg.stages; ++s)
      for (int k = 0; k < cfg.blocks_per_stage; ++k) {
        const auto name = block_name(enc, s, k);
        const int64_t cout = cfg.width(s);
        const int64_t cin = (k == 0 && s > 1) ? cfg.width(s - 1) : cout;
        b.conv(name + ".conv1", cin, cout, 3);
        b.norm(name + ".bn1", cout);
        b.conv(name + ".conv2", cout, cout, 3);
        b.norm(name + ".bn2", cout);
        if (cin != cout) {
          b.conv(name + ".down.conv", cin, cout, 1);
          b.norm(name + ".down.bn", cout);
        }
      }
    const auto proj = projection_prefix(m);
    b.linear(proj + "fc1", cfg.width(cfg.stages), cfg.proj_dim);
    b.norm(proj + "bn1", cfg.proj_dim);
    b.linear(proj + "fc2", cfg.proj_dim, cfg.proj_dim);
    b.norm(proj + "bn2", cfg.proj_dim);
  }
  for (int l = cfg.stages - 1; l >= 1; --l) {
    const auto name = "dec.l" + std::to_string(l);
    b.conv(name + ".c1.conv", cfg.width(l + 1) + cfg.width(l), cfg.width(l), 3);
    b.norm(name + ".c1.bn", cfg.width(l));
    b.conv(name + ".c2.conv", cfg.width(l), cfg.width(l), 3);
    b.norm(name + ".c2.bn", cfg.width(l));
  }
  b.conv("dec.head", cfg.width(1), cfg.num_classes, 1);
  return model;
}

std::vector<FVar> encode_modality(FTape& tape, Model& model, Modality m, FVar x, bool training) {
  const auto& cfg = model.config;
  check_extent(cfg, x.shape(), "encoder input");
  require(x.dim(1) == 1, ErrorKind::dimension,
          "encoder input must have one channel, got " + g::shape_string(x.shape()));
  const auto enc = encoder_prefix(m);
  FVar h = conv_norm_relu(tape, model, enc + "stem", x, training);
  std::vector<FVar> levels;
  for (int s = 1; s <= cfg.stages; ++s) {
    for (int k = 0; k < cfg.blocks_per_stage; ++k) {
      const bool first_deep = k == 0 && s > 1;
      h = residual_block(tape, model, block_name(enc, s, k), h, first_deep, first_deep, training);
    }
    levels.push_back(h);
  }
  return levels;
}

std::vector<FVar> fuse_levels(const PerModality<std::vector<FVar>>& features, const PresenceMask& presence) {
  require(presence.any(), ErrorKind::empty_fusion, "no modality present to fuse");
  size_t depth = 0;
  bool first = true;
  for (auto m : kModalities) {
    if (!presence[m]) continue;
    const auto& f = features[index_of(m)];
    if (first) depth = f.size();
    require(f.size() == depth && depth > 0, ErrorKind::dimension,
            std::string(name_of(m)) + " supplies " + std::to_string(f.size()) + " levels, expected " +
                std::to_string(depth));
    first = false;
  }
  std::vector<FVar> fused;
  for (size_t l = 0; l < depth; ++l) {
    std::vector<FVar> inputs;
    for (auto m : kModalities)
      if (presence[m]) inputs.push_back(features[index_of(m)][l]);
    fused.push_back(inputs.size() == 1 ? inputs.front() : g::elemwise_max_n<float>(inputs));
  }
  return fused;
}

FVar project_contrastive(FTape& tape, Model& model, Modality m, FVar deepest, bool training) {
  const auto& cfg = model.config;
  require(deepest.shape().size() == 4 && deepest.dim(1) == cfg.width(cfg.stages), ErrorKind::dimension,
          "projection head expects the deepest stage output with " + std::to_string(cfg.width(cfg.stages)) +
              " channels, got " + g::shape_string(deepest.shape()));
  const auto p = projection_prefix(m);
  FVar h = g::global_avgpool(deepest);
  h = g::linear(h, param(tape, model, p + "fc1.w"), param(tape, model, p + "fc1.b"));
  h = norm(tape, model, p + "bn1", h, training);
  h = g::linear(h, param(tape, model, p + "fc2.w"), param(tape, model, p + "fc2.b"));
  return norm(tape, model, p + "bn2", h, training);
}

FVar decode(FTape& tape, Model& model, const std::vector<FVar>& fused, bool training) {
  const auto& cfg = model.config;
  require(fused.size() == static_cast<size_t>(cfg.stages), ErrorKind::dimension,
          "decoder expects " + std::to_string(cfg.stages) + " fused levels, got " + std::to_string(fused.size()));
  FVar h = fused.back();
  for (int l = cfg.stages - 1; l >= 1; --l) {
    const FVar up = g::upsample_nearest2x(h);
    const FVar& skip = fused[static_cast<size_t>(l - 1)];
    const auto &us = up.shape(), &ss = skip.shape();
    require(us.size() == 4 && ss.size() == 4 && us[0] == ss[0] && us[2] == ss[2] && us[3] == ss[3] &&
                ss[1] == cfg.width(l) && us[1] == cfg.width(l + 1),
            ErrorKind::dimension,
            "skip junction at level " + std::to_string(l) + ": upsampled " + g::shape_string(us) +
                " does not match skip " + g::shape_string(ss));
    const std::vector<FVar> parts{up, skip};
    h = g::concat_channels<float>(parts);
    const auto name = "dec.l" + std::to_string(l);
    h = conv_norm_relu(tape, model, name + ".c1", h, training);
    h = conv_norm_relu(tape, model, name + ".c2", h, training);
  }
  return conv(tape, model, "dec.head", h, 0);
}

ForwardResult forward(FTape& tape, Model& model, const PerModality<Tensor>& images, const PresenceMask& presence,
                      bool training, bool with_projections) {
  require(presence.any(), ErrorKind::empty_fusion, "all modalities are absent");
  g::Shape shape;
  for (auto m : kModalities) {
    if (!presence[m]) continue;
    const auto& s = images[index_of(m)].shape;
    if (shape.empty()) shape = s;
    require(s == shape, ErrorKind::alignment,
            std::string(name_of(m)) + " input " + g::shape_string(s) + " differs from " + g::shape_string(shape));
  }
  PerModality<std::vector<FVar>> features;
  for (auto m : kModalities)
    if (presence[m])
      features[index_of(m)] = encode_modality(tape, model, m, tape.constant(images[index_of(m)]), training);

  ForwardResult out;
  out.fused = fuse_levels(features, presence);
  out.logits = decode(tape, model, out.fused, training);
  out.probs = g::softmax_channels(out.logits);
  if (with_projections)
    for (auto m : kModalities)
      if (presence[m])
        out.projections[index_of(m)] = project_contrastive(tape, model, m, features[index_of(m)].back(), training);
  return out;
}

}  // namespace refuseg::model
