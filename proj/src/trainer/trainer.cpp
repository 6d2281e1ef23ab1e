#include "refuseg/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "refuseg/errors.hpp"
#include "refuseg/rng.hpp"

namespace refuseg::trainer {

namespace {

using nlohmann::ordered_json;

// Seed streams; each consumer derives its generator from (seed, stream, ...).
constexpr uint64_t kInitStream = 1;
constexpr uint64_t kShuffleStream = 2;
constexpr uint64_t kAugmentStream = 3;
constexpr uint64_t kDropoutStream = 4;

// Slices per forward pass during inference.
constexpr size_t kPredictChunk = 8;

}  // namespace

// --- configuration ---------------------------------------------------------------

void TrainConfig::validate() const {
  require(epochs >= 1, ErrorKind::configuration, "epochs must be at least 1");
  require(batch_size >= 1, ErrorKind::configuration, "batch_size must be at least 1");
  require(lr > 0.0 && std::isfinite(lr), ErrorKind::configuration, "lr must be positive");
  require(beta >= 0.0 && std::isfinite(beta), ErrorKind::configuration, "beta must be non-negative");
  require(beta == 0.0 || batch_size >= 2, ErrorKind::configuration,
          "contrastive training (beta > 0) needs batch_size >= 2");
  require(checkpoint_every >= 0 && eval_every >= 0, ErrorKind::configuration,
          "checkpoint_every and eval_every must be non-negative");
  require(modality_dropout_p >= 0.0 && modality_dropout_p <= 1.0, ErrorKind::configuration,
          "modality_dropout_p must lie in [0, 1]");
  require(val_cases >= 0, ErrorKind::configuration, "val_cases must be non-negative");
  require(max_steps >= 0, ErrorKind::configuration, "max_steps must be non-negative");
}

void RunConfig::validate() const {
  train.validate();
  weights().validate();
  focal.validate();
  auto a = augment;
  if (a.crop_size == 0) a.crop_size = 1;
  if (a.final_size == 0) a.final_size = 1;
  a.validate();
  auto m = model;
  m.input_height = m.input_width = m.spatial_divisor();
  m.validate();
}

bool RunConfig::operator==(const RunConfig& o) const {
  auto same_loss = loss.w_dice == o.loss.w_dice && loss.w_focal == o.loss.w_focal && loss.beta == o.loss.beta &&
                   loss.temperature == o.loss.temperature;
  auto same_focal =
      focal.alpha == o.focal.alpha && focal.gamma == o.focal.gamma && focal.clamp_eps == o.focal.clamp_eps;
  const auto &a = augment, &b = o.augment;
  auto same_aug = a.hflip_p == b.hflip_p && a.vflip_p == b.vflip_p && a.rotate_limit_deg == b.rotate_limit_deg &&
                  a.shift_limit == b.shift_limit && a.shift_rotate_p == b.shift_rotate_p &&
                  a.crop_size == b.crop_size && a.final_size == b.final_size && a.seed == b.seed;
  return train == o.train && model == o.model && same_loss && same_focal && same_aug;
}

loss::LossWeights RunConfig::weights() const {
  auto w = loss;
  w.beta = train.beta;
  return w;
}

data::AugmentConfig RunConfig::augment_for(int64_t height, int64_t width) const {
  auto a = augment;
  const int64_t extent = std::min(height, width);
  if (a.final_size == 0) a.final_size = extent;
  if (a.crop_size == 0) a.crop_size = std::max<int64_t>(1, std::llround(static_cast<double>(extent) * 224.0 / 240.0));
  return a;
}

// --- ledger ------------------------------------------------------------------------

std::string StepRecord::to_json() const {
  ordered_json j;
  j["type"] = "step";
  j["step"] = step;
  j["epoch"] = epoch;
  j["L_final"] = final_loss;
  j["L_dice"] = dice;
  j["L_focal"] = focal;
  j["L_c"] = contrastive;
  j["beta"] = beta;
  j["presence"] = presence.to_string();
  return j.dump();
}

std::string EvalRecord::to_json() const {
  auto j = ordered_json::parse(report.to_json());
  ordered_json out;
  out["type"] = "eval";
  out["epoch"] = epoch;
  out["split"] = split;
  for (auto& [k, v] : j.items()) out[k] = v;
  return out.dump();
}

RunLedger::RunLedger(const fs::path& path) : path_(path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorKind::io, "cannot create ledger " + path.string());
}

void RunLedger::append(const std::string& line) {
  if (!path_) return;
  std::ofstream f(*path_, std::ios::app);
  f << line << '\n';
  require(f.good(), ErrorKind::io, "failed writing ledger " + path_->string());
}

void RunLedger::log_step(const StepRecord& r) {
  steps_.push_back(r);
  append(r.to_json());
}

void RunLedger::log_eval(const EvalRecord& r) {
  evals_.push_back(r);
  append(r.to_json());
}

void RunLedger::log_abort(const StepRecord& r, const std::string& reason) {
  auto j = ordered_json::parse(r.to_json());
  j["type"] = "abort";
  j["reason"] = reason;
  append(j.dump());
}

namespace {

PresenceMask parse_presence(const std::string& text) {
  PresenceMask p{{false, false, false, false}};
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto m = parse_modality(item);
    require(m.has_value(), ErrorKind::data, "unknown modality '" + item + "'");
    p.present[index_of(*m)] = true;
  }
  return p;
}

}  // namespace

RunLedger RunLedger::read(const fs::path& path) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::io, "cannot open ledger " + path.string());
  RunLedger ledger;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "step") {
        StepRecord r;
        r.step = j.at("step").get<int64_t>();
        r.epoch = j.at("epoch").get<int64_t>();
        r.final_loss = j.at("L_final").get<double>();
        r.dice = j.at("L_dice").get<double>();
        r.focal = j.at("L_focal").get<double>();
        r.contrastive = j.at("L_c").get<double>();
        r.beta = j.at("beta").get<double>();
        r.presence = parse_presence(j.at("presence").get<std::string>());
        ledger.steps_.push_back(r);
      } else if (type == "eval") {
        EvalRecord r;
        r.epoch = j.at("epoch").get<int64_t>();
        r.split = j.at("split").get<std::string>();
        r.report = metrics::MetricsReport::from_json(line);
        ledger.evals_.push_back(r);
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::data, path.string() + ": malformed ledger line: " + e.what());
    }
  }
  return ledger;
}

// --- state and checkpoints --------------------------------------------------------

TrainState init_state(const RunConfig& cfg, int64_t height, int64_t width) {
  auto mc = cfg.model;
  mc.input_height = height;
  mc.input_width = width;
  TrainState s;
  s.model = model::build_model(mc, mix_seed(cfg.train.seed, kInitStream));
  s.adam.lr = cfg.train.lr;
  s.beta = cfg.train.beta;
  return s;
}

grad::TensorMap checkpoint_entries(const TrainState& state) {
  grad::TensorMap out;
  for (const auto& [name, t] : state.model.params) out[name] = grad::Tensor(t.shape, t.data);
  for (const auto& [name, m] : state.adam.m) {
    const auto& shape = state.model.params.at(name).shape;
    out["adam/m/" + name] = grad::Tensor(shape, m);
    out["adam/v/" + name] = grad::Tensor(shape, state.adam.v.at(name));
  }
  // Counters stay well below 2^24, where float holds integers exactly.
  require(state.step < (int64_t{1} << 24) && state.adam.step_count < (int64_t{1} << 24), ErrorKind::contract,
          "step counter too large for the checkpoint format");
  out["adam/step"] = grad::Tensor::scalar(static_cast<float>(state.adam.step_count));
  out["meta/step"] = grad::Tensor::scalar(static_cast<float>(state.step));
  out["meta/beta"] = grad::Tensor::scalar(static_cast<float>(state.beta));
  const auto& c = state.model.config;
  out["meta/model_config"] = grad::Tensor(
      {7}, {float(c.stages), float(c.base_width), float(c.blocks_per_stage), float(c.proj_dim), float(c.num_classes),
            float(c.input_height), float(c.input_width)});
  return out;
}

TrainState state_from_entries(const grad::TensorMap& entries) {
  auto get = [&](const std::string& name) -> const grad::Tensor& {
    auto it = entries.find(name);
    require(it != entries.end(), ErrorKind::incompatible_checkpoint, "checkpoint lacks entry " + name);
    return it->second;
  };
  const auto& mc = get("meta/model_config");
  require(mc.numel() == 7, ErrorKind::incompatible_checkpoint, "meta/model_config must hold 7 values");
  model::ModelConfig cfg;
  cfg.stages = int(mc.data[0]);
  cfg.base_width = int(mc.data[1]);
  cfg.blocks_per_stage = int(mc.data[2]);
  cfg.proj_dim = int(mc.data[3]);
  cfg.num_classes = int(mc.data[4]);
  cfg.input_height = int64_t(mc.data[5]);
  cfg.input_width = int64_t(mc.data[6]);
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::incompatible_checkpoint, "stored model config is invalid: " + e.message());
  }

  TrainState s;
  s.model = model::build_model(cfg, 0);
  for (auto& [name, t] : s.model.params) {
    const auto& stored = get(name);
    require(stored.shape == t.shape, ErrorKind::incompatible_checkpoint,
            name + " has shape " + grad::shape_string(stored.shape) + ", model expects " + grad::shape_string(t.shape));
    t.data = stored.data;
  }
  size_t expected = s.model.params.size() + 4;
  for (const auto& [name, t] : s.model.params) {
    auto m = entries.find("adam/m/" + name);
    if (m == entries.end()) continue;
    const auto& v = get("adam/v/" + name);
    require(m->second.shape == t.shape && v.shape == t.shape, ErrorKind::incompatible_checkpoint,
            "optimizer moments for " + name + " have the wrong shape");
    s.adam.m[name] = m->second.data;
    s.adam.v[name] = v.data;
    expected += 2;
  }
  require(entries.size() == expected, ErrorKind::incompatible_checkpoint,
          "checkpoint has " + std::to_string(entries.size() - std::min(entries.size(), expected)) +
              " unrecognized entries");
  s.adam.step_count = int64_t(get("adam/step").data.at(0));
  s.step = int64_t(get("meta/step").data.at(0));
  s.beta = get("meta/beta").data.at(0);
  return s;
}

void save_checkpoint(const fs::path& path, const TrainState& state) {
  model::write_checkpoint_file(path, checkpoint_entries(state));
}

TrainState load_checkpoint(const fs::path& path) {
  try {
    return state_from_entries(model::read_checkpoint_file(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::incompatible_checkpoint && e.message().find(path.string()) == std::string::npos)
      throw Error(e.kind(), path.string() + ": " + e.message());
    throw;
  }
}

// --- data ----------------------------------------------------------------------------

PreparedCase prepare_case(const fs::path& case_dir, const PresenceMask& presence, bool with_label) {
  const auto c = data::read_case(case_dir, presence, with_label);
  PreparedCase out;
  out.case_id = case_dir.filename().string();
  out.slices = data::extract_slices(c.modalities, c.label, presence);
  for (auto& s : out.slices)
    for (auto m : kModalities)
      if (presence[m]) s.slices[index_of(m)] = data::normalize(s.slices[index_of(m)]);
  return out;
}

PresenceMask step_presence(const TrainConfig& cfg, int64_t step) {
  PresenceMask p = PresenceMask::all();
  if (cfg.modality_dropout_p <= 0.0) return p;
  Rng rng(mix_seed(cfg.seed, kDropoutStream, static_cast<uint64_t>(step)));
  for (auto m : kModalities)
    if (rng.bernoulli(cfg.modality_dropout_p)) p = p.without(m);
  if (!p.any()) p = PresenceMask::only(kModalities[rng.below(4)]);
  return p;
}

PresenceMask presence_without(const std::set<Modality>& drop) {
  PresenceMask p = PresenceMask::all();
  for (auto m : drop) p = p.without(m);
  return p;
}

// --- inference -----------------------------------------------------------------------

std::vector<data::LabelMap> predict(model::Model& model, const std::vector<data::ModalityStack>& slices,
                                    const PresenceMask& presence) {
  require(presence.any(), ErrorKind::empty_fusion, "every modality was dropped");
  std::vector<data::LabelMap> out;
  for (size_t start = 0; start < slices.size(); start += kPredictChunk) {
    const size_t stop = std::min(slices.size(), start + kPredictChunk);
    std::vector<data::ModalityStack> chunk(slices.begin() + static_cast<std::ptrdiff_t>(start),
                                           slices.begin() + static_cast<std::ptrdiff_t>(stop));
    for (auto& s : chunk) s.presence = presence;
    std::vector<size_t> idx(chunk.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    const auto batch = data::collate(chunk, idx);
    model::FTape tape;
    const auto fwd = model::forward(tape, model, batch.images, presence, false, false);
    const auto& probs = fwd.probs.value();
    const int64_t C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    const size_t plane = static_cast<size_t>(H * W);
    for (size_t n = 0; n < chunk.size(); ++n) {
      auto labels = data::LabelMap::zeros(H, W);
      for (size_t i = 0; i < plane; ++i) {
        int64_t best = 0;
        for (int64_t c = 1; c < C; ++c)
          if (probs.data[(n * C + c) * plane + i] > probs.data[(n * C + best) * plane + i]) best = c;
        labels.labels[i] = static_cast<uint8_t>(best);
      }
      out.push_back(std::move(labels));
    }
  }
  return out;
}

std::vector<data::LabelMap> infer(model::Model& model, const fs::path& case_dir, const std::set<Modality>& drop) {
  const auto presence = presence_without(drop);
  require(presence.any(), ErrorKind::empty_fusion, "every modality was dropped; nothing left to fuse");
  return predict(model, prepare_case(case_dir, presence, false).slices, presence);
}

std::vector<data::LabelMap> infer(const fs::path& checkpoint, const fs::path& case_dir,
                                  const std::set<Modality>& drop) {
  require(presence_without(drop).any(), ErrorKind::empty_fusion, "every modality was dropped; nothing left to fuse");
  auto state = load_checkpoint(checkpoint);
  return infer(state.model, case_dir, drop);
}

void write_labels(const fs::path& path, const std::vector<data::LabelMap>& labels) {
  require(!labels.empty(), ErrorKind::precondition, "no label slices to write");
  const int64_t H = labels.front().height, W = labels.front().width;
  auto v = nifti::Volume::zeros({W, H, static_cast<int64_t>(labels.size())});
  const size_t plane = static_cast<size_t>(H * W);
  for (size_t z = 0; z < labels.size(); ++z) {
    require(labels[z].height == H && labels[z].width == W, ErrorKind::alignment, "label slices differ in extent");
    for (size_t i = 0; i < plane; ++i) v.voxels[z * plane + i] = labels[z].labels[i];
  }
  nifti::write_volume(v, path);
}

std::vector<data::LabelMap> read_labels(const fs::path& path) {
  const auto v = nifti::read_volume(path);
  const auto [X, Y, Z] = v.extents;
  const size_t plane = static_cast<size_t>(X * Y);
  std::vector<data::LabelMap> out;
  for (int64_t z = 0; z < Z; ++z) {
    auto l = data::LabelMap::zeros(Y, X);
    for (size_t i = 0; i < plane; ++i) {
      const float x = v.voxels[static_cast<size_t>(z) * plane + i];
      require(x >= 0.0f && x <= 3.0f && x == std::floor(x), ErrorKind::data,
              path.string() + ": label value " + std::to_string(x) + " outside {0,1,2,3}");
      l.labels[i] = static_cast<uint8_t>(x);
    }
    out.push_back(std::move(l));
  }
  return out;
}

// --- training ------------------------------------------------------------------------

namespace {

bool pair_complete(Modality m, const PresenceMask& presence) {
  for (const auto& [a, b] : loss::kContrastivePairs)
    if (a == m || b == m) return presence[a] && presence[b];
  return false;
}

std::vector<metrics::MetricsReport> evaluate_split(model::Model& model, const std::vector<PreparedCase>& cases,
                                                   double beta) {
  std::vector<metrics::MetricsReport> out;
  for (const auto& c : cases) {
    std::vector<data::LabelMap> gt;
    for (const auto& s : c.slices) gt.push_back(s.label);
    metrics::MetricsReport r;
    r.case_id = c.case_id;
    r.beta = beta;
    r.scores = metrics::evaluate_case(predict(model, c.slices, PresenceMask::all()), gt);
    out.push_back(r);
  }
  return out;
}

std::string format_double(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

TrainResult train(const fs::path& data_dir, const RunConfig& cfg, const fs::path& out_dir,
                  const std::optional<fs::path>& resume, std::ostream* log) {
  cfg.validate();
  const auto& tc = cfg.train;
  const auto dirs = data::list_cases(data_dir);
  require(dirs.size() > static_cast<size_t>(tc.val_cases), ErrorKind::configuration,
          "dataset has " + std::to_string(dirs.size()) + " cases, need more than val_cases = " +
              std::to_string(tc.val_cases));
  const size_t n_train = dirs.size() - static_cast<size_t>(tc.val_cases);

  std::vector<data::ModalityStack> pool;
  for (size_t i = 0; i < n_train; ++i) {
    auto c = prepare_case(dirs[i], PresenceMask::all());
    for (auto& s : c.slices) pool.push_back(std::move(s));
  }
  std::vector<PreparedCase> val;
  for (size_t i = n_train; i < dirs.size(); ++i) val.push_back(prepare_case(dirs[i], PresenceMask::all()));

  const int64_t H = pool.front().height(), W = pool.front().width();
  for (const auto& s : pool)
    require(s.height() == H && s.width() == W, ErrorKind::alignment, "training slices differ in extent");
  const auto aug = cfg.augment_for(H, W);
  const int64_t in_h = tc.augment ? aug.final_size : H, in_w = tc.augment ? aug.final_size : W;
  require((cfg.model.input_height == 0 || cfg.model.input_height == in_h) &&
              (cfg.model.input_width == 0 || cfg.model.input_width == in_w),
          ErrorKind::configuration,
          "configured input size " + std::to_string(cfg.model.input_height) + "x" +
              std::to_string(cfg.model.input_width) + " does not match the training input " + std::to_string(in_h) +
              "x" + std::to_string(in_w));

  TrainState state;
  if (resume) {
    state = load_checkpoint(*resume);
    auto expect = cfg.model;
    expect.input_height = in_h;
    expect.input_width = in_w;
    require(state.model.config == expect, ErrorKind::incompatible_checkpoint,
            resume->string() + ": model configuration differs from the run configuration");
    require(state.beta == static_cast<double>(static_cast<float>(tc.beta)), ErrorKind::incompatible_checkpoint,
            resume->string() + ": checkpoint was trained with a different beta");
    state.beta = tc.beta;
  } else {
    state = init_state(cfg, in_h, in_w);
  }
  state.adam.lr = tc.lr;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec, ErrorKind::io, "cannot create " + out_dir.string() + ": " + ec.message());
  TrainResult result;
  result.ledger = RunLedger(out_dir / "ledger.jsonl");

  const bool contrastive = tc.beta > 0.0;
  const auto weights = cfg.weights();
  const size_t batch_size = static_cast<size_t>(tc.batch_size);
  const auto steps_per_epoch =
      static_cast<int64_t>(data::batch_indices(pool.size(), batch_size, 0, contrastive).size());
  require(steps_per_epoch > 0, ErrorKind::configuration,
          "not enough training slices (" + std::to_string(pool.size()) + ") for one batch of " +
              std::to_string(tc.batch_size));
  int64_t total = steps_per_epoch * tc.epochs;
  if (tc.max_steps > 0) total = std::min(total, tc.max_steps);

  auto& model = state.model;
  std::vector<std::vector<size_t>> order;
  int64_t order_epoch = -1;
  for (int64_t step = state.step; step < total; ++step) {
    const int64_t epoch = step / steps_per_epoch, pos = step % steps_per_epoch;
    if (epoch != order_epoch) {
      order = data::batch_indices(pool.size(), batch_size, mix_seed(tc.seed, kShuffleStream, uint64_t(epoch)),
                                  contrastive);
      order_epoch = epoch;
    }
    const auto presence = step_presence(tc, step);

    std::vector<data::ModalityStack> items;
    for (size_t idx : order[static_cast<size_t>(pos)]) {
      auto s = pool[idx];
      s.presence = presence;
      if (tc.augment) {
        Rng rng(mix_seed(mix_seed(tc.seed, aug.seed), kAugmentStream, uint64_t(epoch), idx));
        const auto draw = data::sample_draw(aug, H, W, rng);
        s = data::augment(s, aug, draw);
      }
      items.push_back(std::move(s));
    }
    std::vector<size_t> all(items.size());
    std::iota(all.begin(), all.end(), size_t{0});
    const auto batch = data::collate(items, all);

    model::FTape tape;
    const auto fwd = model::forward(tape, model, batch.images, presence, true, contrastive);
    const auto target = tape.constant(data::onehot(batch.labels));
    const auto abort = [&](const StepRecord& rec, const std::string& detail) {
      result.ledger.log_abort(rec, "non-finite loss");
      throw Error(ErrorKind::non_finite_loss, "step " + std::to_string(step) + ": " + detail);
    };
    const auto& probs = fwd.probs.value().data;
    if (!std::all_of(probs.begin(), probs.end(), [](float v) { return std::isfinite(v); })) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      abort(StepRecord{step, epoch, nan, nan, nan, nan, tc.beta, presence}, "non-finite network output");
    }
    const auto br = loss::final_loss(fwd.probs, target, fwd.projections, presence, weights, cfg.focal);

    StepRecord rec{step, epoch, br.final_value, br.dice, br.focal, br.contrastive, tc.beta, presence};
    if (!std::isfinite(br.final_value) || !std::isfinite(br.dice) || !std::isfinite(br.focal) ||
        !std::isfinite(br.contrastive))
      abort(rec, "L_final=" + std::to_string(br.final_value) + " L_dice=" + std::to_string(br.dice) +
                     " L_focal=" + std::to_string(br.focal) + " L_c=" + std::to_string(br.contrastive));
    tape.backward(br.total);
    grad::adam_step(model.params, state.adam, [&](const std::string& name) {
      for (auto m : kModalities) {
        if (!model::belongs_to(name, m)) continue;
        if (!presence[m]) return false;
        if (name.starts_with(model::projection_prefix(m))) return contrastive && pair_complete(m, presence);
        return true;
      }
      return true;
    });
    grad::zero_grad(model.params);
    result.ledger.log_step(rec);
    state.step = step + 1;

    if (log && (state.step % 25 == 0 || state.step == total))
      *log << "step " << state.step << "/" << total << " epoch " << epoch << " L_final " << format_double(br.final_value)
           << " dice " << format_double(br.dice) << " focal " << format_double(br.focal) << " L_c "
           << format_double(br.contrastive) << "\n";
    if (tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0)
      save_checkpoint(out_dir / ("ckpt_" + std::to_string(state.step) + ".rfsg"), state);
    if (pos == steps_per_epoch - 1 && tc.eval_every > 0 && (epoch + 1) % tc.eval_every == 0 && !val.empty()) {
      double wt = 0.0;
      for (const auto& r : evaluate_split(model, val, tc.beta)) {
        result.ledger.log_eval({epoch, "val", r});
        wt += r.scores.dice[static_cast<size_t>(metrics::Region::wt)];
      }
      if (log) *log << "epoch " << epoch << " val WT dice " << format_double(wt / double(val.size())) << "\n";
    }
  }

  result.final_checkpoint = out_dir / "final.rfsg";
  save_checkpoint(result.final_checkpoint, state);
  result.state = std::move(state);
  return result;
}

// --- drop-modality matrix -------------------------------------------------------------

std::vector<std::optional<Modality>> matrix_configurations() {
  return {std::nullopt, Modality::t1, Modality::t1c, Modality::t2, Modality::flair};
}

MatrixResult drop_modality_matrix(model::Model& model, double beta, const std::vector<fs::path>& case_dirs) {
  require(!case_dirs.empty(), ErrorKind::precondition, "no cases to evaluate");
  std::vector<PreparedCase> cases;
  for (const auto& d : case_dirs) cases.push_back(prepare_case(d, PresenceMask::all()));
  MatrixResult out;
  out.beta = beta;
  for (const auto& dropped : matrix_configurations()) {
    const auto presence = dropped ? PresenceMask::all().without(*dropped) : PresenceMask::all();
    metrics::MetricsReport mean;
    mean.case_id = "mean";
    mean.dropped_modality = dropped;
    mean.beta = beta;
    for (const auto& c : cases) {
      std::vector<data::LabelMap> gt;
      for (const auto& s : c.slices) gt.push_back(s.label);
      metrics::MetricsReport r;
      r.case_id = c.case_id;
      r.dropped_modality = dropped;
      r.beta = beta;
      r.scores = metrics::evaluate_case(predict(model, c.slices, presence), gt);
      for (size_t k = 0; k < 3; ++k) {
        mean.scores.dice[k] += r.scores.dice[k] / double(cases.size());
        mean.scores.hd95[k] += r.scores.hd95[k] / double(cases.size());
      }
      out.cases.push_back(r);
    }
    out.means.push_back(mean);
  }
  return out;
}

MatrixResult drop_modality_matrix(const fs::path& checkpoint, const fs::path& data_dir) {
  auto state = load_checkpoint(checkpoint);
  return drop_modality_matrix(state.model, state.beta, data::list_cases(data_dir));
}

void write_report(const fs::path& path, const MatrixResult& result) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorKind::io, "cannot open " + path.string() + " for writing");
  for (const auto& r : result.cases) f << r.to_json() << '\n';
  for (const auto& r : result.means) f << r.to_json() << '\n';
  require(f.good(), ErrorKind::io, "failed writing " + path.string());
}

MatrixResult read_report(const fs::path& path) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::io, "cannot open " + path.string());
  MatrixResult out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto r = metrics::MetricsReport::from_json(line);
    out.beta = r.beta;
    (r.case_id == "mean" ? out.means : out.cases).push_back(std::move(r));
  }
  require(out.means.size() == matrix_configurations().size(), ErrorKind::data,
          path.string() + ": expected " + std::to_string(matrix_configurations().size()) + " mean rows, found " +
              std::to_string(out.means.size()));
  return out;
}

std::string comparison_table(const MatrixResult& without, const MatrixResult& with) {
  require(without.means.size() == 5 && with.means.size() == 5, ErrorKind::precondition,
          "comparison needs five configuration rows per run");
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-12s %8s %8s %8s %9s %9s %9s\n", "modality dropped", "contrastive",
                "Dice ET", "Dice TC", "Dice WT", "HD95 ET", "HD95 TC", "HD95 WT");
  os << line;
  for (size_t k = 0; k < 5; ++k) {
    const auto& cfg = without.means[k].dropped_modality;
    const std::string name = cfg ? std::string(name_of(*cfg)) : "none";
    for (const auto* run : {&without, &with}) {
      const auto& s = run->means[k].scores;
      std::snprintf(line, sizeof line, "%-16s %-12s %8.4f %8.4f %8.4f %9.3f %9.3f %9.3f\n", name.c_str(),
                    run == &without ? "no" : "yes", s.dice[0], s.dice[1], s.dice[2], s.hd95[0], s.hd95[1],
                    s.hd95[2]);
      os << line;
    }
  }
  auto mean_drop = [](const MatrixResult& r) {
    double d = 0.0;
    for (size_t k = 1; k < 5; ++k) d += r.means[0].scores.dice[2] - r.means[k].scores.dice[2];
    return d / 4.0;
  };
  std::snprintf(line, sizeof line, "mean WT Dice loss from one dropped modality: beta=%g %.4f, beta=%g %.4f\n",
                without.beta, mean_drop(without), with.beta, mean_drop(with));
  os << line;
  return os.str();
}

}  // namespace refuseg::trainer
