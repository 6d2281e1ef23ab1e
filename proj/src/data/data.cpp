#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "refuseg/data/data.hpp"
#include "refuseg/errors.hpp"

namespace refuseg::data {

namespace fs = std::filesystem;

LabelMap LabelMap::zeros(int64_t height, int64_t width) {
  return {height, width, std::vector<uint8_t>(static_cast<size_t>(height * width), 0)};
}

void ModalityStack::validate() const {
  require(presence.any(), ErrorKind::precondition, "modality stack has no present modality");
  require(label.height > 0 && label.width > 0 &&
              label.labels.size() == static_cast<size_t>(label.height * label.width),
          ErrorKind::dimension, "label map extents do not match its data");
  for (auto m : kModalities) {
    if (!presence[m]) continue;
    const auto& s = slices[index_of(m)];
    require(s.shape == grad::Shape{1, label.height, label.width}, ErrorKind::alignment,
            std::string(name_of(m)) + " slice " + grad::shape_string(s.shape) +
                " does not match label " + std::to_string(label.height) + "x" +
                std::to_string(label.width));
  }
}

std::vector<ModalityStack> extract_slices(const PerModality<Volume>& modalities, const Volume& labels,
                                          const PresenceMask& presence) {
  require(presence.any(), ErrorKind::precondition, "no modality present");
  const auto extent = labels.extents;
  for (auto m : kModalities) {
    if (!presence[m]) continue;
    require(modalities[index_of(m)].extents == extent, ErrorKind::alignment,
            std::string(name_of(m)) + " volume extents differ from the label volume");
  }
  const auto [X, Y, Z] = extent;
  const size_t plane = static_cast<size_t>(X * Y);
  std::vector<ModalityStack> out;
  out.reserve(static_cast<size_t>(Z));
  for (int64_t z = 0; z < Z; ++z) {
    ModalityStack s;
    s.z = z;
    s.presence = presence;
    s.label = LabelMap::zeros(Y, X);
    const size_t base = plane * static_cast<size_t>(z);
    for (size_t i = 0; i < plane; ++i) {
      const float v = labels.voxels[base + i];
      require(v >= 0.0f && v <= 3.0f && v == std::floor(v), ErrorKind::data,
              "label value " + std::to_string(v) + " outside {0,1,2,3}");
      s.label.labels[i] = static_cast<uint8_t>(v);
    }
    for (auto m : kModalities) {
      auto& slice = s.slices[index_of(m)];
      if (!presence[m]) {
        slice = Tensor::zeros({1, Y, X});
        continue;
      }
      const auto& src = modalities[index_of(m)].voxels;
      slice = Tensor({1, Y, X}, std::vector<float>(src.begin() + base, src.begin() + base + plane));
    }
    out.push_back(std::move(s));
  }
  return out;
}

Tensor normalize(const Tensor& slice) {
  require(slice.numel() > 0, ErrorKind::precondition, "cannot normalize an empty slice");
  double sum = 0.0;
  int64_t count = 0;
  for (float v : slice.data)
    if (v != 0.0f) {
      sum += v;
      ++count;
    }
  Tensor out = Tensor::zeros(slice.shape);
  if (count == 0) return out;
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (float v : slice.data)
    if (v != 0.0f) ss += (v - mean) * (v - mean);
  double sigma = std::sqrt(ss / static_cast<double>(count));
  if (sigma == 0.0) sigma = 1.0;
  for (size_t i = 0; i < slice.data.size(); ++i)
    if (slice.data[i] != 0.0f) out.data[i] = static_cast<float>((slice.data[i] - mean) / sigma);
  return out;
}

// --- augmentation ------------------------------------------------------------

void AugmentConfig::validate() const {
  for (double p : {hflip_p, vflip_p, shift_rotate_p})
    require(p >= 0.0 && p <= 1.0, ErrorKind::configuration,
            "augmentation probability " + std::to_string(p) + " outside [0,1]");
  require(rotate_limit_deg >= 0.0 && shift_limit >= 0.0, ErrorKind::configuration,
          "rotation and shift limits must be non-negative");
  require(crop_size >= 1 && final_size >= 1, ErrorKind::configuration,
          "crop_size and final_size must be positive");
}

RandomDraw sample_draw(const AugmentConfig& cfg, int64_t height, int64_t width, Rng& rng) {
  cfg.validate();
  require(cfg.crop_size <= height && cfg.crop_size <= width, ErrorKind::precondition,
          "crop size " + std::to_string(cfg.crop_size) + " larger than input " +
              std::to_string(height) + "x" + std::to_string(width));
  RandomDraw d;
  d.hflip = rng.bernoulli(cfg.hflip_p);
  d.vflip = rng.bernoulli(cfg.vflip_p);
  d.shift_rotate = rng.bernoulli(cfg.shift_rotate_p);
  d.angle_deg = rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg);
  d.shift_x = rng.uniform(-cfg.shift_limit, cfg.shift_limit);
  d.shift_y = rng.uniform(-cfg.shift_limit, cfg.shift_limit);
  d.crop_x = static_cast<int64_t>(rng.below(static_cast<uint64_t>(width - cfg.crop_size + 1)));
  d.crop_y = static_cast<int64_t>(rng.below(static_cast<uint64_t>(height - cfg.crop_size + 1)));
  return d;
}

SampleGrid build_grid(int64_t height, int64_t width, const AugmentConfig& cfg, const RandomDraw& draw) {
  cfg.validate();
  require(cfg.crop_size <= height && cfg.crop_size <= width, ErrorKind::precondition,
          "crop size " + std::to_string(cfg.crop_size) + " larger than input " +
              std::to_string(height) + "x" + std::to_string(width));
  require(draw.crop_x >= 0 && draw.crop_y >= 0 && draw.crop_x + cfg.crop_size <= width &&
              draw.crop_y + cfg.crop_size <= height,
          ErrorKind::precondition, "crop window outside the input");

  const int64_t n = cfg.final_size;
  SampleGrid g;
  g.height = n;
  g.width = n;
  g.src_x.resize(static_cast<size_t>(n * n));
  g.src_y.resize(static_cast<size_t>(n * n));

  const double scale = static_cast<double>(cfg.crop_size) / static_cast<double>(n);
  const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
  const double theta = draw.shift_rotate ? draw.angle_deg * std::numbers::pi / 180.0 : 0.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double tx = draw.shift_rotate ? draw.shift_x * width : 0.0;
  const double ty = draw.shift_rotate ? draw.shift_y * height : 0.0;

  for (int64_t oy = 0; oy < n; ++oy)
    for (int64_t ox = 0; ox < n; ++ox) {
      // Undo resize (pixel-centre aligned), then crop.
      double x = (ox + 0.5) * scale - 0.5 + draw.crop_x;
      double y = (oy + 0.5) * scale - 0.5 + draw.crop_y;
      // Undo rotate+shift about the image centre.
      if (draw.shift_rotate) {
        const double dx = x - cx - tx, dy = y - cy - ty;
        x = c * dx + s * dy + cx;
        y = -s * dx + c * dy + cy;
      }
      // Undo flips.
      if (draw.hflip) x = (width - 1) - x;
      if (draw.vflip) y = (height - 1) - y;
      const size_t i = static_cast<size_t>(oy * n + ox);
      g.src_x[i] = x;
      g.src_y[i] = y;
    }
  return g;
}

namespace {

// Snaps coordinates within 1e-9 of an integer so exact geometries stay exact.
double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

Tensor sample_bilinear(const Tensor& img, int64_t height, int64_t width, const SampleGrid& g) {
  Tensor out = Tensor::zeros({1, g.height, g.width});
  auto pixel = [&](int64_t y, int64_t x) -> double {
    if (x < 0 || y < 0 || x >= width || y >= height) return 0.0;
    return img.data[static_cast<size_t>(y * width + x)];
  };
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double x = snap(g.src_x[i]), y = snap(g.src_y[i]);
    const double fx = std::floor(x), fy = std::floor(y);
    const double ax = x - fx, ay = y - fy;
    const auto x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
    double v = (1 - ax) * (1 - ay) * pixel(y0, x0);
    if (ax > 0) v += ax * (1 - ay) * pixel(y0, x0 + 1);
    if (ay > 0) v += (1 - ax) * ay * pixel(y0 + 1, x0);
    if (ax > 0 && ay > 0) v += ax * ay * pixel(y0 + 1, x0 + 1);
    out.data[i] = static_cast<float>(v);
  }
  return out;
}

LabelMap sample_nearest(const LabelMap& label, const SampleGrid& g) {
  LabelMap out = LabelMap::zeros(g.height, g.width);
  for (size_t i = 0; i < out.labels.size(); ++i) {
    const auto x = static_cast<int64_t>(std::floor(snap(g.src_x[i]) + 0.5));
    const auto y = static_cast<int64_t>(std::floor(snap(g.src_y[i]) + 0.5));
    if (x < 0 || y < 0 || x >= label.width || y >= label.height) continue;
    out.labels[i] = label.at(y, x);
  }
  return out;
}

}  // namespace

ModalityStack augment(const ModalityStack& stack, const AugmentConfig& cfg, const RandomDraw& draw) {
  stack.validate();
  const SampleGrid grid = build_grid(stack.height(), stack.width(), cfg, draw);
  ModalityStack out;
  out.z = stack.z;
  out.presence = stack.presence;
  out.label = sample_nearest(stack.label, grid);
  for (auto m : kModalities) {
    auto& dst = out.slices[index_of(m)];
    if (stack.presence[m])
      dst = sample_bilinear(stack.slices[index_of(m)], stack.height(), stack.width(), grid);
    else
      dst = Tensor::zeros({1, grid.height, grid.width});
  }
  return out;
}

// --- batching ----------------------------------------------------------------

std::vector<std::vector<size_t>> batch_indices(size_t count, size_t batch_size, uint64_t shuffle_seed,
                                               bool contrastive) {
  require(batch_size >= 1, ErrorKind::configuration, "batch size must be positive");
  require(!contrastive || batch_size >= 2, ErrorKind::configuration,
          "contrastive training needs a batch size of at least 2");
  std::vector<size_t> order(count);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(shuffle_seed);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<size_t>> out;
  for (size_t start = 0; start < count; start += batch_size) {
    const size_t stop = std::min(count, start + batch_size);
    if (contrastive && stop - start < batch_size) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return out;
}

Batch collate(const std::vector<ModalityStack>& stacks, const std::vector<size_t>& indices) {
  require(!indices.empty(), ErrorKind::precondition, "cannot collate an empty batch");
  const auto& first = stacks.at(indices.front());
  const int64_t H = first.height(), W = first.width();
  const auto N = static_cast<int64_t>(indices.size());
  Batch b;
  b.presence = first.presence;
  for (auto& img : b.images) img = Tensor::zeros({N, 1, H, W});
  const size_t plane = static_cast<size_t>(H * W);
  for (size_t k = 0; k < indices.size(); ++k) {
    const auto& s = stacks.at(indices[k]);
    s.validate();
    require(s.height() == H && s.width() == W, ErrorKind::alignment,
            "stacks in one batch must share extents");
    require(s.presence == b.presence, ErrorKind::alignment,
            "stacks in one batch must share a presence mask");
    for (auto m : kModalities) {
      if (!b.presence[m]) continue;
      const auto& src = s.slices[index_of(m)].data;
      std::copy(src.begin(), src.end(), b.images[index_of(m)].data.begin() + k * plane);
    }
    b.labels.push_back(s.label);
  }
  return b;
}

std::vector<Batch> make_batches(const std::vector<ModalityStack>& stacks, size_t batch_size,
                                uint64_t shuffle_seed, bool contrastive) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(stacks.size(), batch_size, shuffle_seed, contrastive))
    out.push_back(collate(stacks, idx));
  return out;
}

Tensor onehot(const std::vector<LabelMap>& labels) {
  require(!labels.empty(), ErrorKind::precondition, "no labels to encode");
  const int64_t H = labels.front().height, W = labels.front().width;
  const auto N = static_cast<int64_t>(labels.size());
  Tensor out = Tensor::zeros({N, kNumClasses, H, W});
  const size_t plane = static_cast<size_t>(H * W);
  for (size_t n = 0; n < labels.size(); ++n) {
    require(labels[n].height == H && labels[n].width == W, ErrorKind::alignment,
            "label maps in one batch must share extents");
    for (size_t i = 0; i < plane; ++i) {
      const uint8_t c = labels[n].labels[i];
      require(c < kNumClasses, ErrorKind::data, "label " + std::to_string(c) + " out of range");
      out.data[(n * kNumClasses + c) * plane + i] = 1.0f;
    }
  }
  return out;
}

// --- on-disk layout ----------------------------------------------------------

fs::path modality_file(const fs::path& case_dir, Modality m) {
  return case_dir / (std::string(name_of(m)) + ".nii");
}

fs::path label_file(const fs::path& case_dir) { return case_dir / "seg.nii"; }

void write_case(const fs::path& case_dir, const PhantomCase& c) {
  std::error_code ec;
  fs::create_directories(case_dir, ec);
  require(!ec, ErrorKind::io, "cannot create " + case_dir.string() + ": " + ec.message());
  for (auto m : kModalities) nifti::write_volume(c.modalities[index_of(m)], modality_file(case_dir, m));
  nifti::write_volume(c.label, label_file(case_dir));
}

PhantomCase read_case(const fs::path& case_dir, const PresenceMask& presence, bool with_label) {
  require(presence.any(), ErrorKind::precondition, "no modality requested");
  PhantomCase c;
  std::array<int64_t, 3> extent{0, 0, 0};
  bool have_extent = false;
  auto check_extent = [&](const Volume& v, const std::string& what) {
    if (!have_extent) {
      extent = v.extents;
      have_extent = true;
      return;
    }
    require(v.extents == extent, ErrorKind::alignment,
            case_dir.string() + ": " + what + " extents differ from the other volumes");
  };
  for (auto m : kModalities) {
    if (!presence[m]) continue;
    c.modalities[index_of(m)] = nifti::read_volume(modality_file(case_dir, m));
    check_extent(c.modalities[index_of(m)], std::string(name_of(m)));
  }
  if (with_label) {
    c.label = nifti::read_volume(label_file(case_dir));
    check_extent(c.label, "seg");
  } else {
    c.label = Volume::zeros(extent);
  }
  for (auto m : kModalities)
    if (!presence[m]) c.modalities[index_of(m)] = Volume::zeros(extent);
  return c;
}

std::vector<fs::path> list_cases(const fs::path& data_dir) {
  std::error_code ec;
  require(fs::is_directory(data_dir, ec), ErrorKind::io, data_dir.string() + " is not a directory");
  std::vector<fs::path> out;
  auto is_case = [](const fs::path& dir) {
    if (fs::exists(label_file(dir))) return true;
    for (auto m : kModalities)
      if (fs::exists(modality_file(dir, m))) return true;
    return false;
  };
  for (const auto& entry : fs::directory_iterator(data_dir))
    if (entry.is_directory() && is_case(entry.path())) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

void generate_dataset(const fs::path& out_dir, int count, std::array<int64_t, 3> extent, uint64_t seed) {
  require(count >= 1, ErrorKind::configuration, "case count must be positive");
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "case_%04d", i);
    write_case(out_dir / name, generate_phantom(mix_seed(seed, static_cast<uint64_t>(i)), extent));
  }
}

}  // namespace refuseg::data
