#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "refuseg/gradcore/tensor.hpp"
#include "refuseg/modality.hpp"
#include "refuseg/nifti/nifti.hpp"
#include "refuseg/rng.hpp"

namespace refuseg::data {

using grad::Tensor;
using nifti::Volume;

inline constexpr int kNumClasses = 4;

// Per-pixel classes: 0 background, 1 necrotic core, 2 edema, 3 enhancing tumour.
struct LabelMap {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> labels;

  static LabelMap zeros(int64_t height, int64_t width);
  uint8_t at(int64_t y, int64_t x) const { return labels[static_cast<size_t>(y * width + x)]; }
  bool operator==(const LabelMap&) const = default;
};

// One axial slice of a case: four single-channel [1,H,W] images and the labels.
struct ModalityStack {
  PerModality<Tensor> slices;
  PresenceMask presence;
  LabelMap label;
  int64_t z = 0;

  int64_t height() const { return label.height; }
  int64_t width() const { return label.width; }
  void validate() const;
};

struct PhantomCase {
  PerModality<Volume> modalities;
  Volume label;
};

// Deterministic synthetic case: a brain ellipsoid holding nested tumour
// ellipsoids (edema around a core whose rim enhances), with class intensities
// that differ per modality and Gaussian noise of sigma 0.05 inside the brain.
// Unlabelled ventricles, small lesions and vessels each look like tumour in one
// modality, so no single modality separates the tumour regions by threshold.
PhantomCase generate_phantom(uint64_t case_seed, std::array<int64_t, 3> extent);

// One stack per z index, in z order, all modalities present.
std::vector<ModalityStack> extract_slices(const PerModality<Volume>& modalities, const Volume& labels,
                                          const PresenceMask& presence = PresenceMask::all());

// Z-score over the nonzero pixels of a slice; zero pixels stay zero.
Tensor normalize(const Tensor& slice);

struct AugmentConfig {
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  double rotate_limit_deg = 20.0;
  double shift_limit = 0.1;
  double shift_rotate_p = 0.5;
  int64_t crop_size = 224;
  int64_t final_size = 240;
  uint64_t seed = 0;

  void validate() const;
};

// Every random quantity of one augmentation, sampled up front.
struct RandomDraw {
  bool hflip = false;
  bool vflip = false;
  bool shift_rotate = false;
  double angle_deg = 0.0;
  double shift_x = 0.0;  // fraction of width
  double shift_y = 0.0;  // fraction of height
  int64_t crop_x = 0;
  int64_t crop_y = 0;
};

RandomDraw sample_draw(const AugmentConfig& cfg, int64_t height, int64_t width, Rng& rng);

// Source coordinate (in the input image) of every output pixel, composed from
// flips -> rotate+shift -> crop -> resize. Shared by images and labels.
struct SampleGrid {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> src_x;
  std::vector<double> src_y;
};

SampleGrid build_grid(int64_t height, int64_t width, const AugmentConfig& cfg, const RandomDraw& draw);

// Applies one grid: bilinear for images, nearest for labels, zero outside.
ModalityStack augment(const ModalityStack& stack, const AugmentConfig& cfg, const RandomDraw& draw);

struct Batch {
  PerModality<Tensor> images;  // [N,1,H,W] each; absent modalities are zero-filled
  std::vector<LabelMap> labels;
  PresenceMask presence;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

// Index groups of a deterministic shuffle. With contrastive training the
// trailing partial batch is dropped and batch_size must be at least 2.
std::vector<std::vector<size_t>> batch_indices(size_t count, size_t batch_size, uint64_t shuffle_seed,
                                               bool contrastive);

Batch collate(const std::vector<ModalityStack>& stacks, const std::vector<size_t>& indices);

std::vector<Batch> make_batches(const std::vector<ModalityStack>& stacks, size_t batch_size,
                                uint64_t shuffle_seed, bool contrastive);

// [N,4,H,W] one-hot encoding of the batch labels.
Tensor onehot(const std::vector<LabelMap>& labels);

// --- on-disk layout: <case_id>/{t1,t1c,t2,flair,seg}.nii ---------------------

std::filesystem::path modality_file(const std::filesystem::path& case_dir, Modality m);
std::filesystem::path label_file(const std::filesystem::path& case_dir);

void write_case(const std::filesystem::path& case_dir, const PhantomCase& c);

// Reads the modalities marked present (absent ones are zero volumes and need
// not exist on disk) and, when `with_label`, the segmentation.
PhantomCase read_case(const std::filesystem::path& case_dir, const PresenceMask& presence,
                      bool with_label = true);

// Directories directly under `data_dir` holding at least one case file, sorted by name.
std::vector<std::filesystem::path> list_cases(const std::filesystem::path& data_dir);

// Writes `count` phantom cases named case_0000, case_0001, ...
void generate_dataset(const std::filesystem::path& out_dir, int count, std::array<int64_t, 3> extent,
                      uint64_t seed);

}  // namespace refuseg::data
