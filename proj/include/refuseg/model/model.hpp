#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "refuseg/gradcore/adam.hpp"
#include "refuseg/gradcore/ops.hpp"
#include "refuseg/modality.hpp"

namespace refuseg::model {

using grad::Tensor;
using grad::TensorMap;
using FVar = grad::Var<float>;
using FTape = grad::Tape<float>;

struct ModelConfig {
  int stages = 4;
  int base_width = 8;
  int blocks_per_stage = 2;
  int proj_dim = 32;
  int num_classes = 4;
  int64_t input_height = 240;
  int64_t input_width = 240;

  void validate() const;
  // Channels of encoder stage s (1-based).
  int64_t width(int stage) const { return int64_t{base_width} << (stage - 1); }
  // Input extents must be divisible by this.
  int64_t spatial_divisor() const { return int64_t{1} << (stages - 1); }
  bool operator==(const ModelConfig&) const = default;
};

// Trainable tensors plus batchnorm running statistics (requires_grad false),
// keyed by name: enc.<modality>.*, proj.<modality>.*, dec.*
struct Model {
  ModelConfig config;
  TensorMap params;

  Tensor& at(const std::string& name);
  int64_t trainable_count() const;
};

Model build_model(const ModelConfig& cfg, uint64_t init_seed);

// Name prefixes owned by one modality (its encoder and projection head).
std::string encoder_prefix(Modality m);
std::string projection_prefix(Modality m);
bool belongs_to(const std::string& name, Modality m);

// Feature maps of every encoder stage, shallowest first. `x` is [N,1,H,W].
std::vector<FVar> encode_modality(FTape& tape, Model& model, Modality m, FVar x, bool training);

// Elementwise maximum per level over the present modalities only.
std::vector<FVar> fuse_levels(const PerModality<std::vector<FVar>>& features, const PresenceMask& presence);

// avgpool -> linear -> batchnorm1d -> linear -> batchnorm1d; rows [N, proj_dim].
FVar project_contrastive(FTape& tape, Model& model, Modality m, FVar deepest, bool training);

// Logits [N, num_classes, H, W] from the fused levels.
FVar decode(FTape& tape, Model& model, const std::vector<FVar>& fused, bool training);

struct ForwardResult {
  FVar logits;
  FVar probs;
  std::vector<FVar> fused;
  PerModality<std::optional<FVar>> projections;
};

// Encodes the present modalities, fuses, decodes and applies softmax.
// Absent modalities' images are never read.
ForwardResult forward(FTape& tape, Model& model, const PerModality<Tensor>& images, const PresenceMask& presence,
                      bool training, bool with_projections);

// --- checkpoints ---------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

// "RFSG", version u32, entry count u32, entries (name length u16, name, rank
// u32, extents u32 each, float32 payload), then a CRC-32 of all prior bytes.
// Everything little-endian.
std::vector<uint8_t> encode_checkpoint(const TensorMap& entries);
TensorMap decode_checkpoint(std::span<const uint8_t> bytes);

void write_checkpoint_file(const std::filesystem::path& path, const TensorMap& entries);
TensorMap read_checkpoint_file(const std::filesystem::path& path);

uint32_t crc32(std::span<const uint8_t> bytes);

}  // namespace refuseg::model
