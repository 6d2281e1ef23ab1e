#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "refuseg/data/data.hpp"
#include "refuseg/modality.hpp"

namespace refuseg::metrics {

enum class Region : uint8_t { et = 0, tc = 1, wt = 2 };

inline constexpr std::array<Region, 3> kRegions{Region::et, Region::tc, Region::wt};

std::string_view name_of(Region r);

// Boolean grid, x-fastest: index = x + X * (y + Y * z). 2D masks have Z = 1.
struct RegionMask {
  Region region = Region::wt;
  std::array<int64_t, 3> extents{0, 0, 0};
  std::vector<uint8_t> mask;

  static RegionMask empty(Region region, std::array<int64_t, 3> extents);
  int64_t size() const { return extents[0] * extents[1] * extents[2]; }
  int64_t count() const;
  size_t index(int64_t x, int64_t y, int64_t z) const {
    return static_cast<size_t>(x + extents[0] * (y + extents[1] * z));
  }
  bool at(int64_t x, int64_t y, int64_t z) const { return mask[index(x, y, z)] != 0; }
  void set(int64_t x, int64_t y, int64_t z, bool v = true) { mask[index(x, y, z)] = v ? 1 : 0; }
};

// ET = {3}, TC = {1,3}, WT = {1,2,3}; returned in kRegions order.
std::array<RegionMask, 3> compose_regions(const data::LabelMap& label);
// Slices stacked along z (all must share extents).
std::array<RegionMask, 3> compose_regions(const std::vector<data::LabelMap>& stack);

// 2|P∩G| / (|P|+|G|); 1 when both are empty.
double dice_score(const RegionMask& pred, const RegionMask& gt);

struct HD95Config {
  double percentile = 95.0;
  double empty_empty_value = 0.0;
  // Distance returned when exactly one mask is empty. When unset: the grid
  // diagonal over axes of extent > 1, so a 2D slice uses its planar diagonal.
  std::optional<double> one_empty_penalty;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  void validate() const;
  double penalty_for(const std::array<int64_t, 3>& extents) const;
};

// Set voxels with an unset face neighbour, or on the grid boundary along an
// axis of extent > 1.
std::vector<std::array<int64_t, 3>> surface_points(const RegionMask& m);

// Linear interpolation between order statistics; `values` need not be sorted.
double percentile(std::vector<double> values, double p);

// Exact Euclidean distance from every voxel to the nearest set voxel of `m`.
// `m` must be nonempty.
std::vector<double> distance_to_set(const RegionMask& m, const std::array<double, 3>& spacing);

double hausdorff95(const RegionMask& pred, const RegionMask& gt, const HD95Config& cfg = {});

struct RegionScores {
  std::array<double, 3> dice{};
  std::array<double, 3> hd95{};
};

RegionScores evaluate_case(const std::vector<data::LabelMap>& pred, const std::vector<data::LabelMap>& gt,
                           const HD95Config& cfg = {});

struct MetricsReport {
  std::string case_id;
  std::optional<Modality> dropped_modality;
  double beta = 0.0;
  RegionScores scores;

  // One JSON object on a single line.
  std::string to_json() const;
  static MetricsReport from_json(const std::string& line);
};

}  // namespace refuseg::metrics
