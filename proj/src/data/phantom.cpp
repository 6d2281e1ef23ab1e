#include <algorithm>
#include <cmath>
#include <vector>
#include <numbers>

#include "refuseg/data/data.hpp"
#include "refuseg/errors.hpp"

namespace refuseg::data {

namespace {

struct Ellipsoid {
  double cx, cy, cz;
  double rx, ry, rz;
  double angle;  // rotation in the axial plane

  // Squared normalized radius; <= 1 inside.
  double radius2(double x, double y, double z) const {
    const double dx = x - cx, dy = y - cy, dz = z - cz;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    const double w = dz / rz;
    return u * u + v * v + w * w;
  }
};

struct Segment {
  double ax, ay, az, bx, by, bz, radius;

  bool contains(double x, double y, double z) const {
    const double dx = bx - ax, dy = by - ay, dz = bz - az;
    const double len2 = dx * dx + dy * dy + dz * dz;
    double t = len2 > 0.0 ? ((x - ax) * dx + (y - ay) * dy + (z - az) * dz) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = x - (ax + t * dx), ey = y - (ay + t * dy), ez = z - (az + t * dz);
    return ex * ex + ey * ey + ez * ez <= radius * radius;
  }
};

enum Tissue : int {
  outside = 0,
  brain = 1,
  csf = 2,
  lesion = 3,
  vessel = 4,
  edema = 5,
  necrosis = 6,
  enhancing = 7,
};

// Mean intensity per tissue, rows in modality order t1, t1c, t2, flair.
// Necrosis and enhancing rim only differ in t1c. The unlabelled confounders
// each mimic one tumour class in one modality: fluid is bright in t2, small
// lesions are bright in flair, vessels enhance in t1c.
constexpr double kProfile[4][8] = {
    {0.0, 0.60, 0.20, 0.55, 0.60, 0.45, 0.30, 0.30},
    {0.0, 0.60, 0.20, 0.60, 1.00, 0.60, 0.30, 1.00},
    {0.0, 0.50, 1.00, 0.60, 0.30, 0.80, 0.90, 0.90},
    {0.0, 0.40, 0.15, 0.95, 0.40, 1.00, 0.65, 0.65},
};

constexpr uint8_t kTissueLabel[8] = {0, 0, 0, 0, 0, 2, 1, 3};

constexpr double kNoiseSigma = 0.05;
constexpr double kCoreFraction = 0.6;

}  // namespace

PhantomCase generate_phantom(uint64_t case_seed, std::array<int64_t, 3> extent) {
  for (auto e : extent)
    require(e >= 16, ErrorKind::precondition,
            "phantom extents must be at least 16, got " + std::to_string(e));
  const auto [X, Y, Z] = extent;
  Rng rng(mix_seed(case_seed, 0x7068616e746f6dULL));

  const double mx = (X - 1) / 2.0, my = (Y - 1) / 2.0, mz = (Z - 1) / 2.0;
  Ellipsoid head{mx + rng.uniform(-0.03, 0.03) * X,
                 my + rng.uniform(-0.03, 0.03) * Y,
                 mz,
                 rng.uniform(0.38, 0.45) * X,
                 rng.uniform(0.40, 0.46) * Y,
                 rng.uniform(0.55, 0.65) * Z,
                 rng.uniform(-0.2, 0.2)};

  // Whole tumour: kept inside the head and at least 2 voxels from every border.
  const double plane = static_cast<double>(std::min(X, Y));
  Ellipsoid whole{0, 0, 0,
                  rng.uniform(0.15, 0.22) * plane,
                  rng.uniform(0.15, 0.22) * plane,
                  rng.uniform(0.20, 0.28) * Z,
                  rng.uniform(0.0, std::numbers::pi)};
  const double reach = std::max(whole.rx, whole.ry);
  const double span_x = std::max(0.0, head.rx * 0.45 - reach * 0.5);
  const double span_y = std::max(0.0, head.ry * 0.45 - reach * 0.5);
  whole.cx = head.cx + rng.uniform(-span_x, span_x);
  whole.cy = head.cy + rng.uniform(-span_y, span_y);
  whole.cz = mz + rng.uniform(-0.08, 0.08) * Z;

  // Tumour core sits inside the whole tumour, slightly off-centre.
  const double shrink = rng.uniform(0.55, 0.7);
  Ellipsoid core{0, 0, 0, whole.rx * shrink, whole.ry * shrink, whole.rz * shrink,
                 whole.angle + rng.uniform(-0.3, 0.3)};
  const double slack = (1.0 - shrink) * 0.4;
  core.cx = whole.cx + rng.uniform(-slack, slack) * whole.rx;
  core.cy = whole.cy + rng.uniform(-slack, slack) * whole.ry;
  core.cz = whole.cz + rng.uniform(-slack, slack) * whole.rz;

  // Ventricles: a mirrored pair about the head's midline.
  const double vx = rng.uniform(0.09, 0.12) * plane, vy = rng.uniform(0.15, 0.19) * plane;
  const double vz = rng.uniform(0.22, 0.30) * Z, vgap = rng.uniform(0.11, 0.14) * plane;
  const double vtilt = rng.uniform(-0.15, 0.15);
  std::vector<Ellipsoid> ventricles{
      {head.cx - vgap, head.cy, mz, vx, vy, vz, head.angle + vtilt},
      {head.cx + vgap, head.cy, mz, vx, vy, vz, head.angle - vtilt},
  };

  auto inside_head = [&](double frac) {
    for (;;) {
      const double x = head.cx + rng.uniform(-1.0, 1.0) * head.rx, y = head.cy + rng.uniform(-1.0, 1.0) * head.ry,
                   z = head.cz + rng.uniform(-1.0, 1.0) * head.rz;
      if (head.radius2(x, y, z) <= frac * frac) return std::array<double, 3>{x, y, z};
    }
  };

  std::vector<Ellipsoid> lesions;
  const int lesion_count = 5 + static_cast<int>(rng.below(3));
  for (int k = 0; k < lesion_count; ++k) {
    const auto c = inside_head(0.75);
    const double r = rng.uniform(0.06, 0.09) * plane;
    lesions.push_back({c[0], c[1], c[2], r, r * rng.uniform(0.8, 1.2), r * rng.uniform(0.8, 1.2),
                       rng.uniform(0.0, std::numbers::pi)});
  }

  std::vector<Segment> vessels;
  const int vessel_count = 2 + static_cast<int>(rng.below(2));
  for (int k = 0; k < vessel_count; ++k) {
    const auto a = inside_head(0.85), b = inside_head(0.85);
    vessels.push_back({a[0], a[1], a[2], b[0], b[1], b[2], rng.uniform(0.025, 0.035) * plane});
  }

  PerModality<double> gain;
  for (auto& g : gain) g = rng.uniform(0.9, 1.1);

  PhantomCase out;
  out.label = Volume::zeros(extent);
  for (auto& v : out.modalities) v = Volume::zeros(extent);

  for (int64_t z = 0; z < Z; ++z)
    for (int64_t y = 0; y < Y; ++y)
      for (int64_t x = 0; x < X; ++x) {
        const double px = x, py = y, pz = z;
        Tissue t = outside;
        const bool margin = x >= 2 && y >= 2 && z >= 2 && x < X - 2 && y < Y - 2 && z < Z - 2;
        if (head.radius2(px, py, pz) <= 1.0) {
          t = brain;
          for (const auto& v : ventricles)
            if (v.radius2(px, py, pz) <= 1.0) t = csf;
          for (const auto& l : lesions)
            if (l.radius2(px, py, pz) <= 1.0) t = lesion;
          for (const auto& v : vessels)
            if (v.contains(px, py, pz)) t = vessel;
        }
        if (t != outside && margin && whole.radius2(px, py, pz) <= 1.0) {
          t = edema;
          const double r2 = core.radius2(px, py, pz);
          if (r2 <= 1.0) t = r2 <= kCoreFraction * kCoreFraction ? necrosis : enhancing;
        }
        const size_t i = out.label.index(x, y, z);
        out.label.voxels[i] = kTissueLabel[t];
        if (t == outside) continue;
        for (size_t m = 0; m < 4; ++m)
          out.modalities[m].voxels[i] =
              static_cast<float>(gain[m] * kProfile[m][t] + rng.normal(0.0, kNoiseSigma));
      }
  return out;
}

}  // namespace refuseg::data
