#include "refuseg/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "refuseg/errors.hpp"

namespace refuseg::metrics {

std::string_view name_of(Region r) {
  switch (r) {
    case Region::et: return "et";
    case Region::tc: return "tc";
    case Region::wt: return "wt";
  }
  return "?";
}

RegionMask RegionMask::empty(Region region, std::array<int64_t, 3> extents) {
  RegionMask m{region, extents, {}};
  m.mask.assign(static_cast<size_t>(m.size()), 0);
  return m;
}

int64_t RegionMask::count() const {
  return std::count_if(mask.begin(), mask.end(), [](uint8_t v) { return v != 0; });
}

namespace {

bool in_region(Region r, uint8_t label) {
  switch (r) {
    case Region::et: return label == 3;
    case Region::tc: return label == 1 || label == 3;
    case Region::wt: return label >= 1 && label <= 3;
  }
  return false;
}

void require_same_extents(const RegionMask& a, const RegionMask& b) {
  require(a.extents == b.extents, ErrorKind::alignment, "region masks have different extents");
  require(a.mask.size() == static_cast<size_t>(a.size()) && b.mask.size() == static_cast<size_t>(b.size()),
          ErrorKind::dimension, "region mask data does not match its extents");
}

}  // namespace

std::array<RegionMask, 3> compose_regions(const std::vector<data::LabelMap>& stack) {
  require(!stack.empty(), ErrorKind::precondition, "no label maps to compose");
  const int64_t H = stack.front().height, W = stack.front().width;
  const std::array<int64_t, 3> ext{W, H, static_cast<int64_t>(stack.size())};
  std::array<RegionMask, 3> out;
  for (auto r : kRegions) out[static_cast<size_t>(r)] = RegionMask::empty(r, ext);
  const size_t plane = static_cast<size_t>(H * W);
  for (size_t z = 0; z < stack.size(); ++z) {
    const auto& l = stack[z];
    require(l.height == H && l.width == W && l.labels.size() == plane, ErrorKind::alignment,
            "label maps in a stack must share extents");
    for (size_t i = 0; i < plane; ++i) {
      const uint8_t v = l.labels[i];
      require(v <= 3, ErrorKind::data, "label " + std::to_string(v) + " outside {0,1,2,3}");
      for (auto r : kRegions) out[static_cast<size_t>(r)].mask[z * plane + i] = in_region(r, v) ? 1 : 0;
    }
  }
  return out;
}

std::array<RegionMask, 3> compose_regions(const data::LabelMap& label) {
  return compose_regions(std::vector<data::LabelMap>{label});
}

double dice_score(const RegionMask& pred, const RegionMask& gt) {
  require_same_extents(pred, gt);
  int64_t inter = 0, p = 0, g = 0;
  for (size_t i = 0; i < pred.mask.size(); ++i) {
    const bool a = pred.mask[i] != 0, b = gt.mask[i] != 0;
    p += a;
    g += b;
    inter += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

void HD95Config::validate() const {
  require(percentile > 0.0 && percentile <= 100.0, ErrorKind::configuration,
          "HD95 percentile must lie in (0, 100]");
  for (double s : spacing) require(s > 0.0, ErrorKind::configuration, "voxel spacing must be positive");
  require(!one_empty_penalty || *one_empty_penalty >= 0.0, ErrorKind::configuration,
          "empty-mask penalty must be non-negative");
}

double HD95Config::penalty_for(const std::array<int64_t, 3>& extents) const {
  if (one_empty_penalty) return *one_empty_penalty;
  double d2 = 0.0;
  for (size_t a = 0; a < 3; ++a) {
    if (extents[a] == 1) continue;
    const double len = static_cast<double>(extents[a]) * spacing[a];
    d2 += len * len;
  }
  return std::sqrt(d2);
}

std::vector<std::array<int64_t, 3>> surface_points(const RegionMask& m) {
  std::vector<std::array<int64_t, 3>> out;
  const auto [X, Y, Z] = m.extents;
  for (int64_t z = 0; z < Z; ++z)
    for (int64_t y = 0; y < Y; ++y)
      for (int64_t x = 0; x < X; ++x) {
        if (!m.at(x, y, z)) continue;
        const std::array<int64_t, 3> p{x, y, z};
        bool surface = false;
        for (size_t a = 0; a < 3 && !surface; ++a) {
          if (m.extents[a] == 1) continue;
          for (int64_t step : {-1, 1}) {
            auto q = p;
            q[a] += step;
            if (q[a] < 0 || q[a] >= m.extents[a] || !m.at(q[0], q[1], q[2])) {
              surface = true;
              break;
            }
          }
        }
        if (surface) out.push_back(p);
      }
  return out;
}

double percentile(std::vector<double> values, double p) {
  require(!values.empty(), ErrorKind::precondition, "percentile of an empty set");
  require(p >= 0.0 && p <= 100.0, ErrorKind::configuration, "percentile outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(rank));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

namespace {

// One pass of the lower-envelope squared distance transform along a line
// with sample spacing `w`. `f` holds squared distances (infinity for none).
void edt_line(std::vector<double>& f, double w, std::vector<double>& out, std::vector<int64_t>& v,
              std::vector<double>& zb) {
  const auto n = static_cast<int64_t>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int64_t k = -1;
  for (int64_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double pq = q * w;
    while (k >= 0) {
      const double pv = v[k] * w;
      const double s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (s <= zb[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    zb[k] = k == 0 ? -inf : ((f[q] + pq * pq) - (f[v[k - 1]] + (v[k - 1] * w) * (v[k - 1] * w))) /
                               (2.0 * (pq - v[k - 1] * w));
  }
  if (k < 0) {
    std::fill(out.begin(), out.begin() + n, inf);
    return;
  }
  int64_t j = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (j < k && zb[j + 1] < q * w) ++j;
    const double d = (q - v[j]) * w;
    out[q] = d * d + f[v[j]];
  }
}

}  // namespace

std::vector<double> distance_to_set(const RegionMask& m, const std::array<double, 3>& spacing) {
  require(m.count() > 0, ErrorKind::precondition, "distance to an empty set");
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d2(m.mask.size());
  for (size_t i = 0; i < d2.size(); ++i) d2[i] = m.mask[i] ? 0.0 : inf;

  const auto ext = m.extents;
  const std::array<int64_t, 3> stride{1, ext[0], ext[0] * ext[1]};
  const int64_t longest = std::max({ext[0], ext[1], ext[2]});
  std::vector<double> f(static_cast<size_t>(longest)), out(static_cast<size_t>(longest)),
      zb(static_cast<size_t>(longest));
  std::vector<int64_t> v(static_cast<size_t>(longest));
  for (size_t a = 0; a < 3; ++a) {
    if (ext[a] == 1) continue;
    const size_t b = (a + 1) % 3, c = (a + 2) % 3;
    f.resize(static_cast<size_t>(ext[a]));
    for (int64_t j = 0; j < ext[b]; ++j)
      for (int64_t k = 0; k < ext[c]; ++k) {
        const int64_t base = j * stride[b] + k * stride[c];
        for (int64_t i = 0; i < ext[a]; ++i) f[i] = d2[base + i * stride[a]];
        edt_line(f, spacing[a], out, v, zb);
        for (int64_t i = 0; i < ext[a]; ++i) d2[base + i * stride[a]] = out[i];
      }
  }
  for (auto& x : d2) x = std::sqrt(x);
  return d2;
}

double hausdorff95(const RegionMask& pred, const RegionMask& gt, const HD95Config& cfg) {
  cfg.validate();
  require_same_extents(pred, gt);
  const bool pe = pred.count() == 0, ge = gt.count() == 0;
  if (pe && ge) return cfg.empty_empty_value;
  if (pe || ge) return cfg.penalty_for(pred.extents);

  auto directed = [&](const RegionMask& from, const RegionMask& to) {
    const auto dist = distance_to_set(to, cfg.spacing);
    std::vector<double> values;
    for (const auto& p : surface_points(from)) values.push_back(dist[from.index(p[0], p[1], p[2])]);
    return percentile(std::move(values), cfg.percentile);
  };
  return std::max(directed(pred, gt), directed(gt, pred));
}

RegionScores evaluate_case(const std::vector<data::LabelMap>& pred, const std::vector<data::LabelMap>& gt,
                           const HD95Config& cfg) {
  require(pred.size() == gt.size(), ErrorKind::alignment,
          "prediction has " + std::to_string(pred.size()) + " slices, ground truth " +
              std::to_string(gt.size()));
  const auto p = compose_regions(pred);
  const auto g = compose_regions(gt);
  RegionScores s;
  for (size_t r = 0; r < 3; ++r) {
    s.dice[r] = dice_score(p[r], g[r]);
    s.hd95[r] = hausdorff95(p[r], g[r], cfg);
  }
  return s;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["case_id"] = case_id;
  j["dropped_modality"] =
      dropped_modality ? nlohmann::ordered_json(std::string(refuseg::name_of(*dropped_modality))) : nullptr;
  j["beta"] = beta;
  for (auto r : kRegions) {
    j["dice"][std::string(name_of(r))] = scores.dice[static_cast<size_t>(r)];
    j["hd95"][std::string(name_of(r))] = scores.hd95[static_cast<size_t>(r)];
  }
  return j.dump();
}

MetricsReport MetricsReport::from_json(const std::string& line) {
  MetricsReport r;
  try {
    const auto j = nlohmann::json::parse(line);
    r.case_id = j.at("case_id").get<std::string>();
    if (!j.at("dropped_modality").is_null()) {
      const auto m = parse_modality(j.at("dropped_modality").get<std::string>());
      require(m.has_value(), ErrorKind::data, "unknown modality in report");
      r.dropped_modality = *m;
    }
    r.beta = j.at("beta").get<double>();
    for (auto reg : kRegions) {
      r.scores.dice[static_cast<size_t>(reg)] = j.at("dice").at(std::string(name_of(reg))).get<double>();
      r.scores.hd95[static_cast<size_t>(reg)] = j.at("hd95").at(std::string(name_of(reg))).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, std::string("malformed metrics record: ") + e.what());
  }
  return r;
}

}  // namespace refuseg::metrics
