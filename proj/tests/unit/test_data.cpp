#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "refuseg/data/data.hpp"
#include "support.hpp"

using namespace refuseg;
using namespace refuseg::data;
using support::kind_of;

namespace {

ModalityStack random_stack(Rng& rng, int64_t h, int64_t w) {
  ModalityStack s;
  s.label = LabelMap::zeros(h, w);
  for (auto& l : s.label.labels) l = static_cast<uint8_t>(rng.below(4));
  for (auto& t : s.slices) {
    t = Tensor::zeros({1, h, w});
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  return s;
}

AugmentConfig identity_config(int64_t size) {
  AugmentConfig cfg;
  cfg.hflip_p = cfg.vflip_p = cfg.shift_rotate_p = 0.0;
  cfg.crop_size = cfg.final_size = size;
  return cfg;
}

struct Range {
  float lo = INFINITY, hi = -INFINITY;
  void add(float v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  bool overlaps(const Range& o) const { return lo <= o.hi && o.lo <= hi; }
};

// Best Dice any single intensity threshold (either direction) reaches for
// `truth` among the nonzero voxels of `image`.
double best_threshold_dice(const std::vector<float>& image, const std::vector<bool>& truth) {
  std::vector<std::pair<float, bool>> voxels;
  int64_t positives = 0;
  for (size_t i = 0; i < image.size(); ++i) {
    positives += truth[i] ? 1 : 0;
    if (image[i] != 0.0f) voxels.emplace_back(image[i], truth[i]);
  }
  std::sort(voxels.begin(), voxels.end());
  double best = 0.0;
  for (int dir = 0; dir < 2; ++dir) {
    int64_t taken = 0, hits = 0;
    for (size_t k = 0; k < voxels.size(); ++k) {
      const auto& v = voxels[dir == 0 ? k : voxels.size() - 1 - k];
      ++taken;
      hits += v.second ? 1 : 0;
      best = std::max(best, 2.0 * static_cast<double>(hits) / static_cast<double>(taken + positives));
    }
  }
  return best;
}

}  // namespace

TEST_CASE("phantom generation") {
  const std::array<int64_t, 3> ext{32, 32, 16};
  const auto a = generate_phantom(11, ext);
  const auto b = generate_phantom(11, ext);
  for (size_t m = 0; m < 4; ++m) CHECK(a.modalities[m].voxels == b.modalities[m].voxels);
  CHECK(a.label.voxels == b.label.voxels);
  CHECK(generate_phantom(12, ext).label.voxels != a.label.voxels);

  CHECK(kind_of([] { generate_phantom(1, {15, 32, 32}); }) == ErrorKind::precondition);

  for (uint64_t seed = 0; seed < 20; ++seed) {
    for (auto e : {std::array<int64_t, 3>{32, 32, 16}, std::array<int64_t, 3>{48, 48, 24}}) {
      const auto c = generate_phantom(seed, e);
      std::array<int64_t, 4> hist{};
      for (float v : c.label.voxels) {
        REQUIRE((v == 0.0f || v == 1.0f || v == 2.0f || v == 3.0f));
        ++hist[static_cast<size_t>(v)];
      }
      for (auto n : hist) CHECK(n > 0);

      // Class-conditional intensity ranges: without t1c, necrosis and the
      // enhancing rim overlap in every remaining channel.
      for (auto m : {Modality::t1, Modality::t2, Modality::flair}) {
        Range ncr, et;
        for (size_t i = 0; i < c.label.voxels.size(); ++i) {
          const float v = c.modalities[index_of(m)].voxels[i];
          if (c.label.voxels[i] == 1.0f) ncr.add(v);
          if (c.label.voxels[i] == 3.0f) et.add(v);
        }
        CHECK(ncr.overlaps(et));
      }
      // t1c separates them on average.
      double ncr_sum = 0, et_sum = 0;
      for (size_t i = 0; i < c.label.voxels.size(); ++i) {
        const float v = c.modalities[index_of(Modality::t1c)].voxels[i];
        if (c.label.voxels[i] == 1.0f) ncr_sum += v;
        if (c.label.voxels[i] == 3.0f) et_sum += v;
      }
      CHECK(et_sum / static_cast<double>(hist[3]) > ncr_sum / static_cast<double>(hist[1]) + 0.4);

      // Tumour keeps a two-voxel margin from every border.
      for (int64_t z = 0; z < e[2]; ++z)
        for (int64_t y = 0; y < e[1]; ++y)
          for (int64_t x = 0; x < e[0]; ++x)
            if (x < 2 || y < 2 || z < 2 || x >= e[0] - 2 || y >= e[1] - 2 || z >= e[2] - 2)
              REQUIRE(c.label.at(x, y, z) == 0.0f);
    }
  }
}

TEST_CASE("no single modality thresholds the tumour") {
  // Even a per-case oracle threshold stays below the validation Dice the
  // trained network must reach, for every region and modality.
  const std::array<int64_t, 3> ext{32, 32, 16};
  const int cases = 20;
  double mean[3][4] = {};
  for (uint64_t seed = 0; seed < uint64_t(cases); ++seed) {
    const auto c = generate_phantom(mix_seed(seed, 808), ext);
    for (int region = 0; region < 3; ++region) {
      std::vector<bool> truth(c.label.voxels.size());
      for (size_t i = 0; i < truth.size(); ++i) {
        const float l = c.label.voxels[i];
        truth[i] = region == 0 ? l == 3.0f : region == 1 ? (l == 1.0f || l == 3.0f) : l != 0.0f;
      }
      for (size_t m = 0; m < 4; ++m) mean[region][m] += best_threshold_dice(c.modalities[m].voxels, truth) / cases;
    }
  }
  const char* names[3] = {"ET", "TC", "WT"};
  for (int region = 0; region < 3; ++region)
    for (size_t m = 0; m < 4; ++m) {
      INFO(std::string(names[region]) << " from " << name_of(kModalities[m]) << ": " << mean[region][m]);
      CHECK(mean[region][m] < 0.85);
    }
}

TEST_CASE("extract_slices") {
  const auto c = generate_phantom(3, {16, 20, 18});
  const auto stacks = extract_slices(c.modalities, c.label);
  REQUIRE(stacks.size() == 18);
  for (size_t k = 0; k < stacks.size(); ++k) {
    const auto& s = stacks[k];
    CHECK(s.z == static_cast<int64_t>(k));
    CHECK(s.presence == PresenceMask::all());
    CHECK(s.height() == 20);
    CHECK(s.width() == 16);
    for (int64_t y = 0; y < 20; ++y)
      for (int64_t x = 0; x < 16; ++x) {
        REQUIRE(s.label.at(y, x) == static_cast<uint8_t>(c.label.at(x, y, static_cast<int64_t>(k))));
        REQUIRE(s.slices[1].data[static_cast<size_t>(y * 16 + x)] ==
                c.modalities[1].at(x, y, static_cast<int64_t>(k)));
      }
  }

  SUBCASE("155 planes") {
    PerModality<Volume> vols;
    for (auto& v : vols) v = Volume::zeros({16, 16, 155});
    CHECK(extract_slices(vols, Volume::zeros({16, 16, 155})).size() == 155);
  }
  SUBCASE("single plane") {
    PerModality<Volume> vols;
    Rng rng(5);
    for (auto& v : vols) {
      v = Volume::zeros({7, 5, 1});
      for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
    }
    const auto one = extract_slices(vols, Volume::zeros({7, 5, 1}));
    REQUIRE(one.size() == 1);
    for (size_t m = 0; m < 4; ++m) CHECK(one[0].slices[m].data == vols[m].voxels);
  }
  SUBCASE("extent mismatch") {
    PerModality<Volume> vols;
    for (auto& v : vols) v = Volume::zeros({8, 8, 4});
    vols[2] = Volume::zeros({8, 8, 5});
    CHECK(kind_of([&] { extract_slices(vols, Volume::zeros({8, 8, 4})); }) == ErrorKind::alignment);
  }
  SUBCASE("bad label value") {
    PerModality<Volume> vols;
    for (auto& v : vols) v = Volume::zeros({8, 8, 1});
    auto lab = Volume::zeros({8, 8, 1});
    lab.voxels[3] = 4.0f;
    CHECK(kind_of([&] { extract_slices(vols, lab); }) == ErrorKind::data);
  }
}

TEST_CASE("normalize") {
  CHECK(normalize(Tensor::full({1, 4, 4}, 2.5f)).data == std::vector<float>(16, 0.0f));
  CHECK(normalize(Tensor::zeros({1, 4, 4})).data == std::vector<float>(16, 0.0f));

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t = Tensor::zeros({1, 24, 24});
    for (auto& v : t.data) v = rng.bernoulli(0.3) ? 0.0f : static_cast<float>(rng.normal(3.0, 2.0));
    const auto n = normalize(t);
    double sum = 0, ss = 0;
    int count = 0;
    for (size_t i = 0; i < t.data.size(); ++i) {
      if (t.data[i] == 0.0f) {
        REQUIRE(n.data[i] == 0.0f);
        continue;
      }
      sum += n.data[i];
      ++count;
    }
    const double mean = sum / count;
    for (size_t i = 0; i < t.data.size(); ++i)
      if (t.data[i] != 0.0f) ss += (n.data[i] - mean) * (n.data[i] - mean);
    CHECK(std::abs(mean) < 1e-4);
    CHECK(std::abs(std::sqrt(ss / count) - 1.0) < 1e-4);
  }
}

TEST_CASE("augment geometry") {
  Rng rng(21);
  const auto s = random_stack(rng, 12, 12);

  SUBCASE("identity") {
    const auto out = augment(s, identity_config(12), RandomDraw{});
    CHECK(out.label == s.label);
    for (size_t m = 0; m < 4; ++m) CHECK(out.slices[m].data == s.slices[m].data);
  }
  SUBCASE("flips") {
    const auto cfg = identity_config(12);
    RandomDraw h;
    h.hflip = true;
    const auto once = augment(s, cfg, h);
    for (int64_t y = 0; y < 12; ++y)
      for (int64_t x = 0; x < 12; ++x) {
        REQUIRE(once.label.at(y, x) == s.label.at(y, 11 - x));
        REQUIRE(once.slices[0].data[y * 12 + x] == s.slices[0].data[y * 12 + 11 - x]);
      }
    const auto twice = augment(once, cfg, h);
    CHECK(twice.label == s.label);
    for (size_t m = 0; m < 4; ++m) CHECK(twice.slices[m].data == s.slices[m].data);

    RandomDraw v;
    v.vflip = true;
    const auto vf = augment(s, cfg, v);
    for (int64_t y = 0; y < 12; ++y)
      for (int64_t x = 0; x < 12; ++x) REQUIRE(vf.label.at(y, x) == s.label.at(11 - y, x));
  }
  SUBCASE("crop window") {
    AugmentConfig cfg = identity_config(12);
    cfg.crop_size = cfg.final_size = 8;
    RandomDraw d;
    d.crop_x = 3;
    d.crop_y = 1;
    const auto out = augment(s, cfg, d);
    REQUIRE(out.height() == 8);
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x) {
        REQUIRE(out.label.at(y, x) == s.label.at(y + 1, x + 3));
        REQUIRE(out.slices[2].data[y * 8 + x] == s.slices[2].data[(y + 1) * 12 + x + 3]);
      }
  }
  SUBCASE("crop larger than input") {
    AugmentConfig cfg = identity_config(12);
    cfg.crop_size = 13;
    CHECK(kind_of([&] { augment(s, cfg, RandomDraw{}); }) == ErrorKind::precondition);
    CHECK(kind_of([&] { sample_draw(cfg, 12, 12, rng); }) == ErrorKind::precondition);
  }
  SUBCASE("invalid probability") {
    AugmentConfig cfg;
    cfg.hflip_p = 1.5;
    CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::configuration);
  }
}

TEST_CASE("augment properties over random draws") {
  Rng rng(99);
  AugmentConfig cfg;
  cfg.crop_size = 14;
  cfg.final_size = 16;
  for (int trial = 0; trial < 100; ++trial) {
    auto s = random_stack(rng, 16, 16);
    // Drop one label value so the subset property is not vacuous.
    const auto banned = static_cast<uint8_t>(rng.below(4));
    for (auto& l : s.label.labels)
      if (l == banned) l = static_cast<uint8_t>((banned + 1) % 4);
    // Identical slices must stay identical: all channels share one transform.
    s.slices[1] = s.slices[0];
    s.slices[3] = s.slices[0];

    const auto draw = sample_draw(cfg, 16, 16, rng);
    const auto out = augment(s, cfg, draw);
    REQUIRE(out.height() == 16);
    REQUIRE(out.width() == 16);
    const std::set<uint8_t> before(s.label.labels.begin(), s.label.labels.end());
    for (auto l : out.label.labels) REQUIRE((before.count(l) == 1 || l == 0));
    CHECK(out.slices[1].data == out.slices[0].data);
    CHECK(out.slices[3].data == out.slices[0].data);

    // Same grid drives labels and images: a label-valued image sampled at an
    // integer source position reproduces the label exactly.
    const auto grid = build_grid(16, 16, cfg, draw);
    ModalityStack lab = s;
    for (size_t i = 0; i < lab.label.labels.size(); ++i)
      lab.slices[2].data[i] = static_cast<float>(lab.label.labels[i]);
    const auto lab_out = augment(lab, cfg, draw);
    for (size_t i = 0; i < grid.src_x.size(); ++i) {
      const double gx = grid.src_x[i], gy = grid.src_y[i];
      if (std::abs(gx - std::round(gx)) < 1e-12 && std::abs(gy - std::round(gy)) < 1e-12)
        REQUIRE(lab_out.slices[2].data[i] == static_cast<float>(lab_out.label.labels[i]));
    }
    CHECK(augment(s, cfg, draw).label == out.label);
  }
}

TEST_CASE("make_batches") {
  std::vector<ModalityStack> stacks;
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    auto s = random_stack(rng, 6, 6);
    s.z = i;
    stacks.push_back(s);
  }
  const auto on = make_batches(stacks, 4, 7, true);
  CHECK(on.size() == 2);
  const auto off = make_batches(stacks, 4, 7, false);
  REQUIRE(off.size() == 3);
  CHECK(off[0].size() == 4);
  CHECK(off[1].size() == 4);
  CHECK(off[2].size() == 2);
  CHECK(off[0].images[0].shape == grad::Shape{4, 1, 6, 6});

  CHECK(batch_indices(10, 4, 7, false) == batch_indices(10, 4, 7, false));
  CHECK(batch_indices(10, 4, 7, false) != batch_indices(10, 4, 8, false));
  CHECK(kind_of([] { batch_indices(10, 1, 0, true); }) == ErrorKind::configuration);
  CHECK(batch_indices(10, 1, 0, false).size() == 10);

  for (uint64_t seed = 0; seed < 30; ++seed)
    for (bool contrastive : {false, true}) {
      const size_t count = 5 + seed % 13, n = 2 + seed % 5;
      std::vector<int> seen(count, 0);
      for (const auto& b : batch_indices(count, n, seed, contrastive))
        for (auto i : b) ++seen[i];
      const bool dropped = contrastive && count % n != 0;
      for (int c : seen) CHECK(c <= 1);
      if (!dropped) CHECK(std::count(seen.begin(), seen.end(), 1) == static_cast<long>(count));
      else CHECK(std::count(seen.begin(), seen.end(), 1) == static_cast<long>(count - count % n));
    }

  // Collated contents match the source stacks.
  const auto idx = batch_indices(10, 4, 7, false);
  const auto b = collate(stacks, idx[1]);
  for (size_t k = 0; k < idx[1].size(); ++k) {
    CHECK(b.labels[k] == stacks[idx[1][k]].label);
    for (size_t i = 0; i < 36; ++i) REQUIRE(b.images[3].data[k * 36 + i] == stacks[idx[1][k]].slices[3].data[i]);
  }

  const auto hot = onehot(b.labels);
  CHECK(hot.shape == grad::Shape{4, 4, 6, 6});
  for (size_t n = 0; n < 4; ++n)
    for (size_t i = 0; i < 36; ++i) {
      float sum = 0;
      for (size_t c = 0; c < 4; ++c) sum += hot.data[(n * 4 + c) * 36 + i];
      REQUIRE(sum == 1.0f);
      REQUIRE(hot.data[(n * 4 + b.labels[n].labels[i]) * 36 + i] == 1.0f);
    }
}

TEST_CASE("dataset layout round trip") {
  const auto dir = support::scratch_dir("data_layout");
  generate_dataset(dir, 3, {16, 16, 16}, 42);
  const auto cases = list_cases(dir);
  REQUIRE(cases.size() == 3);
  CHECK(cases[0].filename() == "case_0000");
  for (auto m : kModalities) CHECK(std::filesystem::exists(modality_file(cases[1], m)));

  const auto expect = generate_phantom(mix_seed(42, 1), {16, 16, 16});
  const auto got = read_case(cases[1], PresenceMask::all());
  for (size_t m = 0; m < 4; ++m) CHECK(got.modalities[m].voxels == expect.modalities[m].voxels);
  CHECK(got.label.voxels == expect.label.voxels);

  std::filesystem::remove(modality_file(cases[2], Modality::t1));
  CHECK(kind_of([&] { read_case(cases[2], PresenceMask::all()); }) == ErrorKind::io);
  const auto partial = read_case(cases[2], PresenceMask::all().without(Modality::t1));
  CHECK(partial.modalities[0].voxels == std::vector<float>(16 * 16 * 16, 0.0f));
  std::filesystem::remove_all(dir);
}
