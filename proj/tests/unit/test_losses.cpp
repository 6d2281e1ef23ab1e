#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "doctest.h"
#include "oracles/loss_oracles.hpp"
#include "refuseg/losses/losses.hpp"
#include "refuseg/rng.hpp"

using namespace refuseg;
using namespace refuseg::grad;
using namespace refuseg::loss;

namespace {

template <class T = float>
BasicTensor<T> random_probs(Rng& rng, Shape shape) {
  auto t = BasicTensor<T>::zeros(shape);
  const int64_t n = shape[0], c = shape[1], plane = shape[2] * shape[3];
  for (int64_t b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      double total = 0;
      std::vector<double> e(c);
      for (int64_t k = 0; k < c; ++k) total += e[k] = std::exp(rng.uniform(-2, 2));
      for (int64_t k = 0; k < c; ++k) t.data[(b * c + k) * plane + p] = static_cast<T>(e[k] / total);
    }
  return t;
}

template <class T = float>
BasicTensor<T> random_onehot(Rng& rng, Shape shape) {
  auto t = BasicTensor<T>::zeros(shape);
  const int64_t n = shape[0], c = shape[1], plane = shape[2] * shape[3];
  for (int64_t b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) t.data[(b * c + rng.below(c)) * plane + p] = T{1};
  return t;
}

template <class T = float>
BasicTensor<T> random_matrix(Rng& rng, Shape shape) {
  auto t = BasicTensor<T>::zeros(shape);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-1, 1));
  return t;
}

template <class T>
std::vector<double> as_double(const BasicTensor<T>& t) {
  return {t.data.begin(), t.data.end()};
}

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected refuseg::Error");
  return ErrorKind::io;
}

}  // namespace

TEST_CASE("dice_loss") {
  Tape<float> tape;
  Rng rng(21);
  SUBCASE("perfect overlap") {
    auto y = random_onehot(rng, {2, 4, 3, 3});
    CHECK(dice_loss(tape.constant(y), tape.constant(y)).item() <= 1e-5);
  }
  SUBCASE("disjoint foreground") {
    // Two classes: prediction and target foregrounds never overlap.
    auto p2 = Tensor::zeros({1, 2, 2, 2});
    auto y2 = Tensor::zeros({1, 2, 2, 2});
    p2.data = {0, 0, 1, 1, 1, 1, 0, 0};
    y2.data = {1, 1, 0, 0, 0, 0, 1, 1};
    CHECK(dice_loss(tape.constant(p2), tape.constant(y2)).item() == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("matches the loop oracle") {
    for (int trial = 0; trial < 20; ++trial) {
      auto p = random_probs(rng, {1, 4, 4, 4});
      auto y = random_onehot(rng, {1, 4, 4, 4});
      const double expect = oracle::dice_loss_loop(as_double(p), as_double(y), 1, 4, 16);
      CHECK(std::abs(dice_loss(tape.constant(p), tape.constant(y)).item() - expect) < 1e-6);
    }
  }
  SUBCASE("errors") {
    auto p = random_probs(rng, {1, 4, 2, 2});
    CHECK(kind_of([&] { dice_loss(tape.constant(p), tape.constant(random_onehot(rng, {1, 4, 2, 3}))); }) ==
          ErrorKind::dimension);
    auto bad = p;
    bad.data[0] += 0.01f;
    CHECK(kind_of([&] { dice_loss(tape.constant(bad), tape.constant(random_onehot(rng, {1, 4, 2, 2}))); }) ==
          ErrorKind::data);
  }
}

TEST_CASE("focal_loss") {
  Tape<float> tape;
  Rng rng(22);
  SUBCASE("gamma 0, alpha 0.5 is half binary cross-entropy") {
    auto p = random_probs(rng, {2, 4, 3, 3});
    auto y = random_onehot(rng, {2, 4, 3, 3});
    double bce = 0;
    for (size_t i = 0; i < p.data.size(); ++i)
      bce -= y.data[i] * std::log(double(p.data[i])) + (1 - y.data[i]) * std::log(1 - double(p.data[i]));
    bce /= static_cast<double>(p.data.size());
    CHECK(std::abs(focal_loss(tape.constant(p), tape.constant(y), {0.5, 0.0}).item() - 0.5 * bce) < 1e-6);
  }
  SUBCASE("exact prediction") {
    auto y = random_onehot(rng, {2, 4, 3, 3});
    CHECK(focal_loss(tape.constant(y), tape.constant(y), {}).item() <= 1e-5);
  }
  SUBCASE("matches the loop oracle") {
    for (int trial = 0; trial < 20; ++trial) {
      auto p = random_probs(rng, {2, 4, 3, 3});
      auto y = random_onehot(rng, {2, 4, 3, 3});
      const double expect = oracle::focal_loss_loop(as_double(p), as_double(y), 0.25, 2.0);
      const double got = focal_loss(tape.constant(p), tape.constant(y), {}).item();
      CHECK(std::abs(got - expect) < 1e-6);
      CHECK(got >= 0.0);
    }
  }
  SUBCASE("invalid parameters") {
    auto y = random_onehot(rng, {1, 2, 1, 1});
    CHECK(kind_of([&] { focal_loss(tape.constant(y), tape.constant(y), {1.5, 2.0}); }) == ErrorKind::configuration);
  }
}

TEST_CASE("pair_contrastive_term") {
  SUBCASE("two views give zero") {
    Tape<float> tape;
    Rng rng(23);
    auto v = random_matrix(rng, {2, 5});
    CHECK(std::abs(pair_contrastive_term(tape.constant(v), 0, 1).item()) < 1e-6);
  }
  SUBCASE("identical views give ln 3") {
    Tape<double> tape;
    auto v = BasicTensor<double>::full({4, 3}, 0.7);
    CHECK(std::abs(pair_contrastive_term(tape.constant(v), 0, 2).item() - std::log(3.0)) < 1e-9);
  }
  SUBCASE("matches brute force and is non-negative") {
    Tape<float> tape;
    Rng rng(24);
    for (int trial = 0; trial < 20; ++trial) {
      auto v = random_matrix(rng, {6, 4});
      const int64_t i = rng.below(6);
      int64_t j = rng.below(5);
      if (j >= i) ++j;
      const double got = pair_contrastive_term(tape.constant(v), i, j).item();
      CHECK(std::abs(got - oracle::pair_term_loop(as_double(v), 6, 4, i, j)) < 1e-6);
      CHECK(got >= 0.0);
    }
  }
  SUBCASE("zero-norm row is rejected") {
    Tape<float> tape;
    auto v = Tensor::full({3, 2}, 1.0f);
    v.data[2] = v.data[3] = 0.0f;
    CHECK(kind_of([&] { pair_contrastive_term(tape.constant(v), 0, 2); }) == ErrorKind::degenerate_projection);
  }
}

TEST_CASE("batch_contrastive") {
  Rng rng(25);
  SUBCASE("identical projections, N = 2, closed form") {
    Tape<double> tape;
    auto x = random_matrix<double>(rng, {2, 3});
    // Views: x0, x1, x0, x1. For anchor x0: positive cos 1, negatives x1 (c) and x1 (c).
    const double c = oracle::cosine(x.data, 3, 0, 1);
    const double term = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0 * std::exp(c)));
    CHECK(batch_contrastive(tape.constant(x), tape.constant(x)).item() == doctest::Approx(term).epsilon(1e-12));
  }
  SUBCASE("symmetry, rotation and permutation invariance") {
    Tape<float> tape;
    for (int trial = 0; trial < 10; ++trial) {
      auto x = random_matrix(rng, {4, 2});
      auto y = random_matrix(rng, {4, 2});
      const double base = batch_contrastive(tape.constant(x), tape.constant(y)).item();
      CHECK(base >= 0.0);
      CHECK(std::abs(base - oracle::batch_contrastive_loop(as_double(x), as_double(y), 4, 2)) < 1e-6);
      CHECK(std::abs(batch_contrastive(tape.constant(y), tape.constant(x)).item() - base) < 1e-6);

      const double angle = rng.uniform(0, 2 * std::numbers::pi);
      auto rotate = [&](Tensor t) {
        for (int r = 0; r < 4; ++r) {
          const double a = t.data[r * 2], b = t.data[r * 2 + 1];
          t.data[r * 2] = static_cast<float>(std::cos(angle) * a - std::sin(angle) * b);
          t.data[r * 2 + 1] = static_cast<float>(std::sin(angle) * a + std::cos(angle) * b);
        }
        return t;
      };
      CHECK(std::abs(batch_contrastive(tape.constant(rotate(x)), tape.constant(rotate(y))).item() - base) < 1e-5);

      auto permute = [](const Tensor& t) {
        Tensor out = t;
        const int order[4] = {2, 0, 3, 1};
        for (int r = 0; r < 4; ++r)
          for (int k = 0; k < 2; ++k) out.data[r * 2 + k] = t.data[order[r] * 2 + k];
        return out;
      };
      CHECK(std::abs(batch_contrastive(tape.constant(permute(x)), tape.constant(permute(y))).item() - base) < 1e-6);
    }
  }
  SUBCASE("row mismatch") {
    Tape<float> tape;
    CHECK(kind_of([&] {
            batch_contrastive(tape.constant(random_matrix(rng, {3, 2})), tape.constant(random_matrix(rng, {2, 2})));
          }) == ErrorKind::batch_alignment);
  }
}

TEST_CASE("total_contrastive and final_loss") {
  Tape<float> tape;
  Rng rng(26);
  PerModality<std::optional<Var<float>>> proj;
  PerModality<Tensor> raw;
  for (auto m : kModalities) {
    raw[index_of(m)] = random_matrix(rng, {3, 4});
    proj[index_of(m)] = tape.constant(raw[index_of(m)]);
  }
  const double l_a = batch_contrastive(*proj[0], *proj[1]).item();
  const double l_b = batch_contrastive(*proj[2], *proj[3]).item();
  CHECK(total_contrastive(tape, proj, PresenceMask::all()).item() == doctest::Approx(l_a + l_b).epsilon(1e-7));
  CHECK(total_contrastive(tape, proj, PresenceMask::all().without(Modality::t1)).item() ==
        doctest::Approx(l_b).epsilon(1e-7));
  CHECK(total_contrastive(tape, proj, PresenceMask::only(Modality::t2)).item() == 0.0f);

  auto p = tape.constant(random_probs(rng, {3, 4, 2, 2}));
  auto y = tape.constant(random_onehot(rng, {3, 4, 2, 2}));
  LossWeights off;
  auto base = final_loss(p, y, proj, PresenceMask::all(), off, {});
  CHECK(base.contrastive == 0.0);
  CHECK(base.final_value == static_cast<float>(static_cast<float>(0.5 * base.dice) + static_cast<float>(0.5 * base.focal)));

  LossWeights on;
  on.beta = 1.0;
  auto with = final_loss(p, y, proj, PresenceMask::all(), on, {});
  CHECK(std::abs(with.final_value - (0.5 * with.dice + 0.5 * with.focal + with.contrastive)) < 1e-6);
  CHECK(with.contrastive == doctest::Approx(l_a + l_b).epsilon(1e-6));

  // N = 1: every pair term is exactly zero, so beta has no effect.
  PerModality<std::optional<Var<float>>> single;
  for (auto m : kModalities) single[index_of(m)] = tape.constant(random_matrix(rng, {1, 4}));
  auto p1 = tape.constant(random_probs(rng, {1, 4, 2, 2}));
  auto y1 = tape.constant(random_onehot(rng, {1, 4, 2, 2}));
  const double v0 = final_loss(p1, y1, single, PresenceMask::all(), off, {}).final_value;
  const double v1 = final_loss(p1, y1, single, PresenceMask::all(), on, {}).final_value;
  CHECK(std::abs(v0 - v1) < 1e-6);
}

TEST_CASE("loss properties") {
  Tape<float> tape;
  Rng rng(27);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_probs(rng, {3, 3, 2, 2});
    auto y = random_onehot(rng, {3, 3, 2, 2});
    const double d = dice_loss(tape.constant(p), tape.constant(y)).item();
    const double f = focal_loss(tape.constant(p), tape.constant(y), {}).item();
    CHECK(d >= 0.0);
    CHECK(d <= 1.0 + 1e-6);
    CHECK(f >= 0.0);
    // Batch permutation invariance: rotate samples 0->1->2->0.
    auto rotate = [](const Tensor& t) {
      Tensor out = t;
      const int64_t chunk = t.numel() / 3;
      for (int b = 0; b < 3; ++b)
        std::copy_n(t.data.begin() + b * chunk, chunk, out.data.begin() + ((b + 1) % 3) * chunk);
      return out;
    };
    CHECK(std::abs(dice_loss(tape.constant(rotate(p)), tape.constant(rotate(y))).item() - d) < 1e-6);
    CHECK(std::abs(focal_loss(tape.constant(rotate(p)), tape.constant(rotate(y)), {}).item() - f) < 1e-6);
  }
}
