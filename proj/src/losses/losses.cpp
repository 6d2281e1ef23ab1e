#include "refuseg/losses/losses.hpp"

#include <cmath>
#include <string>

namespace refuseg::loss {

using grad::BasicTensor;
using grad::shape_string;

void LossWeights::validate() const {
  require(w_dice >= 0.0 && w_focal >= 0.0 && beta >= 0.0, ErrorKind::configuration,
          "loss weights must be non-negative");
  require(temperature > 0.0, ErrorKind::configuration, "contrastive temperature must be positive");
}

void FocalParams::validate() const {
  require(alpha > 0.0 && alpha < 1.0, ErrorKind::configuration, "focal alpha must lie in (0,1)");
  require(gamma >= 0.0, ErrorKind::configuration, "focal gamma must be non-negative");
  require(clamp_eps > 0.0 && clamp_eps < 0.5, ErrorKind::configuration,
          "focal clamp_eps must lie in (0,0.5)");
}

namespace {

template <class T>
void check_prediction(Var<T> pred, Var<T> target, const char* op) {
  const auto& ps = pred.shape();
  require(ps.size() == 4 && ps[1] >= 2, ErrorKind::dimension,
          std::string(op) + ": prediction must be [N,C,H,W] with C >= 2, got " + shape_string(ps));
  require(ps == target.shape(), ErrorKind::dimension,
          std::string(op) + ": prediction " + shape_string(ps) + " vs target " +
              shape_string(target.shape()));
  const int64_t batch = ps[0], channels = ps[1], plane = ps[2] * ps[3];
  const auto& p = pred.value().data;
  const auto& y = target.value().data;
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < plane; ++i) {
      double total = 0.0;
      for (int64_t c = 0; c < channels; ++c) total += p[(b * channels + c) * plane + i];
      require(std::abs(total - 1.0) <= 1e-3, ErrorKind::data,
              std::string(op) + ": prediction channels do not sum to 1 (got " +
                  std::to_string(total) + ")");
    }
  for (auto v : y)
    require(v == T{0} || v == T{1}, ErrorKind::data, std::string(op) + ": target is not one-hot");
}

std::vector<int64_t> foreground_channels(int64_t channels) {
  std::vector<int64_t> out;
  for (int64_t c = 1; c < channels; ++c) out.push_back(c);
  return out;
}

}  // namespace

template <class T>
Var<T> dice_loss(Var<T> pred, Var<T> target_onehot) {
  check_prediction(pred, target_onehot, "dice_loss");
  const auto fg = foreground_channels(pred.dim(1));
  auto intersection = grad::pick(grad::sum_per_channel(grad::mul(pred, target_onehot)), fg);
  auto pred_sq = grad::pick(grad::sum_per_channel(grad::mul(pred, pred)), fg);
  auto target_sq = grad::pick(grad::sum_per_channel(grad::mul(target_onehot, target_onehot)), fg);
  auto numerator = grad::add_scalar(grad::scale(intersection, 2.0), kDiceSmoothing);
  auto denominator = grad::add_scalar(grad::add(pred_sq, target_sq), kDiceSmoothing);
  return grad::add_scalar(grad::scale(grad::mean(grad::div(numerator, denominator)), -1.0), 1.0);
}

template <class T>
Var<T> focal_loss(Var<T> pred, Var<T> target_onehot, const FocalParams& params) {
  params.validate();
  check_prediction(pred, target_onehot, "focal_loss");
  const double n = static_cast<double>(pred.numel());
  auto p = grad::clamp(pred, params.clamp_eps, 1.0 - params.clamp_eps);
  auto one_minus_p = grad::add_scalar(grad::scale(p, -1.0), 1.0);
  auto one_minus_y = grad::add_scalar(grad::scale(target_onehot, -1.0), 1.0);
  auto positive = grad::scale(
      grad::mul(grad::mul(grad::pow_scalar(one_minus_p, params.gamma), target_onehot), grad::log(p)),
      params.alpha);
  auto negative = grad::scale(
      grad::mul(grad::mul(grad::pow_scalar(p, params.gamma), one_minus_y), grad::log(one_minus_p)),
      1.0 - params.alpha);
  return grad::scale(grad::sum(grad::add(positive, negative)), -1.0 / n);
}

template <class T>
Var<T> pair_contrastive_term(Var<T> views, int64_t anchor, int64_t positive, double temperature) {
  require(views.shape().size() == 2, ErrorKind::dimension,
          "pair_contrastive_term: views must be [M,D], got " + shape_string(views.shape()));
  const int64_t rows = views.dim(0);
  require(rows >= 2, ErrorKind::dimension, "pair_contrastive_term: need at least 2 views");
  require(anchor >= 0 && anchor < rows && positive >= 0 && positive < rows && anchor != positive,
          ErrorKind::contract, "pair_contrastive_term: invalid anchor/positive indices");
  auto unit = grad::l2_normalize_rows(views);
  auto sim = grad::scale(grad::matmul_nt(unit, unit), 1.0 / temperature);
  std::vector<int64_t> others;
  for (int64_t k = 0; k < rows; ++k)
    if (k != anchor) others.push_back(anchor * rows + k);
  auto log_denominator = grad::log(grad::sum(grad::exp(grad::pick(sim, others))));
  return grad::sub(log_denominator, grad::pick(sim, {anchor * rows + positive}));
}

template <class T>
Var<T> batch_contrastive(Var<T> proj_x, Var<T> proj_y, double temperature) {
  require(proj_x.shape().size() == 2 && proj_y.shape().size() == 2, ErrorKind::dimension,
          "batch_contrastive: projections must be [N,D]");
  require(proj_x.dim(0) == proj_y.dim(0), ErrorKind::batch_alignment,
          "batch_contrastive: " + std::to_string(proj_x.dim(0)) + " vs " +
              std::to_string(proj_y.dim(0)) + " instances");
  require(proj_x.dim(1) == proj_y.dim(1), ErrorKind::dimension,
          "batch_contrastive: projection widths differ");
  const int64_t n = proj_x.dim(0), views = 2 * n;
  const std::array<Var<T>, 2> parts{proj_x, proj_y};
  auto unit = grad::l2_normalize_rows(grad::concat_rows<T>(parts));
  auto sim = grad::scale(grad::matmul_nt(unit, unit), 1.0 / temperature);
  auto off_diagonal = BasicTensor<T>::full({views, views}, T{1});
  for (int64_t i = 0; i < views; ++i) off_diagonal.data[i * views + i] = T{0};
  auto& tape = proj_x.tape();
  auto denominators = grad::sum_rows(grad::mul(grad::exp(sim), tape.constant(off_diagonal)));
  std::vector<int64_t> positives;
  for (int64_t i = 0; i < views; ++i) positives.push_back(i * views + (i + n) % views);
  auto total = grad::sub(grad::sum(grad::log(denominators)), grad::sum(grad::pick(sim, positives)));
  return grad::scale(total, 1.0 / static_cast<double>(views));
}

template <class T>
Var<T> total_contrastive(Tape<T>& tape, const PerModality<std::optional<Var<T>>>& projections,
                         const PresenceMask& presence, double temperature) {
  std::optional<Var<T>> total;
  for (const auto& [x, y] : kContrastivePairs) {
    if (!presence[x] || !presence[y]) continue;
    const auto& px = projections[index_of(x)];
    const auto& py = projections[index_of(y)];
    require(px.has_value() && py.has_value(), ErrorKind::contract,
            "total_contrastive: missing projection for a present modality");
    auto term = batch_contrastive(*px, *py, temperature);
    total = total ? grad::add(*total, term) : term;
  }
  if (!total) return tape.constant(BasicTensor<T>::scalar(T{0}));
  return grad::scale(*total, kPairReductionScale);
}

template <class T>
LossBreakdown<T> final_loss(Var<T> pred, Var<T> target_onehot,
                            const PerModality<std::optional<Var<T>>>& projections,
                            const PresenceMask& presence, const LossWeights& weights,
                            const FocalParams& focal) {
  weights.validate();
  LossBreakdown<T> out;
  auto dice = dice_loss(pred, target_onehot);
  auto foc = focal_loss(pred, target_onehot, focal);
  out.dice = dice.item();
  out.focal = foc.item();
  auto total = grad::add(grad::scale(dice, weights.w_dice), grad::scale(foc, weights.w_focal));
  if (weights.beta != 0.0) {
    auto con = total_contrastive(pred.tape(), projections, presence, weights.temperature);
    out.contrastive = con.item();
    total = grad::add(total, grad::scale(con, weights.beta));
  }
  out.total = total;
  out.final_value = total.item();
  return out;
}

#define REFUSEG_INSTANTIATE(T)                                                                 \
  template Var<T> dice_loss<T>(Var<T>, Var<T>);                                                \
  template Var<T> focal_loss<T>(Var<T>, Var<T>, const FocalParams&);                           \
  template Var<T> pair_contrastive_term<T>(Var<T>, int64_t, int64_t, double);                  \
  template Var<T> batch_contrastive<T>(Var<T>, Var<T>, double);                                \
  template Var<T> total_contrastive<T>(Tape<T>&, const PerModality<std::optional<Var<T>>>&,    \
                                       const PresenceMask&, double);                           \
  template LossBreakdown<T> final_loss<T>(Var<T>, Var<T>,                                      \
                                          const PerModality<std::optional<Var<T>>>&,           \
                                          const PresenceMask&, const LossWeights&,             \
                                          const FocalParams&);

REFUSEG_INSTANTIATE(float)
REFUSEG_INSTANTIATE(double)

#undef REFUSEG_INSTANTIATE

}  // namespace refuseg::loss
