#pragma once

#include <array>
#include <optional>
#include <utility>

#include "refuseg/gradcore/ops.hpp"
#include "refuseg/modality.hpp"

namespace refuseg::loss {

using grad::Tape;
using grad::Var;

struct LossWeights {
  double w_dice = 0.5;
  double w_focal = 0.5;
  // Contrastive switch/scale; 0 disables the term entirely.
  double beta = 0.0;
  // Cosine similarities are divided by this; 1 leaves them untouched.
  double temperature = 1.0;

  void validate() const;
};

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
  double clamp_eps = 1e-7;

  void validate() const;
};

inline constexpr double kDiceSmoothing = 1e-6;

// Modality pairs whose projections are contrasted against each other.
inline constexpr std::array<std::pair<Modality, Modality>, 2> kContrastivePairs{
    {{Modality::t1, Modality::t1c}, {Modality::t2, Modality::flair}}};

// Per-pair losses are summed (not averaged) into the contrastive total.
inline constexpr double kPairReductionScale = 1.0;

// 1 - (2 sum y*p + s) / (sum y^2 + sum p^2 + s) per foreground channel,
// averaged over channels 1..C-1. pred and target are [N,C,H,W].
template <class T>
Var<T> dice_loss(Var<T> pred, Var<T> target_onehot);

// Binary focal loss over every (batch, channel, pixel) term, averaged over all of them.
template <class T>
Var<T> focal_loss(Var<T> pred, Var<T> target_onehot, const FocalParams& params);

// -log(exp(sim(v_a, v_p)) / sum_{k != a} exp(sim(v_a, v_k))) with cosine similarity,
// over the rows of views[M,D].
template <class T>
Var<T> pair_contrastive_term(Var<T> views, int64_t anchor, int64_t positive,
                             double temperature = 1.0);

// Mean of both directed terms over the N instances of two aligned projections
// [N,D]; negatives are the other rows of this pair only.
template <class T>
Var<T> batch_contrastive(Var<T> proj_x, Var<T> proj_y, double temperature = 1.0);

// Sum of batch_contrastive over kContrastivePairs. Pairs with an absent member
// contribute zero.
template <class T>
Var<T> total_contrastive(Tape<T>& tape, const PerModality<std::optional<Var<T>>>& projections,
                         const PresenceMask& presence, double temperature = 1.0);

template <class T>
struct LossBreakdown {
  Var<T> total;
  double dice = 0.0;
  double focal = 0.0;
  double contrastive = 0.0;
  double final_value = 0.0;
};

// w_dice * dice + w_focal * focal + beta * contrastive. With beta == 0 the
// contrastive term is not evaluated and reported as 0.
template <class T>
LossBreakdown<T> final_loss(Var<T> pred, Var<T> target_onehot,
                            const PerModality<std::optional<Var<T>>>& projections,
                            const PresenceMask& presence, const LossWeights& weights,
                            const FocalParams& focal);

}  // namespace refuseg::loss
