#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/mil_head.hpp"

namespace seammil {

inline constexpr double kProbClamp = 1e-12;

// Presence bits for the CAM classes. Every image has background.
struct MultiLabel {
  bool background = true;
  bool lesion = false;

  friend bool operator==(const MultiLabel&, const MultiLabel&) = default;
};

inline MultiLabel encode_labels(bool is_rdr) { return MultiLabel{true, is_rdr}; }
inline bool decode_labels(const MultiLabel& m) { return m.lesion; }

// Weights in the order multi_class, er, ecr, cross_entropy.
using LossWeights = std::array<double, 4>;
inline constexpr LossWeights kUnitLossWeights{1.0, 1.0, 1.0, 1.0};

template <typename T>
struct LossBreakdown {
  T multi_class = T(0);
  T er = T(0);
  T ecr = T(0);
  T cross_entropy = T(0);
  T total = T(0);

  std::array<T, 4> parts() const { return {multi_class, er, ecr, cross_entropy}; }

  LossBreakdown& operator+=(const LossBreakdown& o) {
    multi_class += o.multi_class;
    er += o.er;
    ecr += o.ecr;
    cross_entropy += o.cross_entropy;
    total += o.total;
    return *this;
  }

  LossBreakdown& operator/=(T s) {
    multi_class /= s;
    er /= s;
    ecr /= s;
    cross_entropy /= s;
    total /= s;
    return *this;
  }

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

template <typename T>
T total_loss(const LossBreakdown<T>& parts, const LossWeights& w = kUnitLossWeights) {
  return static_cast<T>(w[0]) * parts.multi_class + static_cast<T>(w[1]) * parts.er +
         static_cast<T>(w[2]) * parts.ecr + static_cast<T>(w[3]) * parts.cross_entropy;
}

// -log p[label] with p clamped to [1e-12, 1 - 1e-12].
template <typename T>
T cross_entropy(const Vector<T>& probs, bool label) {
  if (probs.size() != 2) throw DimensionError("cross_entropy expects two class probabilities");
  const T p = std::clamp(probs(label ? 1 : 0), T(kProbClamp), T(1) - T(kProbClamp));
  return -std::log(p);
}

// d cross_entropy(softmax(z)) / dz
template <typename T>
Vector<T> softmax_cross_entropy_grad(const Vector<T>& probs, bool label) {
  Vector<T> g = probs;
  g(label ? 1 : 0) -= T(1);
  return g;
}

template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

namespace detail {

inline int first_supervised_class(bool include_background) { return include_background ? 0 : 1; }

}  // namespace detail

// Mean over the supervised classes of -[y log s(z) + (1-y) log(1 - s(z))].
// Class 0 is background, class 1 lesion; background is only supervised when
// include_background is set.
template <typename T>
T multilabel_soft_margin(const Vector<T>& logits, const MultiLabel& labels, bool include_background = false) {
  if (logits.size() != kCamClasses) throw DimensionError("multilabel_soft_margin expects two class logits");
  const bool y[2] = {labels.background, labels.lesion};
  const int first = detail::first_supervised_class(include_background);
  T sum = T(0);
  for (int c = first; c < kCamClasses; ++c) {
    sum += y[c] ? softplus(-logits(c)) : softplus(logits(c));
  }
  return sum / static_cast<T>(kCamClasses - first);
}

template <typename T>
Vector<T> multilabel_soft_margin_grad(const Vector<T>& logits, const MultiLabel& labels,
                                      bool include_background = false) {
  const bool y[2] = {labels.background, labels.lesion};
  const int first = detail::first_supervised_class(include_background);
  Vector<T> g = Vector<T>::Zero(logits.size());
  for (int c = first; c < kCamClasses; ++c) {
    g(c) = (sigmoid(logits(c)) - (y[c] ? T(1) : T(0))) / static_cast<T>(kCamClasses - first);
  }
  return g;
}

}  // namespace seammil
