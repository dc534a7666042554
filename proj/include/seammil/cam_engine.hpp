#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/nn/layers.hpp"

// Class activation maps: projection of backbone features to per-class maps,
// max-normalization, pixel-affinity refinement and pooling to logits.
// Every forward op has a matching *_backward that returns input gradients.

namespace seammil {

inline constexpr double kCosineEps = 1e-8;
inline constexpr double kCamNormEps = 1e-5;
inline constexpr int kCamClasses = 2;  // background, lesion

template <typename T>
struct FeatureMap {
  Grid<T> data;
  int stride = 1;  // input pixels per feature cell

  int channels() const { return data.channels(); }
  int height() const { return data.height(); }
  int width() const { return data.width(); }
};

enum class CamKind { original, refined };

template <typename T>
struct ActivationMap {
  Grid<T> data;
  CamKind kind = CamKind::original;
  bool normalized = false;

  int classes() const { return data.channels(); }
  int height() const { return data.height(); }
  int width() const { return data.width(); }
};

// Post-ReLU cosine affinity between the HW cells of an embedded map.
template <typename T>
struct CorrelationMatrix {
  Matrix<T> data;
  Vector<T> row_sums;

  Eigen::Index cells() const { return data.rows(); }
};

template <typename T>
struct CamHeadParams {
  Matrix<T> projection;  // C x L
  Matrix<T> embedding;   // E x L

  void validate() const {
    if (projection.rows() != kCamClasses) throw DimensionError("CAM projection must have 2 class rows");
    if (embedding.cols() != projection.cols()) throw DimensionError("embedding and projection disagree on L");
    if (embedding.rows() >= embedding.cols()) throw ConfigError("embedding must reduce channels (E < L)");
    if (!projection.allFinite() || !embedding.allFinite()) throw NumericError("non-finite CAM head parameters");
  }
};

namespace detail {

template <typename T>
Grid<T> apply_1x1(const Grid<T>& x, const Matrix<T>& w, const char* what) {
  if (w.cols() != x.channels()) {
    throw DimensionError(std::string(what) + ": weights expect " + std::to_string(w.cols()) +
                         " channels, features have " + std::to_string(x.channels()));
  }
  Grid<T> y(static_cast<int>(w.rows()), x.height(), x.width());
  y.matrix().noalias() = w * x.matrix();
  return y;
}

}  // namespace detail

template <typename T>
ActivationMap<T> normalize_cam(const ActivationMap<T>& raw) {
  ActivationMap<T> out{raw.data, raw.kind, true};
  for (int c = 0; c < out.classes(); ++c) {
    auto ch = out.data.channel(c);
    T peak = T(0);
    for (auto& v : ch) {
      v = std::max(v, T(0));
      peak = std::max(peak, v);
    }
    const T denom = peak + T(kCamNormEps);
    for (auto& v : ch) v /= denom;
  }
  return out;
}

// Gradient through relu(x) / (max relu(x) + eps), including the max term.
template <typename T>
Grid<T> normalize_cam_backward(const ActivationMap<T>& raw, const Grid<T>& d_normalized) {
  raw.data.require_same_shape(d_normalized, "normalize_cam_backward");
  Grid<T> dx(raw.data.channels(), raw.data.height(), raw.data.width());
  for (int c = 0; c < raw.classes(); ++c) {
    const auto x = raw.data.channel(c);
    const auto dy = d_normalized.channel(c);
    auto g = dx.channel(c);
    std::size_t arg = 0;
    T peak = T(0);
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (x[k] > peak) {
        peak = x[k];
        arg = k;
      }
    }
    const T denom = peak + T(kCamNormEps);
    T through_max = T(0);
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (x[k] > T(0)) {
        g[k] = dy[k] / denom;
        through_max += dy[k] * x[k];
      }
    }
    if (peak > T(0)) g[arg] -= through_max / (denom * denom);
  }
  return dx;
}

// Raw (or, with normalize, max-normalized) class maps from backbone features.
template <typename T>
ActivationMap<T> compute_cam(const FeatureMap<T>& features, const CamHeadParams<T>& head, bool normalize = false) {
  ActivationMap<T> raw{detail::apply_1x1(features.data, head.projection, "compute_cam"), CamKind::original, false};
  return normalize ? normalize_cam(raw) : raw;
}

template <typename T>
struct ProjectionGrad {
  Grid<T> d_features;
  Matrix<T> d_weight;
};

// Gradient of the raw (un-normalized) CAM projection.
template <typename T>
ProjectionGrad<T> compute_cam_backward(const FeatureMap<T>& features, const CamHeadParams<T>& head,
                                       const Grid<T>& d_cam) {
  ProjectionGrad<T> g;
  g.d_weight = d_cam.matrix() * features.data.matrix().transpose();
  g.d_features = Grid<T>(features.channels(), features.height(), features.width());
  g.d_features.matrix().noalias() = head.projection.transpose() * d_cam.matrix();
  return g;
}

template <typename T>
FeatureMap<T> embed_features(const FeatureMap<T>& features, const CamHeadParams<T>& head) {
  return FeatureMap<T>{detail::apply_1x1(features.data, head.embedding, "embed_features"), features.stride};
}

template <typename T>
ProjectionGrad<T> embed_features_backward(const FeatureMap<T>& features, const CamHeadParams<T>& head,
                                          const Grid<T>& d_embedded) {
  ProjectionGrad<T> g;
  g.d_weight = d_embedded.matrix() * features.data.matrix().transpose();
  g.d_features = Grid<T>(features.channels(), features.height(), features.width());
  g.d_features.matrix().noalias() = head.embedding.transpose() * d_embedded.matrix();
  return g;
}

// Corr(i, j) = max(0, cos(e_i, e_j)); the diagonal is fixed at 1.
template <typename T>
CorrelationMatrix<T> pixel_correlation(const FeatureMap<T>& embedded) {
  const auto e = embedded.data.matrix();
  const Eigen::Index n = e.cols();
  const Matrix<T> gram = e.transpose() * e;
  const Vector<T> norms = gram.diagonal().cwiseMax(T(0)).cwiseSqrt();
  CorrelationMatrix<T> corr;
  corr.data.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) {
        corr.data(i, j) = T(1);
        continue;
      }
      const T denom = std::max(norms(i) * norms(j), T(kCosineEps));
      corr.data(i, j) = std::max(gram(i, j) / denom, T(0));
    }
  }
  corr.row_sums = corr.data.rowwise().sum();
  return corr;
}

template <typename T>
Grid<T> pixel_correlation_backward(const FeatureMap<T>& embedded, const CorrelationMatrix<T>& corr,
                                   const Matrix<T>& d_corr) {
  const auto e = embedded.data.matrix();
  const Eigen::Index n = e.cols();
  if (d_corr.rows() != n || d_corr.cols() != n) throw DimensionError("pixel_correlation_backward: d_corr shape");
  const Vector<T> norms = e.colwise().norm().transpose();
  // Corr(i,j) and Corr(j,i) share one cosine, so their upstream grads add.
  Matrix<T> q = Matrix<T>::Zero(n, n);
  Vector<T> self = Vector<T>::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j || !(corr.data(i, j) > T(0))) continue;
      const T g = d_corr(i, j) + d_corr(j, i);
      const T nn = norms(i) * norms(j);
      if (nn >= T(kCosineEps)) {
        q(i, j) = g / nn;
        self(i) += g * corr.data(i, j) / (norms(i) * norms(i));
      } else {
        q(i, j) = g / T(kCosineEps);
      }
    }
  }
  Grid<T> de(embedded.channels(), embedded.height(), embedded.width());
  de.matrix().noalias() = e * q.transpose();
  de.matrix() -= e * self.asDiagonal();
  return de;
}

// refined[c, i] = sum_j Corr(i, j) cam[c, j] / sum_j Corr(i, j)
template <typename T>
ActivationMap<T> refine_cam(const ActivationMap<T>& cam, const CorrelationMatrix<T>& corr) {
  if (corr.cells() != cam.data.plane()) {
    throw DimensionError("refine_cam: CAM has " + std::to_string(cam.data.plane()) + " cells, affinity has " +
                         std::to_string(corr.cells()));
  }
  for (Eigen::Index i = 0; i < corr.row_sums.size(); ++i) {
    if (!(corr.row_sums(i) > T(0))) {
      throw DegenerateAffinityError("refine_cam: affinity row " + std::to_string(i) + " sums to zero");
    }
  }
  ActivationMap<T> out{Grid<T>(cam.classes(), cam.height(), cam.width()), CamKind::refined, cam.normalized};
  out.data.matrix().noalias() = cam.data.matrix() * corr.data.transpose();
  out.data.matrix() *= corr.row_sums.cwiseInverse().asDiagonal();
  return out;
}

template <typename T>
struct RefineGrad {
  Grid<T> d_cam;
  Matrix<T> d_corr;
};

template <typename T>
RefineGrad<T> refine_cam_backward(const ActivationMap<T>& cam, const CorrelationMatrix<T>& corr,
                                  const ActivationMap<T>& refined, const Grid<T>& d_refined) {
  refined.data.require_same_shape(d_refined, "refine_cam_backward");
  const Vector<T> inv = corr.row_sums.cwiseInverse();
  const Matrix<T> scaled = d_refined.matrix() * inv.asDiagonal();  // dR[c,i] / N_i
  RefineGrad<T> g;
  g.d_cam = Grid<T>(cam.classes(), cam.height(), cam.width());
  g.d_cam.matrix().noalias() = scaled * corr.data;
  const Vector<T> bias = (scaled.cwiseProduct(refined.data.matrix())).colwise().sum().transpose();
  g.d_corr = scaled.transpose() * cam.data.matrix();
  g.d_corr.colwise() -= bias;
  return g;
}

// Adaptive average pool to 1x1: one logit per class.
template <typename T>
Vector<T> cam_to_logits(const ActivationMap<T>& cam) {
  return cam.data.matrix().rowwise().mean();
}

template <typename T>
Grid<T> cam_to_logits_backward(const ActivationMap<T>& cam, const Vector<T>& d_logits) {
  Grid<T> d(cam.classes(), cam.height(), cam.width());
  const T inv = T(1) / static_cast<T>(cam.data.plane());
  for (int c = 0; c < cam.classes(); ++c) {
    for (auto& v : d.channel(c)) v = d_logits(c) * inv;
  }
  return d;
}

}  // namespace seammil
