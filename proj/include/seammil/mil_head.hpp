#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "seammil/cam_engine.hpp"
#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/equivariance.hpp"

// Feature-space multiple-instance learning head. Every spatial cell of the
// fused K-channel map is one instance; a sigmoid attention score gates each
// instance before mean pooling and a softmax classifier.

namespace seammil {

template <typename T>
struct InstanceBag {
  Grid<T> fused;  // K x H x W

  int k() const { return fused.channels(); }
  int instances() const { return fused.plane(); }
  std::pair<int, int> source_dims() const { return {fused.height(), fused.width()}; }
};

template <typename T>
struct AttentionWeights {
  Vector<T> weights;  // one per instance, each in (0, 1)
};

template <typename T>
struct MilParams {
  Matrix<T> fuse;        // K x 2L
  Vector<T> w1;          // D
  Matrix<T> w2;          // D x K
  Matrix<T> classifier;  // 2 x K
  Vector<T> bias;        // 2

  int k() const { return static_cast<int>(fuse.rows()); }
  int d() const { return static_cast<int>(w2.rows()); }

  void validate() const {
    if (w2.cols() != fuse.rows() || classifier.cols() != fuse.rows()) {
      throw DimensionError("MIL parameters disagree on K");
    }
    if (w1.size() != w2.rows() || w1.size() < 1) throw DimensionError("MIL w1 must have D >= 1 entries matching w2");
    if (classifier.rows() != 2 || bias.size() != 2) throw DimensionError("MIL classifier must have two outputs");
  }
};

template <typename T>
struct BagInputs {
  Grid<T> aligned_af;  // affine-branch features warped back onto the original grid
  Grid<T> stacked;     // 2L x H x W
};

// Stacks f_orig with the inverse-warped affine-branch features and projects
// the 2L channels to K with a 1x1 convolution.
template <typename T>
InstanceBag<T> build_instance_bag(const FeatureMap<T>& f_orig, const FeatureMap<T>& f_af, const AffineSpec& spec,
                                  const MilParams<T>& params, BagInputs<T>* cache = nullptr) {
  if (f_af.channels() != f_orig.channels()) {
    throw DimensionError("build_instance_bag: branch feature maps have " + std::to_string(f_orig.channels()) +
                         " and " + std::to_string(f_af.channels()) + " channels");
  }
  if (params.fuse.cols() != 2 * f_orig.channels()) {
    throw DimensionError("build_instance_bag: fuse weights expect " + std::to_string(params.fuse.cols()) +
                         " channels, stacked features have " + std::to_string(2 * f_orig.channels()));
  }
  const int h = f_orig.height();
  const int w = f_orig.width();
  const int l = f_orig.channels();
  BagInputs<T> local;
  BagInputs<T>& c = cache ? *cache : local;
  c.aligned_af = warp_to(f_af.data, spec.inverse(), h, w);
  c.stacked = Grid<T>(2 * l, h, w);
  c.stacked.matrix().topRows(l) = f_orig.data.matrix();
  c.stacked.matrix().bottomRows(l) = c.aligned_af.matrix();
  InstanceBag<T> bag{Grid<T>(params.k(), h, w)};
  bag.fused.matrix().noalias() = params.fuse * c.stacked.matrix();
  return bag;
}

template <typename T>
struct BagGrad {
  Grid<T> d_f_orig;
  Grid<T> d_f_af;
  Matrix<T> d_fuse;
};

template <typename T>
BagGrad<T> build_instance_bag_backward(const FeatureMap<T>& f_af, const AffineSpec& spec, const MilParams<T>& params,
                                       const BagInputs<T>& cache, const Grid<T>& d_fused) {
  const int l = f_af.channels();
  const int h = d_fused.height();
  const int w = d_fused.width();
  BagGrad<T> g;
  g.d_fuse = d_fused.matrix() * cache.stacked.matrix().transpose();
  const Matrix<T> d_stacked = params.fuse.transpose() * d_fused.matrix();
  g.d_f_orig = Grid<T>::from_matrix(d_stacked.topRows(l), h, w);
  const Grid<T> d_aligned = Grid<T>::from_matrix(d_stacked.bottomRows(l), h, w);
  g.d_f_af = warp_to_backward(f_af.height(), f_af.width(), spec.inverse(), d_aligned);
  return g;
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
struct AttentionCache {
  Matrix<T> pre;     // w2 f, D x HW
  Vector<T> scores;  // w1^T relu(pre)
};

// A = sigmoid(w1^T relu(w2 f)), evaluated per instance column of f.
template <typename T>
AttentionWeights<T> attention_weights(const InstanceBag<T>& bag, const MilParams<T>& params,
                                      AttentionCache<T>* cache = nullptr) {
  if (params.w2.cols() != bag.k()) {
    throw DimensionError("attention_weights: w2 expects K=" + std::to_string(params.w2.cols()) + ", bag has " +
                         std::to_string(bag.k()));
  }
  if (params.w1.size() != params.w2.rows()) throw DimensionError("attention_weights: w1/w2 disagree on D");
  AttentionCache<T> local;
  AttentionCache<T>& c = cache ? *cache : local;
  c.pre = params.w2 * bag.fused.matrix();
  c.scores = (params.w1.transpose() * c.pre.cwiseMax(T(0))).transpose();
  AttentionWeights<T> a{Vector<T>(c.scores.size())};
  for (Eigen::Index i = 0; i < a.weights.size(); ++i) a.weights(i) = sigmoid(c.scores(i));
  return a;
}

template <typename T>
struct AttentionGrad {
  Grid<T> d_bag;
  Vector<T> d_w1;
  Matrix<T> d_w2;
};

template <typename T>
AttentionGrad<T> attention_weights_backward(const InstanceBag<T>& bag, const MilParams<T>& params,
                                            const AttentionCache<T>& cache, const AttentionWeights<T>& a,
                                            const Vector<T>& d_weights) {
  const Vector<T> ds = d_weights.cwiseProduct(a.weights.cwiseProduct((Vector<T>::Ones(a.weights.size()) - a.weights)));
  const Matrix<T> hidden = cache.pre.cwiseMax(T(0));
  AttentionGrad<T> g;
  g.d_w1 = hidden * ds;
  Matrix<T> d_pre = params.w1 * ds.transpose();
  for (Eigen::Index i = 0; i < d_pre.size(); ++i) {
    if (!(cache.pre.data()[i] > T(0))) d_pre.data()[i] = T(0);
  }
  g.d_w2 = d_pre * bag.fused.matrix().transpose();
  g.d_bag = Grid<T>(bag.k(), bag.fused.height(), bag.fused.width());
  g.d_bag.matrix().noalias() = params.w2.transpose() * d_pre;
  return g;
}

// Gates every channel of instance i by a[i].
template <typename T>
InstanceBag<T> apply_attention(const InstanceBag<T>& bag, const AttentionWeights<T>& a) {
  if (a.weights.size() != bag.instances()) {
    throw DimensionError("apply_attention: " + std::to_string(a.weights.size()) + " weights for " +
                         std::to_string(bag.instances()) + " instances");
  }
  InstanceBag<T> out{bag.fused};
  out.fused.matrix() *= a.weights.asDiagonal();
  return out;
}

template <typename T>
struct GateGrad {
  Grid<T> d_bag;
  Vector<T> d_weights;
};

template <typename T>
GateGrad<T> apply_attention_backward(const InstanceBag<T>& bag, const AttentionWeights<T>& a, const Grid<T>& d_out) {
  GateGrad<T> g;
  g.d_bag = d_out;
  g.d_bag.matrix() *= a.weights.asDiagonal();
  g.d_weights = d_out.matrix().cwiseProduct(bag.fused.matrix()).colwise().sum().transpose();
  return g;
}

template <typename T>
Vector<T> softmax(const Vector<T>& z) {
  const T m = z.maxCoeff();
  Vector<T> e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

// Mean-pools the instances and applies the fully-connected layer.
template <typename T>
Vector<T> mil_logits(const InstanceBag<T>& gated, const MilParams<T>& params) {
  if (params.classifier.cols() != gated.k()) throw DimensionError("mil_logits: classifier/bag K mismatch");
  const Vector<T> pooled = gated.fused.matrix().rowwise().mean();
  return params.classifier * pooled + params.bias;
}

template <typename T>
Vector<T> mil_classify(const InstanceBag<T>& gated, const MilParams<T>& params) {
  return softmax(mil_logits(gated, params));
}

template <typename T>
struct ClassifierGrad {
  Grid<T> d_gated;
  Matrix<T> d_classifier;
  Vector<T> d_bias;
};

template <typename T>
ClassifierGrad<T> mil_logits_backward(const InstanceBag<T>& gated, const MilParams<T>& params,
                                      const Vector<T>& d_logits) {
  const Vector<T> pooled = gated.fused.matrix().rowwise().mean();
  ClassifierGrad<T> g;
  g.d_classifier = d_logits * pooled.transpose();
  g.d_bias = d_logits;
  const Vector<T> d_pooled = params.classifier.transpose() * d_logits / static_cast<T>(gated.instances());
  g.d_gated = Grid<T>(gated.k(), gated.fused.height(), gated.fused.width());
  g.d_gated.matrix().colwise() = d_pooled;
  return g;
}

}  // namespace seammil
