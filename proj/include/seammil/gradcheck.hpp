#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "seammil/cam_engine.hpp"
#include "seammil/core/random.hpp"
#include "seammil/equivariance.hpp"
#include "seammil/mil_head.hpp"
#include "seammil/objective.hpp"

// Central finite-difference checks of every hand-written backward pass,
// evaluated in double precision on random inputs kept away from the ReLU
// and L1 kinks.

namespace seammil::gradcheck {

inline constexpr double kStep = 1e-4;
inline constexpr double kTolerance = 1e-4;
// Denominator floor for the relative error of near-zero gradient entries.
inline constexpr double kRelativeFloor = 1e-6;
// Minimum distance from a kink that sampled inputs must keep.
inline constexpr double kKinkMargin = 2e-2;
// Lower bound on CAM maxima and embedding norms: both appear as divisors and
// the truncation error of the central difference grows with their inverse.
inline constexpr double kMinScale = 0.5;

struct Result {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
  bool passed = false;
};

// dLoss/dx by central differences; loss() must read x.
inline std::vector<double> numeric_gradient(std::span<double> x, const std::function<double()>& loss,
                                            double h = kStep) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = loss();
    x[i] = keep - h;
    const double down = loss();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), kRelativeFloor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// Accumulates per-input comparisons into one named result.
class Checker {
 public:
  explicit Checker(std::string name) { result_.name = std::move(name); }

  void compare(std::span<double> x, std::span<const double> analytic, const std::function<double()>& loss) {
    const auto numeric = numeric_gradient(x, loss);
    result_.max_rel_error = std::max(result_.max_rel_error, max_relative_error(analytic, numeric));
    result_.n_checked += x.size();
  }

  Result finish() {
    result_.passed = result_.n_checked > 0 && result_.max_rel_error < kTolerance;
    return result_;
  }

 private:
  Result result_;
};

namespace detail {

inline void fill_uniform(std::span<double> v, Rng& rng, double lo, double hi) {
  for (auto& x : v) x = rng.uniform(lo, hi);
}

inline Grid<double> random_grid(Rng& rng, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
  Grid<double> g(c, h, w);
  fill_uniform(g.values(), rng, lo, hi);
  return g;
}

inline Matrix<double> random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

// b = a + offset with |offset| in [margin, margin + 0.3] and random sign.
inline Grid<double> offset_from(const Grid<double>& a, Rng& rng) {
  Grid<double> b = a;
  for (auto& v : b.values()) {
    const double mag = rng.uniform(5 * kKinkMargin, 5 * kKinkMargin + 0.3);
    v += rng.bernoulli(0.5) ? mag : -mag;
  }
  return b;
}

inline double weighted_sum(const Grid<double>& g, const Grid<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * w[i];
  return s;
}

inline std::span<const double> as_span(const Matrix<double>& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<double> as_span(Matrix<double>& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<const double> as_span(const Vector<double>& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<double> as_span(Vector<double>& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }

}  // namespace detail

inline Result check_er_loss(Rng& rng) {
  Checker chk("er_loss");
  for (const AffineSpec& spec : {AffineSpec::hflip(), AffineSpec::rescale(0.5), AffineSpec::rotation(90)}) {
    ActivationMap<double> orig{detail::random_grid(rng, 2, 6, 6, 0.0, 1.0), CamKind::original, true};
    const Grid<double> moved = apply_affine(orig.data, spec);
    ActivationMap<double> af{detail::offset_from(moved, rng), CamKind::original, true};
    const auto g = er_loss_backward(orig, af, spec);
    auto loss = [&] { return er_loss(orig, af, spec); };
    chk.compare(orig.data.values(), g.d_orig.values(), loss);
    chk.compare(af.data.values(), g.d_af.values(), loss);
  }
  return chk.finish();
}

inline Result check_ecr_loss(Rng& rng) {
  Checker chk("ecr_loss");
  for (const AffineSpec& spec : {AffineSpec::vflip(), AffineSpec::rescale(0.5)}) {
    ActivationMap<double> orig{detail::random_grid(rng, 2, 6, 6, 0.0, 1.0), CamKind::original, true};
    ActivationMap<double> rm_orig{detail::random_grid(rng, 2, 6, 6, 0.0, 1.0), CamKind::refined, true};
    ActivationMap<double> rm_af{detail::offset_from(apply_affine(orig.data, spec), rng), CamKind::refined, true};
    ActivationMap<double> af{detail::offset_from(apply_affine(rm_orig.data, spec), rng), CamKind::original, true};
    const auto g = ecr_loss_backward(orig, rm_orig, af, rm_af, spec);
    auto loss = [&] { return ecr_loss(orig, rm_orig, af, rm_af, spec); };
    chk.compare(orig.data.values(), g.d_orig.values(), loss);
    chk.compare(rm_orig.data.values(), g.d_rm_orig.values(), loss);
    chk.compare(af.data.values(), g.d_af.values(), loss);
    chk.compare(rm_af.data.values(), g.d_rm_af.values(), loss);
  }
  return chk.finish();
}

inline Result check_multilabel_soft_margin(Rng& rng) {
  Checker chk("multilabel_soft_margin");
  for (int trial = 0; trial < 8; ++trial) {
    Vector<double> z(2);
    z << rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0);
    const MultiLabel label = encode_labels(trial % 2 == 0);
    const bool bg = trial % 4 >= 2;
    const Vector<double> g = multilabel_soft_margin_grad(z, label, bg);
    chk.compare(detail::as_span(z), detail::as_span(g), [&] { return multilabel_soft_margin(z, label, bg); });
  }
  return chk.finish();
}

inline Result check_cross_entropy(Rng& rng) {
  Checker chk("cross_entropy");
  for (int trial = 0; trial < 8; ++trial) {
    Vector<double> z(2);
    z << rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0);
    const bool label = trial % 2 == 1;
    const Vector<double> g = softmax_cross_entropy_grad(softmax(z), label);
    chk.compare(detail::as_span(z), detail::as_span(g), [&] { return cross_entropy(softmax(z), label); });
  }
  return chk.finish();
}

// Refinement through the embedding/affinity path and spatial pooling, on
// 3-channel 4x4 features with a normalized 2-class CAM.
inline Result check_refinement(Rng& rng) {
  Checker chk("refine_cam");
  for (int trial = 0; trial < 4; ++trial) {
    FeatureMap<double> f{detail::random_grid(rng, 3, 4, 4), 1};
    CamHeadParams<double> head{detail::random_matrix(rng, 2, 3), detail::random_matrix(rng, 2, 3)};
    ActivationMap<double> cam{detail::random_grid(rng, 2, 4, 4, 0.0, 1.0), CamKind::original, true};
    const Grid<double> w_ref = detail::random_grid(rng, 2, 4, 4);
    const Vector<double> w_logit = detail::random_matrix(rng, 2, 1);
    // Resample embedding weights until every pixel embedding is well away from
    // zero and every cosine well away from the affinity ReLU kink.
    auto kink_free = [&] {
      const auto emb = embed_features(f, head);
      const auto e = emb.data.matrix();
      const Vector<double> n = e.colwise().norm().transpose();
      if (n.minCoeff() < kMinScale) return false;
      for (Eigen::Index i = 0; i < n.size(); ++i)
        for (Eigen::Index j = i + 1; j < n.size(); ++j)
          if (std::abs(e.col(i).dot(e.col(j))) / (n(i) * n(j)) < kKinkMargin) return false;
      return true;
    };
    for (int attempts = 0; !kink_free(); ++attempts) {
      if (attempts > 100000) throw NumericError("gradcheck: could not sample kink-free embeddings");
      if (attempts % 1000 == 999) f.data = detail::random_grid(rng, 3, 4, 4);
      head.embedding = detail::random_matrix(rng, 2, 3, 2.0);
    }
    auto loss = [&] {
      const auto corr = pixel_correlation(embed_features(f, head));
      return detail::weighted_sum(refine_cam(cam, corr).data, w_ref) + w_logit.dot(cam_to_logits(cam));
    };
    const auto emb = embed_features(f, head);
    const auto corr = pixel_correlation(emb);
    const auto refined = refine_cam(cam, corr);
    const auto rg = refine_cam_backward(cam, corr, refined, w_ref);
    const auto eg = embed_features_backward(f, head, pixel_correlation_backward(emb, corr, rg.d_corr));
    Grid<double> d_cam = rg.d_cam;
    d_cam += cam_to_logits_backward(cam, w_logit);
    chk.compare(cam.data.values(), d_cam.values(), loss);
    chk.compare(detail::as_span(head.embedding), detail::as_span(eg.d_weight), loss);
  }
  return chk.finish();
}

// Projection to a raw CAM, ReLU/max normalization and spatial pooling.
inline Result check_cam_projection(Rng& rng) {
  Checker chk("compute_cam");
  for (int trial = 0; trial < 4; ++trial) {
    FeatureMap<double> f{detail::random_grid(rng, 3, 4, 4), 1};
    CamHeadParams<double> head{detail::random_matrix(rng, 2, 3), detail::random_matrix(rng, 2, 3)};
    const Grid<double> w_cam = detail::random_grid(rng, 2, 4, 4);
    const Vector<double> w_logit = detail::random_matrix(rng, 2, 1);
    // Pixel sitting on the ReLU kink, on a near-tie with its channel max, or
    // a channel whose max is too small to divide by; -1 if none.
    auto offending_pixel = [&]() -> int {
      const auto raw = compute_cam(f, head);
      for (int c = 0; c < 2; ++c) {
        const auto ch = raw.data.channel(c);
        const auto top = static_cast<std::size_t>(std::max_element(ch.begin(), ch.end()) - ch.begin());
        if (ch[top] < kMinScale) return static_cast<int>(top);
        for (std::size_t i = 0; i < ch.size(); ++i) {
          if (std::abs(ch[i]) < kKinkMargin) return static_cast<int>(i);
          if (i != top && ch[top] - ch[i] < kKinkMargin) return static_cast<int>(i);
        }
      }
      return -1;
    };
    // Redraw single pixels; a head whose channel maxima cannot reach
    // kMinScale is replaced after a bounded number of tries.
    for (int attempts = 0;; ++attempts) {
      const int bad = offending_pixel();
      if (bad < 0) break;
      if (attempts > 100000) throw NumericError("gradcheck: could not sample kink-free CAM inputs");
      if (attempts % 1000 == 999) head.projection = detail::random_matrix(rng, 2, 3);
      for (int c = 0; c < 3; ++c) f.data(c, bad / 4, bad % 4) = rng.uniform(-1.0, 1.0);
    }
    auto loss = [&] {
      const auto raw = compute_cam(f, head);
      return detail::weighted_sum(normalize_cam(raw).data, w_cam) + w_logit.dot(cam_to_logits(raw));
    };
    const auto raw = compute_cam(f, head);
    Grid<double> d_raw = normalize_cam_backward(raw, w_cam);
    d_raw += cam_to_logits_backward(raw, w_logit);
    const auto pg = compute_cam_backward(f, head, d_raw);
    chk.compare(detail::as_span(head.projection), detail::as_span(pg.d_weight), loss);
    chk.compare(f.data.values(), pg.d_features.values(), loss);
  }
  return chk.finish();
}

// MIL path: fuse -> attention -> gating -> mean pool -> classifier -> CE.
inline Result check_mil_path(Rng& rng) {
  Checker chk("mil_path");
  const AffineSpec spec = AffineSpec::rescale(0.4);
  for (int trial = 0; trial < 3; ++trial) {
    const int l = 3, k = 4, d = 3, h = 5;
    const int h_af = rescaled_size(h, 0.4);
    FeatureMap<double> f_orig{detail::random_grid(rng, l, h, h), 1};
    FeatureMap<double> f_af{detail::random_grid(rng, l, h_af, h_af), 1};
    MilParams<double> p{detail::random_matrix(rng, k, 2 * l), Vector<double>::Zero(d), detail::random_matrix(rng, d, k),
                        detail::random_matrix(rng, 2, k), Vector<double>::Zero(2)};
    detail::fill_uniform(detail::as_span(p.w1), rng, -1.0, 1.0);
    detail::fill_uniform(detail::as_span(p.bias), rng, -0.5, 0.5);
    const bool label = trial % 2 == 0;
    auto safe = [&] {
      const auto bag = build_instance_bag(f_orig, f_af, spec, p);
      const Matrix<double> pre = p.w2 * bag.fused.matrix();
      for (Eigen::Index i = 0; i < pre.size(); ++i)
        if (std::abs(pre.data()[i]) < kKinkMargin) return false;
      return true;
    };
    int attempts = 0;
    while (!safe() && attempts++ < 200) p.w2 = detail::random_matrix(rng, d, k);
    auto loss = [&] {
      const auto bag = build_instance_bag(f_orig, f_af, spec, p);
      const auto gated = apply_attention(bag, attention_weights(bag, p));
      return cross_entropy(mil_classify(gated, p), label);
    };
    BagInputs<double> in;
    AttentionCache<double> ac;
    const auto bag = build_instance_bag(f_orig, f_af, spec, p, &in);
    const auto a = attention_weights(bag, p, &ac);
    const auto gated = apply_attention(bag, a);
    const Vector<double> probs = mil_classify(gated, p);
    const auto cg = mil_logits_backward(gated, p, softmax_cross_entropy_grad(probs, label));
    const auto gg = apply_attention_backward(bag, a, cg.d_gated);
    auto ag = attention_weights_backward(bag, p, ac, a, gg.d_weights);
    ag.d_bag += gg.d_bag;
    const auto bg = build_instance_bag_backward(f_af, spec, p, in, ag.d_bag);
    chk.compare(detail::as_span(p.classifier), detail::as_span(cg.d_classifier), loss);
    chk.compare(detail::as_span(p.bias), detail::as_span(cg.d_bias), loss);
    chk.compare(detail::as_span(p.w1), detail::as_span(ag.d_w1), loss);
    chk.compare(detail::as_span(p.w2), detail::as_span(ag.d_w2), loss);
    chk.compare(detail::as_span(p.fuse), detail::as_span(bg.d_fuse), loss);
    chk.compare(f_orig.data.values(), bg.d_f_orig.values(), loss);
    chk.compare(f_af.data.values(), bg.d_f_af.values(), loss);
  }
  return chk.finish();
}

inline std::vector<Result> run_suite(std::uint64_t seed = 1234) {
  Rng rng(seed);
  return {check_er_loss(rng),        check_ecr_loss(rng), check_multilabel_soft_margin(rng),
          check_cross_entropy(rng),  check_refinement(rng), check_cam_projection(rng),
          check_mil_path(rng)};
}

}  // namespace seammil::gradcheck
