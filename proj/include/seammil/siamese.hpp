#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "seammil/cam_engine.hpp"
#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/core/params.hpp"
#include "seammil/equivariance.hpp"
#include "seammil/mil_head.hpp"
#include "seammil/nn/backbone.hpp"
#include "seammil/objective.hpp"

namespace seammil {

// seam_mil: two weight-shared branches, CAM refinement, ER/ECR and the MIL
// head. baseline: one branch whose pooled lesion CAM logit is the score.
enum class ModelVariant { seam_mil, baseline };

inline const char* to_string(ModelVariant v) { return v == ModelVariant::seam_mil ? "seam_mil" : "baseline"; }

inline ModelVariant parse_model_variant(const std::string& s) {
  if (s == "seam_mil") return ModelVariant::seam_mil;
  if (s == "baseline") return ModelVariant::baseline;
  throw ConfigError("unknown model variant '" + s + "'");
}

struct ModelConfig {
  BackboneSpec backbone;
  int embed_channels = 0;  // 0 selects L / 4
  int mil_k = 128;
  int mil_d = 64;
  ModelVariant variant = ModelVariant::seam_mil;
  bool include_background = false;  // supervise the background CAM logit too
  bool refine = true;               // false: refined CAM := CAM
  bool stop_grad_refined = false;   // no gradient through refined CAMs in the cross term
  bool label_mask_cams = true;      // zero the lesion channel of negatives inside ER / ECR

  int resolved_embed_channels() const {
    return embed_channels > 0 ? embed_channels : std::max(1, backbone.out_channels / 4);
  }

  void validate() const {
    backbone.validate();
    if (resolved_embed_channels() >= backbone.out_channels) throw ConfigError("embed_channels must be < L");
    if (mil_k < 1 || mil_d < 1) throw ConfigError("MIL K and D must be >= 1");
  }
};

template <typename T>
struct BranchTrace {
  BackboneTrace<T> backbone;
  FeatureMap<T> features;
  ActivationMap<T> raw;  // un-normalized head output
  FeatureMap<T> embedded;
  CorrelationMatrix<T> corr;
  const ParameterSet<T>* params = nullptr;  // which parameters produced this branch
};

template <typename T>
struct MilTrace {
  BagInputs<T> inputs;
  InstanceBag<T> bag;
  AttentionCache<T> attention_cache;
  AttentionWeights<T> attention;
  InstanceBag<T> gated;
  Vector<T> logits;
};

template <typename T>
struct SiameseOutputs {
  ActivationMap<T> cam_orig;  // normalized
  ActivationMap<T> cam_rm_orig;
  ActivationMap<T> cam_af;
  ActivationMap<T> cam_rm_af;
  FeatureMap<T> f_orig;
  FeatureMap<T> f_af;
  Vector<T> mil_probs;
  Vector<T> logits_orig;
  Vector<T> logits_af;

  AffineSpec spec;
  BranchTrace<T> orig;
  BranchTrace<T> af;
  std::optional<MilTrace<T>> mil;

  bool has_affine_branch() const { return af.params != nullptr; }
};

template <typename T>
class SiameseModel {
 public:
  SiameseModel() = default;

  SiameseModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    backbone_ = Backbone<T>(cfg_.backbone, params_, rng);
    const int l = cfg_.backbone.out_channels;
    const int e = cfg_.resolved_embed_channels();
    projection_ = params_.add("cam.projection", {kCamClasses, l}, ParamGroup::head, true);
    params_.init_normal(projection_, rng, std::sqrt(1.0 / l));
    embedding_ = params_.add("cam.embedding", {e, l}, ParamGroup::head, true);
    params_.init_normal(embedding_, rng, std::sqrt(1.0 / l));
    if (cfg_.variant == ModelVariant::seam_mil) {
      const int k = cfg_.mil_k;
      const int d = cfg_.mil_d;
      fuse_ = params_.add("mil.fuse", {k, 2 * l}, ParamGroup::head, true);
      params_.init_normal(fuse_, rng, std::sqrt(1.0 / (2 * l)));
      w2_ = params_.add("mil.w2", {d, k}, ParamGroup::head, true);
      params_.init_normal(w2_, rng, std::sqrt(2.0 / k));
      w1_ = params_.add("mil.w1", {d}, ParamGroup::head, false);
      params_.init_normal(w1_, rng, std::sqrt(1.0 / d));
      classifier_ = params_.add("mil.classifier", {2, k}, ParamGroup::head, true);
      params_.init_normal(classifier_, rng, std::sqrt(1.0 / k));
      bias_ = params_.add("mil.bias", {2}, ParamGroup::head, false);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  CamHeadParams<T> cam_head() const {
    const int l = cfg_.backbone.out_channels;
    return {ConstMatrixMap<T>(params_.value(projection_).data(), kCamClasses, l),
            ConstMatrixMap<T>(params_.value(embedding_).data(), cfg_.resolved_embed_channels(), l)};
  }

  MilParams<T> mil_params() const {
    if (cfg_.variant != ModelVariant::seam_mil) throw ConfigError("baseline model has no MIL head");
    const int l = cfg_.backbone.out_channels;
    const int k = cfg_.mil_k;
    const int d = cfg_.mil_d;
    MilParams<T> p;
    p.fuse = ConstMatrixMap<T>(params_.value(fuse_).data(), k, 2 * l);
    p.w1 = Eigen::Map<const Vector<T>>(params_.value(w1_).data(), d);
    p.w2 = ConstMatrixMap<T>(params_.value(w2_).data(), d, k);
    p.classifier = ConstMatrixMap<T>(params_.value(classifier_).data(), 2, k);
    p.bias = Eigen::Map<const Vector<T>>(params_.value(bias_).data(), 2);
    return p;
  }

  SiameseOutputs<T> forward(const Grid<T>& image, const AffineSpec& spec) const {
    SiameseOutputs<T> out;
    out.spec = spec;
    const CamHeadParams<T> head = cam_head();
    run_branch(image, head, out.orig, out.cam_orig, out.cam_rm_orig, out.logits_orig);
    out.f_orig = out.orig.features;
    if (cfg_.variant == ModelVariant::baseline) return out;

    run_branch(apply_affine(image, spec), head, out.af, out.cam_af, out.cam_rm_af, out.logits_af);
    out.f_af = out.af.features;

    const MilParams<T> mil = mil_params();
    MilTrace<T> m;
    m.bag = build_instance_bag(out.f_orig, out.f_af, spec, mil, &m.inputs);
    m.attention = attention_weights(m.bag, mil, &m.attention_cache);
    m.gated = apply_attention(m.bag, m.attention);
    m.logits = mil_logits(m.gated, mil);
    if (!m.logits.allFinite()) throw NumericError("non-finite activation in layer 'mil.classifier'");
    out.mil_probs = softmax(m.logits);
    out.mil = std::move(m);
    return out;
  }

  // Lesion probability used for ranking and thresholding.
  T score(const SiameseOutputs<T>& out) const {
    if (cfg_.variant == ModelVariant::baseline) return sigmoid(out.logits_orig(1));
    return out.mil_probs(1);
  }

  LossBreakdown<T> losses(const SiameseOutputs<T>& out, bool is_rdr, const LossWeights& weights) const {
    const MultiLabel label = encode_labels(is_rdr);
    LossBreakdown<T> parts;
    if (cfg_.variant == ModelVariant::baseline) {
      parts.multi_class = multilabel_soft_margin(out.logits_orig, label, cfg_.include_background);
    } else {
      parts.multi_class = T(0.5) * (multilabel_soft_margin(out.logits_orig, label, cfg_.include_background) +
                                    multilabel_soft_margin(out.logits_af, label, cfg_.include_background));
      const auto c = consistency_maps(out, is_rdr);
      parts.er = er_loss(c[0], c[2], out.spec);
      parts.ecr = ecr_loss(c[0], c[1], c[2], c[3], out.spec);
      parts.cross_entropy = cross_entropy(out.mil_probs, is_rdr);
    }
    parts.total = total_loss(parts, weights);
    return parts;
  }

  // Accumulates scale * d(weighted total loss)/d(params) into grads.
  void backward(const SiameseOutputs<T>& out, bool is_rdr, const LossWeights& weights, T scale,
                Gradients<T>& grads) const {
    const MultiLabel label = encode_labels(is_rdr);
    const CamHeadParams<T> head = cam_head();
    const T w_mc = scale * static_cast<T>(weights[0]);
    const T w_er = scale * static_cast<T>(weights[1]);
    const T w_ecr = scale * static_cast<T>(weights[2]);
    const T w_ce = scale * static_cast<T>(weights[3]);

    BranchGrad g_orig = zero_branch_grad(out.orig);
    if (cfg_.variant == ModelVariant::baseline) {
      g_orig.d_logits = w_mc * multilabel_soft_margin_grad(out.logits_orig, label, cfg_.include_background);
      backward_branch(out.orig, out.cam_orig, out.cam_rm_orig, head, g_orig, grads);
      return;
    }

    BranchGrad g_af = zero_branch_grad(out.af);
    g_orig.d_logits = (w_mc / T(2)) * multilabel_soft_margin_grad(out.logits_orig, label, cfg_.include_background);
    g_af.d_logits = (w_mc / T(2)) * multilabel_soft_margin_grad(out.logits_af, label, cfg_.include_background);

    const auto c = consistency_maps(out, is_rdr);
    const PairGrad<T> er = er_loss_backward(c[0], c[2], out.spec, w_er);
    const CrossGrad<T> ecr = ecr_loss_backward(c[0], c[1], c[2], c[3], out.spec, w_ecr);
    Grid<T> d_cam_orig = er.d_orig;
    d_cam_orig += ecr.d_orig;
    Grid<T> d_cam_af = er.d_af;
    d_cam_af += ecr.d_af;
    g_orig.d_cam += mask_grad(std::move(d_cam_orig), is_rdr);
    g_af.d_cam += mask_grad(std::move(d_cam_af), is_rdr);
    if (!cfg_.stop_grad_refined) {
      g_orig.d_refined += mask_grad(ecr.d_rm_orig, is_rdr);
      g_af.d_refined += mask_grad(ecr.d_rm_af, is_rdr);
    }

    const MilTrace<T>& m = *out.mil;
    const MilParams<T> mil = mil_params();
    const Vector<T> d_z = w_ce * softmax_cross_entropy_grad(out.mil_probs, is_rdr);
    const ClassifierGrad<T> cg = mil_logits_backward(m.gated, mil, d_z);
    add(grads, classifier_, cg.d_classifier);
    add(grads, bias_, cg.d_bias);
    const GateGrad<T> gate = apply_attention_backward(m.bag, m.attention, cg.d_gated);
    AttentionGrad<T> ag = attention_weights_backward(m.bag, mil, m.attention_cache, m.attention, gate.d_weights);
    add(grads, w1_, ag.d_w1);
    add(grads, w2_, ag.d_w2);
    ag.d_bag += gate.d_bag;
    const BagGrad<T> bg = build_instance_bag_backward(out.f_af, out.spec, mil, m.inputs, ag.d_bag);
    add(grads, fuse_, bg.d_fuse);
    g_orig.d_features += bg.d_f_orig;
    g_af.d_features += bg.d_f_af;

    backward_branch(out.orig, out.cam_orig, out.cam_rm_orig, head, g_orig, grads);
    backward_branch(out.af, out.cam_af, out.cam_rm_af, head, g_af, grads);
  }

 private:
  bool masks_lesion(bool is_rdr) const { return cfg_.label_mask_cams && !is_rdr; }

  // cam_orig, cam_rm_orig, cam_af, cam_rm_af as seen by ER / ECR.
  std::array<ActivationMap<T>, 4> consistency_maps(const SiameseOutputs<T>& out, bool is_rdr) const {
    std::array<ActivationMap<T>, 4> m{out.cam_orig, out.cam_rm_orig, out.cam_af, out.cam_rm_af};
    if (masks_lesion(is_rdr)) {
      for (auto& a : m) {
        for (auto& v : a.data.channel(1)) v = T(0);
      }
    }
    return m;
  }

  Grid<T> mask_grad(Grid<T> d, bool is_rdr) const {
    if (masks_lesion(is_rdr)) {
      for (auto& v : d.channel(1)) v = T(0);
    }
    return d;
  }

  struct BranchGrad {
    Vector<T> d_logits;
    Grid<T> d_cam;      // w.r.t. normalized CAM
    Grid<T> d_refined;  // w.r.t. refined CAM
    Grid<T> d_features;
  };

  static BranchGrad zero_branch_grad(const BranchTrace<T>& b) {
    const auto& r = b.raw.data;
    const auto& f = b.features.data;
    return {Vector<T>::Zero(r.channels()), Grid<T>(r.channels(), r.height(), r.width()),
            Grid<T>(r.channels(), r.height(), r.width()), Grid<T>(f.channels(), f.height(), f.width())};
  }

  void run_branch(const Grid<T>& image, const CamHeadParams<T>& head, BranchTrace<T>& trace, ActivationMap<T>& cam,
                  ActivationMap<T>& refined, Vector<T>& logits) const {
    trace.params = &params_;
    trace.features = FeatureMap<T>{backbone_.forward(params_, image, trace.backbone), cfg_.backbone.out_stride};
    trace.raw = compute_cam(trace.features, head);
    if (!trace.raw.data.all_finite()) throw NumericError("non-finite activation in layer 'cam.projection'");
    logits = cam_to_logits(trace.raw);
    cam = normalize_cam(trace.raw);
    if (cfg_.variant == ModelVariant::baseline || !cfg_.refine) {
      refined = ActivationMap<T>{cam.data, CamKind::refined, true};
      return;
    }
    trace.embedded = embed_features(trace.features, head);
    trace.corr = pixel_correlation(trace.embedded);
    refined = refine_cam(cam, trace.corr);
  }

  void backward_branch(const BranchTrace<T>& trace, const ActivationMap<T>& cam, const ActivationMap<T>& refined,
                       const CamHeadParams<T>& head, BranchGrad& g, Gradients<T>& grads) const {
    if (cfg_.variant == ModelVariant::seam_mil && cfg_.refine) {
      const RefineGrad<T> rg = refine_cam_backward(cam, trace.corr, refined, g.d_refined);
      g.d_cam += rg.d_cam;
      const Grid<T> d_embedded = pixel_correlation_backward(trace.embedded, trace.corr, rg.d_corr);
      const ProjectionGrad<T> eg = embed_features_backward(trace.features, head, d_embedded);
      add(grads, embedding_, eg.d_weight);
      g.d_features += eg.d_features;
    } else {
      g.d_cam += g.d_refined;
    }
    Grid<T> d_raw = normalize_cam_backward(trace.raw, g.d_cam);
    d_raw += cam_to_logits_backward(trace.raw, g.d_logits);
    const ProjectionGrad<T> pg = compute_cam_backward(trace.features, head, d_raw);
    add(grads, projection_, pg.d_weight);
    g.d_features += pg.d_features;
    backbone_.backward(params_, trace.backbone, std::move(g.d_features), grads);
  }

  template <typename Derived>
  static void add(Gradients<T>& grads, ParamId id, const Eigen::MatrixBase<Derived>& g) {
    auto& dst = grads[id.index];
    // Row-major matrices and vectors both flatten in storage order here.
    const Eigen::Index n = g.size();
    if (static_cast<std::size_t>(n) != dst.size()) throw DimensionError("gradient size mismatch");
    Eigen::Index i = 0;
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index c = 0; c < g.cols(); ++c) dst[static_cast<std::size_t>(i++)] += g(r, c);
  }

  ModelConfig cfg_;
  ParameterSet<T> params_;
  Backbone<T> backbone_;
  ParamId projection_, embedding_, fuse_, w1_, w2_, classifier_, bias_;
};

}  // namespace seammil
