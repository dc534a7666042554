#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seammil/cam_engine.hpp"
#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/data_pipeline.hpp"
#include "seammil/equivariance.hpp"
#include "seammil/objective.hpp"
#include "seammil/siamese.hpp"

namespace seammil {

// Mann-Whitney AUROC: P(score+ > score-) + 0.5 P(tie), from midranks.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auroc: scores and labels differ in length");
  const auto n = scores.size();
  std::size_t pos = 0;
  for (int l : labels) pos += l ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc needs both positive and negative labels");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) rank_sum += midrank;
    }
    i = j + 1;
  }
  const double u = rank_sum - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct AccuracyF1 {
  double accuracy = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  ConfusionCounts counts;
};

// Predicted positive when p_lesion >= threshold. F1 is 0 when P + R = 0.
inline AccuracyF1 accuracy_f1(std::span<const double> lesion_probs, std::span<const int> labels,
                              double threshold = 0.5) {
  if (lesion_probs.size() != labels.size()) throw DimensionError("accuracy_f1: length mismatch");
  if (lesion_probs.empty()) throw UndefinedMetricError("accuracy_f1 on an empty set");
  AccuracyF1 r;
  auto& c = r.counts;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = lesion_probs[i] >= threshold;
    const bool truth = labels[i] != 0;
    if (pred && truth) ++c.tp;
    if (pred && !truth) ++c.fp;
    if (!pred && truth) ++c.fn;
    if (!pred && !truth) ++c.tn;
  }
  r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(labels.size());
  r.precision = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  r.recall = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

// Lesion channel >= threshold.
template <typename T>
Mask cam_to_segmentation(const ActivationMap<T>& cam, double threshold = 0.5) {
  if (cam.classes() < 2) throw DimensionError("cam_to_segmentation needs a lesion channel");
  Mask m(cam.height(), cam.width());
  for (int y = 0; y < cam.height(); ++y)
    for (int x = 0; x < cam.width(); ++x) m.at(y, x) = cam.data(1, y, x) >= static_cast<T>(threshold) ? 1 : 0;
  return m;
}

struct SegmentationScore {
  double iou = 0.0;
  double dice = 0.0;
  double threshold = 0.5;
};

inline SegmentationScore segmentation_score(const Mask& mask, const Mask& truth, double threshold = 0.5) {
  if (mask.height != truth.height || mask.width != truth.width) {
    throw DimensionError("segmentation_score: mask " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width) + " vs truth " + std::to_string(truth.height) + "x" +
                         std::to_string(truth.width));
  }
  std::size_t inter = 0, uni = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    const bool x = mask.bits[i] != 0;
    const bool y = truth.bits[i] != 0;
    inter += x && y;
    uni += x || y;
    a += x;
    b += y;
  }
  SegmentationScore s;
  s.threshold = threshold;
  s.iou = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
  s.dice = a + b ? 2.0 * static_cast<double>(inter) / static_cast<double>(a + b) : 1.0;
  return s;
}

// Per-class max normalization for display and thresholding (refined maps
// are convex averages and usually peak below 1).
template <typename T>
ActivationMap<T> renormalize(const ActivationMap<T>& cam) {
  ActivationMap<T> out = normalize_cam(cam);
  out.kind = cam.kind;
  return out;
}

// CAM bilinearly upsampled to an image of h x w.
template <typename T>
ActivationMap<T> upsample_cam(const ActivationMap<T>& cam, int h, int w) {
  return {resize_bilinear(cam.data, h, w), cam.kind, cam.normalized};
}

struct CamQuality {
  double mean_iou_original = 0.0;
  double mean_iou_refined = 0.0;
  double mean_dice_original = 0.0;
  double mean_dice_refined = 0.0;
  std::size_t n_positive = 0;
  double threshold = 0.5;
};

struct MetricsReport {
  std::string split = "test";
  double accuracy = 0.0;
  double f1 = 0.0;
  double auroc = 0.0;
  std::size_t n_samples = 0;
  double threshold = 0.5;
  std::optional<LossBreakdown<double>> loss_breakdown;
  std::optional<CamQuality> cam_quality;
};

inline nlohmann::json to_json(const LossBreakdown<double>& l) {
  return {{"multi_class", l.multi_class}, {"er", l.er}, {"ecr", l.ecr}, {"cross_entropy", l.cross_entropy},
          {"total", l.total}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = {{"split", r.split},   {"accuracy", r.accuracy},   {"f1", r.f1},
                      {"auroc", r.auroc},   {"n_samples", r.n_samples}, {"threshold", r.threshold}};
  if (r.loss_breakdown) j["loss_breakdown"] = to_json(*r.loss_breakdown);
  if (r.cam_quality) {
    const auto& q = *r.cam_quality;
    j["cam_quality"] = {{"mean_iou_original", q.mean_iou_original}, {"mean_iou_refined", q.mean_iou_refined},
                        {"mean_dice_original", q.mean_dice_original}, {"mean_dice_refined", q.mean_dice_refined},
                        {"n_positive", q.n_positive}, {"threshold", q.threshold}};
  }
  return j;
}

struct EvaluationResult {
  MetricsReport report;
  std::vector<double> scores;
  std::vector<int> labels;
};

struct EvalOptions {
  std::string split = "test";
  double threshold = 0.5;
  double cam_threshold = 0.5;
  AffineSpec affine = AffineSpec::rescale(0.4);
  LossWeights loss_weights = kUnitLossWeights;
};

// Scores every sample with the model, reports accuracy / F1 / AUROC and mean
// losses, and, where ground-truth masks exist, the IoU of original and
// refined CAM masks on positives.
template <typename T>
EvaluationResult evaluate_model(const SiameseModel<T>& model, const Dataset& data, const EvalOptions& opt = {}) {
  if (data.empty()) throw UndefinedMetricError("evaluate_model on an empty dataset");
  EvaluationResult res;
  LossBreakdown<double> mean;
  CamQuality q;
  q.threshold = opt.cam_threshold;
  for (const auto& s : data) {
    const Grid<T> img = s.image.template cast<T>();
    const SiameseOutputs<T> out = model.forward(img, opt.affine);
    res.scores.push_back(static_cast<double>(model.score(out)));
    res.labels.push_back(s.is_rdr ? 1 : 0);
    const auto l = model.losses(out, s.is_rdr, opt.loss_weights);
    mean += LossBreakdown<double>{static_cast<double>(l.multi_class), static_cast<double>(l.er),
                                  static_cast<double>(l.ecr), static_cast<double>(l.cross_entropy),
                                  static_cast<double>(l.total)};
    if (s.is_rdr && s.mask) {
      const int h = s.image.height();
      const int w = s.image.width();
      const Mask m_orig = cam_to_segmentation(upsample_cam(out.cam_orig, h, w), opt.cam_threshold);
      const Mask m_ref = cam_to_segmentation(upsample_cam(renormalize(out.cam_rm_orig), h, w), opt.cam_threshold);
      const auto so = segmentation_score(m_orig, *s.mask, opt.cam_threshold);
      const auto sr = segmentation_score(m_ref, *s.mask, opt.cam_threshold);
      q.mean_iou_original += so.iou;
      q.mean_iou_refined += sr.iou;
      q.mean_dice_original += so.dice;
      q.mean_dice_refined += sr.dice;
      ++q.n_positive;
    }
  }
  mean /= static_cast<double>(data.size());
  auto& r = res.report;
  r.split = opt.split;
  r.threshold = opt.threshold;
  r.n_samples = data.size();
  r.auroc = auroc(res.scores, res.labels);
  const auto af = accuracy_f1(res.scores, res.labels, opt.threshold);
  r.accuracy = af.accuracy;
  r.f1 = af.f1;
  r.loss_breakdown = mean;
  if (q.n_positive > 0) {
    const double n = static_cast<double>(q.n_positive);
    q.mean_iou_original /= n;
    q.mean_iou_refined /= n;
    q.mean_dice_original /= n;
    q.mean_dice_refined /= n;
    r.cam_quality = q;
  }
  return res;
}

}  // namespace seammil
