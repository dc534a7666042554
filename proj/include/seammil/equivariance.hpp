#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <string>

#include "seammil/cam_engine.hpp"
#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"

namespace seammil {

enum class AffineKind { identity, rescale, hflip, vflip, rotation };

// Invertible spatial transform shared by images, feature maps and CAMs.
struct AffineSpec {
  AffineKind kind = AffineKind::identity;
  double scale_factor = 1.0;  // rescale only
  int angle = 0;              // rotation only; degrees, multiple of 90, counter-clockwise

  static AffineSpec identity() { return {}; }
  static AffineSpec rescale(double s) { return {AffineKind::rescale, s, 0}; }
  static AffineSpec hflip() { return {AffineKind::hflip, 1.0, 0}; }
  static AffineSpec vflip() { return {AffineKind::vflip, 1.0, 0}; }
  static AffineSpec rotation(int degrees) { return {AffineKind::rotation, 1.0, degrees}; }

  void validate() const {
    if (kind == AffineKind::rescale && !(scale_factor > 0.0 && std::isfinite(scale_factor))) {
      throw InvalidSpecError("rescale factor must be positive and finite");
    }
    if (kind == AffineKind::rotation && angle % 90 != 0) {
      throw InvalidSpecError("rotation angle must be a multiple of 90 degrees");
    }
  }

  AffineSpec inverse() const {
    switch (kind) {
      case AffineKind::rescale:
        return rescale(1.0 / scale_factor);
      case AffineKind::rotation:
        return rotation(-angle);
      default:
        return *this;
    }
  }

  // Quarter turns in [0, 4).
  int quarter_turns() const { return ((angle / 90) % 4 + 4) % 4; }

  std::string to_string() const {
    std::ostringstream os;
    switch (kind) {
      case AffineKind::identity: return "identity";
      case AffineKind::hflip: return "hflip";
      case AffineKind::vflip: return "vflip";
      case AffineKind::rescale:
        os.precision(17);
        os << "rescale:" << scale_factor;
        return os.str();
      case AffineKind::rotation: return "rotation:" + std::to_string(angle);
    }
    return "identity";
  }

  // Inverse of to_string: "identity", "hflip", "vflip", "rescale:<s>", "rotation:<deg>".
  static AffineSpec parse(const std::string& text) {
    const auto colon = text.find(':');
    const std::string head = text.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
    AffineSpec s;
    try {
      if (head == "identity") {
        s = identity();
      } else if (head == "hflip") {
        s = hflip();
      } else if (head == "vflip") {
        s = vflip();
      } else if (head == "rescale") {
        s = rescale(std::stod(arg));
      } else if (head == "rotation") {
        s = rotation(std::stoi(arg));
      } else {
        throw InvalidSpecError("unknown affine kind '" + head + "'");
      }
    } catch (const std::logic_error&) {
      throw InvalidSpecError("malformed affine spec '" + text + "'");
    }
    s.validate();
    return s;
  }

  friend bool operator==(const AffineSpec&, const AffineSpec&) = default;
};

namespace detail {

struct LinearTap {
  int i0;
  int i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel-centre sampling positions for resizing n -> m.
inline std::vector<LinearTap> bilinear_taps(int n, int m) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(m));
  const double ratio = static_cast<double>(n) / m;
  for (int o = 0; o < m; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > n - 1) i0 = n - 1;
    const int i1 = std::min(i0 + 1, n - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

// Bilinear resize (half-pixel centres, edge clamp).
template <typename T>
Grid<T> resize_bilinear(const Grid<T>& in, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) {
    throw InvalidSpecError("resize to " + std::to_string(out_h) + "x" + std::to_string(out_w) + " is empty");
  }
  if (in.height() < 1 || in.width() < 1) throw InvalidSpecError("resize of an empty grid");
  if (out_h == in.height() && out_w == in.width()) return in;
  const auto ty = detail::bilinear_taps(in.height(), out_h);
  const auto tx = detail::bilinear_taps(in.width(), out_w);
  Grid<T> out(in.channels(), out_h, out_w);
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < out_h; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      const T wy1 = static_cast<T>(a.w1);
      const T wy0 = T(1) - wy1;
      for (int x = 0; x < out_w; ++x) {
        const auto& b = tx[static_cast<std::size_t>(x)];
        const T wx1 = static_cast<T>(b.w1);
        const T wx0 = T(1) - wx1;
        out(c, y, x) = wy0 * (wx0 * in(c, a.i0, b.i0) + wx1 * in(c, a.i0, b.i1)) +
                       wy1 * (wx0 * in(c, a.i1, b.i0) + wx1 * in(c, a.i1, b.i1));
      }
    }
  }
  return out;
}

template <typename T>
Grid<T> resize_bilinear_backward(int in_h, int in_w, const Grid<T>& d_out) {
  if (d_out.height() == in_h && d_out.width() == in_w) return d_out;
  const auto ty = detail::bilinear_taps(in_h, d_out.height());
  const auto tx = detail::bilinear_taps(in_w, d_out.width());
  Grid<T> d_in(d_out.channels(), in_h, in_w);
  for (int c = 0; c < d_out.channels(); ++c) {
    for (int y = 0; y < d_out.height(); ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      const T wy1 = static_cast<T>(a.w1);
      const T wy0 = T(1) - wy1;
      for (int x = 0; x < d_out.width(); ++x) {
        const auto& b = tx[static_cast<std::size_t>(x)];
        const T wx1 = static_cast<T>(b.w1);
        const T wx0 = T(1) - wx1;
        const T g = d_out(c, y, x);
        d_in(c, a.i0, b.i0) += wy0 * wx0 * g;
        d_in(c, a.i0, b.i1) += wy0 * wx1 * g;
        d_in(c, a.i1, b.i0) += wy1 * wx0 * g;
        d_in(c, a.i1, b.i1) += wy1 * wx1 * g;
      }
    }
  }
  return d_in;
}

template <typename T>
Grid<T> flip_horizontal(const Grid<T>& in) {
  Grid<T> out(in.channels(), in.height(), in.width());
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < in.width(); ++x) out(c, y, x) = in(c, y, in.width() - 1 - x);
  return out;
}

template <typename T>
Grid<T> flip_vertical(const Grid<T>& in) {
  Grid<T> out(in.channels(), in.height(), in.width());
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < in.width(); ++x) out(c, y, x) = in(c, in.height() - 1 - y, x);
  return out;
}

// Counter-clockwise quarter turns.
template <typename T>
Grid<T> rotate_quarter(const Grid<T>& in, int turns) {
  turns = ((turns % 4) + 4) % 4;
  if (turns == 0) return in;
  if (turns == 2) return flip_vertical(flip_horizontal(in));
  const int h = in.height();
  const int w = in.width();
  Grid<T> out(in.channels(), w, h);
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < w; ++y) {
      for (int x = 0; x < h; ++x) {
        out(c, y, x) = turns == 1 ? in(c, x, w - 1 - y) : in(c, h - 1 - x, y);
      }
    }
  }
  return out;
}

// Output size of a rescale: round-to-nearest of dim * factor.
inline int rescaled_size(int n, double factor) {
  return static_cast<int>(std::lround(static_cast<double>(n) * factor));
}

template <typename T>
Grid<T> apply_affine(const Grid<T>& in, const AffineSpec& spec) {
  spec.validate();
  if (in.height() < 1 || in.width() < 1) throw InvalidSpecError("apply_affine on an empty grid");
  switch (spec.kind) {
    case AffineKind::identity:
      return in;
    case AffineKind::hflip:
      return flip_horizontal(in);
    case AffineKind::vflip:
      return flip_vertical(in);
    case AffineKind::rotation:
      return rotate_quarter(in, spec.quarter_turns());
    case AffineKind::rescale: {
      const int oh = rescaled_size(in.height(), spec.scale_factor);
      const int ow = rescaled_size(in.width(), spec.scale_factor);
      if (oh < 1 || ow < 1) {
        throw InvalidSpecError("rescale by " + std::to_string(spec.scale_factor) + " collapses " + in.shape());
      }
      return resize_bilinear(in, oh, ow);
    }
  }
  return in;
}

// Adjoint of apply_affine: maps d(output) back to the input grid of in_h x in_w.
template <typename T>
Grid<T> apply_affine_backward(int in_h, int in_w, const AffineSpec& spec, const Grid<T>& d_out) {
  switch (spec.kind) {
    case AffineKind::identity:
      return d_out;
    case AffineKind::hflip:
      return flip_horizontal(d_out);
    case AffineKind::vflip:
      return flip_vertical(d_out);
    case AffineKind::rotation:
      return rotate_quarter(d_out, -spec.quarter_turns());
    case AffineKind::rescale:
      return resize_bilinear_backward(in_h, in_w, d_out);
  }
  return d_out;
}

template <typename T>
FeatureMap<T> apply_affine(const FeatureMap<T>& in, const AffineSpec& spec) {
  return {apply_affine(in.data, spec), in.stride};
}

template <typename T>
ActivationMap<T> apply_affine(const ActivationMap<T>& in, const AffineSpec& spec) {
  return {apply_affine(in.data, spec), in.kind, in.normalized};
}

// Centre crop or zero pad by at most one cell per axis so rounding
// disagreements between the two branches line up.
template <typename T>
Grid<T> match_dims(const Grid<T>& in, int h, int w) {
  if (std::abs(in.height() - h) > 1 || std::abs(in.width() - w) > 1) {
    throw DimensionError("cannot align " + in.shape() + " to " + std::to_string(h) + "x" + std::to_string(w) +
                         " by cropping/padding one cell");
  }
  if (in.height() == h && in.width() == w) return in;
  Grid<T> out(in.channels(), h, w);
  const int oy = std::max(0, (in.height() - h) / 2);
  const int ox = std::max(0, (in.width() - w) / 2);
  const int ch = std::min(h, in.height());
  const int cw = std::min(w, in.width());
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) out(c, y, x) = in(c, y + oy, x + ox);
  return out;
}

template <typename T>
Grid<T> match_dims_backward(int in_h, int in_w, const Grid<T>& d_out) {
  if (d_out.height() == in_h && d_out.width() == in_w) return d_out;
  Grid<T> d_in(d_out.channels(), in_h, in_w);
  const int oy = std::max(0, (in_h - d_out.height()) / 2);
  const int ox = std::max(0, (in_w - d_out.width()) / 2);
  const int ch = std::min(d_out.height(), in_h);
  const int cw = std::min(d_out.width(), in_w);
  for (int c = 0; c < d_out.channels(); ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) d_in(c, y + oy, x + ox) = d_out(c, y, x);
  return d_in;
}

// AF(map) brought onto the affine branch's actual h x w.
template <typename T>
Grid<T> transform_to(const Grid<T>& in, const AffineSpec& spec, int h, int w) {
  return match_dims(apply_affine(in, spec), h, w);
}

template <typename T>
Grid<T> transform_to_backward(int in_h, int in_w, const AffineSpec& spec, const Grid<T>& d_out) {
  spec.validate();
  int th = in_h;
  int tw = in_w;
  if (spec.kind == AffineKind::rescale) {
    th = rescaled_size(in_h, spec.scale_factor);
    tw = rescaled_size(in_w, spec.scale_factor);
  } else if (spec.kind == AffineKind::rotation && spec.quarter_turns() % 2 == 1) {
    std::swap(th, tw);
  }
  return apply_affine_backward(in_h, in_w, spec, match_dims_backward(th, tw, d_out));
}

// Warp by spec directly onto an h x w target (rescales resize to exactly
// h x w). Used to bring the affine branch's features back onto the
// original grid.
template <typename T>
Grid<T> warp_to(const Grid<T>& in, const AffineSpec& spec, int h, int w) {
  spec.validate();
  Grid<T> out = spec.kind == AffineKind::rescale ? resize_bilinear(in, h, w) : apply_affine(in, spec);
  if (out.height() != h || out.width() != w) {
    throw DimensionError("warp_to: " + spec.to_string() + " maps " + in.shape() + " to " + out.shape() +
                         ", expected " + std::to_string(h) + "x" + std::to_string(w));
  }
  return out;
}

template <typename T>
Grid<T> warp_to_backward(int in_h, int in_w, const AffineSpec& spec, const Grid<T>& d_out) {
  if (spec.kind == AffineKind::rescale) return resize_bilinear_backward(in_h, in_w, d_out);
  return apply_affine_backward(in_h, in_w, spec, d_out);
}

namespace detail {

template <typename T>
T mean_abs_diff(const Grid<T>& a, const Grid<T>& b) {
  a.require_same_shape(b, "L1 consistency");
  if (a.empty()) return T(0);
  T s = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<T>(a.size());
}

// d/da of mean|a - b|; subgradient 0 at a == b.
template <typename T>
Grid<T> mean_abs_diff_grad(const Grid<T>& a, const Grid<T>& b, T upstream) {
  Grid<T> g(a.channels(), a.height(), a.width());
  const T scale = upstream / static_cast<T>(std::max<std::size_t>(a.size(), 1));
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - b[i];
    g[i] = d > T(0) ? scale : (d < T(0) ? -scale : T(0));
  }
  return g;
}

template <typename T>
Grid<T> negate(Grid<T> g) {
  g *= T(-1);
  return g;
}

template <typename T>
void require_same_classes(const ActivationMap<T>& a, const ActivationMap<T>& b, const char* what) {
  if (a.classes() != b.classes()) {
    throw DimensionError(std::string(what) + ": class count " + std::to_string(a.classes()) + " vs " +
                         std::to_string(b.classes()));
  }
}

}  // namespace detail

// mean |AF(cam_orig) - cam_af|
template <typename T>
T er_loss(const ActivationMap<T>& cam_orig, const ActivationMap<T>& cam_af, const AffineSpec& spec) {
  detail::require_same_classes(cam_orig, cam_af, "er_loss");
  return detail::mean_abs_diff(transform_to(cam_orig.data, spec, cam_af.height(), cam_af.width()), cam_af.data);
}

template <typename T>
struct PairGrad {
  Grid<T> d_orig;
  Grid<T> d_af;
};

template <typename T>
PairGrad<T> er_loss_backward(const ActivationMap<T>& cam_orig, const ActivationMap<T>& cam_af,
                             const AffineSpec& spec, T upstream = T(1)) {
  const Grid<T> moved = transform_to(cam_orig.data, spec, cam_af.height(), cam_af.width());
  const Grid<T> g = detail::mean_abs_diff_grad(moved, cam_af.data, upstream);
  return {transform_to_backward(cam_orig.height(), cam_orig.width(), spec, g), detail::negate(g)};
}

// mean |AF(cam_orig) - cam_rm_af| + mean |AF(cam_rm_orig) - cam_af|
template <typename T>
T ecr_loss(const ActivationMap<T>& cam_orig, const ActivationMap<T>& cam_rm_orig, const ActivationMap<T>& cam_af,
           const ActivationMap<T>& cam_rm_af, const AffineSpec& spec) {
  detail::require_same_classes(cam_orig, cam_rm_af, "ecr_loss");
  detail::require_same_classes(cam_rm_orig, cam_af, "ecr_loss");
  return detail::mean_abs_diff(transform_to(cam_orig.data, spec, cam_rm_af.height(), cam_rm_af.width()),
                               cam_rm_af.data) +
         detail::mean_abs_diff(transform_to(cam_rm_orig.data, spec, cam_af.height(), cam_af.width()), cam_af.data);
}

template <typename T>
struct CrossGrad {
  Grid<T> d_orig;
  Grid<T> d_rm_orig;
  Grid<T> d_af;
  Grid<T> d_rm_af;
};

template <typename T>
CrossGrad<T> ecr_loss_backward(const ActivationMap<T>& cam_orig, const ActivationMap<T>& cam_rm_orig,
                               const ActivationMap<T>& cam_af, const ActivationMap<T>& cam_rm_af,
                               const AffineSpec& spec, T upstream = T(1)) {
  const Grid<T> a = transform_to(cam_orig.data, spec, cam_rm_af.height(), cam_rm_af.width());
  const Grid<T> ga = detail::mean_abs_diff_grad(a, cam_rm_af.data, upstream);
  const Grid<T> b = transform_to(cam_rm_orig.data, spec, cam_af.height(), cam_af.width());
  const Grid<T> gb = detail::mean_abs_diff_grad(b, cam_af.data, upstream);
  return {transform_to_backward(cam_orig.height(), cam_orig.width(), spec, ga),
          transform_to_backward(cam_rm_orig.height(), cam_rm_orig.width(), spec, gb), detail::negate(gb),
          detail::negate(ga)};
}

}  // namespace seammil
