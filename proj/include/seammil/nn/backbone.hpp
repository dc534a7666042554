#pragma once

#include <bit>
#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/core/params.hpp"
#include "seammil/nn/layers.hpp"

namespace seammil {

enum class BackboneKind { toy_cnn, resnet38_like };

inline const char* to_string(BackboneKind k) {
  return k == BackboneKind::toy_cnn ? "toy_cnn" : "resnet38_like";
}

inline BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "toy_cnn") return BackboneKind::toy_cnn;
  if (s == "resnet38_like") return BackboneKind::resnet38_like;
  throw ConfigError("unknown backbone kind '" + s + "'");
}

struct BackboneSpec {
  BackboneKind kind = BackboneKind::toy_cnn;
  int out_channels = 64;
  int out_stride = 8;

  void validate() const {
    if (out_channels < 8) throw ConfigError("backbone out_channels must be >= 8");
    if (out_stride < 1 || out_stride > 8 || !std::has_single_bit(static_cast<unsigned>(out_stride))) {
      throw ConfigError("backbone out_stride must be one of 1, 2, 4, 8");
    }
  }

  // Spatial size produced for an input side of n pixels.
  int output_size(int n) const {
    for (int s = out_stride; s > 1; s /= 2) n /= 2;
    return n;
  }
};

namespace nn {

struct ConvOp {
  ParamId weight;
  ParamId bias;
  int in = 0;
  int out = 0;
  int k = 3;
};

struct ReluOp {};
struct PoolOp {};

// relu(conv_b(relu(conv_a(x))) + skip(x)); skip is identity when absent.
struct ResidualOp {
  ConvOp a;
  ConvOp b;
  std::optional<ConvOp> skip;
};

using Op = std::variant<ConvOp, ReluOp, PoolOp, ResidualOp>;

template <typename T>
struct OpCache {
  Grid<T> input;
  Grid<T> output;
  Grid<T> hidden;
  Matrix<T> col_a;
  Matrix<T> col_b;
  Matrix<T> col_skip;
};

}  // namespace nn

template <typename T>
struct BackboneTrace {
  std::vector<nn::OpCache<T>> ops;
};

// Weight-shared feature extractor. Parameters live in the caller's
// ParameterSet, so both Siamese branches read identical values.
template <typename T>
class Backbone {
 public:
  Backbone() = default;

  Backbone(const BackboneSpec& spec, ParameterSet<T>& params, Rng& rng) : spec_(spec) {
    spec_.validate();
    const int pools = std::countr_zero(static_cast<unsigned>(spec_.out_stride));
    const int l = spec_.out_channels;
    if (spec_.kind == BackboneKind::toy_cnn) {
      const int widths[4] = {std::max(l / 8, 1), std::max(l / 4, 1), std::max(l / 2, 1), l};
      // 1x1 convs in the coarse stages keep each cell's receptive field
      // close to the cell itself, so CAMs stay local.
      const int kernels[4] = {3, 3, 1, 1};
      int in = 3;
      for (int stage = 0; stage < 4; ++stage) {
        add(conv("backbone.conv" + std::to_string(stage + 1), in, widths[stage], kernels[stage], params, rng, 1.0),
            "conv" + std::to_string(stage + 1));
        add(nn::ReluOp{}, "relu" + std::to_string(stage + 1));
        if (stage < pools) add(nn::PoolOp{}, "pool" + std::to_string(stage + 1));
        in = widths[stage];
      }
    } else {
      const int stem = std::max(l / 8, 4);
      add(conv("backbone.stem", 3, stem, 3, params, rng, 1.0), "stem");
      add(nn::ReluOp{}, "stem.relu");
      int pooled = 0;
      auto maybe_pool = [&](const std::string& name) {
        if (pooled < pools) {
          add(nn::PoolOp{}, name);
          ++pooled;
        }
      };
      maybe_pool("stem.pool");
      const int widths[4] = {std::max(l / 4, 4), std::max(l / 2, 4), l, l};
      const int blocks[4] = {3, 3, 6, 3};
      int in = stem;
      for (int stage = 0; stage < 4; ++stage) {
        for (int b = 0; b < blocks[stage]; ++b) {
          const std::string name = "backbone.b" + std::to_string(stage + 2) + "." + std::to_string(b);
          nn::ResidualOp op;
          op.a = conv(name + ".a", in, widths[stage], 3, params, rng, 1.0);
          op.b = conv(name + ".b", widths[stage], widths[stage], 3, params, rng, 0.1);
          if (in != widths[stage]) op.skip = conv(name + ".skip", in, widths[stage], 1, params, rng, 1.0);
          add(op, name.substr(9));
          in = widths[stage];
        }
        if (stage < 2) maybe_pool("b" + std::to_string(stage + 2) + ".pool");
      }
    }
  }

  const BackboneSpec& spec() const { return spec_; }

  Grid<T> forward(const ParameterSet<T>& params, const Grid<T>& x, BackboneTrace<T>& trace) const {
    if (x.channels() != 3) throw DimensionError("backbone expects a 3-channel image, got " + x.shape());
    trace.ops.clear();
    trace.ops.resize(ops_.size());
    Grid<T> cur = x;
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      auto& cache = trace.ops[i];
      cache.input = std::move(cur);
      cur = std::visit([&](const auto& op) { return run(op, params, cache); }, ops_[i]);
      if (!cur.all_finite()) throw NumericError("non-finite activation after backbone layer '" + names_[i] + "'");
      cache.output = cur;
    }
    return cur;
  }

  // Accumulates parameter gradients; returns d(input image).
  Grid<T> backward(const ParameterSet<T>& params, const BackboneTrace<T>& trace, Grid<T> dy, Gradients<T>& grads) const {
    for (std::size_t i = ops_.size(); i-- > 0;) {
      dy = std::visit([&](const auto& op) { return back(op, params, trace.ops[i], std::move(dy), grads); }, ops_[i]);
    }
    return dy;
  }

 private:
  static nn::ConvOp conv(const std::string& name, int in, int out, int k, ParameterSet<T>& params, Rng& rng,
                         double gain) {
    nn::ConvOp op{params.add(name + ".weight", {out, in, k, k}, ParamGroup::backbone, true),
                  params.add(name + ".bias", {out}, ParamGroup::backbone, false), in, out, k};
    params.init_normal(op.weight, rng, gain * std::sqrt(2.0 / (in * k * k)));
    return op;
  }

  void add(nn::Op op, std::string name) {
    ops_.push_back(std::move(op));
    names_.push_back(std::move(name));
  }

  static Grid<T> run_conv(const nn::ConvOp& op, const ParameterSet<T>& params, const Grid<T>& x, Matrix<T>& col) {
    return nn::conv2d<T>(x, params.value(op.weight), params.value(op.bias), op.out, op.k, col);
  }

  static Grid<T> back_conv(const nn::ConvOp& op, const ParameterSet<T>& params, const Matrix<T>& col,
                           const Grid<T>& input, const Grid<T>& dy, Gradients<T>& grads) {
    return nn::conv2d_backward<T>(col, op.in, input.height(), input.width(), params.value(op.weight), op.k, dy,
                                  grads[op.weight.index], grads[op.bias.index]);
  }

  static Grid<T> run(const nn::ConvOp& op, const ParameterSet<T>& params, nn::OpCache<T>& c) {
    return run_conv(op, params, c.input, c.col_a);
  }
  static Grid<T> run(const nn::ReluOp&, const ParameterSet<T>&, nn::OpCache<T>& c) { return nn::relu(c.input); }
  static Grid<T> run(const nn::PoolOp&, const ParameterSet<T>&, nn::OpCache<T>& c) { return nn::avg_pool2(c.input); }
  static Grid<T> run(const nn::ResidualOp& op, const ParameterSet<T>& params, nn::OpCache<T>& c) {
    c.hidden = nn::relu(run_conv(op.a, params, c.input, c.col_a));
    Grid<T> s = run_conv(op.b, params, c.hidden, c.col_b);
    if (op.skip) {
      s += run_conv(*op.skip, params, c.input, c.col_skip);
    } else {
      s += c.input;
    }
    return nn::relu(std::move(s));
  }

  static Grid<T> back(const nn::ConvOp& op, const ParameterSet<T>& params, const nn::OpCache<T>& c, Grid<T> dy,
                      Gradients<T>& grads) {
    return back_conv(op, params, c.col_a, c.input, dy, grads);
  }
  static Grid<T> back(const nn::ReluOp&, const ParameterSet<T>&, const nn::OpCache<T>& c, Grid<T> dy,
                      Gradients<T>&) {
    return nn::relu_backward(c.output, std::move(dy));
  }
  static Grid<T> back(const nn::PoolOp&, const ParameterSet<T>&, const nn::OpCache<T>& c, Grid<T> dy,
                      Gradients<T>&) {
    return nn::avg_pool2_backward(c.input.height(), c.input.width(), dy);
  }
  static Grid<T> back(const nn::ResidualOp& op, const ParameterSet<T>& params, const nn::OpCache<T>& c, Grid<T> dy,
                      Gradients<T>& grads) {
    const Grid<T> ds = nn::relu_backward(c.output, std::move(dy));
    Grid<T> dh = back_conv(op.b, params, c.col_b, c.hidden, ds, grads);
    dh = nn::relu_backward(c.hidden, std::move(dh));
    Grid<T> dx = back_conv(op.a, params, c.col_a, c.input, dh, grads);
    if (op.skip) {
      dx += back_conv(*op.skip, params, c.col_skip, c.input, ds, grads);
    } else {
      dx += ds;
    }
    return dx;
  }

  BackboneSpec spec_;
  std::vector<nn::Op> ops_;
  std::vector<std::string> names_;
};

}  // namespace seammil
