#pragma once

// Layered networks x_{i+1} = sigma_i(A_i x_i) over an AffineSpace, with forward
// evaluation and exact reverse-mode gradients for the fixed layer vocabulary
// (dense / conv linear maps; avgpool, tanh, layernorm nonlinearities).

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "equiflow/group.hpp"
#include "equiflow/paramspace.hpp"

namespace equiflow {

enum class Stage {
  AvgPool2,    // 2x2 window, stride 2; even spatial dims only
  Tanh,
  LayerNorm,   // over all entries of the channel stack, no affine part
  ZeroCorner,  // zeroes pixel (0,0) of every channel; not equivariant, used to probe checkers
};

inline constexpr double kLayerNormEps = 1e-5;

enum class LossKind { CrossEntropy, SquaredError };

/// Raised when a forward or backward pass produces NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& what, std::size_t layer) : std::runtime_error(what), layer_(layer) {}
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

inline Shape stage_output_shape(Stage s, Shape in) {
  if (s == Stage::AvgPool2) {
    if (in.height % 2 != 0 || in.width % 2 != 0) throw std::invalid_argument("AvgPool2 requires even spatial dims");
    return Shape{in.channels, in.height / 2, in.width / 2};
  }
  return in;
}

struct NetworkSpec {
  std::string name;
  AffineSpace space;
  std::vector<std::vector<Stage>> stages;  // per layer, applied in order after the linear map
  LiftedRep reps;

  NetworkSpec(std::string name_, AffineSpace space_, std::vector<std::vector<Stage>> stages_, LiftedRep reps_)
      : name(std::move(name_)), space(std::move(space_)), stages(std::move(stages_)), reps(std::move(reps_)) {
    const auto& layers = space.layers();
    if (stages.size() != layers.size()) throw std::invalid_argument("NetworkSpec: one stage list per layer");
    if (reps.layers() != layers.size()) throw std::invalid_argument("NetworkSpec: rep/layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      Shape s = layers[i].out;
      for (const Stage st : stages[i]) s = stage_output_shape(st, s);
      if (i + 1 < layers.size() && s.numel() != layers[i + 1].in.numel())
        throw std::invalid_argument("NetworkSpec: layer " + std::to_string(i) + " output does not feed layer " +
                                    std::to_string(i + 1));
      if (i + 1 < layers.size() && layers[i + 1].kind == LayerKind::Conv && !(s == layers[i + 1].in))
        throw std::invalid_argument("NetworkSpec: conv layer input shape mismatch");
    }
  }

  const std::vector<LayerSpec>& layers() const { return space.layers(); }
  const UnitaryRep& input_rep() const { return reps.layer(0).in; }
  const UnitaryRep& output_rep() const { return reps.layer(reps.layers() - 1).out; }
  std::size_t input_dim() const { return layers().front().cols(); }
  std::size_t output_dim() const { return layers().back().rows(); }
  const FiniteGroup& group() const { return reps.group(); }
};

/// Fig. 3 style classifier: three conv layers (pool/tanh/layernorm, pool/tanh/layernorm,
/// tanh/layernorm) and a dense readout, C4 acting by rotation on every image space and
/// trivially on the logits.
inline NetworkSpec make_mnist_c4(const FilterSupport& support, std::size_t channels = 16, std::size_t image_size = 28,
                                 std::size_t classes = 10, Padding padding = Padding::Zero, GroupPtr group = nullptr) {
  if (!group) group = make_cyclic(4);
  if (image_size % 4 != 0) throw std::invalid_argument("make_mnist_c4: image size must be divisible by 4");
  const std::size_t n0 = image_size, n1 = n0 / 2, n2 = n1 / 2;
  std::vector<LayerSpec> layers{
      LayerSpec::conv(1, channels, n0, support, padding),
      LayerSpec::conv(channels, channels, n1, support, padding),
      LayerSpec::conv(channels, channels, n2, support, padding),
      LayerSpec::dense(Shape{channels, n2, n2}, classes),
  };
  std::vector<std::vector<Stage>> stages{
      {Stage::AvgPool2, Stage::Tanh, Stage::LayerNorm},
      {Stage::AvgPool2, Stage::Tanh, Stage::LayerNorm},
      {Stage::Tanh, Stage::LayerNorm},
      {},
  };
  LiftedRep reps(layers, {
                             {rep_rot_c4(group, n0, n0, 1), rep_rot_c4(group, n0, n0, channels)},
                             {rep_rot_c4(group, n1, n1, channels), rep_rot_c4(group, n1, n1, channels)},
                             {rep_rot_c4(group, n2, n2, channels), rep_rot_c4(group, n2, n2, channels)},
                             {rep_rot_c4(group, n2, n2, channels), rep_trivial(group, classes)},
                         });
  AffineSpace space(layers);
  return NetworkSpec("mnist_c4", std::move(space), std::move(stages), std::move(reps));
}

namespace detail {

struct Segment {
  std::size_t dst = 0;
  std::size_t src = 0;
  std::size_t len = 0;
};

/// Index runs with src = dst + d inside [0, n) (zero padding) or modulo n (circular).
inline std::vector<Segment> shifted_runs(std::size_t n, std::ptrdiff_t d, Padding padding) {
  const auto nn = static_cast<std::ptrdiff_t>(n);
  std::vector<Segment> runs;
  if (padding == Padding::Zero) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -d), hi = std::min<std::ptrdiff_t>(nn, nn - d);
    if (hi > lo)
      runs.push_back({static_cast<std::size_t>(lo), static_cast<std::size_t>(lo + d), static_cast<std::size_t>(hi - lo)});
    return runs;
  }
  const std::ptrdiff_t s = ((d % nn) + nn) % nn;
  if (s == 0) {
    runs.push_back({0, 0, n});
  } else {
    runs.push_back({0, static_cast<std::size_t>(s), static_cast<std::size_t>(nn - s)});
    runs.push_back({static_cast<std::size_t>(nn - s), 0, static_cast<std::size_t>(s)});
  }
  return runs;
}

}  // namespace detail

/// Applies one stage in place; returns the output shape. Writes 1/sigma of a LayerNorm to *norm_scale.
template <class T>
Shape stage_forward(Stage st, Shape shp, std::vector<T>& z, double* norm_scale = nullptr) {
  switch (st) {
    case Stage::Tanh:
      for (auto& v : z) v = std::tanh(v);
      return shp;
    case Stage::AvgPool2: {
      const Shape o = stage_output_shape(st, shp);
      std::vector<T> p(o.numel());
      for (std::size_t c = 0; c < o.channels; ++c)
        for (std::size_t i = 0; i < o.height; ++i)
          for (std::size_t j = 0; j < o.width; ++j) {
            const std::size_t base = (c * shp.height + 2 * i) * shp.width + 2 * j;
            const double sum = static_cast<double>(z[base]) + static_cast<double>(z[base + 1]) +
                               static_cast<double>(z[base + shp.width]) + static_cast<double>(z[base + shp.width + 1]);
            p[(c * o.height + i) * o.width + j] = static_cast<T>(0.25 * sum);
          }
      z = std::move(p);
      return o;
    }
    case Stage::LayerNorm: {
      double mean = 0.0;
      for (const T v : z) mean += static_cast<double>(v);
      mean /= static_cast<double>(z.size());
      double var = 0.0;
      for (const T v : z) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
      var /= static_cast<double>(z.size());
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      for (auto& v : z) v = static_cast<T>((static_cast<double>(v) - mean) * inv);
      if (norm_scale) *norm_scale = inv;
      return shp;
    }
    case Stage::ZeroCorner:
      for (std::size_t c = 0; c < shp.channels; ++c) z[c * shp.height * shp.width] = T(0);
      return shp;
  }
  return shp;
}

/// Network weights prepared for repeated evaluation.
template <class T>
class Model {
 public:
  Model(const NetworkSpec& spec, AmbientOperator<T> weights) : spec_(&spec), weights_(std::move(weights)) {
    check_operator_shape(spec.layers(), weights_);
    const auto& layers = spec.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      Plan plan;
      if (l.kind == LayerKind::Conv && weights_.blocks[i].kind == BlockKind::Filters) {
        const std::size_t k = l.filter_size(), kk = k * k;
        std::vector<bool> active(kk, false);
        for (const auto c : spec.space.layer_cells(i)) active[c] = true;
        const auto& w = weights_.blocks[i].values;
        for (std::size_t j = 0; j < w.size(); ++j)
          if (w[j] != T(0)) active[j % kk] = true;
        for (std::size_t c = 0; c < kk; ++c) {
          if (!active[c]) continue;
          const auto dr = conv_geometry::offset(c / k, k), dc = conv_geometry::offset(c % k, k);
          plan.cells.push_back({c, detail::shifted_runs(l.in.height, dr, l.padding),
                                detail::shifted_runs(l.in.width, dc, l.padding)});
        }
      }
      plans_.push_back(std::move(plan));
    }
  }

  Model(const NetworkSpec& spec, std::span<const T> coords) : Model(spec, spec.space.expand<T>(coords)) {}

  const NetworkSpec& spec() const { return *spec_; }
  const AmbientOperator<T>& weights() const { return weights_; }

  /// Per-sample activations kept for the backward pass.
  struct Tape {
    std::vector<std::vector<T>> layer_in;                // x_i
    std::vector<std::vector<std::vector<T>>> stage_in;   // input of each stage
    std::vector<std::vector<double>> norm_scale;         // 1/sigma of each LayerNorm stage
    std::vector<T> output;
  };

  std::vector<T> forward(std::span<const T> x) const {
    Tape tape;
    run(x, tape, false);
    return std::move(tape.output);
  }

  void forward(std::span<const T> x, Tape& tape) const { run(x, tape, true); }

  /// Loss of one sample; with `grad` non-null, accumulates weight * dLoss/dBlocks into it.
  double loss(std::span<const T> x, std::size_t label, std::span<const T> target, LossKind kind,
              AmbientOperator<T>* grad = nullptr, T weight = T(1)) const {
    Tape tape;
    run(x, tape, grad != nullptr);
    std::vector<T> dout(tape.output.size());
    const double value = loss_value(tape.output, label, target, kind, dout);
    if (grad) {
      for (auto& v : dout) v *= weight;
      backward(tape, dout, *grad);
    }
    return value;
  }

  static double loss_value(std::span<const T> out, std::size_t label, std::span<const T> target, LossKind kind,
                           std::span<T> dout) {
    if (kind == LossKind::CrossEntropy) {
      if (label >= out.size()) throw std::invalid_argument("cross entropy: label out of range");
      double mx = -std::numeric_limits<double>::infinity();
      for (const T v : out) mx = std::max(mx, static_cast<double>(v));
      double z = 0.0;
      for (const T v : out) z += std::exp(static_cast<double>(v) - mx);
      const double lse = mx + std::log(z);
      for (std::size_t i = 0; i < out.size(); ++i)
        dout[i] = static_cast<T>(std::exp(static_cast<double>(out[i]) - lse) - (i == label ? 1.0 : 0.0));
      return lse - static_cast<double>(out[label]);
    }
    if (target.size() != out.size()) throw std::invalid_argument("squared error: target size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = static_cast<double>(out[i]) - static_cast<double>(target[i]);
      s += d * d;
      dout[i] = static_cast<T>(d);
    }
    return 0.5 * s;
  }

  /// Accumulates dLoss/dBlocks given dLoss/dOutput.
  void backward(const Tape& tape, std::span<const T> dout, AmbientOperator<T>& grad) const {
    const auto& layers = spec_->layers();
    std::vector<T> dy(dout.begin(), dout.end());
    for (std::size_t li = layers.size(); li-- > 0;) {
      const auto& st = spec_->stages[li];
      std::size_t norm_idx = layernorm_count(li);
      for (std::size_t si = st.size(); si-- > 0;) {
        const auto& in = tape.stage_in[li][si];
        const Shape shp = stage_in_shape(li, si);
        std::vector<T> dx(in.size(), T(0));
        switch (st[si]) {
          case Stage::Tanh:
            for (std::size_t j = 0; j < in.size(); ++j) {
              const T y = std::tanh(in[j]);
              dx[j] = dy[j] * (T(1) - y * y);
            }
            break;
          case Stage::AvgPool2: {
            const std::size_t h2 = shp.height / 2, w2 = shp.width / 2;
            for (std::size_t c = 0; c < shp.channels; ++c)
              for (std::size_t i = 0; i < h2; ++i)
                for (std::size_t j = 0; j < w2; ++j) {
                  const T g = dy[(c * h2 + i) * w2 + j] * T(0.25);
                  const std::size_t base = (c * shp.height + 2 * i) * shp.width + 2 * j;
                  dx[base] += g;
                  dx[base + 1] += g;
                  dx[base + shp.width] += g;
                  dx[base + shp.width + 1] += g;
                }
            break;
          }
          case Stage::LayerNorm: {
            --norm_idx;
            const double inv = tape.norm_scale[li][norm_idx];
            double mean = 0.0;
            for (const T v : in) mean += static_cast<double>(v);
            mean /= static_cast<double>(in.size());
            double mdy = 0.0, mdyy = 0.0;
            for (std::size_t j = 0; j < in.size(); ++j) {
              const double y = (static_cast<double>(in[j]) - mean) * inv;
              mdy += static_cast<double>(dy[j]);
              mdyy += static_cast<double>(dy[j]) * y;
            }
            mdy /= static_cast<double>(in.size());
            mdyy /= static_cast<double>(in.size());
            for (std::size_t j = 0; j < in.size(); ++j) {
              const double y = (static_cast<double>(in[j]) - mean) * inv;
              dx[j] = static_cast<T>(inv * (static_cast<double>(dy[j]) - mdy - y * mdyy));
            }
            break;
          }
          case Stage::ZeroCorner:
            dx = dy;
            for (std::size_t c = 0; c < shp.channels; ++c) dx[c * shp.height * shp.width] = T(0);
            break;
        }
        dy = std::move(dx);
      }
      for (const T v : dy)
        if (!std::isfinite(static_cast<double>(v)))
          throw NonFiniteError("non-finite gradient at layer " + std::to_string(li), li);
      std::vector<T> dx(layers[li].cols(), T(0));
      linear_backward(li, tape.layer_in[li], dy, grad.blocks[li].values, dx, li > 0);
      dy = std::move(dx);
    }
  }

 private:
  struct CellPlan {
    std::size_t cell;
    std::vector<detail::Segment> rows;
    std::vector<detail::Segment> cols;
  };
  struct Plan {
    std::vector<CellPlan> cells;
  };

  const NetworkSpec* spec_;
  AmbientOperator<T> weights_;
  std::vector<Plan> plans_;

  std::size_t layernorm_count(std::size_t li) const {
    std::size_t n = 0;
    for (const Stage s : spec_->stages[li]) n += s == Stage::LayerNorm ? 1 : 0;
    return n;
  }

  Shape stage_in_shape(std::size_t li, std::size_t si) const {
    Shape s = spec_->layers()[li].out;
    for (std::size_t j = 0; j < si; ++j) s = stage_output_shape(spec_->stages[li][j], s);
    return s;
  }

  void run(std::span<const T> x, Tape& tape, bool keep) const {
    const auto& layers = spec_->layers();
    if (x.size() != layers.front().cols()) throw std::invalid_argument("forward: input size mismatch");
    for (const T v : x)
      if (!std::isfinite(static_cast<double>(v))) throw NonFiniteError("forward: non-finite input", 0);
    if (keep) {
      tape.layer_in.assign(layers.size(), {});
      tape.stage_in.assign(layers.size(), {});
      tape.norm_scale.assign(layers.size(), {});
    }
    std::vector<T> cur(x.begin(), x.end());
    for (std::size_t li = 0; li < layers.size(); ++li) {
      std::vector<T> z(layers[li].rows(), T(0));
      linear_forward(li, cur, z);
      if (keep) tape.layer_in[li] = std::move(cur);
      Shape shp = layers[li].out;
      for (const Stage st : spec_->stages[li]) {
        if (keep) tape.stage_in[li].push_back(z);
        double inv = 0.0;
        shp = stage_forward(st, shp, z, &inv);
        if (keep && st == Stage::LayerNorm) tape.norm_scale[li].push_back(inv);
      }
      for (const T v : z)
        if (!std::isfinite(static_cast<double>(v)))
          throw NonFiniteError("non-finite activation at layer " + std::to_string(li), li);
      cur = std::move(z);
    }
    tape.output = std::move(cur);
  }

  void linear_forward(std::size_t li, const std::vector<T>& x, std::vector<T>& z) const {
    const auto& l = spec_->layers()[li];
    const auto& blk = weights_.blocks[li];
    if (blk.kind == BlockKind::Matrix) {
      const std::size_t cols = l.cols();
      for (std::size_t r = 0; r < l.rows(); ++r) {
        const T* w = blk.values.data() + r * cols;
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += static_cast<double>(w[c]) * static_cast<double>(x[c]);
        z[r] = static_cast<T>(s);
      }
      return;
    }
    const std::size_t n = l.in.height, np = n * n, k = l.filter_size(), kk = k * k;
    const std::size_t ci = l.in.channels;
    // double accumulators keep float outputs independent of the summation order
    std::vector<double> acc(np);
    for (std::size_t o = 0; o < l.out.channels; ++o) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t c = 0; c < ci; ++c) {
        const T* src = x.data() + c * np;
        const T* w = blk.values.data() + (o * ci + c) * kk;
        for (const auto& cp : plans_[li].cells) {
          const double wv = static_cast<double>(w[cp.cell]);
          if (wv == 0.0) continue;
          for (const auto& rs : cp.rows)
            for (std::size_t i = 0; i < rs.len; ++i) {
              double* drow = acc.data() + (rs.dst + i) * n;
              const T* srow = src + (rs.src + i) * n;
              for (const auto& cs : cp.cols) {
                double* d = drow + cs.dst;
                const T* s = srow + cs.src;
                for (std::size_t j = 0; j < cs.len; ++j) d[j] += wv * static_cast<double>(s[j]);
              }
            }
        }
      }
      T* dst = z.data() + o * np;
      for (std::size_t p = 0; p < np; ++p) dst[p] = static_cast<T>(acc[p]);
    }
  }

  void linear_backward(std::size_t li, const std::vector<T>& x, const std::vector<T>& dz, std::vector<T>& dw,
                       std::vector<T>& dx, bool want_dx) const {
    const auto& l = spec_->layers()[li];
    const auto& blk = weights_.blocks[li];
    if (blk.kind == BlockKind::Matrix) {
      if (dw.size() != blk.values.size()) throw std::invalid_argument("backward: gradient storage mismatch");
      const std::size_t cols = l.cols();
      for (std::size_t r = 0; r < l.rows(); ++r) {
        const T g = dz[r];
        T* gw = dw.data() + r * cols;
        const T* w = blk.values.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) gw[c] += g * x[c];
        if (want_dx)
          for (std::size_t c = 0; c < cols; ++c) dx[c] += g * w[c];
      }
      return;
    }
    const std::size_t n = l.in.height, np = n * n, k = l.filter_size(), kk = k * k;
    const std::size_t ci = l.in.channels;
    for (std::size_t o = 0; o < l.out.channels; ++o) {
      const T* g = dz.data() + o * np;
      for (std::size_t c = 0; c < ci; ++c) {
        const T* src = x.data() + c * np;
        T* dsrc = dx.data() + c * np;
        const T* w = blk.values.data() + (o * ci + c) * kk;
        T* gw = dw.data() + (o * ci + c) * kk;
        for (const auto& cp : plans_[li].cells) {
          const T wv = w[cp.cell];
          double acc = 0.0;
          for (const auto& rs : cp.rows)
            for (std::size_t i = 0; i < rs.len; ++i) {
              const T* grow = g + (rs.dst + i) * n;
              const T* srow = src + (rs.src + i) * n;
              T* dsrow = dsrc + (rs.src + i) * n;
              for (const auto& cs : cp.cols) {
                const T* gg = grow + cs.dst;
                const T* s = srow + cs.src;
                for (std::size_t j = 0; j < cs.len; ++j) acc += static_cast<double>(gg[j]) * static_cast<double>(s[j]);
                if (want_dx && wv != T(0)) {
                  T* ds = dsrow + cs.src;
                  for (std::size_t j = 0; j < cs.len; ++j) ds[j] += wv * gg[j];
                }
              }
            }
          gw[cp.cell] += static_cast<T>(acc);
        }
      }
    }
  }
};

/// Gradient with respect to coordinates: L^* applied to the block gradient
/// (only supported filter cells contribute, scaled by 1/||cell||).
template <class T>
std::vector<T> coordinate_gradient(const AffineSpace& space, const AmbientOperator<T>& block_grad) {
  std::vector<T> g(space.dim());
  const auto& layers = space.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    T* out = g.data() + space.layer_offset(i);
    const auto& vals = block_grad.blocks[i].values;
    if (l.kind == LayerKind::Dense) {
      std::copy(vals.begin(), vals.end(), out);
      continue;
    }
    const std::size_t kk = l.filter_size() * l.filter_size();
    const auto& cells = space.layer_cells(i);
    const auto& norms = space.layer_cell_norms(i);
    std::size_t idx = 0;
    for (std::size_t pair = 0; pair < l.out.channels * l.in.channels; ++pair)
      for (std::size_t j = 0; j < cells.size(); ++j, ++idx) out[idx] = vals[pair * kk + cells[j]] / static_cast<T>(norms[j]);
  }
  return g;
}

/// Applies a stage list to x, returning the output (shape per stage_output_shape).
template <class T>
std::vector<T> apply_stages(const std::vector<Stage>& stages, Shape shape, std::span<const T> x) {
  std::vector<T> z(x.begin(), x.end());
  for (const Stage s : stages) shape = stage_forward(s, shape, z);
  return z;
}

/// Small conv classifier for checker tests: conv(1->c) [pool] tanh layernorm,
/// conv(c->c) tanh layernorm, dense readout. Rotation reps throughout, trivial on logits.
inline NetworkSpec make_toy_conv_net(GroupPtr group, const FilterSupport& support, std::size_t image_size,
                                     std::size_t channels, std::size_t classes, Padding padding, bool pool = true) {
  const std::size_t n0 = image_size, n1 = pool ? n0 / 2 : n0;
  std::vector<LayerSpec> layers{
      LayerSpec::conv(1, channels, n0, support, padding),
      LayerSpec::conv(channels, channels, n1, support, padding),
      LayerSpec::dense(Shape{channels, n1, n1}, classes),
  };
  std::vector<std::vector<Stage>> stages{
      pool ? std::vector<Stage>{Stage::AvgPool2, Stage::Tanh, Stage::LayerNorm}
           : std::vector<Stage>{Stage::Tanh, Stage::LayerNorm},
      {Stage::Tanh, Stage::LayerNorm},
      {},
  };
  LiftedRep reps(layers, {
                             {rep_rot_c4(group, n0, n0, 1), rep_rot_c4(group, n0, n0, channels)},
                             {rep_rot_c4(group, n1, n1, channels), rep_rot_c4(group, n1, n1, channels)},
                             {rep_rot_c4(group, n1, n1, channels), rep_trivial(group, classes)},
                         });
  AffineSpace space(layers);
  return NetworkSpec("toy_conv", std::move(space), std::move(stages), std::move(reps));
}

/// Two-parameter linear regressor y = w1 x1 + w2 x2 with C2 negating x2, trivial on y.
/// The lifted action reflects the parameter plane in the w1 axis.
inline NetworkSpec make_c2_linear() {
  const auto c2 = make_cyclic(2);
  Matrix flip = Matrix::identity(2);
  flip(1, 1) = -1.0;
  std::vector<LayerSpec> layers{LayerSpec::dense(Shape{2, 1, 1}, 1)};
  LiftedRep reps(layers, {{rep_from_generator(c2, flip, "flip_x2"), rep_trivial(c2, 1)}});
  AffineSpace space(layers);
  return NetworkSpec("c2_linear", std::move(space), {{}}, std::move(reps));
}

/// max over probes x and all g of || sigma(rho_in(g) x) - rho_out(g) sigma(x) ||_inf.
template <class T>
double check_nonlinearity_equivariance(const std::vector<Stage>& stages, Shape shape, const UnitaryRep& rep_in,
                                       const UnitaryRep& rep_out, std::size_t trials, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<T> x(shape.numel());
    for (auto& v : x) v = static_cast<T>(normal(rng));
    const auto sx = apply_stages<T>(stages, shape, std::span<const T>(x));
    for (Element g = 0; g < rep_in.group().order(); ++g) {
      const auto gx = rep_in.apply<T>(g, x);
      const auto lhs = apply_stages<T>(stages, shape, std::span<const T>(gx));
      const auto rhs = rep_out.apply<T>(g, sx);
      worst = std::max(worst, max_abs_diff<T>(lhs, rhs));
    }
  }
  return worst;
}

/// max over random (A, x, g) of || Phi_A(rho_0(g) x) - rho_N(g) Phi_{rho(g^-1) A}(x) ||_inf.
/// With `element` set, only that group element is probed.
template <class T>
double check_induced_identity(const NetworkSpec& spec, std::size_t trials, std::mt19937_64& rng,
                              std::optional<Element> element = std::nullopt) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, spec.group().order() - 1);
  const auto& in_rep = spec.input_rep();
  const auto& out_rep = spec.output_rep();
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<T> c(spec.space.dim());
    for (auto& v : c) v = static_cast<T>(normal(rng));
    std::vector<T> x(spec.input_dim());
    for (auto& v : x) v = static_cast<T>(normal(rng));
    const Element g = element ? *element : pick(rng);
    const auto a = spec.space.expand<T>(std::span<const T>(c));
    const Model<T> model(spec, a);
    const auto gx = in_rep.apply<T>(g, x);
    const auto lhs = model.forward(std::span<const T>(gx));
    const Model<T> moved(spec, lifted_apply(spec.layers(), spec.reps, spec.group().inverse(g), a));
    const auto rhs = out_rep.apply<T>(g, moved.forward(std::span<const T>(x)));
    worst = std::max(worst, max_abs_diff<T>(lhs, rhs));
  }
  return worst;
}

/// Worst relative error between central differences (step h) and reverse-mode coordinate
/// gradients: `points` random (A, x, label, target), `coords_per_point` random coordinates each.
inline double gradient_fd_error(const NetworkSpec& spec, LossKind kind, std::size_t points,
                                std::size_t coords_per_point, std::mt19937_64& rng, double h = 1e-5) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0;
  for (std::size_t p = 0; p < points; ++p) {
    std::vector<double> c(spec.space.dim()), x(spec.input_dim()), target(spec.output_dim());
    for (auto& v : c) v = 0.5 * normal(rng);
    for (auto& v : x) v = normal(rng);
    for (auto& v : target) v = normal(rng);
    const std::size_t label = rng() % spec.output_dim();
    const auto loss_at = [&](const std::vector<double>& cc) {
      return Model<double>(spec, std::span<const double>(cc)).loss(x, label, target, kind);
    };
    auto grad = zero_operator<double>(spec.layers());
    Model<double>(spec, std::span<const double>(c)).loss(x, label, target, kind, &grad);
    const auto g = coordinate_gradient(spec.space, grad);
    for (std::size_t t = 0; t < coords_per_point; ++t) {
      const std::size_t i = rng() % c.size();
      const double keep = c[i];
      c[i] = keep + h;
      const double up = loss_at(c);
      c[i] = keep - h;
      const double down = loss_at(c);
      c[i] = keep;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(std::abs(fd) + std::abs(g[i]), 1e-6));
    }
  }
  return worst;
}

}  // namespace equiflow
