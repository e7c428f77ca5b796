#pragma once

// Parameter spaces of layered networks.
//
// The ambient space is the direct sum of Hom(X_i, Y_i) over layers, with the
// Frobenius inner product. Convolutional blocks are stored as filter banks
// (out x in x k x k) and densified on demand; a conv slot may also hold a general
// dense matrix (e.g. after conjugating by a representation without a structured
// fast path).
//
// An AffineSpace is base + span(orthonormal basis). For conv layers the basis has
// one element per (out channel, in channel, supported cell); the element is the
// conv operator of the unit filter at that cell divided by its Frobenius norm,
// which is sqrt(number of output pixels whose shifted input is inside the grid).
// For dense layers the basis is the standard one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "equiflow/group.hpp"
#include "equiflow/linalg.hpp"
#include "equiflow/support.hpp"

namespace equiflow {

enum class LayerKind { Dense, Conv };
enum class Padding { Zero, Circular };

struct Shape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t numel() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;
};

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  Shape in;
  Shape out;
  std::optional<FilterSupport> support;  // conv only
  Padding padding = Padding::Zero;

  static LayerSpec dense(Shape in, std::size_t out_dim) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in = in;
    s.out = Shape{out_dim, 1, 1};
    return s;
  }

  static LayerSpec conv(std::size_t in_channels, std::size_t out_channels, std::size_t image_size,
                        FilterSupport support, Padding padding) {
    if (support.size() > 2 * image_size - 1 && padding == Padding::Zero)
      throw std::invalid_argument("LayerSpec::conv: filter larger than image");
    if (padding == Padding::Circular && support.size() > image_size)
      throw std::invalid_argument("LayerSpec::conv: circular padding needs image_size >= filter size");
    LayerSpec s;
    s.kind = LayerKind::Conv;
    s.in = Shape{in_channels, image_size, image_size};
    s.out = Shape{out_channels, image_size, image_size};
    s.support = std::move(support);
    s.padding = padding;
    return s;
  }

  std::size_t rows() const { return out.numel(); }
  std::size_t cols() const { return in.numel(); }
  std::size_t filter_size() const { return support ? support->size() : 0; }
  /// Number of stored values of a filter-bank block.
  std::size_t filter_bank_size() const { return out.channels * in.channels * filter_size() * filter_size(); }
  /// Number of basis elements (coordinate dimension) of this layer.
  std::size_t coordinate_dim() const {
    return kind == LayerKind::Dense ? rows() * cols() : out.channels * in.channels * support->count();
  }
};

namespace conv_geometry {

/// Number of output pixels for which the input pixel at offset (dr, dc) lies inside the grid.
inline std::size_t valid_count(std::size_t n, std::ptrdiff_t dr, std::ptrdiff_t dc, Padding padding) {
  if (padding == Padding::Circular) return n * n;
  const auto nn = static_cast<std::ptrdiff_t>(n);
  const std::ptrdiff_t rows = nn - std::abs(dr);
  const std::ptrdiff_t cols = nn - std::abs(dc);
  return rows > 0 && cols > 0 ? static_cast<std::size_t>(rows * cols) : 0;
}

inline std::ptrdiff_t offset(std::size_t index, std::size_t k) {
  return static_cast<std::ptrdiff_t>(index) - static_cast<std::ptrdiff_t>(k / 2);
}

/// Frobenius norm of the operator induced by a unit filter at cell (r, c).
inline double cell_norm(const LayerSpec& layer, std::size_t cell) {
  const std::size_t k = layer.filter_size();
  return std::sqrt(static_cast<double>(
      valid_count(layer.in.height, offset(cell / k, k), offset(cell % k, k), layer.padding)));
}

/// Rotates one k x k filter counterclockwise by quarter_turns * 90 degrees (same convention as images).
template <class T>
void rotate_filter(std::span<const T> in, std::span<T> out, std::size_t k, std::size_t quarter_turns) {
  std::vector<T> cur(in.begin(), in.end()), next(in.size());
  for (std::size_t q = 0; q < quarter_turns % 4; ++q) {
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < k; ++c) next[r * k + c] = cur[c * k + (k - 1 - r)];
    std::swap(cur, next);
  }
  std::copy(cur.begin(), cur.end(), out.begin());
}

/// Input pixel index for output pixel (i, j) and offset (dr, dc), or -1 outside the grid.
inline std::ptrdiff_t source_pixel(std::size_t n, std::size_t i, std::size_t j, std::ptrdiff_t dr, std::ptrdiff_t dc,
                                   Padding padding) {
  const auto nn = static_cast<std::ptrdiff_t>(n);
  std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + dr;
  std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dc;
  if (padding == Padding::Circular) {
    si = ((si % nn) + nn) % nn;
    sj = ((sj % nn) + nn) % nn;
  } else if (si < 0 || sj < 0 || si >= nn || sj >= nn) {
    return -1;
  }
  return si * nn + sj;
}

}  // namespace conv_geometry

enum class BlockKind { Filters, Matrix };

/// One layer's linear map: a filter bank (conv layers) or a dense rows x cols matrix.
template <class T>
struct Block {
  BlockKind kind = BlockKind::Matrix;
  std::vector<T> values;
};

template <class T>
struct AmbientOperator {
  std::vector<Block<T>> blocks;
};

/// Zero operator with the natural storage (filter banks for conv layers).
template <class T>
AmbientOperator<T> zero_operator(const std::vector<LayerSpec>& layers) {
  AmbientOperator<T> op;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::Conv) op.blocks.push_back({BlockKind::Filters, std::vector<T>(l.filter_bank_size(), T(0))});
    else op.blocks.push_back({BlockKind::Matrix, std::vector<T>(l.rows() * l.cols(), T(0))});
  }
  return op;
}

inline void check_block_shape(const LayerSpec& layer, BlockKind kind, std::size_t size) {
  const std::size_t expect = kind == BlockKind::Filters ? layer.filter_bank_size() : layer.rows() * layer.cols();
  if (kind == BlockKind::Filters && layer.kind != LayerKind::Conv)
    throw std::invalid_argument("filter block in a dense layer");
  if (size != expect) throw std::invalid_argument("block size does not match layer spec");
}

template <class T>
void check_operator_shape(const std::vector<LayerSpec>& layers, const AmbientOperator<T>& op) {
  if (op.blocks.size() != layers.size()) throw std::invalid_argument("operator has wrong number of blocks");
  for (std::size_t i = 0; i < layers.size(); ++i) check_block_shape(layers[i], op.blocks[i].kind, op.blocks[i].values.size());
}

/// Dense rows x cols matrix of a block.
template <class T>
Matrix densify(const LayerSpec& layer, const Block<T>& block) {
  check_block_shape(layer, block.kind, block.values.size());
  if (layer.rows() > kMaxDenseDim * 4 || layer.cols() > kMaxDenseDim * 4 || layer.rows() * layer.cols() > (std::size_t{1} << 25))
    throw CapacityError("densify: block " + std::to_string(layer.rows()) + "x" + std::to_string(layer.cols()) +
                        " exceeds dense limit");
  Matrix m(layer.rows(), layer.cols());
  if (block.kind == BlockKind::Matrix) {
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<double>(block.values[i]);
    return m;
  }
  const std::size_t k = layer.filter_size();
  const std::size_t n = layer.in.height;
  const std::size_t np = n * n;
  for (std::size_t o = 0; o < layer.out.channels; ++o)
    for (std::size_t c = 0; c < layer.in.channels; ++c)
      for (std::size_t cell = 0; cell < k * k; ++cell) {
        const double w = static_cast<double>(block.values[(o * layer.in.channels + c) * k * k + cell]);
        if (w == 0.0) continue;
        const auto dr = conv_geometry::offset(cell / k, k);
        const auto dc = conv_geometry::offset(cell % k, k);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const auto src = conv_geometry::source_pixel(n, i, j, dr, dc, layer.padding);
            if (src >= 0) m(o * np + i * n + j, c * np + static_cast<std::size_t>(src)) += w;
          }
      }
  return m;
}

/// <A, B>_F for two blocks of the same layer.
template <class T>
double frobenius_dot(const LayerSpec& layer, const Block<T>& a, const Block<T>& b) {
  if (a.kind == BlockKind::Filters && b.kind == BlockKind::Filters) {
    // distinct cells induce matrices with disjoint supports
    const std::size_t k = layer.filter_size();
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
      const std::size_t cell = i % (k * k);
      const double cnt = conv_geometry::cell_norm(layer, cell);
      s += static_cast<double>(a.values[i]) * static_cast<double>(b.values[i]) * cnt * cnt;
    }
    return s;
  }
  if (a.kind == BlockKind::Matrix && b.kind == BlockKind::Matrix) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) s += static_cast<double>(a.values[i]) * static_cast<double>(b.values[i]);
    return s;
  }
  const Matrix da = densify(layer, a), db = densify(layer, b);
  double s = 0.0;
  for (std::size_t i = 0; i < da.data.size(); ++i) s += da.data[i] * db.data[i];
  return s;
}

template <class T>
Block<T> block_difference(const LayerSpec& layer, const Block<T>& a, const Block<T>& b) {
  if (a.kind == b.kind) {
    Block<T> d{a.kind, a.values};
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] -= b.values[i];
    return d;
  }
  const Matrix da = densify(layer, a), db = densify(layer, b);
  Block<T> d{BlockKind::Matrix, std::vector<T>(da.data.size())};
  for (std::size_t i = 0; i < da.data.size(); ++i) d.values[i] = static_cast<T>(da.data[i] - db.data[i]);
  return d;
}

template <class T>
double frobenius_dot(const std::vector<LayerSpec>& layers, const AmbientOperator<T>& a, const AmbientOperator<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < layers.size(); ++i) s += frobenius_dot(layers[i], a.blocks[i], b.blocks[i]);
  return s;
}

template <class T>
double frobenius_norm(const std::vector<LayerSpec>& layers, const AmbientOperator<T>& a) {
  return std::sqrt(std::max(0.0, frobenius_dot(layers, a, a)));
}

/// ||a - b||_F
template <class T>
double frobenius_distance(const std::vector<LayerSpec>& layers, const AmbientOperator<T>& a, const AmbientOperator<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto d = block_difference(layers[i], a.blocks[i], b.blocks[i]);
    s += frobenius_dot(layers[i], d, d);
  }
  return std::sqrt(std::max(0.0, s));
}

class AffineSpace {
 public:
  explicit AffineSpace(std::vector<LayerSpec> layers) : AffineSpace(layers, zero_operator<double>(layers)) {}

  AffineSpace(std::vector<LayerSpec> layers, AmbientOperator<double> base)
      : layers_(std::move(layers)), base_(std::move(base)) {
    if (layers_.empty()) throw std::invalid_argument("AffineSpace: no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.kind == LayerKind::Conv) {
        if (!l.support) throw std::invalid_argument("AffineSpace: conv layer without support");
        if (l.in.height != l.in.width) throw std::invalid_argument("AffineSpace: conv layers need square images");
        if (base_.blocks.size() > i && base_.blocks[i].kind != BlockKind::Filters)
          throw std::invalid_argument("AffineSpace: base point of a conv layer must be a filter bank");
      }
      if (i > 0 && layers_[i - 1].out.numel() == 0) throw std::invalid_argument("AffineSpace: empty layer");
      offsets_.push_back(dim_);
      dim_ += l.coordinate_dim();
      std::vector<std::size_t> cells;
      std::vector<double> norms;
      if (l.kind == LayerKind::Conv) {
        cells = l.support->cells();
        for (const auto c : cells) {
          const double nrm = conv_geometry::cell_norm(l, c);
          if (nrm == 0.0) throw std::invalid_argument("AffineSpace: supported cell never touches the image");
          norms.push_back(nrm);
        }
      }
      cells_.push_back(std::move(cells));
      norms_.push_back(std::move(norms));
    }
    check_operator_shape(layers_, base_);
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const AmbientOperator<double>& base() const { return base_; }
  /// Coordinate dimension p.
  std::size_t dim() const { return dim_; }
  std::size_t layer_offset(std::size_t layer) const { return offsets_.at(layer); }
  /// Supported cells of a conv layer in coordinate order.
  const std::vector<std::size_t>& layer_cells(std::size_t layer) const { return cells_.at(layer); }
  const std::vector<double>& layer_cell_norms(std::size_t layer) const { return norms_.at(layer); }

  /// base + L c
  template <class T>
  AmbientOperator<T> expand(std::span<const T> coords) const {
    auto op = expand_linear(coords);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (std::size_t j = 0; j < op.blocks[i].values.size(); ++j)
        op.blocks[i].values[j] += static_cast<T>(base_.blocks[i].values[j]);
    return op;
  }

  /// L c (no base point).
  template <class T>
  AmbientOperator<T> expand_linear(std::span<const T> coords) const {
    if (coords.size() != dim_) throw std::invalid_argument("AffineSpace::expand: coordinate size mismatch");
    auto op = zero_operator<T>(layers_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const T* c = coords.data() + offsets_[i];
      auto& vals = op.blocks[i].values;
      if (l.kind == LayerKind::Dense) {
        std::copy(c, c + l.coordinate_dim(), vals.begin());
        continue;
      }
      const std::size_t kk = l.filter_size() * l.filter_size();
      const auto& cells = cells_[i];
      const auto& norms = norms_[i];
      std::size_t idx = 0;
      for (std::size_t pair = 0; pair < l.out.channels * l.in.channels; ++pair)
        for (std::size_t j = 0; j < cells.size(); ++j, ++idx)
          vals[pair * kk + cells[j]] = c[idx] / static_cast<T>(norms[j]);
    }
    return op;
  }

  /// L^* M: Frobenius inner products of M with every basis element.
  template <class T>
  std::vector<double> coordinates_linear(const AmbientOperator<T>& m) const {
    check_operator_shape(layers_, m);
    std::vector<double> c(dim_, 0.0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const auto& blk = m.blocks[i];
      double* out = c.data() + offsets_[i];
      if (l.kind == LayerKind::Dense) {
        for (std::size_t j = 0; j < blk.values.size(); ++j) out[j] = static_cast<double>(blk.values[j]);
        continue;
      }
      const auto& cells = cells_[i];
      const auto& norms = norms_[i];
      const std::size_t k = l.filter_size();
      if (blk.kind == BlockKind::Filters) {
        std::size_t idx = 0;
        for (std::size_t pair = 0; pair < l.out.channels * l.in.channels; ++pair)
          for (std::size_t j = 0; j < cells.size(); ++j, ++idx)
            out[idx] = static_cast<double>(blk.values[pair * k * k + cells[j]]) * norms[j];
        continue;
      }
      // general matrix in a conv slot: sum along the shifted diagonal of each (out, in) block
      const std::size_t n = l.in.height, np = n * n, ncols = l.cols();
      std::size_t idx = 0;
      for (std::size_t o = 0; o < l.out.channels; ++o)
        for (std::size_t ci = 0; ci < l.in.channels; ++ci)
          for (std::size_t j = 0; j < cells.size(); ++j, ++idx) {
            const auto dr = conv_geometry::offset(cells[j] / k, k);
            const auto dc = conv_geometry::offset(cells[j] % k, k);
            double s = 0.0;
            for (std::size_t a = 0; a < n; ++a)
              for (std::size_t b = 0; b < n; ++b) {
                const auto src = conv_geometry::source_pixel(n, a, b, dr, dc, l.padding);
                if (src >= 0)
                  s += static_cast<double>(blk.values[(o * np + a * n + b) * ncols + ci * np + static_cast<std::size_t>(src)]);
              }
            out[idx] = s / norms[j];
          }
    }
    return c;
  }

  /// L^* (M - base)
  template <class T>
  std::vector<double> coordinates(const AmbientOperator<T>& m) const {
    auto c = coordinates_linear(m);
    const auto cb = coordinates_linear(base_);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] -= cb[i];
    return c;
  }

  /// base + L L^* (M - base)
  template <class T>
  AmbientOperator<double> project(const AmbientOperator<T>& m) const {
    const auto c = coordinates(m);
    return expand<double>(std::span<const double>(c));
  }

  /// L L^* M, the orthogonal projection onto the tangent space.
  template <class T>
  AmbientOperator<double> project_tangent(const AmbientOperator<T>& m) const {
    const auto c = coordinates_linear(m);
    return expand_linear<double>(std::span<const double>(c));
  }

  /// The b-th orthonormal basis element of the tangent space.
  AmbientOperator<double> basis_element(std::size_t b) const {
    std::vector<double> c(dim_, 0.0);
    c.at(b) = 1.0;
    return expand_linear<double>(std::span<const double>(c));
  }

 private:
  std::vector<LayerSpec> layers_;
  AmbientOperator<double> base_;
  std::vector<std::size_t> offsets_;
  std::vector<std::vector<std::size_t>> cells_;
  std::vector<std::vector<double>> norms_;
  std::size_t dim_ = 0;
};

/// Per-layer (input, output) representations; layer i maps X_i -> Y_i.
class LiftedRep {
 public:
  struct LayerReps {
    UnitaryRep in;
    UnitaryRep out;
  };

  LiftedRep(const std::vector<LayerSpec>& layers, std::vector<LayerReps> reps) : reps_(std::move(reps)) {
    if (reps_.size() != layers.size()) throw std::invalid_argument("LiftedRep: one rep pair per layer required");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (reps_[i].in.dim() != layers[i].cols() || reps_[i].out.dim() != layers[i].rows())
        throw std::invalid_argument("LiftedRep: rep dimension does not match layer " + std::to_string(i));
      if (!reps_[i].in.group().same_as(reps_[0].in.group()) || !reps_[i].out.group().same_as(reps_[0].in.group()))
        throw std::invalid_argument("LiftedRep: all reps must share one group");
    }
  }

  std::size_t layers() const { return reps_.size(); }
  const LayerReps& layer(std::size_t i) const { return reps_.at(i); }
  const FiniteGroup& group() const { return reps_.front().in.group(); }

 private:
  std::vector<LayerReps> reps_;
};

namespace detail {

/// Quarter turns performed by element g of a Rotation rep (rep_rot_c4 uses element k -> k * 4/|G| turns).
inline std::size_t quarter_turns(const UnitaryRep& rep, Element g) {
  if (rep.spatial_action() != SpatialAction::Rotation) return 0;
  return (g * (4 / rep.group().order())) % 4;
}

/// True when conjugating a filter-bank block by (in, out) stays a filter bank:
/// both reps factor as channel matrix times the same spatial action on the conv grid.
inline bool has_filter_fast_path(const LayerSpec& layer, const UnitaryRep& in, const UnitaryRep& out) {
  if (layer.kind != LayerKind::Conv) return false;
  if (in.channels() != layer.in.channels || out.channels() != layer.out.channels) return false;
  if (in.height() != layer.in.height || out.height() != layer.out.height) return false;
  if (in.spatial_action() == SpatialAction::Custom || out.spatial_action() == SpatialAction::Custom) return false;
  return in.spatial_action() == out.spatial_action();
}

template <class T>
Block<T> conjugate_dense(const LayerSpec& layer, const UnitaryRep& in, const UnitaryRep& out, Element g,
                         const Block<T>& block) {
  Matrix m = densify(layer, block);
  // rows of M rho_in(g)^{-1} are rho_in(g) applied to rows of M
  std::vector<double> tmp(m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    in.apply<double>(g, std::span<const double>(m.row(r).data(), m.cols), std::span<double>(tmp));
    std::copy(tmp.begin(), tmp.end(), m.row(r).begin());
  }
  std::vector<double> col(m.rows), res(m.rows);
  for (std::size_t c = 0; c < m.cols; ++c) {
    for (std::size_t r = 0; r < m.rows; ++r) col[r] = m(r, c);
    out.apply<double>(g, std::span<const double>(col), std::span<double>(res));
    for (std::size_t r = 0; r < m.rows; ++r) m(r, c) = res[r];
  }
  Block<T> b{BlockKind::Matrix, std::vector<T>(m.data.size())};
  for (std::size_t i = 0; i < m.data.size(); ++i) b.values[i] = static_cast<T>(m.data[i]);
  return b;
}

/// psi'_{kl} = sum_{a,b} C_out(g)_{ka} R_g(psi_{ab}) C_in(g)_{lb}
template <class T>
Block<T> conjugate_filters(const LayerSpec& layer, const UnitaryRep& in, const UnitaryRep& out, Element g,
                           const Block<T>& block) {
  const std::size_t k = layer.filter_size(), kk = k * k;
  const std::size_t co = layer.out.channels, ci = layer.in.channels;
  const std::size_t turns = quarter_turns(in, g);
  std::vector<T> rotated(block.values.size());
  for (std::size_t f = 0; f < co * ci; ++f)
    conv_geometry::rotate_filter<T>(std::span<const T>(block.values.data() + f * kk, kk),
                                    std::span<T>(rotated.data() + f * kk, kk), k, turns);
  if (in.channel_is_identity() && out.channel_is_identity()) return Block<T>{BlockKind::Filters, std::move(rotated)};
  const Matrix cout = out.channel_matrix(g), cin = in.channel_matrix(g);
  // mix input channels: tmp_{a l} = sum_b rotated_{a b} C_in_{l b}
  std::vector<T> tmp(rotated.size(), T(0));
  for (std::size_t a = 0; a < co; ++a)
    for (std::size_t l = 0; l < ci; ++l)
      for (std::size_t b = 0; b < ci; ++b) {
        const double w = cin(l, b);
        if (w == 0.0) continue;
        for (std::size_t u = 0; u < kk; ++u) tmp[(a * ci + l) * kk + u] += static_cast<T>(w) * rotated[(a * ci + b) * kk + u];
      }
  Block<T> res{BlockKind::Filters, std::vector<T>(rotated.size(), T(0))};
  for (std::size_t kout = 0; kout < co; ++kout)
    for (std::size_t a = 0; a < co; ++a) {
      const double w = cout(kout, a);
      if (w == 0.0) continue;
      for (std::size_t l = 0; l < ci; ++l)
        for (std::size_t u = 0; u < kk; ++u)
          res.values[(kout * ci + l) * kk + u] += static_cast<T>(w) * tmp[(a * ci + l) * kk + u];
    }
  return res;
}

}  // namespace detail

/// rho(g) A: every block conjugated, A_i -> rho_out(g) A_i rho_in(g)^{-1}.
/// Filter banks take the structured filter-rotation path when available unless force_dense.
template <class T>
AmbientOperator<T> lifted_apply(const std::vector<LayerSpec>& layers, const LiftedRep& rep, Element g,
                                const AmbientOperator<T>& a, bool force_dense = false) {
  check_operator_shape(layers, a);
  if (rep.layers() != layers.size()) throw std::invalid_argument("lifted_apply: rep/layer count mismatch");
  if (g >= rep.group().order()) throw std::invalid_argument("lifted_apply: element out of range");
  AmbientOperator<T> res;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& r = rep.layer(i);
    const auto& blk = a.blocks[i];
    if (blk.kind == BlockKind::Filters && !force_dense && detail::has_filter_fast_path(layers[i], r.in, r.out)) {
      res.blocks.push_back(detail::conjugate_filters(layers[i], r.in, r.out, g, blk));
      continue;
    }
    if (blk.kind == BlockKind::Matrix && layers[i].kind == LayerKind::Dense) {
      // dense layers: apply reps without materializing the representation matrices
      const std::size_t rows = layers[i].rows(), cols = layers[i].cols();
      Block<T> tmp{BlockKind::Matrix, std::vector<T>(blk.values.size())};
      for (std::size_t row = 0; row < rows; ++row)
        r.in.apply<T>(g, std::span<const T>(blk.values.data() + row * cols, cols),
                      std::span<T>(tmp.values.data() + row * cols, cols));
      Block<T> out{BlockKind::Matrix, std::vector<T>(blk.values.size())};
      std::vector<T> col(rows), res_col(rows);
      for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t row = 0; row < rows; ++row) col[row] = tmp.values[row * cols + c];
        r.out.apply<T>(g, std::span<const T>(col), std::span<T>(res_col));
        for (std::size_t row = 0; row < rows; ++row) out.values[row * cols + c] = res_col[row];
      }
      res.blocks.push_back(std::move(out));
      continue;
    }
    res.blocks.push_back(detail::conjugate_dense(layers[i], r.in, r.out, g, blk));
  }
  return res;
}

/// ||rho(g) A_L - A_L|| maximized over g; zero iff the base point is equivariant.
inline double base_point_residual(const AffineSpace& space, const LiftedRep& rep) {
  double worst = 0.0;
  for (Element g = 0; g < rep.group().order(); ++g)
    worst = std::max(worst, frobenius_distance(space.layers(), lifted_apply(space.layers(), rep, g, space.base()),
                                               space.base()));
  return worst;
}

/// residual[g] = max_b || rho(g) b - Pi rho(g) b ||_F over the orthonormal basis.
inline std::vector<double> check_G_invariance(const AffineSpace& space, const LiftedRep& rep, bool force_dense = false) {
  const auto& layers = space.layers();
  if (force_dense)
    for (const auto& l : layers)
      if (l.rows() > kMaxDenseDim || l.cols() > kMaxDenseDim)
        throw CapacityError("check_G_invariance: layer too large to densify");
  std::vector<double> residual(rep.group().order(), 0.0);
  for (Element g = 0; g < rep.group().order(); ++g) {
    for (std::size_t b = 0; b < space.dim(); ++b) {
      const auto moved = lifted_apply(layers, rep, g, space.basis_element(b), force_dense);
      const auto proj = space.project_tangent(moved);
      residual[g] = std::max(residual[g], frobenius_distance(layers, moved, proj));
    }
  }
  return residual;
}

inline constexpr double kInvarianceTolerance = 1e-10;

inline bool is_G_invariant(const std::vector<double>& residuals) {
  return std::all_of(residuals.begin(), residuals.end(), [](double r) { return r < kInvarianceTolerance; });
}

/// Random dense operator (conv slots get general matrices, not filter banks).
inline AmbientOperator<double> random_dense_operator(const std::vector<LayerSpec>& layers, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  AmbientOperator<double> m;
  for (const auto& l : layers) {
    if (l.rows() * l.cols() > (std::size_t{1} << 24)) throw CapacityError("random_dense_operator: layer too large");
    Block<double> b{BlockKind::Matrix, std::vector<double>(l.rows() * l.cols())};
    for (auto& v : b.values) v = normal(rng);
    m.blocks.push_back(std::move(b));
  }
  return m;
}

/// max over probes M and elements g of || Pi rho(g) M - rho(g) Pi M ||_F.
inline double check_projection_equivariance(const AffineSpace& space, const LiftedRep& rep, std::size_t trials,
                                            std::mt19937_64& rng) {
  const auto& layers = space.layers();
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto m = random_dense_operator(layers, rng);
    const auto pm = space.project_tangent(m);
    for (Element g = 0; g < rep.group().order(); ++g) {
      const auto lhs = space.project_tangent(lifted_apply(layers, rep, g, m));
      const auto rhs = lifted_apply(layers, rep, g, pm);
      worst = std::max(worst, frobenius_distance(layers, lhs, rhs));
    }
  }
  return worst;
}

/// Compares the filter-rotation fast path with dense conjugation on random filter banks
/// supported on `support`, for every element. Returns the max absolute entry deviation.
inline double rotate_filter_identity_check(const FilterSupport& support, std::size_t image_size, Padding padding,
                                           std::size_t channels, std::size_t trials, std::mt19937_64& rng) {
  const auto grp = make_cyclic(4);
  const auto layer = LayerSpec::conv(channels, channels, image_size, support, padding);
  const auto rot = rep_rot_c4(grp, image_size, image_size, channels);
  const std::vector<LayerSpec> layers{layer};
  const LiftedRep lifted(layers, {{rot, rot}});
  const AffineSpace space(layers);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<double> c(space.dim());
    for (auto& v : c) v = normal(rng);
    const auto a = space.expand<double>(std::span<const double>(c));
    for (Element g = 0; g < grp->order(); ++g) {
      const auto fast = lifted_apply(layers, lifted, g, a);
      const auto slow = lifted_apply(layers, lifted, g, a, /*force_dense=*/true);
      worst = std::max(worst, max_abs_diff(densify(layer, fast.blocks[0]), densify(layer, slow.blocks[0])));
    }
  }
  return worst;
}

/// Outcome of transforming basis filters of a conv map X_0 -> X_1 under the lifted
/// representation with rho_rot on X_0 and rho_ch (.) rho_rot on X_1.
struct EscapeReport {
  bool escaped = false;
  Element element = 0;
  std::size_t basis_index = 0;
  std::size_t out_channel = 0;
  std::size_t cell = 0;  // r * k + c of the transformed filter, outside the mask
  double value = 0.0;
};

inline EscapeReport appendixC_escape_check(const UnitaryRep& channel_rep, const FilterSupport& support,
                                           std::size_t image_size = 0) {
  const std::size_t d = channel_rep.channels();
  const std::size_t n = image_size ? image_size : support.size() + 2;
  const auto& grp = channel_rep.group_ptr();
  const auto layer = LayerSpec::conv(1, d, n, support, Padding::Circular);
  const std::vector<LayerSpec> layers{layer};
  const auto in = rep_rot_c4(grp, n, n, 1);
  const auto out = rep_product(channel_rep, rep_rot_c4(grp, n, n, d));
  const LiftedRep lifted(layers, {{in, out}});
  const AffineSpace space(layers);
  const std::size_t k = support.size(), kk = k * k;
  EscapeReport rep;
  for (Element g = 0; g < grp->order(); ++g)
    for (std::size_t b = 0; b < space.dim(); ++b) {
      const auto moved = lifted_apply(layers, lifted, g, space.basis_element(b));
      const auto& vals = moved.blocks[0].values;
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const std::size_t cell = i % kk;
        if (!support.at(cell) && std::abs(vals[i]) > 1e-12) {
          return EscapeReport{true, g, b, i / kk, cell, vals[i]};
        }
      }
    }
  return rep;
}

}  // namespace equiflow
