#pragma once

// Finite groups and their unitary representations on layer spaces.
//
// Layer spaces are channel stacks of images (channels x height x width, row-major).
// Every representation built here factorizes as
//
//     (rho(g) x)[k][p] = sum_l C_g[k][l] * x[l][pi_g(p)]
//
// with an orthogonal channel matrix C_g and a pixel permutation pi_g (gather form).
// Plain vectors are the special case height = width = 1.
//
// Rotation convention: element 1 of C4 rotates every image counterclockwise by 90
// degrees, i.e. out[r][c] = in[c][n-1-r].

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "equiflow/linalg.hpp"

namespace equiflow {

using Element = std::size_t;

class FiniteGroup {
 public:
  /// Builds a group from its Cayley table. Validates closure, identity, inverses
  /// and (for order <= 64) associativity.
  FiniteGroup(std::vector<std::vector<Element>> table, std::size_t cyclic_order = 0)
      : table_(std::move(table)), cyclic_order_(cyclic_order) {
    const std::size_t n = table_.size();
    if (n == 0) throw std::invalid_argument("FiniteGroup: empty table");
    for (const auto& row : table_) {
      if (row.size() != n) throw std::invalid_argument("FiniteGroup: table is not square");
      for (const Element e : row)
        if (e >= n) throw std::invalid_argument("FiniteGroup: table entry out of range");
    }
    identity_ = n;
    for (Element e = 0; e < n && identity_ == n; ++e) {
      bool ok = true;
      for (Element g = 0; g < n && ok; ++g) ok = table_[e][g] == g && table_[g][e] == g;
      if (ok) identity_ = e;
    }
    if (identity_ == n) throw std::invalid_argument("FiniteGroup: no identity element");
    inverse_.assign(n, n);
    for (Element g = 0; g < n; ++g)
      for (Element h = 0; h < n; ++h)
        if (table_[g][h] == identity_ && table_[h][g] == identity_) inverse_[g] = h;
    for (Element g = 0; g < n; ++g)
      if (inverse_[g] == n) throw std::invalid_argument("FiniteGroup: element without inverse");
    if (n <= 64) {
      for (Element a = 0; a < n; ++a)
        for (Element b = 0; b < n; ++b)
          for (Element c = 0; c < n; ++c)
            if (table_[table_[a][b]][c] != table_[a][table_[b][c]])
              throw std::invalid_argument("FiniteGroup: operation is not associative");
    }
  }

  std::size_t order() const { return table_.size(); }
  Element identity() const { return identity_; }
  Element inverse(Element g) const { return inverse_.at(g); }
  Element compose(Element g, Element h) const { return table_.at(g).at(h); }
  const std::vector<std::vector<Element>>& table() const { return table_; }

  /// Nonzero iff the group was built by make_cyclic; element k is then generator^k.
  std::size_t cyclic_order() const { return cyclic_order_; }

  /// True iff every left translation g -> h*g permutes the elements, which makes
  /// the uniform distribution the Haar measure.
  bool left_translations_are_permutations() const {
    const std::size_t n = order();
    for (Element h = 0; h < n; ++h) {
      std::vector<bool> seen(n, false);
      for (Element g = 0; g < n; ++g) {
        const Element hg = compose(h, g);
        if (seen[hg]) return false;
        seen[hg] = true;
      }
    }
    return true;
  }

  bool same_as(const FiniteGroup& other) const { return this == &other || table_ == other.table_; }

 private:
  std::vector<std::vector<Element>> table_;
  Element identity_ = 0;
  std::vector<Element> inverse_;
  std::size_t cyclic_order_ = 0;
};

using GroupPtr = std::shared_ptr<const FiniteGroup>;

inline GroupPtr make_cyclic(std::size_t n) {
  if (n == 0) throw std::invalid_argument("make_cyclic: order must be positive");
  std::vector<std::vector<Element>> table(n, std::vector<Element>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) table[i][j] = (i + j) % n;
  return std::make_shared<const FiniteGroup>(std::move(table), n);
}

/// How the pixel permutation of a rep acts. Used to pick structured fast paths.
enum class SpatialAction { Identity, Rotation, Custom };

class UnitaryRep {
 public:
  UnitaryRep(GroupPtr group, std::size_t channels, std::size_t height, std::size_t width,
             std::vector<Matrix> channel_mats, std::vector<std::vector<std::uint32_t>> pixel_perms,
             SpatialAction spatial, std::string name)
      : group_(std::move(group)),
        channels_(channels),
        height_(height),
        width_(width),
        channel_(std::move(channel_mats)),
        pixel_(std::move(pixel_perms)),
        spatial_(spatial),
        name_(std::move(name)) {
    if (!group_) throw std::invalid_argument("UnitaryRep: null group");
    const std::size_t n = group_->order();
    if (!channel_.empty()) {
      if (channel_.size() != n) throw std::invalid_argument("UnitaryRep: one channel matrix per element required");
      for (const auto& m : channel_)
        if (m.rows != channels_ || m.cols != channels_)
          throw std::invalid_argument("UnitaryRep: channel matrix shape mismatch");
    }
    if (!pixel_.empty()) {
      if (pixel_.size() != n) throw std::invalid_argument("UnitaryRep: one pixel permutation per element required");
      for (const auto& p : pixel_)
        if (p.size() != pixels()) throw std::invalid_argument("UnitaryRep: pixel permutation size mismatch");
    }
    if (pixel_.empty()) spatial_ = SpatialAction::Identity;
  }

  const FiniteGroup& group() const { return *group_; }
  const GroupPtr& group_ptr() const { return group_; }
  std::size_t dim() const { return channels_ * pixels(); }
  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t pixels() const { return height_ * width_; }
  SpatialAction spatial_action() const { return spatial_; }
  const std::string& name() const { return name_; }

  bool channel_is_identity() const { return channel_.empty(); }
  /// Channel matrix of g (identity when the channel factor is trivial).
  Matrix channel_matrix(Element g) const {
    return channel_.empty() ? Matrix::identity(channels_) : channel_.at(g);
  }
  /// Gather permutation of g on pixels (identity permutation when spatial action is trivial).
  std::vector<std::uint32_t> pixel_perm(Element g) const {
    if (!pixel_.empty()) return pixel_.at(g);
    std::vector<std::uint32_t> id(pixels());
    std::iota(id.begin(), id.end(), 0u);
    return id;
  }

  /// y = rho(g) x. x and y must not alias.
  template <class T>
  void apply(Element g, std::span<const T> x, std::span<T> y) const {
    if (x.size() != dim() || y.size() != dim()) throw std::invalid_argument("UnitaryRep::apply: size mismatch");
    const std::size_t np = pixels();
    const std::uint32_t* perm = pixel_.empty() ? nullptr : pixel_[g].data();
    if (channel_.empty()) {
      for (std::size_t k = 0; k < channels_; ++k) {
        const T* src = x.data() + k * np;
        T* dst = y.data() + k * np;
        if (perm)
          for (std::size_t p = 0; p < np; ++p) dst[p] = src[perm[p]];
        else
          std::copy(src, src + np, dst);
      }
      return;
    }
    const Matrix& c = channel_[g];
    std::fill(y.begin(), y.end(), T(0));
    for (std::size_t k = 0; k < channels_; ++k) {
      T* dst = y.data() + k * np;
      for (std::size_t l = 0; l < channels_; ++l) {
        const double ckl = c(k, l);
        if (ckl == 0.0) continue;
        const T w = static_cast<T>(ckl);
        const T* src = x.data() + l * np;
        if (perm)
          for (std::size_t p = 0; p < np; ++p) dst[p] += w * src[perm[p]];
        else
          for (std::size_t p = 0; p < np; ++p) dst[p] += w * src[p];
      }
    }
  }

  template <class T>
  std::vector<T> apply(Element g, std::span<const T> x) const {
    std::vector<T> y(dim());
    apply<T>(g, x, std::span<T>(y));
    return y;
  }

  template <class T>
  std::vector<T> apply(Element g, const std::vector<T>& x) const {
    return apply<T>(g, std::span<const T>(x));
  }

  /// Dense matrix of rho(g); refuses spaces above kMaxDenseDim.
  Matrix matrix(Element g) const {
    if (dim() > kMaxDenseDim)
      throw CapacityError("UnitaryRep::matrix: dimension " + std::to_string(dim()) + " exceeds dense limit");
    Matrix m(dim(), dim());
    std::vector<double> e(dim(), 0.0), col(dim());
    for (std::size_t j = 0; j < dim(); ++j) {
      e[j] = 1.0;
      apply<double>(g, std::span<const double>(e), std::span<double>(col));
      for (std::size_t i = 0; i < dim(); ++i) m(i, j) = col[i];
      e[j] = 0.0;
    }
    return m;
  }

 private:
  GroupPtr group_;
  std::size_t channels_;
  std::size_t height_;
  std::size_t width_;
  std::vector<Matrix> channel_;
  std::vector<std::vector<std::uint32_t>> pixel_;
  SpatialAction spatial_;
  std::string name_;
};

namespace detail {

inline void require_cyclic(const FiniteGroup& g, const char* who) {
  if (g.cyclic_order() == 0) throw std::invalid_argument(std::string(who) + ": group must be built by make_cyclic");
}

/// Counterclockwise quarter turn of an n x n grid in gather form: out[r][c] = in[c][n-1-r].
inline std::vector<std::uint32_t> quarter_turn(std::size_t n) {
  std::vector<std::uint32_t> perm(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) perm[r * n + c] = static_cast<std::uint32_t>(c * n + (n - 1 - r));
  return perm;
}

/// Gather-form composition: applying `first` then `second` equals gathering with the result.
inline std::vector<std::uint32_t> then(const std::vector<std::uint32_t>& first,
                                       const std::vector<std::uint32_t>& second) {
  std::vector<std::uint32_t> out(first.size());
  for (std::size_t i = 0; i < first.size(); ++i) out[i] = first[second[i]];
  return out;
}

inline Matrix power(const Matrix& m, std::size_t k) {
  Matrix r = Matrix::identity(m.rows);
  for (std::size_t i = 0; i < k; ++i) r = r * m;
  return r;
}

}  // namespace detail

/// C4 (or a subgroup C2 / C1, acting by 180 degree / no rotation) rotating every
/// channel of a channels x height x width stack.
inline UnitaryRep rep_rot_c4(GroupPtr group, std::size_t height, std::size_t width, std::size_t channels) {
  detail::require_cyclic(*group, "rep_rot_c4");
  if (height != width) throw std::invalid_argument("rep_rot_c4: images must be square");
  const std::size_t n = group->order();
  if (4 % n != 0) throw std::invalid_argument("rep_rot_c4: group order must divide 4");
  const std::size_t quarter_turns_per_step = 4 / n;
  const auto turn = detail::quarter_turn(height);
  std::vector<std::vector<std::uint32_t>> perms(n);
  std::vector<std::uint32_t> cur(height * width);
  std::iota(cur.begin(), cur.end(), 0u);
  for (std::size_t k = 0; k < n; ++k) {
    perms[k] = cur;
    for (std::size_t q = 0; q < quarter_turns_per_step; ++q) cur = detail::then(cur, turn);
  }
  return UnitaryRep(std::move(group), channels, height, width, {}, std::move(perms), SpatialAction::Rotation,
                    "rot");
}

inline UnitaryRep rep_trivial(GroupPtr group, std::size_t dim) {
  return UnitaryRep(std::move(group), dim, 1, 1, {}, {}, SpatialAction::Identity, "triv");
}

/// (rho(k) v)_l = v_{l-k} inside each consecutive block of n = |G| entries.
inline UnitaryRep rep_channel_shift(GroupPtr group, std::size_t d) {
  detail::require_cyclic(*group, "rep_channel_shift");
  const std::size_t n = group->order();
  if (d % n != 0) throw std::invalid_argument("rep_channel_shift: d must be a multiple of the group order");
  std::vector<Matrix> mats;
  for (std::size_t k = 0; k < n; ++k) {
    Matrix m(d, d);
    for (std::size_t b = 0; b < d; b += n)
      for (std::size_t l = 0; l < n; ++l) m(b + l, b + (l + n - k) % n) = 1.0;
    mats.push_back(std::move(m));
  }
  return UnitaryRep(std::move(group), d, 1, 1, std::move(mats), {}, SpatialAction::Identity, "shift");
}

/// Representation of a cyclic group on R^d generated by an orthogonal matrix with generator^n = I.
inline UnitaryRep rep_from_generator(GroupPtr group, const Matrix& generator, std::string name = "gen") {
  detail::require_cyclic(*group, "rep_from_generator");
  const std::size_t n = group->order();
  if (generator.rows != generator.cols) throw std::invalid_argument("rep_from_generator: generator must be square");
  if (max_abs_diff(detail::power(generator, n), Matrix::identity(generator.rows)) > 1e-12)
    throw std::invalid_argument("rep_from_generator: generator^|G| is not the identity");
  if (max_abs_diff(generator.transpose() * generator, Matrix::identity(generator.rows)) > 1e-12)
    throw std::invalid_argument("rep_from_generator: generator is not orthogonal");
  std::vector<Matrix> mats;
  for (std::size_t k = 0; k < n; ++k) mats.push_back(detail::power(generator, k));
  return UnitaryRep(std::move(group), generator.rows, 1, 1, std::move(mats), {}, SpatialAction::Identity,
                    std::move(name));
}

/// (rho_ch (.) rho_sp)(g) x)_k = sum_l rho_ch(g)_{kl} rho_sp(g) x_l, where rho_sp acts
/// channelwise on images and rho_ch acts on R^d.
inline UnitaryRep rep_product(const UnitaryRep& channel_rep, const UnitaryRep& spatial_rep) {
  if (!channel_rep.group().same_as(spatial_rep.group())) throw std::invalid_argument("rep_product: different groups");
  if (channel_rep.pixels() != 1) throw std::invalid_argument("rep_product: channel rep must act on plain vectors");
  if (!spatial_rep.channel_is_identity())
    throw std::invalid_argument("rep_product: spatial rep must act identically on channels");
  if (spatial_rep.channels() != channel_rep.channels())
    throw std::invalid_argument("rep_product: channel count " + std::to_string(spatial_rep.channels()) +
                                " does not match channel rep dimension " + std::to_string(channel_rep.channels()));
  const std::size_t n = channel_rep.group().order();
  std::vector<Matrix> mats;
  if (!channel_rep.channel_is_identity())
    for (Element g = 0; g < n; ++g) mats.push_back(channel_rep.channel_matrix(g));
  std::vector<std::vector<std::uint32_t>> perms;
  if (spatial_rep.spatial_action() != SpatialAction::Identity)
    for (Element g = 0; g < n; ++g) perms.push_back(spatial_rep.pixel_perm(g));
  return UnitaryRep(channel_rep.group_ptr(), channel_rep.channels(), spatial_rep.height(), spatial_rep.width(),
                    std::move(mats), std::move(perms), spatial_rep.spatial_action(),
                    channel_rep.name() + "*" + spatial_rep.name());
}

/// Residuals of the representation laws, max over all element pairs.
struct RepCheck {
  double homomorphism = 0.0;
  double unitarity = 0.0;
};

/// Dense check for dim <= kMaxDenseDim; otherwise the channel and pixel factors are
/// checked separately (the tensor product of two representations is one).
inline RepCheck check_representation(const UnitaryRep& rep) {
  const FiniteGroup& grp = rep.group();
  const std::size_t n = grp.order();
  RepCheck out;
  if (rep.dim() <= kMaxDenseDim) {
    std::vector<Matrix> mats;
    for (Element g = 0; g < n; ++g) mats.push_back(rep.matrix(g));
    const Matrix id = Matrix::identity(rep.dim());
    for (Element g = 0; g < n; ++g) {
      out.unitarity = std::max(out.unitarity, max_abs_diff(mats[g].transpose() * mats[g], id));
      for (Element h = 0; h < n; ++h)
        out.homomorphism = std::max(out.homomorphism, max_abs_diff(mats[grp.compose(g, h)], mats[g] * mats[h]));
    }
    return out;
  }
  const Matrix cid = Matrix::identity(rep.channels());
  for (Element g = 0; g < n; ++g) {
    const Matrix cg = rep.channel_matrix(g);
    out.unitarity = std::max(out.unitarity, max_abs_diff(cg.transpose() * cg, cid));
    const auto pg = rep.pixel_perm(g);
    std::vector<bool> seen(pg.size(), false);
    for (const auto v : pg) {
      if (v >= pg.size() || seen[v]) out.unitarity = std::max(out.unitarity, 1.0);
      else seen[v] = true;
    }
    for (Element h = 0; h < n; ++h) {
      const Element gh = grp.compose(g, h);
      out.homomorphism = std::max(out.homomorphism, max_abs_diff(rep.channel_matrix(gh), cg * rep.channel_matrix(h)));
      if (rep.pixel_perm(gh) != detail::then(rep.pixel_perm(h), pg)) out.homomorphism = std::max(out.homomorphism, 1.0);
    }
  }
  return out;
}

}  // namespace equiflow
