#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "equiflow/paramspace.hpp"

using namespace equiflow;

namespace {

std::vector<double> gaussian(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

struct ConvToy {
  std::vector<LayerSpec> layers;
  AffineSpace space;
  LiftedRep rep;
};

// conv(1->2) then conv(2->2) on n x n images, rotation reps everywhere
ConvToy conv_toy(const FilterSupport& s, std::size_t n, Padding pad, GroupPtr grp = make_cyclic(4)) {
  std::vector<LayerSpec> layers{LayerSpec::conv(1, 2, n, s, pad), LayerSpec::conv(2, 2, n, s, pad)};
  const auto r1 = rep_rot_c4(grp, n, n, 1), r2 = rep_rot_c4(grp, n, n, 2);
  return {layers, AffineSpace(layers), LiftedRep(layers, {{r1, r2}, {r2, r2}})};
}

}  // namespace

TEST(FilterSupport, BuiltinMasks) {
  EXPECT_EQ(supports::sym3().count(), 5u);
  EXPECT_EQ(supports::asym3().count(), 5u);
  EXPECT_EQ(supports::sym5().count(), 13u);
  EXPECT_EQ(supports::asym5().count(), 13u);
  EXPECT_TRUE(supports::sym3().is_rotation_symmetric());
  EXPECT_TRUE(supports::sym5().is_rotation_symmetric());
  EXPECT_FALSE(supports::asym3().is_rotation_symmetric());
  EXPECT_FALSE(supports::asym5().is_rotation_symmetric());
  EXPECT_EQ(supports::asym3().to_ascii(), "##.\n#.#\n.#.\n");
  EXPECT_THROW(FilterSupport::from_rows({"...", "...", "..."}), std::invalid_argument);
  EXPECT_THROW(FilterSupport::from_rows({"##", "##"}), std::invalid_argument);
  EXPECT_THROW(FilterSupport::from_rows({"#x#", "###", "###"}), std::invalid_argument);
}

TEST(FilterSupport, AsciiRoundTripIsExact) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 200; ++t) {
    const std::size_t k = 1 + 2 * (rng() % 4);
    std::vector<bool> m(k * k);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng() % 2;
    m[rng() % m.size()] = true;
    const FilterSupport s(k, m);
    EXPECT_EQ(FilterSupport::from_ascii(s.to_ascii()), s);
    EXPECT_EQ(FilterSupport::from_rows(s.rows()), s);
  }
}

TEST(FilterSupport, RotationStableCells) {
  // 3x3 asymmetric: only the top-left corner leaves the rotation orbit intersection
  const auto st3 = supports::asym3().rotation_stable_cells();
  std::vector<bool> expect3{false, true, false, true, false, true, false, true, false};
  EXPECT_EQ(st3, expect3);
  // 5x5 asymmetric: the four top-left cells drop out
  const auto a5 = supports::asym5();
  const auto st5 = a5.rotation_stable_cells();
  for (std::size_t cell = 0; cell < 25; ++cell) {
    const std::size_t r = cell / 5, c = cell % 5;
    const bool top_left = r < 2 && c < 2;
    EXPECT_EQ(st5[cell], a5.at(cell) && !top_left) << cell;
  }
  EXPECT_EQ(supports::sym5().rotation_stable_cells(), supports::sym5().mask());
}

TEST(AffineSpace, BasisIsOrthonormalUnderBothPaddings) {
  for (const Padding pad : {Padding::Zero, Padding::Circular}) {
    const std::vector<LayerSpec> layers{LayerSpec::conv(1, 2, 5, supports::asym5(), pad),
                                        LayerSpec::dense(Shape{2, 5, 5}, 2)};
    const AffineSpace space(layers);
    ASSERT_EQ(space.dim(), 2u * 13u + 100u);
    std::vector<Matrix> dense;
    for (std::size_t b = 0; b < space.dim(); ++b) dense.push_back(densify(layers[0], space.basis_element(b).blocks[0]));
    // conv-layer elements against each other
    for (std::size_t a = 0; a < 26; ++a)
      for (std::size_t b = 0; b < 26; ++b) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dense[a].data.size(); ++i) dot += dense[a].data[i] * dense[b].data[i];
        EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-12);
      }
    for (std::size_t b = 26; b < space.dim(); b += 7)
      EXPECT_NEAR(frobenius_norm(layers, space.basis_element(b)), 1.0, 1e-12);
  }
}

TEST(LiftedApply, IdentityAndHomomorphism) {
  std::mt19937_64 rng(5);
  const auto toy = conv_toy(supports::asym3(), 6, Padding::Zero);
  const auto grp = make_cyclic(4);
  const auto c = gaussian(toy.space.dim(), rng);
  const auto a = toy.space.expand<double>(std::span<const double>(c));
  EXPECT_EQ(frobenius_distance(toy.layers, lifted_apply(toy.layers, toy.rep, 0, a), a), 0.0);
  const auto& G = toy.rep.group();
  for (Element g = 0; g < 4; ++g)
    for (Element h = 0; h < 4; ++h) {
      const auto lhs = lifted_apply(toy.layers, toy.rep, g, lifted_apply(toy.layers, toy.rep, h, a));
      const auto rhs = lifted_apply(toy.layers, toy.rep, G.compose(g, h), a);
      EXPECT_LT(frobenius_distance(toy.layers, lhs, rhs), 1e-12);
      // unitary action
      EXPECT_NEAR(frobenius_norm(toy.layers, rhs), frobenius_norm(toy.layers, a), 1e-10);
    }
}

TEST(LiftedApply, SignFlipOnBothSidesFixesDenseBlock) {
  const auto c2 = make_cyclic(2);
  Matrix neg = Matrix::identity(2);
  neg(0, 0) = neg(1, 1) = -1.0;
  const auto flip = rep_from_generator(c2, neg, "neg");
  const std::vector<LayerSpec> layers{LayerSpec::dense(Shape{2, 1, 1}, 2)};
  const LiftedRep rep(layers, {{flip, flip}});
  AmbientOperator<double> a{{Block<double>{BlockKind::Matrix, {1.0, -2.0, 3.5, 0.25}}}};
  EXPECT_EQ(lifted_apply(layers, rep, 1, a).blocks[0].values, a.blocks[0].values);
}

TEST(LiftedApply, FilterRotationMatchesDenseConjugation) {
  std::mt19937_64 rng(7);
  EXPECT_LT(rotate_filter_identity_check(supports::sym3(), 8, Padding::Circular, 1, 3, rng), 1e-12);
  EXPECT_LT(rotate_filter_identity_check(supports::asym3(), 8, Padding::Circular, 2, 3, rng), 1e-12);
  EXPECT_LT(rotate_filter_identity_check(supports::asym5(), 8, Padding::Zero, 2, 3, rng), 1e-12);
  EXPECT_LT(rotate_filter_identity_check(supports::sym5(), 7, Padding::Zero, 1, 3, rng), 1e-12);
}

TEST(LiftedApply, AsymmetricFilterLandsOnRotatedMask) {
  const auto toy = conv_toy(supports::asym3(), 8, Padding::Circular);
  const auto rotated = supports::asym3().rotated(1);
  for (std::size_t b = 0; b < 5; ++b) {  // out 0, in 0, each mask cell
    const auto moved = lifted_apply(toy.layers, toy.rep, 1, toy.space.basis_element(b));
    const auto& f = moved.blocks[0].values;
    ASSERT_EQ(moved.blocks[0].kind, BlockKind::Filters);
    std::size_t nonzero = 0;
    for (std::size_t cell = 0; cell < 9; ++cell)
      if (f[cell] != 0.0) {
        ++nonzero;
        EXPECT_TRUE(rotated.at(cell));
      }
    EXPECT_EQ(nonzero, 1u);
  }
  EXPECT_FALSE(rotated == supports::asym3());
}

TEST(Project, FixesRangeAndIsIdempotent) {
  std::mt19937_64 rng(9);
  const auto toy = conv_toy(supports::asym3(), 6, Padding::Zero);
  const auto c = gaussian(toy.space.dim(), rng);
  const auto a = toy.space.expand<double>(std::span<const double>(c));
  EXPECT_LT(frobenius_distance(toy.layers, toy.space.project(a), a), 1e-12);
  const auto m = random_dense_operator(toy.layers, rng);
  const auto pm = toy.space.project(m);
  EXPECT_LT(frobenius_distance(toy.layers, toy.space.project(pm), pm), 1e-12);
}

TEST(Project, IsSelfAdjoint) {
  std::mt19937_64 rng(10);
  const auto toy = conv_toy(supports::sym5(), 6, Padding::Zero);
  for (int t = 0; t < 5; ++t) {
    const auto m1 = random_dense_operator(toy.layers, rng);
    const auto m2 = random_dense_operator(toy.layers, rng);
    const double lhs = frobenius_dot(toy.layers, toy.space.project_tangent(m1), m2);
    const double rhs = frobenius_dot(toy.layers, m1, toy.space.project_tangent(m2));
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(Project, MatchesLeastSquaresFitOfMaskedFilter) {
  // oracle: least squares over filter values psi minimizing ||M - conv(psi)||_F, solved by QR
  std::mt19937_64 rng(12);
  for (const Padding pad : {Padding::Circular, Padding::Zero}) {
    const std::vector<LayerSpec> layers{LayerSpec::conv(1, 1, 6, supports::sym3(), pad)};
    const AffineSpace space(layers);
    const auto m = random_dense_operator(layers, rng);
    const auto cells = supports::sym3().cells();
    Eigen::MatrixXd design(36 * 36, cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      Block<double> unit{BlockKind::Filters, std::vector<double>(9, 0.0)};
      unit.values[cells[j]] = 1.0;
      const Matrix d = densify(layers[0], unit);
      for (std::size_t i = 0; i < d.data.size(); ++i) design(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d.data[i];
    }
    Eigen::VectorXd rhs(36 * 36);
    for (std::size_t i = 0; i < m.blocks[0].values.size(); ++i) rhs(static_cast<Eigen::Index>(i)) = m.blocks[0].values[i];
    const Eigen::VectorXd psi = design.colPivHouseholderQr().solve(rhs);
    const auto proj = space.project(m);
    ASSERT_EQ(proj.blocks[0].kind, BlockKind::Filters);
    for (std::size_t j = 0; j < cells.size(); ++j)
      EXPECT_NEAR(proj.blocks[0].values[cells[j]], psi(static_cast<Eigen::Index>(j)), 1e-12);
  }
}

TEST(Invariance, SymmetricSupportIsInvariantAsymmetricIsNot) {
  const auto sym = conv_toy(supports::sym3(), 8, Padding::Circular);
  const auto res_sym = check_G_invariance(sym.space, sym.rep);
  for (const double r : res_sym) EXPECT_LT(r, 1e-10);
  EXPECT_TRUE(is_G_invariant(res_sym));

  const auto asym = conv_toy(supports::asym3(), 8, Padding::Circular);
  const auto res_asym = check_G_invariance(asym.space, asym.rep);
  EXPECT_GT(res_asym[1], 0.1);
  EXPECT_LT(res_asym[0], 1e-14);
  EXPECT_FALSE(is_G_invariant(res_asym));

  // the dense route gives the same verdicts
  const auto dense_sym = check_G_invariance(sym.space, sym.rep, true);
  const auto dense_asym = check_G_invariance(asym.space, asym.rep, true);
  for (Element g = 0; g < 4; ++g) {
    EXPECT_NEAR(dense_sym[g], res_sym[g], 1e-12);
    EXPECT_NEAR(dense_asym[g], res_asym[g], 1e-12);
  }
}

TEST(Invariance, FullDenseSpaceIsAlwaysInvariant) {
  const auto c4 = make_cyclic(4);
  const std::vector<LayerSpec> layers{LayerSpec::dense(Shape{1, 3, 3}, 4)};
  const LiftedRep rep(layers, {{rep_rot_c4(c4, 3, 3, 1), rep_channel_shift(c4, 4)}});
  for (const double r : check_G_invariance(AffineSpace(layers), rep)) EXPECT_EQ(r, 0.0);
}

TEST(Invariance, DenseRouteRefusesLargeSpaces) {
  const auto c4 = make_cyclic(4);
  const std::vector<LayerSpec> layers{LayerSpec::conv(1, 8, 28, supports::sym3(), Padding::Zero)};
  const LiftedRep rep(layers, {{rep_rot_c4(c4, 28, 28, 1), rep_rot_c4(c4, 28, 28, 8)}});
  EXPECT_THROW(check_G_invariance(AffineSpace(layers), rep, true), CapacityError);
  // the structured route still works
  EXPECT_TRUE(is_G_invariant(check_G_invariance(AffineSpace(layers), rep)));
}

TEST(ProjectionEquivariance, AgreesWithInvarianceVerdict) {
  std::mt19937_64 rng(13);
  for (const auto& [support, invariant] : {std::pair{supports::sym3(), true}, std::pair{supports::asym3(), false},
                                           std::pair{supports::sym5(), true}, std::pair{supports::asym5(), false}}) {
    const auto toy = conv_toy(support, 8, Padding::Circular);
    const double res = check_projection_equivariance(toy.space, toy.rep, 2, rng);
    const bool verdict = is_G_invariant(check_G_invariance(toy.space, toy.rep));
    EXPECT_EQ(verdict, invariant);
    EXPECT_EQ(res < 1e-10, verdict);
    if (!invariant) EXPECT_GT(res, 0.1);
  }
}

TEST(ProjectionEquivariance, TrivialGroupHasZeroResidual) {
  std::mt19937_64 rng(14);
  const auto toy = conv_toy(supports::asym3(), 6, Padding::Zero, make_cyclic(1));
  EXPECT_EQ(check_projection_equivariance(toy.space, toy.rep, 2, rng), 0.0);
}

TEST(ProductRepEscape, AsymmetricSupportEscapesUnderEveryChannelRep) {
  const auto c4 = make_cyclic(4);
  for (const auto& ch : {rep_trivial(c4, 4), rep_channel_shift(c4, 4), rep_trivial(c4, 1)}) {
    const auto r = appendixC_escape_check(ch, supports::asym3());
    EXPECT_TRUE(r.escaped) << ch.name();
    EXPECT_FALSE(supports::asym3().at(r.cell));
    EXPECT_NE(r.value, 0.0);
    EXPECT_NE(r.element, 0u);
    EXPECT_FALSE(appendixC_escape_check(ch, supports::sym3()).escaped) << ch.name();
    EXPECT_FALSE(appendixC_escape_check(ch, supports::sym5()).escaped) << ch.name();
    EXPECT_TRUE(appendixC_escape_check(ch, supports::asym5()).escaped) << ch.name();
  }
}

TEST(ProductRepEscape, WitnessIsTheRotatedCornerUnderShift) {
  // enumerate by hand: basis filter at the top-left corner (cell 0) of output channel 0
  // rotates to the bottom-left corner (cell 6) and is moved to output channel 1 by the shift
  const auto c4 = make_cyclic(4);
  const auto r = appendixC_escape_check(rep_channel_shift(c4, 4), supports::asym3());
  EXPECT_EQ(r.element, 1u);
  EXPECT_EQ(r.basis_index, 0u);
  EXPECT_EQ(r.out_channel, 1u);
  EXPECT_EQ(r.cell, 6u);
}
