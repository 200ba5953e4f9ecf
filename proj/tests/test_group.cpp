#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>

#include "eqnet/group.hpp"
#include "oracle_helpers.hpp"

using namespace eqnet;
using eqtest::max_abs_diff;
using eqtest::random_tensor;

namespace {

std::array<int, 4> mat_mul(const std::array<int, 4>& a, const std::array<int, 4>& b) {
  return {a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2],
          a[2] * b[1] + a[3] * b[3]};
}

}  // namespace

TEST_CASE("canonical form and worked compositions") {
  const auto r = StabilizerElement{false, 1, GroupKind::D4};
  const auto m = StabilizerElement{true, 0, GroupKind::D4};

  // r o r o r o r = e
  auto g = compose(r, compose(r, compose(r, r)));
  CHECK(g == identity(GroupKind::D4));

  // the dihedral relation: m o r o m = r^3
  auto mrm = compose(m, compose(r, m));
  CHECK(mrm == (StabilizerElement{false, 3, GroupKind::D4}));

  // identity absorbs on both sides
  for (int i = 0; i < 8; ++i) {
    const auto h = element_at(GroupKind::D4, i);
    CHECK(compose(identity(GroupKind::D4), h) == h);
    CHECK(compose(h, identity(GroupKind::D4)) == h);
  }

  CHECK_THROWS_AS(compose(r, StabilizerElement{false, 1, GroupKind::C4}), ContractError);
}

TEST_CASE("inverses") {
  CHECK(inverse(StabilizerElement{false, 1, GroupKind::C4}) ==
        (StabilizerElement{false, 3, GroupKind::C4}));
  CHECK(inverse(StabilizerElement{true, 0, GroupKind::D4}) ==
        (StabilizerElement{true, 0, GroupKind::D4}));
  for (int i = 0; i < 8; ++i) {
    const auto g = element_at(GroupKind::D4, i);
    CHECK(compose(inverse(g), g) == identity(GroupKind::D4));
    CHECK(compose(g, inverse(g)) == identity(GroupKind::D4));
  }
}

TEST_CASE("group axioms verified exhaustively via the tables") {
  for (GroupKind kind : {GroupKind::Trivial, GroupKind::C4, GroupKind::D4}) {
    const auto& tb = GroupTables::of(kind);
    const int n = tb.size;
    // closure
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        CHECK(tb.compose_idx(a, b) >= 0);
        CHECK(tb.compose_idx(a, b) < n);
      }
    // identity row and column
    for (int a = 0; a < n; ++a) {
      CHECK(tb.compose_idx(0, a) == a);
      CHECK(tb.compose_idx(a, 0) == a);
    }
    // inverses
    for (int a = 0; a < n; ++a) {
      CHECK(tb.compose_idx(a, tb.inverse_idx(a)) == 0);
      CHECK(tb.compose_idx(tb.inverse_idx(a), a) == 0);
    }
    // associativity, all triples
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c)
          CHECK(tb.compose_idx(tb.compose_idx(a, b), c) ==
                tb.compose_idx(a, tb.compose_idx(b, c)));
  }
  // C4 abelian, D4 not
  const auto& c4 = GroupTables::of(GroupKind::C4);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) CHECK(c4.compose_idx(a, b) == c4.compose_idx(b, a));
  const auto& d4 = GroupTables::of(GroupKind::D4);
  bool commutes = true;
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b)
      if (d4.compose_idx(a, b) != d4.compose_idx(b, a)) commutes = false;
  CHECK_FALSE(commutes);
}

TEST_CASE("matrix representation is a faithful homomorphism") {
  for (GroupKind kind : {GroupKind::C4, GroupKind::D4}) {
    const int n = group_size(kind);
    std::set<std::array<int, 4>> seen;
    for (int i = 0; i < n; ++i) seen.insert(as_matrix(element_at(kind, i)));
    CHECK(static_cast<int>(seen.size()) == n);  // injective
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        const auto prod = mat_mul(as_matrix(element_at(kind, a)), as_matrix(element_at(kind, b)));
        const auto comp = as_matrix(compose(element_at(kind, a), element_at(kind, b)));
        CHECK(prod == comp);
      }
  }
}

TEST_CASE("act_on_kernel examples") {
  std::vector<float> taps(9);
  for (int i = 0; i < 9; ++i) taps[static_cast<size_t>(i)] = static_cast<float>(i + 1);
  Tensor<float> k(Shape{3, 3}, std::move(taps));

  auto rk = act_on_kernel(StabilizerElement{false, 1, GroupKind::D4}, k);
  const std::vector<float> want{3, 6, 9, 2, 5, 8, 1, 4, 7};
  for (int i = 0; i < 9; ++i)
    CHECK(rk.data()[static_cast<size_t>(i)] == want[static_cast<size_t>(i)]);

  // rotation-symmetric kernel is a fixed point of all 8 elements
  auto ones = Tensor<float>::full(Shape{3, 3}, 1.0f);
  for (int i = 0; i < 8; ++i)
    CHECK(max_abs_diff(act_on_kernel(element_at(GroupKind::D4, i), ones), ones) == 0.0);

  // identity element leaves any kernel untouched
  CHECK(max_abs_diff(act_on_kernel(identity(GroupKind::D4), k), k) == 0.0);

  CHECK_THROWS_AS(act_on_kernel(identity(GroupKind::D4), Tensor<float>::zeros(Shape{2, 2})),
                  DimensionError);
  CHECK_THROWS_AS(act_on_kernel(identity(GroupKind::D4), Tensor<float>::zeros(Shape{2, 3})),
                  DimensionError);
}

TEST_CASE("act_on_kernel is a homomorphism on all 64 D4 pairs") {
  Rng rng(17);
  auto k = random_tensor<float>(rng, {3, 3});
  for (int ai = 0; ai < 8; ++ai)
    for (int bi = 0; bi < 8; ++bi) {
      const auto a = element_at(GroupKind::D4, ai);
      const auto b = element_at(GroupKind::D4, bi);
      auto lhs = act_on_kernel(a, act_on_kernel(b, k));
      auto rhs = act_on_kernel(compose(a, b), k);
      CHECK(max_abs_diff(lhs, rhs) == 0.0);
    }
}

TEST_CASE("orientation-axis action") {
  const auto& c4 = GroupTables::of(GroupKind::C4);
  auto perm = act_on_orientation_axis(StabilizerElement{false, 1, GroupKind::C4}, c4);
  CHECK(perm == std::vector<int>{1, 2, 3, 0});  // cyclic shift

  auto id = act_on_orientation_axis(identity(GroupKind::C4), c4);
  CHECK(id == std::vector<int>{0, 1, 2, 3});

  // pi_a o pi_b = pi_{a o b} for all D4 pairs; every pi is a bijection
  const auto& d4 = GroupTables::of(GroupKind::D4);
  for (int ai = 0; ai < 8; ++ai) {
    const auto pa = act_on_orientation_axis(element_at(GroupKind::D4, ai), d4);
    CHECK(std::set<int>(pa.begin(), pa.end()).size() == 8);
    for (int bi = 0; bi < 8; ++bi) {
      const auto pb = act_on_orientation_axis(element_at(GroupKind::D4, bi), d4);
      const auto pab = act_on_orientation_axis(
          compose(element_at(GroupKind::D4, ai), element_at(GroupKind::D4, bi)), d4);
      for (int h = 0; h < 8; ++h)
        CHECK(pa[static_cast<size_t>(pb[static_cast<size_t>(h)])] ==
              pab[static_cast<size_t>(h)]);
    }
  }
}

TEST_CASE("group name parsing") {
  CHECK(group_from_name("p4m") == GroupKind::D4);
  CHECK(group_from_name("p4") == GroupKind::C4);
  CHECK(group_from_name("trivial") == GroupKind::Trivial);
  CHECK_THROWS_AS(group_from_name("so2"), ConfigError);
}
