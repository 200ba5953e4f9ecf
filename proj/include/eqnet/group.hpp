#pragma once

#include <array>
#include <string>
#include <vector>

#include "eqnet/ops.hpp"
#include "eqnet/tensor.hpp"

namespace eqnet {

/// Point-group (stabilizer) part of the symmetry group: C4 for p4, D4 for
/// p4m, plus the trivial group so plain CNNs share the same code path.
enum class GroupKind { Trivial, C4, D4 };

int group_size(GroupKind kind);
const char* group_name(GroupKind kind);
GroupKind group_from_name(const std::string& name);  // trivial|c4|d4|p4|p4m

/// Element m^a r^b in canonical form: `mirror` is a horizontal flip
/// (negate x) applied before `rot` counter-clockwise quarter turns.
struct StabilizerElement {
  bool mirror = false;
  int rot = 0;  // 0..3
  GroupKind kind = GroupKind::C4;
};

bool operator==(const StabilizerElement& a, const StabilizerElement& b);
StabilizerElement identity(GroupKind kind);

/// a o b: apply b first, then a. Mixed group kinds are a contract error.
StabilizerElement compose(const StabilizerElement& a, const StabilizerElement& b);
StabilizerElement inverse(const StabilizerElement& g);

/// Signed 2x2 matrix of the element's action on (x, y), row-major.
std::array<int, 4> as_matrix(const StabilizerElement& g);

/// Canonical element order: C4 = [e, r, r2, r3]; D4 adds [m, mr, mr2, mr3].
int element_index(const StabilizerElement& g);
StabilizerElement element_at(GroupKind kind, int index);

/// Precomputed composition/inverse tables over the canonical element order.
struct GroupTables {
  GroupKind kind = GroupKind::C4;
  int size = 4;
  std::array<std::array<uint8_t, 8>, 8> compose_table{};
  std::array<uint8_t, 8> inverse_table{};

  int compose_idx(int a, int b) const { return compose_table[static_cast<size_t>(a)][static_cast<size_t>(b)]; }
  int inverse_idx(int a) const { return inverse_table[static_cast<size_t>(a)]; }

  static const GroupTables& of(GroupKind kind);
};

/// Left-multiplication permutation pi with pi[h] = index(g o h): the channel
/// shuffle a G-feature map's orientation axis undergoes when the input is
/// transformed by g (destination convention: slot h moves to slot pi[h]).
std::vector<int> act_on_orientation_axis(const StabilizerElement& g, const GroupTables& tables);

/// (g . psi)(y) = psi(g^-1 y) about the kernel center, as a pure index
/// permutation. Requires odd square spatial support.
template <class T>
Tensor<T> act_on_kernel(const StabilizerElement& g, const Tensor<T>& kernel) {
  if (kernel.rank() < 2) fail<DimensionError>("act_on_kernel: rank ", kernel.rank(), " < 2");
  const int64_t h = kernel.dim(-2), w = kernel.dim(-1);
  if (h != w) fail<DimensionError>("act_on_kernel: non-square support ", h, "x", w);
  if (h % 2 == 0) fail<DimensionError>("act_on_kernel: even size ", h, " has no center");
  return transform_plane(kernel, g.rot, g.mirror);
}

}  // namespace eqnet
