#include "eqnet/group.hpp"

#include <algorithm>

namespace eqnet {

int group_size(GroupKind kind) {
  switch (kind) {
    case GroupKind::Trivial:
      return 1;
    case GroupKind::C4:
      return 4;
    case GroupKind::D4:
      return 8;
  }
  fail<ContractError>("unknown group kind");
}

const char* group_name(GroupKind kind) {
  switch (kind) {
    case GroupKind::Trivial:
      return "trivial";
    case GroupKind::C4:
      return "c4";
    case GroupKind::D4:
      return "d4";
  }
  fail<ContractError>("unknown group kind");
}

GroupKind group_from_name(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  if (n == "trivial" || n == "z2") return GroupKind::Trivial;
  if (n == "c4" || n == "p4") return GroupKind::C4;
  if (n == "d4" || n == "p4m") return GroupKind::D4;
  fail<ConfigError>("unknown group '", name, "' (expected trivial, p4 or p4m)");
}

bool operator==(const StabilizerElement& a, const StabilizerElement& b) {
  return a.kind == b.kind && a.mirror == b.mirror && a.rot == b.rot;
}

StabilizerElement identity(GroupKind kind) { return {false, 0, kind}; }

namespace {
void check_element(const StabilizerElement& g) {
  if (g.rot < 0 || g.rot > 3) fail<ContractError>("rotation exponent ", g.rot, " outside 0..3");
  if (g.mirror && g.kind != GroupKind::D4)
    fail<ContractError>("mirrored element in a group without reflections");
  if (g.kind == GroupKind::Trivial && g.rot != 0)
    fail<ContractError>("non-identity element of the trivial group");
}
}  // namespace

StabilizerElement compose(const StabilizerElement& a, const StabilizerElement& b) {
  if (a.kind != b.kind) fail<ContractError>("compose: mixed group kinds");
  check_element(a);
  check_element(b);
  // action is R^rot M^mirror; M R^t = R^{-t} M gives the dihedral relation
  const int rot = ((a.rot + (a.mirror ? -b.rot : b.rot)) % 4 + 4) % 4;
  return {a.mirror != b.mirror, rot, a.kind};
}

StabilizerElement inverse(const StabilizerElement& g) {
  check_element(g);
  if (g.mirror) return g;  // reflections are involutions
  return {false, (4 - g.rot) % 4, g.kind};
}

std::array<int, 4> as_matrix(const StabilizerElement& g) {
  check_element(g);
  // start from M^mirror, then apply R rot times (left multiply)
  int m[4] = {g.mirror ? -1 : 1, 0, 0, 1};
  for (int k = 0; k < g.rot; ++k) {
    // R = [[0,-1],[1,0]]
    const int r0 = -m[2], r1 = -m[3];
    const int r2 = m[0], r3 = m[1];
    m[0] = r0;
    m[1] = r1;
    m[2] = r2;
    m[3] = r3;
  }
  return {m[0], m[1], m[2], m[3]};
}

int element_index(const StabilizerElement& g) {
  check_element(g);
  return (g.mirror ? 4 : 0) + g.rot;
}

StabilizerElement element_at(GroupKind kind, int index) {
  const int n = group_size(kind);
  if (index < 0 || index >= n)
    fail<ContractError>("element index ", index, " outside group of size ", n);
  return {index >= 4, index % 4, kind};
}

const GroupTables& GroupTables::of(GroupKind kind) {
  static const GroupTables trivial = [] {
    GroupTables t;
    t.kind = GroupKind::Trivial;
    t.size = 1;
    t.compose_table[0][0] = 0;
    t.inverse_table[0] = 0;
    return t;
  }();
  static const GroupTables c4 = [] {
    GroupTables t;
    t.kind = GroupKind::C4;
    t.size = 4;
    for (int a = 0; a < 4; ++a) {
      for (int b = 0; b < 4; ++b)
        t.compose_table[a][b] = static_cast<uint8_t>(
            element_index(compose(element_at(GroupKind::C4, a), element_at(GroupKind::C4, b))));
      t.inverse_table[a] =
          static_cast<uint8_t>(element_index(inverse(element_at(GroupKind::C4, a))));
    }
    return t;
  }();
  static const GroupTables d4 = [] {
    GroupTables t;
    t.kind = GroupKind::D4;
    t.size = 8;
    for (int a = 0; a < 8; ++a) {
      for (int b = 0; b < 8; ++b)
        t.compose_table[a][b] = static_cast<uint8_t>(
            element_index(compose(element_at(GroupKind::D4, a), element_at(GroupKind::D4, b))));
      t.inverse_table[a] =
          static_cast<uint8_t>(element_index(inverse(element_at(GroupKind::D4, a))));
    }
    return t;
  }();
  switch (kind) {
    case GroupKind::Trivial:
      return trivial;
    case GroupKind::C4:
      return c4;
    case GroupKind::D4:
      return d4;
  }
  fail<ContractError>("unknown group kind");
}

std::vector<int> act_on_orientation_axis(const StabilizerElement& g, const GroupTables& tables) {
  if (g.kind != tables.kind) fail<ContractError>("element and tables from different groups");
  const int gi = element_index(g);
  std::vector<int> perm(static_cast<size_t>(tables.size));
  for (int h = 0; h < tables.size; ++h) perm[static_cast<size_t>(h)] = tables.compose_idx(gi, h);
  return perm;
}

}  // namespace eqnet
