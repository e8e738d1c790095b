// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace arbor {

// Bracket abstraction of the architecture grammar: nonterminal modules are
// reduced to matched bracket pairs and every computation symbol to one of
// `chi` plain terminals. `empty_brackets` selects the classic Dyck
// convention where a pair may enclose the empty string; the architecture
// skeleton itself always has at least one symbol between brackets.
struct SkeletonSpec {
  int bracket_kinds = 2;
  std::uint64_t chi = 1;
  bool empty_brackets = false;
};

SkeletonSpec dyck1_skeleton();
SkeletonSpec architecture_skeleton(std::uint64_t chi);

// Number of distinct terminal strings of length exactly n derivable from
// the start symbol. Returns 0 for n < 2 on non-Dyck skeletons (every start
// rule yields at least two leaves). Throws std::overflow_error if the count
// does not fit in 64 bits.
std::uint64_t count_architecture_strings(const SkeletonSpec& skeleton, int n);

}  // namespace arbor
