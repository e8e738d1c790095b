// SPDX-License-Identifier: Apache-2.0
#include "arbor/counting.hpp"

#include <stdexcept>
#include <vector>

namespace arbor {

SkeletonSpec dyck1_skeleton() { return SkeletonSpec{1, 0, true}; }

SkeletonSpec architecture_skeleton(std::uint64_t chi) {
  return SkeletonSpec{2, chi, false};
}

namespace {

std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r = a + b;
  if (r < a) throw std::overflow_error("string count exceeds 64 bits");
  return r;
}

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > UINT64_MAX / a)
    throw std::overflow_error("string count exceeds 64 bits");
  return a * b;
}

// Dyck convention: brackets may enclose the empty string. Unambiguous
// first-pair decomposition W -> eps | digit W | <open> W <close> W.
std::uint64_t count_dyck(const SkeletonSpec& sk, int n) {
  std::vector<std::uint64_t> w(static_cast<std::size_t>(n) + 1, 0);
  w[0] = 1;
  for (int len = 1; len <= n; ++len) {
    std::uint64_t acc = 0;
    if (sk.chi > 0) acc = checked_mul(sk.chi, w[len - 1]);
    for (int inner = 0; inner + 2 <= len; ++inner) {
      std::uint64_t pairings = checked_mul(
          static_cast<std::uint64_t>(sk.bracket_kinds),
          checked_mul(w[inner], w[len - 2 - inner]));
      acc = checked_add(acc, pairings);
    }
    w[len] = acc;
  }
  return w[n];
}

// Architecture convention: every bracket pair wraps a nonempty string.
// Atoms are single computation symbols or bracketed strings; a string is a
// nonempty atom sequence, decomposed unambiguously by its first atom.
std::uint64_t count_nonempty(const SkeletonSpec& sk, int n) {
  std::vector<std::uint64_t> atom(static_cast<std::size_t>(n) + 1, 0);
  std::vector<std::uint64_t> str(static_cast<std::size_t>(n) + 1, 0);
  for (int len = 1; len <= n; ++len) {
    if (len == 1) atom[1] = sk.chi;
    else if (len >= 3)
      atom[len] = checked_mul(static_cast<std::uint64_t>(sk.bracket_kinds),
                              str[len - 2]);
    std::uint64_t acc = atom[len];
    for (int first = 1; first < len; ++first)
      acc = checked_add(acc, checked_mul(atom[first], str[len - first]));
    str[len] = acc;
  }
  return str[n];
}

}  // namespace

std::uint64_t count_architecture_strings(const SkeletonSpec& skeleton, int n) {
  if (n < 2) return 0;
  if (skeleton.empty_brackets) return count_dyck(skeleton, n);
  return count_nonempty(skeleton, n);
}

}  // namespace arbor
