// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "arbor/grammar.hpp"
#include "arbor/rng.hpp"
#include "arbor/shape.hpp"

using namespace arbor;

TEST_CASE("im2col output geometry") {
  SUBCASE("the worked 32x32 stride-2 case") {
    auto g = im2col_output(32, 32, 7, 2, 3);
    REQUIRE(g.ok());
    CHECK(g.value().l == 256);
    CHECK(g.value().h_out == 16);
    CHECK(g.value().w_out == 16);
  }
  SUBCASE("identity kernel") {
    auto g = im2col_output(9, 13, 1, 1, 0);
    REQUIRE(g.ok());
    CHECK(g.value().l == 9 * 13);
    CHECK(g.value().h_out == 9);
    CHECK(g.value().w_out == 13);
  }
  SUBCASE("full-image kernel collapses to one column") {
    auto g = im2col_output(28, 28, 16, 16, 0);
    REQUIRE(g.ok());
    CHECK(g.value().l == 1);
  }
  SUBCASE("oversized kernel collapses the feature") {
    auto g = im2col_output(2, 2, 16, 16, 0);
    CHECK_FALSE(g.ok());
    CHECK(g.error().code == ShapeErrorCode::FeatureCollapsed);
  }
}

TEST_CASE("transfer semantics per terminal") {
  SUBCASE("im2col sets mode, token dims and the fold target") {
    auto r = transfer(im2col_op(3, 1, 1), make_im_state(3, 8, 8));
    REQUIRE(r.ok());
    const ShapeState& out = r.value().output_states[0];
    CHECK(out.shape == std::vector<std::int64_t>{64, 27});
    CHECK(out.mode == Mode::Col);
    REQUIRE(out.pending.has_value());
    CHECK(out.pending->h_out == 8);
    CHECK(out.pending->w_out == 8);
  }

  SUBCASE("col2im folds back and clears the target") {
    ShapeState col = make_col_state(64, 27);
    col.pending = PendingIm{8, 8};
    auto r = transfer(col2im_op(), col);
    REQUIRE(r.ok());
    CHECK(r.value().output_states[0].shape == std::vector<std::int64_t>{27, 8, 8});
    CHECK(r.value().output_states[0].mode == Mode::Im);
    CHECK_FALSE(r.value().output_states[0].pending.has_value());
  }

  SUBCASE("col2im without a fold target is a distinct error") {
    auto r = transfer(col2im_op(), make_col_state(64, 27));
    CHECK_FALSE(r.ok());
    CHECK(r.error().code == ShapeErrorCode::PendingImViolation);
  }

  SUBCASE("col2im with mismatched token count fails") {
    ShapeState col = make_col_state(60, 27);
    col.pending = PendingIm{8, 8};
    auto r = transfer(col2im_op(), col);
    CHECK_FALSE(r.ok());
    CHECK(r.error().code == ShapeErrorCode::PendingImViolation);
  }

  SUBCASE("permute transposes col features") {
    auto r = transfer(permute_op({2, 1}), make_col_state(10, 5));
    REQUIRE(r.ok());
    CHECK(r.value().output_states[0].shape == std::vector<std::int64_t>{5, 10});
  }

  SUBCASE("group splits a dimension and sets the branching factor") {
    auto r = transfer(group_op(1, 2), make_im_state(64, 4, 4));
    REQUIRE(r.ok());
    REQUIRE(r.value().output_states.size() == 2);
    for (const auto& s : r.value().output_states) {
      CHECK(s.shape == std::vector<std::int64_t>{32, 4, 4});
      CHECK(s.branching_factor == 2);
    }
  }

  SUBCASE("group divisibility failure carries its own code") {
    auto r = transfer(group_op(1, 2), make_im_state(3, 8, 8));
    CHECK_FALSE(r.ok());
    CHECK(r.error().code == ShapeErrorCode::Divisibility);
  }

  SUBCASE("clone with b=4 stores one replica state") {
    auto r = transfer(clone_op(4), make_im_state(3, 8, 8));
    REQUIRE(r.ok());
    CHECK(r.value().output_states.size() == 1);
    CHECK(r.value().output_states[0].branching_factor == 4);
  }

  SUBCASE("linear maps tokens in col mode and channels in im mode") {
    auto col = transfer(linear_op(16), make_col_state(4, 8));
    REQUIRE(col.ok());
    CHECK(col.value().output_states[0].shape == std::vector<std::int64_t>{4, 16});
    CHECK(col.value().param_count == 8 * 16 + 16);

    auto im = transfer(linear_op(32), make_im_state(3, 8, 8));
    REQUIRE(im.ok());
    CHECK(im.value().output_states[0].shape == std::vector<std::int64_t>{32, 8, 8});
    CHECK(im.value().param_count == 3 * 32 + 32);
  }

  SUBCASE("norm parameters follow the normalised dimension") {
    CHECK(transfer(norm_op(), make_im_state(24, 8, 8)).value().param_count == 48);
    CHECK(transfer(norm_op(), make_col_state(10, 32)).value().param_count == 64);
  }

  SUBCASE("pos-enc allocates one parameter per feature element") {
    CHECK(transfer(pos_enc_op(), make_col_state(10, 32)).value().param_count == 320);
    CHECK(transfer(pos_enc_op(), make_im_state(3, 4, 4)).value().param_count == 48);
  }

  SUBCASE("conv1d convolves the sequence dimension") {
    auto r = transfer(conv1d_op(3, 1, 1, 64), make_col_state(1000, 4));
    REQUIRE(r.ok());
    CHECK(r.value().output_states[0].shape == std::vector<std::int64_t>{1000, 64});
    CHECK(r.value().param_count == 4 * 3 * 64 + 64);
    // k=8 with p=3 shortens the sequence by one.
    auto r8 = transfer(conv1d_op(8, 1, 3, 32), make_col_state(46, 1));
    REQUIRE(r8.ok());
    CHECK(r8.value().output_states[0].shape == std::vector<std::int64_t>{45, 32});
  }

  SUBCASE("transfer is pure") {
    ShapeState in = make_im_state(8, 16, 16);
    auto a = transfer(im2col_op(3, 2, 1), in);
    auto b = transfer(im2col_op(3, 2, 1), in);
    REQUIRE(a.ok());
    REQUIRE(b.ok());
    CHECK(a.value().output_states[0] == b.value().output_states[0]);
    CHECK(a.value().param_count == b.value().param_count);
  }
}

TEST_CASE("aggregation shapes") {
  SUBCASE("add requires identical shapes") {
    std::vector<ShapeState> same = {make_im_state(64, 8, 8), make_im_state(64, 8, 8)};
    auto r = aggregate_shape(add_op(), same);
    REQUIRE(r.ok());
    CHECK(r.value().shape == std::vector<std::int64_t>{64, 8, 8});

    std::vector<ShapeState> diff = {make_im_state(64, 8, 8), make_im_state(32, 8, 8)};
    CHECK_FALSE(aggregate_shape(add_op(), diff).ok());
  }

  SUBCASE("concat sums the chosen dimension") {
    std::vector<ShapeState> four(4, make_im_state(16, 8, 8));
    auto r = aggregate_shape(concat_op(1, 4), four);
    REQUIRE(r.ok());
    CHECK(r.value().shape == std::vector<std::int64_t>{64, 8, 8});
  }

  SUBCASE("matmul follows the attention pattern on equal shapes") {
    std::vector<ShapeState> qk = {make_col_state(16, 32), make_col_state(16, 32)};
    auto r = aggregate_shape(matmul_op(true), qk);
    REQUIRE(r.ok());
    CHECK(r.value().shape == std::vector<std::int64_t>{16, 16});
  }

  SUBCASE("matmul multiplies compatible shapes directly") {
    std::vector<ShapeState> av = {make_col_state(16, 32), make_col_state(32, 8)};
    auto r = aggregate_shape(matmul_op(false), av);
    REQUIRE(r.ok());
    CHECK(r.value().shape == std::vector<std::int64_t>{16, 8});
  }

  SUBCASE("matmul rejects im mode and arity != 2") {
    std::vector<ShapeState> im = {make_im_state(4, 4, 4), make_im_state(4, 4, 4)};
    CHECK(aggregate_shape(matmul_op(false), im).error().code ==
          ShapeErrorCode::ModeViolation);
    std::vector<ShapeState> three(3, make_col_state(4, 4));
    CHECK(aggregate_shape(matmul_op(false), three).error().code ==
          ShapeErrorCode::ArityMismatch);
  }

  SUBCASE("modes may not mix") {
    std::vector<ShapeState> mixed = {make_im_state(4, 4, 4), make_col_state(16, 4)};
    CHECK_FALSE(aggregate_shape(add_op(), mixed).ok());
  }
}

TEST_CASE("group then concat restores the input shape") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int b = std::vector<int>{2, 4, 8}[rng.uniform_int(3)];
    const bool im = rng.uniform() < 0.5;
    ShapeState in = im ? make_im_state(8 * (1 + rng.uniform_int(8)),
                                       1 + rng.uniform_int(16),
                                       1 + rng.uniform_int(16))
                       : make_col_state(8 * (1 + rng.uniform_int(16)),
                                        8 * (1 + rng.uniform_int(8)));
    const int max_dim = im ? 3 : 2;
    const int dim = 1 + static_cast<int>(rng.uniform_int(max_dim));
    auto grouped = transfer(group_op(dim, b), in);
    if (!grouped.ok()) {
      CHECK(grouped.error().code == ShapeErrorCode::Divisibility);
      continue;
    }
    std::vector<ShapeState> branches(static_cast<std::size_t>(b),
                                     grouped.value().output_states[0]);
    auto merged = aggregate_shape(concat_op(dim, b), branches);
    REQUIRE(merged.ok());
    CHECK(merged.value().shape == in.shape);
  }
}

TEST_CASE("col2im after identity-kernel im2col restores the image") {
  ShapeState in = make_im_state(5, 6, 7);
  auto unfolded = transfer(im2col_op(1, 1, 0), in);
  REQUIRE(unfolded.ok());
  auto folded = transfer(col2im_op(), unfolded.value().output_states[0]);
  REQUIRE(folded.ok());
  CHECK(folded.value().output_states[0].shape == in.shape);
  CHECK(folded.value().output_states[0].mode == Mode::Im);
}
