// SPDX-License-Identifier: Apache-2.0
#include <map>

#include <doctest.h>

#include "arbor/tasks.hpp"

using namespace arbor;

TEST_CASE("task regeneration is byte-identical") {
  for (const auto& id : synthetic_task_ids()) {
    SyntheticTask a = make_synthetic_task(id, 7);
    SyntheticTask b = make_synthetic_task(id, 7);
    CHECK(a.train.inputs.data == b.train.inputs.data);
    CHECK(a.train.labels == b.train.labels);
    CHECK(a.val.inputs.data == b.val.inputs.data);
    CHECK(a.val.labels == b.val.labels);

    SyntheticTask c = make_synthetic_task(id, 8);
    CHECK(a.train.inputs.data != c.train.inputs.data);
  }
}

TEST_CASE("task sizes and class balance") {
  for (const auto& id : synthetic_task_ids()) {
    SyntheticTask t = make_synthetic_task(id, 0);
    CHECK(t.train.inputs.dims[0] == 2048);
    CHECK(t.val.inputs.dims[0] == 512);

    std::map<int, int> counts;
    for (int label : t.train.labels) ++counts[label];
    CHECK(static_cast<int>(counts.size()) == t.num_classes);
    const int expect = 2048 / t.num_classes;
    for (const auto& [label, count] : counts) {
      CHECK(count >= expect - 1);
      CHECK(count <= expect + 1);
    }
  }
}

TEST_CASE("unknown task ids are rejected") {
  CHECK_THROWS_AS(make_synthetic_task("no-such-task", 0), std::invalid_argument);
}

TEST_CASE("task shapes match their declared input states") {
  SyntheticTask im = make_synthetic_task("im-patterns", 0);
  CHECK(im.input_state.shape == std::vector<std::int64_t>{3, 16, 16});
  CHECK(im.num_classes == 4);
  CHECK(im.train.inputs.dims == std::vector<std::int64_t>{2048, 3, 16, 16});

  SyntheticTask col = make_synthetic_task("col-motifs", 0);
  CHECK(col.input_state.shape == std::vector<std::int64_t>{32, 8});
  CHECK(col.num_classes == 5);

  SyntheticTask waves = make_synthetic_task("1d-waves", 0);
  CHECK(waves.input_state.shape == std::vector<std::int64_t>{64, 1});
  CHECK(waves.num_classes == 3);
}
