#include "doctest.h"
#include "gradcheck.hpp"

using namespace protnet;

TEST_CASE("objective gradient matches central differences") {
  const auto r = testing::run_gradcheck(256, 11, 0.01);
  MESSAGE("checked " << r.checked << " max rel " << r.max_rel_error);
  CHECK(r.checked >= 200);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("gradient also matches with alpha = 0 and larger alpha") {
  CHECK(testing::run_gradcheck(120, 3, 0.0).max_rel_error < 1e-4);
  CHECK(testing::run_gradcheck(120, 5, 1.0).max_rel_error < 1e-4);
}

TEST_CASE("classifier parameter gradients match central differences") {
  testing::GradCheckOptions go;
  go.check_psi = true;
  CHECK(testing::run_gradcheck(200, 7, 0.01, go).max_rel_error < 1e-4);
}

TEST_CASE("gradient through a classifier feature layer") {
  testing::GradCheckOptions go;
  go.phi = {"classifier", 2};
  const auto r = testing::run_gradcheck(200, 9, 0.5, go);
  MESSAGE("max rel " << r.max_rel_error);
  CHECK(r.max_rel_error < 1e-4);
  go.phi = {"classifier", 1};
  CHECK(testing::run_gradcheck(100, 10, 0.5, go).max_rel_error < 1e-4);
}

TEST_CASE("gradient through a transform-net feature layer") {
  testing::GradCheckOptions go;
  go.phi = {"transform", 1};
  CHECK(testing::run_gradcheck(200, 13, 0.5, go).max_rel_error < 1e-4);
  go.phi = {"transform", 2};
  CHECK(testing::run_gradcheck(200, 14, 0.5, go).max_rel_error < 1e-4);
}
