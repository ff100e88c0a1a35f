// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sstream>

#include "sparsedet/errors.hpp"
#include "sparsedet/gradcheck_suite.hpp"

using namespace sparsedet;

namespace {

void check_scope(GradScope scope, double tolerance) {
  const auto entries = run_gradcheck_suite(scope);
  CHECK_FALSE(entries.empty());
  for (const auto& e : entries) {
    INFO(e.name << ": " << e.error);
    CHECK(e.tolerance == tolerance);
    CHECK(e.error < tolerance);
  }
}

}  // namespace

TEST_CASE("primitives") { check_scope(GradScope::kPrimitives, 1e-5); }

TEST_CASE("modules") { check_scope(GradScope::kModules, 1e-5); }

TEST_CASE("full tiny detector") { check_scope(GradScope::kFull, 1e-4); }

TEST_CASE("scope names") {
  for (GradScope s : {GradScope::kPrimitives, GradScope::kModules, GradScope::kFull}) {
    CHECK(parse_grad_scope(grad_scope_name(s)) == s);
  }
  CHECK_THROWS_AS(parse_grad_scope("everything"), InputError);
}

TEST_CASE("table lists every entry") {
  const std::vector<GradCheckEntry> entries{{"add", 1e-9, 1e-5}, {"bad", 1e-3, 1e-5}};
  std::ostringstream os;
  write_gradcheck_table(os, entries);
  CHECK(os.str().find("add") != std::string::npos);
  CHECK(os.str().find("bad") != std::string::npos);
}
