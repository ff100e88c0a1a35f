// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <chrono>
#include <set>
#include <sstream>

#include "sparsedet/geometry.hpp"
#include "sparsedet/selftest.hpp"

using namespace sparsedet;

TEST_CASE("the self-test suite passes on a correct build") {
  const auto start = std::chrono::steady_clock::now();
  const auto results = run_selftest();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (const auto& r : results) {
    INFO(r.module << ": " << r.property << ": " << r.detail);
    CHECK(r.pass);
  }
  CHECK(all_passed(results));
  CHECK(seconds < 60.0);
  std::set<std::string> modules;
  for (const auto& r : results) modules.insert(r.module);
  CHECK(modules == std::set<std::string>{"tensor_autodiff", "geometry", "attention", "roi_align", "dynamic_head",
                                         "matcher_losses", "pipeline", "synth_data", "harness_cli"});
  std::ostringstream table;
  write_selftest_table(table, results);
  CHECK(table.str().find("FAIL") == std::string::npos);
}

TEST_CASE("a sign error in giou is caught and named") {
  SelftestOptions broken;
  broken.giou = [](const Box& a, const Box& b) { return -giou(a, b); };
  const auto results = run_selftest(broken);
  CHECK_FALSE(all_passed(results));
  std::size_t failures = 0;
  for (const auto& r : results) {
    if (r.pass) continue;
    ++failures;
    CHECK(r.module == "geometry");
    CHECK(r.property.find("giou") != std::string::npos);
  }
  CHECK(failures > 0);
  std::ostringstream table;
  write_selftest_table(table, results);
  CHECK(table.str().find("FAIL geometry") != std::string::npos);
}
