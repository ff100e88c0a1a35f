// SPDX-License-Identifier: Apache-2.0
//
// The per-module invariant suite behind `sparsedet selftest`: every worked
// example and property of each module, checked against hand values or
// independent naive oracles.
#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "sparsedet/geometry.hpp"

namespace sparsedet {

struct SelftestOptions {
  // The giou used by the geometry checks; tests substitute a broken one to
  // confirm the suite notices.
  std::function<double(const Box&, const Box&)> giou = sparsedet::giou;
};

struct CheckResult {
  std::string module;
  std::string property;
  bool pass = false;
  std::string detail;  // failure description, empty on success
};

std::vector<CheckResult> run_selftest(const SelftestOptions& options = {});

// One row per module (passed/total), followed by every failing property.
void write_selftest_table(std::ostream& os, const std::vector<CheckResult>& results);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace sparsedet
