// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of every differentiable operation, grouped at
// three granularities: single primitives, the attention / dynamic-head /
// channel-weighting / loss modules, and the full two-stage tiny detector.
#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace sparsedet {

enum class GradScope { kPrimitives, kModules, kFull };

std::string_view grad_scope_name(GradScope scope);
// primitives | modules | full; throws InputError otherwise.
GradScope parse_grad_scope(std::string_view name);

inline constexpr double kPrimitiveTolerance = 1e-5;
inline constexpr double kModuleTolerance = 1e-5;
inline constexpr double kFullModelTolerance = 1e-4;

struct GradCheckEntry {
  std::string name;
  double error = 0.0;  // worst relative error over all checked inputs
  double tolerance = 0.0;
  bool pass() const { return error < tolerance; }
};

std::vector<GradCheckEntry> run_gradcheck_suite(GradScope scope);

void write_gradcheck_table(std::ostream& os,
                           const std::vector<GradCheckEntry>& entries);

}  // namespace sparsedet
