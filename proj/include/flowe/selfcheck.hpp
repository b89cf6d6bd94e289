#pragma once

// Built-in verification suite behind `flowe check`: finite-difference
// gradients, correspondence algebra, loss bounds and EMA arithmetic.

#include <iosfwd>
#include <string>
#include <vector>

namespace flowe::check {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured error or quantity
  double tolerance = 0.0;  // bound it was held to
  std::string detail;
};

struct SuiteReport {
  std::vector<CheckResult> results;

  bool passed() const;
  void append(const SuiteReport& other);
  void print(std::ostream& os) const;
};

inline constexpr double kGradTolerance = 1e-5;
inline constexpr double kGeometryTolerance = 1e-9;
inline constexpr double kEmaTolerance = 1e-12;

/// Every layer type through the probe loss, then the full training loss
/// (normalization, upsample adjoint, masked distance) on a 3x16x16 toy pair.
SuiteReport gradient_suite();
/// Bilinear exactness on linear fields, affine round trips, composed
/// correspondence identities, linear-field warp inverse, .flo round trip.
SuiteReport warp_suite();
/// Loss range over random inputs, masked locality, antipodal value, and the
/// empty-mask step skip.
SuiteReport loss_suite();
/// Constant-tau contraction and the tau = 0 / tau = 1 edge cases.
SuiteReport ema_suite();

SuiteReport run_all();

}  // namespace flowe::check
