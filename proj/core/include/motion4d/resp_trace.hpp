#pragma once

#include <vector>

namespace motion4d {

// Uniformly sampled breathing signal in arbitrary amplitude units.
struct RespTrace {
  std::vector<double> values;
  double dt = 1.0;  // seconds per sample

  // Throws ArgumentError for dt <= 0 and NumericalError for non-finite values.
  void validate() const;
  // Linear interpolation at time t (seconds), clamped to the first/last sample.
  double sample(double t) const;
  double duration() const { return values.empty() ? 0.0 : dt * static_cast<double>(values.size() - 1); }
};

}  // namespace motion4d
