#pragma once

#include <abq/error.hpp>

#include <cmath>
#include <cstdint>
#include <limits>

namespace abq {

enum class ScheduleKind : std::uint8_t { cubic = 0, exponential = 1 };

/// Blending coefficient as a function of the training step.
///
/// cubic:        0 for step <= t0, 1 - ((t1 - step)/(t1 - t0))^3 on (t0, t1], 1 after t1
/// exponential:  1 - exp(-lambda * step)
///
/// `never()` builds a schedule pinned at 0 (pure full-precision training).
struct AlphaSchedule {
  ScheduleKind kind = ScheduleKind::cubic;
  double t0 = 0.0;
  double t1 = 1.0;
  double lambda = 0.0;

  static AlphaSchedule cubic(double t0, double t1) {
    if (!(t0 < t1)) throw ConfigError("alpha schedule needs T0 < T1");
    if (t0 < 0.0) throw ConfigError("alpha schedule needs T0 >= 0");
    return AlphaSchedule{ScheduleKind::cubic, t0, t1, 0.0};
  }

  static AlphaSchedule exponential(double lambda) {
    if (!(lambda > 0.0)) throw ConfigError("exponential schedule needs lambda > 0");
    return AlphaSchedule{ScheduleKind::exponential, 0.0, 0.0, lambda};
  }

  static AlphaSchedule never() {
    const double inf = std::numeric_limits<double>::infinity();
    return AlphaSchedule{ScheduleKind::cubic, inf, inf, 0.0};
  }

  double at(double step) const {
    if (step < 0.0) throw ConfigError("alpha schedule evaluated at a negative step");
    if (kind == ScheduleKind::exponential) return 1.0 - std::exp(-lambda * step);
    if (step <= t0) return 0.0;
    if (step > t1) return 1.0;
    const double r = (t1 - step) / (t1 - t0);
    return 1.0 - r * r * r;
  }
};

/// Free-function form of AlphaSchedule::at.
inline double alpha_at(const AlphaSchedule& schedule, double step) { return schedule.at(step); }

}  // namespace abq
