#pragma once

#include <cmath>

namespace bevfuse {

// Rigid transform: row-major 3x3 rotation plus translation, meters.
struct RigidTransform {
  double r[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  double t[3] = {0, 0, 0};

  static RigidTransform identity() { return {}; }
  static RigidTransform translation(double x, double y, double z);
  static RigidTransform yaw_about_z(double yaw, double x = 0, double y = 0, double z = 0);

  void apply(const double in[3], double out[3]) const;
  RigidTransform inverse() const;
  // Composition: (a * b).apply(p) == a.apply(b.apply(p)).
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b);

  double max_orthonormality_error() const;
  bool is_rigid(double tol = 1e-9) const { return max_orthonormality_error() <= tol; }
};

// Normalize to (-pi, pi].
inline double wrap_angle(double a) {
  double r = std::fmod(a + M_PI, 2.0 * M_PI);
  if (r <= 0) r += 2.0 * M_PI;
  return r - M_PI;
}

}  // namespace bevfuse
