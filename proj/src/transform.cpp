#include "bevfuse/transform.hpp"

#include <algorithm>

namespace bevfuse {

RigidTransform RigidTransform::translation(double x, double y, double z) {
  RigidTransform tf;
  tf.t[0] = x;
  tf.t[1] = y;
  tf.t[2] = z;
  return tf;
}

RigidTransform RigidTransform::yaw_about_z(double yaw, double x, double y, double z) {
  RigidTransform tf = translation(x, y, z);
  const double c = std::cos(yaw), s = std::sin(yaw);
  tf.r[0] = c;
  tf.r[1] = -s;
  tf.r[3] = s;
  tf.r[4] = c;
  return tf;
}

void RigidTransform::apply(const double in[3], double out[3]) const {
  for (int i = 0; i < 3; ++i) out[i] = r[3 * i] * in[0] + r[3 * i + 1] * in[1] + r[3 * i + 2] * in[2] + t[i];
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) inv.r[3 * i + j] = r[3 * j + i];
  for (int i = 0; i < 3; ++i) inv.t[i] = -(inv.r[3 * i] * t[0] + inv.r[3 * i + 1] * t[1] + inv.r[3 * i + 2] * t[2]);
  return inv;
}

RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += a.r[3 * i + k] * b.r[3 * k + j];
      out.r[3 * i + j] = acc;
    }
    out.t[i] = a.r[3 * i] * b.t[0] + a.r[3 * i + 1] * b.t[1] + a.r[3 * i + 2] * b.t[2] + a.t[i];
  }
  return out;
}

double RigidTransform::max_orthonormality_error() const {
  double worst = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[3 * k + i] * r[3 * k + j];
      worst = std::max(worst, std::fabs(dot - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

}  // namespace bevfuse
