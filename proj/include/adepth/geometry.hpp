// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>

#include "adepth/tensor.hpp"

namespace adepth::geom {

// Depth below this is clamped before the projective division.
inline constexpr double kMinProjectionZ = 1e-3;

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  void validate() const;
  std::string to_json() const;
  static CameraIntrinsics from_json(const std::string& text);
};

using Vec3 = std::array<double, 3>;

Vec3 operator+(const Vec3& a, const Vec3& b);
Vec3 operator-(const Vec3& a, const Vec3& b);
Vec3 operator*(double s, const Vec3& v);
double dot(const Vec3& a, const Vec3& b);
Vec3 cross(const Vec3& a, const Vec3& b);
double norm(const Vec3& v);

// Rigid transform p' = R p + t.
struct Pose {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  Vec3 translation{0, 0, 0};

  static Pose identity() { return {}; }
  Vec3 apply(const Vec3& p) const;
  double rotation_residual() const;  // max |R^T R - I| entry
  bool valid(double tol = 1e-6) const;
};

// Axis-angle + translation, the pose-network output parameterization.
struct PoseVector {
  Vec3 axis_angle{0, 0, 0};
  Vec3 translation{0, 0, 0};
};

Pose compose(const Pose& a, const Pose& b);  // (a*b).apply(p) == a.apply(b.apply(p))
Pose invert_pose(const Pose& t);

// Rodrigues' formula with a first-order branch below ||w|| = 1e-7.
std::array<double, 9> rodrigues(const Vec3& axis_angle);
// d(vec R)/d(w_i), three row-major 3x3 matrices (Gallego-Yezzi closed form).
std::array<std::array<double, 9>, 3> rodrigues_jacobian(const Vec3& axis_angle);

Pose pose_vec_to_pose(const PoseVector& v);
PoseVector pose_to_vec(const Pose& p);

// Homogeneous pixel coordinates, entry (.,v,u) = (u, v, 1); shape (3,H,W).
Tensor pixel_grid(int width, int height);

// point(u,v) = depth(u,v) * K^{-1} (u,v,1)^T; depth is (1,H,W), result (3,H,W).
Tensor backproject(const Tensor& depth, const CameraIntrinsics& k);

Tensor transform_points(const Pose& t, const Tensor& pts);

// Pinhole projection to sampling coordinates normalized so that pixel 0 maps
// to -1 and W-1 (resp. H-1) maps to +1; Z is clamped at kMinProjectionZ.
// Result shape (2,H,W), channel 0 = x, channel 1 = y.
Tensor project(const Tensor& pts, const CameraIntrinsics& k);

}  // namespace adepth::geom
