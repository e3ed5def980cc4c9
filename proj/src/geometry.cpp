// SPDX-License-Identifier: Apache-2.0

#include "adepth/geometry.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace adepth::geom {

using json = nlohmann::json;

void CameraIntrinsics::validate() const {
  if (fx <= 0 || fy <= 0) throw ConfigError("intrinsics: focal lengths must be positive");
  if (width < 2 || height < 2) throw ConfigError("intrinsics: image extents must be >= 2");
  if (cx <= 0 || cx >= width || cy <= 0 || cy >= height) {
    throw ConfigError("intrinsics: principal point must lie inside the image");
  }
}

std::string CameraIntrinsics::to_json() const {
  json j;
  j["fx"] = fx;
  j["fy"] = fy;
  j["cx"] = cx;
  j["cy"] = cy;
  j["width"] = width;
  j["height"] = height;
  return j.dump(2);
}

CameraIntrinsics CameraIntrinsics::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("intrinsics json: ") + e.what());
  }
  CameraIntrinsics k;
  try {
    k.fx = j.at("fx").get<double>();
    k.fy = j.at("fy").get<double>();
    k.cx = j.at("cx").get<double>();
    k.cy = j.at("cy").get<double>();
    k.width = j.at("width").get<int>();
    k.height = j.at("height").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("intrinsics json: ") + e.what());
  }
  k.validate();
  return k;
}

Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 operator*(double s, const Vec3& v) { return {s * v[0], s * v[1], s * v[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

Vec3 Pose::apply(const Vec3& p) const {
  const auto& r = rotation;
  return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + translation[0],
          r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + translation[1],
          r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + translation[2]};
}

double Pose::rotation_residual() const {
  const auto& r = rotation;
  double worst = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += r[k * 3 + i] * r[k * 3 + j];
      worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

bool Pose::valid(double tol) const {
  if (rotation_residual() > tol) return false;
  const auto& r = rotation;
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  return std::abs(det - 1.0) <= tol;
}

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a.rotation[i * 3 + k] * b.rotation[k * 3 + j];
      out.rotation[i * 3 + j] = s;
    }
  }
  out.translation = a.apply(b.translation);
  return out;
}

Pose invert_pose(const Pose& t) {
  Pose out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out.rotation[i * 3 + j] = t.rotation[j * 3 + i];
  }
  const Vec3 nt = {-t.translation[0], -t.translation[1], -t.translation[2]};
  out.translation = {out.rotation[0] * nt[0] + out.rotation[1] * nt[1] + out.rotation[2] * nt[2],
                     out.rotation[3] * nt[0] + out.rotation[4] * nt[1] + out.rotation[5] * nt[2],
                     out.rotation[6] * nt[0] + out.rotation[7] * nt[1] + out.rotation[8] * nt[2]};
  return out;
}

namespace {
std::array<double, 9> skew(const Vec3& v) {
  return {0, -v[2], v[1], v[2], 0, -v[0], -v[1], v[0], 0};
}
}  // namespace

std::array<double, 9> rodrigues(const Vec3& w) {
  const double theta = norm(w);
  std::array<double, 9> r{1, 0, 0, 0, 1, 0, 0, 0, 1};
  const auto k = skew(w);
  if (theta < 1e-7) {
    for (int i = 0; i < 9; ++i) r[i] += k[i];
    return r;
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  // K^2
  std::array<double, 9> k2{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int m = 0; m < 3; ++m) s += k[i * 3 + m] * k[m * 3 + j];
      k2[i * 3 + j] = s;
    }
  }
  for (int i = 0; i < 9; ++i) r[i] += a * k[i] + b * k2[i];
  return r;
}

std::array<std::array<double, 9>, 3> rodrigues_jacobian(const Vec3& w) {
  std::array<std::array<double, 9>, 3> jac{};
  const double theta2 = dot(w, w);
  if (theta2 < 1e-14) {
    // dR/dw_i -> [e_i]x at the identity
    for (int i = 0; i < 3; ++i) {
      Vec3 e{0, 0, 0};
      e[static_cast<size_t>(i)] = 1.0;
      jac[static_cast<size_t>(i)] = skew(e);
    }
    return jac;
  }
  const auto r = rodrigues(w);
  for (int i = 0; i < 3; ++i) {
    Vec3 e{0, 0, 0};
    e[static_cast<size_t>(i)] = 1.0;
    // (I - R) e_i
    const Vec3 ime = {e[0] - r[0] * e[0] - r[1] * e[1] - r[2] * e[2],
                      e[1] - r[3] * e[0] - r[4] * e[1] - r[5] * e[2],
                      e[2] - r[6] * e[0] - r[7] * e[1] - r[8] * e[2]};
    const Vec3 v = cross(w, ime);
    auto m = skew(v);
    const auto kw = skew(w);
    for (int t = 0; t < 9; ++t) m[t] = (w[static_cast<size_t>(i)] * kw[t] + m[t]) / theta2;
    // jac_i = m * R
    std::array<double, 9> out{};
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) s += m[a * 3 + c] * r[c * 3 + b];
        out[a * 3 + b] = s;
      }
    }
    jac[static_cast<size_t>(i)] = out;
  }
  return jac;
}

Pose pose_vec_to_pose(const PoseVector& v) {
  Pose p;
  p.rotation = rodrigues(v.axis_angle);
  p.translation = v.translation;
  return p;
}

PoseVector pose_to_vec(const Pose& p) {
  PoseVector v;
  v.translation = p.translation;
  const auto& r = p.rotation;
  const double tr = r[0] + r[4] + r[8];
  const double c = std::max(-1.0, std::min(1.0, (tr - 1.0) / 2.0));
  const double theta = std::acos(c);
  if (theta < 1e-7) {
    v.axis_angle = {0.5 * (r[7] - r[5]), 0.5 * (r[2] - r[6]), 0.5 * (r[3] - r[1])};
  } else {
    const double s = theta / (2.0 * std::sin(theta));
    v.axis_angle = {s * (r[7] - r[5]), s * (r[2] - r[6]), s * (r[3] - r[1])};
  }
  return v;
}

Tensor pixel_grid(int width, int height) {
  if (width < 2 || height < 2) throw ShapeError("pixel_grid: extents must be >= 2");
  Tensor g({3, height, width});
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      g.at(0, y, x) = static_cast<double>(x);
      g.at(1, y, x) = static_cast<double>(y);
      g.at(2, y, x) = 1.0;
    }
  }
  return g;
}

Tensor backproject(const Tensor& depth, const CameraIntrinsics& k) {
  if (depth.ndim() != 3 || depth.dim(0) != 1) {
    throw ShapeError("backproject: depth must be (1,H,W), got " + shape_str(depth.shape()));
  }
  const int h = depth.dim(1), w = depth.dim(2);
  Tensor pts({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double d = depth.at(0, y, x);
      if (d <= 0) throw Error("backproject: non-positive depth");
      pts.at(0, y, x) = d * (x - k.cx) / k.fx;
      pts.at(1, y, x) = d * (y - k.cy) / k.fy;
      pts.at(2, y, x) = d;
    }
  }
  return pts;
}

Tensor transform_points(const Pose& t, const Tensor& pts) {
  if (pts.ndim() != 3 || pts.dim(0) != 3) {
    throw ShapeError("transform_points: points must be (3,H,W)");
  }
  const int h = pts.dim(1), w = pts.dim(2);
  Tensor out({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec3 p = {pts.at(0, y, x), pts.at(1, y, x), pts.at(2, y, x)};
      const Vec3 q = t.apply(p);
      out.at(0, y, x) = q[0];
      out.at(1, y, x) = q[1];
      out.at(2, y, x) = q[2];
    }
  }
  return out;
}

Tensor project(const Tensor& pts, const CameraIntrinsics& k) {
  if (pts.ndim() != 3 || pts.dim(0) != 3) throw ShapeError("project: points must be (3,H,W)");
  const int h = pts.dim(1), w = pts.dim(2);
  Tensor grid({2, h, w});
  const double sx = 2.0 / (k.width - 1), sy = 2.0 / (k.height - 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double z = std::max(pts.at(2, y, x), kMinProjectionZ);
      const double u = k.fx * pts.at(0, y, x) / z + k.cx;
      const double v = k.fy * pts.at(1, y, x) / z + k.cy;
      grid.at(0, y, x) = sx * u - 1.0;
      grid.at(1, y, x) = sy * v - 1.0;
    }
  }
  return grid;
}

}  // namespace adepth::geom
