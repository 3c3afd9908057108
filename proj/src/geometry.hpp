#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "common.hpp"

namespace ocf::geom {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

// Row-major 3x3 matrix.
struct Mat3 {
    std::array<double, 9> m = {1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return {}; }
    static Mat3 rot_z(double yaw);

    Vec3 apply(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 mul(const Mat3& o) const;
    Mat3 transposed() const;
    double det() const;
};

// Proper rigid motion: p -> R*p + t.
struct RigidTransform {
    Mat3 rotation;
    Vec3 translation;

    Vec3 apply(const Vec3& p) const { return rotation.apply(p) + translation; }
    void validate(double tol = 1e-9) const;
};

RigidTransform compose(const RigidTransform& a, const RigidTransform& b);  // a after b
RigidTransform invert(const RigidTransform& t);

// wraps into (-pi, pi]
double wrap_angle(double a);

// 7-DoF box: center, length/width/height, heading about +z.
struct Box7 {
    Vec3 center;
    Vec3 dims;  // l (along heading), w, h
    double yaw = 0.0;

    Box7() = default;
    Box7(const Vec3& c, const Vec3& d, double yaw_) : center(c), dims(d), yaw(wrap_angle(yaw_)) {}

    void validate() const;
    double volume() const { return dims.x * dims.y * dims.z; }
    double diagonal() const { return dims.norm(); }
};

enum class Frame { sensor, world, box_local };

struct PointCloud {
    std::vector<Vec3> points;
    Frame frame = Frame::world;

    size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
};

// Applies t to every point; the caller states the frame the result lives in.
PointCloud transform_points(const RigidTransform& t, const PointCloud& pc, Frame out_frame);

// World-to-box transform. Box frame: origin at center, +x along heading, +z up.
RigidTransform box_to_local(const Box7& b);
RigidTransform box_to_world(const Box7& b);

// Points whose box-local coordinates satisfy |x| <= l/2+margin (and y, z
// likewise, boundary inclusive). Input must be world-frame.
PointCloud points_in_box(const PointCloud& pc, const Box7& b, double margin = 0.0);

// Volumetric IoU of two yawed boxes. Footprint overlap comes from convex
// polygon clipping, the vertical part from z-interval overlap.
double box_iou_3d(const Box7& a, const Box7& b);

}  // namespace ocf::geom
