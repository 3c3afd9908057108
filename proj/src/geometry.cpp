#include "geometry.hpp"

#include <algorithm>

namespace ocf::geom {

Mat3 Mat3::rot_z(double yaw) {
    double c = std::cos(yaw), s = std::sin(yaw);
    Mat3 r;
    r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
    return r;
}

Mat3 Mat3::mul(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += m[i * 3 + k] * o.m[k * 3 + j];
            r.m[i * 3 + j] = s;
        }
    return r;
}

Mat3 Mat3::transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
    return r;
}

double Mat3::det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

void RigidTransform::validate(double tol) const {
    const Mat3& r = rotation;
    Mat3 rtr = r.transposed().mul(r);
    Mat3 eye = Mat3::identity();
    for (int i = 0; i < 9; ++i)
        require(std::abs(rtr.m[i] - eye.m[i]) <= tol, Errc::invalid_argument,
                "rotation is not orthonormal");
    require(std::abs(r.det() - 1.0) <= tol, Errc::invalid_argument,
            "rotation determinant is not +1");
    require(translation.finite(), Errc::invalid_argument, "translation is not finite");
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    return {a.rotation.mul(b.rotation), a.rotation.apply(b.translation) + a.translation};
}

RigidTransform invert(const RigidTransform& t) {
    Mat3 rt = t.rotation.transposed();
    return {rt, rt.apply(t.translation) * -1.0};
}

double wrap_angle(double a) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    a = std::fmod(a, two_pi);
    if (a <= -3.14159265358979323846) a += two_pi;
    if (a > 3.14159265358979323846) a -= two_pi;
    return a;
}

void Box7::validate() const {
    require(dims.x > 0 && dims.y > 0 && dims.z > 0, Errc::invalid_argument,
            "box dims must be strictly positive");
    require(center.finite() && std::isfinite(yaw), Errc::invalid_argument, "box is not finite");
}

PointCloud transform_points(const RigidTransform& t, const PointCloud& pc, Frame out_frame) {
    t.validate();
    PointCloud out;
    out.frame = out_frame;
    out.points.reserve(pc.points.size());
    for (const Vec3& p : pc.points) out.points.push_back(t.apply(p));
    return out;
}

RigidTransform box_to_local(const Box7& b) {
    b.validate();
    Mat3 rt = Mat3::rot_z(b.yaw).transposed();
    return {rt, rt.apply(b.center) * -1.0};
}

RigidTransform box_to_world(const Box7& b) {
    b.validate();
    return {Mat3::rot_z(b.yaw), b.center};
}

PointCloud points_in_box(const PointCloud& pc, const Box7& b, double margin) {
    require(pc.frame == Frame::world, Errc::invalid_argument,
            "points_in_box expects a world-frame cloud");
    RigidTransform to_local = box_to_local(b);
    Vec3 half = b.dims * 0.5 + Vec3(margin, margin, margin);
    PointCloud out;
    out.frame = Frame::world;
    for (const Vec3& p : pc.points) {
        Vec3 q = to_local.apply(p);
        if (std::abs(q.x) <= half.x && std::abs(q.y) <= half.y && std::abs(q.z) <= half.z)
            out.points.push_back(p);
    }
    return out;
}

namespace {

struct Vec2 {
    double x, y;
};

// BEV footprint corners, counter-clockwise.
std::vector<Vec2> box_corners_2d(const Box7& b) {
    double c = std::cos(b.yaw), s = std::sin(b.yaw);
    double hl = b.dims.x * 0.5, hw = b.dims.y * 0.5;
    std::vector<Vec2> out;
    const double sx[4] = {+1, -1, -1, +1};
    const double sy[4] = {+1, +1, -1, -1};
    for (int i = 0; i < 4; ++i) {
        double lx = sx[i] * hl, ly = sy[i] * hw;
        out.push_back({b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly});
    }
    return out;
}

double polygon_area(const std::vector<Vec2>& poly) {
    double a = 0;
    size_t n = poly.size();
    for (size_t i = 0; i < n; ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % n];
        a += p.x * q.y - q.x * p.y;
    }
    return std::abs(a) * 0.5;
}

// Sutherland-Hodgman: clip subject polygon against one directed edge (a->b)
// of a counter-clockwise convex clipper. Points with cross >= 0 are kept.
std::vector<Vec2> clip_edge(const std::vector<Vec2>& subject, const Vec2& a, const Vec2& b) {
    std::vector<Vec2> out;
    size_t n = subject.size();
    auto side = [&](const Vec2& p) {
        return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    };
    for (size_t i = 0; i < n; ++i) {
        const Vec2& cur = subject[i];
        const Vec2& prev = subject[(i + n - 1) % n];
        double sc = side(cur), sp = side(prev);
        bool in_c = sc >= 0, in_p = sp >= 0;
        if (in_c != in_p) {
            double t = sp / (sp - sc);
            out.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
        }
        if (in_c) out.push_back(cur);
    }
    return out;
}

double footprint_intersection_area(const Box7& a, const Box7& b) {
    std::vector<Vec2> poly = box_corners_2d(a);
    std::vector<Vec2> clipper = box_corners_2d(b);
    for (size_t i = 0; i < clipper.size() && !poly.empty(); ++i)
        poly = clip_edge(poly, clipper[i], clipper[(i + 1) % clipper.size()]);
    if (poly.size() < 3) return 0.0;
    return polygon_area(poly);
}

}  // namespace

namespace {

// Strict weak order so the clipping direction does not depend on argument
// order; keeps box_iou_3d exactly symmetric.
bool box_less(const Box7& a, const Box7& b) {
    const double ka[7] = {a.center.x, a.center.y, a.center.z, a.dims.x, a.dims.y, a.dims.z, a.yaw};
    const double kb[7] = {b.center.x, b.center.y, b.center.z, b.dims.x, b.dims.y, b.dims.z, b.yaw};
    for (int i = 0; i < 7; ++i) {
        if (ka[i] != kb[i]) return ka[i] < kb[i];
    }
    return false;
}

}  // namespace

double box_iou_3d(const Box7& a, const Box7& b) {
    a.validate();
    b.validate();
    require(a.volume() > 0 && b.volume() > 0, Errc::invalid_argument,
            "box_iou_3d: degenerate box");
    double area = box_less(b, a) ? footprint_intersection_area(b, a)
                                 : footprint_intersection_area(a, b);
    double z_lo = std::max(a.center.z - a.dims.z * 0.5, b.center.z - b.dims.z * 0.5);
    double z_hi = std::min(a.center.z + a.dims.z * 0.5, b.center.z + b.dims.z * 0.5);
    double inter = area * std::max(0.0, z_hi - z_lo);
    double uni = a.volume() + b.volume() - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace ocf::geom
