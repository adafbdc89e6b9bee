#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "amr/error.hpp"

namespace amr {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Unit quaternion stored as (w, x, y, z), canonicalized to w >= 0.
class UnitQuaternion {
public:
    UnitQuaternion() = default;

    /// Normalizes and canonicalizes the given components.
    UnitQuaternion(double w, double x, double y, double z) : w_(w), x_(x), y_(y), z_(z) {
        const double n = std::sqrt(w * w + x * x + y * y + z * z);
        if (!(n > 0.0) || !std::isfinite(n)) {
            throw Error("quaternion must have finite non-zero norm");
        }
        w_ /= n;
        x_ /= n;
        y_ /= n;
        z_ /= n;
        if (w_ < 0.0) {
            w_ = -w_;
            x_ = -x_;
            y_ = -y_;
            z_ = -z_;
        }
    }

    static UnitQuaternion identity() { return {}; }

    static UnitQuaternion from_axis_angle(const Vec3& axis, double angle) {
        const Vec3 a = axis.normalized();
        const double s = std::sin(angle / 2.0);
        return {std::cos(angle / 2.0), a.x() * s, a.y() * s, a.z() * s};
    }

    static UnitQuaternion from_matrix(const Mat3& r) {
        const Eigen::Quaterniond q(r);
        return {q.w(), q.x(), q.y(), q.z()};
    }

    double w() const { return w_; }
    double x() const { return x_; }
    double y() const { return y_; }
    double z() const { return z_; }
    Vec3 vec() const { return {x_, y_, z_}; }

    double dot(const UnitQuaternion& o) const { return w_ * o.w_ + x_ * o.x_ + y_ * o.y_ + z_ * o.z_; }

    UnitQuaternion conjugate() const {
        UnitQuaternion q;
        q.w_ = w_;
        q.x_ = -x_;
        q.y_ = -y_;
        q.z_ = -z_;
        return q;
    }

    /// Hamilton product, re-normalized.
    UnitQuaternion operator*(const UnitQuaternion& o) const {
        return {w_ * o.w_ - x_ * o.x_ - y_ * o.y_ - z_ * o.z_,
                w_ * o.x_ + x_ * o.w_ + y_ * o.z_ - z_ * o.y_,
                w_ * o.y_ - x_ * o.z_ + y_ * o.w_ + z_ * o.x_,
                w_ * o.z_ + x_ * o.y_ - y_ * o.x_ + z_ * o.w_};
    }

    Mat3 matrix() const {
        Mat3 r;
        const double ww = w_ * w_, xx = x_ * x_, yy = y_ * y_, zz = z_ * z_;
        r << ww + xx - yy - zz, 2 * (x_ * y_ - w_ * z_), 2 * (x_ * z_ + w_ * y_),
            2 * (x_ * y_ + w_ * z_), ww - xx + yy - zz, 2 * (y_ * z_ - w_ * x_),
            2 * (x_ * z_ - w_ * y_), 2 * (y_ * z_ + w_ * x_), ww - xx - yy + zz;
        return r;
    }

    Vec3 rotate(const Vec3& p) const {
        // p + 2w (v x p) + 2 v x (v x p)
        const Vec3 v = vec();
        const Vec3 c = v.cross(p);
        return p + 2.0 * w_ * c + 2.0 * v.cross(c);
    }

    friend bool operator==(const UnitQuaternion&, const UnitQuaternion&) = default;

private:
    double w_ = 1.0;
    double x_ = 0.0;
    double y_ = 0.0;
    double z_ = 0.0;
};

/// Rigid motion p -> R p + t.
struct RigidTransform {
    UnitQuaternion rotation;
    Vec3 translation = Vec3::Zero();

    static RigidTransform identity() { return {}; }

    Vec3 apply(const Vec3& p) const { return rotation.rotate(p) + translation; }

    std::vector<Vec3> apply(std::span<const Vec3> points) const {
        std::vector<Vec3> out;
        out.reserve(points.size());
        for (const auto& p : points) out.push_back(apply(p));
        return out;
    }

    RigidTransform inverse() const {
        const UnitQuaternion inv = rotation.conjugate();
        return {inv, -inv.rotate(translation)};
    }

    Eigen::Matrix4d matrix() const {
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        m.topLeftCorner<3, 3>() = rotation.matrix();
        m.topRightCorner<3, 1>() = translation;
        return m;
    }

    bool operator==(const RigidTransform& o) const {
        return rotation == o.rotation && translation == o.translation;
    }
};

inline std::vector<Vec3> apply(const RigidTransform& x, std::span<const Vec3> points) { return x.apply(points); }

/// compose(a, b)(p) == a(b(p)).
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    return {a.rotation * b.rotation, a.rotation.rotate(b.translation) + a.translation};
}

inline RigidTransform inverse(const RigidTransform& x) { return x.inverse(); }

/// Shortest-arc spherical linear interpolation. Below 1e-7 rad of separation
/// it falls back to normalized linear interpolation.
inline UnitQuaternion slerp(const UnitQuaternion& q0, const UnitQuaternion& q1, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("slerp: alpha must lie in [0,1]");
    if (alpha == 0.0) return q0;
    if (alpha == 1.0) return q1;

    double d = q0.dot(q1);
    double sign = 1.0;
    if (d < 0.0) {
        d = -d;
        sign = -1.0;
    }
    // half-angle between the two orientations on the 3-sphere
    const UnitQuaternion rel = q0.conjugate() * q1;
    const double theta = std::atan2(rel.vec().norm(), std::abs(rel.w()));

    double a, b;
    if (theta < 1e-7) {
        a = 1.0 - alpha;
        b = alpha;
    } else {
        const double s = std::sin(theta);
        a = std::sin((1.0 - alpha) * theta) / s;
        b = std::sin(alpha * theta) / s;
    }
    b *= sign;
    return {a * q0.w() + b * q1.w(), a * q0.x() + b * q1.x(), a * q0.y() + b * q1.y(),
            a * q0.z() + b * q1.z()};
}

/// Geodesic angle between two rotations, in [0, pi].
inline double rotation_error(const UnitQuaternion& a, const UnitQuaternion& b) {
    // 4 * half the angle between the 4-vectors, taking the closer of b and -b
    const Eigen::Vector4d va(a.w(), a.x(), a.y(), a.z());
    Eigen::Vector4d vb(b.w(), b.x(), b.y(), b.z());
    if (va.dot(vb) < 0.0) vb = -vb;
    return 4.0 * std::atan2((va - vb).norm(), (va + vb).norm());
}

inline double translation_error(const Vec3& a, const Vec3& b) { return (a - b).norm(); }

/// Root-mean-square distance between est(p) and gt(p) over the sample.
inline double alignment_rmse(const RigidTransform& est, const RigidTransform& gt, std::span<const Vec3> eval_points) {
    if (eval_points.empty()) throw Error("no overlap sample");
    double sum = 0.0;
    for (const auto& p : eval_points) sum += (est.apply(p) - gt.apply(p)).squaredNorm();
    return std::sqrt(sum / static_cast<double>(eval_points.size()));
}

inline nlohmann::json to_json(const RigidTransform& x) {
    const auto& q = x.rotation;
    const auto& t = x.translation;
    return {{"q", {q.w(), q.x(), q.y(), q.z()}}, {"t", {t.x(), t.y(), t.z()}}};
}

inline RigidTransform transform_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("q") || !j.contains("t")) throw Error("transform JSON needs \"q\" and \"t\"");
    const auto& q = j.at("q");
    const auto& t = j.at("t");
    if (!q.is_array() || q.size() != 4 || !t.is_array() || t.size() != 3) {
        throw Error("transform JSON: q must have 4 entries and t 3");
    }
    return {UnitQuaternion(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(), q[3].get<double>()),
            Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>())};
}

}  // namespace amr
