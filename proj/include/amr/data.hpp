#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "amr/cloud.hpp"

namespace amr {

inline constexpr double kPi = 3.14159265358979323846;

/// Parameters of one synthetic indoor scene and the pair of views carved from it.
struct SceneSpec {
    std::uint64_t seed = 0;
    double room_extent = 5.0;      // side of the square room, meters; height is half of it
    int planes = 5;                // floor, then walls, then ceiling (max 6)
    int boxes = 10;
    int cylinders = 5;
    int points_per_cloud = 20000;  // approximate raw points per view
    double target_overlap = 0.3;
    double noise_sigma = 0.005;
    double max_rotation = kPi / 4;  // yaw range of the gt transform, radians
    double max_tilt = 0.1;          // tilt of the gt rotation axis away from vertical, radians
    double max_translation = 1.0;   // meters
    double fov = 2.0 * kPi / 3.0;   // horizontal field of view of each view, radians
    double fine_voxel = 0.025;      // voxel used when measuring overlap
    double overlap_radius = 0.05;

    void validate() const {
        if (!(target_overlap >= 0.05 && target_overlap <= 1.0)) throw Error("scene: target overlap must lie in [0.05, 1]");
        if (room_extent <= 0 || points_per_cloud <= 0 || planes < 0 || planes > 6 || boxes < 0 || cylinders < 0)
            throw Error("scene: counts and extent must be positive");
        if (noise_sigma < 0 || max_rotation < 0 || max_tilt < 0 || max_translation < 0)
            throw Error("scene: magnitudes must be non-negative");
        if (!(fov > 0.0 && fov <= 2.0 * kPi)) throw Error("scene: fov must lie in (0, 2pi]");
    }
};

inline nlohmann::json to_json(const SceneSpec& s) {
    return {{"seed", s.seed},
            {"room_extent", s.room_extent},
            {"planes", s.planes},
            {"boxes", s.boxes},
            {"cylinders", s.cylinders},
            {"points_per_cloud", s.points_per_cloud},
            {"target_overlap", s.target_overlap},
            {"noise_sigma", s.noise_sigma},
            {"max_rotation", s.max_rotation},
            {"max_tilt", s.max_tilt},
            {"max_translation", s.max_translation},
            {"fov", s.fov},
            {"fine_voxel", s.fine_voxel},
            {"overlap_radius", s.overlap_radius}};
}

/// Applies the keys of `j` on top of `s`; unknown keys are rejected.
inline void apply_json(SceneSpec& s, const nlohmann::json& j) {
    if (!j.is_object()) throw Error("scene spec must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "seed") s.seed = v.get<std::uint64_t>();
        else if (key == "room_extent") s.room_extent = v.get<double>();
        else if (key == "planes") s.planes = v.get<int>();
        else if (key == "boxes") s.boxes = v.get<int>();
        else if (key == "cylinders") s.cylinders = v.get<int>();
        else if (key == "points_per_cloud") s.points_per_cloud = v.get<int>();
        else if (key == "target_overlap") s.target_overlap = v.get<double>();
        else if (key == "noise_sigma") s.noise_sigma = v.get<double>();
        else if (key == "max_rotation") s.max_rotation = v.get<double>();
        else if (key == "max_tilt") s.max_tilt = v.get<double>();
        else if (key == "max_translation") s.max_translation = v.get<double>();
        else if (key == "fov") s.fov = v.get<double>();
        else if (key == "fine_voxel") s.fine_voxel = v.get<double>();
        else if (key == "overlap_radius") s.overlap_radius = v.get<double>();
        else throw Error("scene spec: unknown key \"" + key + "\"");
    }
}

struct PairRecord {
    std::string source;
    std::string target;
    RigidTransform gt;  // maps source coordinates into the target frame
    std::optional<RigidTransform> prior;
    double overlap = 0.0;
};

inline nlohmann::json to_json(const PairRecord& r) {
    nlohmann::json j = {{"source", r.source}, {"target", r.target}, {"gt", to_json(r.gt)}, {"overlap", r.overlap}};
    if (r.prior) j["prior"] = to_json(*r.prior);
    return j;
}

inline PairRecord pair_record_from_json(const nlohmann::json& j) {
    PairRecord r;
    r.source = j.at("source").get<std::string>();
    r.target = j.at("target").get<std::string>();
    r.gt = transform_from_json(j.at("gt"));
    if (j.contains("prior") && !j.at("prior").is_null()) r.prior = transform_from_json(j.at("prior"));
    r.overlap = j.value("overlap", 0.0);
    if (r.overlap < 0.0 || r.overlap > 1.0) throw Error("manifest: overlap must lie in [0,1]");
    return r;
}

// ---------------------------------------------------------------------------
// ASCII PLY

inline std::string format_ply(const PointCloud& cloud) {
    std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.size()) +
                      "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    char buf[96];
    for (const auto& p : cloud.points) {
        std::snprintf(buf, sizeof buf, "%.10g %.10g %.10g\n", p.x(), p.y(), p.z());
        out += buf;
    }
    return out;
}

inline PointCloud parse_ply(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) -> IoError {
        return IoError("PLY line " + std::to_string(lineno) + ": " + why);
    };
    auto next = [&]() -> bool {
        if (!std::getline(in, line)) return false;
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
    };
    if (!next() || line != "ply") throw fail("missing 'ply' magic");
    std::optional<std::size_t> count;
    std::vector<std::string> props;
    bool in_vertex = false, seen_format = false;
    for (;;) {
        if (!next()) throw fail("unexpected end of header");
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key.empty() || key == "comment" || key == "obj_info") continue;
        if (key == "end_header") break;
        if (key == "format") {
            std::string fmt, ver;
            ls >> fmt >> ver;
            if (fmt != "ascii") throw fail("unsupported format '" + fmt + "' (only ascii)");
            seen_format = true;
        } else if (key == "element") {
            std::string name;
            long long n = -1;
            ls >> name >> n;
            if (n < 0) throw fail("bad element count");
            in_vertex = name == "vertex";
            if (in_vertex) count = static_cast<std::size_t>(n);
            else if (n != 0) throw fail("unsupported element '" + name + "'");
        } else if (key == "property") {
            std::string type, name;
            ls >> type >> name;
            if (type == "list") throw fail("list properties are not supported");
            if (in_vertex) props.push_back(name);
        } else {
            throw fail("unexpected header keyword '" + key + "'");
        }
    }
    if (!seen_format) throw fail("missing format line");
    if (!count) throw fail("missing vertex element");
    std::ptrdiff_t ix = -1, iy = -1, iz = -1;
    for (std::size_t i = 0; i < props.size(); ++i) {
        if (props[i] == "x") ix = static_cast<std::ptrdiff_t>(i);
        if (props[i] == "y") iy = static_cast<std::ptrdiff_t>(i);
        if (props[i] == "z") iz = static_cast<std::ptrdiff_t>(i);
    }
    if (ix < 0 || iy < 0 || iz < 0) throw fail("vertex element needs x, y, z properties");

    PointCloud cloud;
    cloud.points.reserve(*count);
    std::vector<double> vals(props.size());
    for (std::size_t v = 0; v < *count; ++v) {
        if (!next()) throw fail("expected " + std::to_string(*count) + " vertices");
        std::istringstream ls(line);
        for (auto& x : vals)
            if (!(ls >> x)) throw fail("malformed vertex row");
        const Vec3 p(vals[static_cast<std::size_t>(ix)], vals[static_cast<std::size_t>(iy)], vals[static_cast<std::size_t>(iz)]);
        if (!p.allFinite()) throw fail("non-finite coordinate");
        cloud.points.push_back(p);
    }
    return cloud;
}

inline void save_ply(const std::string& path, const PointCloud& cloud) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << format_ply(cloud);
    if (!out) throw IoError("cannot write " + path);
}

inline PointCloud load_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_ply(ss.str());
}

// ---------------------------------------------------------------------------
// Manifests

/// Reads a manifest; relative cloud paths are resolved against the manifest's directory.
inline std::vector<PairRecord> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest " + path + ": " + e.what());
    }
    if (!j.is_array()) throw IoError("manifest must be a JSON array");
    const auto dir = std::filesystem::path(path).parent_path();
    std::vector<PairRecord> out;
    for (const auto& item : j) {
        PairRecord r = pair_record_from_json(item);
        if (std::filesystem::path(r.source).is_relative()) r.source = (dir / r.source).string();
        if (std::filesystem::path(r.target).is_relative()) r.target = (dir / r.target).string();
        out.push_back(std::move(r));
    }
    return out;
}

inline void save_manifest(const std::string& path, const std::vector<PairRecord>& records) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : records) j.push_back(to_json(r));
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("cannot write " + path);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace detail {

struct Surface {
    Vec3 origin, u, v;  // parallelogram origin + a*u + b*v, a,b in [0,1]
    double area = 0.0;
    // cylinder side when radius > 0: axis origin, height along z
    double radius = 0.0;
    double height = 0.0;
    bool disk = false;
};

inline Surface rect(const Vec3& o, const Vec3& u, const Vec3& v) { return {o, u, v, u.cross(v).norm()}; }

inline std::vector<Surface> scene_surfaces(const SceneSpec& s, std::mt19937_64& rng) {
    std::vector<Surface> out;
    const double e = s.room_extent, h = s.room_extent / 2.0, m = e / 2.0;
    const std::vector<Surface> room = {
        rect({-m, -m, 0}, {e, 0, 0}, {0, e, 0}),   // floor
        rect({-m, -m, 0}, {e, 0, 0}, {0, 0, h}),   // wall y = -m
        rect({-m, m, 0}, {e, 0, 0}, {0, 0, h}),    // wall y = +m
        rect({-m, -m, 0}, {0, e, 0}, {0, 0, h}),   // wall x = -m
        rect({m, -m, 0}, {0, e, 0}, {0, 0, h}),    // wall x = +m
        rect({-m, -m, h}, {e, 0, 0}, {0, e, 0}),   // ceiling
    };
    for (int i = 0; i < s.planes; ++i) out.push_back(room[static_cast<std::size_t>(i)]);

    std::uniform_real_distribution<double> pos(-m * 0.8, m * 0.8), unit(0.0, 1.0);
    for (int b = 0; b < s.boxes; ++b) {
        const double sx = 0.3 + 0.9 * unit(rng), sy = 0.3 + 0.9 * unit(rng), sz = 0.3 + 1.2 * unit(rng);
        const double yaw = 2.0 * kPi * unit(rng);
        const Vec3 c(pos(rng), pos(rng), 0.0);
        const Vec3 ex(std::cos(yaw) * sx, std::sin(yaw) * sx, 0), ey(-std::sin(yaw) * sy, std::cos(yaw) * sy, 0),
            ez(0, 0, sz);
        const Vec3 o = c - ex / 2 - ey / 2;
        out.push_back(rect(o, ex, ez));
        out.push_back(rect(o + ey, ex, ez));
        out.push_back(rect(o, ey, ez));
        out.push_back(rect(o + ex, ey, ez));
        out.push_back(rect(o + ez, ex, ey));
    }
    for (int c = 0; c < s.cylinders; ++c) {
        Surface side;
        side.origin = Vec3(pos(rng), pos(rng), 0.0);
        side.radius = 0.1 + 0.3 * unit(rng);
        side.height = 0.5 + 1.5 * unit(rng);
        side.area = 2.0 * kPi * side.radius * side.height;
        out.push_back(side);
        Surface top = side;
        top.disk = true;
        top.area = kPi * side.radius * side.radius;
        out.push_back(top);
    }
    return out;
}

inline Vec3 sample_surface(const Surface& s, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (s.radius > 0.0) {
        const double a = 2.0 * kPi * unit(rng);
        if (s.disk) {
            const double r = s.radius * std::sqrt(unit(rng));
            return s.origin + Vec3(r * std::cos(a), r * std::sin(a), s.height);
        }
        return s.origin + Vec3(s.radius * std::cos(a), s.radius * std::sin(a), s.height * unit(rng));
    }
    const double a = unit(rng), b = unit(rng);
    return s.origin + a * s.u + b * s.v;
}

inline double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0) a += 2.0 * kPi;
    return a - kPi;
}

}  // namespace detail

/// Random gt-like rotation: yaw within +-max_rotation about an axis tilted at most max_tilt from z.
inline RigidTransform random_transform(double max_rotation, double max_tilt, double max_translation, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double yaw = max_rotation * (2.0 * unit(rng) - 1.0);
    const double tilt = max_tilt * unit(rng), tilt_dir = 2.0 * kPi * unit(rng);
    const Vec3 axis(std::sin(tilt) * std::cos(tilt_dir), std::sin(tilt) * std::sin(tilt_dir), std::cos(tilt));
    Vec3 dir(normal(rng), normal(rng), normal(rng));
    dir.normalize();
    const double len = max_translation * unit(rng);
    return {UnitQuaternion::from_axis_angle(axis, yaw), dir * len};
}

struct GeneratedPair {
    PointCloud source;
    PointCloud target;
    PairRecord record;
};

namespace detail {

struct CarvedViews {
    PointCloud source;
    PointCloud target;
    double overlap = 0.0;
};

}  // namespace detail

/// Samples a structured room scene, carves two views whose yaw offset is bisected until the
/// measured overlap is within 0.05 of the target, then moves the source by gt^-1 and adds noise.
inline GeneratedPair generate_pair(const SceneSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    const auto surfaces = detail::scene_surfaces(spec, rng);
    std::vector<double> areas;
    for (const auto& s : surfaces) areas.push_back(s.area);
    std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());

    const double coverage = std::min(1.0, spec.fov / (2.0 * kPi));
    const auto scene_n = static_cast<std::size_t>(std::ceil(spec.points_per_cloud / coverage));
    std::vector<Vec3> scene(scene_n);
    for (auto& p : scene) p = detail::sample_surface(surfaces[pick(rng)], rng);

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double m = spec.room_extent / 2.0;
    const Vec3 eye(m * 0.2 * (2 * unit(rng) - 1), m * 0.2 * (2 * unit(rng) - 1), spec.room_extent / 2.0 * 0.6);
    const double yaw_target = 2.0 * kPi * unit(rng);
    const double turn_sign = unit(rng) < 0.5 ? -1.0 : 1.0;
    const RigidTransform gt = random_transform(spec.max_rotation, spec.max_tilt, spec.max_translation, rng);

    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Vec3> noise_src(scene_n), noise_tgt(scene_n);
    for (std::size_t i = 0; i < scene_n; ++i) {
        noise_src[i] = Vec3(normal(rng), normal(rng), normal(rng)) * spec.noise_sigma;
        noise_tgt[i] = Vec3(normal(rng), normal(rng), normal(rng)) * spec.noise_sigma;
    }
    std::vector<double> azimuth(scene_n);
    for (std::size_t i = 0; i < scene_n; ++i) azimuth[i] = std::atan2(scene[i].y() - eye.y(), scene[i].x() - eye.x());

    const RigidTransform to_source = gt.inverse();
    auto carve = [&](double offset) {
        detail::CarvedViews v;
        const double yaw_source = yaw_target + turn_sign * offset;
        for (std::size_t i = 0; i < scene_n; ++i) {
            if (std::abs(detail::wrap_angle(azimuth[i] - yaw_target)) <= spec.fov / 2.0)
                v.target.points.push_back(scene[i] + noise_tgt[i]);
            if (std::abs(detail::wrap_angle(azimuth[i] - yaw_source)) <= spec.fov / 2.0)
                v.source.points.push_back(to_source.apply(scene[i]) + noise_src[i]);
        }
        if (v.source.empty() || v.target.empty()) return v;
        const auto hs = build_hierarchy(v.source, spec.fine_voxel, spec.fine_voxel * 8.0);
        const auto ht = build_hierarchy(v.target, spec.fine_voxel, spec.fine_voxel * 8.0);
        v.overlap = gt_overlap_sample(hs, ht, gt, spec.overlap_radius).ratio;
        return v;
    };

    auto accept = [&](const detail::CarvedViews& v) { return std::abs(v.overlap - spec.target_overlap) <= 0.05; };
    detail::CarvedViews best = carve(0.0);
    double lo = 0.0, hi = std::min(spec.fov, kPi);
    bool ok = accept(best);
    for (int step = 0; step < 50 && !ok; ++step) {
        const double mid = 0.5 * (lo + hi);
        best = carve(mid);
        if (accept(best)) {
            ok = true;
            break;
        }
        if (best.overlap > spec.target_overlap) lo = mid;
        else hi = mid;
    }
    if (!ok) throw Error("overlap target infeasible");

    GeneratedPair out;
    out.source = std::move(best.source);
    out.target = std::move(best.target);
    out.record.gt = gt;
    out.record.overlap = best.overlap;
    return out;
}

/// gt perturbed by a rotation of exactly rot_err about a random axis and a translation of norm trans_err.
inline RigidTransform synth_prior(const RigidTransform& gt, double rot_err, double trans_err, std::uint64_t seed) {
    if (rot_err < 0.0 || trans_err < 0.0) throw Error("synth_prior: magnitudes must be non-negative");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec3 axis, dir;
    do axis = Vec3(normal(rng), normal(rng), normal(rng));
    while (axis.norm() < 1e-9);
    do dir = Vec3(normal(rng), normal(rng), normal(rng));
    while (dir.norm() < 1e-9);
    const UnitQuaternion delta = UnitQuaternion::from_axis_angle(axis, rot_err);
    return {delta * gt.rotation, gt.translation + dir.normalized() * trans_err};
}

}  // namespace amr
