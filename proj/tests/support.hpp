#pragma once

#include <random>
#include <vector>

#include "amr/geometry.hpp"

namespace amr::test {

inline Vec3 random_vec(std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    return {u(rng), u(rng), u(rng)};
}

inline UnitQuaternion random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    return {n(rng), n(rng), n(rng), n(rng)};
}

inline RigidTransform random_transform(std::mt19937_64& rng, double trans = 2.0) {
    return {random_rotation(rng), random_vec(rng, trans)};
}

inline std::vector<Vec3> random_points(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
    std::vector<Vec3> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(random_vec(rng, scale));
    return out;
}

inline double max_dev(const RigidTransform& a, const RigidTransform& b) {
    return std::max((a.rotation.matrix() - b.rotation.matrix()).cwiseAbs().maxCoeff(),
                    (a.translation - b.translation).cwiseAbs().maxCoeff());
}

}  // namespace amr::test
