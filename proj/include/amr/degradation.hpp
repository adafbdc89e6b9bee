#pragma once

#include <cstdint>
#include <random>

#include <json.hpp>

#include "amr/geometry.hpp"

namespace amr {

/// Accuracy levels tau in [1, T] split linearly into K groups, one per step model.
struct DegradationSchedule {
    int T = 1000;
    int K = 5;

    void validate() const {
        if (K < 1) throw Error("schedule: K must be >= 1");
        if (T < K) throw Error("schedule: T must be >= K");
    }

    /// Inclusive tau range routed to `group`.
    std::pair<int, int> group_range(int group) const {
        if (group < 1 || group > K) throw Error("schedule: group out of range");
        const auto t = static_cast<std::int64_t>(T);
        return {static_cast<int>((group - 1) * t / K) + 1, static_cast<int>(group * t / K)};
    }
};

inline nlohmann::json to_json(const DegradationSchedule& s) { return {{"T", s.T}, {"K", s.K}}; }

inline DegradationSchedule schedule_from_json(const nlohmann::json& j) {
    DegradationSchedule s;
    for (const auto& [key, value] : j.items()) {
        if (key == "T") s.T = value.get<int>();
        else if (key == "K") s.K = value.get<int>();
        else throw Error("schedule: unknown key \"" + key + "\"");
    }
    s.validate();
    return s;
}

struct PriorSample {
    RigidTransform transform;
    int tau = 0;
    int group = 0;
};

/// Moves `prior` toward `gt` by tau/T: slerp for rotation, linear for translation.
inline RigidTransform degrade(const RigidTransform& prior, const RigidTransform& gt, int tau, int T) {
    if (T < 1) throw Error("degrade: T must be positive");
    if (tau < 0 || tau > T) throw Error("degrade: tau out of range");
    if (tau == 0) return prior;
    if (tau == T) return gt;
    const double alpha = static_cast<double>(tau) / static_cast<double>(T);
    // gt + (1 - alpha)(prior - gt) keeps the distance to gt monotone under rounding
    const Vec3 t = gt.translation + (1.0 - alpha) * (prior.translation - gt.translation);
    return {slerp(prior.rotation, gt.rotation, alpha), t};
}

/// k = ceil(tau / T * K), computed in integers.
inline int group_index(int tau, int T, int K) {
    if (K < 1 || T < K) throw Error("group_index: invalid schedule");
    if (tau < 1 || tau > T) throw Error("group_index: tau must lie in [1, T]");
    const auto num = static_cast<std::int64_t>(tau) * K;
    return static_cast<int>((num + T - 1) / T);
}

/// Uniform tau among the levels routed to `group`; deterministic in the seed.
inline int sample_tau(std::uint64_t seed, int group, const DegradationSchedule& schedule) {
    const auto [lo, hi] = schedule.group_range(group);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> dist(lo, hi);
    return dist(rng);
}

inline PriorSample make_prior_sample(const RigidTransform& prior, const RigidTransform& gt, int tau,
                                     const DegradationSchedule& schedule) {
    return {degrade(prior, gt, tau, schedule.T), tau, group_index(tau, schedule.T, schedule.K)};
}

}  // namespace amr
