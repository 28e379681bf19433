#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "porl/rng.hpp"

namespace porl {

// Per-step transition probabilities of one two-state up/down chain.
struct ChainParams {
    double p_fail = 0.0;
    double p_recover = 1.0;

    void validate() const {
        if (p_fail < 0.0 || p_fail > 1.0 || p_recover < 0.0 || p_recover > 1.0)
            throw std::invalid_argument("ChainParams: probabilities must lie in [0, 1]");
    }
    bool frozen() const { return p_fail + p_recover <= 0.0; }
    double gap() const { return p_fail + p_recover; }
};

// Assignment of each sensor to exactly one group.
struct SensorLayout {
    std::vector<int> group_of;  // sensor index -> group index
    int n_groups = 0;

    int n_sensors() const { return static_cast<int>(group_of.size()); }

    static SensorLayout contiguous(const std::vector<int>& group_sizes) {
        SensorLayout l;
        l.n_groups = static_cast<int>(group_sizes.size());
        for (int g = 0; g < l.n_groups; ++g)
            for (int i = 0; i < group_sizes[g]; ++i) l.group_of.push_back(g);
        return l;
    }

    void validate() const {
        if (n_groups <= 0) throw std::invalid_argument("SensorLayout: no groups");
        std::vector<int> count(n_groups, 0);
        for (int g : group_of) {
            if (g < 0 || g >= n_groups)
                throw std::invalid_argument("SensorLayout: sensor assigned to unknown group");
            ++count[g];
        }
        for (int c : count)
            if (c == 0) throw std::invalid_argument("SensorLayout: empty group");
    }
};

// Joint state of the per-sensor chains z, the per-group chains y, and the
// effective mask x_i = z_i * y_{group(i)}.
struct MaskProcessState {
    std::vector<std::uint8_t> z;
    std::vector<std::uint8_t> y;
    std::vector<std::uint8_t> x;

    void recompute_effective(const SensorLayout& layout) {
        x.resize(z.size());
        for (std::size_t i = 0; i < z.size(); ++i)
            x[i] = static_cast<std::uint8_t>(z[i] & y[layout.group_of[i]]);
    }
};

// Stationary probability of the up state, p_recover / (p_fail + p_recover).
inline double steady_state(const ChainParams& params) {
    params.validate();
    if (params.frozen())
        throw std::invalid_argument("steady_state: chain frozen (p_fail + p_recover = 0), "
                                    "steady state undefined");
    return params.p_recover / (params.p_fail + params.p_recover);
}

struct EffectiveRates {
    double p_fail_eff;
    double p_recover_eff;
};

// Composition of a sensor chain with its group chain: the effective
// failure rate is exact; the effective recovery rate is the product
// approximation, returned as stated.
inline EffectiveRates effective_rates(const ChainParams& sensor, const ChainParams& group) {
    sensor.validate();
    group.validate();
    return {1.0 - (1.0 - sensor.p_fail) * (1.0 - group.p_fail),
            sensor.p_recover * group.p_recover};
}

// pi_x = pi_z * pi_y
inline double stationary_up_rate(const ChainParams& sensor, const ChainParams& group) {
    return steady_state(sensor) * steady_state(group);
}

// Conservative mixing-time bound from the two layers' spectral gaps
// g = p_fail + p_recover: tau <= ln(4) / min(g_sensor, g_group).
inline double mixing_time_bound(const ChainParams& sensor, const ChainParams& group) {
    sensor.validate();
    group.validate();
    const double g = std::min(sensor.gap(), group.gap());
    if (g <= 0.0)
        throw std::invalid_argument("mixing_time_bound: frozen chain gives an infinite bound");
    return std::log(4.0) / g;
}

// Diagnostic mixing time of the joint mask process, exact up to a union
// bound: a two-state chain started anywhere is within
// max(pi, 1-pi) * |1 - gap|^t of its stationary law in total variation,
// and the joint TV is at most the sum over the independent chains.
// Returns the smallest t whose bound drops to `tol`.
inline int joint_mixing_time_diagnostic(const SensorLayout& layout, const ChainParams& sensor,
                                        const ChainParams& group, double tol = 0.125) {
    const double pz = steady_state(sensor), py = steady_state(group);
    const double lz = std::abs(1.0 - sensor.gap()), ly = std::abs(1.0 - group.gap());
    const double az = std::max(pz, 1.0 - pz), ay = std::max(py, 1.0 - py);
    const double d = layout.n_sensors(), g = layout.n_groups;
    for (int t = 0; t < 10000000; ++t) {
        const double tv = d * az * std::pow(lz, t) + g * ay * std::pow(ly, t);
        if (tv <= tol) return t;
    }
    throw std::invalid_argument("joint_mixing_time_diagnostic: chain does not mix");
}

// Advances every chain one step. Consumes exactly d + g uniform draws:
// sensors in ascending index order first, then groups in ascending order.
inline void step_mask_process(MaskProcessState& state, const SensorLayout& layout,
                              const ChainParams& sensor, const ChainParams& group, Rng& rng) {
    for (auto& zi : state.z) {
        const double u = rng.uniform01();
        if (zi)
            zi = static_cast<std::uint8_t>(u < sensor.p_fail ? 0 : 1);
        else
            zi = static_cast<std::uint8_t>(u < sensor.p_recover ? 1 : 0);
    }
    for (auto& yj : state.y) {
        const double u = rng.uniform01();
        if (yj)
            yj = static_cast<std::uint8_t>(u < group.p_fail ? 0 : 1);
        else
            yj = static_cast<std::uint8_t>(u < group.p_recover ? 1 : 0);
    }
    state.recompute_effective(layout);
}

// Draws (z, y) from the stationary marginals, independently per chain.
// Consumes d + g uniform draws in the same fixed order as stepping.
inline MaskProcessState stationary_init(const SensorLayout& layout, const ChainParams& sensor,
                                        const ChainParams& group, Rng& rng) {
    const double pz = steady_state(sensor), py = steady_state(group);
    MaskProcessState s;
    s.z.resize(layout.n_sensors());
    s.y.resize(layout.n_groups);
    for (auto& zi : s.z) zi = static_cast<std::uint8_t>(rng.uniform01() < pz ? 1 : 0);
    for (auto& yj : s.y) yj = static_cast<std::uint8_t>(rng.uniform01() < py ? 1 : 0);
    s.recompute_effective(layout);
    return s;
}

// T x d matrix of effective masks; row t is x(t). The initial state is
// stationary and row 0 is emitted before any step.
inline std::vector<std::vector<std::uint8_t>> simulate_trace(const SensorLayout& layout,
                                                             const ChainParams& sensor,
                                                             const ChainParams& group,
                                                             std::size_t n_steps,
                                                             std::uint64_t seed) {
    if (n_steps < 1) throw std::invalid_argument("simulate_trace: need at least one step");
    layout.validate();
    Rng rng(seed);
    MaskProcessState s = stationary_init(layout, sensor, group, rng);
    std::vector<std::vector<std::uint8_t>> trace;
    trace.reserve(n_steps);
    trace.push_back(s.x);
    for (std::size_t t = 1; t < n_steps; ++t) {
        step_mask_process(s, layout, sensor, group, rng);
        trace.push_back(s.x);
    }
    return trace;
}

inline void write_trace_csv(const std::string& path,
                            const std::vector<std::vector<std::uint8_t>>& trace) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_trace_csv: cannot open " + path);
    if (trace.empty()) return;
    os << "t";
    for (std::size_t i = 0; i < trace[0].size(); ++i) os << ",x_" << i;
    os << "\n";
    for (std::size_t t = 0; t < trace.size(); ++t) {
        os << t;
        for (auto b : trace[t]) os << "," << static_cast<int>(b);
        os << "\n";
    }
}

}  // namespace porl
