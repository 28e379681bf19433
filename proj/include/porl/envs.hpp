#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "porl/rng.hpp"
#include "porl/sensor_failure.hpp"

namespace porl {

struct ActionSpace {
    bool discrete = false;
    int n = 0;                    // discrete action count
    int dim = 0;                  // box dimension
    std::vector<double> low, high;  // box bounds, per dim
};

struct EnvSpec {
    std::string name;
    int obs_dim = 0;
    ActionSpace action_space;
    int max_episode_len = 0;
    SensorLayout layout;  // partitions the raw observation features
};

struct StepResult {
    std::vector<double> observation;
    double reward = 0.0;
    bool done = false;       // terminal state reached
    bool truncated = false;  // horizon hit
};

class Env {
public:
    virtual ~Env() = default;
    virtual const EnvSpec& spec() const = 0;
    virtual std::vector<double> reset() = 0;
    virtual StepResult step(std::span<const double> action) = 0;
};

// ---------------------------------------------------------------------------
// chain5: deterministic 5-state chain, one-hot observations, reward 1 for
// occupying the rightmost state. Episodes truncate at 50 steps.
// ---------------------------------------------------------------------------

class ChainMdpEnv : public Env {
public:
    ChainMdpEnv(std::uint64_t seed, int n_states = 5, int n_actions = 2)
        : n_states_(n_states), rng_(seed) {
        spec_.name = "chain5";
        spec_.obs_dim = n_states;
        spec_.action_space.discrete = true;
        spec_.action_space.n = n_actions;
        spec_.max_episode_len = 50;
        spec_.layout = SensorLayout::contiguous({2, 2, 1});
    }

    const EnvSpec& spec() const override { return spec_; }

    std::vector<double> reset() override {
        state_ = 0;
        t_ = 0;
        return obs();
    }

    StepResult step(std::span<const double> action) override {
        const int a = static_cast<int>(std::llround(action[0]));
        const double r = state_ == n_states_ - 1 ? 1.0 : 0.0;
        state_ = a >= 1 ? std::min(state_ + 1, n_states_ - 1) : std::max(state_ - 1, 0);
        ++t_;
        return {obs(), r, false, t_ >= spec_.max_episode_len};
    }

    void reset_to(int s) {
        state_ = s;
        t_ = 0;
    }
    int state() const { return state_; }

private:
    std::vector<double> obs() const {
        std::vector<double> o(n_states_, 0.0);
        o[static_cast<std::size_t>(state_)] = 1.0;
        return o;
    }

    EnvSpec spec_;
    int n_states_;
    int state_ = 0;
    int t_ = 0;
    Rng rng_;
};

// ---------------------------------------------------------------------------
// pointmass: damped 2-D point mass steering to the origin. Observation is
// (px, py, vx, vy, -px, -py) with groups {position, velocity, goal-relative}.
// ---------------------------------------------------------------------------

class PointMassEnv : public Env {
public:
    explicit PointMassEnv(std::uint64_t seed) : rng_(seed) {
        spec_.name = "pointmass";
        spec_.obs_dim = 6;
        spec_.action_space.dim = 2;
        spec_.action_space.low = {-1.0, -1.0};
        spec_.action_space.high = {1.0, 1.0};
        spec_.max_episode_len = 200;
        spec_.layout = SensorLayout::contiguous({2, 2, 2});
    }

    const EnvSpec& spec() const override { return spec_; }

    std::vector<double> reset() override {
        px_ = rng_.uniform(-1.0, 1.0);
        py_ = rng_.uniform(-1.0, 1.0);
        vx_ = vy_ = 0.0;
        t_ = 0;
        return obs();
    }

    StepResult step(std::span<const double> action) override {
        const double ax = std::clamp(action[0], -1.0, 1.0);
        const double ay = std::clamp(action[1], -1.0, 1.0);
        vx_ = 0.9 * vx_ + 0.1 * ax;
        vy_ = 0.9 * vy_ + 0.1 * ay;
        px_ += 0.1 * vx_;
        py_ += 0.1 * vy_;
        const double reward = -(px_ * px_ + py_ * py_) - 0.01 * (ax * ax + ay * ay);
        ++t_;
        return {obs(), reward, false, t_ >= spec_.max_episode_len};
    }

    void reset_to(double px, double py, double vx, double vy) {
        px_ = px;
        py_ = py;
        vx_ = vx;
        vy_ = vy;
        t_ = 0;
    }

private:
    std::vector<double> obs() const { return {px_, py_, vx_, vy_, -px_, -py_}; }

    EnvSpec spec_;
    double px_ = 0, py_ = 0, vx_ = 0, vy_ = 0;
    int t_ = 0;
    Rng rng_;
};

// ---------------------------------------------------------------------------
// pendulum: torque-limited swing-up with semi-implicit Euler integration.
// Observation (cos th, sin th, omega) with groups {angle-pair, velocity}.
// ---------------------------------------------------------------------------

class PendulumEnv : public Env {
public:
    explicit PendulumEnv(std::uint64_t seed) : rng_(seed) {
        spec_.name = "pendulum";
        spec_.obs_dim = 3;
        spec_.action_space.dim = 1;
        spec_.action_space.low = {-2.0};
        spec_.action_space.high = {2.0};
        spec_.max_episode_len = 200;
        spec_.layout = SensorLayout::contiguous({2, 1});
    }

    const EnvSpec& spec() const override { return spec_; }

    static double wrap_angle(double th) {
        th = std::fmod(th + std::numbers::pi, 2.0 * std::numbers::pi);
        if (th < 0) th += 2.0 * std::numbers::pi;
        return th - std::numbers::pi;
    }

    std::vector<double> reset() override {
        theta_ = rng_.uniform(-std::numbers::pi, std::numbers::pi);
        omega_ = rng_.uniform(-1.0, 1.0);
        t_ = 0;
        return obs();
    }

    StepResult step(std::span<const double> action) override {
        const double a = std::clamp(action[0], -2.0, 2.0);
        omega_ += 0.05 * (-10.0 * std::sin(theta_ + std::numbers::pi) + 3.0 * a);
        omega_ = std::clamp(omega_, -8.0, 8.0);
        theta_ += 0.05 * omega_;
        const double wrapped = wrap_angle(theta_);
        const double reward = -(wrapped * wrapped + 0.1 * omega_ * omega_ + 0.001 * a * a);
        ++t_;
        return {obs(), reward, false, t_ >= spec_.max_episode_len};
    }

    void reset_to(double theta, double omega) {
        theta_ = theta;
        omega_ = omega;
        t_ = 0;
    }
    double theta() const { return theta_; }
    double omega() const { return omega_; }

private:
    std::vector<double> obs() const { return {std::cos(theta_), std::sin(theta_), omega_}; }

    EnvSpec spec_;
    double theta_ = 0, omega_ = 0;
    int t_ = 0;
    Rng rng_;
};

inline std::unique_ptr<Env> make_env(const std::string& name, std::uint64_t seed) {
    if (name == "chain5") return std::make_unique<ChainMdpEnv>(seed);
    if (name == "pointmass") return std::make_unique<PointMassEnv>(seed);
    if (name == "pendulum") return std::make_unique<PendulumEnv>(seed);
    throw std::invalid_argument("make_env: unknown environment '" + name + "'");
}

// ---------------------------------------------------------------------------
// Streaming observation normalizer (Welford). Output is clipped to
// [-10, 10]; variance is floored at 1e-8.
// ---------------------------------------------------------------------------

class RunningNormalizer {
public:
    explicit RunningNormalizer(std::size_t dim)
        : count_(0.0), mean_(dim, 0.0), m2_(dim, 0.0) {}

    void update(std::span<const double> x) {
        count_ += 1.0;
        for (std::size_t i = 0; i < mean_.size(); ++i) {
            const double delta = x[i] - mean_[i];
            mean_[i] += delta / count_;
            m2_[i] += delta * (x[i] - mean_[i]);
        }
    }

    double variance(std::size_t i) const {
        return count_ > 0.0 ? m2_[i] / count_ : 1.0;
    }

    double normalize_one(std::size_t i, double x) const {
        const double var = std::max(variance(i), 1e-8);
        return std::clamp((x - mean_[i]) / std::sqrt(var), -10.0, 10.0);
    }

    std::vector<double> normalize(std::span<const double> x) const {
        std::vector<double> out(mean_.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = normalize_one(i, x[i]);
        return out;
    }

    double count() const { return count_; }
    const std::vector<double>& mean() const { return mean_; }
    const std::vector<double>& m2() const { return m2_; }
    void restore(double count, std::vector<double> mean, std::vector<double> m2) {
        count_ = count;
        mean_ = std::move(mean);
        m2_ = std::move(m2);
    }

private:
    double count_;
    std::vector<double> mean_;
    std::vector<double> m2_;
};

// ---------------------------------------------------------------------------
// Failure wrapper: emits [normalize-then-mask features, mask bits], so the
// observation dimension doubles. Mask bits are never normalized or masked.
// The mask chain advances once per env step and stays frozen across resets.
// ---------------------------------------------------------------------------

class FailureWrapperEnv : public Env {
public:
    FailureWrapperEnv(std::unique_ptr<Env> inner, const ChainParams& sensor,
                      const ChainParams& group, bool normalize, std::uint64_t mask_seed)
        : inner_(std::move(inner)),
          sensor_(sensor),
          group_(group),
          normalize_(normalize),
          rng_(mask_seed),
          normalizer_(static_cast<std::size_t>(inner_->spec().obs_dim)) {
        sensor_.validate();
        group_.validate();
        const EnvSpec& in = inner_->spec();
        in.layout.validate();
        if (in.layout.n_sensors() != in.obs_dim)
            throw std::invalid_argument("FailureWrapperEnv: layout does not cover raw features");
        spec_ = in;
        spec_.obs_dim = 2 * in.obs_dim;
        mask_ = stationary_init(in.layout, sensor_, group_, rng_);
    }

    const EnvSpec& spec() const override { return spec_; }
    const EnvSpec& inner_spec() const { return inner_->spec(); }

    void set_training(bool training) { training_ = training; }
    bool training() const { return training_; }

    std::vector<double> reset() override {
        // mask frozen during reset
        return wrap(inner_->reset());
    }

    StepResult step(std::span<const double> action) override {
        StepResult r = inner_->step(action);
        step_mask_process(mask_, inner_->spec().layout, sensor_, group_, rng_);
        r.observation = wrap(r.observation);
        return r;
    }

    const MaskProcessState& mask_state() const { return mask_; }
    RunningNormalizer& normalizer() { return normalizer_; }
    const RunningNormalizer& normalizer() const { return normalizer_; }
    Env& inner() { return *inner_; }

private:
    std::vector<double> wrap(const std::vector<double>& raw) {
        const std::size_t d = raw.size();
        if (normalize_ && training_) normalizer_.update(raw);
        std::vector<double> out(2 * d);
        for (std::size_t i = 0; i < d; ++i) {
            const double v = normalize_ ? normalizer_.normalize_one(i, raw[i]) : raw[i];
            out[i] = mask_.x[i] ? v : 0.0;
            out[d + i] = static_cast<double>(mask_.x[i]);
        }
        return out;
    }

    std::unique_ptr<Env> inner_;
    ChainParams sensor_, group_;
    bool normalize_;
    bool training_ = false;
    Rng rng_;
    MaskProcessState mask_;
    RunningNormalizer normalizer_;
    EnvSpec spec_;
};

}  // namespace porl
