#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "porl/sensor_failure.hpp"

using namespace porl;

namespace {
const ChainParams kSensor{0.01, 0.9};
const ChainParams kGroup{0.55, 0.9};
}  // namespace

TEST_CASE("steady_state closed form") {
    REQUIRE(steady_state({0.0, 0.5}) == 1.0);
    REQUIRE(steady_state(kSensor) == Catch::Approx(0.9 / 0.91).margin(1e-12));
    REQUIRE(steady_state(kSensor) == Catch::Approx(0.989011).margin(1e-6));
    REQUIRE(steady_state(kGroup) == Catch::Approx(0.9 / 1.45).margin(1e-12));
    REQUIRE(steady_state(kGroup) == Catch::Approx(0.620690).margin(1e-6));
    REQUIRE_THROWS_AS(steady_state({0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("effective_rates") {
    auto r = effective_rates(kSensor, kGroup);
    REQUIRE(r.p_fail_eff == Catch::Approx(0.5545).margin(1e-12));
    REQUIRE(r.p_recover_eff == Catch::Approx(0.81).margin(1e-12));
    auto none = effective_rates({0.0, 0.5}, {0.0, 0.5});
    REQUIRE(none.p_fail_eff == 0.0);
}

TEST_CASE("stationary_up_rate") {
    const double pi_x = stationary_up_rate(kSensor, kGroup);
    REQUIRE(pi_x == Catch::Approx(steady_state(kSensor) * steady_state(kGroup)).margin(1e-15));
    REQUIRE(pi_x == Catch::Approx(0.6139).margin(1e-4));
    // degenerate group layer
    REQUIRE(stationary_up_rate(kSensor, {0.0, 1.0}) ==
            Catch::Approx(steady_state(kSensor)).margin(1e-15));
    // symmetric chains
    REQUIRE(stationary_up_rate({0.3, 0.3}, {0.7, 0.7}) == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("mixing_time_bound") {
    REQUIRE(mixing_time_bound(kSensor, kGroup) ==
            Catch::Approx(std::log(4.0) / 0.91).margin(1e-12));
    REQUIRE(mixing_time_bound(kSensor, kGroup) == Catch::Approx(1.5235).margin(1e-4));
    const double g = std::log(4.0);
    REQUIRE(mixing_time_bound({g / 2, g / 2}, {g / 2, g / 2}) == Catch::Approx(1.0).margin(1e-12));
    // halving both gaps doubles the bound
    REQUIRE(mixing_time_bound({0.1, 0.1}, {0.2, 0.2}) ==
            Catch::Approx(2.0 * mixing_time_bound({0.2, 0.2}, {0.4, 0.4})).margin(1e-12));
    REQUIRE_THROWS_AS(mixing_time_bound({0.0, 0.0}, kGroup), std::invalid_argument);
}

TEST_CASE("step_mask_process endpoints") {
    SensorLayout layout = SensorLayout::contiguous({2, 1});
    Rng rng(7);
    SECTION("failure impossible keeps all-up absorbing") {
        MaskProcessState s;
        s.z = {1, 1, 1};
        s.y = {1, 1};
        s.recompute_effective(layout);
        for (int t = 0; t < 200; ++t) {
            step_mask_process(s, layout, {0.0, 0.5}, {0.0, 0.5}, rng);
            for (auto b : s.x) REQUIRE(b == 1);
        }
    }
    SECTION("forced recovery from all-down") {
        MaskProcessState s;
        s.z = {0, 0, 0};
        s.y = {0, 0};
        s.recompute_effective(layout);
        step_mask_process(s, layout, {0.0, 1.0}, {0.0, 1.0}, rng);
        for (auto b : s.x) REQUIRE(b == 1);
    }
    SECTION("x stays the elementwise product of z and y") {
        MaskProcessState s;
        s.z = {1, 1, 1};
        s.y = {1, 1};
        s.recompute_effective(layout);
        for (int t = 0; t < 2000; ++t) {
            step_mask_process(s, layout, kSensor, kGroup, rng);
            for (std::size_t i = 0; i < s.z.size(); ++i)
                REQUIRE(s.x[i] == (s.z[i] & s.y[layout.group_of[i]]));
        }
    }
}

TEST_CASE("long-run mask statistics match the stationary analysis") {
    SensorLayout layout = SensorLayout::contiguous({2, 2, 1});
    const std::size_t T = 1000000;
    auto trace = simulate_trace(layout, kSensor, kGroup, T, 2024);
    const double pi_x = stationary_up_rate(kSensor, kGroup);

    SECTION("per-sensor empirical up-rate within 0.01 of pi_x") {
        for (int i = 0; i < layout.n_sensors(); ++i) {
            double up = 0;
            for (const auto& row : trace) up += row[static_cast<std::size_t>(i)];
            REQUIRE(up / static_cast<double>(T) == Catch::Approx(pi_x).margin(0.01));
        }
    }

    SECTION("same-group sensors are positively correlated") {
        double m0 = 0, m1 = 0, m01 = 0;
        for (const auto& row : trace) {
            m0 += row[0];
            m1 += row[1];
            m01 += row[0] * row[1];
        }
        m0 /= T;
        m1 /= T;
        m01 /= T;
        const double cov = m01 - m0 * m1;
        REQUIRE(cov > 0.0);
    }

    SECTION("autocorrelation decays within the chain eigenvalue envelope") {
        // slowest decay rate of the two layers is max |1 - (p_fail + p_recover)|
        const double lam = std::max(std::abs(1.0 - kSensor.gap()), std::abs(1.0 - kGroup.gap()));
        std::vector<double> x(T);
        double mu = 0;
        for (std::size_t t = 0; t < T; ++t) {
            x[t] = trace[t][0];
            mu += x[t];
        }
        mu /= static_cast<double>(T);
        double var = 0;
        for (double v : x) var += (v - mu) * (v - mu);
        var /= static_cast<double>(T);
        const double se = 1.0 / std::sqrt(static_cast<double>(T));
        for (std::size_t lag : {1u, 5u, 10u}) {
            double acc = 0;
            for (std::size_t t = 0; t + lag < T; ++t) acc += (x[t] - mu) * (x[t + lag] - mu);
            const double rho = acc / (static_cast<double>(T - lag) * var);
            REQUIRE(std::abs(rho) <= std::pow(lam, static_cast<double>(lag)) + 3.0 * se);
        }
    }
}

TEST_CASE("simulate_trace determinism and stationary initialization") {
    SensorLayout layout = SensorLayout::contiguous({1});
    SECTION("identical seed gives identical trace") {
        auto a = simulate_trace(layout, kSensor, kGroup, 5000, 99);
        auto b = simulate_trace(layout, kSensor, kGroup, 5000, 99);
        REQUIRE(a == b);
    }
    SECTION("x at t=0 and x at t=10^4 have the same distribution") {
        const int n_traces = 2000;
        const std::size_t horizon = 10001;
        int up0 = 0, upT = 0;
        for (int k = 0; k < n_traces; ++k) {
            auto tr = simulate_trace(layout, kSensor, kGroup, horizon,
                                     1000 + static_cast<std::uint64_t>(k));
            up0 += tr.front()[0];
            upT += tr[10000][0];
        }
        const double p1 = up0 / static_cast<double>(n_traces);
        const double p2 = upT / static_cast<double>(n_traces);
        const double pooled = (up0 + upT) / (2.0 * n_traces);
        const double se =
            std::sqrt(pooled * (1.0 - pooled) * 2.0 / static_cast<double>(n_traces));
        const double z = (p1 - p2) / se;
        REQUIRE(std::abs(z) < 2.576);  // alpha = 0.01
    }
}

TEST_CASE("trace CSV export") {
    SensorLayout layout = SensorLayout::contiguous({2});
    auto trace = simulate_trace(layout, kSensor, kGroup, 3, 1);
    const auto path = std::filesystem::temp_directory_path() / "porl_trace_test.csv";
    write_trace_csv(path.string(), trace);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    REQUIRE(header == "t,x_0,x_1");
    std::string line;
    int rows = 0;
    while (std::getline(is, line))
        if (!line.empty()) ++rows;
    REQUIRE(rows == 3);
    std::filesystem::remove(path);
}
