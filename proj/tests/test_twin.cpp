#include <doctest.h>

#include "cardiotwin/error.hpp"
#include "cardiotwin/twin.hpp"

#include <cmath>
#include <limits>
#include <random>

using namespace cardiotwin;
using namespace cardiotwin::twin;

namespace {

// Fine-step RK4 integration of dP/dt = Q/C - P/(RC); independent of the
// Euler update under test.
double ode_oracle(double p0, double q, double r, double c, double t_end) {
    const double h = 1e-4;
    const auto f = [&](double p) { return q / c - p / (r * c); };
    double p = p0;
    double t = 0.0;
    while (t < t_end - 1e-12) {
        const double step = std::min(h, t_end - t);
        const double k1 = f(p);
        const double k2 = f(p + 0.5 * step * k1);
        const double k3 = f(p + 0.5 * step * k2);
        const double k4 = f(p + step * k3);
        p += step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
        t += step;
    }
    return p;
}

gateway::NormalizedFrame frame_for(const std::string& id, double hr, double sbp, std::int64_t t_ms) {
    gateway::NormalizedFrame f;
    f.device_id = id;
    f.t_ms = t_ms;
    f.values = {hr, sbp, 1.0, 1.0, 0.0};
    f.sigma_used = {1, 1, 1, 1, 1};
    return f;
}

}  // namespace

TEST_CASE("fixed point of the Windkessel update") {
    CHECK(windkessel_step(2.0, 2.0, 1.0, 1.0, 0.01) == 2.0);
    CHECK(windkessel_step(2.0, 2.0, 1.0, 1.0, 0.5) == 2.0);
}

TEST_CASE("pressure rises monotonically toward Q*R and matches the ODE oracle") {
    double p = 0.0;
    double t = 0.0;
    int steps = 0;
    while (std::abs(p - 2.0) >= 1e-3) {
        const double next = windkessel_step(p, 2.0, 1.0, 1.0, 0.01);
        REQUIRE(next > p);
        p = next;
        t += 0.01;
        REQUIRE(++steps < 100000);
    }
    CHECK(p < 2.0);
    CHECK(std::abs(p - ode_oracle(0.0, 2.0, 1.0, 1.0, t)) < 1e-3);
}

TEST_CASE("singular compliance is a parameter error") {
    try {
        windkessel_step(0.0, 2.0, 1.0, 0.0, 0.01);
        FAIL("expected a parameter error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::parameter);
    }
    CHECK_THROWS_AS(make_twin("p", 8, {1.0, 0.0, 60.0}), Error);
}

TEST_CASE("step_twin drives inflow from normalized heart rate") {
    auto s = make_twin("dev-0001", 8, {}, 2.0);
    // hr_norm = 2 with SV = 60 gives Q = 2, the fixed point for R = C = 1.
    s = step_twin(s, frame_for("dev-0001", 2.0, 3.0, 250), 0.01);
    CHECK(s.pressure == 2.0);
    CHECK(s.inflow == 2.0);
    CHECK(s.steps == 1);
    CHECK(s.last_t_ms == 250);
    CHECK(s.traces[kTraceHeartRate].back() == 2.0);
    CHECK(s.traces[kTraceSystolic].back() == 3.0);
    CHECK(s.traces[kTraceHeartRate].front() == 0.0);
    CHECK(s.resolution() == 8);
}

TEST_CASE("low-variance channels hold their previous sample") {
    auto s = make_twin("dev-0001", 8);
    auto first = frame_for("dev-0001", 7.0e7, 1.2e8, 250);
    first.low_variance = {true, true, true, true, true};
    s = step_twin(s, first, 0.25);
    CHECK(s.inflow == 0.0);
    CHECK(s.pressure == 0.0);
    CHECK(s.traces[kTraceHeartRate].back() == 0.0);
    CHECK(s.traces[kTraceSystolic].back() == 0.0);
    CHECK(s.steps == 1);

    s = step_twin(s, frame_for("dev-0001", 2.0, 3.0, 500), 0.25);
    auto flat = frame_for("dev-0001", 5.0e6, 4.0, 750);
    flat.low_variance[0] = true;
    s = step_twin(s, flat, 0.25);
    CHECK(s.inflow == 2.0);
    CHECK(s.traces[kTraceHeartRate].back() == 2.0);
    CHECK(s.traces[kTraceSystolic].back() == 4.0);
}

TEST_CASE("step_twin equals one Euler step when dt is small") {
    auto s = make_twin("a", 8, {1.5, 0.8, 60.0}, 0.3);
    const auto next = step_twin(s, frame_for("a", 4.0, 1.0, 10), 0.1);
    CHECK(next.pressure == windkessel_step(0.3, 4.0, 1.5, 0.8, 0.1));
}

TEST_CASE("large intervals are sub-stepped and stay stable") {
    auto s = make_twin("a", 8, {1.0, 0.2, 60.0});
    for (int i = 0; i < 50; ++i) s = step_twin(s, frame_for("a", 3.0, 1.0, 1000 * (i + 1)), 1.0);
    CHECK(s.pressure == doctest::Approx(3.0).epsilon(1e-6));
}

TEST_CASE("step_twin error paths") {
    auto s = make_twin("a", 8);
    CHECK_THROWS_AS(step_twin(s, frame_for("b", 1.0, 1.0, 1), 0.1), Error);
    CHECK_THROWS_AS(step_twin(s, frame_for("a", 1.0, 1.0, 1), 0.0), Error);
    try {
        step_twin(s, frame_for("a", std::numeric_limits<double>::max(), 1.0, 1), 0.4);
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::numeric);
    }
    CHECK(s.steps == 0);
    CHECK(s.pressure == 0.0);
}

TEST_CASE("rasterize zero state gives a zero image of shape r x r x k") {
    const auto img = rasterize(make_twin("a", 12));
    CHECK(img.tensor.shape() == Shape{kTraceCount, 12, 12});
    for (double v : img.tensor.data()) CHECK(v == 0.0);
}

TEST_CASE("rasterize broadcasts a constant trace") {
    auto s = make_twin("a", 10);
    std::ranges::fill(s.traces[0], 1.0);
    const auto img = rasterize(s);
    for (std::size_t y = 0; y < 10; ++y) {
        for (std::size_t x = 0; x < 10; ++x) {
            CHECK(img.tensor.at(0, y, x) == 1.0);
            for (std::size_t c = 1; c < kTraceCount; ++c) CHECK(img.tensor.at(c, y, x) == 0.0);
        }
    }
}

TEST_CASE("rasterize tiles each trace along rows and is deterministic") {
    auto s = make_twin("a", 8);
    for (int i = 0; i < 12; ++i) s = step_twin(s, frame_for("a", 1.0 + i, 2.0 * i, 100 * (i + 1)), 0.1);
    const auto a = rasterize(s);
    const auto b = rasterize(s);
    CHECK(a.tensor == b.tensor);
    for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) CHECK(a.tensor.at(kTracePressure, y, x) == s.traces[kTracePressure][x]);
    }
    s.traces[1][3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(rasterize(s), Error);
}

TEST_CASE("property: pressure stays within max(P0, Qmax R) for bounded inputs") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const WindkesselParams p{0.2 + 2.0 * u(rng), 0.2 + 2.0 * u(rng), 60.0};
        const double p0 = 10.0 * u(rng);
        auto s = make_twin("a", 8, p, p0);
        const double qmax = 300.0;
        for (int i = 0; i < 200; ++i) {
            s = step_twin(s, frame_for("a", qmax * u(rng), 1.0, i + 1), 0.05 + 0.5 * u(rng));
            CHECK(s.pressure <= std::max(p0, qmax * p.resistance) + 1e-9);
            CHECK(s.pressure >= 0.0);
        }
    }
}
