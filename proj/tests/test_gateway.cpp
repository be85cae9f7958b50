#include <doctest.h>

#include "cardiotwin/error.hpp"
#include "cardiotwin/gateway.hpp"
#include "cardiotwin/wire.hpp"

#include <cmath>
#include <random>
#include <set>
#include <thread>

using namespace cardiotwin;
using namespace cardiotwin::gateway;
using telemetry::SensorFrame;

namespace {

const std::string kLine =
    R"({"v":1,"device_id":"dev1","seq":7,"t_ms":1750,"channels":{"hr_bpm":72.5,"sbp_mmhg":121.0,"dbp_mmhg":79.0,"spo2_pct":97.5,"activity_level":0.2},"context":{"location":"ward-A","activity":"rest"}})";

SensorFrame frame_with(double v, std::uint64_t seq = 1) {
    SensorFrame f;
    f.device_id = "dev1";
    f.seq = seq;
    f.t_ms = static_cast<std::int64_t>(seq) * 250;
    f.channels = {v, v, v, v, v};
    return f;
}

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return Errc::io;
}

}  // namespace

TEST_CASE("well-formed line decodes and re-encodes canonically") {
    const auto f = decode_frame(kLine);
    CHECK(f.device_id == "dev1");
    CHECK(f.seq == 7);
    CHECK(f.t_ms == 1750);
    CHECK(f.channels[telemetry::kHeartRate] == 72.5);
    REQUIRE(f.context.has_value());
    CHECK(f.context->location == "ward-A");
    CHECK(wire::encode_frame(f) == kLine);

    const char* reordered =
        R"({"t_ms":1750,"channels":{"activity_level":0.2,"spo2_pct":97.5,"dbp_mmhg":79,"sbp_mmhg":121,"hr_bpm":72.5},"seq":7,"device_id":"dev1","v":1,"context":{"activity":"rest","location":"ward-A"}})";
    CHECK(wire::encode_frame(decode_frame(reordered)) == kLine);
}

TEST_CASE("decode errors") {
    const std::string line(kLine);
    CHECK(code_of([&] { decode_frame(line.substr(0, line.size() / 2)); }) == Errc::parse);
    CHECK(code_of([] { decode_frame(R"({"v":2,"device_id":"d","seq":1,"t_ms":1,"channels":{}})"); }) ==
          Errc::version);
    CHECK(code_of([] { decode_frame(R"({"v":1,"device_id":"d","seq":1,"t_ms":1})"); }) == Errc::parse);
    CHECK(code_of([] {
              decode_frame(
                  R"({"v":1,"device_id":"d","seq":1,"t_ms":1,"channels":{"hr_bpm":400,"sbp_mmhg":121,"dbp_mmhg":79,"spo2_pct":97,"activity_level":0.2}})");
          }) == Errc::validation);
    CHECK(code_of([] {
              decode_frame(
                  R"({"v":1,"device_id":"d","seq":1,"t_ms":1,"channels":{"hr_bpm":70,"sbp_mmhg":70,"dbp_mmhg":79,"spo2_pct":97,"activity_level":0.2}})");
          }) == Errc::validation);
}

TEST_CASE("second occurrence of (device, seq) is a dedupe drop, not an error") {
    FrameDecoder decoder;
    CHECK(decoder.decode(kLine).status == DecodeStatus::accepted);
    CHECK(decoder.decode(kLine).status == DecodeStatus::duplicate);
    CHECK(decoder.accepted() == 1);
    CHECK(decoder.duplicates() == 1);
}

TEST_CASE("channel stats use the sample standard deviation") {
    ChannelStats stats;
    for (double v : {2.0, 4.0, 6.0}) update_channel_stats(stats, frame_with(v));
    for (std::size_t c = 0; c < kChannelCount; ++c) {
        CHECK(stats.sigma(c) == doctest::Approx(2.0).epsilon(1e-15));
        CHECK(stats.mean(c) == doctest::Approx(4.0));
    }
}

TEST_CASE("degenerate windows floor sigma to epsilon") {
    ChannelStats single;
    single.update(frame_with(3.0));
    CHECK(single.sigma(0) == kSigmaFloor);

    ChannelStats constant(16);
    for (int i = 0; i < 16; ++i) constant.update(frame_with(5.0));
    CHECK(constant.sigma(0) == kSigmaFloor);
    const auto n = normalize(frame_with(5.0), constant);
    CHECK(n.low_variance[0]);
    CHECK(n.values[0] == doctest::Approx(5.0 / kSigmaFloor));
}

TEST_CASE("trailing window forgets old samples") {
    ChannelStats stats(3);
    for (double v : {100.0, 2.0, 4.0, 6.0}) stats.update(frame_with(v));
    CHECK(stats.count() == 3);
    CHECK(stats.sigma(0) == doctest::Approx(2.0));
}

TEST_CASE("normalize divides by sigma without centering") {
    ChannelStats stats;
    for (double v : {2.0, 4.0, 6.0}) stats.update(frame_with(v));
    std::vector<double> out;
    for (double v : {2.0, 4.0, 6.0}) out.push_back(normalize(frame_with(v), stats).values[0]);
    CHECK(out == std::vector<double>{1.0, 2.0, 3.0});

    const auto n = normalize(frame_with(6.0), stats);
    CHECK_FALSE(n.any_low_variance());
    CHECK(n.sigma_used[0] == 2.0);
}

TEST_CASE("normalize with empty stats is a validation error") {
    ChannelStats empty;
    CHECK(code_of([&] { normalize(frame_with(1.0), empty); }) == Errc::validation);
}

TEST_CASE("property: normalized value times sigma reproduces the raw value") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.01, 300.0);
    for (int trial = 0; trial < 200; ++trial) {
        ChannelStats stats(64);
        for (int i = 0; i < 1 + trial % 70; ++i) stats.update(frame_with(u(rng)));
        const auto raw = frame_with(u(rng));
        const auto n = normalize(raw, stats);
        for (std::size_t c = 0; c < kChannelCount; ++c) {
            CHECK(std::abs(n.values[c] * n.sigma_used[c] - raw.channels[c]) <= 1e-9 * std::abs(raw.channels[c]));
        }
    }
}

TEST_CASE("property: scaling a stream leaves steady-window normalized values unchanged") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> noise(50.0, 7.0);
    for (double scale : {0.5, 3.0, 17.25}) {
        ChannelStats base(32);
        ChannelStats scaled(32);
        for (int i = 0; i < 200; ++i) {
            const double v = noise(rng);
            base.update(frame_with(v));
            scaled.update(frame_with(v * scale));
            if (i >= 32) {
                CHECK(scaled.sigma(0) == doctest::Approx(base.sigma(0) * scale).epsilon(1e-9));
                const double a = normalize(frame_with(v), base).values[0];
                const double b = normalize(frame_with(v * scale), scaled).values[0];
                CHECK(std::abs(a - b) <= 1e-9 * std::abs(a));
            }
        }
    }
}

TEST_CASE("gateway ingest logs accepted frames and dedupes replays") {
    Gateway gw;
    std::vector<std::string> raw;
    std::vector<std::string> normalized;
    gw.set_log_sink([&](std::string_view log, const std::string& line) {
        (log == "raw" ? raw : normalized).push_back(line);
    });
    const auto log = telemetry::run_fleet(telemetry::make_fleet(2, 40, 250, 4));
    for (int pass = 0; pass < 2; ++pass) {
        for (const auto& line : log.received) gw.ingest(line);
    }
    CHECK(gw.accepted() == 80);
    CHECK(gw.duplicates() == 80);
    CHECK(raw.size() == 80);
    CHECK(normalized.size() == 80);
    CHECK(raw.front() == log.received.front());
    CHECK(gw.devices() == std::vector<std::string>{"dev-0001", "dev-0002"});
}

TEST_CASE("concurrent ingestion from many devices") {
    Gateway gw;
    const auto log = telemetry::run_fleet(telemetry::make_fleet(8, 200, 250, 2));
    std::vector<std::vector<std::string>> per_device(8);
    for (const auto& line : log.received) {
        const auto f = decode_frame(line);
        per_device[*telemetry::device_index(f.device_id)].push_back(line);
    }
    std::vector<std::thread> threads;
    for (auto& lines : per_device) {
        threads.emplace_back([&gw, &lines] {
            for (const auto& l : lines) gw.ingest(l);
            for (const auto& l : lines) gw.ingest(l);
        });
    }
    for (auto& t : threads) t.join();
    CHECK(gw.accepted() == 1600);
    CHECK(gw.duplicates() == 1600);
    CHECK(gw.stats("dev-0003")->count() == 200);
}
