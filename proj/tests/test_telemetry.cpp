#include <doctest.h>

#include "cardiotwin/error.hpp"
#include "cardiotwin/gateway.hpp"
#include "cardiotwin/telemetry.hpp"

#include <algorithm>
#include <map>
#include <set>

using namespace cardiotwin;
using namespace cardiotwin::telemetry;

namespace {

PatientProfile quiet_profile() {
    PatientProfile p;
    p.baseline = {70, 120, 80, 98, 0.1};
    p.noise_scale = {0, 0, 0, 0, 0};
    return p;
}

FleetConfig chain_fleet(std::uint32_t devices, std::uint64_t ticks) {
    FleetConfig cfg = make_fleet(devices, ticks, 250, 11);
    cfg.neighbor_map.assign(devices, {});
    for (std::uint32_t d = 0; d < devices; ++d) {
        for (std::uint32_t n = 0; n < devices; ++n) {
            if (n != d) cfg.neighbor_map[d].push_back(n);
        }
    }
    return cfg;
}

}  // namespace

TEST_CASE("zero-noise profile passes baseline vitals through") {
    const auto f = synth_frame("dev1", 0, quiet_profile(), 42);
    CHECK(f.device_id == "dev1");
    CHECK(f.seq == 0);
    CHECK(f.t_ms == 0);
    CHECK(f.channels == ChannelValues{70, 120, 80, 98, 0.1});
}

TEST_CASE("synth_frame is deterministic and respects channel invariants") {
    const auto profile = default_profile(3, 5000, 9);
    CHECK(synth_frame("dev-0004", 17, profile, 9) == synth_frame("dev-0004", 17, profile, 9));
    CHECK_FALSE(synth_frame("dev-0004", 17, profile, 9) == synth_frame("dev-0004", 17, profile, 10));
    for (std::uint64_t t = 0; t < 5000; ++t) {
        CHECK_NOTHROW(validate(synth_frame("dev-0004", t, profile, 9)));
    }
}

TEST_CASE("event windows bias vitals toward the abnormal regime") {
    PatientProfile p = quiet_profile();
    p.events.push_back({10, 20, 1, {40, -30, -20, -8, 0}});
    const auto normal = synth_frame("d", 5, p, 1);
    const auto event = synth_frame("d", 12, p, 1);
    CHECK(event.channels[kHeartRate] == doctest::Approx(110));
    CHECK(event.channels[kSystolic] == doctest::Approx(90));
    CHECK(normal.channels[kHeartRate] == doctest::Approx(70));
    CHECK(in_event(p, 12));
    CHECK_FALSE(in_event(p, 20));
}

TEST_CASE("non-positive baseline is a configuration error") {
    PatientProfile p = quiet_profile();
    p.baseline[kHeartRate] = -5;
    try {
        synth_frame("dev1", 0, p, 1);
        FAIL("expected a configuration error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::config);
    }
}

TEST_CASE("run_fleet emits devices x ticks frames in total order") {
    const auto log = run_fleet(make_fleet(2, 3, 250, 5));
    REQUIRE(log.frames.size() == 6);
    CHECK(log.outcomes.size() == 6);
    for (std::size_t i = 1; i < log.frames.size(); ++i) {
        const auto& a = log.frames[i - 1];
        const auto& b = log.frames[i];
        CHECK(std::tie(a.t_ms, a.device_id, a.seq) < std::tie(b.t_ms, b.device_id, b.seq));
    }
}

TEST_CASE("run_fleet is deterministic per seed") {
    const auto cfg = chain_fleet(3, 200);
    auto lossy = cfg;
    lossy.drop_rate = 0.2;
    CHECK(frame_log_hash(run_fleet(lossy)) == frame_log_hash(run_fleet(lossy)));
    auto other = lossy;
    other.seed = 12;
    other.patient_profiles = make_fleet(3, 200, 250, 12).patient_profiles;
    CHECK(frame_log_hash(run_fleet(lossy)) != frame_log_hash(run_fleet(other)));
}

TEST_CASE("lossy link with retries eventually delivers every frame") {
    auto cfg = make_fleet(1, 1000, 250, 3, 0.05);
    RecordingSink gateway;
    const auto log = run_fleet(cfg, gateway);
    CHECK(gateway.accepted().size() == 1000);
    CHECK(log.delivered_count() == 1000);
    CHECK(log.permanently_dropped() == 0);
    const auto retried = std::ranges::count_if(log.deliveries, [](const DeliveryRecord& d) { return d.attempt > 1; });
    CHECK(retried > 0);
}

TEST_CASE("frame conservation and seq gaps only at dropped records") {
    auto cfg = make_fleet(3, 400, 100, 21, 0.4);
    cfg.max_attempts = 1;
    RecordingSink gateway;
    const auto log = run_fleet(cfg, gateway);
    CHECK(log.frames.size() == log.delivered_count() + log.permanently_dropped());
    CHECK(log.permanently_dropped() > 0);

    std::set<std::pair<std::string, std::uint64_t>> dropped;
    for (const auto& d : log.deliveries) {
        if (d.status == DeliveryStatus::dropped) dropped.emplace(d.device_id, d.seq);
    }
    std::map<std::string, std::set<std::uint64_t>> seen;
    for (const auto& f : gateway.accepted()) seen[f.device_id].insert(f.seq);
    for (const auto& f : log.frames) {
        if (!seen[f.device_id].contains(f.seq)) CHECK(dropped.contains({f.device_id, f.seq}));
    }
}

TEST_CASE("every generated frame has at least one delivery record") {
    auto cfg = chain_fleet(3, 100);
    cfg.drop_rate = 0.3;
    const auto log = run_fleet(cfg);
    std::set<std::pair<std::string, std::uint64_t>> recorded;
    for (const auto& d : log.deliveries) recorded.emplace(d.device_id, d.seq);
    for (const auto& f : log.frames) CHECK(recorded.contains({f.device_id, f.seq}));
}

TEST_CASE("relay through a healthy neighbor") {
    const auto cfg = chain_fleet(3, 10);
    const auto frame = synth_frame(device_id(0), 1, cfg.patient_profiles[0], cfg.seed);
    RecordingSink gateway;
    const auto rec = relay(cfg, frame, device_id(1), {}, gateway);
    CHECK(rec.status == DeliveryStatus::delivered);
    REQUIRE(rec.via.has_value());
    CHECK(*rec.via == device_id(1));
}

TEST_CASE("relaying twice is deduplicated at the gateway") {
    const auto cfg = chain_fleet(3, 10);
    const auto frame = synth_frame(device_id(0), 1, cfg.patient_profiles[0], cfg.seed);
    gateway::FrameDecoder decoder;
    struct DecoderSink final : FrameSink {
        gateway::FrameDecoder* d;
        Ack submit(const SensorFrame&, std::string_view line) override {
            return d->decode(line).status == gateway::DecodeStatus::accepted ? Ack::accepted : Ack::duplicate;
        }
    } sink;
    sink.d = &decoder;
    const auto first = relay(cfg, frame, device_id(1), {}, sink);
    const auto second = relay(cfg, frame, device_id(2), {}, sink);
    CHECK(decoder.accepted() == 1);
    CHECK(first.status == DeliveryStatus::delivered);
    CHECK(second.status == DeliveryStatus::duplicated);
}

TEST_CASE("relay to a device outside the neighbor map is a routing error") {
    auto cfg = make_fleet(3, 10, 250, 1);
    cfg.neighbor_map = {{1}, {0}, {}};
    const auto frame = synth_frame(device_id(0), 1, cfg.patient_profiles[0], cfg.seed);
    RecordingSink gateway;
    try {
        relay(cfg, frame, device_id(2), {}, gateway);
        FAIL("expected a routing error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::routing);
    }
}

TEST_CASE("redundant relaying marks duplicates but keeps one accepted copy") {
    auto cfg = chain_fleet(2, 50);
    cfg.redundant_relay = true;
    RecordingSink gateway;
    const auto log = run_fleet(cfg, gateway);
    CHECK(gateway.accepted().size() == 100);
    CHECK(log.received.size() == 200);
    CHECK(std::ranges::count_if(log.deliveries, [](const auto& d) { return d.status == DeliveryStatus::duplicated; }) ==
          100);
}

TEST_CASE("fleet config validation") {
    auto cfg = make_fleet(2, 5, 250, 1);
    cfg.neighbor_map = {{0}, {}};
    CHECK_THROWS_AS(validate(cfg), Error);
    cfg.neighbor_map = {{5}, {}};
    CHECK_THROWS_AS(validate(cfg), Error);
    cfg.neighbor_map = {{1}, {0}};
    CHECK_NOTHROW(validate(cfg));

    const auto parsed = fleet_from_json(nlohmann::json::parse(
        R"({"devices": 2, "ticks": 5, "seed": 1, "neighbors": {"dev-0001": ["dev-0002"]}})"));
    CHECK(parsed.neighbor_map[0] == std::vector<std::uint32_t>{1});
    CHECK_THROWS_AS(fleet_from_json(nlohmann::json::parse(R"({"devices": 1, "neighbors": {"dev-0001": ["dev-0001"]}})")),
                    Error);
}
