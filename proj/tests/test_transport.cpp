#include <doctest.h>

#include "cardiotwin/error.hpp"
#include "cardiotwin/gateway.hpp"
#include "cardiotwin/queue.hpp"
#include "cardiotwin/telemetry.hpp"
#include "cardiotwin/transport.hpp"
#include "cardiotwin/wire.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>

using namespace cardiotwin;
using namespace cardiotwin::transport;

namespace {

auto delivery_key(const telemetry::DeliveryRecord& d) {
    return std::make_tuple(d.device_id, d.seq, d.attempt, d.via.value_or(""), static_cast<int>(d.status));
}

std::vector<telemetry::DeliveryRecord> sorted(std::vector<telemetry::DeliveryRecord> v) {
    std::ranges::sort(v, {}, [](const auto& d) { return delivery_key(d); });
    return v;
}

// A port that was free a moment ago and has nothing listening now.
std::uint16_t closed_port() {
    IngestServer probe({"127.0.0.1", 0}, [](std::string_view) { return AckByte::accepted; });
    const auto port = probe.port();
    probe.stop();
    return port;
}

}  // namespace

TEST_CASE("endpoints parse host:port and :port") {
    const auto a = parse_endpoint("10.0.0.2:7000");
    CHECK(a.host == "10.0.0.2");
    CHECK(a.port == 7000);
    const auto b = parse_endpoint(":0");
    CHECK(b.host == "127.0.0.1");
    CHECK(b.port == 0);
    CHECK_THROWS_AS(parse_endpoint("nohost"), Error);
    CHECK_THROWS_AS(parse_endpoint("h:99999"), Error);
    CHECK_THROWS_AS(parse_endpoint("h:abc"), Error);
}

TEST_CASE("bounded queue blocks at capacity and drains after close") {
    BoundedQueue<int> q(2);
    CHECK(q.push(1));
    CHECK(q.push(2));
    std::atomic<bool> third{false};
    std::thread producer([&] {
        q.push(3);
        third = true;
    });
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    CHECK_FALSE(third.load());
    CHECK(q.pop() == 1);
    producer.join();
    CHECK(third.load());
    q.close();
    CHECK_FALSE(q.push(4));
    CHECK(q.pop() == 2);
    CHECK(q.pop() == 3);
    CHECK_FALSE(q.pop().has_value());
}

TEST_CASE("frames round-trip through the ingest server with acks") {
    gateway::Gateway gw;
    std::mutex m;
    std::vector<std::string> seen;
    IngestServer server({"127.0.0.1", 0}, [&](std::string_view line) {
        std::lock_guard lock(m);
        seen.emplace_back(line);
        return gw.ingest(line).normalized ? AckByte::accepted : AckByte::duplicate;
    });
    REQUIRE(server.port() != 0);

    const auto fleet = telemetry::make_fleet(1, 3, 250, 7);
    TcpFrameSink sink({"127.0.0.1", server.port()});
    const auto frame = telemetry::synth_frame("dev-0001", 1, fleet.patient_profiles[0], 7, 250);
    const auto line = wire::encode_frame(frame);
    CHECK(sink.submit(frame, line) == telemetry::Ack::accepted);
    CHECK(sink.submit(frame, line) == telemetry::Ack::duplicate);
    server.stop();
    CHECK(seen.size() == 2);
    CHECK(seen[0] == line);
    CHECK(gw.accepted() == 1);
    CHECK(gw.duplicates() == 1);
}

TEST_CASE("a throwing handler is answered with a rejection") {
    IngestServer server({"127.0.0.1", 0}, [](std::string_view line) -> AckByte {
        (void)gateway::decode_frame(line);
        return AckByte::accepted;
    });
    TcpFrameSink sink({"127.0.0.1", server.port()});
    telemetry::SensorFrame frame;
    frame.device_id = "dev-0001";
    frame.seq = 1;
    try {
        sink.submit(frame, "{not json");
        FAIL("expected a rejection");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::validation);
    }
}

TEST_CASE("live fleet delivers the same frames and records as replay") {
    auto fleet = telemetry::make_fleet(3, 40, 250, 11, 0.2);
    fleet.neighbor_map = {{1}, {2}, {0}};
    const auto replay = telemetry::run_fleet(fleet);

    gateway::Gateway gw;
    IngestServer server({"127.0.0.1", 0}, [&](std::string_view line) {
        return gw.ingest(line).normalized ? AckByte::accepted : AckByte::duplicate;
    });
    const auto live = run_fleet_live(fleet, {"127.0.0.1", server.port()});
    server.stop();

    CHECK(live.frames == replay.frames);
    CHECK(live.received == replay.received);
    CHECK(sorted(live.deliveries) == sorted(replay.deliveries));
    CHECK(live.permanently_dropped() == replay.permanently_dropped());
    CHECK(gw.accepted() == live.delivered_count());
    CHECK(gw.accepted() + live.permanently_dropped() == live.frames.size());
}

TEST_CASE("an unreachable gateway is reported per delivery with the retry count") {
    const auto fleet = telemetry::make_fleet(2, 3, 250, 5);
    const auto log = run_fleet_live(fleet, {"127.0.0.1", closed_port()}, {2, nullptr});
    REQUIRE(log.frames.size() == 6);
    CHECK(log.received.empty());
    CHECK(log.permanently_dropped() == 6);
    REQUIRE_FALSE(log.deliveries.empty());
    for (const auto& d : log.deliveries) {
        CHECK(d.status == telemetry::DeliveryStatus::dropped);
        CHECK(d.error.find("after 3 retries") != std::string::npos);
    }
}

TEST_CASE("a stop request ends the live fleet early") {
    const auto fleet = telemetry::make_fleet(2, 1000, 250, 5);
    std::atomic<bool> stop{true};
    IngestServer server({"127.0.0.1", 0}, [](std::string_view) { return AckByte::accepted; });
    const auto log = run_fleet_live(fleet, {"127.0.0.1", server.port()}, {3, &stop});
    CHECK(log.frames.empty());
}

TEST_CASE("binding an address already in use fails with a transport error") {
    IngestServer first({"127.0.0.1", 0}, [](std::string_view) { return AckByte::accepted; });
    try {
        IngestServer second({"127.0.0.1", first.port()}, [](std::string_view) { return AckByte::accepted; });
        FAIL("expected bind failure");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::transport);
    }
}
