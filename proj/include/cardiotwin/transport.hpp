#pragma once

// Live-mode link between simulated devices and the gateway: each frame is a
// 4-byte big-endian length followed by one wire line, answered by a single
// ack byte ('A' accepted, 'D' duplicate, 'E' rejected).

#include "cardiotwin/telemetry.hpp"

#include <atomic>
#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>

namespace cardiotwin::transport {

inline constexpr std::uint32_t kMaxFrameBytes = 1u << 20;

struct Endpoint {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
};

// "host:port" or ":port". Errc::config on malformed input.
Endpoint parse_endpoint(std::string_view text);

enum class AckByte : char { accepted = 'A', duplicate = 'D', rejected = 'E' };

// Accepts connections on a background thread; one thread per connection
// calls the handler for every frame and writes back its ack.
class IngestServer {
public:
    using Handler = std::function<AckByte(std::string_view line)>;

    // Errc::transport when the address cannot be bound. Port 0 picks a free port.
    IngestServer(const Endpoint& bind, Handler handler);
    ~IngestServer();

    IngestServer(const IngestServer&) = delete;
    IngestServer& operator=(const IngestServer&) = delete;

    std::uint16_t port() const noexcept { return port_; }
    std::size_t connections() const noexcept { return connections_.load(); }
    // Closes the listener, then waits for open connections to finish.
    void stop();

private:
    void accept_loop();
    void serve(int fd);

    Handler handler_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::atomic<std::size_t> connections_{0};
    std::thread acceptor_;
    std::mutex workers_mutex_;
    std::list<std::thread> workers_;
    std::list<int> client_fds_;
};

// Device-side sender over one TCP connection, reconnecting on demand.
class TcpFrameSink final : public telemetry::FrameSink {
public:
    explicit TcpFrameSink(Endpoint endpoint);
    ~TcpFrameSink() override;

    TcpFrameSink(const TcpFrameSink&) = delete;
    TcpFrameSink& operator=(const TcpFrameSink&) = delete;

    // Errc::transport on connection failure, Errc::validation when the
    // gateway rejects the line.
    telemetry::Ack submit(const telemetry::SensorFrame& frame, std::string_view line) override;

private:
    void connect();
    void disconnect() noexcept;

    Endpoint endpoint_;
    int fd_ = -1;
};

struct LiveOptions {
    std::size_t connect_retries = 3;
    const std::atomic<bool>* stop = nullptr;
};

// Live counterpart of run_fleet: one sender thread per device, each tick goes
// through the direct uplink and then the neighbor relays until delivered.
// Transport failures are recorded on the DeliveryRecord (status dropped, error
// text with the retry count). Records and frames are returned in the same
// order as replay mode so logs compare.
telemetry::FrameLog run_fleet_live(const telemetry::FleetConfig& config, const Endpoint& gateway,
                                   const LiveOptions& options = {});

}  // namespace cardiotwin::transport
