#include "cardiotwin/transport.hpp"

#include "cardiotwin/error.hpp"
#include "cardiotwin/wire.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <vector>

namespace cardiotwin::transport {

namespace {

std::string sys_error(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

bool send_all(int fd, const char* data, std::size_t n) {
    while (n > 0) {
        const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
        if (w < 0 && errno == EINTR) continue;
        if (w <= 0) return false;
        data += w;
        n -= static_cast<std::size_t>(w);
    }
    return true;
}

bool recv_all(int fd, char* data, std::size_t n) {
    while (n > 0) {
        const ssize_t r = ::recv(fd, data, n, 0);
        if (r < 0 && errno == EINTR) continue;
        if (r <= 0) return false;
        data += r;
        n -= static_cast<std::size_t>(r);
    }
    return true;
}

sockaddr_in resolve(const Endpoint& ep) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(ep.port);
    const std::string host = ep.host == "localhost" || ep.host.empty() ? "127.0.0.1" : ep.host;
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        addrinfo hints{};
        hints.ai_family = AF_INET;
        addrinfo* res = nullptr;
        if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
            fail(Errc::transport, "cannot resolve host '" + host + "'");
        }
        addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
        ::freeaddrinfo(res);
    }
    return addr;
}

}  // namespace

Endpoint parse_endpoint(std::string_view text) {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos) fail(Errc::config, "endpoint '" + std::string(text) + "' lacks a port");
    Endpoint ep;
    if (colon > 0) ep.host = std::string(text.substr(0, colon));
    const auto port = text.substr(colon + 1);
    unsigned value = 0;
    const auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
    if (ec != std::errc{} || ptr != port.data() + port.size() || value > 65535) {
        fail(Errc::config, "bad port in endpoint '" + std::string(text) + "'");
    }
    ep.port = static_cast<std::uint16_t>(value);
    return ep;
}

IngestServer::IngestServer(const Endpoint& bind, Handler handler) : handler_(std::move(handler)) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) fail(Errc::transport, sys_error("socket"));
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    const sockaddr_in addr = resolve(bind);
    if (::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 128) != 0) {
        const std::string msg = sys_error("bind");
        ::close(listen_fd_);
        fail(Errc::transport, msg + " (" + bind.host + ":" + std::to_string(bind.port) + ")");
    }
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
}

IngestServer::~IngestServer() { stop(); }

void IngestServer::accept_loop() {
    while (!stopping_.load()) {
        pollfd pfd{listen_fd_, POLLIN, 0};
        if (::poll(&pfd, 1, 50) <= 0) continue;
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) continue;
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        std::lock_guard lock(workers_mutex_);
        if (stopping_.load()) {
            ::close(fd);
            break;
        }
        ++connections_;
        client_fds_.push_back(fd);
        workers_.emplace_back([this, fd] { serve(fd); });
    }
}

void IngestServer::serve(int fd) {
    std::string line;
    for (;;) {
        unsigned char header[4];
        if (!recv_all(fd, reinterpret_cast<char*>(header), 4)) break;
        const std::uint32_t n = (std::uint32_t{header[0]} << 24) | (std::uint32_t{header[1]} << 16) |
                                (std::uint32_t{header[2]} << 8) | std::uint32_t{header[3]};
        if (n > kMaxFrameBytes) break;
        line.resize(n);
        if (!recv_all(fd, line.data(), n)) break;
        AckByte ack = AckByte::rejected;
        try {
            ack = handler_(line);
        } catch (const std::exception&) {
            ack = AckByte::rejected;
        }
        const char byte = static_cast<char>(ack);
        if (!send_all(fd, &byte, 1)) break;
    }
    std::lock_guard lock(workers_mutex_);
    for (auto it = client_fds_.begin(); it != client_fds_.end(); ++it) {
        if (*it == fd) {
            client_fds_.erase(it);
            ::close(fd);
            break;
        }
    }
}

void IngestServer::stop() {
    if (stopping_.exchange(true)) return;
    if (acceptor_.joinable()) acceptor_.join();
    if (listen_fd_ >= 0) ::close(listen_fd_);
    listen_fd_ = -1;
    std::list<std::thread> workers;
    {
        std::lock_guard lock(workers_mutex_);
        for (int fd : client_fds_) ::shutdown(fd, SHUT_RD);
        workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
}

TcpFrameSink::TcpFrameSink(Endpoint endpoint) : endpoint_(std::move(endpoint)) {}

TcpFrameSink::~TcpFrameSink() { disconnect(); }

void TcpFrameSink::connect() {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail(Errc::transport, sys_error("socket"));
    const sockaddr_in addr = resolve(endpoint_);
    if (::connect(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
        const std::string msg = sys_error("connect");
        disconnect();
        fail(Errc::transport, msg + " (" + endpoint_.host + ":" + std::to_string(endpoint_.port) + ")");
    }
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

void TcpFrameSink::disconnect() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
}

telemetry::Ack TcpFrameSink::submit(const telemetry::SensorFrame& frame, std::string_view line) {
    if (line.size() > kMaxFrameBytes) fail(Errc::validation, "frame too large for transport");
    if (fd_ < 0) connect();
    const auto n = static_cast<std::uint32_t>(line.size());
    std::string packet;
    packet.reserve(4 + line.size());
    packet.push_back(static_cast<char>(n >> 24));
    packet.push_back(static_cast<char>(n >> 16));
    packet.push_back(static_cast<char>(n >> 8));
    packet.push_back(static_cast<char>(n));
    packet.append(line);
    char ack = 0;
    if (!send_all(fd_, packet.data(), packet.size()) || !recv_all(fd_, &ack, 1)) {
        disconnect();
        fail(Errc::transport, "connection to gateway lost while sending " + frame.device_id + "#" +
                                  std::to_string(frame.seq));
    }
    switch (static_cast<AckByte>(ack)) {
        case AckByte::accepted: return telemetry::Ack::accepted;
        case AckByte::duplicate: return telemetry::Ack::duplicate;
        case AckByte::rejected: break;
    }
    fail(Errc::validation, "gateway rejected " + frame.device_id + "#" + std::to_string(frame.seq));
}

telemetry::FrameLog run_fleet_live(const telemetry::FleetConfig& config, const Endpoint& gateway,
                                   const LiveOptions& options) {
    using namespace telemetry;
    validate(config);

    struct DeviceLog {
        std::vector<SensorFrame> frames;
        std::vector<DeliveryRecord> deliveries;
        std::vector<std::pair<SensorFrame, std::string>> received;
        std::vector<OutcomeLabel> outcomes;
    };
    std::vector<DeviceLog> logs(config.device_count);

    const auto run_device = [&](std::uint32_t w) {
        DeviceLog& out = logs[w];
        const std::string id = device_id(w);
        const auto& profile = config.patient_profiles[w];
        const std::vector<std::uint32_t> none;
        const auto& neighbors = w < config.neighbor_map.size() ? config.neighbor_map[w] : none;
        TcpFrameSink link(gateway);
        struct Tap final : FrameSink {
            FrameSink* inner;
            DeviceLog* log;
            Ack submit(const SensorFrame& f, std::string_view line) override {
                const Ack ack = inner->submit(f, line);
                log->received.emplace_back(f, std::string(line));
                return ack;
            }
        } tap;
        tap.inner = &link;
        tap.log = &out;

        for (std::uint64_t t = 1; t <= config.horizon_ticks; ++t) {
            if (options.stop && options.stop->load()) break;
            SensorFrame frame = synth_frame(id, t, profile, config.seed, config.tick_ms);
            std::uint32_t attempt = 0;
            bool delivered = false;
            for (std::uint32_t path = 0; path <= neighbors.size(); ++path) {
                if (delivered && !(path > 0 && config.redundant_relay)) break;
                for (std::uint32_t a = 0; a < config.max_attempts; ++a) {
                    ++attempt;
                    const bool up = link_up(config, id, frame.seq, path, attempt);
                    DeliveryRecord rec{id, frame.seq, std::nullopt, attempt, DeliveryStatus::dropped, {}};
                    std::size_t retries = 0;
                    for (;;) {
                        try {
                            if (path == 0) {
                                if (up) {
                                    rec.status = tap.submit(frame, wire::encode_frame(frame)) == Ack::accepted
                                                     ? DeliveryStatus::delivered
                                                     : DeliveryStatus::duplicated;
                                }
                            } else {
                                rec = relay(config, frame, device_id(neighbors[path - 1]), LinkState{up, attempt}, tap);
                            }
                            break;
                        } catch (const Error& e) {
                            if (e.code() != Errc::transport) throw;
                            if (retries++ < options.connect_retries) continue;
                            rec.status = DeliveryStatus::dropped;
                            rec.error = std::string(e.what()) + " after " + std::to_string(retries) + " retries";
                            break;
                        }
                    }
                    out.deliveries.push_back(rec);
                    if (rec.status != DeliveryStatus::dropped) {
                        delivered = true;
                        break;
                    }
                }
            }
            out.outcomes.push_back({id, frame.t_ms, in_event(profile, frame.seq) ? 1 : 0});
            out.frames.push_back(std::move(frame));
        }
    };

    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(config.device_count);
    for (std::uint32_t w = 0; w < config.device_count; ++w) {
        threads.emplace_back([&, w] {
            try {
                run_device(w);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    FrameLog log;
    std::vector<std::pair<SensorFrame, std::string>> received;
    for (auto& d : logs) {
        log.frames.insert(log.frames.end(), d.frames.begin(), d.frames.end());
        log.deliveries.insert(log.deliveries.end(), d.deliveries.begin(), d.deliveries.end());
        log.outcomes.insert(log.outcomes.end(), d.outcomes.begin(), d.outcomes.end());
        received.insert(received.end(), d.received.begin(), d.received.end());
    }
    const auto order = [](const SensorFrame& f) { return std::tie(f.t_ms, f.device_id, f.seq); };
    std::ranges::stable_sort(log.frames, {}, order);
    std::ranges::stable_sort(log.outcomes, {}, [](const OutcomeLabel& o) { return std::tie(o.t_ms, o.patient_id); });
    std::ranges::stable_sort(received, {}, [&](const auto& r) { return order(r.first); });
    for (auto& r : received) log.received.push_back(std::move(r.second));
    return log;
}

}  // namespace cardiotwin::transport
