#pragma once

// HTTP read/feedback endpoints consumed by the physician console:
//   GET  /patients
//   GET  /patients/{id}/twin
//   GET  /predictions/stream?from=N&follow=0|1   (newline-delimited events)
//   POST /feedback

#include "cardiotwin/error.hpp"
#include "cardiotwin/fusion.hpp"
#include "cardiotwin/transport.hpp"

#include <memory>
#include <string>
#include <string_view>
#include <thread>

namespace httplib {
class Server;
}

namespace cardiotwin::console {

struct Reply {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

// Pure handlers; the HTTP server only routes to them.
Reply get_patients(const fusion::ServerState& state);
Reply get_twin(const fusion::ServerState& state, std::string_view patient_id);
Reply post_feedback(fusion::ServerState& state, std::string_view body);
// Events from index `from` as newline-delimited JSON.
Reply get_stream(const fusion::ServerState& state, std::size_t from);

// Maps error codes to HTTP statuses: parse 400, validation 422, reference
// 404, anything else 500.
int http_status(Errc code) noexcept;

class ConsoleServer {
public:
    // Binds immediately (port 0 picks one) and serves on a background thread.
    // Errc::transport when the address cannot be bound.
    ConsoleServer(fusion::ServerState& state, const transport::Endpoint& bind);
    ~ConsoleServer();

    ConsoleServer(const ConsoleServer&) = delete;
    ConsoleServer& operator=(const ConsoleServer&) = delete;

    std::uint16_t port() const noexcept { return port_; }
    void stop();

private:
    fusion::ServerState& state_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    std::uint16_t port_ = 0;
};

}  // namespace cardiotwin::console
