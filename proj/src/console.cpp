#include "cardiotwin/console.hpp"

#include "cardiotwin/error.hpp"
#include "cardiotwin/log.hpp"

#include <httplib.h>

#include <chrono>
#include <memory>

namespace cardiotwin::console {

namespace {

Reply error_reply(const Error& e) {
    nlohmann::ordered_json j{{"error", errc_name(e.code())}, {"message", e.what()}};
    return {http_status(e.code()), "application/json", j.dump()};
}

void send(httplib::Response& res, const Reply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, reply.content_type);
}

}  // namespace

int http_status(Errc code) noexcept {
    switch (code) {
        case Errc::parse: return 400;
        case Errc::validation: return 422;
        case Errc::reference: return 404;
        default: return 500;
    }
}

Reply get_patients(const fusion::ServerState& state) {
    auto list = nlohmann::ordered_json::array();
    for (const auto& p : state.patients()) list.push_back(fusion::to_json(p));
    return {200, "application/json", nlohmann::ordered_json{{"patients", std::move(list)}}.dump()};
}

Reply get_twin(const fusion::ServerState& state, std::string_view patient_id) {
    try {
        return {200, "application/json", state.twin_snapshot(patient_id).dump()};
    } catch (const Error& e) {
        return error_reply(e);
    }
}

Reply post_feedback(fusion::ServerState& state, std::string_view body) {
    try {
        const auto j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded()) fail(Errc::parse, "feedback body is not JSON");
        const auto result = state.apply_feedback(fusion::feedback_from_json(j));
        return {200, "application/json", fusion::to_json(result).dump()};
    } catch (const Error& e) {
        return error_reply(e);
    }
}

Reply get_stream(const fusion::ServerState& state, std::size_t from) {
    Reply r{200, "application/x-ndjson", {}};
    for (const auto& e : state.events_from(from)) {
        r.body += fusion::encode_event(e);
        r.body += '\n';
    }
    return r;
}

ConsoleServer::ConsoleServer(fusion::ServerState& state, const transport::Endpoint& bind)
    : state_(state), server_(std::make_unique<httplib::Server>()) {
    auto& svr = *server_;
    svr.Get("/patients", [this](const httplib::Request&, httplib::Response& res) { send(res, get_patients(state_)); });
    svr.Get(R"(/patients/([^/]+)/twin)", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, get_twin(state_, req.matches[1].str()));
    });
    svr.Post("/feedback", [this](const httplib::Request& req, httplib::Response& res) {
        const Reply reply = post_feedback(state_, req.body);
        logging::info("feedback", {{"status", reply.status}, {"body", req.body}});
        send(res, reply);
    });
    svr.Get("/predictions/stream", [this](const httplib::Request& req, httplib::Response& res) {
        std::size_t from = 0;
        bool follow = false;
        try {
            if (req.has_param("from")) from = std::stoull(req.get_param_value("from"));
            if (req.has_param("follow")) follow = req.get_param_value("follow") == "1";
        } catch (const std::exception&) {
            send(res, error_reply(Error(Errc::parse, "bad stream query")));
            return;
        }
        if (!follow) {
            send(res, get_stream(state_, from));
            return;
        }
        auto next = std::make_shared<std::size_t>(from);
        res.set_chunked_content_provider("application/x-ndjson", [this, next](std::size_t, httplib::DataSink& sink) {
            const auto events = state_.events_from(*next, std::chrono::milliseconds(250));
            for (const auto& e : events) {
                const std::string line = fusion::encode_event(e) + "\n";
                if (!sink.write(line.data(), line.size())) return false;
            }
            *next += events.size();
            if (events.empty() && state_.closed()) {
                sink.done();
                return true;
            }
            return sink.is_writable();
        });
    });

    const std::string host = bind.host.empty() ? "127.0.0.1" : bind.host;
    if (bind.port == 0) {
        const int port = svr.bind_to_any_port(host);
        if (port < 0) fail(Errc::transport, "console cannot bind " + host);
        port_ = static_cast<std::uint16_t>(port);
    } else {
        if (!svr.bind_to_port(host, bind.port)) {
            fail(Errc::transport, "console cannot bind " + host + ":" + std::to_string(bind.port));
        }
        port_ = bind.port;
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    logging::info("console_listening", {{"host", host}, {"port", port_}});
}

ConsoleServer::~ConsoleServer() { stop(); }

void ConsoleServer::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace cardiotwin::console
