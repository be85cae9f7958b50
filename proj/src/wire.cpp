#include "cardiotwin/wire.hpp"

#include "cardiotwin/error.hpp"

#include <json.hpp>

namespace cardiotwin::wire {

using nlohmann::ordered_json;
using telemetry::SensorFrame;

std::string encode_frame(const SensorFrame& frame) {
    ordered_json j;
    j["v"] = kVersion;
    j["device_id"] = frame.device_id;
    j["seq"] = frame.seq;
    j["t_ms"] = frame.t_ms;
    ordered_json channels = ordered_json::object();
    for (std::size_t c = 0; c < telemetry::kChannelCount; ++c) {
        channels[std::string(telemetry::kChannelNames[c])] = frame.channels[c];
    }
    j["channels"] = std::move(channels);
    if (frame.context) {
        ordered_json ctx = ordered_json::object();
        if (frame.context->location) ctx["location"] = *frame.context->location;
        if (frame.context->activity) ctx["activity"] = *frame.context->activity;
        j["context"] = std::move(ctx);
    }
    return j.dump();
}

namespace {

template <typename T>
T required(const nlohmann::json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) fail(Errc::parse, std::string("missing field '") + key + "'");
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception&) {
        fail(Errc::parse, std::string("field '") + key + "' has the wrong type");
    }
}

}  // namespace

SensorFrame parse_frame(std::string_view line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        fail(Errc::parse, std::string("malformed frame: ") + e.what());
    }
    if (!j.is_object()) fail(Errc::parse, "frame is not a JSON object");

    const auto& v = j.find("v");
    if (v == j.end() || !v->is_number_integer()) fail(Errc::parse, "missing integer field 'v'");
    if (v->get<int>() != kVersion) {
        fail(Errc::version, "unsupported wire version " + v->dump());
    }

    SensorFrame frame;
    frame.device_id = required<std::string>(j, "device_id");
    if (!j.contains("seq") || !j["seq"].is_number_integer()) fail(Errc::parse, "missing integer field 'seq'");
    if (!j.contains("t_ms") || !j["t_ms"].is_number_integer()) fail(Errc::parse, "missing integer field 't_ms'");
    frame.seq = j["seq"].get<std::uint64_t>();
    frame.t_ms = j["t_ms"].get<std::int64_t>();

    const auto channels = j.find("channels");
    if (channels == j.end() || !channels->is_object()) fail(Errc::parse, "missing object field 'channels'");
    for (std::size_t c = 0; c < telemetry::kChannelCount; ++c) {
        const std::string name(telemetry::kChannelNames[c]);
        auto it = channels->find(name);
        if (it == channels->end() || !it->is_number()) {
            fail(Errc::parse, "missing numeric channel '" + name + "'");
        }
        frame.channels[c] = it->get<double>();
    }
    if (channels->size() != telemetry::kChannelCount) fail(Errc::parse, "unexpected extra channels");

    if (auto ctx = j.find("context"); ctx != j.end() && !ctx->is_null()) {
        if (!ctx->is_object()) fail(Errc::parse, "'context' must be an object");
        telemetry::FrameContext context;
        if (auto loc = ctx->find("location"); loc != ctx->end()) {
            if (!loc->is_string()) fail(Errc::parse, "context.location must be a string");
            context.location = loc->get<std::string>();
        }
        if (auto act = ctx->find("activity"); act != ctx->end()) {
            if (!act->is_string()) fail(Errc::parse, "context.activity must be a string");
            context.activity = act->get<std::string>();
        }
        frame.context = std::move(context);
    }
    return frame;
}

}  // namespace cardiotwin::wire
