#include "cardiotwin/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <memory>

namespace cardiotwin::logging {

namespace {

spdlog::level::level_enum to_spd(Level level) {
    switch (level) {
        case Level::trace: return spdlog::level::trace;
        case Level::debug: return spdlog::level::debug;
        case Level::info: return spdlog::level::info;
        case Level::warn: return spdlog::level::warn;
        case Level::error: return spdlog::level::err;
    }
    return spdlog::level::info;
}

std::shared_ptr<spdlog::logger> logger() {
    static const std::shared_ptr<spdlog::logger> instance = [] {
        auto sink = std::make_shared<spdlog::sinks::stderr_sink_mt>();
        auto l = std::make_shared<spdlog::logger>("cardiotwin", std::move(sink));
        l->set_pattern("%v");
        const char* env = std::getenv("CARDIOTWIN_LOG_LEVEL");
        l->set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
        l->flush_on(spdlog::level::trace);
        return l;
    }();
    return instance;
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t secs = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[40];
    const std::size_t n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    std::snprintf(buf + n, sizeof buf - n, ".%03dZ", static_cast<int>(ms));
    return buf;
}

}  // namespace

bool enabled(Level level) noexcept { return logger()->should_log(to_spd(level)); }

void write(Level level, std::string_view event, const nlohmann::ordered_json& fields) {
    const auto lvl = to_spd(level);
    auto l = logger();
    if (!l->should_log(lvl)) return;
    nlohmann::ordered_json line;
    line["ts"] = timestamp();
    line["level"] = spdlog::level::to_string_view(lvl).data();
    line["event"] = event;
    for (const auto& [k, v] : fields.items()) line[k] = v;
    l->log(lvl, "{}", line.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace));
}

}  // namespace cardiotwin::logging
