#pragma once

// Diagnostic log: one JSON object per line on stderr. The threshold comes
// from CARDIOTWIN_LOG_LEVEL (trace, debug, info, warn, error, off; default warn).

#include <string_view>

#include <json.hpp>

namespace cardiotwin::logging {

enum class Level { trace, debug, info, warn, error };

bool enabled(Level level) noexcept;
void write(Level level, std::string_view event, const nlohmann::ordered_json& fields = nlohmann::ordered_json::object());

inline void debug(std::string_view event, const nlohmann::ordered_json& fields = nlohmann::ordered_json::object()) {
    write(Level::debug, event, fields);
}
inline void info(std::string_view event, const nlohmann::ordered_json& fields = nlohmann::ordered_json::object()) {
    write(Level::info, event, fields);
}
inline void warn(std::string_view event, const nlohmann::ordered_json& fields = nlohmann::ordered_json::object()) {
    write(Level::warn, event, fields);
}
inline void error(std::string_view event, const nlohmann::ordered_json& fields = nlohmann::ordered_json::object()) {
    write(Level::error, event, fields);
}

}  // namespace cardiotwin::logging
