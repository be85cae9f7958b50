#pragma once

// Newline-delimited JSON wire format for sensor frames (version 1).

#include "cardiotwin/telemetry.hpp"

#include <string>
#include <string_view>

namespace cardiotwin::wire {

inline constexpr int kVersion = 1;

// Canonical encoding: v, device_id, seq, t_ms, channels, context. No newline.
std::string encode_frame(const telemetry::SensorFrame& frame);

// Structural parse only. Errc::parse on malformed JSON or missing/mistyped
// fields, Errc::version when v != 1. Range checks are left to the caller.
telemetry::SensorFrame parse_frame(std::string_view line);

}  // namespace cardiotwin::wire
