#pragma once

// Cloud-side ingestion: decode, dedupe, running per-channel statistics and
// sigma normalization of raw sensor frames.

#include "cardiotwin/telemetry.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <string_view>

#include <json.hpp>

namespace cardiotwin::gateway {

using telemetry::kChannelCount;
using telemetry::SensorFrame;

inline constexpr double kSigmaFloor = 1e-6;
inline constexpr std::size_t kDefaultWindow = 256;

// Parses one wire line and enforces SensorFrame invariants.
// Errc::parse, Errc::version or Errc::validation on failure.
SensorFrame decode_frame(std::string_view line);

enum class DecodeStatus { accepted, duplicate };

struct DecodeResult {
    DecodeStatus status = DecodeStatus::accepted;
    SensorFrame frame;
};

// decode_frame plus (device_id, seq) dedupe. A repeated key yields
// DecodeStatus::duplicate rather than an error. Thread-safe.
class FrameDecoder {
public:
    DecodeResult decode(std::string_view line);

    std::size_t accepted() const;
    std::size_t duplicates() const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, std::set<std::uint64_t>, std::less<>> seen_;
    std::size_t accepted_ = 0;
    std::size_t duplicates_ = 0;
};

// Trailing-window mean and sample standard deviation (n - 1) per channel.
class ChannelStats {
public:
    explicit ChannelStats(std::size_t window = kDefaultWindow);

    void update(const SensorFrame& frame);

    std::size_t window() const noexcept { return window_; }
    std::size_t count() const noexcept { return samples_[0].size(); }
    double mean(std::size_t channel) const;
    // Raw sample standard deviation; 0 for fewer than two samples.
    double stddev(std::size_t channel) const;
    // Standard deviation floored to kSigmaFloor, the divisor used by normalize.
    double sigma(std::size_t channel) const;

private:
    std::size_t window_;
    std::array<std::deque<double>, kChannelCount> samples_;
};

ChannelStats& update_channel_stats(ChannelStats& stats, const SensorFrame& frame);

struct NormalizedFrame {
    std::string device_id;
    std::uint64_t seq = 0;
    std::int64_t t_ms = 0;
    telemetry::ChannelValues values{};
    telemetry::ChannelValues sigma_used{};
    std::array<bool, kChannelCount> low_variance{};

    bool any_low_variance() const noexcept;
};

// values[c] = raw[c] / max(sigma_c, eps). No centering.
// Errc::validation when the stats hold no samples.
NormalizedFrame normalize(const SensorFrame& frame, const ChannelStats& stats);

nlohmann::ordered_json to_json(const NormalizedFrame& frame);

struct IngestResult {
    DecodeStatus status = DecodeStatus::accepted;
    SensorFrame raw;
    std::optional<NormalizedFrame> normalized;  // set when accepted
};

// Decoder + per-device stats. Stats for one device are mutated by one
// stream at a time; distinct devices may ingest concurrently.
class Gateway {
public:
    using LineSink = std::function<void(std::string_view log, const std::string& line)>;

    explicit Gateway(std::size_t window = kDefaultWindow);

    // Decode, dedupe, update stats and normalize. Accepted frames are
    // reported to the log sink as ("raw", line) and ("normalized", line).
    IngestResult ingest(std::string_view line);
    IngestResult ingest(const SensorFrame& frame);

    void set_log_sink(LineSink sink) { sink_ = std::move(sink); }

    std::size_t accepted() const { return decoder_.accepted(); }
    std::size_t duplicates() const { return decoder_.duplicates(); }
    std::vector<std::string> devices() const;
    std::optional<ChannelStats> stats(std::string_view device) const;

private:
    struct DeviceState {
        std::mutex mutex;
        ChannelStats stats;
        explicit DeviceState(std::size_t w) : stats(w) {}
    };

    IngestResult accept(SensorFrame frame);
    DeviceState& device(const std::string& id);

    std::size_t window_;
    FrameDecoder decoder_;
    mutable std::shared_mutex devices_mutex_;
    std::map<std::string, std::unique_ptr<DeviceState>, std::less<>> devices_;
    LineSink sink_;
};

}  // namespace cardiotwin::gateway
