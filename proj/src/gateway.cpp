#include "cardiotwin/gateway.hpp"

#include "cardiotwin/error.hpp"
#include "cardiotwin/wire.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cardiotwin::gateway {

SensorFrame decode_frame(std::string_view line) {
    SensorFrame frame = wire::parse_frame(line);
    telemetry::validate(frame);
    return frame;
}

DecodeResult FrameDecoder::decode(std::string_view line) {
    DecodeResult result{DecodeStatus::accepted, decode_frame(line)};
    std::lock_guard lock(mutex_);
    auto& seqs = seen_[result.frame.device_id];
    if (!seqs.insert(result.frame.seq).second) {
        result.status = DecodeStatus::duplicate;
        ++duplicates_;
    } else {
        ++accepted_;
    }
    return result;
}

std::size_t FrameDecoder::accepted() const {
    std::lock_guard lock(mutex_);
    return accepted_;
}

std::size_t FrameDecoder::duplicates() const {
    std::lock_guard lock(mutex_);
    return duplicates_;
}

ChannelStats::ChannelStats(std::size_t window) : window_(window) {
    if (window_ == 0) fail(Errc::config, "stats window must be positive");
}

void ChannelStats::update(const SensorFrame& frame) {
    for (std::size_t c = 0; c < kChannelCount; ++c) {
        auto& buf = samples_[c];
        buf.push_back(frame.channels[c]);
        if (buf.size() > window_) buf.pop_front();
    }
}

double ChannelStats::mean(std::size_t channel) const {
    const auto& buf = samples_.at(channel);
    if (buf.empty()) return 0.0;
    return std::accumulate(buf.begin(), buf.end(), 0.0) / static_cast<double>(buf.size());
}

double ChannelStats::stddev(std::size_t channel) const {
    const auto& buf = samples_.at(channel);
    if (buf.size() < 2) return 0.0;
    const double m = mean(channel);
    double ss = 0.0;
    for (double v : buf) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(buf.size() - 1));
}

double ChannelStats::sigma(std::size_t channel) const {
    return std::max(stddev(channel), kSigmaFloor);
}

ChannelStats& update_channel_stats(ChannelStats& stats, const SensorFrame& frame) {
    stats.update(frame);
    return stats;
}

bool NormalizedFrame::any_low_variance() const noexcept {
    return std::ranges::any_of(low_variance, [](bool b) { return b; });
}

NormalizedFrame normalize(const SensorFrame& frame, const ChannelStats& stats) {
    if (stats.count() == 0) fail(Errc::validation, "channel stats hold no samples for " + frame.device_id);
    NormalizedFrame out;
    out.device_id = frame.device_id;
    out.seq = frame.seq;
    out.t_ms = frame.t_ms;
    for (std::size_t c = 0; c < kChannelCount; ++c) {
        const double raw_sigma = stats.stddev(c);
        const double s = std::max(raw_sigma, kSigmaFloor);
        out.sigma_used[c] = s;
        out.low_variance[c] = raw_sigma <= kSigmaFloor;
        out.values[c] = frame.channels[c] / s;
    }
    return out;
}

nlohmann::ordered_json to_json(const NormalizedFrame& frame) {
    nlohmann::ordered_json j;
    j["device_id"] = frame.device_id;
    j["seq"] = frame.seq;
    j["t_ms"] = frame.t_ms;
    nlohmann::ordered_json values = nlohmann::ordered_json::object();
    nlohmann::ordered_json sigma = nlohmann::ordered_json::object();
    for (std::size_t c = 0; c < kChannelCount; ++c) {
        const std::string name(telemetry::kChannelNames[c]);
        values[name] = frame.values[c];
        sigma[name] = frame.sigma_used[c];
    }
    j["values"] = std::move(values);
    j["sigma_used"] = std::move(sigma);
    j["low_variance"] = frame.any_low_variance();
    return j;
}

Gateway::Gateway(std::size_t window) : window_(window) {
    if (window_ == 0) fail(Errc::config, "stats window must be positive");
}

Gateway::DeviceState& Gateway::device(const std::string& id) {
    {
        std::shared_lock lock(devices_mutex_);
        if (auto it = devices_.find(id); it != devices_.end()) return *it->second;
    }
    std::unique_lock lock(devices_mutex_);
    auto [it, inserted] = devices_.try_emplace(id, nullptr);
    if (inserted) it->second = std::make_unique<DeviceState>(window_);
    return *it->second;
}

IngestResult Gateway::accept(SensorFrame frame) {
    IngestResult result;
    auto& dev = device(frame.device_id);
    {
        std::lock_guard lock(dev.mutex);
        dev.stats.update(frame);
        result.normalized = normalize(frame, dev.stats);
    }
    if (sink_) {
        sink_("raw", wire::encode_frame(frame));
        sink_("normalized", to_json(*result.normalized).dump());
    }
    result.raw = std::move(frame);
    return result;
}

IngestResult Gateway::ingest(std::string_view line) {
    auto decoded = decoder_.decode(line);
    if (decoded.status == DecodeStatus::duplicate) {
        return IngestResult{DecodeStatus::duplicate, std::move(decoded.frame), std::nullopt};
    }
    return accept(std::move(decoded.frame));
}

IngestResult Gateway::ingest(const SensorFrame& frame) {
    return ingest(wire::encode_frame(frame));
}

std::vector<std::string> Gateway::devices() const {
    std::shared_lock lock(devices_mutex_);
    std::vector<std::string> ids;
    for (const auto& [id, _] : devices_) ids.push_back(id);
    return ids;
}

std::optional<ChannelStats> Gateway::stats(std::string_view device) const {
    std::shared_lock lock(devices_mutex_);
    auto it = devices_.find(device);
    if (it == devices_.end()) return std::nullopt;
    std::lock_guard dev_lock(it->second->mutex);
    return it->second->stats;
}

}  // namespace cardiotwin::gateway
