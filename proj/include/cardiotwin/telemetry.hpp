#pragma once

// Simulated wearable fleet: frame synthesis, transmission schedule and
// store-and-forward relaying through neighbor devices.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cardiotwin::telemetry {

inline constexpr std::size_t kChannelCount = 5;

enum Channel : std::size_t {
    kHeartRate = 0,
    kSystolic = 1,
    kDiastolic = 2,
    kSpO2 = 3,
    kActivity = 4,
};

inline constexpr std::array<std::string_view, kChannelCount> kChannelNames = {
    "hr_bpm", "sbp_mmhg", "dbp_mmhg", "spo2_pct", "activity_level"};

using ChannelValues = std::array<double, kChannelCount>;

struct FrameContext {
    std::optional<std::string> location;
    std::optional<std::string> activity;

    bool operator==(const FrameContext&) const = default;
};

struct SensorFrame {
    std::string device_id;
    std::uint64_t seq = 0;
    std::int64_t t_ms = 0;
    ChannelValues channels{};
    std::optional<FrameContext> context;

    bool operator==(const SensorFrame&) const = default;
};

// Throws Errc::validation when a channel is outside its physiological range.
void validate(const SensorFrame& frame);

// A scheduled abnormal regime. Vitals ramp toward baseline + shift over
// `ramp_ticks`; every tick in [start_tick, end_tick) carries outcome label 1.
struct EventWindow {
    std::uint64_t start_tick = 0;
    std::uint64_t end_tick = 0;
    std::uint64_t ramp_ticks = 10;
    ChannelValues shift{};

    bool contains(std::uint64_t tick) const noexcept {
        return tick >= start_tick && tick < end_tick;
    }
};

struct PatientProfile {
    ChannelValues baseline{70.0, 120.0, 80.0, 98.0, 0.2};
    ChannelValues noise_scale{2.0, 3.0, 2.0, 0.5, 0.05};
    double reversion = 0.9;  // AR(1) coefficient of the mean-reverting walk
    std::vector<EventWindow> events;
    std::string location = "ward";
};

// Throws Errc::config for non-positive baselines or negative noise.
void validate(const PatientProfile& profile);

bool in_event(const PatientProfile& profile, std::uint64_t tick) noexcept;

struct FleetConfig {
    std::uint32_t device_count = 1;
    std::vector<std::vector<std::uint32_t>> neighbor_map;  // by device index
    std::uint64_t horizon_ticks = 1;
    std::uint32_t tick_ms = 250;
    std::uint64_t seed = 0;
    std::vector<PatientProfile> patient_profiles;  // one per device
    double drop_rate = 0.0;
    std::uint32_t max_attempts = 8;  // per path
    bool redundant_relay = false;
};

// Throws Errc::config on any structural problem (self-neighbors, dangling
// neighbor indices, profile count mismatch, bad rates).
void validate(const FleetConfig& config);

std::string device_id(std::uint32_t index);
std::optional<std::uint32_t> device_index(std::string_view id);

// Default profile for device `index`: baseline jitter plus a deterministic
// schedule of abnormal event windows over the horizon.
PatientProfile default_profile(std::uint32_t index, std::uint64_t horizon_ticks, std::uint64_t seed);

// Builds a fleet with default profiles and an empty neighbor map.
FleetConfig make_fleet(std::uint32_t devices, std::uint64_t ticks, std::uint32_t tick_ms,
                       std::uint64_t seed, double drop_rate = 0.0);

FleetConfig fleet_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FleetConfig& config);

SensorFrame synth_frame(std::string_view device_id, std::uint64_t tick, const PatientProfile& profile,
                        std::uint64_t seed, std::uint32_t tick_ms = 250);

enum class DeliveryStatus { delivered, dropped, duplicated };

std::string_view to_string(DeliveryStatus status) noexcept;

struct DeliveryRecord {
    std::string device_id;
    std::uint64_t seq = 0;
    std::optional<std::string> via;  // empty = direct
    std::uint32_t attempt = 1;
    DeliveryStatus status = DeliveryStatus::delivered;
    std::string error;

    bool operator==(const DeliveryRecord&) const = default;
};

// The gateway side of a link. `submit` returns the ack for one wire line.
enum class Ack { accepted, duplicate };

class FrameSink {
public:
    virtual ~FrameSink() = default;
    virtual Ack submit(const SensorFrame& frame, std::string_view line) = 0;
};

// In-memory gateway stand-in with (device_id, seq) dedupe; records every
// line it receives, duplicates included.
class RecordingSink final : public FrameSink {
public:
    Ack submit(const SensorFrame& frame, std::string_view line) override;

    const std::vector<std::string>& received() const noexcept { return received_; }
    const std::vector<SensorFrame>& accepted() const noexcept { return accepted_; }

private:
    std::vector<std::string> received_;
    std::vector<SensorFrame> accepted_;
    std::vector<std::pair<std::string, std::uint64_t>> seen_;  // kept sorted
};

// Simulated link availability: a pure function of (seed, device, seq, path,
// attempt) that is down with probability drop_rate.
bool link_up(const FleetConfig& config, std::string_view device, std::uint64_t seq, std::uint32_t path,
             std::uint32_t attempt);

struct LinkState {
    bool up = true;
    std::uint32_t attempt = 1;
};

// Store-and-forward via `neighbor_id`. Throws Errc::routing when the neighbor
// is not in the sender's neighbor map.
DeliveryRecord relay(const FleetConfig& config, const SensorFrame& frame, std::string_view neighbor_id,
                     const LinkState& link, FrameSink& sink);

struct OutcomeLabel {
    std::string patient_id;
    std::int64_t t_ms = 0;
    int outcome = 0;
};

struct FrameLog {
    std::vector<SensorFrame> frames;         // generated, ordered by (t_ms, device_id, seq)
    std::vector<DeliveryRecord> deliveries;  // in transmission order
    std::vector<std::string> received;       // wire lines seen by the gateway, duplicates included
    std::vector<OutcomeLabel> outcomes;      // ground truth per generated frame

    std::size_t delivered_count() const;
    std::size_t permanently_dropped() const;
};

// Deterministic replay-mode run of the whole fleet against `sink`.
FrameLog run_fleet(const FleetConfig& config, FrameSink& sink);
FrameLog run_fleet(const FleetConfig& config);

// Writes frames.ndjson (received lines in (t_ms, device_id, seq) order),
// deliveries.ndjson and outcomes.ndjson into `dir`.
void write_frame_log(const FrameLog& log, const std::filesystem::path& dir);

std::string frame_log_hash(const FrameLog& log);

nlohmann::ordered_json to_json(const DeliveryRecord& record);
nlohmann::ordered_json to_json(const OutcomeLabel& label);

}  // namespace cardiotwin::telemetry
