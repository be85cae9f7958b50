#include "cardiotwin/telemetry.hpp"

#include "cardiotwin/error.hpp"
#include "cardiotwin/util.hpp"
#include "cardiotwin/wire.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <tuple>

namespace cardiotwin::telemetry {

namespace {

constexpr int kNoiseTaps = 32;

std::uint64_t noise_key(std::uint64_t seed, std::uint64_t device_hash, std::int64_t tick, std::size_t channel) {
    return hash_combine(hash_combine(hash_combine(seed, device_hash), static_cast<std::uint64_t>(tick)),
                        static_cast<std::uint64_t>(channel));
}

std::string activity_label(double level) {
    if (level < 0.3) return "rest";
    if (level < 0.7) return "walking";
    return "exercise";
}

auto frame_order(const SensorFrame& f) { return std::tie(f.t_ms, f.device_id, f.seq); }

}  // namespace

void validate(const SensorFrame& frame) {
    const auto& ch = frame.channels;
    for (double v : ch) {
        if (!std::isfinite(v)) fail(Errc::validation, "non-finite channel value in " + frame.device_id);
    }
    if (!(ch[kHeartRate] > 0.0 && ch[kHeartRate] <= 300.0)) {
        fail(Errc::validation, "hr_bpm out of (0, 300]");
    }
    if (!(ch[kDiastolic] > 0.0 && ch[kSystolic] > ch[kDiastolic])) {
        fail(Errc::validation, "blood pressure must satisfy sbp > dbp > 0");
    }
    if (!(ch[kSpO2] > 0.0 && ch[kSpO2] <= 100.0)) fail(Errc::validation, "spo2_pct out of (0, 100]");
    if (!(ch[kActivity] >= 0.0 && ch[kActivity] <= 1.0)) fail(Errc::validation, "activity_level out of [0, 1]");
    if (frame.device_id.empty()) fail(Errc::validation, "empty device_id");
}

void validate(const PatientProfile& profile) {
    for (std::size_t c = 0; c < kChannelCount; ++c) {
        const bool allow_zero = c == kActivity;
        const double b = profile.baseline[c];
        if (!std::isfinite(b) || b < 0.0 || (!allow_zero && b == 0.0)) {
            fail(Errc::config, "profile baseline for " + std::string(kChannelNames[c]) + " must be positive");
        }
        if (!(profile.noise_scale[c] >= 0.0)) {
            fail(Errc::config, "profile noise scale for " + std::string(kChannelNames[c]) + " must be >= 0");
        }
    }
    if (profile.baseline[kSystolic] <= profile.baseline[kDiastolic]) {
        fail(Errc::config, "profile baseline requires sbp > dbp");
    }
    if (!(profile.reversion >= 0.0 && profile.reversion < 1.0)) {
        fail(Errc::config, "profile reversion must lie in [0, 1)");
    }
    for (const auto& ev : profile.events) {
        if (ev.end_tick < ev.start_tick) fail(Errc::config, "event window ends before it starts");
    }
}

bool in_event(const PatientProfile& profile, std::uint64_t tick) noexcept {
    return std::any_of(profile.events.begin(), profile.events.end(),
                       [tick](const EventWindow& ev) { return ev.contains(tick); });
}

void validate(const FleetConfig& config) {
    if (config.horizon_ticks == 0) fail(Errc::config, "horizon_ticks must be positive");
    if (config.tick_ms == 0) fail(Errc::config, "tick_ms must be positive");
    if (!(config.drop_rate >= 0.0 && config.drop_rate < 1.0)) fail(Errc::config, "drop_rate must lie in [0, 1)");
    if (config.max_attempts == 0) fail(Errc::config, "max_attempts must be positive");
    if (config.patient_profiles.size() != config.device_count) {
        fail(Errc::config, "need exactly one patient profile per device");
    }
    if (!config.neighbor_map.empty() && config.neighbor_map.size() != config.device_count) {
        fail(Errc::config, "neighbor_map must list every device or be empty");
    }
    for (std::size_t d = 0; d < config.neighbor_map.size(); ++d) {
        for (std::uint32_t n : config.neighbor_map[d]) {
            if (n >= config.device_count) fail(Errc::config, "neighbor_map references unknown device");
            if (n == d) fail(Errc::config, device_id(static_cast<std::uint32_t>(d)) + " lists itself as neighbor");
        }
    }
    for (const auto& p : config.patient_profiles) validate(p);
}

std::string device_id(std::uint32_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "dev-%04u", index + 1);
    return buf;
}

std::optional<std::uint32_t> device_index(std::string_view id) {
    if (!id.starts_with("dev-")) return std::nullopt;
    id.remove_prefix(4);
    std::uint32_t n = 0;
    auto [ptr, ec] = std::from_chars(id.data(), id.data() + id.size(), n);
    if (ec != std::errc{} || ptr != id.data() + id.size() || n == 0) return std::nullopt;
    return n - 1;
}

PatientProfile default_profile(std::uint32_t index, std::uint64_t horizon_ticks, std::uint64_t seed) {
    const std::uint64_t base = hash_combine(seed ^ 0x70726f66ULL, index);
    auto draw = [&, k = std::uint64_t{0}](double lo, double hi) mutable {
        return lo + (hi - lo) * unit_uniform(hash_combine(base, k++));
    };

    PatientProfile p;
    p.baseline = {draw(60, 85), draw(110, 135), draw(68, 85), draw(96, 99), draw(0.1, 0.4)};
    p.location = "ward-" + std::string(1, static_cast<char>('A' + index % 4));

    // Alternate normal stretches with abnormal windows across the horizon.
    std::uint64_t t = 1 + static_cast<std::uint64_t>(draw(40, 160));
    while (t < horizon_ticks) {
        EventWindow ev;
        ev.start_tick = t;
        ev.end_tick = std::min(horizon_ticks + 1, t + static_cast<std::uint64_t>(draw(40, 120)));
        ev.ramp_ticks = 8;
        ev.shift = {draw(35, 55), -draw(25, 40), -draw(15, 25), -draw(5, 10), -0.1};
        p.events.push_back(ev);
        t = ev.end_tick + static_cast<std::uint64_t>(draw(80, 250));
    }
    return p;
}

FleetConfig make_fleet(std::uint32_t devices, std::uint64_t ticks, std::uint32_t tick_ms, std::uint64_t seed,
                       double drop_rate) {
    FleetConfig cfg;
    cfg.device_count = devices;
    cfg.horizon_ticks = ticks;
    cfg.tick_ms = tick_ms;
    cfg.seed = seed;
    cfg.drop_rate = drop_rate;
    cfg.patient_profiles.reserve(devices);
    for (std::uint32_t d = 0; d < devices; ++d) cfg.patient_profiles.push_back(default_profile(d, ticks, seed));
    return cfg;
}

FleetConfig fleet_from_json(const nlohmann::json& j) {
    try {
        const auto devices = j.value("devices", 1u);
        const auto ticks = j.value("ticks", std::uint64_t{100});
        const auto tick_ms = j.value("tick_ms", 250u);
        const auto seed = j.value("seed", std::uint64_t{0});
        FleetConfig cfg = make_fleet(devices, ticks, tick_ms, seed, j.value("drop_rate", 0.0));
        cfg.max_attempts = j.value("max_attempts", cfg.max_attempts);
        cfg.redundant_relay = j.value("redundant_relay", false);
        if (auto it = j.find("neighbors"); it != j.end()) {
            cfg.neighbor_map.assign(devices, {});
            for (const auto& [id, list] : it->items()) {
                auto src = device_index(id);
                if (!src || *src >= devices) fail(Errc::config, "neighbors: unknown device " + id);
                for (const auto& n : list) {
                    auto dst = device_index(n.get<std::string>());
                    if (!dst) fail(Errc::config, "neighbors: unknown device " + n.get<std::string>());
                    cfg.neighbor_map[*src].push_back(*dst);
                }
            }
        }
        validate(cfg);
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::config, std::string("fleet config: ") + e.what());
    }
}

nlohmann::json to_json(const FleetConfig& config) {
    nlohmann::json j;
    j["devices"] = config.device_count;
    j["ticks"] = config.horizon_ticks;
    j["tick_ms"] = config.tick_ms;
    j["seed"] = config.seed;
    j["drop_rate"] = config.drop_rate;
    j["max_attempts"] = config.max_attempts;
    j["redundant_relay"] = config.redundant_relay;
    if (!config.neighbor_map.empty()) {
        nlohmann::json n = nlohmann::json::object();
        for (std::uint32_t d = 0; d < config.neighbor_map.size(); ++d) {
            nlohmann::json list = nlohmann::json::array();
            for (auto m : config.neighbor_map[d]) list.push_back(device_id(m));
            n[device_id(d)] = std::move(list);
        }
        j["neighbors"] = std::move(n);
    }
    return j;
}

SensorFrame synth_frame(std::string_view device_id, std::uint64_t tick, const PatientProfile& profile,
                        std::uint64_t seed, std::uint32_t tick_ms) {
    validate(profile);
    const std::uint64_t dev_hash = fnv1a64(device_id);
    const double gain = std::sqrt(1.0 - profile.reversion * profile.reversion);

    ChannelValues v = profile.baseline;
    for (const auto& ev : profile.events) {
        if (!ev.contains(tick)) continue;
        const double ramp =
            ev.ramp_ticks == 0 ? 1.0
                               : std::min(1.0, static_cast<double>(tick - ev.start_tick + 1) / ev.ramp_ticks);
        for (std::size_t c = 0; c < kChannelCount; ++c) v[c] += ramp * ev.shift[c];
    }
    for (std::size_t c = 0; c < kChannelCount; ++c) {
        if (profile.noise_scale[c] == 0.0) continue;
        double acc = 0.0;
        double w = 1.0;
        for (int k = 0; k < kNoiseTaps; ++k) {
            acc += w * unit_gaussian(noise_key(seed, dev_hash, static_cast<std::int64_t>(tick) - k, c));
            w *= profile.reversion;
        }
        v[c] += profile.noise_scale[c] * gain * acc;
    }

    v[kHeartRate] = std::clamp(v[kHeartRate], 20.0, 300.0);
    v[kSpO2] = std::clamp(v[kSpO2], 1.0, 100.0);
    v[kActivity] = std::clamp(v[kActivity], 0.0, 1.0);
    v[kSystolic] = std::max(v[kSystolic], 40.0);
    v[kDiastolic] = std::clamp(v[kDiastolic], 20.0, v[kSystolic] - 5.0);

    SensorFrame frame;
    frame.device_id = std::string(device_id);
    frame.seq = tick;
    frame.t_ms = static_cast<std::int64_t>(tick) * tick_ms;
    frame.channels = v;
    frame.context = FrameContext{profile.location, activity_label(v[kActivity])};
    return frame;
}

std::string_view to_string(DeliveryStatus status) noexcept {
    switch (status) {
        case DeliveryStatus::delivered: return "delivered";
        case DeliveryStatus::dropped: return "dropped";
        case DeliveryStatus::duplicated: return "duplicated";
    }
    return "unknown";
}

Ack RecordingSink::submit(const SensorFrame& frame, std::string_view line) {
    received_.emplace_back(line);
    auto key = std::make_pair(frame.device_id, frame.seq);
    auto it = std::lower_bound(seen_.begin(), seen_.end(), key);
    if (it != seen_.end() && *it == key) return Ack::duplicate;
    seen_.insert(it, std::move(key));
    accepted_.push_back(frame);
    return Ack::accepted;
}

bool link_up(const FleetConfig& config, std::string_view device, std::uint64_t seq, std::uint32_t path,
             std::uint32_t attempt) {
    if (config.drop_rate <= 0.0) return true;
    const std::uint64_t key =
        hash_combine(hash_combine(hash_combine(config.seed ^ 0x6c696e6bULL, fnv1a64(device)), seq),
                     (static_cast<std::uint64_t>(path) << 32) | attempt);
    return unit_uniform(key) >= config.drop_rate;
}

DeliveryRecord relay(const FleetConfig& config, const SensorFrame& frame, std::string_view neighbor_id,
                     const LinkState& link, FrameSink& sink) {
    const auto sender = device_index(frame.device_id);
    const auto neighbor = device_index(neighbor_id);
    const bool routed = sender && neighbor && *sender < config.neighbor_map.size() &&
                        std::ranges::find(config.neighbor_map[*sender], *neighbor) !=
                            config.neighbor_map[*sender].end();
    if (!routed) {
        fail(Errc::routing, std::string(neighbor_id) + " is not a neighbor of " + frame.device_id);
    }

    DeliveryRecord rec{frame.device_id, frame.seq, std::string(neighbor_id), link.attempt,
                       DeliveryStatus::dropped, {}};
    if (!link.up) return rec;
    rec.status = sink.submit(frame, wire::encode_frame(frame)) == Ack::accepted ? DeliveryStatus::delivered
                                                                                : DeliveryStatus::duplicated;
    return rec;
}

std::size_t FrameLog::delivered_count() const {
    std::vector<std::pair<std::string_view, std::uint64_t>> keys;
    for (const auto& d : deliveries) {
        if (d.status == DeliveryStatus::delivered) keys.emplace_back(d.device_id, d.seq);
    }
    std::ranges::sort(keys);
    return static_cast<std::size_t>(std::unique(keys.begin(), keys.end()) - keys.begin());
}

std::size_t FrameLog::permanently_dropped() const {
    std::vector<std::pair<std::string_view, std::uint64_t>> ok;
    for (const auto& d : deliveries) {
        if (d.status != DeliveryStatus::dropped) ok.emplace_back(d.device_id, d.seq);
    }
    std::ranges::sort(ok);
    std::size_t dropped = 0;
    for (const auto& f : frames) {
        if (!std::binary_search(ok.begin(), ok.end(), std::make_pair(std::string_view(f.device_id), f.seq))) {
            ++dropped;
        }
    }
    return dropped;
}

FrameLog run_fleet(const FleetConfig& config, FrameSink& sink) {
    validate(config);
    FrameLog log;
    log.frames.reserve(static_cast<std::size_t>(config.device_count) * config.horizon_ticks);

    std::vector<std::pair<SensorFrame, std::string>> received;
    struct Tap final : FrameSink {
        FrameSink* inner;
        std::vector<std::pair<SensorFrame, std::string>>* out;
        Ack submit(const SensorFrame& f, std::string_view line) override {
            out->emplace_back(f, std::string(line));
            return inner->submit(f, line);
        }
    } tap;
    tap.inner = &sink;
    tap.out = &received;

    for (std::uint32_t w = 0; w < config.device_count; ++w) {
        const std::string id = device_id(w);
        const auto& profile = config.patient_profiles[w];
        std::vector<SensorFrame> frames;
        frames.reserve(config.horizon_ticks);
        for (std::uint64_t t = 1; t <= config.horizon_ticks; ++t) {
            frames.push_back(synth_frame(id, t, profile, config.seed, config.tick_ms));
        }
        std::vector<bool> delivered(frames.size(), false);
        std::vector<std::uint32_t> attempts(frames.size(), 0);

        const std::vector<std::uint32_t> no_neighbors;
        const auto& neighbors = w < config.neighbor_map.size() ? config.neighbor_map[w] : no_neighbors;

        // Path 0 is the direct uplink; path n relays through the n-th neighbor.
        for (std::uint32_t path = 0; path <= neighbors.size(); ++path) {
            for (std::size_t i = 0; i < frames.size(); ++i) {
                if (path > 0 && delivered[i] && !config.redundant_relay) continue;
                const auto& frame = frames[i];
                for (std::uint32_t a = 0; a < config.max_attempts; ++a) {
                    const std::uint32_t attempt = ++attempts[i];
                    const bool up = link_up(config, id, frame.seq, path, attempt);
                    DeliveryRecord rec;
                    if (path == 0) {
                        rec = {id, frame.seq, std::nullopt, attempt, DeliveryStatus::dropped, {}};
                        if (up) {
                            rec.status = tap.submit(frame, wire::encode_frame(frame)) == Ack::accepted
                                             ? DeliveryStatus::delivered
                                             : DeliveryStatus::duplicated;
                        }
                    } else {
                        rec = relay(config, frame, device_id(neighbors[path - 1]), LinkState{up, attempt}, tap);
                    }
                    log.deliveries.push_back(rec);
                    if (rec.status != DeliveryStatus::dropped) {
                        delivered[i] = true;
                        break;
                    }
                }
            }
        }

        for (auto& f : frames) {
            log.outcomes.push_back({f.device_id, f.t_ms, in_event(profile, f.seq) ? 1 : 0});
            log.frames.push_back(std::move(f));
        }
    }

    std::ranges::stable_sort(log.frames, {}, [](const SensorFrame& f) { return frame_order(f); });
    std::ranges::stable_sort(log.outcomes, {}, [](const OutcomeLabel& o) { return std::tie(o.t_ms, o.patient_id); });
    std::ranges::stable_sort(received, {}, [](const auto& r) { return frame_order(r.first); });
    log.received.reserve(received.size());
    for (auto& r : received) log.received.push_back(std::move(r.second));
    return log;
}

FrameLog run_fleet(const FleetConfig& config) {
    RecordingSink sink;
    return run_fleet(config, sink);
}

nlohmann::ordered_json to_json(const DeliveryRecord& record) {
    nlohmann::ordered_json j;
    j["device_id"] = record.device_id;
    j["seq"] = record.seq;
    j["path"] = record.via ? "via:" + *record.via : std::string("direct");
    j["attempt"] = record.attempt;
    j["status"] = to_string(record.status);
    if (!record.error.empty()) j["error"] = record.error;
    return j;
}

nlohmann::ordered_json to_json(const OutcomeLabel& label) {
    nlohmann::ordered_json j;
    j["patient_id"] = label.patient_id;
    j["t_ms"] = label.t_ms;
    j["outcome"] = label.outcome;
    j["origin"] = "simulator";
    return j;
}

namespace {

template <typename Range, typename Fn>
std::string join_lines(const Range& items, Fn&& fn) {
    std::string out;
    for (const auto& item : items) {
        out += fn(item);
        out += '\n';
    }
    return out;
}

}  // namespace

void write_frame_log(const FrameLog& log, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file(dir / "frames.ndjson", join_lines(log.received, [](const std::string& s) { return s; }));
    write_file(dir / "deliveries.ndjson",
               join_lines(log.deliveries, [](const DeliveryRecord& d) { return to_json(d).dump(); }));
    write_file(dir / "outcomes.ndjson",
               join_lines(log.outcomes, [](const OutcomeLabel& o) { return to_json(o).dump(); }));
}

std::string frame_log_hash(const FrameLog& log) {
    std::string all = join_lines(log.received, [](const std::string& s) { return s; });
    all += join_lines(log.deliveries, [](const DeliveryRecord& d) { return to_json(d).dump(); });
    all += join_lines(log.outcomes, [](const OutcomeLabel& o) { return to_json(o).dump(); });
    return sha256_hex(all);
}

}  // namespace cardiotwin::telemetry
