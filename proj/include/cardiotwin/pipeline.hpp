#pragma once

// End-to-end orchestration: devices -> gateway -> twin -> classifier ->
// fusion -> console feed, in live, replay or eval mode.

#include "cardiotwin/cnn.hpp"
#include "cardiotwin/evalkit.hpp"
#include "cardiotwin/fusion.hpp"
#include "cardiotwin/gateway.hpp"
#include "cardiotwin/telemetry.hpp"
#include "cardiotwin/twin.hpp"

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cardiotwin::pipeline {

enum class Mode { live, replay, eval };

std::string_view to_string(Mode mode) noexcept;
Mode mode_from_string(std::string_view s);

struct Paths {
    std::filesystem::path input;       // replay: frames.ndjson + outcomes.ndjson
    std::filesystem::path output = "out";
    std::filesystem::path params_in;   // optional trained weights
    std::filesystem::path params_out;  // optional, written after the run
};

struct EvalConfig {
    std::vector<double> phis{0.0, 1.0};
    eval::SyntheticSpec data;
    cnn::TrainBudget budget;
    std::uint64_t split_seed = 0;
};

struct ScenarioConfig {
    Mode mode = Mode::replay;
    std::uint64_t seed = 0;
    telemetry::FleetConfig fleet;
    cnn::ScalingConfig scaling = cnn::compound_scale(0.0, {});
    std::uint64_t net_seed = 0;
    fusion::FusionConfig fusion;
    std::size_t gateway_window = gateway::kDefaultWindow;
    std::size_t queue_capacity = 1024;
    std::string gateway_bind = "127.0.0.1:0";
    std::optional<std::string> serve;
    Paths paths;
    EvalConfig eval;
};

// Keys: mode, seed, fleet{...}, net{phi, alpha, beta, gamma, seed}, fusion{...},
// gateway{window, bind}, paths{input, output, params_in, params_out},
// eval{phis, samples, epochs, batch_size, lr, noise, split_seed}, serve,
// queue_capacity. The scenario seed fills every sub-seed not given
// explicitly. Errc::config on bad values.
ScenarioConfig scenario_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ScenarioConfig& config);

struct ExitReport {
    Mode mode = Mode::replay;
    std::size_t frames_generated = 0;
    std::size_t frames_received = 0;  // wire lines seen, duplicates included
    std::size_t frames_accepted = 0;
    std::size_t duplicates = 0;
    std::size_t permanently_dropped = 0;
    std::size_t transport_errors = 0;
    std::size_t twin_steps = 0;
    std::size_t predictions = 0;
    std::size_t outcomes_applied = 0;
    std::size_t anomalies = 0;
    std::size_t fine_tunes = 0;
    std::uint64_t model_version = 0;
    std::string predictions_sha256;
    std::map<std::string, std::string> logs;  // name -> path
    std::size_t report_rows = 0;
    bool stopped_early = false;
};

nlohmann::ordered_json to_json(const ExitReport& report);

// Line-oriented append-only log files, one per name, safe to share between
// threads.
class LogSet {
public:
    explicit LogSet(std::filesystem::path dir);

    // Creates (truncates) the file so it exists even if nothing is appended.
    void open(const std::string& name);
    void append(const std::string& name, std::string_view line);
    void flush();
    std::filesystem::path path(const std::string& name) const { return dir_ / (name + ".ndjson"); }
    std::map<std::string, std::string> paths() const;

private:
    std::ofstream& file(const std::string& name);

    std::filesystem::path dir_;
    std::mutex mutex_;
    std::map<std::string, std::ofstream> files_;
};

// Ground-truth outcomes by (patient, t_ms). A clinician record supersedes a
// simulator record for the same key.
using TruthTable = std::map<std::pair<std::string, std::int64_t>, fusion::OutcomeRecord>;

// Outcome for one (patient, t_ms), or nothing when the key is unknown.
using TruthLookup = std::function<std::optional<fusion::OutcomeRecord>(const std::string&, std::int64_t)>;

// `table` must outlive the lookup.
TruthLookup lookup_in(const TruthTable& table);
// Derived per frame from the patient profiles, without materializing the horizon.
TruthLookup lookup_in(const telemetry::FleetConfig& fleet);
// Outcomes of the frames a fleet run actually generated.
TruthTable truth_from_log(const telemetry::FrameLog& log);
// Reads outcomes.ndjson. Errc::parse on malformed lines.
TruthTable read_outcomes(const std::filesystem::path& path);

// Twin + classifier + fusion for normalized frames of many patients. Not
// thread-safe: each instance is one logical stream.
class Engine {
public:
    Engine(const ScenarioConfig& config, cnn::ModelStore& store, fusion::ServerState& state, TruthLookup truth);

    fusion::PredictionEvent process(const gateway::NormalizedFrame& frame);

    std::size_t twin_steps() const noexcept { return twin_steps_; }
    std::size_t outcomes_applied() const noexcept { return outcomes_applied_; }
    std::size_t anomalies() const noexcept { return anomalies_; }
    const std::map<std::string, twin::TwinState>& twins() const noexcept { return twins_; }

private:
    const ScenarioConfig& config_;
    cnn::ModelStore& store_;
    fusion::ServerState& state_;
    TruthLookup truth_;
    std::map<std::string, twin::TwinState> twins_;
    std::size_t twin_steps_ = 0;
    std::size_t outcomes_applied_ = 0;
    std::size_t anomalies_ = 0;
};

// Everything a run needs, owned in one place so the console can attach to
// the server state while the run is in progress.
class Scenario {
public:
    explicit Scenario(ScenarioConfig config);

    const ScenarioConfig& config() const noexcept { return config_; }
    fusion::ServerState& state() noexcept { return *state_; }
    cnn::ModelStore& store() noexcept { return *store_; }

    // Runs the configured mode to completion (or until request_stop), flushes
    // every log and writes params_out if set. Errors propagate after logs are
    // flushed.
    ExitReport run();
    void request_stop() noexcept { stop_.store(true); }
    bool stop_requested() const noexcept { return stop_.load(); }
    const std::atomic<bool>& stop_flag() const noexcept { return stop_; }

private:
    ExitReport run_replay();
    ExitReport run_live();
    ExitReport run_eval();
    void finish(ExitReport& report, LogSet& logs, const TruthTable& truth,
                const std::vector<fusion::OutcomeRecord>& clinician);

    ScenarioConfig config_;
    std::unique_ptr<cnn::ModelStore> store_;
    std::unique_ptr<fusion::ServerState> state_;
    std::atomic<bool> stop_{false};
};

ExitReport run_scenario(const ScenarioConfig& config);

struct ReportBundle {
    eval::ConfusionMatrix matrix;
    eval::MetricsReport metrics;
    std::size_t predictions = 0;
    std::size_t joined = 0;
    std::size_t excluded = 0;  // predictions without an outcome
};

// Joins predictions.ndjson with outcomes.ndjson from `in` and writes
// report.csv, confusion.json and summary.json to `out`.
ReportBundle export_report(const std::filesystem::path& in, const std::filesystem::path& out);

// Labeled twin images from a replay-style pass over a simulated fleet, for
// offline training.
std::vector<cnn::Example> twin_dataset(const telemetry::FleetConfig& fleet, std::size_t resolution,
                                       std::size_t gateway_window = gateway::kDefaultWindow);

}  // namespace cardiotwin::pipeline
