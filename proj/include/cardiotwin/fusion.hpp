#pragma once

// Physician-facing server state: prediction events, 3-sigma anomaly
// detection on outcome residuals, weighted decision fusion and the batched
// fine-tune queue.

#include "cardiotwin/cnn.hpp"
#include "cardiotwin/twin.hpp"

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cardiotwin::fusion {

using cnn::PredictionSource;
using cnn::RiskPrediction;

enum class OutcomeOrigin { simulator, clinician };

std::string_view to_string(OutcomeOrigin origin) noexcept;
OutcomeOrigin origin_from_string(std::string_view s);

struct OutcomeRecord {
    std::string patient_id;
    std::int64_t t_ms = 0;
    int outcome = 0;
    OutcomeOrigin origin = OutcomeOrigin::simulator;
};

struct FusionConfig {
    double alpha = 0.7;           // weight of the local model output
    std::vector<double> weights;  // one scripted feedback agent per entry
    double threshold = 0.5;
    std::size_t residual_window = 128;
    std::size_t batch_size = 16;
    double learning_rate = 0.05;
    std::size_t feedback_window = 256;  // published events per patient open for feedback
    double agent_noise = 0.15;
};

// Validates and renormalizes weights to sum 1. Errc::config on alpha outside
// [0, 1], negative or all-zero weights, or zero sizes.
FusionConfig normalized(FusionConfig config);

FusionConfig fusion_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const FusionConfig& config);

// Trailing residual buffer with O(1) sliding mean / sample variance.
class ResidualHistory {
public:
    explicit ResidualHistory(std::size_t window = 128);

    void push(double residual);

    std::size_t window() const noexcept { return window_; }
    std::size_t size() const noexcept { return buffer_.size(); }
    double mean() const noexcept { return mean_; }
    // Sample standard deviation (n - 1); 0 for fewer than two residuals.
    double stddev() const noexcept;

private:
    std::size_t window_;
    std::deque<double> buffer_;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

struct AnomalyResult {
    bool flagged = false;
    double mean = 0.0;   // pre-update
    double sigma = 0.0;  // pre-update
};

// |residual - mean| > 3 sigma against the statistics before the residual is
// appended; fewer than two prior residuals never flag. Errc::numeric on a
// non-finite residual (history unchanged).
AnomalyResult detect_anomaly(ResidualHistory& history, double residual);

struct Contribution {
    std::string source;
    double p = 0.0;
    double weight = 0.0;

    bool operator==(const Contribution&) const = default;
};

// alpha * p_local + (1 - alpha) * sum(w_n p_n) / sum(w_n); decision
// re-thresholded, source = fused. Errc::validation on p outside [0, 1] or a
// negative weight; Errc::degenerate_input when alpha < 1 and there is nothing
// to average.
RiskPrediction fuse(const RiskPrediction& local, std::span<const Contribution> others, double alpha,
                    double threshold = 0.5);

struct PredictionEvent {
    std::uint64_t event = 0;  // position in the server stream
    RiskPrediction prediction;
    double p_model = 0.0;
    double alpha = 1.0;
    std::vector<Contribution> contributions;
    std::uint64_t twin_steps = 0;
    double twin_pressure = 0.0;
    bool anomaly = false;
    std::optional<std::int64_t> anomaly_t_ms;
};

nlohmann::ordered_json to_json(const PredictionEvent& event);
PredictionEvent event_from_json(const nlohmann::json& j);
std::string encode_event(const PredictionEvent& event);

struct Feedback {
    std::string patient_id;
    std::int64_t t_ms = 0;
    std::optional<int> outcome;
    std::optional<double> override_p;
    double weight = 1.0;
    std::string source = "clinician";
    OutcomeOrigin origin = OutcomeOrigin::clinician;
};

// Body of POST /feedback. Errc::parse / Errc::validation on bad input.
Feedback feedback_from_json(const nlohmann::json& j);

struct FeedbackResult {
    std::optional<double> residual;
    bool anomaly = false;
    bool queued = false;
    bool tuned = false;
    std::uint64_t state_version = 0;
    std::uint64_t model_version = 0;
};

nlohmann::ordered_json to_json(const FeedbackResult& result);

struct PatientSummary {
    std::string patient_id;
    std::size_t events = 0;
    std::int64_t last_t_ms = -1;
    double p_arrest = 0.0;
    bool decision = false;
    bool anomaly = false;
    std::size_t anomalies = 0;
};

nlohmann::ordered_json to_json(const PatientSummary& summary);

// Cloud server state. Publishing and feedback are serialized internally;
// fine-tuning runs outside the state lock and exclusively through the store.
class ServerState {
public:
    using EventSink = std::function<void(const PredictionEvent&)>;

    ServerState(FusionConfig config, cnn::ModelStore& store, std::uint64_t seed);

    const FusionConfig& config() const noexcept { return config_; }
    cnn::ModelStore& store() noexcept { return store_; }

    void set_event_sink(EventSink sink);

    // Fuses the local prediction with the patient's standing overrides and
    // the scripted agents (which see `truth` when given), then appends the
    // event. Errc::validation when t_ms does not advance for the patient.
    PredictionEvent publish(const twin::TwinState& twin, const twin::FeatureImage& image,
                            const RiskPrediction& local, std::optional<int> truth = std::nullopt);

    // Errc::reference for an unknown patient or a t_ms without a published
    // event in the feedback window.
    FeedbackResult apply_feedback(const Feedback& feedback);
    FeedbackResult apply_outcome(const OutcomeRecord& outcome);

    std::uint64_t version() const;
    std::size_t event_count() const;
    std::size_t queue_size() const;
    std::size_t fine_tunes() const;
    std::vector<PatientSummary> patients() const;
    // Errc::reference for an unknown patient.
    nlohmann::ordered_json twin_snapshot(std::string_view patient_id) const;
    std::vector<OutcomeRecord> outcomes() const;
    std::optional<OutcomeRecord> outcome(std::string_view patient_id, std::int64_t t_ms) const;

    // Events with index >= from. When wait is set, blocks until at least one
    // such event exists, the timeout passes, or close() is called.
    std::vector<PredictionEvent> events_from(std::size_t from, std::chrono::milliseconds wait = {}) const;
    void close();
    bool closed() const;

private:
    struct Published {
        std::int64_t t_ms;
        double p_arrest;
        Tensor image;
        bool resolved = false;
    };

    struct Patient {
        ResidualHistory residuals;
        std::deque<Published> recent;
        std::map<std::string, Contribution> overrides;
        nlohmann::ordered_json twin;
        std::optional<std::int64_t> pending_anomaly;
        PatientSummary summary;
    };

    Patient& patient_or_throw(std::string_view patient_id);
    const Patient& patient_or_throw(std::string_view patient_id) const;
    std::vector<Contribution> agent_views(std::string_view patient_id, std::int64_t t_ms, int truth) const;

    FusionConfig config_;
    cnn::ModelStore& store_;
    std::uint64_t seed_;

    mutable std::mutex mutex_;
    mutable std::condition_variable cv_;
    std::map<std::string, Patient, std::less<>> patients_;
    std::map<std::pair<std::string, std::int64_t>, OutcomeRecord> outcomes_;
    std::vector<PredictionEvent> events_;
    std::vector<cnn::Example> queue_;
    EventSink sink_;
    std::uint64_t version_ = 0;
    std::size_t fine_tunes_ = 0;
    bool closed_ = false;
};

}  // namespace cardiotwin::fusion
