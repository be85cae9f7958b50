#include "cardiotwin/fusion.hpp"

#include "cardiotwin/error.hpp"
#include "cardiotwin/util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cardiotwin::fusion {

std::string_view to_string(OutcomeOrigin origin) noexcept {
    return origin == OutcomeOrigin::clinician ? "clinician" : "simulator";
}

OutcomeOrigin origin_from_string(std::string_view s) {
    if (s == "clinician") return OutcomeOrigin::clinician;
    if (s == "simulator") return OutcomeOrigin::simulator;
    fail(Errc::validation, "unknown outcome origin '" + std::string(s) + "'");
}

FusionConfig normalized(FusionConfig config) {
    if (!(config.alpha >= 0.0 && config.alpha <= 1.0)) fail(Errc::config, "fusion alpha must lie in [0, 1]");
    if (!(config.threshold >= 0.0 && config.threshold <= 1.0)) fail(Errc::config, "threshold must lie in [0, 1]");
    if (config.residual_window < 2) fail(Errc::config, "residual window must hold at least 2 residuals");
    if (config.batch_size == 0) fail(Errc::config, "fine-tune batch size must be positive");
    if (config.feedback_window == 0) fail(Errc::config, "feedback window must be positive");
    if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
        fail(Errc::config, "learning rate must be a nonnegative number");
    }
    if (!(config.agent_noise >= 0.0)) fail(Errc::config, "agent noise must be nonnegative");
    double total = 0.0;
    for (double w : config.weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) fail(Errc::config, "fusion weights must be nonnegative");
        total += w;
    }
    if (!config.weights.empty()) {
        if (total <= 0.0) fail(Errc::config, "fusion weights sum to zero");
        for (double& w : config.weights) w /= total;
    }
    return config;
}

FusionConfig fusion_from_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(Errc::config, "fusion config must be an object");
    FusionConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "alpha") c.alpha = value.get<double>();
            else if (key == "weights") c.weights = value.get<std::vector<double>>();
            else if (key == "threshold") c.threshold = value.get<double>();
            else if (key == "residual_window") c.residual_window = value.get<std::size_t>();
            else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
            else if (key == "learning_rate") c.learning_rate = value.get<double>();
            else if (key == "feedback_window") c.feedback_window = value.get<std::size_t>();
            else if (key == "agent_noise") c.agent_noise = value.get<double>();
            else fail(Errc::config, "unknown fusion key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::config, std::string("fusion config: ") + e.what());
    }
    return normalized(std::move(c));
}

nlohmann::ordered_json to_json(const FusionConfig& c) {
    return {{"alpha", c.alpha},
            {"weights", c.weights},
            {"threshold", c.threshold},
            {"residual_window", c.residual_window},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"feedback_window", c.feedback_window},
            {"agent_noise", c.agent_noise}};
}

ResidualHistory::ResidualHistory(std::size_t window) : window_(window) {
    if (window < 2) fail(Errc::config, "residual window must hold at least 2 residuals");
}

void ResidualHistory::push(double r) {
    buffer_.push_back(r);
    const double n = static_cast<double>(buffer_.size());
    const double delta = r - mean_;
    mean_ += delta / n;
    m2_ += delta * (r - mean_);
    if (buffer_.size() > window_) {
        const double old = buffer_.front();
        buffer_.pop_front();
        const double m = n - 1.0;
        const double prev_mean = mean_;
        mean_ = (n * mean_ - old) / m;
        m2_ -= (old - prev_mean) * (old - mean_);
        if (m2_ < 0.0) m2_ = 0.0;
    }
}

double ResidualHistory::stddev() const noexcept {
    if (buffer_.size() < 2) return 0.0;
    return std::sqrt(m2_ / static_cast<double>(buffer_.size() - 1));
}

AnomalyResult detect_anomaly(ResidualHistory& history, double residual) {
    if (!std::isfinite(residual)) fail(Errc::numeric, "non-finite residual");
    AnomalyResult r;
    r.mean = history.mean();
    r.sigma = history.stddev();
    r.flagged = history.size() >= 2 && std::abs(residual - r.mean) > 3.0 * r.sigma;
    history.push(residual);
    return r;
}

RiskPrediction fuse(const RiskPrediction& local, std::span<const Contribution> others, double alpha,
                    double threshold) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) fail(Errc::validation, "alpha must lie in [0, 1]");
    if (!(local.p_arrest >= 0.0 && local.p_arrest <= 1.0)) fail(Errc::validation, "local p outside [0, 1]");
    double lo = local.p_arrest;
    double hi = local.p_arrest;
    double wsum = 0.0;
    double wp = 0.0;
    for (const auto& o : others) {
        if (!(o.p >= 0.0 && o.p <= 1.0)) fail(Errc::validation, "p from " + o.source + " outside [0, 1]");
        if (!(o.weight >= 0.0) || !std::isfinite(o.weight)) {
            fail(Errc::validation, "weight from " + o.source + " must be nonnegative");
        }
        wsum += o.weight;
        wp += o.weight * o.p;
        if (o.weight > 0.0) {
            lo = std::min(lo, o.p);
            hi = std::max(hi, o.p);
        }
    }

    RiskPrediction out = local;
    out.source = PredictionSource::fused;
    if (alpha == 1.0) {
        out.p_arrest = local.p_arrest;
    } else {
        if (!(wsum > 0.0)) fail(Errc::degenerate_input, "no weighted predictions to fuse with");
        out.p_arrest = std::clamp(alpha * local.p_arrest + (1.0 - alpha) * (wp / wsum), lo, hi);
    }
    out.decision = out.p_arrest >= threshold;
    return out;
}

nlohmann::ordered_json to_json(const PredictionEvent& e) {
    nlohmann::ordered_json j;
    j["event"] = e.event;
    j["patient_id"] = e.prediction.patient_id;
    j["t_ms"] = e.prediction.t_ms;
    j["p_arrest"] = e.prediction.p_arrest;
    j["decision"] = e.prediction.decision;
    j["source"] = cnn::to_string(e.prediction.source);
    j["model_version"] = e.prediction.model_version;
    j["p_model"] = e.p_model;
    j["alpha"] = e.alpha;
    auto sources = nlohmann::ordered_json::array();
    for (const auto& c : e.contributions) sources.push_back({{"source", c.source}, {"p", c.p}, {"weight", c.weight}});
    j["sources"] = std::move(sources);
    j["twin"] = {{"steps", e.twin_steps}, {"pressure", e.twin_pressure}};
    j["anomaly"] = e.anomaly;
    if (e.anomaly_t_ms) j["anomaly_t_ms"] = *e.anomaly_t_ms;
    return j;
}

PredictionEvent event_from_json(const nlohmann::json& j) {
    PredictionEvent e;
    try {
        e.event = j.at("event").get<std::uint64_t>();
        e.prediction.patient_id = j.at("patient_id").get<std::string>();
        e.prediction.t_ms = j.at("t_ms").get<std::int64_t>();
        e.prediction.p_arrest = j.at("p_arrest").get<double>();
        e.prediction.decision = j.at("decision").get<bool>();
        const auto source = j.at("source").get<std::string>();
        if (source == "fused") e.prediction.source = PredictionSource::fused;
        else if (source == "model") e.prediction.source = PredictionSource::model;
        else fail(Errc::parse, "unknown prediction source '" + source + "'");
        e.prediction.model_version = j.value("model_version", std::uint64_t{0});
        e.p_model = j.value("p_model", e.prediction.p_arrest);
        e.alpha = j.value("alpha", 1.0);
        if (j.contains("sources")) {
            for (const auto& s : j.at("sources")) {
                e.contributions.push_back(
                    {s.at("source").get<std::string>(), s.at("p").get<double>(), s.at("weight").get<double>()});
            }
        }
        if (j.contains("twin")) {
            e.twin_steps = j["twin"].value("steps", std::uint64_t{0});
            e.twin_pressure = j["twin"].value("pressure", 0.0);
        }
        e.anomaly = j.value("anomaly", false);
        if (j.contains("anomaly_t_ms")) e.anomaly_t_ms = j.at("anomaly_t_ms").get<std::int64_t>();
    } catch (const nlohmann::json::exception& ex) {
        fail(Errc::parse, std::string("prediction event: ") + ex.what());
    }
    return e;
}

std::string encode_event(const PredictionEvent& event) { return to_json(event).dump(); }

Feedback feedback_from_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(Errc::parse, "feedback must be a JSON object");
    Feedback f;
    try {
        f.patient_id = j.at("patient_id").get<std::string>();
        f.t_ms = j.at("t_ms").get<std::int64_t>();
        if (j.contains("outcome")) {
            const auto& o = j["outcome"];
            if (!o.is_number_integer() || (o.get<int>() != 0 && o.get<int>() != 1)) {
                fail(Errc::validation, "outcome must be 0 or 1");
            }
            f.outcome = o.get<int>();
        }
        if (j.contains("override_p")) f.override_p = j["override_p"].get<double>();
        if (j.contains("weight")) f.weight = j["weight"].get<double>();
        if (j.contains("source")) f.source = j["source"].get<std::string>();
        if (j.contains("origin")) f.origin = origin_from_string(j["origin"].get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, std::string("feedback: ") + e.what());
    }
    if (!f.outcome && !f.override_p) fail(Errc::validation, "feedback needs an outcome or override_p");
    if (f.override_p && !(*f.override_p >= 0.0 && *f.override_p <= 1.0)) {
        fail(Errc::validation, "override_p must lie in [0, 1]");
    }
    if (!(f.weight >= 0.0) || !std::isfinite(f.weight)) fail(Errc::validation, "weight must be nonnegative");
    if (f.source.empty()) fail(Errc::validation, "feedback source must be non-empty");
    return f;
}

nlohmann::ordered_json to_json(const FeedbackResult& r) {
    nlohmann::ordered_json j;
    j["residual"] = r.residual ? nlohmann::ordered_json(*r.residual) : nlohmann::ordered_json(nullptr);
    j["anomaly"] = r.anomaly;
    j["queued"] = r.queued;
    j["tuned"] = r.tuned;
    j["state_version"] = r.state_version;
    j["model_version"] = r.model_version;
    return j;
}

nlohmann::ordered_json to_json(const PatientSummary& s) {
    return {{"patient_id", s.patient_id}, {"events", s.events},     {"t_ms", s.last_t_ms},
            {"p_arrest", s.p_arrest},     {"decision", s.decision}, {"anomaly", s.anomaly},
            {"anomalies", s.anomalies}};
}

ServerState::ServerState(FusionConfig config, cnn::ModelStore& store, std::uint64_t seed)
    : config_(normalized(std::move(config))), store_(store), seed_(seed) {}

void ServerState::set_event_sink(EventSink sink) {
    std::lock_guard lock(mutex_);
    sink_ = std::move(sink);
}

std::vector<Contribution> ServerState::agent_views(std::string_view patient_id, std::int64_t t_ms, int truth) const {
    std::vector<Contribution> out;
    const std::uint64_t base = hash_combine(hash_combine(seed_, fnv1a64(patient_id)), static_cast<std::uint64_t>(t_ms));
    for (std::size_t n = 0; n < config_.weights.size(); ++n) {
        const double centre = truth ? 0.8 : 0.2;
        const double p = std::clamp(centre + config_.agent_noise * unit_gaussian(hash_combine(base, 0xa9e47ULL + n)), 0.0, 1.0);
        out.push_back({"agent-" + std::to_string(n + 1), p, config_.weights[n]});
    }
    return out;
}

PredictionEvent ServerState::publish(const twin::TwinState& twin, const twin::FeatureImage& image,
                                     const RiskPrediction& local, std::optional<int> truth) {
    if (local.patient_id != twin.patient_id) {
        fail(Errc::reference, "prediction for " + local.patient_id + " published with twin of " + twin.patient_id);
    }
    std::lock_guard lock(mutex_);
    auto [it, inserted] = patients_.try_emplace(local.patient_id);
    Patient& pat = it->second;
    if (inserted) {
        pat.residuals = ResidualHistory(config_.residual_window);
        pat.summary.patient_id = local.patient_id;
    }
    if (!pat.recent.empty() && local.t_ms <= pat.recent.back().t_ms) {
        fail(Errc::validation, "prediction for " + local.patient_id + " at t_ms " + std::to_string(local.t_ms) +
                                   " does not advance past " + std::to_string(pat.recent.back().t_ms));
    }

    std::vector<Contribution> others;
    for (const auto& [_, c] : pat.overrides) others.push_back(c);
    if (truth) {
        auto agents = agent_views(local.patient_id, local.t_ms, *truth);
        others.insert(others.end(), agents.begin(), agents.end());
    }

    PredictionEvent e;
    e.event = events_.size();
    e.p_model = local.p_arrest;
    double weight_total = 0.0;
    for (const auto& c : others) weight_total += c.weight;
    if (weight_total > 0.0) {
        e.prediction = fuse(local, others, config_.alpha, config_.threshold);
        e.alpha = config_.alpha;
        e.contributions = std::move(others);
    } else {
        e.prediction = local;
        e.prediction.decision = local.p_arrest >= config_.threshold;
        e.alpha = 1.0;
    }
    e.twin_steps = twin.steps;
    e.twin_pressure = twin.pressure;
    if (pat.pending_anomaly) {
        e.anomaly = true;
        e.anomaly_t_ms = pat.pending_anomaly;
        pat.pending_anomaly.reset();
    }

    pat.recent.push_back({local.t_ms, e.prediction.p_arrest, image.tensor});
    if (pat.recent.size() > config_.feedback_window) pat.recent.pop_front();
    pat.twin = twin::snapshot(twin);
    pat.summary.events += 1;
    pat.summary.last_t_ms = local.t_ms;
    pat.summary.p_arrest = e.prediction.p_arrest;
    pat.summary.decision = e.prediction.decision;
    pat.summary.anomaly = e.anomaly;

    events_.push_back(e);
    ++version_;
    if (sink_) sink_(e);
    cv_.notify_all();
    return e;
}

ServerState::Patient& ServerState::patient_or_throw(std::string_view patient_id) {
    auto it = patients_.find(patient_id);
    if (it == patients_.end()) fail(Errc::reference, "unknown patient " + std::string(patient_id));
    return it->second;
}

const ServerState::Patient& ServerState::patient_or_throw(std::string_view patient_id) const {
    auto it = patients_.find(patient_id);
    if (it == patients_.end()) fail(Errc::reference, "unknown patient " + std::string(patient_id));
    return it->second;
}

FeedbackResult ServerState::apply_feedback(const Feedback& f) {
    FeedbackResult result;
    std::vector<cnn::Example> batch;
    {
        std::lock_guard lock(mutex_);
        Patient& pat = patient_or_throw(f.patient_id);
        auto pub = std::find_if(pat.recent.begin(), pat.recent.end(), [&](const Published& p) { return p.t_ms == f.t_ms; });
        if (pub == pat.recent.end()) {
            fail(Errc::reference, "no published prediction for " + f.patient_id + " at t_ms " + std::to_string(f.t_ms));
        }
        if (f.override_p) {
            if (!(*f.override_p >= 0.0 && *f.override_p <= 1.0)) fail(Errc::validation, "override_p must lie in [0, 1]");
            if (!(f.weight >= 0.0) || !std::isfinite(f.weight)) fail(Errc::validation, "weight must be nonnegative");
            pat.overrides[f.source] = {f.source, *f.override_p, f.weight};
        }
        if (f.outcome) {
            if (*f.outcome != 0 && *f.outcome != 1) fail(Errc::validation, "outcome must be 0 or 1");
            const auto key = std::make_pair(f.patient_id, f.t_ms);
            auto existing = outcomes_.find(key);
            const OutcomeRecord record{f.patient_id, f.t_ms, *f.outcome, f.origin};
            if (existing == outcomes_.end()) {
                outcomes_.emplace(key, record);
                const double residual = pub->p_arrest - *f.outcome;
                const auto anomaly = detect_anomaly(pat.residuals, residual);
                pub->resolved = true;
                result.residual = residual;
                if (anomaly.flagged) {
                    result.anomaly = true;
                    result.queued = true;
                    pat.pending_anomaly = f.t_ms;
                    pat.summary.anomalies += 1;
                    queue_.push_back({pub->image, *f.outcome});
                }
            } else if (f.origin == OutcomeOrigin::clinician) {
                existing->second = record;
            }
        }
        ++version_;
        if (queue_.size() >= config_.batch_size) {
            batch.assign(std::make_move_iterator(queue_.begin()), std::make_move_iterator(queue_.end()));
            queue_.clear();
        }
        result.state_version = version_;
    }
    if (!batch.empty()) {
        store_.tune(batch, config_.learning_rate);
        std::lock_guard lock(mutex_);
        ++fine_tunes_;
        result.tuned = true;
    }
    result.model_version = store_.version();
    return result;
}

FeedbackResult ServerState::apply_outcome(const OutcomeRecord& outcome) {
    Feedback f;
    f.patient_id = outcome.patient_id;
    f.t_ms = outcome.t_ms;
    f.outcome = outcome.outcome;
    f.origin = outcome.origin;
    return apply_feedback(f);
}

std::uint64_t ServerState::version() const {
    std::lock_guard lock(mutex_);
    return version_;
}

std::size_t ServerState::event_count() const {
    std::lock_guard lock(mutex_);
    return events_.size();
}

std::size_t ServerState::queue_size() const {
    std::lock_guard lock(mutex_);
    return queue_.size();
}

std::size_t ServerState::fine_tunes() const {
    std::lock_guard lock(mutex_);
    return fine_tunes_;
}

std::vector<PatientSummary> ServerState::patients() const {
    std::lock_guard lock(mutex_);
    std::vector<PatientSummary> out;
    for (const auto& [_, p] : patients_) out.push_back(p.summary);
    return out;
}

nlohmann::ordered_json ServerState::twin_snapshot(std::string_view patient_id) const {
    std::lock_guard lock(mutex_);
    return patient_or_throw(patient_id).twin;
}

std::vector<OutcomeRecord> ServerState::outcomes() const {
    std::lock_guard lock(mutex_);
    std::vector<OutcomeRecord> out;
    for (const auto& [_, r] : outcomes_) out.push_back(r);
    return out;
}

std::optional<OutcomeRecord> ServerState::outcome(std::string_view patient_id, std::int64_t t_ms) const {
    std::lock_guard lock(mutex_);
    auto it = outcomes_.find({std::string(patient_id), t_ms});
    if (it == outcomes_.end()) return std::nullopt;
    return it->second;
}

std::vector<PredictionEvent> ServerState::events_from(std::size_t from, std::chrono::milliseconds wait) const {
    std::unique_lock lock(mutex_);
    if (wait.count() > 0) {
        cv_.wait_for(lock, wait, [&] { return events_.size() > from || closed_; });
    }
    if (from >= events_.size()) return {};
    return {events_.begin() + static_cast<std::ptrdiff_t>(from), events_.end()};
}

void ServerState::close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    cv_.notify_all();
}

bool ServerState::closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
}

}  // namespace cardiotwin::fusion
