#include "cardiotwin/pipeline.hpp"

#include "cardiotwin/console.hpp"
#include "cardiotwin/error.hpp"
#include "cardiotwin/log.hpp"
#include "cardiotwin/queue.hpp"
#include "cardiotwin/transport.hpp"
#include "cardiotwin/util.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <set>
#include <thread>

namespace cardiotwin::pipeline {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void rethrow_with(std::string_view module, std::string_view record, const Error& e) {
    fail(e.code(), std::string(module) + ": " + std::string(record) + ": " + e.what());
}

std::string record_id(std::string_view device, std::uint64_t seq) {
    return std::string(device) + "#" + std::to_string(seq);
}

std::string phi_name(double phi) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "phi-%g", phi);
    return buf;
}

nlohmann::ordered_json outcome_json(const fusion::OutcomeRecord& r) {
    return {{"patient_id", r.patient_id}, {"t_ms", r.t_ms}, {"outcome", r.outcome}, {"origin", fusion::to_string(r.origin)}};
}

void reconcile(TruthTable& table, const fusion::OutcomeRecord& r) {
    auto [it, inserted] = table.try_emplace({r.patient_id, r.t_ms}, r);
    if (!inserted && r.origin == fusion::OutcomeOrigin::clinician) it->second = r;
}

}  // namespace

std::string_view to_string(Mode mode) noexcept {
    switch (mode) {
        case Mode::live: return "live";
        case Mode::replay: return "replay";
        case Mode::eval: return "eval";
    }
    return "replay";
}

Mode mode_from_string(std::string_view s) {
    if (s == "live") return Mode::live;
    if (s == "replay") return Mode::replay;
    if (s == "eval") return Mode::eval;
    fail(Errc::config, "unknown mode '" + std::string(s) + "' (live, replay or eval)");
}

ScenarioConfig scenario_from_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(Errc::config, "scenario config must be a JSON object");
    static const std::set<std::string> known{"mode", "seed",  "fleet", "net",   "fusion",        "gateway",
                                             "paths", "eval", "serve", "queue_capacity"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) fail(Errc::config, "unknown scenario key '" + key + "'");
    }
    ScenarioConfig c;
    try {
        c.mode = mode_from_string(j.value("mode", std::string("replay")));
        c.seed = j.value("seed", std::uint64_t{0});

        nlohmann::json fleet = j.value("fleet", nlohmann::json::object());
        if (!fleet.contains("seed")) fleet["seed"] = c.seed;
        c.fleet = telemetry::fleet_from_json(fleet);

        const nlohmann::json net = j.value("net", nlohmann::json::object());
        c.scaling = cnn::scaling_from_json(net);
        c.net_seed = net.value("seed", c.seed);

        c.fusion = fusion::fusion_from_json(j.value("fusion", nlohmann::json::object()));

        const nlohmann::json gw = j.value("gateway", nlohmann::json::object());
        c.gateway_window = gw.value("window", c.gateway_window);
        c.gateway_bind = gw.value("bind", c.gateway_bind);
        if (c.gateway_window == 0) fail(Errc::config, "gateway window must be positive");
        transport::parse_endpoint(c.gateway_bind);

        const nlohmann::json paths = j.value("paths", nlohmann::json::object());
        c.paths.input = paths.value("input", std::string());
        c.paths.output = paths.value("output", std::string("out"));
        c.paths.params_in = paths.value("params_in", std::string());
        c.paths.params_out = paths.value("params_out", std::string());

        const nlohmann::json ev = j.value("eval", nlohmann::json::object());
        c.eval.phis = ev.value("phis", c.eval.phis);
        c.eval.data.samples = ev.value("samples", c.eval.data.samples);
        c.eval.data.noise = ev.value("noise", c.eval.data.noise);
        c.eval.data.seed = ev.value("seed", c.seed);
        c.eval.data.resolution = c.scaling.base.resolution;
        c.eval.data.channels = c.scaling.base.input_channels;
        c.eval.budget.epochs = ev.value("epochs", std::size_t{10});
        c.eval.budget.batch_size = ev.value("batch_size", c.eval.budget.batch_size);
        c.eval.budget.lr = ev.value("lr", c.eval.budget.lr);
        c.eval.budget.seed = c.net_seed;
        c.eval.split_seed = ev.value("split_seed", c.seed);
        if (c.eval.phis.empty()) fail(Errc::config, "eval needs at least one phi");

        if (j.contains("serve") && !j["serve"].is_null()) {
            c.serve = j["serve"].get<std::string>();
            transport::parse_endpoint(*c.serve);
        }
        c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
        if (c.queue_capacity == 0) fail(Errc::config, "queue capacity must be positive");
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::config, std::string("scenario config: ") + e.what());
    }
    if (c.mode == Mode::replay && c.paths.input.empty()) fail(Errc::config, "replay mode needs paths.input");
    return c;
}

nlohmann::ordered_json to_json(const ScenarioConfig& c) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(c.mode);
    j["seed"] = c.seed;
    j["fleet"] = nlohmann::ordered_json::parse(telemetry::to_json(c.fleet).dump());
    j["net"] = {{"phi", c.scaling.phi},
                {"alpha", c.scaling.coeffs.alpha},
                {"beta", c.scaling.coeffs.beta},
                {"gamma", c.scaling.coeffs.gamma},
                {"seed", c.net_seed}};
    j["fusion"] = fusion::to_json(c.fusion);
    j["gateway"] = {{"window", c.gateway_window}, {"bind", c.gateway_bind}};
    j["paths"] = {{"input", c.paths.input.string()},
                  {"output", c.paths.output.string()},
                  {"params_in", c.paths.params_in.string()},
                  {"params_out", c.paths.params_out.string()}};
    j["eval"] = {{"phis", c.eval.phis},
                 {"samples", c.eval.data.samples},
                 {"noise", c.eval.data.noise},
                 {"seed", c.eval.data.seed},
                 {"epochs", c.eval.budget.epochs},
                 {"batch_size", c.eval.budget.batch_size},
                 {"lr", c.eval.budget.lr},
                 {"split_seed", c.eval.split_seed}};
    j["serve"] = c.serve ? nlohmann::ordered_json(*c.serve) : nlohmann::ordered_json(nullptr);
    j["queue_capacity"] = c.queue_capacity;
    return j;
}

nlohmann::ordered_json to_json(const ExitReport& r) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(r.mode);
    j["frames_generated"] = r.frames_generated;
    j["frames_received"] = r.frames_received;
    j["frames_accepted"] = r.frames_accepted;
    j["duplicates"] = r.duplicates;
    j["permanently_dropped"] = r.permanently_dropped;
    j["transport_errors"] = r.transport_errors;
    j["twin_steps"] = r.twin_steps;
    j["predictions"] = r.predictions;
    j["outcomes_applied"] = r.outcomes_applied;
    j["anomalies"] = r.anomalies;
    j["fine_tunes"] = r.fine_tunes;
    j["model_version"] = r.model_version;
    j["predictions_sha256"] = r.predictions_sha256;
    j["logs"] = r.logs;
    j["report_rows"] = r.report_rows;
    j["stopped_early"] = r.stopped_early;
    return j;
}

LogSet::LogSet(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) fail(Errc::io, "cannot create " + dir_.string() + ": " + ec.message());
}

std::ofstream& LogSet::file(const std::string& name) {
    auto it = files_.find(name);
    if (it == files_.end()) {
        std::ofstream out(path(name), std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::io, "cannot open " + path(name).string());
        it = files_.emplace(name, std::move(out)).first;
    }
    return it->second;
}

void LogSet::open(const std::string& name) {
    std::lock_guard lock(mutex_);
    file(name);
}

void LogSet::append(const std::string& name, std::string_view line) {
    std::lock_guard lock(mutex_);
    auto& out = file(name);
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.put('\n');
    if (!out) fail(Errc::io, "write failed on " + path(name).string());
}

void LogSet::flush() {
    std::lock_guard lock(mutex_);
    for (auto& [_, f] : files_) f.flush();
}

std::map<std::string, std::string> LogSet::paths() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, _] : files_) out[name] = path(name).string();
    return out;
}

TruthLookup lookup_in(const TruthTable& table) {
    return [&table](const std::string& id, std::int64_t t_ms) -> std::optional<fusion::OutcomeRecord> {
        const auto it = table.find({id, t_ms});
        if (it == table.end()) return std::nullopt;
        return it->second;
    };
}

TruthLookup lookup_in(const telemetry::FleetConfig& fleet) {
    return [&fleet](const std::string& id, std::int64_t t_ms) -> std::optional<fusion::OutcomeRecord> {
        const auto w = telemetry::device_index(id);
        if (!w || *w >= fleet.patient_profiles.size() || fleet.tick_ms == 0 || t_ms <= 0 || t_ms % fleet.tick_ms != 0) {
            return std::nullopt;
        }
        const auto tick = static_cast<std::uint64_t>(t_ms / fleet.tick_ms);
        if (tick > fleet.horizon_ticks) return std::nullopt;
        return fusion::OutcomeRecord{id, t_ms, telemetry::in_event(fleet.patient_profiles[*w], tick) ? 1 : 0,
                                     fusion::OutcomeOrigin::simulator};
    };
}

TruthTable truth_from_log(const telemetry::FrameLog& log) {
    TruthTable t;
    for (const auto& o : log.outcomes) {
        t.emplace(std::make_pair(o.patient_id, o.t_ms),
                  fusion::OutcomeRecord{o.patient_id, o.t_ms, o.outcome, fusion::OutcomeOrigin::simulator});
    }
    return t;
}

TruthTable read_outcomes(const fs::path& path) {
    TruthTable t;
    std::size_t n = 0;
    for (const auto& line : read_lines(path)) {
        ++n;
        try {
            const auto j = nlohmann::json::parse(line);
            fusion::OutcomeRecord r;
            r.patient_id = j.at("patient_id").get<std::string>();
            r.t_ms = j.at("t_ms").get<std::int64_t>();
            r.outcome = j.at("outcome").get<int>();
            if (r.outcome != 0 && r.outcome != 1) fail(Errc::validation, "outcome must be 0 or 1");
            r.origin = fusion::origin_from_string(j.value("origin", std::string("simulator")));
            reconcile(t, r);
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::parse, path.string() + " line " + std::to_string(n) + ": " + e.what());
        } catch (const Error& e) {
            fail(e.code(), path.string() + " line " + std::to_string(n) + ": " + e.what());
        }
    }
    return t;
}

Engine::Engine(const ScenarioConfig& config, cnn::ModelStore& store, fusion::ServerState& state, TruthLookup truth)
    : config_(config), store_(store), state_(state), truth_(std::move(truth)) {}

fusion::PredictionEvent Engine::process(const gateway::NormalizedFrame& frame) {
    const std::string rid = record_id(frame.device_id, frame.seq);
    auto it = twins_.find(frame.device_id);
    if (it == twins_.end()) {
        it = twins_.emplace(frame.device_id, twin::make_twin(frame.device_id, config_.scaling.resolution)).first;
    }
    twin::TwinState& twin_state = it->second;

    twin::FeatureImage image;
    try {
        const double dt = twin_state.last_t_ms < 0
                              ? static_cast<double>(config_.fleet.tick_ms) / 1000.0
                              : static_cast<double>(frame.t_ms - twin_state.last_t_ms) / 1000.0;
        twin_state = twin::step_twin(twin_state, frame, dt);
        ++twin_steps_;
        image = twin::rasterize(twin_state);
    } catch (const Error& e) {
        rethrow_with("twin-engine", rid, e);
    }

    cnn::RiskPrediction local;
    try {
        const auto net = store_.snapshot();
        local = cnn::forward(*net, image.tensor, frame.device_id, frame.t_ms, config_.fusion.threshold);
    } catch (const Error& e) {
        rethrow_with("scaled-cnn", rid, e);
    }

    try {
        const auto truth = truth_(frame.device_id, frame.t_ms);
        std::optional<int> label;
        if (truth) label = truth->outcome;
        auto event = state_.publish(twin_state, image, local, label);
        if (truth) {
            const auto result = state_.apply_outcome(*truth);
            ++outcomes_applied_;
            if (result.anomaly) ++anomalies_;
        }
        return event;
    } catch (const Error& e) {
        rethrow_with("fusion", rid, e);
    }
}

Scenario::Scenario(ScenarioConfig config) : config_(std::move(config)) {
    cnn::NetParams net;
    if (!config_.paths.params_in.empty()) {
        net = cnn::load_params(config_.paths.params_in);
        config_.scaling = net.config;
    } else {
        net = cnn::build_net(config_.scaling, config_.net_seed);
    }
    store_ = std::make_unique<cnn::ModelStore>(std::move(net));
    state_ = std::make_unique<fusion::ServerState>(config_.fusion, *store_, config_.seed);
}

ExitReport Scenario::run() {
    std::unique_ptr<console::ConsoleServer> console;
    if (config_.serve) console = std::make_unique<console::ConsoleServer>(*state_, transport::parse_endpoint(*config_.serve));
    logging::info("run_start", {{"mode", to_string(config_.mode)}, {"seed", config_.seed}});

    ExitReport report;
    switch (config_.mode) {
        case Mode::replay: report = run_replay(); break;
        case Mode::live: report = run_live(); break;
        case Mode::eval: report = run_eval(); break;
    }
    logging::info("run_done", to_json(report));

    if (console) {
        // Keep the console up for inspection until asked to stop.
        while (!stop_.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    state_->close();
    return report;
}

void Scenario::finish(ExitReport& report, LogSet& logs, const TruthTable& truth,
                      const std::vector<fusion::OutcomeRecord>& clinician) {
    TruthTable merged = truth;
    for (const auto& r : clinician) reconcile(merged, r);
    for (const auto& r : state_->outcomes()) reconcile(merged, r);
    std::vector<const fusion::OutcomeRecord*> ordered;
    for (const auto& [_, r] : merged) ordered.push_back(&r);
    std::ranges::stable_sort(ordered, {}, [](const fusion::OutcomeRecord* r) { return std::tie(r->t_ms, r->patient_id); });
    std::string text;
    for (const auto* r : ordered) text += outcome_json(*r).dump() + "\n";
    logs.flush();
    write_file(config_.paths.output / "outcomes.ndjson", text);

    report.logs = logs.paths();
    report.logs["outcomes"] = (config_.paths.output / "outcomes.ndjson").string();
    report.predictions = state_->event_count();
    report.fine_tunes = state_->fine_tunes();
    report.model_version = store_->version();
    report.predictions_sha256 = sha256_file(logs.path("predictions"));
    report.stopped_early = stop_.load();

    if (!config_.paths.params_out.empty()) {
        cnn::save_params(*store_->snapshot(), config_.paths.params_out);
        report.logs["params"] = config_.paths.params_out.string();
    }
}

ExitReport Scenario::run_replay() {
    const fs::path in = config_.paths.input;
    if (!fs::is_directory(in)) fail(Errc::config, "replay input " + in.string() + " is not a directory");
    fs::path frames = in / "frames.ndjson";
    if (!fs::exists(frames)) frames = in / "raw.ndjson";
    if (!fs::exists(frames)) fail(Errc::config, "replay input lacks frames.ndjson / raw.ndjson");

    TruthTable truth;
    if (fs::exists(in / "outcomes.ndjson")) truth = read_outcomes(in / "outcomes.ndjson");

    ExitReport report;
    report.mode = Mode::replay;
    if (fs::exists(in / "deliveries.ndjson")) {
        std::set<std::pair<std::string, std::uint64_t>> generated;
        std::set<std::pair<std::string, std::uint64_t>> delivered;
        for (const auto& line : read_lines(in / "deliveries.ndjson")) {
            const auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) fail(Errc::parse, "deliveries.ndjson: malformed line");
            std::pair<std::string, std::uint64_t> key{j.value("device_id", ""), j.value("seq", std::uint64_t{0})};
            generated.insert(key);
            if (j.value("status", "") == "delivered") delivered.insert(key);
        }
        report.frames_generated = generated.size();
        report.permanently_dropped = generated.size() - delivered.size();
    }

    LogSet logs(config_.paths.output);
    logs.open("predictions");
    gateway::Gateway gw(config_.gateway_window);
    gw.set_log_sink([&](std::string_view name, const std::string& line) { logs.append(std::string(name), line); });
    state_->set_event_sink([&](const fusion::PredictionEvent& e) { logs.append("predictions", fusion::encode_event(e)); });
    Engine engine(config_, *store_, *state_, lookup_in(truth));

    std::size_t line_no = 0;
    try {
        for (const auto& line : read_lines(frames)) {
            if (stop_.load()) break;
            ++line_no;
            ++report.frames_received;
            gateway::IngestResult r;
            try {
                r = gw.ingest(line);
            } catch (const Error& e) {
                rethrow_with("gateway", frames.filename().string() + ":" + std::to_string(line_no), e);
            }
            if (r.normalized) engine.process(*r.normalized);
        }
    } catch (...) {
        state_->set_event_sink({});
        logs.flush();
        throw;
    }
    state_->set_event_sink({});

    report.frames_accepted = gw.accepted();
    report.duplicates = gw.duplicates();
    report.twin_steps = engine.twin_steps();
    report.outcomes_applied = engine.outcomes_applied();
    report.anomalies = engine.anomalies();
    finish(report, logs, truth, {});
    return report;
}

ExitReport Scenario::run_live() {
    ExitReport report;
    report.mode = Mode::live;
    LogSet logs(config_.paths.output);
    logs.open("predictions");
    gateway::Gateway gw(config_.gateway_window);
    gw.set_log_sink([&](std::string_view name, const std::string& line) { logs.append(std::string(name), line); });
    state_->set_event_sink([&](const fusion::PredictionEvent& e) { logs.append("predictions", fusion::encode_event(e)); });
    Engine engine(config_, *store_, *state_, lookup_in(config_.fleet));

    BoundedQueue<gateway::NormalizedFrame> queue(config_.queue_capacity);
    // Bind before any thread starts so a bind failure unwinds cleanly.
    transport::IngestServer server(transport::parse_endpoint(config_.gateway_bind), [&](std::string_view line) {
        const auto r = gw.ingest(line);
        if (!r.normalized) return transport::AckByte::duplicate;
        return queue.push(*r.normalized) ? transport::AckByte::accepted : transport::AckByte::rejected;
    });
    std::exception_ptr stage_error;
    std::thread stage([&] {
        while (auto frame = queue.pop()) {
            if (stage_error) continue;  // drain so producers never block
            try {
                engine.process(*frame);
            } catch (...) {
                stage_error = std::current_exception();
                stop_.store(true);
            }
        }
    });

    std::optional<telemetry::FrameLog> log;
    std::exception_ptr fleet_error;
    try {
        log = transport::run_fleet_live(config_.fleet, {"127.0.0.1", server.port()}, {3, &stop_});
    } catch (...) {
        fleet_error = std::current_exception();
    }
    server.stop();
    queue.close();
    stage.join();
    state_->set_event_sink({});

    if (log) {
        telemetry::write_frame_log(*log, config_.paths.output);
        report.frames_generated = log->frames.size();
        report.frames_received = log->received.size();
        report.permanently_dropped = log->permanently_dropped();
        report.transport_errors = static_cast<std::size_t>(std::ranges::count_if(
            log->deliveries, [](const telemetry::DeliveryRecord& d) { return !d.error.empty(); }));
    }
    report.frames_accepted = gw.accepted();
    report.duplicates = gw.duplicates();
    report.twin_steps = engine.twin_steps();
    report.outcomes_applied = engine.outcomes_applied();
    report.anomalies = engine.anomalies();
    finish(report, logs, log ? truth_from_log(*log) : TruthTable{}, {});
    report.logs["frames"] = (config_.paths.output / "frames.ndjson").string();
    report.logs["deliveries"] = (config_.paths.output / "deliveries.ndjson").string();

    if (stage_error) std::rethrow_exception(stage_error);
    if (fleet_error) std::rethrow_exception(fleet_error);
    if (report.transport_errors > 0) {
        logging::error("transport_errors", {{"count", report.transport_errors}});
        fail(Errc::transport, std::to_string(report.transport_errors) +
                                  " delivery attempts failed to reach the gateway (see deliveries.ndjson)");
    }
    return report;
}

ExitReport Scenario::run_eval() {
    ExitReport report;
    report.mode = Mode::eval;
    const auto data = eval::synthetic_dataset(config_.eval.data);
    std::vector<eval::BenchmarkConfig> configs;
    for (double phi : config_.eval.phis) {
        configs.push_back({phi_name(phi), cnn::compound_scale(phi, config_.scaling.coeffs, config_.scaling.base)});
    }
    const auto results = eval::benchmark(configs, data, config_.eval.budget, config_.eval.split_seed);

    std::vector<eval::MetricsReport> rows;
    auto matrices = nlohmann::ordered_json::array();
    for (const auto& r : results) {
        rows.push_back(r.report);
        matrices.push_back(eval::confusion_json(r.report.model, r.matrix));
        logging::info("benchmark_row", {{"model", r.report.model}, {"accuracy", r.report.accuracy}});
    }
    fs::create_directories(config_.paths.output);
    write_file(config_.paths.output / "report.csv", eval::to_csv(rows));
    write_file(config_.paths.output / "confusion.json", matrices.dump(2) + "\n");
    report.report_rows = rows.size();
    report.logs["report"] = (config_.paths.output / "report.csv").string();
    report.logs["confusion"] = (config_.paths.output / "confusion.json").string();
    report.stopped_early = stop_.load();
    return report;
}

ExitReport run_scenario(const ScenarioConfig& config) {
    Scenario s(config);
    return s.run();
}

ReportBundle export_report(const fs::path& in, const fs::path& out) {
    const fs::path predictions = in / "predictions.ndjson";
    const fs::path outcomes = in / "outcomes.ndjson";
    if (!fs::exists(predictions)) fail(Errc::config, "missing " + predictions.string());
    if (!fs::exists(outcomes)) fail(Errc::config, "missing " + outcomes.string());
    const TruthTable truth = read_outcomes(outcomes);

    ReportBundle bundle;
    std::vector<int> decisions;
    std::vector<int> labels;
    std::vector<double> scores;
    std::size_t n = 0;
    for (const auto& line : read_lines(predictions)) {
        ++n;
        fusion::PredictionEvent e;
        try {
            e = fusion::event_from_json(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& ex) {
            fail(Errc::parse, predictions.string() + " line " + std::to_string(n) + ": " + ex.what());
        }
        ++bundle.predictions;
        const auto it = truth.find({e.prediction.patient_id, e.prediction.t_ms});
        if (it == truth.end()) {
            ++bundle.excluded;
            continue;
        }
        decisions.push_back(e.prediction.decision ? 1 : 0);
        labels.push_back(it->second.outcome);
        scores.push_back(e.prediction.p_arrest);
    }
    bundle.joined = decisions.size();
    if (bundle.joined == 0) fail(Errc::validation, "no prediction could be joined with an outcome");
    bundle.matrix = eval::confusion(decisions, labels);
    bundle.metrics = eval::classification_metrics(bundle.matrix);
    bundle.metrics.model = "cardiotwin";
    const bool both = std::ranges::count(labels, 1) > 0 && std::ranges::count(labels, 0) > 0;
    if (both) bundle.metrics.auc = eval::auc(scores, labels);

    fs::create_directories(out);
    const std::vector<eval::MetricsReport> rows{bundle.metrics};
    write_file(out / "report.csv", eval::to_csv(rows));
    write_file(out / "confusion.json", eval::confusion_json(bundle.metrics.model, bundle.matrix).dump(2) + "\n");
    nlohmann::ordered_json summary;
    summary["predictions"] = bundle.predictions;
    summary["joined"] = bundle.joined;
    summary["excluded"] = bundle.excluded;
    summary["outcomes"] = truth.size();
    summary["accuracy"] = bundle.metrics.accuracy;
    const auto opt = [](const std::optional<double>& v) {
        return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    summary["precision"] = opt(bundle.metrics.precision);
    summary["recall"] = opt(bundle.metrics.recall);
    summary["f1"] = opt(bundle.metrics.f1);
    summary["specificity"] = opt(bundle.metrics.specificity);
    summary["auc"] = opt(bundle.metrics.auc);
    write_file(out / "summary.json", summary.dump(2) + "\n");
    return bundle;
}

std::vector<cnn::Example> twin_dataset(const telemetry::FleetConfig& fleet, std::size_t resolution,
                                       std::size_t gateway_window) {
    const auto log = telemetry::run_fleet(fleet);
    const TruthTable truth = truth_from_log(log);
    gateway::Gateway gw(gateway_window);
    std::map<std::string, twin::TwinState> twins;
    std::vector<cnn::Example> out;
    for (const auto& line : log.received) {
        const auto r = gw.ingest(line);
        if (!r.normalized) continue;
        const auto& f = *r.normalized;
        auto it = twins.find(f.device_id);
        if (it == twins.end()) it = twins.emplace(f.device_id, twin::make_twin(f.device_id, resolution)).first;
        const double dt = it->second.last_t_ms < 0 ? fleet.tick_ms / 1000.0 : (f.t_ms - it->second.last_t_ms) / 1000.0;
        it->second = twin::step_twin(it->second, f, dt);
        const auto label = truth.find({f.device_id, f.t_ms});
        out.push_back({twin::rasterize(it->second).tensor, label == truth.end() ? 0 : label->second.outcome});
    }
    return out;
}

}  // namespace cardiotwin::pipeline
