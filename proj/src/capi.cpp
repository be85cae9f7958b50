#include "cardiotwin/cardiotwin.h"

#include "cardiotwin/error.hpp"
#include "cardiotwin/evalkit.hpp"
#include "cardiotwin/pipeline.hpp"
#include "cardiotwin/telemetry.hpp"
#include "cardiotwin/util.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <set>
#include <string>

using namespace cardiotwin;

struct ct_scenario {
    std::unique_ptr<pipeline::Scenario> scenario;
};

namespace {

thread_local std::string last_error;

ct_status status_of(Errc code) noexcept { return static_cast<ct_status>(static_cast<int>(code) + 1); }

template <typename F>
ct_status guarded(F&& body) noexcept {
    try {
        body();
        last_error.clear();
        return CT_OK;
    } catch (const Error& e) {
        last_error = e.what();
        return status_of(e.code());
    } catch (const nlohmann::json::exception& e) {
        last_error = e.what();
        return CT_ERR_PARSE;
    } catch (const std::exception& e) {
        last_error = e.what();
        return CT_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown error";
        return CT_ERR_INTERNAL;
    }
}

char* dup(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void put(char** out, const nlohmann::ordered_json& j) {
    if (out) *out = dup(j.dump());
}

nlohmann::json parse_json(const char* text, std::string_view what) {
    if (!text) fail(Errc::config, std::string(what) + " is null");
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) fail(Errc::parse, std::string(what) + " is not valid JSON");
    return j;
}

std::string path_arg(const char* text, std::string_view what) {
    if (!text || !*text) fail(Errc::config, std::string(what) + " is empty");
    return text;
}

nlohmann::ordered_json metrics_json(const eval::MetricsReport& m) {
    const auto opt = [](const std::optional<double>& v) {
        return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    return {{"accuracy", m.accuracy},   {"precision", opt(m.precision)},
            {"recall", opt(m.recall)}, {"f1", opt(m.f1)},
            {"specificity", opt(m.specificity)}, {"auc", opt(m.auc)}};
}

nlohmann::ordered_json train(const nlohmann::json& j) {
    static const std::set<std::string> known{"net",    "data",       "samples", "noise",    "fleet",     "epochs",
                                             "batch_size", "lr",     "clip_norm", "seed",   "split_seed", "params_in",
                                             "params_out"};
    if (!j.is_object()) fail(Errc::config, "train config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) fail(Errc::config, "unknown train key '" + key + "'");
    }
    const auto seed = j.value("seed", std::uint64_t{0});
    const nlohmann::json net_json = j.value("net", nlohmann::json::object());

    cnn::NetParams net;
    if (j.contains("params_in")) {
        net = cnn::load_params(j["params_in"].get<std::string>());
    } else {
        net = cnn::build_net(cnn::scaling_from_json(net_json), net_json.value("seed", seed));
    }

    const std::string source = j.value("data", std::string("synthetic"));
    std::vector<cnn::Example> data;
    if (source == "synthetic") {
        eval::SyntheticSpec spec;
        spec.samples = j.value("samples", spec.samples);
        spec.noise = j.value("noise", spec.noise);
        spec.channels = net.config.base.input_channels;
        spec.resolution = net.config.base.resolution;
        spec.seed = seed;
        data = eval::synthetic_dataset(spec);
        if (net.config.resolution != spec.resolution) {
            for (auto& ex : data) ex.image = eval::resample(ex.image, net.config.resolution);
        }
    } else if (source == "twin") {
        nlohmann::json fleet = j.value("fleet", nlohmann::json::object());
        if (!fleet.contains("seed")) fleet["seed"] = seed;
        data = pipeline::twin_dataset(telemetry::fleet_from_json(fleet), net.config.resolution);
    } else {
        fail(Errc::config, "train data must be 'synthetic' or 'twin'");
    }

    const auto split = eval::split_dataset(data, j.value("split_seed", seed));
    cnn::TrainBudget budget;
    budget.epochs = j.value("epochs", budget.epochs);
    budget.batch_size = j.value("batch_size", budget.batch_size);
    budget.lr = j.value("lr", budget.lr);
    budget.clip_norm = j.value("clip_norm", budget.clip_norm);
    budget.seed = seed;

    const auto start = std::chrono::steady_clock::now();
    const double loss = cnn::train(net, split.train, budget);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto scored = eval::evaluate(net, split.test);
    auto metrics = eval::classification_metrics(scored.matrix);
    if (std::ranges::count(scored.labels, 1) > 0 && std::ranges::count(scored.labels, 0) > 0) {
        metrics.auc = eval::auc(scored.scores, scored.labels);
    }

    nlohmann::ordered_json out;
    out["data"] = source;
    out["examples"] = data.size();
    out["train"] = split.train.size();
    out["test"] = split.test.size();
    out["epochs"] = budget.epochs;
    out["final_loss"] = loss;
    out["metrics"] = metrics_json(metrics);
    out["params"] = net.param_count();
    out["macs"] = net.arch->macs();
    out["resolution"] = net.config.resolution;
    out["training_time_s"] = seconds;
    out["checksum"] = net.checksum();
    if (j.contains("params_out")) {
        const auto path = j["params_out"].get<std::string>();
        cnn::save_params(net, path);
        out["params_out"] = path;
    }
    return out;
}

}  // namespace

extern "C" {

const char* ct_version(void) { return "0.1.0"; }

const char* ct_last_error(void) { return last_error.c_str(); }

const char* ct_status_name(ct_status status) {
    if (status == CT_OK) return "ok";
    if (status == CT_ERR_INTERNAL) return "internal";
    const int code = static_cast<int>(status) - 1;
    if (code < 0 || code > static_cast<int>(Errc::io)) return "unknown";
    return errc_name(static_cast<Errc>(code)).data();
}

void ct_free(char* text) { std::free(text); }

ct_status ct_scenario_create(const char* config_json, ct_scenario** out) {
    return guarded([&] {
        if (!out) fail(Errc::config, "output handle is null");
        *out = nullptr;
        auto config = pipeline::scenario_from_json(parse_json(config_json, "scenario config"));
        auto handle = std::make_unique<ct_scenario>();
        handle->scenario = std::make_unique<pipeline::Scenario>(std::move(config));
        *out = handle.release();
    });
}

void ct_scenario_destroy(ct_scenario* scenario) { delete scenario; }

ct_status ct_scenario_config(const ct_scenario* scenario, char** config_json) {
    return guarded([&] {
        if (!scenario) fail(Errc::config, "scenario handle is null");
        put(config_json, pipeline::to_json(scenario->scenario->config()));
    });
}

ct_status ct_scenario_run(ct_scenario* scenario, char** report_json) {
    return guarded([&] {
        if (!scenario) fail(Errc::config, "scenario handle is null");
        put(report_json, pipeline::to_json(scenario->scenario->run()));
    });
}

void ct_scenario_request_stop(ct_scenario* scenario) {
    if (scenario) scenario->scenario->request_stop();
}

ct_status ct_report_export(const char* in_dir, const char* out_dir, char** summary_json) {
    return guarded([&] {
        const auto out = path_arg(out_dir, "output directory");
        pipeline::export_report(path_arg(in_dir, "input directory"), out);
        put(summary_json, nlohmann::ordered_json::parse(read_file(std::filesystem::path(out) / "summary.json")));
    });
}

ct_status ct_simulate(const char* fleet_json, const char* out_dir, char** summary_json) {
    return guarded([&] {
        const auto fleet = telemetry::fleet_from_json(parse_json(fleet_json, "fleet config"));
        const auto out = path_arg(out_dir, "output directory");
        const auto log = telemetry::run_fleet(fleet);
        telemetry::write_frame_log(log, out);
        put(summary_json, {{"devices", fleet.device_count},
                           {"ticks", fleet.horizon_ticks},
                           {"frames", log.frames.size()},
                           {"delivered", log.delivered_count()},
                           {"permanently_dropped", log.permanently_dropped()},
                           {"received", log.received.size()},
                           {"sha256", telemetry::frame_log_hash(log)},
                           {"output", out}});
    });
}

ct_status ct_net_info(const char* scaling_json, char** info_json) {
    return guarded([&] {
        const auto config = cnn::scaling_from_json(parse_json(scaling_json, "scaling config"));
        const cnn::Architecture arch(config);
        auto j = nlohmann::ordered_json::parse(cnn::to_json(config).dump());
        j["params"] = arch.param_count();
        j["macs"] = arch.macs();
        j["layers"] = arch.layer_count();
        put(info_json, j);
    });
}

ct_status ct_train(const char* train_json, char** result_json) {
    return guarded([&] { put(result_json, train(parse_json(train_json, "train config"))); });
}

}  // extern "C"
