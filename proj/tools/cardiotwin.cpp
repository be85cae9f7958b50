#include "cardiotwin/cardiotwin.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <signal.h>

namespace {

std::atomic<ct_scenario*> active{nullptr};

extern "C" void on_interrupt(int) {
    if (auto* s = active.load()) ct_scenario_request_stop(s);
}

void install_interrupt_handler() {
    struct sigaction sa {};
    sa.sa_handler = on_interrupt;
    sigemptyset(&sa.sa_mask);
    sa.sa_flags = SA_RESETHAND;  // a second Ctrl-C terminates immediately
    sigaction(SIGINT, &sa, nullptr);
    sigaction(SIGTERM, &sa, nullptr);
}

int report_failure(ct_status status) {
    nlohmann::ordered_json j{{"level", "error"}, {"status", ct_status_name(status)}, {"message", ct_last_error()}};
    std::cerr << j.dump() << '\n';
    return static_cast<int>(status);
}

// Prints a library-owned JSON string pretty and frees it.
int emit(ct_status status, char* text) {
    if (status != CT_OK) return report_failure(status);
    std::cout << nlohmann::ordered_json::parse(text).dump(2) << '\n';
    ct_free(text);
    return 0;
}

nlohmann::json read_config(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    std::ifstream in(path);
    if (!in) throw CLI::ValidationError("--config", "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    auto j = nlohmann::json::parse(ss.str(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw CLI::ValidationError("--config", path + " is not a JSON object");
    return j;
}

template <typename T>
void set_if(nlohmann::json& j, const char* key, const std::optional<T>& v) {
    if (v) j[key] = *v;
}

struct FleetFlags {
    std::optional<unsigned> devices;
    std::optional<std::uint64_t> ticks;
    std::optional<unsigned> tick_ms;
    std::optional<double> drop_rate;

    void add(CLI::App* app) {
        app->add_option("--devices", devices, "number of simulated devices");
        app->add_option("--ticks", ticks, "ticks per device");
        app->add_option("--tick-ms", tick_ms, "milliseconds per tick");
        app->add_option("--drop-rate", drop_rate, "per-attempt link drop probability")->check(CLI::Range(0.0, 1.0));
    }
    void apply(nlohmann::json& fleet) const {
        set_if(fleet, "devices", devices);
        set_if(fleet, "ticks", ticks);
        set_if(fleet, "tick_ms", tick_ms);
        set_if(fleet, "drop_rate", drop_rate);
    }
};

struct NetFlags {
    std::optional<double> phi, alpha, beta, gamma;

    void add(CLI::App* app) {
        app->add_option("--phi", phi, "compound scaling exponent")->check(CLI::NonNegativeNumber);
        app->add_option("--alpha", alpha, "depth coefficient");
        app->add_option("--beta", beta, "width coefficient");
        app->add_option("--gamma", gamma, "resolution coefficient");
    }
    void apply(nlohmann::json& net) const {
        set_if(net, "phi", phi);
        set_if(net, "alpha", alpha);
        set_if(net, "beta", beta);
        set_if(net, "gamma", gamma);
    }
};

nlohmann::json& child(nlohmann::json& j, const char* key) {
    if (!j.contains(key)) j[key] = nlohmann::json::object();
    return j[key];
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Digital-twin cardiac-arrest prediction pipeline"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(ct_version()));

    // run
    auto* run = app.add_subcommand("run", "run a scenario in live, replay or eval mode");
    std::string config_path;
    std::optional<std::string> mode, serve, input, out, params_in, params_out;
    std::optional<std::uint64_t> seed, net_seed;
    FleetFlags run_fleet;
    NetFlags run_net;
    run->add_option("--config", config_path, "scenario JSON file")->check(CLI::ExistingFile);
    run->add_option("--mode", mode, "live, replay or eval")->check(CLI::IsMember({"live", "replay", "eval"}));
    run->add_option("--seed", seed, "scenario seed, propagated to every module");
    run->add_option("--serve", serve, "serve the console endpoints on host:port");
    run->add_option("--input", input, "replay input directory");
    run->add_option("--out", out, "output directory");
    run->add_option("--net-seed", net_seed, "weight initialization seed");
    run->add_option("--params-in", params_in, "load trained params");
    run->add_option("--params-out", params_out, "save params after the run");
    run_fleet.add(run);
    run_net.add(run);

    // report
    auto* report = app.add_subcommand("report", "join predictions with outcomes into a report bundle");
    std::string report_in, report_out;
    report->add_option("--in", report_in, "run output directory")->required();
    report->add_option("--out", report_out, "bundle directory")->required();

    // simulate
    auto* simulate = app.add_subcommand("simulate", "simulate a fleet and write replayable logs");
    FleetFlags sim_fleet;
    std::uint64_t sim_seed = 0;
    std::string sim_out = "sim";
    sim_fleet.add(simulate);
    simulate->add_option("--seed", sim_seed, "fleet seed");
    simulate->add_option("--out", sim_out, "output directory");

    // net
    auto* net = app.add_subcommand("net", "show the resolved architecture for a scaling config");
    NetFlags net_flags;
    net_flags.add(net);

    // train
    auto* train = app.add_subcommand("train", "train offline on the synthetic or twin dataset");
    NetFlags train_net;
    std::uint64_t train_seed = 0;
    std::optional<std::size_t> samples, epochs, batch_size;
    std::optional<double> lr;
    std::string data = "synthetic";
    std::optional<std::string> train_in, train_out;
    FleetFlags train_fleet;
    train_net.add(train);
    train->add_option("--seed", train_seed, "data, split and init seed");
    train->add_option("--data", data, "synthetic or twin")->check(CLI::IsMember({"synthetic", "twin"}));
    train->add_option("--samples", samples, "synthetic sample count");
    train->add_option("--epochs", epochs, "training epochs");
    train->add_option("--batch-size", batch_size, "minibatch size");
    train->add_option("--lr", lr, "learning rate");
    train->add_option("--params-in", train_in, "start from saved params");
    train->add_option("--params-out", train_out, "save trained params");
    train_fleet.add(train);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*run) {
            nlohmann::json cfg = read_config(config_path);
            set_if(cfg, "mode", mode);
            set_if(cfg, "seed", seed);
            if (serve) cfg["serve"] = *serve;
            run_fleet.apply(child(cfg, "fleet"));
            run_net.apply(child(cfg, "net"));
            if (net_seed) child(cfg, "net")["seed"] = *net_seed;
            auto& paths = child(cfg, "paths");
            set_if(paths, "input", input);
            set_if(paths, "output", out);
            set_if(paths, "params_in", params_in);
            set_if(paths, "params_out", params_out);

            ct_scenario* scenario = nullptr;
            if (const auto st = ct_scenario_create(cfg.dump().c_str(), &scenario); st != CT_OK) {
                return report_failure(st);
            }
            active.store(scenario);
            install_interrupt_handler();
            char* text = nullptr;
            const auto st = ct_scenario_run(scenario, &text);
            active.store(nullptr);
            ct_scenario_destroy(scenario);
            return emit(st, text);
        }
        if (*report) {
            char* text = nullptr;
            const auto st = ct_report_export(report_in.c_str(), report_out.c_str(), &text);
            return emit(st, text);
        }
        if (*simulate) {
            nlohmann::json fleet{{"seed", sim_seed}};
            sim_fleet.apply(fleet);
            char* text = nullptr;
            const auto st = ct_simulate(fleet.dump().c_str(), sim_out.c_str(), &text);
            return emit(st, text);
        }
        if (*net) {
            nlohmann::json scaling = nlohmann::json::object();
            net_flags.apply(scaling);
            char* text = nullptr;
            const auto st = ct_net_info(scaling.dump().c_str(), &text);
            return emit(st, text);
        }
        if (*train) {
            nlohmann::json cfg{{"seed", train_seed}, {"data", data}};
            train_net.apply(child(cfg, "net"));
            set_if(cfg, "samples", samples);
            set_if(cfg, "epochs", epochs);
            set_if(cfg, "batch_size", batch_size);
            set_if(cfg, "lr", lr);
            set_if(cfg, "params_in", train_in);
            set_if(cfg, "params_out", train_out);
            if (data == "twin") train_fleet.apply(child(cfg, "fleet"));
            char* text = nullptr;
            const auto st = ct_train(cfg.dump().c_str(), &text);
            return emit(st, text);
        }
    } catch (const CLI::Error& e) {
        return app.exit(e);
    }
    return 0;
}
