// Acceptance suite: one PASS/FAIL line per criterion. Every library result is
// compared against an oracle written here, independent of the library code.

#include "cardiotwin/cnn.hpp"
#include "cardiotwin/evalkit.hpp"
#include "cardiotwin/fusion.hpp"
#include "cardiotwin/pipeline.hpp"
#include "cardiotwin/telemetry.hpp"
#include "cardiotwin/twin.hpp"
#include "cardiotwin/util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

using namespace cardiotwin;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

char buf[512];

template <typename... Args>
std::string fmt(const char* f, Args... args) {
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double rel_err(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-7});
    return std::abs(a - b) / scale;
}

// 1. Reported (precision, recall, F1) rows of the three compared models.
Outcome f1_identity() {
    const std::vector<eval::F1Row> rows{{0.925, 0.9482, 0.9365}, {0.9077, 0.9192, 0.9134}, {0.8903, 0.8933, 0.8918}};
    const auto report = eval::f1_consistency(rows, 5e-4);
    double worst = 0.0;
    for (const auto& r : rows) {
        const double oracle = 2.0 * r.precision * r.recall / (r.precision + r.recall);
        worst = std::max(worst, std::abs(oracle - r.reported_f1));
    }
    const bool agree = std::abs(report.max_deviation - worst) < 1e-12;
    return {report.consistent() && agree && worst <= 5e-4,
            fmt("max |F1 - 2PR/(P+R)| = %.2e over %zu rows (tol 5e-4)", worst, rows.size())};
}

// 2. Random confusion matrices, metrics recounted from expanded label pairs.
Outcome metric_fuzz() {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> count(0, 60);
    double worst = 0.0;
    bool defined_ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<int> pred;
        std::vector<int> label;
        const int cells[4] = {count(rng), count(rng), count(rng), count(rng)};  // tp fp tn fn
        for (int i = 0; i < cells[0]; ++i) pred.push_back(1), label.push_back(1);
        for (int i = 0; i < cells[1]; ++i) pred.push_back(1), label.push_back(0);
        for (int i = 0; i < cells[2]; ++i) pred.push_back(0), label.push_back(0);
        for (int i = 0; i < cells[3]; ++i) pred.push_back(0), label.push_back(1);
        if (pred.empty()) continue;
        std::vector<std::size_t> order(pred.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<int> p2, l2;
        for (auto i : order) p2.push_back(pred[i]), l2.push_back(label[i]);

        double tp = 0, fp = 0, tn = 0, fn = 0;
        for (std::size_t i = 0; i < p2.size(); ++i) {
            if (p2[i] == 1 && l2[i] == 1) ++tp;
            if (p2[i] == 1 && l2[i] == 0) ++fp;
            if (p2[i] == 0 && l2[i] == 0) ++tn;
            if (p2[i] == 0 && l2[i] == 1) ++fn;
        }
        const auto m = eval::classification_metrics(eval::confusion(p2, l2));
        const auto check = [&](const std::optional<double>& got, double num, double den) {
            if (den == 0.0) {
                defined_ok = defined_ok && !got.has_value();
                return;
            }
            if (!got) {
                defined_ok = false;
                return;
            }
            worst = std::max(worst, std::abs(*got - num / den));
        };
        worst = std::max(worst, std::abs(m.accuracy - (tp + tn) / (tp + fp + tn + fn)));
        check(m.precision, tp, tp + fp);
        check(m.recall, tp, tp + fn);
        check(m.specificity, tn, tn + fp);
        if (tp + fp > 0 && tp + fn > 0) {
            const double pr = tp / (tp + fp);
            const double rc = tp / (tp + fn);
            check(m.f1, pr + rc > 0 ? 2 * pr * rc : 0.0, pr + rc);
        }
    }
    return {defined_ok && worst <= 1e-9, fmt("1000 matrices, max deviation %.2e (tol 1e-9)", worst)};
}

// 3. Trapezoid AUC against the pairwise concordance probability.
Outcome auc_oracle() {
    std::mt19937_64 rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = std::uniform_int_distribution<int>(2, 50)(rng);
        std::vector<double> scores;
        std::vector<int> labels;
        for (int i = 0; i < n; ++i) {
            scores.push_back(std::uniform_int_distribution<int>(0, 6)(rng) / 6.0);  // coarse grid forces ties
            labels.push_back(std::uniform_int_distribution<int>(0, 1)(rng));
        }
        labels[0] = 1;
        labels[1] = 0;
        double good = 0.0, pairs = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (labels[i] != 1 || labels[j] != 0) continue;
                pairs += 1.0;
                good += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
            }
        }
        worst = std::max(worst, std::abs(eval::auc(scores, labels) - good / pairs));
    }
    std::vector<double> scores;
    std::vector<int> labels;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 10000; ++i) {
        scores.push_back(u(rng));
        labels.push_back(i % 2);
    }
    const double random_auc = eval::auc(scores, labels);
    return {worst <= 1e-9 && std::abs(random_auc - 0.5) <= 0.02,
            fmt("200 instances max |AUC - concordance| = %.2e; random scorer AUC = %.4f", worst, random_auc)};
}

// 4. Backprop against central finite differences.
Outcome gradient_check() {
    auto net = cnn::build_net(cnn::compound_scale(0.0, {}), 4);
    if (net.param_count() > 5000) return {false, "net too large"};
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<cnn::Example> batch;
    for (int i = 0; i < 2; ++i) {
        Tensor img(net.arch->input_shape());
        for (auto& v : img.data()) v = g(rng);
        batch.push_back({img, i});
    }
    std::vector<double> grad;
    cnn::batch_gradient(net, batch, grad);
    std::uniform_int_distribution<std::size_t> pick(0, net.param_count() - 1);
    double worst = 0.0;
    const double h = 1e-5;
    for (int k = 0; k < 50; ++k) {
        const auto i = pick(rng);
        const double w = net.weights[i];
        net.weights[i] = w + h;
        const double up = cnn::batch_loss(net, batch);
        net.weights[i] = w - h;
        const double down = cnn::batch_loss(net, batch);
        net.weights[i] = w;
        worst = std::max(worst, rel_err(grad[i], (up - down) / (2 * h)));
    }
    return {worst < 1e-3, fmt("%zu params, 50 weights, max relative error %.2e (tol 1e-3)", net.param_count(), worst)};
}

// 5. MAC growth per unit phi, counted by walking the resolved layer shapes.
std::uint64_t mac_oracle(const cnn::ScalingConfig& c) {
    const auto out = [](std::size_t n, std::size_t k, std::size_t s) { return (n + 2 * (k / 2) - k) / s + 1; };
    std::size_t r = c.resolution;
    std::size_t ch = c.base.input_channels;
    std::uint64_t macs = 0;
    r = out(r, 3, 1);
    macs += static_cast<std::uint64_t>(r) * r * c.stem_width * ch * 9;
    ch = c.stem_width;
    for (const auto& st : c.stages) {
        for (std::size_t rep = 0; rep < st.repeats; ++rep) {
            const std::size_t stride = rep == 0 ? st.stride : 1;
            const std::size_t r2 = out(r, st.kernel, stride);
            macs += static_cast<std::uint64_t>(r2) * r2 * ch * st.kernel * st.kernel;  // depthwise
            macs += static_cast<std::uint64_t>(r2) * r2 * ch * st.width;                // pointwise
            r = r2;
            ch = st.width;
        }
    }
    macs += static_cast<std::uint64_t>(ch) * 2;  // classifier
    return macs;
}

Outcome flop_law() {
    const cnn::ScalingCoefficients k{1.2, 1.1, 1.15};
    const double constraint = k.alpha * k.beta * k.beta * k.gamma * k.gamma;
    const auto s0 = cnn::compound_scale(0.0, k);
    const auto s1 = cnn::compound_scale(1.0, k);
    const auto s2 = cnn::compound_scale(2.0, k);
    const cnn::BaseNetwork base;
    const bool identity = s0.stages == base.stages && s0.stem_width == base.stem_width &&
                          s0.resolution == base.resolution && s0.depth_multiplier == 1.0 &&
                          s0.width_multiplier == 1.0 && s0.resolution_multiplier == 1.0;
    const double m0 = static_cast<double>(cnn::count_macs(s0));
    const double m1 = static_cast<double>(cnn::count_macs(s1));
    const double m2 = static_cast<double>(cnn::count_macs(s2));
    const bool counted = cnn::count_macs(s0) == mac_oracle(s0) && cnn::count_macs(s1) == mac_oracle(s1) &&
                         cnn::count_macs(s2) == mac_oracle(s2);
    const double r1 = m1 / m0;
    const double r2 = m2 / m1;
    const bool pass = std::abs(constraint - 1.9203) < 5e-5 && identity && counted && r1 >= 1.5 && r1 <= 2.5 &&
                      r2 >= 1.5 && r2 <= 2.5;
    return {pass, fmt("alpha*beta^2*gamma^2 = %.4f; MAC ratios phi0->1 = %.3f, phi1->2 = %.3f; phi=0 identity %s",
                      constraint, r1, r2, identity ? "yes" : "no")};
}

// 6. Flag rate of standard-normal residuals with converged statistics.
Outcome three_sigma() {
    fusion::ResidualHistory history(100000);
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g(0.0, 1.0);
    std::size_t flagged = 0;
    const std::size_t n = 1000000;
    for (std::size_t i = 0; i < n; ++i) flagged += fusion::detect_anomaly(history, g(rng)).flagged ? 1 : 0;
    const double rate = static_cast<double>(flagged) / static_cast<double>(n);
    return {std::abs(rate - 0.0027) <= 0.0005, fmt("flag rate %.4f%% on 1e6 draws (target 0.27 +/- 0.05%%)", rate * 100)};
}

// 7. Convex decision fusion.
Outcome fusion_law() {
    const auto local = [](double p) {
        cnn::RiskPrediction r;
        r.patient_id = "dev-0001";
        r.p_arrest = p;
        return r;
    };
    const std::vector<fusion::Contribution> worked{{"a", 0.4, 0.25}, {"b", 0.8, 0.75}};
    const double example = fusion::fuse(local(0.9), worked, 0.2).p_arrest;
    bool pass = std::abs(example - 0.74) <= 1e-12;

    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    bool convex = true;
    bool invariant = true;
    for (double alpha : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        for (int trial = 0; trial < 200; ++trial) {
            const double p = u(rng);
            std::vector<fusion::Contribution> others;
            const int n = std::uniform_int_distribution<int>(1, 6)(rng);
            double wsum = 0.0, wp = 0.0;
            for (int i = 0; i < n; ++i) {
                others.push_back({"s" + std::to_string(i), u(rng), u(rng) + 0.01});
                wsum += others.back().weight;
                wp += others.back().weight * others.back().p;
            }
            const double oracle = alpha * p + (1.0 - alpha) * wp / wsum;
            worst = std::max(worst, std::abs(fusion::fuse(local(p), others, alpha).p_arrest - oracle));
        }
    }
    for (int trial = 0; trial < 1000; ++trial) {
        const double alpha = u(rng);
        const double p = u(rng);
        std::vector<fusion::Contribution> others;
        const int n = std::uniform_int_distribution<int>(1, 8)(rng);
        double lo = p, hi = p;
        for (int i = 0; i < n; ++i) {
            others.push_back({"s" + std::to_string(i), u(rng), u(rng) + 0.01});
            lo = std::min(lo, others.back().p);
            hi = std::max(hi, others.back().p);
        }
        const double fused = fusion::fuse(local(p), others, alpha).p_arrest;
        convex = convex && fused >= lo && fused <= hi;
        std::shuffle(others.begin(), others.end(), rng);
        invariant = invariant && std::abs(fusion::fuse(local(p), others, alpha).p_arrest - fused) <= 1e-12;
    }
    pass = pass && worst <= 1e-12 && convex && invariant;
    return {pass, fmt("worked value %.12f; closed-form deviation %.2e; convex %s; permutation-invariant %s", example,
                      worst, convex ? "yes" : "no", invariant ? "yes" : "no")};
}

// 8. Windkessel update against RK4 on the same ODE.
double rk4(double p, double q, double r, double c, double t_end) {
    const double h = r * c / 2000.0;
    const auto f = [&](double x) { return q / c - x / (r * c); };
    double t = 0.0;
    while (t < t_end - 1e-15) {
        const double s = std::min(h, t_end - t);
        const double k1 = f(p), k2 = f(p + 0.5 * s * k1), k3 = f(p + 0.5 * s * k2), k4 = f(p + s * k3);
        p += s / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
        t += s;
    }
    return p;
}

Outcome twin_dynamics() {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> uq(0.1, 5.0), ur(0.2, 3.0), uc(0.2, 3.0), ufrac(0.01, 0.95), up(0.0, 10.0);
    double worst_fixed = 0.0;
    double worst_ode = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const double q = uq(rng), r = ur(rng), c = uc(rng), p0 = up(rng);
        const double dt = ufrac(rng) * r * c;
        const int steps = static_cast<int>(std::ceil(30.0 * r * c / dt));
        double p = p0;
        for (int i = 0; i < steps; ++i) p = twin::windkessel_step(p, q, r, c, dt);
        worst_fixed = std::max(worst_fixed, std::abs(p - q * r));
        worst_ode = std::max(worst_ode, std::abs(p - rk4(p0, q, r, c, steps * dt)));
    }
    return {worst_fixed < 1e-3 && worst_ode < 1e-3,
            fmt("20 cases: max |P - QR| = %.2e, max |P - ODE| = %.2e (tol 1e-3)", worst_fixed, worst_ode)};
}

// 9. Full replay twice over a recorded 10 x 1000 run.
std::map<std::string, std::size_t> per_patient(const fs::path& log, const char* key) {
    std::map<std::string, std::size_t> counts;
    for (const auto& line : read_lines(log)) ++counts[nlohmann::json::parse(line).at(key).get<std::string>()];
    return counts;
}

Outcome replay_determinism() {
    const auto root = fs::temp_directory_path() / ("ct-acceptance-" + std::to_string(std::random_device{}()));
    const auto fleet = telemetry::make_fleet(10, 1000, 250, 9, 0.6);
    telemetry::write_frame_log(telemetry::run_fleet(fleet), root / "recorded");

    const auto run = [&](const std::string& name) {
        pipeline::ScenarioConfig c;
        c.mode = pipeline::Mode::replay;
        c.seed = 9;
        c.fleet = fleet;
        c.net_seed = 9;
        c.paths.input = root / "recorded";
        c.paths.output = root / name;
        return pipeline::run_scenario(c);
    };
    const auto a = run("a");
    const auto b = run("b");
    const bool same = a.predictions_sha256 == b.predictions_sha256 &&
                      a.predictions_sha256 == sha256_file(root / "a" / "predictions.ndjson") &&
                      read_file(root / "a" / "predictions.ndjson") == read_file(root / "b" / "predictions.ndjson");
    const bool totals = a.frames_generated == 10000 && a.frames_accepted == a.twin_steps &&
                        a.twin_steps == a.predictions &&
                        a.frames_accepted + a.permanently_dropped == a.frames_generated;
    const bool patients = per_patient(root / "a" / "raw.ndjson", "device_id") ==
                          per_patient(root / "a" / "predictions.ndjson", "patient_id");
    fs::remove_all(root);
    return {same && totals && patients,
            fmt("hash %s %s; generated %zu = accepted %zu + dropped %zu; twin steps %zu; predictions %zu; per-patient %s",
                a.predictions_sha256.substr(0, 12).c_str(), same ? "identical" : "DIFFERS", a.frames_generated,
                a.frames_accepted, a.permanently_dropped, a.twin_steps, a.predictions, patients ? "equal" : "DIFFER")};
}

// 10. Miniature net on the synthetic two-class set.
double linear_baseline(const eval::Split& split) {
    const std::size_t d = split.train.front().image.size();
    std::vector<double> w(d, 0.0);
    double b = 0.0;
    for (int epoch = 0; epoch < 20; ++epoch) {
        for (const auto& ex : split.train) {
            double z = b;
            for (std::size_t i = 0; i < d; ++i) z += w[i] * ex.image.data()[i];
            const double gz = 1.0 / (1.0 + std::exp(-z)) - ex.label;
            for (std::size_t i = 0; i < d; ++i) w[i] -= 0.001 * gz * ex.image.data()[i];
            b -= 0.001 * gz;
        }
    }
    std::size_t correct = 0;
    for (const auto& ex : split.test) {
        double z = b;
        for (std::size_t i = 0; i < d; ++i) z += w[i] * ex.image.data()[i];
        correct += (z >= 0.0) == (ex.label == 1) ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(split.test.size());
}

Outcome training_sanity() {
    eval::SyntheticSpec spec;
    spec.samples = 2000;
    spec.seed = 10;
    const auto data = eval::synthetic_dataset(spec);
    const auto split = eval::split_dataset(data, 10);
    const double linear = linear_baseline(split);

    auto net = cnn::build_net(cnn::compound_scale(0.0, {}), 10);
    cnn::TrainBudget budget;
    budget.seed = 10;
    cnn::train(net, split.train, budget);
    const auto m = eval::evaluate(net, split.test).matrix;
    const double acc = static_cast<double>(m.tp + m.tn) / static_cast<double>(m.total());
    return {acc >= 0.95 && linear < 0.75,
            fmt("held-out accuracy %.2f%% on %zu test images (>= 95%%); logistic baseline %.2f%%", acc * 100,
                split.test.size(), linear * 100)};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double budget_s;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "F1 identity on reported rows", 1.0, f1_identity},
        {2, "metric identity fuzz", 5.0, metric_fuzz},
        {3, "AUC oracle equivalence", 10.0, auc_oracle},
        {4, "gradient check", 30.0, gradient_check},
        {5, "compound-scaling FLOP law", 5.0, flop_law},
        {6, "3-sigma calibration", 10.0, three_sigma},
        {7, "fusion law", 5.0, fusion_law},
        {8, "twin dynamics", 5.0, twin_dynamics},
        {9, "end-to-end replay determinism", 60.0, replay_determinism},
        {10, "training sanity", 300.0, training_sanity},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs < c.budget_s;
        const bool pass = o.pass && in_time;
        failures += pass ? 0 : 1;
        std::printf("%s criterion %2d %s: %s [%.2f s of %.0f s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                    o.detail.c_str(), secs, c.budget_s);
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
