#include "cardiotwin/evalkit.hpp"

#include "cardiotwin/error.hpp"
#include "cardiotwin/util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace cardiotwin::eval {

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) {
        fail(Errc::validation, "predictions and labels differ in length (" + std::to_string(predictions.size()) +
                                   " vs " + std::to_string(labels.size()) + ")");
    }
    if (labels.empty()) fail(Errc::validation, "empty prediction list");
    ConfusionMatrix m;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int p = predictions[i];
        const int y = labels[i];
        if ((p != 0 && p != 1) || (y != 0 && y != 1)) fail(Errc::validation, "entries must be 0 or 1");
        if (p == 1 && y == 1) ++m.tp;
        else if (p == 1) ++m.fp;
        else if (y == 1) ++m.fn;
        else ++m.tn;
    }
    return m;
}

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::optional<double> f1_score(double precision, double recall) noexcept {
    if (precision + recall <= 0.0) return std::nullopt;
    return 2.0 * precision * recall / (precision + recall);
}

MetricsReport classification_metrics(const ConfusionMatrix& m) {
    if (m.total() == 0) fail(Errc::validation, "confusion matrix is empty");
    MetricsReport r;
    r.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(m.total());
    r.precision = ratio(m.tp, m.tp + m.fp);
    r.recall = ratio(m.tp, m.tp + m.fn);
    r.specificity = ratio(m.tn, m.tn + m.fp);
    if (r.precision && r.recall) r.f1 = f1_score(*r.precision, *r.recall);
    return r;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) fail(Errc::validation, "scores and labels differ in length");
    std::uint64_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) fail(Errc::validation, "labels must be 0 or 1");
        if (!std::isfinite(scores[i])) fail(Errc::validation, "non-finite score");
        pos += static_cast<std::uint64_t>(labels[i]);
    }
    const std::uint64_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) fail(Errc::validation, "AUC needs both classes");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    // Walk thresholds from high to low; each tie group is one ROC segment.
    double area = 0.0;
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::uint64_t gp = 0;
        std::uint64_t gn = 0;
        const double s = scores[order[i]];
        for (; i < order.size() && scores[order[i]] == s; ++i) {
            if (labels[order[i]]) ++gp;
            else ++gn;
        }
        area += static_cast<double>(gn) * (static_cast<double>(tp) + 0.5 * static_cast<double>(gp));
        tp += gp;
        fp += gn;
    }
    return area / (static_cast<double>(pos) * static_cast<double>(neg));
}

bool ConsistencyReport::consistent() const noexcept {
    return std::none_of(rows.begin(), rows.end(), [](const ConsistencyRow& r) { return r.flagged; });
}

ConsistencyReport f1_consistency(std::span<const F1Row> rows, double tolerance) {
    ConsistencyReport report;
    for (const auto& row : rows) {
        ConsistencyRow r{row.precision, row.recall, row.reported_f1};
        r.recomputed_f1 = f1_score(row.precision, row.recall).value_or(0.0);
        r.deviation = std::abs(r.recomputed_f1 - row.reported_f1);
        r.flagged = r.deviation >= tolerance;
        report.max_deviation = std::max(report.max_deviation, r.deviation);
        report.rows.push_back(r);
    }
    return report;
}

std::vector<cnn::Example> synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.samples == 0 || spec.channels == 0 || spec.resolution < 2) {
        fail(Errc::config, "synthetic dataset needs samples, channels and resolution >= 2");
    }
    std::vector<cnn::Example> out;
    out.reserve(spec.samples);
    const std::size_t r = spec.resolution;
    for (std::size_t n = 0; n < spec.samples; ++n) {
        const int label = static_cast<int>(n % 2);
        const std::uint64_t key = hash_combine(spec.seed, n);
        cnn::Example ex{Tensor(Shape{spec.channels, r, r}), label};
        for (std::size_t c = 0; c < spec.channels; ++c) {
            const std::uint64_t ck = hash_combine(key, c + 1);
            const double cycles = (label ? spec.high_cycles : spec.low_cycles) + 0.5 * (unit_uniform(hash_combine(ck, 1)) - 0.5);
            const double phase = 2.0 * std::numbers::pi * unit_uniform(hash_combine(ck, 2));
            const double amp = 0.5 + unit_uniform(hash_combine(ck, 3));
            for (std::size_t y = 0; y < r; ++y) {
                for (std::size_t x = 0; x < r; ++x) {
                    const double wave = amp * std::sin(2.0 * std::numbers::pi * cycles * static_cast<double>(x) / static_cast<double>(r) + phase);
                    const double noise = spec.noise * unit_gaussian(hash_combine(ck, 16 + y * r + x));
                    ex.image.at(c, y, x) = wave + noise;
                }
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

Tensor resample(const Tensor& image, std::size_t size) {
    const Shape in = image.shape();
    if (size == 0) fail(Errc::shape, "resample target must be positive");
    if (in.height == size && in.width == size) return image;
    Tensor out(Shape{in.channels, size, size});
    const auto coord = [&](std::size_t i, std::size_t extent) {
        return size == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(extent - 1) / static_cast<double>(size - 1);
    };
    for (std::size_t c = 0; c < in.channels; ++c) {
        for (std::size_t y = 0; y < size; ++y) {
            const double fy = coord(y, in.height);
            const auto y0 = static_cast<std::size_t>(fy);
            const std::size_t y1 = std::min(y0 + 1, in.height - 1);
            const double wy = fy - static_cast<double>(y0);
            for (std::size_t x = 0; x < size; ++x) {
                const double fx = coord(x, in.width);
                const auto x0 = static_cast<std::size_t>(fx);
                const std::size_t x1 = std::min(x0 + 1, in.width - 1);
                const double wx = fx - static_cast<double>(x0);
                const double top = (1 - wx) * image.at(c, y0, x0) + wx * image.at(c, y0, x1);
                const double bottom = (1 - wx) * image.at(c, y1, x0) + wx * image.at(c, y1, x1);
                out.at(c, y, x) = (1 - wy) * top + wy * bottom;
            }
        }
    }
    return out;
}

Split split_dataset(std::span<const cnn::Example> data, std::uint64_t seed, double train_fraction) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) fail(Errc::config, "train fraction must lie in (0, 1)");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(data.size())));
    Split s;
    for (std::size_t i = 0; i < order.size(); ++i) (i < cut ? s.train : s.test).push_back(data[order[i]]);
    const auto has_both = [](const std::vector<cnn::Example>& xs) {
        bool zero = false;
        bool one = false;
        for (const auto& x : xs) (x.label ? one : zero) = true;
        return zero && one;
    };
    if (!has_both(s.train) || !has_both(s.test)) fail(Errc::validation, "a split lacks one of the two classes");
    return s;
}

EvaluatedModel evaluate(const cnn::NetParams& net, std::span<const cnn::Example> data, double threshold) {
    EvaluatedModel e;
    std::vector<int> predicted;
    for (const auto& ex : data) {
        const double p = cnn::predict_proba(net, ex.image);
        e.scores.push_back(p);
        e.labels.push_back(ex.label);
        predicted.push_back(p >= threshold ? 1 : 0);
    }
    e.matrix = confusion(predicted, e.labels);
    return e;
}

std::vector<BenchmarkResult> benchmark(std::span<const BenchmarkConfig> configs, std::span<const cnn::Example> data,
                                       const cnn::TrainBudget& budget, std::uint64_t split_seed) {
    if (budget.epochs == 0 || budget.batch_size == 0 || !(budget.lr > 0.0)) {
        fail(Errc::config, "training budget must be positive");
    }
    const Split split = split_dataset(data, split_seed);
    std::vector<BenchmarkResult> out;
    for (const auto& cfg : configs) {
        const std::size_t r = cfg.scaling.resolution;
        const auto rescale = [&](const std::vector<cnn::Example>& xs) {
            std::vector<cnn::Example> ys;
            ys.reserve(xs.size());
            for (const auto& x : xs) ys.push_back({resample(x.image, r), x.label});
            return ys;
        };
        const auto train_set = rescale(split.train);
        const auto test_set = rescale(split.test);

        auto net = cnn::build_net(cfg.scaling, budget.seed);
        const auto start = std::chrono::steady_clock::now();
        cnn::train(net, train_set, budget);
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;

        const auto evaluated = evaluate(net, test_set);
        BenchmarkResult res{classification_metrics(evaluated.matrix), evaluated.matrix};
        res.report.model = cfg.name;
        res.report.auc = auc(evaluated.scores, evaluated.labels);
        res.report.training_time_s = elapsed.count();
        out.push_back(std::move(res));
    }
    return out;
}

namespace {

std::string fixed(const std::optional<double>& v, int digits) {
    if (!v) return {};
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, *v);
    return buf;
}

std::optional<double> parse_field(const std::string& s, std::size_t row) {
    if (s.empty()) return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        fail(Errc::parse, "CSV row " + std::to_string(row) + ": bad number '" + s + "'");
    }
}

}  // namespace

std::string to_csv(std::span<const MetricsReport> reports) {
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& r : reports) {
        if (r.model.find_first_of(",\"\n") != std::string::npos) {
            fail(Errc::validation, "model name '" + r.model + "' cannot be written to CSV");
        }
        out += r.model + "," + fixed(r.accuracy * 100.0, 2) + "," + fixed(r.precision, 4) + "," + fixed(r.recall, 4) +
               "," + fixed(r.f1, 4) + "," + fixed(r.specificity, 4) + "," + fixed(r.auc, 4) + "," +
               fixed(r.training_time_s, 2) + "\n";
    }
    return out;
}

std::vector<MetricsReport> parse_csv(std::string_view csv) {
    std::istringstream in{std::string(csv)};
    std::string line;
    if (!std::getline(in, line) || line != kCsvHeader) fail(Errc::parse, "unexpected CSV header");
    std::vector<MetricsReport> out;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (line.back() == ',') fields.emplace_back();
        if (fields.size() != 8) fail(Errc::parse, "CSV row " + std::to_string(row) + " has " + std::to_string(fields.size()) + " fields");
        MetricsReport r;
        r.model = fields[0];
        const auto acc = parse_field(fields[1], row);
        if (!acc) fail(Errc::parse, "CSV row " + std::to_string(row) + " lacks accuracy");
        r.accuracy = *acc / 100.0;
        r.precision = parse_field(fields[2], row);
        r.recall = parse_field(fields[3], row);
        r.f1 = parse_field(fields[4], row);
        r.specificity = parse_field(fields[5], row);
        r.auc = parse_field(fields[6], row);
        r.training_time_s = parse_field(fields[7], row);
        out.push_back(std::move(r));
    }
    return out;
}

nlohmann::ordered_json confusion_json(const std::string& model, const ConfusionMatrix& m) {
    nlohmann::ordered_json j;
    j["model"] = model;
    j["labels"] = {"no_arrest", "arrest"};
    j["matrix"] = {{m.tn, m.fp}, {m.fn, m.tp}};
    j["tp"] = m.tp;
    j["fp"] = m.fp;
    j["tn"] = m.tn;
    j["fn"] = m.fn;
    return j;
}

}  // namespace cardiotwin::eval
