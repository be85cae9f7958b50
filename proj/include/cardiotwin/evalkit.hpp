#pragma once

// Binary classification metrics, ROC AUC, report formats and the benchmark
// harness that compares compound-scaling configurations.

#include "cardiotwin/cnn.hpp"
#include "cardiotwin/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cardiotwin::eval {

struct ConfusionMatrix {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
    bool operator==(const ConfusionMatrix&) const = default;
};

// Errc::validation on length mismatch, empty input or non-binary entries.
ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels);

struct MetricsReport {
    std::string model;
    double accuracy = 0.0;
    // Absent when the denominator is zero.
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> f1;
    std::optional<double> specificity;
    std::optional<double> auc;
    std::optional<double> training_time_s;
};

// Errc::validation on an empty matrix.
MetricsReport classification_metrics(const ConfusionMatrix& m);

// Harmonic mean; absent when precision + recall is 0.
std::optional<double> f1_score(double precision, double recall) noexcept;

// Trapezoidal ROC area over all score thresholds; tied scores move TPR and FPR
// together, which equals the midrank concordance probability.
// Errc::validation on mismatch, non-finite scores or a single class.
double auc(std::span<const double> scores, std::span<const int> labels);

struct ConsistencyRow {
    double precision = 0.0;
    double recall = 0.0;
    double reported_f1 = 0.0;
    double recomputed_f1 = 0.0;
    double deviation = 0.0;
    bool flagged = false;
};

struct ConsistencyReport {
    std::vector<ConsistencyRow> rows;
    double max_deviation = 0.0;
    bool consistent() const noexcept;
};

struct F1Row {
    double precision;
    double recall;
    double reported_f1;
};

ConsistencyReport f1_consistency(std::span<const F1Row> rows, double tolerance = 5e-4);

// Two-class image set. Each channel is a horizontal sinusoid with random
// phase, amplitude and a small jitter of frequency; class 0 uses a low band,
// class 1 a high band, plus white noise. Both classes are symmetric under
// negation, so no linear function of the pixels separates them.
struct SyntheticSpec {
    std::size_t samples = 2000;
    std::size_t channels = 4;
    std::size_t resolution = 16;
    double low_cycles = 1.0;
    double high_cycles = 3.0;
    double noise = 0.3;
    std::uint64_t seed = 0;
};

std::vector<cnn::Example> synthetic_dataset(const SyntheticSpec& spec);

// Bilinear resize of every channel to size x size (align-corners).
Tensor resample(const Tensor& image, std::size_t size);

struct Split {
    std::vector<cnn::Example> train;
    std::vector<cnn::Example> test;
};

// Shuffled 80/20 split. Errc::validation if either side lacks a class.
Split split_dataset(std::span<const cnn::Example> data, std::uint64_t seed, double train_fraction = 0.8);

struct BenchmarkConfig {
    std::string name;
    cnn::ScalingConfig scaling;
};

struct BenchmarkResult {
    MetricsReport report;
    ConfusionMatrix matrix;
};

struct EvaluatedModel {
    ConfusionMatrix matrix;
    std::vector<double> scores;
    std::vector<int> labels;
};

EvaluatedModel evaluate(const cnn::NetParams& net, std::span<const cnn::Example> data, double threshold = 0.5);

// Trains every config from scratch on the same split and scores it on the
// held-out part. Images are resampled to each config's resolution.
std::vector<BenchmarkResult> benchmark(std::span<const BenchmarkConfig> configs, std::span<const cnn::Example> data,
                                       const cnn::TrainBudget& budget, std::uint64_t split_seed = 0);

inline constexpr const char* kCsvHeader = "model,accuracy_pct,precision,recall,f1,specificity,auc,training_time_s";

std::string to_csv(std::span<const MetricsReport> reports);
// Errc::parse on a wrong header or malformed row.
std::vector<MetricsReport> parse_csv(std::string_view csv);

// Rows are actual (no arrest, arrest), columns predicted.
nlohmann::ordered_json confusion_json(const std::string& model, const ConfusionMatrix& m);

}  // namespace cardiotwin::eval
