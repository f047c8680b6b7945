#pragma once

#include "mtcnn/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace mtcnn {

/// One manifest line: image path followed by its truth boxes.
struct GroundTruth {
    std::string image;
    std::vector<Box> boxes;

    bool operator==(const GroundTruth&) const = default;
};

/// Lines "image_path x1 y1 x2 y2 [x1 y1 x2 y2 ...]"; blank lines and '#' comments are skipped.
std::vector<GroundTruth> parse_manifest(const std::string& text);
std::vector<GroundTruth> read_manifest(const std::filesystem::path& path);
std::string format_manifest(std::span<const GroundTruth> entries);

struct MatchCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    bool operator==(const MatchCounts&) const = default;
};

/// One-to-one greedy matching in descending score order (ties by index): each detection takes
/// the unmatched truth of highest IoU if that IoU reaches the threshold.
MatchCounts match_detections(std::span<const Detection> dets, std::span<const Box> truths,
                             float iou_threshold = 0.5f);

struct ConfusionMatrix {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    /// Adds one image's counts. An image with no truths and no detections is a true negative.
    void add_image(const MatchCounts& m, std::size_t truths, std::size_t dets);
    bool operator==(const ConfusionMatrix&) const = default;
};

/// Percentages; nullopt where the denominator is zero.
struct MetricsReport {
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> specificity;
    std::optional<double> f1;
    std::optional<double> accuracy;
};

MetricsReport compute_metrics(const ConfusionMatrix& cm);

/// "precision,recall,specificity,f1,accuracy" header and one row; undefined values are empty.
std::string metrics_csv(const MetricsReport& r);
/// One "name  value" line per metric, "undefined" for missing ones.
std::string metrics_text(const MetricsReport& r);

/// A detector's row in a comparison table: a bare accuracy percentage or a full report.
struct NamedResult {
    std::string detector;
    std::variant<double, MetricsReport> value;
};

enum class ReportFormat { Text, Csv };

/// Detector-versus-metric table. Only accuracy is shown unless some row carries a full report.
std::string compare_report(std::span<const NamedResult> results, ReportFormat format = ReportFormat::Text);

/// Percentage with at most two decimals and no trailing zeros, e.g. 94 -> "94%", 74.38 -> "74.38%".
std::string format_percent(double value);

}  // namespace mtcnn
