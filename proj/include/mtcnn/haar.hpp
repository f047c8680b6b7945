#pragma once

#include "mtcnn/geometry.hpp"
#include "mtcnn/imageio.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtcnn {

inline constexpr int kHaarWindow = 24;

/// Summed-area tables with a zero first row and column: (H+1) x (W+1).
class IntegralImage {
public:
    IntegralImage() = default;
    explicit IntegralImage(const Image& image);  // RGB input is converted to gray

    int width() const { return width_; }
    int height() const { return height_; }
    std::uint32_t at(int y, int x) const { return sum_[static_cast<std::size_t>(y) * (width_ + 1) + x]; }
    /// Sum over [x1, x2) x [y1, y2).
    std::uint64_t rect_sum(int x1, int y1, int x2, int y2) const;
    std::uint64_t rect_sq_sum(int x1, int y1, int x2, int y2) const;
    /// Standard deviation of the pixels in [x, x+w) x [y, y+h); exactly 0 for constant regions.
    double stddev(int x, int y, int w, int h) const;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint32_t> sum_;
    std::vector<std::uint64_t> sq_;
};

IntegralImage integral(const Image& image);

enum class HaarKind { TwoRectH, TwoRectV, ThreeRectH, FourRect };

/// Feature rectangle inside the 24x24 base window.
/// TwoRectH: left half minus right half. TwoRectV: top half minus bottom half.
/// ThreeRectH: outer thirds minus twice the middle third. FourRect: main diagonal minus anti-diagonal.
struct HaarFeature {
    HaarKind kind;
    int x, y, w, h;

    bool operator==(const HaarFeature&) const = default;
};

/// All features at positions and sizes that are multiples of step.
std::vector<HaarFeature> enumerate_features(int step = 2);

/// White minus black sum of the feature placed in the window at (origin_x, origin_y) scaled by
/// `scale`, expressed per base-window area and optionally divided by the window's std deviation.
float feature_value(const IntegralImage& ii, const HaarFeature& f, int origin_x, int origin_y, float scale,
                    bool variance_norm);

/// Votes +alpha when polarity * value < polarity * threshold, otherwise -alpha.
struct Stump {
    HaarFeature feature;
    float threshold;
    int polarity;
    float alpha;

    int predict(float value) const { return polarity * value < polarity * threshold ? 1 : -1; }
};

struct HaarStage {
    std::vector<Stump> stumps;
    float threshold = 0;
};

struct HaarCascadeModel {
    std::vector<HaarStage> stages;
};

/// Per feature, sample indices sorted by value (ties by index) and the sorted values.
/// At most 65535 samples.
class FeatureMatrix {
public:
    /// values are feature-major: values[f * samples + i].
    FeatureMatrix(std::size_t features, std::size_t samples, const std::vector<float>& values);

    std::size_t features() const { return features_; }
    std::size_t samples() const { return samples_; }
    std::span<const std::uint16_t> order(std::size_t f) const { return {order_.data() + f * samples_, samples_}; }
    /// Values of feature f in sorted order.
    std::span<const float> sorted(std::size_t f) const { return {sorted_.data() + f * samples_, samples_}; }

private:
    std::size_t features_;
    std::size_t samples_;
    std::vector<std::uint16_t> order_;
    std::vector<float> sorted_;
};

/// A weak classifier picked by one boosting round, indexing a FeatureMatrix row.
struct WeakStump {
    std::size_t feature;
    float threshold;
    int polarity;
    float alpha;
    double error;
};

/// Discrete AdaBoost over decision stumps; one call to round() per weak learner.
class AdaBoostTrainer {
public:
    /// labels are +1 (face) or -1; both classes must be present.
    AdaBoostTrainer(const FeatureMatrix& matrix, std::vector<int> labels);

    /// Picks the minimum weighted-error stump and reweights. Returns nullopt (and leaves the
    /// weights untouched) when the best error is >= 0.5.
    std::optional<WeakStump> round();

    std::span<const double> weights() const { return weights_; }
    /// Current strong-classifier votes per sample.
    std::span<const double> votes() const { return votes_; }
    /// Fraction of samples whose vote sign disagrees with the label (vote >= 0 means face).
    double training_error() const;

private:
    const FeatureMatrix& matrix_;
    std::vector<int> labels_;
    std::vector<double> weights_;
    std::vector<double> votes_;
};

inline constexpr double kAdaBoostErrorFloor = 1e-10;

double adaboost_alpha(double error);

struct AdaBoostResult {
    std::vector<Stump> stumps;
    std::vector<double> training_error;  // after each round
    std::optional<std::string> warning;
};

struct LabeledWindow {
    IntegralImage ii;  // 24x24 window
    int label;         // +1 face, -1 non-face
};

std::vector<float> compute_feature_values(std::span<const HaarFeature> pool, std::span<const IntegralImage> windows);

AdaBoostResult train_adaboost(std::span<const LabeledWindow> samples, std::span<const HaarFeature> pool, int rounds);

struct CascadeTargets {
    float min_detection_rate = 0.995f;
    float max_false_positive_rate = 0.5f;
    int max_stages = 12;
    int max_stumps_per_stage = 60;
    /// Upper bound on negatives used to fit one stage; all surviving negatives still set its threshold.
    std::size_t max_negatives_per_stage = 3000;
    /// Bootstrapping only: windows drawn from the source per stage before giving up on filling it.
    std::size_t max_negative_draws = 2000000;
};

struct StageReport {
    std::size_t stumps;
    double detection_rate;
    double false_positive_rate;
    std::size_t negatives_in;
};

class CascadeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Trains stages until max_stages or until no training negative survives. Negatives for each
/// stage are the previous stages' false positives.
HaarCascadeModel build_cascade(std::span<const IntegralImage> positives, std::span<const IntegralImage> negatives,
                               std::span<const HaarFeature> pool, const CascadeTargets& targets,
                               std::vector<StageReport>* report = nullptr);

/// Yields a non-face window that the given cascade accepts (any window while it has no stages),
/// or nullopt once exhausted.
using NegativeSource = std::function<std::optional<IntegralImage>(const HaarCascadeModel& current)>;

/// Bootstrapping variant: before each stage the negative set is refilled with source windows the
/// cascade so far still accepts. Stops when the source yields no such window.
HaarCascadeModel build_cascade(std::span<const IntegralImage> positives, const NegativeSource& negatives,
                               std::span<const HaarFeature> pool, const CascadeTargets& targets,
                               std::vector<StageReport>* report = nullptr);

/// Counters for cascade evaluation; stage_evaluations[k] counts windows that reached stage k.
struct CascadeStats {
    std::size_t windows = 0;
    std::vector<std::size_t> stage_evaluations;
};

/// Margin of the final stage (vote - threshold) if the window passes every stage.
std::optional<float> evaluate_cascade(const HaarCascadeModel& model, const IntegralImage& ii, int x, int y,
                                      float scale, CascadeStats* stats = nullptr);

struct ScanConfig {
    float scale_step = 1.25f;
    int window_stride = 2;
    float nms_threshold = 0.3f;
};

std::vector<Detection> detect_haar(const Image& image, const HaarCascadeModel& model, const ScanConfig& scan = {},
                                   CascadeStats* stats = nullptr);

/// 24x24 training windows from synthetic scenes: jittered square face crops, and
/// random-size windows overlapping every face with IoU < 0.3.
struct HaarTrainingSet {
    std::vector<IntegralImage> positives;
    std::vector<IntegralImage> negatives;
};

HaarTrainingSet synth_haar_set(int positives, int negatives, std::uint64_t seed);

/// Scan windows (scales and strides as in detect_haar) of fresh synthetic scenes that overlap
/// every face with IoU < 0.3 and pass the current cascade. Gives up after max_scenes scenes in a
/// row without a hit.
NegativeSource synth_negative_source(std::uint64_t seed, const ScanConfig& scan = {}, int max_scenes = 4000);

std::string format_cascade(const HaarCascadeModel& model);
HaarCascadeModel parse_cascade(const std::string& text);
void save_cascade(const HaarCascadeModel& model, const std::filesystem::path& path);
HaarCascadeModel load_cascade(const std::filesystem::path& path);

}  // namespace mtcnn
