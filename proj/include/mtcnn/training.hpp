#pragma once

#include "mtcnn/nets.hpp"
#include "mtcnn/synth.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtcnn {

/// One training example. Which targets exist depends on the kind:
/// Positive: det + box, Negative: det, Part: box, Landmark: landmarks.
struct TrainingSample {
    Tensor patch;  // [3, S, S], normalized
    int y_det = 0;
    std::optional<std::array<float, 4>> y_box;
    std::optional<std::array<float, 10>> y_landmark;
    SampleKind kind = SampleKind::Negative;
};

struct LossWeights {
    float det = 1.0f;
    float box = 0.5f;
    float landmark = 0.5f;

    /// (1, 0.5, 0.5) for P/R-Net, (1, 0.5, 1) for O-Net.
    static LossWeights defaults_for(Stage stage);
    void validate() const;
};

struct TrainConfig {
    float learning_rate = 0.05f;
    int batch_size = 64;
    int epochs = 30;
    float ohem_keep_ratio = 0.7f;
    std::uint64_t rng_seed = 1;
    /// Heavy-ball momentum on top of the plain SGD update; 0 disables it.
    float momentum = 0.9f;

    void validate() const;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr float kProbEpsilon = 1e-7f;

/// Binary cross-entropy on the face probability, clamped to [eps, 1 - eps].
float cls_loss(float p, int y);
/// Derivative of cls_loss(softmax(l0, l1)[1], y) with respect to (l0, l1).
std::array<float, 2> cls_loss_logit_grad(float logit0, float logit1, int y);

/// Squared Euclidean distance.
float box_loss(std::span<const float> pred, std::span<const float> target);
float landmark_loss(std::span<const float> pred, std::span<const float> target);
/// 2 (pred - target).
std::vector<float> squared_distance_grad(std::span<const float> pred, std::span<const float> target);

struct TaskLosses {
    std::optional<float> det;
    std::optional<float> box;
    std::optional<float> landmark;
};

/// Which tasks a sample kind trains: {det, box, landmark}.
std::array<bool, 3> task_gates(SampleKind kind);

/// Weighted sum of the tasks gated on by the sample kind.
/// Throws std::invalid_argument when a gated-on task has no loss.
float total_loss(const TaskLosses& losses, SampleKind kind, const LossWeights& w);

/// Indices of the ceil(keep_ratio * n) largest losses, largest first, ties by ascending index.
std::vector<std::size_t> ohem_select(std::span<const float> losses, float keep_ratio);

/// w <- w - lr * g for every parameter present in grads.
void sgd_step(WeightStore& weights, const WeightStore& grads, float lr);

/// Normalized training samples built from synth_windows.
std::vector<TrainingSample> synth_dataset(int n, int patch_size, std::uint64_t seed);
TrainingSample to_training_sample(const SyntheticWindow& window);

/// Gradient of one mini-batch objective:
///   det * mean(cls loss over OHEM-selected det samples)
/// + box * mean(box loss over box samples) + landmark * mean(landmark loss over landmark samples).
struct BatchResult {
    WeightStore grads;
    HeadGradients head_grads;
    /// Batch positions kept by OHEM, in selection order.
    std::vector<std::size_t> selected;
    /// Per-task loss sums and counts over all active samples (before OHEM).
    std::array<double, 3> loss_sum{};
    std::array<std::size_t, 3> loss_count{};
    double objective = 0;
};

BatchResult batch_gradients(const NetworkSpec& spec, const WeightStore& weights,
                            std::span<const TrainingSample> samples, std::span<const std::size_t> batch,
                            float keep_ratio, const LossWeights& w);

struct EpochLosses {
    int epoch;
    double det;
    double box;
    double landmark;
    double total;
};

struct TrainResult {
    WeightStore weights;
    std::vector<EpochLosses> history;
};

using EpochCallback = std::function<void(const EpochLosses&)>;

/// Mini-batch SGD with per-batch OHEM on the classification task.
TrainResult train_stage(const NetworkSpec& spec, const WeightStore& init, std::span<const TrainingSample> dataset,
                        const TrainConfig& cfg, const LossWeights& w, const EpochCallback& on_epoch = {});

/// "epoch,det_loss,box_loss,landmark_loss,total" header plus one row per epoch.
std::string loss_history_csv(std::span<const EpochLosses> history);

/// Fraction of positive/negative samples classified correctly at p >= 0.5.
double classification_accuracy(const NetworkSpec& spec, const WeightStore& weights,
                               std::span<const TrainingSample> samples);

}  // namespace mtcnn
