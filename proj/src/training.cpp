#include "mtcnn/training.hpp"

#include "mtcnn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace mtcnn {

namespace {

// Stacks the patches at the given positions into one [B, 3, S, S] batch.
Tensor stack_patches(std::span<const TrainingSample> samples, std::span<const std::size_t> batch)
{
    const auto& first = samples[batch[0]].patch;
    const int s = first.dim(1);
    Tensor out({static_cast<int>(batch.size()), 3, s, s});
    const std::size_t plane = first.size();
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const auto& p = samples[batch[k]].patch;
        if (p.shape() != first.shape()) {
            throw ShapeError("training batch mixes patch sizes");
        }
        std::copy(p.values().begin(), p.values().end(), out.data() + k * plane);
    }
    return out;
}

void check_dataset(const NetworkSpec& spec, std::span<const TrainingSample> dataset)
{
    for (const auto& s : dataset) {
        if (s.patch.shape() != std::vector<int>{3, spec.input_size, spec.input_size}) {
            throw ShapeError(spec.prefix() + ": training patch " + shape_string(s.patch.shape()) + " does not match " +
                             std::to_string(spec.input_size) + "x" + std::to_string(spec.input_size) + " input");
        }
    }
}

}  // namespace

LossWeights LossWeights::defaults_for(Stage stage)
{
    return stage == Stage::ONet ? LossWeights{1.0f, 0.5f, 1.0f} : LossWeights{1.0f, 0.5f, 0.5f};
}

void LossWeights::validate() const
{
    if (det < 0 || box < 0 || landmark < 0) {
        throw std::invalid_argument("loss weights must be non-negative");
    }
    if (det == 0 && box == 0 && landmark == 0) {
        throw std::invalid_argument("loss weights must not all be zero");
    }
}

void TrainConfig::validate() const
{
    if (!(learning_rate >= 0)) {
        throw std::invalid_argument("learning rate must be non-negative");
    }
    if (batch_size < 1 || epochs < 0) {
        throw std::invalid_argument("batch size must be positive and epochs non-negative");
    }
    if (!(ohem_keep_ratio > 0 && ohem_keep_ratio <= 1)) {
        throw std::invalid_argument("OHEM keep ratio must be in (0, 1]");
    }
    if (!(momentum >= 0 && momentum < 1)) {
        throw std::invalid_argument("momentum must be in [0, 1)");
    }
}

float cls_loss(float p, int y)
{
    const double q = std::clamp(static_cast<double>(p), static_cast<double>(kProbEpsilon), 1.0 - kProbEpsilon);
    return static_cast<float>(-(y * std::log(q) + (1 - y) * std::log(1.0 - q)));
}

std::array<float, 2> cls_loss_logit_grad(float logit0, float logit1, int y)
{
    // p = sigmoid(l1 - l0); dL/dl1 = p - y inside the clamp, 0 outside.
    const double p = 1.0 / (1.0 + std::exp(static_cast<double>(logit0) - logit1));
    if (p < kProbEpsilon || p > 1.0 - kProbEpsilon) {
        return {0.0f, 0.0f};
    }
    const auto g = static_cast<float>(p - y);
    return {-g, g};
}

float box_loss(std::span<const float> pred, std::span<const float> target)
{
    if (pred.size() != 4 || target.size() != 4) {
        throw std::invalid_argument("box_loss expects 4-vectors");
    }
    float s = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        s += (pred[i] - target[i]) * (pred[i] - target[i]);
    }
    return s;
}

float landmark_loss(std::span<const float> pred, std::span<const float> target)
{
    if (pred.size() != 10 || target.size() != 10) {
        throw std::invalid_argument("landmark_loss expects 10-vectors");
    }
    float s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        s += (pred[i] - target[i]) * (pred[i] - target[i]);
    }
    return s;
}

std::vector<float> squared_distance_grad(std::span<const float> pred, std::span<const float> target)
{
    std::vector<float> g(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        g[i] = 2.0f * (pred[i] - target[i]);
    }
    return g;
}

std::array<bool, 3> task_gates(SampleKind kind)
{
    switch (kind) {
    case SampleKind::Positive: return {true, true, false};
    case SampleKind::Negative: return {true, false, false};
    case SampleKind::Part: return {false, true, false};
    case SampleKind::Landmark: return {false, false, true};
    }
    return {false, false, false};
}

float total_loss(const TaskLosses& losses, SampleKind kind, const LossWeights& w)
{
    const auto gates = task_gates(kind);
    const std::array<const std::optional<float>*, 3> parts{&losses.det, &losses.box, &losses.landmark};
    const std::array<float, 3> alphas{w.det, w.box, w.landmark};
    static constexpr std::array<const char*, 3> names{"detection", "box", "landmark"};
    float total = 0;
    for (std::size_t t = 0; t < 3; ++t) {
        if (!gates[t]) {
            continue;
        }
        if (!parts[t]->has_value()) {
            throw std::invalid_argument(std::string("missing ") + names[t] + " loss for a " + sample_kind_name(kind) +
                                        " sample");
        }
        total += alphas[t] * parts[t]->value();
    }
    return total;
}

std::vector<std::size_t> ohem_select(std::span<const float> losses, float keep_ratio)
{
    if (!(keep_ratio > 0 && keep_ratio <= 1)) {
        throw std::invalid_argument("ohem_select: keep ratio must be in (0, 1]");
    }
    std::vector<std::size_t> order(losses.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return losses[a] > losses[b]; });
    const auto keep = static_cast<std::size_t>(std::ceil(static_cast<double>(keep_ratio) * losses.size() - 1e-9));
    order.resize(std::min(keep, order.size()));
    return order;
}

void sgd_step(WeightStore& weights, const WeightStore& grads, float lr)
{
    for (const auto& [name, g] : grads) {
        Tensor& w = weights.get(name);
        if (w.shape() != g.shape()) {
            throw ShapeError("sgd_step: gradient shape mismatch for '" + name + "'");
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] -= lr * g[i];
        }
    }
}

TrainingSample to_training_sample(const SyntheticWindow& window)
{
    TrainingSample s;
    s.patch = normalize(window.patch).reshaped({3, window.patch.height, window.patch.width});
    s.kind = window.kind;
    s.y_det = window.kind == SampleKind::Negative ? 0 : 1;
    if (window.kind == SampleKind::Positive || window.kind == SampleKind::Part) {
        s.y_box = window.box_target;
    }
    if (window.kind == SampleKind::Landmark) {
        s.y_landmark = window.landmark_target;
    }
    return s;
}

std::vector<TrainingSample> synth_dataset(int n, int patch_size, std::uint64_t seed)
{
    std::vector<TrainingSample> out;
    for (const auto& w : synth_windows(n, patch_size, seed)) {
        out.push_back(to_training_sample(w));
    }
    return out;
}

BatchResult batch_gradients(const NetworkSpec& spec, const WeightStore& weights,
                            std::span<const TrainingSample> samples, std::span<const std::size_t> batch,
                            float keep_ratio, const LossWeights& w)
{
    if (batch.empty()) {
        throw std::invalid_argument("batch_gradients: empty batch");
    }
    const ForwardTrace trace = forward_trace(spec, weights, stack_patches(samples, batch));
    BatchResult r;
    r.head_grads = {Tensor(trace.cls_logits.shape()), Tensor(trace.box.shape()), Tensor(trace.landmarks.shape())};

    std::vector<std::size_t> det_rows;
    std::vector<float> det_losses;
    std::vector<std::size_t> box_rows, lmk_rows;
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const auto& s = samples[batch[k]];
        const auto gates = task_gates(s.kind);
        if (gates[0]) {
            det_rows.push_back(k);
            det_losses.push_back(cls_loss(trace.cls_prob[2 * k + 1], s.y_det));
        }
        if (gates[1]) {
            if (!s.y_box) {
                throw std::invalid_argument("sample without box target in box task");
            }
            box_rows.push_back(k);
        }
        if (gates[2]) {
            if (!s.y_landmark) {
                throw std::invalid_argument("sample without landmark target in landmark task");
            }
            lmk_rows.push_back(k);
        }
    }

    double det_mean = 0;
    if (!det_rows.empty()) {
        for (float l : det_losses) {
            r.loss_sum[0] += l;
        }
        r.loss_count[0] = det_rows.size();
        const auto chosen = ohem_select(det_losses, keep_ratio);
        const float scale = w.det / static_cast<float>(chosen.size());
        for (auto c : chosen) {
            const std::size_t k = det_rows[c];
            r.selected.push_back(k);
            det_mean += det_losses[c];
            const auto g = cls_loss_logit_grad(trace.cls_logits[2 * k], trace.cls_logits[2 * k + 1],
                                               samples[batch[k]].y_det);
            r.head_grads.d_cls_logits[2 * k] = scale * g[0];
            r.head_grads.d_cls_logits[2 * k + 1] = scale * g[1];
        }
        det_mean /= static_cast<double>(chosen.size());
    }

    auto regress = [&](const std::vector<std::size_t>& rows, const Tensor& pred, Tensor& grad, std::size_t width,
                       float alpha, std::size_t task, auto target_of) {
        if (rows.empty()) {
            return 0.0;
        }
        const float scale = alpha / static_cast<float>(rows.size());
        double sum = 0;
        for (auto k : rows) {
            const auto target = target_of(samples[batch[k]]);
            std::span<const float> p(pred.data() + k * width, width);
            const float l = width == 4 ? box_loss(p, target) : landmark_loss(p, target);
            sum += l;
            const auto g = squared_distance_grad(p, target);
            for (std::size_t i = 0; i < width; ++i) {
                grad[k * width + i] = scale * g[i];
            }
        }
        r.loss_sum[task] = sum;
        r.loss_count[task] = rows.size();
        return sum / static_cast<double>(rows.size());
    };
    const double box_mean = regress(box_rows, trace.box, r.head_grads.d_box, 4, w.box, 1,
                                    [](const TrainingSample& s) { return std::span<const float>(*s.y_box); });
    const double lmk_mean = regress(lmk_rows, trace.landmarks, r.head_grads.d_landmarks, 10, w.landmark, 2,
                                    [](const TrainingSample& s) { return std::span<const float>(*s.y_landmark); });

    r.objective = w.det * det_mean + w.box * box_mean + w.landmark * lmk_mean;
    r.grads = backward(spec, weights, trace, r.head_grads);
    return r;
}

TrainResult train_stage(const NetworkSpec& spec, const WeightStore& init, std::span<const TrainingSample> dataset,
                        const TrainConfig& cfg, const LossWeights& w, const EpochCallback& on_epoch)
{
    cfg.validate();
    w.validate();
    validate_weights(spec, init);
    check_dataset(spec, dataset);

    TrainResult result{init, {}};
    if (dataset.empty() || cfg.epochs == 0) {
        return result;
    }
    std::mt19937_64 rng(cfg.rng_seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    WeightStore velocity;
    for (const auto& p : network_parameters(spec)) {
        velocity.set(p.name, Tensor(p.shape));
    }

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        std::array<double, 3> sums{};
        std::array<std::size_t, 3> counts{};
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
            const std::span<const std::size_t> batch(order.data() + start, n);
            BatchResult br = batch_gradients(spec, result.weights, dataset, batch, cfg.ohem_keep_ratio, w);
            if (!std::isfinite(br.objective)) {
                throw TrainingError(spec.prefix() + ": non-finite loss at epoch " + std::to_string(epoch) +
                                    ", batch starting at " + std::to_string(start) + " (lr " +
                                    std::to_string(cfg.learning_rate) + ")");
            }
            for (std::size_t t = 0; t < 3; ++t) {
                sums[t] += br.loss_sum[t];
                counts[t] += br.loss_count[t];
            }
            if (cfg.momentum > 0) {
                for (auto& [name, v] : velocity) {
                    const Tensor& g = br.grads.get(name);
                    for (std::size_t i = 0; i < v.size(); ++i) {
                        v[i] = cfg.momentum * v[i] + g[i];
                    }
                }
                sgd_step(result.weights, velocity, cfg.learning_rate);
            } else {
                sgd_step(result.weights, br.grads, cfg.learning_rate);
            }
        }
        EpochLosses e{epoch, 0, 0, 0, 0};
        e.det = counts[0] ? sums[0] / static_cast<double>(counts[0]) : 0.0;
        e.box = counts[1] ? sums[1] / static_cast<double>(counts[1]) : 0.0;
        e.landmark = counts[2] ? sums[2] / static_cast<double>(counts[2]) : 0.0;
        e.total = w.det * e.det + w.box * e.box + w.landmark * e.landmark;
        result.history.push_back(e);
        if (on_epoch) {
            on_epoch(e);
        }
    }
    return result;
}

std::string loss_history_csv(std::span<const EpochLosses> history)
{
    std::ostringstream os;
    os.precision(9);
    os << "epoch,det_loss,box_loss,landmark_loss,total\n";
    for (const auto& e : history) {
        os << e.epoch << ',' << e.det << ',' << e.box << ',' << e.landmark << ',' << e.total << '\n';
    }
    return os.str();
}

double classification_accuracy(const NetworkSpec& spec, const WeightStore& weights,
                               std::span<const TrainingSample> samples)
{
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (task_gates(samples[i].kind)[0]) {
            rows.push_back(i);
        }
    }
    if (rows.empty()) {
        return 0.0;
    }
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < rows.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, rows.size() - start);
        const std::span<const std::size_t> chunk(rows.data() + start, n);
        const StageOutput out = forward(spec, weights, stack_patches(samples, chunk));
        for (std::size_t k = 0; k < n; ++k) {
            const int predicted = out.face_prob[k] >= 0.5f ? 1 : 0;
            correct += predicted == samples[chunk[k]].y_det;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(rows.size());
}

}  // namespace mtcnn
