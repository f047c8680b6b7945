#include "mtcnn/haar.hpp"

#include "mtcnn/pipeline.hpp"
#include "mtcnn/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

namespace mtcnn {

IntegralImage::IntegralImage(const Image& image)
{
    const Image gray = image.channels == 1 ? image : to_gray(image);
    width_ = gray.width;
    height_ = gray.height;
    const std::size_t stride = static_cast<std::size_t>(width_) + 1;
    sum_.assign(stride * (height_ + 1), 0);
    sq_.assign(stride * (height_ + 1), 0);
    for (int y = 0; y < height_; ++y) {
        std::uint32_t row = 0;
        std::uint64_t row_sq = 0;
        for (int x = 0; x < width_; ++x) {
            const std::uint32_t v = gray.at(x, y);
            row += v;
            row_sq += static_cast<std::uint64_t>(v) * v;
            const std::size_t i = (y + 1) * stride + x + 1;
            sum_[i] = sum_[i - stride] + row;
            sq_[i] = sq_[i - stride] + row_sq;
        }
    }
}

std::uint64_t IntegralImage::rect_sum(int x1, int y1, int x2, int y2) const
{
    const std::size_t s = static_cast<std::size_t>(width_) + 1;
    // u32 wraparound cancels out as long as the true sum fits in 32 bits.
    return static_cast<std::uint32_t>(sum_[y2 * s + x2] - sum_[y1 * s + x2] - sum_[y2 * s + x1] + sum_[y1 * s + x1]);
}

std::uint64_t IntegralImage::rect_sq_sum(int x1, int y1, int x2, int y2) const
{
    const std::size_t s = static_cast<std::size_t>(width_) + 1;
    return sq_[y2 * s + x2] - sq_[y1 * s + x2] - sq_[y2 * s + x1] + sq_[y1 * s + x1];
}

double IntegralImage::stddev(int x, int y, int w, int h) const
{
    const std::uint64_t area = static_cast<std::uint64_t>(w) * h;
    const std::uint64_t s = rect_sum(x, y, x + w, y + h);
    const std::uint64_t ss = rect_sq_sum(x, y, x + w, y + h);
    // area * ss - s^2 is exact in 64 bits for windows up to 1024x1024.
    const std::uint64_t num = area * ss - s * s;
    if (num == 0) {
        return 0.0;
    }
    return std::sqrt(static_cast<double>(num)) / static_cast<double>(area);
}

IntegralImage integral(const Image& image)
{
    return IntegralImage(image);
}

std::vector<HaarFeature> enumerate_features(int step)
{
    if (step < 1) {
        throw std::invalid_argument("enumerate_features: step must be positive");
    }
    std::vector<HaarFeature> out;
    auto sweep = [&](HaarKind kind, int w_mult, int h_mult) {
        for (int w = step; w <= kHaarWindow; w += step) {
            if (w % w_mult) {
                continue;
            }
            for (int h = step; h <= kHaarWindow; h += step) {
                if (h % h_mult) {
                    continue;
                }
                for (int y = 0; y + h <= kHaarWindow; y += step) {
                    for (int x = 0; x + w <= kHaarWindow; x += step) {
                        out.push_back({kind, x, y, w, h});
                    }
                }
            }
        }
    };
    sweep(HaarKind::TwoRectH, 2, 1);
    sweep(HaarKind::TwoRectV, 1, 2);
    sweep(HaarKind::ThreeRectH, 3, 1);
    sweep(HaarKind::FourRect, 2, 2);
    return out;
}

namespace {

struct PartGrid {
    int x, y;    // top-left in image coordinates
    int pw, ph;  // one part's extent
};

// Scaled part geometry; floor keeps every part inside floor(24 * scale).
PartGrid place(const HaarFeature& f, int ox, int oy, float scale, int parts_x, int parts_y)
{
    PartGrid g{ox + static_cast<int>(std::floor(f.x * scale)), oy + static_cast<int>(std::floor(f.y * scale)), 0, 0};
    g.pw = std::max(1, static_cast<int>(std::floor(f.w / parts_x * scale)));
    g.ph = std::max(1, static_cast<int>(std::floor(f.h / parts_y * scale)));
    return g;
}

double part(const IntegralImage& ii, const PartGrid& g, int i, int j)
{
    const int x = g.x + i * g.pw;
    const int y = g.y + j * g.ph;
    return static_cast<double>(ii.rect_sum(x, y, x + g.pw, y + g.ph));
}

}  // namespace

namespace {

// White minus black in base-window units, before variance normalization.
double raw_feature(const IntegralImage& ii, const HaarFeature& f, int origin_x, int origin_y, float scale)
{
    int px = 1;
    int py = 1;
    switch (f.kind) {
    case HaarKind::TwoRectH: px = 2; break;
    case HaarKind::TwoRectV: py = 2; break;
    case HaarKind::ThreeRectH: px = 3; break;
    case HaarKind::FourRect: px = 2; py = 2; break;
    }
    const PartGrid g = place(f, origin_x, origin_y, scale, px, py);
    if (g.x < 0 || g.y < 0 || g.x + px * g.pw > ii.width() || g.y + py * g.ph > ii.height()) {
        throw std::out_of_range("feature_value: feature extends outside the image");
    }
    double v = 0;
    switch (f.kind) {
    case HaarKind::TwoRectH: v = part(ii, g, 0, 0) - part(ii, g, 1, 0); break;
    case HaarKind::TwoRectV: v = part(ii, g, 0, 0) - part(ii, g, 0, 1); break;
    case HaarKind::ThreeRectH: v = part(ii, g, 0, 0) + part(ii, g, 2, 0) - 2.0 * part(ii, g, 1, 0); break;
    case HaarKind::FourRect:
        v = part(ii, g, 0, 0) + part(ii, g, 1, 1) - part(ii, g, 1, 0) - part(ii, g, 0, 1);
        break;
    }
    // back to base-window units so one threshold serves every scale
    const double base_area = static_cast<double>(f.w / px) * (f.h / py);
    return v * (base_area / (static_cast<double>(g.pw) * g.ph));
}

// Scale-1 shortcut: exact integer sums, so the result equals raw_feature(ii, f, 0, 0, 1).
double raw_feature_base(const IntegralImage& ii, const HaarFeature& f)
{
    auto r = [&ii](int x, int y, int w, int h) {
        return static_cast<std::int64_t>(ii.rect_sum(x, y, x + w, y + h));
    };
    std::int64_t v = 0;
    switch (f.kind) {
    case HaarKind::TwoRectH: {
        const int pw = f.w / 2;
        v = r(f.x, f.y, pw, f.h) - r(f.x + pw, f.y, pw, f.h);
        break;
    }
    case HaarKind::TwoRectV: {
        const int ph = f.h / 2;
        v = r(f.x, f.y, f.w, ph) - r(f.x, f.y + ph, f.w, ph);
        break;
    }
    case HaarKind::ThreeRectH: {
        const int pw = f.w / 3;
        v = r(f.x, f.y, pw, f.h) + r(f.x + 2 * pw, f.y, pw, f.h) - 2 * r(f.x + pw, f.y, pw, f.h);
        break;
    }
    case HaarKind::FourRect: {
        const int pw = f.w / 2;
        const int ph = f.h / 2;
        v = r(f.x, f.y, pw, ph) + r(f.x + pw, f.y + ph, pw, ph) - r(f.x + pw, f.y, pw, ph) - r(f.x, f.y + ph, pw, ph);
        break;
    }
    }
    return static_cast<double>(v);
}

}  // namespace

float feature_value(const IntegralImage& ii, const HaarFeature& f, int origin_x, int origin_y, float scale,
                    bool variance_norm)
{
    double v = raw_feature(ii, f, origin_x, origin_y, scale);
    if (variance_norm) {
        const int win = std::max(1, static_cast<int>(std::floor(kHaarWindow * scale)));
        const double sd = ii.stddev(origin_x, origin_y, std::min(win, ii.width() - origin_x),
                                    std::min(win, ii.height() - origin_y));
        if (sd == 0.0) {
            return 0.0f;
        }
        v /= sd;
    }
    return static_cast<float>(v);
}

FeatureMatrix::FeatureMatrix(std::size_t features, std::size_t samples, const std::vector<float>& values)
    : features_(features), samples_(samples)
{
    if (values.size() != features * samples) {
        throw std::invalid_argument("FeatureMatrix: value count does not match features x samples");
    }
    if (samples > 65535) {
        throw std::invalid_argument("FeatureMatrix: at most 65535 samples supported");
    }
    order_.resize(values.size());
    sorted_.resize(values.size());
    // stable LSD radix sort on order-preserving float bits, 11 bits per pass
    std::vector<std::uint32_t> key(samples), key_tmp(samples);
    std::vector<std::uint16_t> idx(samples), idx_tmp(samples);
    for (std::size_t f = 0; f < features; ++f) {
        const float* v = values.data() + f * samples;
        for (std::size_t i = 0; i < samples; ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, &v[i], sizeof bits);
            key[i] = (bits & 0x80000000u) ? ~bits : bits | 0x80000000u;
            idx[i] = static_cast<std::uint16_t>(i);
        }
        for (int shift = 0; shift < 32; shift += 11) {
            std::array<std::size_t, 2049> count{};
            for (std::size_t i = 0; i < samples; ++i) {
                ++count[((key[i] >> shift) & 0x7ffu) + 1];
            }
            for (std::size_t d = 1; d < count.size(); ++d) {
                count[d] += count[d - 1];
            }
            for (std::size_t i = 0; i < samples; ++i) {
                const std::size_t dst = count[(key[i] >> shift) & 0x7ffu]++;
                key_tmp[dst] = key[i];
                idx_tmp[dst] = idx[i];
            }
            key.swap(key_tmp);
            idx.swap(idx_tmp);
        }
        for (std::size_t k = 0; k < samples; ++k) {
            order_[f * samples + k] = idx[k];
            sorted_[f * samples + k] = v[idx[k]];
        }
    }
}

double adaboost_alpha(double error)
{
    const double e = std::max(error, kAdaBoostErrorFloor);
    return 0.5 * std::log((1.0 - e) / e);
}

AdaBoostTrainer::AdaBoostTrainer(const FeatureMatrix& matrix, std::vector<int> labels)
    : matrix_(matrix), labels_(std::move(labels))
{
    if (labels_.size() != matrix.samples()) {
        throw std::invalid_argument("AdaBoostTrainer: label count does not match sample count");
    }
    std::size_t pos = 0;
    for (int y : labels_) {
        if (y != 1 && y != -1) {
            throw std::invalid_argument("AdaBoostTrainer: labels must be +1 or -1");
        }
        pos += y == 1;
    }
    const std::size_t neg = labels_.size() - pos;
    if (pos == 0 || neg == 0) {
        throw std::invalid_argument("AdaBoostTrainer: both classes must be present");
    }
    // each class starts with half the mass
    weights_.resize(labels_.size());
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        weights_[i] = labels_[i] == 1 ? 0.5 / pos : 0.5 / neg;
    }
    votes_.assign(labels_.size(), 0.0);
}

std::optional<WeakStump> AdaBoostTrainer::round()
{
    const std::size_t n = matrix_.samples();
    double total_pos = 0;
    double total_neg = 0;
    for (std::size_t i = 0; i < n; ++i) {
        (labels_[i] == 1 ? total_pos : total_neg) += weights_[i];
    }

    // positive mass in pos_w, negative in neg_w, so the scan needs no label lookups
    std::vector<double> pos_w(n);
    std::vector<double> neg_w(n);
    for (std::size_t i = 0; i < n; ++i) {
        (labels_[i] == 1 ? pos_w : neg_w)[i] = weights_[i];
    }
    double best_err = 2.0;
    WeakStump best{0, 0.0f, 1, 0.0f, 1.0};
    for (std::size_t f = 0; f < matrix_.features(); ++f) {
        const auto order = matrix_.order(f);
        const auto sv = matrix_.sorted(f);
        double below_pos = 0;
        double below_neg = 0;
        for (std::size_t k = 0; k <= n; ++k) {
            const bool split = k == 0 || k == n || sv[k - 1] < sv[k];
            if (split) {
                // +1: face below the threshold; -1: face above it
                const double err_lo = below_neg + (total_pos - below_pos);
                const double err_hi = below_pos + (total_neg - below_neg);
                const double err = std::min(err_lo, err_hi);
                if (err < best_err) {
                    best_err = err;
                    float thr;
                    if (k == 0) {
                        thr = sv[0] - 1.0f;
                    } else if (k == n) {
                        thr = sv[n - 1] + 1.0f;
                    } else {
                        const float a = sv[k - 1];
                        const float b = sv[k];
                        thr = a + (b - a) * 0.5f;
                        if (!(thr > a)) {
                            thr = b;
                        }
                    }
                    best = {f, thr, err_lo <= err_hi ? 1 : -1, 0.0f, err};
                }
            }
            if (k < n) {
                below_pos += pos_w[order[k]];
                below_neg += neg_w[order[k]];
            }
        }
    }

    // recompute from the actual predictions so rounding in the midpoint cannot drift
    std::vector<int> pred(n);
    double err = 0;
    const auto bo = matrix_.order(best.feature);
    const auto bv = matrix_.sorted(best.feature);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = bo[k];
        pred[i] = best.polarity * bv[k] < best.polarity * best.threshold ? 1 : -1;
        if (pred[i] != labels_[i]) {
            err += weights_[i];
        }
    }
    err /= total_pos + total_neg;
    if (err >= 0.5) {
        return std::nullopt;
    }
    best.error = err;
    const double alpha = adaboost_alpha(err);
    best.alpha = static_cast<float>(alpha);

    double z = 0;
    for (std::size_t i = 0; i < n; ++i) {
        weights_[i] *= std::exp(-alpha * labels_[i] * pred[i]);
        votes_[i] += alpha * pred[i];
        z += weights_[i];
    }
    for (double& w : weights_) {
        w /= z;
    }
    return best;
}

double AdaBoostTrainer::training_error() const
{
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < votes_.size(); ++i) {
        const int pred = votes_[i] >= 0 ? 1 : -1;
        wrong += pred != labels_[i];
    }
    return static_cast<double>(wrong) / static_cast<double>(votes_.size());
}

std::vector<float> compute_feature_values(std::span<const HaarFeature> pool, std::span<const IntegralImage> windows)
{
    std::vector<float> out(pool.size() * windows.size());
    std::vector<double> sd(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (windows[i].width() < kHaarWindow || windows[i].height() < kHaarWindow) {
            throw std::invalid_argument("compute_feature_values: windows must be at least 24x24");
        }
        sd[i] = windows[i].stddev(0, 0, kHaarWindow, kHaarWindow);
    }
    for (std::size_t f = 0; f < pool.size(); ++f) {
        for (std::size_t i = 0; i < windows.size(); ++i) {
            // bit-identical to feature_value at scale 1, without recomputing the deviation
            const double raw = raw_feature_base(windows[i], pool[f]);
            out[f * windows.size() + i] = sd[i] == 0.0 ? 0.0f : static_cast<float>(raw / sd[i]);
        }
    }
    return out;
}

AdaBoostResult train_adaboost(std::span<const LabeledWindow> samples, std::span<const HaarFeature> pool, int rounds)
{
    if (pool.empty()) {
        throw std::invalid_argument("train_adaboost: empty feature pool");
    }
    std::vector<IntegralImage> windows;
    std::vector<int> labels;
    for (const auto& s : samples) {
        windows.push_back(s.ii);
        labels.push_back(s.label);
    }
    FeatureMatrix matrix(pool.size(), windows.size(), compute_feature_values(pool, windows));
    AdaBoostTrainer trainer(matrix, labels);
    AdaBoostResult result;
    for (int t = 0; t < rounds; ++t) {
        const auto ws = trainer.round();
        if (!ws) {
            result.warning = "adaboost stopped after " + std::to_string(t) + " rounds: best weak error >= 0.5";
            break;
        }
        result.stumps.push_back({pool[ws->feature], ws->threshold, ws->polarity, ws->alpha});
        result.training_error.push_back(trainer.training_error());
    }
    return result;
}

namespace {

float stump_vote(const Stump& s, const IntegralImage& ii, int x, int y, float scale)
{
    return s.alpha * static_cast<float>(s.predict(feature_value(ii, s.feature, x, y, scale, true)));
}

// Lowest threshold that still accepts at least d of the votes.
float threshold_for_rate(std::vector<float> votes, double d)
{
    std::sort(votes.begin(), votes.end());
    const auto n = votes.size();
    auto k = static_cast<std::size_t>(std::floor((1.0 - d) * static_cast<double>(n)));
    k = std::min(k, n - 1);
    return votes[k];
}

double accept_rate(std::span<const float> votes, float thr)
{
    if (votes.empty()) {
        return 0.0;
    }
    const auto n = std::count_if(votes.begin(), votes.end(), [thr](float v) { return v >= thr; });
    return static_cast<double>(n) / static_cast<double>(votes.size());
}

}  // namespace

namespace {

void check_targets(const CascadeTargets& t)
{
    if (!(t.min_detection_rate > 0 && t.min_detection_rate <= 1) ||
        !(t.max_false_positive_rate > 0 && t.max_false_positive_rate < 1) || t.max_stages < 1 ||
        t.max_stumps_per_stage < 1 || t.max_negatives_per_stage < 1) {
        throw std::invalid_argument("build_cascade: invalid stage targets");
    }
}

struct StageFit {
    HaarStage stage;
    double det_rate = 0;
    double fp_rate = 1;
    std::vector<float> neg_votes;  // over the evaluation negatives
};

// Boosts one stage on positives plus the first max_negatives_per_stage of `negs`, measuring its
// false-positive rate over all of `negs`.
StageFit fit_stage(std::span<const IntegralImage> positives, std::span<const IntegralImage* const> negs,
                   std::span<const HaarFeature> pool, const CascadeTargets& targets, int stage_idx)
{
    const std::size_t n_train = std::min(negs.size(), targets.max_negatives_per_stage);
    std::vector<IntegralImage> windows(positives.begin(), positives.end());
    std::vector<int> labels(positives.size(), 1);
    for (std::size_t i = 0; i < n_train; ++i) {
        windows.push_back(*negs[i]);
        labels.push_back(-1);
    }
    FeatureMatrix matrix(pool.size(), windows.size(), compute_feature_values(pool, windows));
    windows.clear();
    AdaBoostTrainer trainer(matrix, labels);

    StageFit fit;
    std::vector<float> pos_votes(positives.size(), 0.0f);
    fit.neg_votes.assign(negs.size(), 0.0f);
    while (static_cast<int>(fit.stage.stumps.size()) < targets.max_stumps_per_stage) {
        const auto ws = trainer.round();
        if (!ws) {
            break;
        }
        const Stump s{pool[ws->feature], ws->threshold, ws->polarity, ws->alpha};
        fit.stage.stumps.push_back(s);
        // accumulate exactly as evaluate_cascade does, so thresholds transfer bit for bit
        for (std::size_t i = 0; i < positives.size(); ++i) {
            pos_votes[i] += stump_vote(s, positives[i], 0, 0, 1.0f);
        }
        for (std::size_t i = 0; i < negs.size(); ++i) {
            fit.neg_votes[i] += stump_vote(s, *negs[i], 0, 0, 1.0f);
        }
        fit.stage.threshold = threshold_for_rate(pos_votes, targets.min_detection_rate);
        fit.det_rate = accept_rate(pos_votes, fit.stage.threshold);
        fit.fp_rate = accept_rate(fit.neg_votes, fit.stage.threshold);
        if (fit.fp_rate <= targets.max_false_positive_rate) {
            break;
        }
    }
    if (fit.stage.stumps.empty() || fit.det_rate < targets.min_detection_rate) {
        char buf[200];
        std::snprintf(buf, sizeof buf,
                      "build_cascade: stage %d cannot reach detection rate %.4f (achieved %.4f, false-positive "
                      "rate %.4f)",
                      stage_idx, targets.min_detection_rate, fit.det_rate, fit.fp_rate);
        throw CascadeError(buf);
    }
    return fit;
}

}  // namespace

HaarCascadeModel build_cascade(std::span<const IntegralImage> positives, std::span<const IntegralImage> negatives,
                               std::span<const HaarFeature> pool, const CascadeTargets& targets,
                               std::vector<StageReport>* report)
{
    if (positives.empty() || negatives.empty()) {
        throw std::invalid_argument("build_cascade: need both positive and negative windows");
    }
    check_targets(targets);
    HaarCascadeModel model;
    std::vector<const IntegralImage*> remaining;
    for (const auto& n : negatives) {
        remaining.push_back(&n);
    }
    for (int k = 0; k < targets.max_stages && !remaining.empty(); ++k) {
        StageFit fit = fit_stage(positives, remaining, pool, targets, k);
        if (report) {
            report->push_back({fit.stage.stumps.size(), fit.det_rate, fit.fp_rate, remaining.size()});
        }
        std::vector<const IntegralImage*> survivors;
        for (std::size_t i = 0; i < remaining.size(); ++i) {
            if (fit.neg_votes[i] >= fit.stage.threshold) {
                survivors.push_back(remaining[i]);
            }
        }
        model.stages.push_back(std::move(fit.stage));
        remaining = std::move(survivors);
    }
    return model;
}

HaarCascadeModel build_cascade(std::span<const IntegralImage> positives, const NegativeSource& negatives,
                               std::span<const HaarFeature> pool, const CascadeTargets& targets,
                               std::vector<StageReport>* report)
{
    if (positives.empty() || !negatives) {
        throw std::invalid_argument("build_cascade: need positives and a negative source");
    }
    check_targets(targets);
    HaarCascadeModel model;
    for (int k = 0; k < targets.max_stages; ++k) {
        std::vector<IntegralImage> negs;
        for (std::size_t draws = 0; negs.size() < targets.max_negatives_per_stage && draws < targets.max_negative_draws;
             ++draws) {
            auto w = negatives(model);
            if (!w) {
                break;
            }
            if (model.stages.empty() || evaluate_cascade(model, *w, 0, 0, 1.0f)) {
                negs.push_back(std::move(*w));
            }
        }
        if (negs.empty()) {
            break;
        }
        std::vector<const IntegralImage*> ptrs;
        for (const auto& n : negs) {
            ptrs.push_back(&n);
        }
        StageFit fit = fit_stage(positives, ptrs, pool, targets, k);
        if (report) {
            report->push_back({fit.stage.stumps.size(), fit.det_rate, fit.fp_rate, negs.size()});
        }
        model.stages.push_back(std::move(fit.stage));
    }
    if (model.stages.empty()) {
        throw CascadeError("build_cascade: the negative source produced no windows");
    }
    return model;
}

std::optional<float> evaluate_cascade(const HaarCascadeModel& model, const IntegralImage& ii, int x, int y,
                                      float scale, CascadeStats* stats)
{
    if (stats) {
        ++stats->windows;
        if (stats->stage_evaluations.size() < model.stages.size()) {
            stats->stage_evaluations.resize(model.stages.size(), 0);
        }
    }
    float margin = 0;
    for (std::size_t k = 0; k < model.stages.size(); ++k) {
        if (stats) {
            ++stats->stage_evaluations[k];
        }
        const HaarStage& st = model.stages[k];
        float vote = 0;
        for (const Stump& s : st.stumps) {
            vote += stump_vote(s, ii, x, y, scale);
        }
        if (!(vote >= st.threshold)) {
            return std::nullopt;
        }
        margin = vote - st.threshold;
    }
    return margin;
}

std::vector<Detection> detect_haar(const Image& image, const HaarCascadeModel& model, const ScanConfig& scan,
                                   CascadeStats* stats)
{
    if (model.stages.empty()) {
        throw std::invalid_argument("detect_haar: model has no stages");
    }
    if (!(scan.scale_step > 1.0f) || scan.window_stride < 1) {
        throw std::invalid_argument("detect_haar: scale_step must exceed 1 and stride must be positive");
    }
    const IntegralImage ii(image);
    std::vector<Detection> dets;
    for (float scale = 1.0f;; scale *= scan.scale_step) {
        const int win = static_cast<int>(std::floor(kHaarWindow * scale));
        if (win > ii.width() || win > ii.height()) {
            break;
        }
        const int step = std::max(1, static_cast<int>(std::lround(scan.window_stride * scale)));
        for (int y = 0; y + win <= ii.height(); y += step) {
            for (int x = 0; x + win <= ii.width(); x += step) {
                if (const auto m = evaluate_cascade(model, ii, x, y, scale, stats)) {
                    const float score = 1.0f / (1.0f + std::exp(-*m));
                    dets.push_back({Box{static_cast<float>(x), static_cast<float>(y), static_cast<float>(x + win),
                                        static_cast<float>(y + win)},
                                    score, std::nullopt});
                }
            }
        }
    }
    std::vector<Detection> out;
    for (std::size_t i : nms(dets, scan.nms_threshold, IouMode::Union)) {
        out.push_back(dets[i]);
    }
    return out;
}

HaarTrainingSet synth_haar_set(int positives, int negatives, std::uint64_t seed)
{
    if (positives < 0 || negatives < 0) {
        throw std::invalid_argument("synth_haar_set: counts must be non-negative");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    HaarTrainingSet set;
    const SceneConfig cfg;
    while (static_cast<int>(set.positives.size()) < positives || static_cast<int>(set.negatives.size()) < negatives) {
        const SyntheticScene scene = render_scene(cfg, rng);
        for (const auto& f : scene.faces) {
            if (static_cast<int>(set.positives.size()) >= positives) {
                break;
            }
            // jitter covers the scan's scale step and stride misalignment
            const float side = std::max(f.box.width(), f.box.height()) * (0.9f + 0.3f * unit(rng));
            const float cx = (f.box.x1 + f.box.x2) / 2 + (unit(rng) - 0.5f) * 0.12f * side;
            const float cy = (f.box.y1 + f.box.y2) / 2 + (unit(rng) - 0.5f) * 0.12f * side;
            const Box crop{cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2};
            set.positives.emplace_back(crop_patch(scene.image, crop, kHaarWindow));
        }
        // a handful of background windows per scene keeps the pool diverse
        const int max_side = std::min(scene.image.width, scene.image.height);
        for (int k = 0; k < 12 && static_cast<int>(set.negatives.size()) < negatives; ++k) {
            const int side = kHaarWindow + static_cast<int>(unit(rng) * static_cast<float>(max_side - kHaarWindow));
            const int x = static_cast<int>(unit(rng) * static_cast<float>(scene.image.width - side + 1));
            const int y = static_cast<int>(unit(rng) * static_cast<float>(scene.image.height - side + 1));
            const Box b{static_cast<float>(x), static_cast<float>(y), static_cast<float>(x + side),
                        static_cast<float>(y + side)};
            const bool clear = std::all_of(scene.faces.begin(), scene.faces.end(),
                                           [&](const FaceTruth& f) { return iou(f.box, b) < 0.3f; });
            if (clear) {
                set.negatives.emplace_back(crop_patch(scene.image, b, kHaarWindow));
            }
        }
    }
    return set;
}

NegativeSource synth_negative_source(std::uint64_t seed, const ScanConfig& scan, int max_scenes)
{
    struct State {
        std::mt19937_64 rng;
        SyntheticScene scene;
        std::vector<Box> hits;
        std::size_t next = 0;
    };
    auto st = std::make_shared<State>();
    st->rng.seed(seed);
    return [st, scan, max_scenes](const HaarCascadeModel& model) -> std::optional<IntegralImage> {
        for (int scenes = 0; st->next >= st->hits.size(); ++scenes) {
            if (scenes >= max_scenes) {
                return std::nullopt;
            }
            st->scene = render_scene(SceneConfig{}, st->rng);
            st->hits.clear();
            st->next = 0;
            const IntegralImage ii(st->scene.image);
            for (float scale = 1.0f;; scale *= scan.scale_step) {
                const int win = static_cast<int>(std::floor(kHaarWindow * scale));
                if (win > ii.width() || win > ii.height()) {
                    break;
                }
                const int step = std::max(1, static_cast<int>(std::lround(scan.window_stride * scale)));
                for (int y = 0; y + win <= ii.height(); y += step) {
                    for (int x = 0; x + win <= ii.width(); x += step) {
                        const Box b{static_cast<float>(x), static_cast<float>(y), static_cast<float>(x + win),
                                    static_cast<float>(y + win)};
                        const bool clear = std::all_of(st->scene.faces.begin(), st->scene.faces.end(),
                                                       [&](const FaceTruth& f) { return iou(f.box, b) < 0.3f; });
                        if (clear && (model.stages.empty() || evaluate_cascade(model, ii, x, y, scale))) {
                            st->hits.push_back(b);
                        }
                    }
                }
            }
            std::shuffle(st->hits.begin(), st->hits.end(), st->rng);
            // cap per scene so one background cannot dominate a stage
            st->hits.resize(std::min<std::size_t>(st->hits.size(), 100));
        }
        return IntegralImage(crop_patch(st->scene.image, st->hits[st->next++], kHaarWindow));
    };
}

namespace {

const char* kind_token(HaarKind k)
{
    switch (k) {
    case HaarKind::TwoRectH: return "two_h";
    case HaarKind::TwoRectV: return "two_v";
    case HaarKind::ThreeRectH: return "three_h";
    case HaarKind::FourRect: return "four";
    }
    return "?";
}

HaarKind parse_kind(const std::string& s, int line)
{
    if (s == "two_h") return HaarKind::TwoRectH;
    if (s == "two_v") return HaarKind::TwoRectV;
    if (s == "three_h") return HaarKind::ThreeRectH;
    if (s == "four") return HaarKind::FourRect;
    throw std::runtime_error("cascade line " + std::to_string(line) + ": unknown feature kind '" + s + "'");
}

std::string g9(float v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

}  // namespace

// Format:
//   haar-cascade 1
//   window 24
//   stage <k> <threshold>
//   stump <k> <kind> <x> <y> <w> <h> <threshold> <polarity> <alpha>
std::string format_cascade(const HaarCascadeModel& model)
{
    std::string out = "haar-cascade 1\nwindow 24\n";
    for (std::size_t k = 0; k < model.stages.size(); ++k) {
        const auto& st = model.stages[k];
        out += "stage " + std::to_string(k) + " " + g9(st.threshold) + "\n";
        for (const auto& s : st.stumps) {
            const auto& f = s.feature;
            out += "stump " + std::to_string(k) + " " + kind_token(f.kind) + " " + std::to_string(f.x) + " " +
                   std::to_string(f.y) + " " + std::to_string(f.w) + " " + std::to_string(f.h) + " " +
                   g9(s.threshold) + " " + std::to_string(s.polarity) + " " + g9(s.alpha) + "\n";
        }
    }
    return out;
}

HaarCascadeModel parse_cascade(const std::string& text)
{
    HaarCascadeModel model;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    bool header = false;
    auto fail = [&](const std::string& msg) {
        throw std::runtime_error("cascade line " + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "haar-cascade") {
            int version = 0;
            if (!(ls >> version) || version != 1) {
                fail("unsupported version");
            }
            header = true;
        } else if (!header) {
            fail("missing 'haar-cascade 1' header");
        } else if (tag == "window") {
            int w = 0;
            if (!(ls >> w) || w != kHaarWindow) {
                fail("window must be 24");
            }
        } else if (tag == "stage") {
            std::size_t k = 0;
            float thr = 0;
            if (!(ls >> k >> thr) || k != model.stages.size()) {
                fail("malformed or out-of-order stage");
            }
            model.stages.push_back({{}, thr});
        } else if (tag == "stump") {
            std::size_t k = 0;
            std::string kind;
            HaarFeature f{};
            Stump s{};
            if (!(ls >> k >> kind >> f.x >> f.y >> f.w >> f.h >> s.threshold >> s.polarity >> s.alpha)) {
                fail("malformed stump");
            }
            if (model.stages.empty() || k != model.stages.size() - 1) {
                fail("stump refers to a stage that is not current");
            }
            f.kind = parse_kind(kind, lineno);
            if (f.x < 0 || f.y < 0 || f.w < 1 || f.h < 1 || f.x + f.w > kHaarWindow || f.y + f.h > kHaarWindow) {
                fail("feature rectangle outside the window");
            }
            if (s.polarity != 1 && s.polarity != -1) {
                fail("polarity must be 1 or -1");
            }
            s.feature = f;
            model.stages.back().stumps.push_back(s);
        } else {
            fail("unknown record '" + tag + "'");
        }
        std::string extra;
        if (ls >> extra) {
            fail("trailing tokens");
        }
    }
    if (model.stages.empty()) {
        throw std::runtime_error("cascade: no stages");
    }
    return model;
}

void save_cascade(const HaarCascadeModel& model, const std::filesystem::path& path)
{
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        out << format_cascade(model);
        if (!out) {
            throw std::runtime_error("cannot write " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

HaarCascadeModel load_cascade(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open cascade model " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_cascade(ss.str());
}

}  // namespace mtcnn
