#include "mtcnn/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace mtcnn {

namespace {

constexpr std::size_t kRefineBatch = 128;

double seconds_since(std::chrono::steady_clock::time_point start)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<Detection> apply_nms(std::vector<Detection> dets, const NmsSetting& s)
{
    const auto keep = nms(dets, s.threshold, s.mode);
    std::vector<Detection> out;
    out.reserve(keep.size());
    for (auto i : keep) {
        out.push_back(std::move(dets[i]));
    }
    return out;
}

struct RefineHit {
    std::size_t index;
    float score;
    RegOffsets reg;
    std::array<float, 10> landmarks;
};

// Crops every candidate, runs the stage network in batches and returns hits above threshold.
std::vector<RefineHit> refine(const Image& rgb, std::span<const Detection> candidates, const NetworkSpec& spec,
                              const WeightStore& weights, float threshold)
{
    const int size = spec.input_size;
    const std::size_t plane = static_cast<std::size_t>(3) * size * size;
    std::vector<std::size_t> usable;
    std::vector<Image> patches;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        try {
            patches.push_back(crop_patch(rgb, candidates[i].box, size));
            usable.push_back(i);
        } catch (const std::invalid_argument&) {
            // Box fell outside the image or degenerated; drop it.
        }
    }
    std::vector<RefineHit> hits;
    for (std::size_t start = 0; start < patches.size(); start += kRefineBatch) {
        const std::size_t n = std::min(kRefineBatch, patches.size() - start);
        Tensor batch({static_cast<int>(n), 3, size, size});
        for (std::size_t k = 0; k < n; ++k) {
            normalize_into(patches[start + k], batch.data() + k * plane);
        }
        const StageOutput out = forward(spec, weights, batch);
        for (std::size_t k = 0; k < n; ++k) {
            const float p = out.face_prob[k];
            if (p < threshold) {
                continue;
            }
            RefineHit h{usable[start + k], p,
                        {out.box_offsets[4 * k], out.box_offsets[4 * k + 1], out.box_offsets[4 * k + 2],
                         out.box_offsets[4 * k + 3]},
                        {}};
            std::copy_n(out.landmark_offsets.data() + 10 * k, 10, h.landmarks.begin());
            hits.push_back(h);
        }
    }
    return hits;
}

}  // namespace

void PyramidConfig::validate() const
{
    if (!(min_face_size >= 12.0f)) {
        throw std::invalid_argument("min_face_size must be >= 12");
    }
    if (!(scale_factor > 0.0f && scale_factor < 1.0f)) {
        throw std::invalid_argument("scale_factor must be in (0, 1)");
    }
}

void CascadeConfig::validate() const
{
    for (float t : thresholds) {
        if (!(t > 0.0f && t < 1.0f)) {
            throw std::invalid_argument("stage thresholds must be in (0, 1)");
        }
    }
    for (const auto& s : {per_scale_nms, cross_scale_nms, rnet_nms, onet_nms}) {
        if (!(s.threshold > 0.0f && s.threshold <= 1.0f)) {
            throw std::invalid_argument("NMS thresholds must be in (0, 1]");
        }
    }
    pyramid.validate();
}

CascadeNets::CascadeNets(WeightStore store) : weights(std::move(store))
{
    validate_weights(pnet, weights);
    validate_weights(rnet, weights);
    validate_weights(onet, weights);
}

std::vector<float> pyramid_scales(int height, int width, const PyramidConfig& cfg)
{
    cfg.validate();
    const int min_extent = std::min(height, width);
    if (min_extent < kPNetCell) {
        throw std::invalid_argument("image is smaller than 12 px");
    }
    std::vector<float> scales;
    float s = static_cast<float>(kPNetCell) / cfg.min_face_size;
    while (static_cast<float>(min_extent) * s >= static_cast<float>(kPNetCell)) {
        scales.push_back(s);
        s *= cfg.scale_factor;
    }
    return scales;
}

std::vector<PyramidLevel> build_pyramid(const Image& image, const PyramidConfig& cfg)
{
    std::vector<PyramidLevel> levels;
    for (float s : pyramid_scales(image.height, image.width, cfg)) {
        const int h = static_cast<int>(std::ceil(static_cast<float>(image.height) * s));
        const int w = static_cast<int>(std::ceil(static_cast<float>(image.width) * s));
        levels.push_back({s, resize_bilinear(image, h, w)});
    }
    return levels;
}

std::vector<float> resize_bilinear_values(const Image& image, int out_h, int out_w)
{
    if (out_h <= 0 || out_w <= 0) {
        throw std::invalid_argument("resize_bilinear: output extents must be positive");
    }
    const int c = image.channels;
    std::vector<float> out(static_cast<std::size_t>(out_h) * out_w * c);
    const float ry = static_cast<float>(image.height) / static_cast<float>(out_h);
    const float rx = static_cast<float>(image.width) / static_cast<float>(out_w);

    struct Tap {
        int i0, i1;
        float f;
    };
    auto taps = [](int out_n, int in_n, float ratio) {
        std::vector<Tap> t(static_cast<std::size_t>(out_n));
        for (int d = 0; d < out_n; ++d) {
            float s = (static_cast<float>(d) + 0.5f) * ratio - 0.5f;
            s = std::clamp(s, 0.0f, static_cast<float>(in_n - 1));
            const int i0 = static_cast<int>(s);
            t[static_cast<std::size_t>(d)] = {i0, std::min(i0 + 1, in_n - 1), s - static_cast<float>(i0)};
        }
        return t;
    };
    const auto ty = taps(out_h, image.height, ry);
    const auto tx = taps(out_w, image.width, rx);
    std::size_t o = 0;
    for (int y = 0; y < out_h; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < out_w; ++x) {
            const Tap& b = tx[static_cast<std::size_t>(x)];
            for (int ch = 0; ch < c; ++ch, ++o) {
                const float v00 = image.at(b.i0, a.i0, ch), v01 = image.at(b.i1, a.i0, ch);
                const float v10 = image.at(b.i0, a.i1, ch), v11 = image.at(b.i1, a.i1, ch);
                const float top = v00 + (v01 - v00) * b.f;
                const float bottom = v10 + (v11 - v10) * b.f;
                out[o] = top + (bottom - top) * a.f;
            }
        }
    }
    return out;
}

Image resize_bilinear(const Image& image, int out_h, int out_w)
{
    if (out_h == image.height && out_w == image.width) {
        return image;
    }
    const auto values = resize_bilinear_values(image, out_h, out_w);
    Image out(out_w, out_h, image.channels);
    for (std::size_t i = 0; i < values.size(); ++i) {
        out.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(values[i]), 0L, 255L));
    }
    return out;
}

void normalize_into(const Image& rgb, float* dst)
{
    if (rgb.channels != 3) {
        throw std::invalid_argument("normalize_into: expected an RGB image");
    }
    const std::size_t plane = static_cast<std::size_t>(rgb.width) * rgb.height;
    for (std::size_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            dst[c * plane + i] = (static_cast<float>(rgb.data[3 * i + c]) - 127.5f) / 128.0f;
        }
    }
}

Tensor normalize(const Image& image)
{
    const Image rgb = to_rgb(image);
    Tensor t({1, 3, rgb.height, rgb.width});
    normalize_into(rgb, t.data());
    return t;
}

Image crop_patch(const Image& image, const Box& box, int size)
{
    const CropPlan plan = crop_geometry(box, image.width, image.height);
    Image crop(plan.dst_w, plan.dst_h, image.channels, 0);
    const int c = image.channels;
    const int row_bytes = (plan.src_x2 - plan.src_x1) * c;
    for (int y = plan.src_y1; y < plan.src_y2; ++y) {
        const auto* src = &image.data[(static_cast<std::size_t>(y) * image.width + plan.src_x1) * c];
        auto* dst = &crop.data[(static_cast<std::size_t>(plan.dst_y + y - plan.src_y1) * crop.width + plan.dst_x) * c];
        std::copy_n(src, row_bytes, dst);
    }
    return resize_bilinear(crop, size, size);
}

Landmarks map_landmarks(const Box& crop, std::span<const float> offsets)
{
    if (offsets.size() != 10) {
        throw std::invalid_argument("map_landmarks: expected 10 offsets");
    }
    Landmarks pts;
    for (std::size_t k = 0; k < 5; ++k) {
        pts[k] = {crop.x1 + offsets[2 * k] * crop.width(), crop.y1 + offsets[2 * k + 1] * crop.height()};
    }
    return pts;
}

std::vector<Detection> stage1(const Image& image, const CascadeNets& nets, const CascadeConfig& cfg,
                              std::size_t* raw_count)
{
    const Image rgb = to_rgb(image);
    std::vector<Candidate> all;
    std::size_t raw = 0;
    for (const auto& level : build_pyramid(rgb, cfg.pyramid)) {
        const StageOutput out = forward(nets.pnet, nets.weights, normalize(level.image));
        auto cands = decode_pnet_map(out.face_prob, out.box_offsets, level.scale, cfg.thresholds[0]);
        raw += cands.size();
        std::vector<Detection> dets;
        dets.reserve(cands.size());
        for (const auto& c : cands) {
            dets.push_back(c.det);
        }
        for (auto i : nms(dets, cfg.per_scale_nms.threshold, cfg.per_scale_nms.mode)) {
            all.push_back(cands[i]);
        }
    }
    if (raw_count) {
        *raw_count = raw;
    }
    std::vector<Detection> dets;
    dets.reserve(all.size());
    for (const auto& c : all) {
        dets.push_back(c.det);
    }
    std::vector<Detection> out;
    for (auto i : nms(dets, cfg.cross_scale_nms.threshold, cfg.cross_scale_nms.mode)) {
        if (auto b = apply_regression(all[i].det.box, all[i].reg)) {
            out.push_back({to_square(*b), all[i].det.score, std::nullopt});
        }
    }
    return out;
}

std::vector<Detection> stage2(const Image& image, std::span<const Detection> candidates, const CascadeNets& nets,
                              const CascadeConfig& cfg)
{
    if (candidates.empty()) {
        return {};
    }
    const Image rgb = to_rgb(image);
    std::vector<Detection> refined;
    for (const auto& h : refine(rgb, candidates, nets.rnet, nets.weights, cfg.thresholds[1])) {
        if (auto b = apply_regression(candidates[h.index].box, h.reg)) {
            refined.push_back({*b, h.score, std::nullopt});
        }
    }
    auto kept = apply_nms(std::move(refined), cfg.rnet_nms);
    for (auto& d : kept) {
        d.box = to_square(d.box);
    }
    return kept;
}

std::vector<Detection> stage3(const Image& image, std::span<const Detection> candidates, const CascadeNets& nets,
                              const CascadeConfig& cfg)
{
    if (candidates.empty()) {
        return {};
    }
    const Image rgb = to_rgb(image);
    std::vector<Detection> refined;
    for (const auto& h : refine(rgb, candidates, nets.onet, nets.weights, cfg.thresholds[2])) {
        const Box& crop = candidates[h.index].box;
        if (auto b = apply_regression(crop, h.reg)) {
            refined.push_back({*b, h.score, map_landmarks(crop, h.landmarks)});
        }
    }
    return apply_nms(std::move(refined), cfg.onet_nms);
}

PipelineResult detect(const Image& image, const CascadeNets& nets, const CascadeConfig& cfg)
{
    cfg.validate();
    PipelineResult r;
    auto t0 = std::chrono::steady_clock::now();
    auto s1 = stage1(image, nets, cfg, &r.stage1_raw);
    r.seconds[0] = seconds_since(t0);
    r.counts[0] = s1.size();

    t0 = std::chrono::steady_clock::now();
    auto s2 = stage2(image, s1, nets, cfg);
    r.seconds[1] = seconds_since(t0);
    r.counts[1] = s2.size();

    t0 = std::chrono::steady_clock::now();
    r.detections = stage3(image, s2, nets, cfg);
    r.seconds[2] = seconds_since(t0);
    r.counts[2] = r.detections.size();
    return r;
}

}  // namespace mtcnn
