#include "mtcnn/synth.hpp"

#include "mtcnn/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace mtcnn {

namespace {

using Rng = std::mt19937_64;
using Color = std::array<float, 3>;

float uniform(Rng& rng, float lo, float hi)
{
    return std::uniform_real_distribution<float>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi)
{
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

Color random_color(Rng& rng)
{
    return {uniform(rng, 0, 255), uniform(rng, 0, 255), uniform(rng, 0, 255)};
}

Color skin_color(Rng& rng)
{
    const float v = uniform(rng, 175, 240);
    return {v, v * uniform(rng, 0.74f, 0.88f), v * uniform(rng, 0.58f, 0.76f)};
}

void blend(Image& img, int x, int y, const Color& c, float alpha)
{
    if (x < 0 || y < 0 || x >= img.width || y >= img.height || alpha <= 0) {
        return;
    }
    for (int ch = 0; ch < 3; ++ch) {
        const float v = img.at(x, y, ch) * (1 - alpha) + c[static_cast<std::size_t>(ch)] * alpha;
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
}

// Ellipse with 4x4 supersampled coverage; shade scales the colour toward the rim.
void fill_ellipse(Image& img, float cx, float cy, float rx, float ry, const Color& c, float alpha, float shade = 0)
{
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx)));
    const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + rx)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry)));
    const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + ry)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            int hits = 0;
            for (int sy = 0; sy < 4; ++sy) {
                for (int sx = 0; sx < 4; ++sx) {
                    const float px = static_cast<float>(x) + (static_cast<float>(sx) + 0.5f) / 4.0f;
                    const float py = static_cast<float>(y) + (static_cast<float>(sy) + 0.5f) / 4.0f;
                    const float u = (px - cx) / rx, v = (py - cy) / ry;
                    hits += u * u + v * v <= 1.0f;
                }
            }
            if (hits == 0) {
                continue;
            }
            Color col = c;
            if (shade > 0) {
                const float u = (static_cast<float>(x) + 0.5f - cx) / rx, v = (static_cast<float>(y) + 0.5f - cy) / ry;
                const float k = 1.0f - shade * std::min(1.0f, u * u + v * v);
                for (auto& ch : col) {
                    ch *= k;
                }
            }
            blend(img, x, y, col, alpha * static_cast<float>(hits) / 16.0f);
        }
    }
}

// Axis-aligned rectangle with exact area coverage at the edges.
void fill_rect(Image& img, float x1, float y1, float x2, float y2, const Color& c, float alpha)
{
    const int xa = std::max(0, static_cast<int>(std::floor(x1)));
    const int xb = std::min(img.width - 1, static_cast<int>(std::ceil(x2)));
    const int ya = std::max(0, static_cast<int>(std::floor(y1)));
    const int yb = std::min(img.height - 1, static_cast<int>(std::ceil(y2)));
    for (int y = ya; y <= yb; ++y) {
        const float cy = std::max(0.0f, std::min(y2, static_cast<float>(y + 1)) - std::max(y1, static_cast<float>(y)));
        for (int x = xa; x <= xb; ++x) {
            const float cx = std::max(0.0f, std::min(x2, static_cast<float>(x + 1)) - std::max(x1, static_cast<float>(x)));
            blend(img, x, y, c, alpha * cx * cy);
        }
    }
}

void render_background_base(Image& img, Rng& rng)
{
    const Color c0 = random_color(rng), c1 = random_color(rng);
    const float angle = uniform(rng, 0, 6.2831853f);
    const float dx = std::cos(angle), dy = std::sin(angle);
    const float span = std::abs(dx) * static_cast<float>(img.width) + std::abs(dy) * static_cast<float>(img.height);
    const float offset = std::min(0.0f, dx * static_cast<float>(img.width)) + std::min(0.0f, dy * static_cast<float>(img.height));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const float t = (dx * static_cast<float>(x) + dy * static_cast<float>(y) - offset) / std::max(span, 1.0f);
            for (int ch = 0; ch < 3; ++ch) {
                const auto c = static_cast<std::size_t>(ch);
                img.at(x, y, ch) = static_cast<std::uint8_t>(std::lround(c0[c] + (c1[c] - c0[c]) * t));
            }
        }
    }
    const float w = static_cast<float>(img.width), h = static_cast<float>(img.height);
    const float extent = std::max(w, h);
    const int shapes = uniform_int(rng, 6, 14);
    for (int i = 0; i < shapes; ++i) {
        const int kind = uniform_int(rng, 0, 9);
        const float alpha = uniform(rng, 0.5f, 1.0f);
        const float cx = uniform(rng, 0, w), cy = uniform(rng, 0, h);
        if (kind <= 3) {
            const float sw = uniform(rng, 0.05f, 0.4f) * extent, sh = uniform(rng, 0.05f, 0.4f) * extent;
            fill_rect(img, cx - sw / 2, cy - sh / 2, cx + sw / 2, cy + sh / 2, random_color(rng), alpha);
        } else if (kind <= 6) {
            const float r = uniform(rng, 0.02f, 0.2f) * extent;
            fill_ellipse(img, cx, cy, r, r * uniform(rng, 0.6f, 1.6f), random_color(rng), alpha);
        } else if (kind <= 8) {
            const bool horizontal = uniform_int(rng, 0, 1) == 1;
            const float t = uniform(rng, 1.0f, 0.06f * extent);
            const Color c = random_color(rng);
            if (horizontal) {
                fill_rect(img, 0, cy, w, cy + t, c, alpha);
            } else {
                fill_rect(img, cx, 0, cx + t, h, c, alpha);
            }
        } else {
            // Featureless skin-toned blob.
            const float r = uniform(rng, 0.06f, 0.25f) * extent;
            fill_ellipse(img, cx, cy, r, r * uniform(rng, 1.0f, 1.25f), skin_color(rng), 1.0f, 0.2f);
        }
    }
}

void add_noise(Image& img, Rng& rng)
{
    std::uniform_int_distribution<int> noise(-10, 10);
    for (auto& v : img.data) {
        v = static_cast<std::uint8_t>(std::clamp(static_cast<int>(v) + noise(rng), 0, 255));
    }
}

Box integer_square(float cx, float cy, float side)
{
    const float s = std::max(1.0f, std::round(side));
    const float x1 = std::round(cx - s / 2), y1 = std::round(cy - s / 2);
    return {x1, y1, x1 + s, y1 + s};
}

// Square crop around the truth with IoU inside [lo, hi).
Box sample_crop(const Box& truth, float lo, float hi, float side_lo, float side_hi, float jitter, Rng& rng)
{
    const float base = std::max(truth.width(), truth.height());
    const float cx = (truth.x1 + truth.x2) / 2, cy = (truth.y1 + truth.y2) / 2;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const float side = base * uniform(rng, side_lo, side_hi);
        const Box c = integer_square(cx + uniform(rng, -jitter, jitter) * side, cy + uniform(rng, -jitter, jitter) * side,
                                     side);
        const float v = iou(c, truth);
        if (v >= lo && v < hi) {
            return c;
        }
    }
    // Tight square always lands in the positive band.
    return integer_square(cx, cy, base);
}

// A canvas holding one face with room around it for crops.
SyntheticScene face_canvas(Rng& rng)
{
    const float fw = uniform(rng, 20.0f, 64.0f);
    const float fh = fw * uniform(rng, 1.0f, 1.2f);
    const int side = static_cast<int>(std::ceil(std::max(fw, fh) * 2.2f)) + 4;
    SyntheticScene s{Image(side, side, 3), {}};
    render_background_base(s.image, rng);
    const float cx = uniform(rng, fw / 2 + 1, static_cast<float>(side) - fw / 2 - 1);
    const float cy = uniform(rng, fh / 2 + 1, static_cast<float>(side) - fh / 2 - 1);
    s.faces.push_back(render_face(s.image, cx, cy, fw, fh, rng));
    add_noise(s.image, rng);
    return s;
}

}  // namespace

void render_background(Image& image, std::mt19937_64& rng)
{
    render_background_base(image, rng);
    add_noise(image, rng);
}

FaceTruth render_face(Image& image, float cx, float cy, float width, float height, std::mt19937_64& rng)
{
    const Color skin = skin_color(rng);
    fill_ellipse(image, cx, cy, width / 2, height / 2, skin, 1.0f, 0.25f);

    const float eye_dx = width * uniform(rng, 0.18f, 0.22f);
    const float eye_y = cy - height * uniform(rng, 0.10f, 0.14f);
    const float eye_r = std::max(0.8f, width * 0.075f);
    const Color eye{uniform(rng, 10, 50), uniform(rng, 10, 50), uniform(rng, 10, 50)};
    fill_ellipse(image, cx - eye_dx, eye_y, eye_r, eye_r, eye, 1.0f);
    fill_ellipse(image, cx + eye_dx, eye_y, eye_r, eye_r, eye, 1.0f);

    const float nose_y = cy + height * uniform(rng, 0.06f, 0.10f);
    const Color nose{skin[0] * 0.75f, skin[1] * 0.7f, skin[2] * 0.7f};
    fill_ellipse(image, cx, nose_y, std::max(0.7f, width * 0.05f), std::max(0.7f, width * 0.06f), nose, 1.0f);

    const float mouth_y = cy + height * uniform(rng, 0.24f, 0.29f);
    const float mouth_half = width * uniform(rng, 0.17f, 0.23f);
    const float mouth_t = std::max(1.0f, height * 0.08f);
    const Color mouth{uniform(rng, 70, 120), uniform(rng, 20, 55), uniform(rng, 20, 55)};
    fill_rect(image, cx - mouth_half, mouth_y - mouth_t / 2, cx + mouth_half, mouth_y + mouth_t / 2, mouth, 1.0f);

    FaceTruth t;
    t.box = {cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2};
    t.landmarks = {Point{cx - eye_dx, eye_y}, Point{cx + eye_dx, eye_y}, Point{cx, nose_y},
                   Point{cx - mouth_half, mouth_y}, Point{cx + mouth_half, mouth_y}};
    return t;
}

SyntheticScene render_scene(const SceneConfig& cfg, std::mt19937_64& rng)
{
    SyntheticScene s{Image(cfg.width, cfg.height, 3), {}};
    render_background_base(s.image, rng);
    const int count = uniform_int(rng, cfg.min_faces, cfg.max_faces);
    const float max_face = std::min({cfg.max_face, static_cast<float>(cfg.width) - 2,
                                     static_cast<float>(cfg.height) / 1.2f - 2});
    for (int k = 0; k < count; ++k) {
        for (int attempt = 0; attempt < 200; ++attempt) {
            const float fw = uniform(rng, cfg.min_face, std::max(cfg.min_face, max_face));
            const float fh = fw * uniform(rng, 1.0f, 1.2f);
            const float cx = uniform(rng, fw / 2 + 1, static_cast<float>(cfg.width) - fw / 2 - 1);
            const float cy = uniform(rng, fh / 2 + 1, static_cast<float>(cfg.height) - fh / 2 - 1);
            const Box b{cx - fw / 2 - 2, cy - fh / 2 - 2, cx + fw / 2 + 2, cy + fh / 2 + 2};
            const bool clear = std::none_of(s.faces.begin(), s.faces.end(),
                                            [&](const FaceTruth& f) { return iou(f.box, b) > 0; });
            if (clear) {
                s.faces.push_back(render_face(s.image, cx, cy, fw, fh, rng));
                break;
            }
        }
    }
    add_noise(s.image, rng);
    return s;
}

std::vector<SyntheticScene> synth_scenes(int n, std::uint64_t seed, const SceneConfig& cfg)
{
    Rng rng(seed);
    std::vector<SyntheticScene> out;
    out.reserve(static_cast<std::size_t>(std::max(n, 0)));
    for (int i = 0; i < n; ++i) {
        out.push_back(render_scene(cfg, rng));
    }
    return out;
}

const char* sample_kind_name(SampleKind kind)
{
    switch (kind) {
    case SampleKind::Positive: return "positive";
    case SampleKind::Negative: return "negative";
    case SampleKind::Part: return "part";
    case SampleKind::Landmark: return "landmark";
    }
    return "?";
}

std::array<float, 4> box_target(const Box& crop, const Box& truth)
{
    const float w = crop.width(), h = crop.height();
    return {(truth.x1 - crop.x1) / w, (truth.y1 - crop.y1) / h, (truth.x2 - crop.x2) / w, (truth.y2 - crop.y2) / h};
}

std::array<float, 10> landmark_target(const Box& crop, const Landmarks& pts)
{
    std::array<float, 10> t{};
    for (std::size_t k = 0; k < 5; ++k) {
        t[2 * k] = (pts[k].x - crop.x1) / crop.width();
        t[2 * k + 1] = (pts[k].y - crop.y1) / crop.height();
    }
    return t;
}

std::vector<SyntheticWindow> synth_windows(int n, int patch_size, std::uint64_t seed)
{
    static constexpr std::array<SampleKind, 7> kPattern{SampleKind::Positive, SampleKind::Negative,
                                                        SampleKind::Negative, SampleKind::Negative,
                                                        SampleKind::Part,     SampleKind::Landmark,
                                                        SampleKind::Landmark};
    Rng rng(seed);
    std::vector<SyntheticWindow> out;
    out.reserve(static_cast<std::size_t>(std::max(n, 0)));
    int negatives = 0;
    for (int i = 0; i < n; ++i) {
        SyntheticWindow w;
        w.kind = kPattern[static_cast<std::size_t>(i) % kPattern.size()];
        SyntheticScene canvas;
        if (w.kind == SampleKind::Negative && negatives++ % 3 != 2) {
            // Pure texture.
            const int side = uniform_int(rng, 48, 128);
            canvas.image = Image(side, side, 3);
            render_background(canvas.image, rng);
            const float crop_side = std::round(uniform(rng, 12.0f, static_cast<float>(side)));
            const float x1 = std::round(uniform(rng, 0, static_cast<float>(side) - crop_side));
            const float y1 = std::round(uniform(rng, 0, static_cast<float>(side) - crop_side));
            w.crop = {x1, y1, x1 + crop_side, y1 + crop_side};
        } else {
            canvas = face_canvas(rng);
            const Box& truth = canvas.faces[0].box;
            switch (w.kind) {
            case SampleKind::Positive:
            case SampleKind::Landmark:
                w.crop = sample_crop(truth, 0.65f, 1.01f, 0.85f, 1.15f, 0.12f, rng);
                break;
            case SampleKind::Part:
                w.crop = sample_crop(truth, 0.4f, 0.65f, 0.8f, 1.25f, 0.4f, rng);
                break;
            case SampleKind::Negative: {
                // Clutter near a face that overlaps it only weakly.
                const float base = std::max(truth.width(), truth.height());
                const float side_px = static_cast<float>(canvas.image.width);
                for (;;) {
                    const float side = base * uniform(rng, 0.6f, 1.5f);
                    const Box c = integer_square(uniform(rng, 0, side_px), uniform(rng, 0, side_px), side);
                    if (iou(c, truth) < 0.3f && c.x2 > 1 && c.y2 > 1 && c.x1 < side_px - 1 && c.y1 < side_px - 1) {
                        w.crop = c;
                        break;
                    }
                }
                break;
            }
            }
            w.box_target = box_target(w.crop, truth);
            w.landmark_target = landmark_target(w.crop, canvas.faces[0].landmarks);
        }
        w.truths = canvas.faces;
        w.patch = crop_patch(canvas.image, w.crop, patch_size);
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace mtcnn
