#pragma once

#include "mtcnn/geometry.hpp"
#include "mtcnn/imageio.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace mtcnn {

/// Synthetic face: bright ellipse, two dark eyes, a nose mark and a mouth bar.
struct FaceTruth {
    Box box;
    Landmarks landmarks;
};

struct SyntheticScene {
    Image image;
    std::vector<FaceTruth> faces;
};

struct SceneConfig {
    int width = 128;
    int height = 128;
    int min_faces = 1;
    int max_faces = 2;
    float min_face = 22.0f;
    float max_face = 56.0f;
};

/// Textured clutter: gradient, random rectangles, discs and stripes, pixel noise.
void render_background(Image& image, std::mt19937_64& rng);

/// Draws a face of the given outer extent centred at (cx, cy).
FaceTruth render_face(Image& image, float cx, float cy, float width, float height, std::mt19937_64& rng);

/// One scene with non-overlapping faces fully inside the image.
SyntheticScene render_scene(const SceneConfig& cfg, std::mt19937_64& rng);

/// n scenes, deterministic for the seed.
std::vector<SyntheticScene> synth_scenes(int n, std::uint64_t seed, const SceneConfig& cfg = {});

enum class SampleKind { Positive, Negative, Part, Landmark };

const char* sample_kind_name(SampleKind kind);

/// A labelled training window before normalization.
struct SyntheticWindow {
    Image patch;  // RGB, size x size
    SampleKind kind;
    Box crop;     // crop box in its source canvas
    std::vector<FaceTruth> truths;  // faces present in the source canvas
    std::array<float, 4> box_target{};
    std::array<float, 10> landmark_target{};
};

/// Windows in a repeating 1:3:1:2 positive/negative/part/landmark pattern.
/// Positives and landmark windows overlap their face with IoU >= 0.65, parts with
/// IoU in [0.4, 0.65), negatives overlap every face with IoU < 0.3.
std::vector<SyntheticWindow> synth_windows(int n, int patch_size, std::uint64_t seed);

/// Regression target of a truth box relative to a crop, normalized by crop extent.
std::array<float, 4> box_target(const Box& crop, const Box& truth);
std::array<float, 10> landmark_target(const Box& crop, const Landmarks& pts);

}  // namespace mtcnn
