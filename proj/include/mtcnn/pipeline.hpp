#pragma once

#include "mtcnn/geometry.hpp"
#include "mtcnn/imageio.hpp"
#include "mtcnn/nets.hpp"

#include <array>
#include <span>
#include <vector>

namespace mtcnn {

struct PyramidConfig {
    float min_face_size = 20.0f;
    float scale_factor = 0.709f;

    void validate() const;
};

struct NmsSetting {
    float threshold;
    IouMode mode;
};

struct CascadeConfig {
    std::array<float, 3> thresholds{0.6f, 0.7f, 0.7f};
    NmsSetting per_scale_nms{0.5f, IouMode::Union};
    NmsSetting cross_scale_nms{0.7f, IouMode::Union};
    NmsSetting rnet_nms{0.7f, IouMode::Union};
    NmsSetting onet_nms{0.7f, IouMode::Min};
    PyramidConfig pyramid;

    void validate() const;
};

/// The three stage networks sharing one (possibly combined) weight store.
struct CascadeNets {
    NetworkSpec pnet = build_pnet();
    NetworkSpec rnet = build_rnet();
    NetworkSpec onet = build_onet();
    WeightStore weights;

    CascadeNets() = default;
    /// Validates the store against all three networks.
    explicit CascadeNets(WeightStore store);
};

struct PipelineResult {
    std::vector<Detection> detections;
    /// Raw P-Net hits over all scales, then outputs of stages 1, 2 and 3.
    std::size_t stage1_raw = 0;
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> seconds{};
};

struct PyramidLevel {
    float scale;
    Image image;
};

std::vector<float> pyramid_scales(int height, int width, const PyramidConfig& cfg);
std::vector<PyramidLevel> build_pyramid(const Image& image, const PyramidConfig& cfg);

/// Bilinear samples before rounding, interleaved like the source.
std::vector<float> resize_bilinear_values(const Image& image, int out_h, int out_w);
Image resize_bilinear(const Image& image, int out_h, int out_w);

/// (v - 127.5) / 128 into a [1, 3, H, W] tensor; gray input is replicated.
Tensor normalize(const Image& image);
/// Writes the normalized CHW planes of an RGB image to dst.
void normalize_into(const Image& rgb, float* dst);

/// Crops the box (zero fill outside the image) and resizes it to size x size.
Image crop_patch(const Image& image, const Box& box, int size);

/// Landmark offsets are interleaved (x0, y0, ..., x4, y4), each normalized to the crop.
Landmarks map_landmarks(const Box& crop, std::span<const float> offsets);

std::vector<Detection> stage1(const Image& image, const CascadeNets& nets, const CascadeConfig& cfg,
                              std::size_t* raw_count = nullptr);
std::vector<Detection> stage2(const Image& image, std::span<const Detection> candidates, const CascadeNets& nets,
                              const CascadeConfig& cfg);
std::vector<Detection> stage3(const Image& image, std::span<const Detection> candidates, const CascadeNets& nets,
                              const CascadeConfig& cfg);

PipelineResult detect(const Image& image, const CascadeNets& nets, const CascadeConfig& cfg = {});

}  // namespace mtcnn
