#pragma once

#include "mtcnn/tensor.hpp"

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace mtcnn {

/// Axis-aligned box in continuous pixel coordinates; width = x2 - x1.
struct Box {
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    float width() const { return x2 - x1; }
    float height() const { return y2 - y1; }
    float area() const { return width() * height(); }
    bool valid() const;

    bool operator==(const Box&) const = default;
};

struct Point {
    float x = 0, y = 0;
    bool operator==(const Point&) const = default;
};

using Landmarks = std::array<Point, 5>;

struct Detection {
    Box box;
    float score = 0;
    /// Left eye, right eye, nose, left mouth corner, right mouth corner.
    std::optional<Landmarks> landmarks;
};

/// Box offsets normalized by the box width (x) and height (y).
struct RegOffsets {
    float dx1 = 0, dy1 = 0, dx2 = 0, dy2 = 0;
};

/// A detection whose regression offsets have not been applied yet.
struct Candidate {
    Detection det;
    RegOffsets reg;
};

enum class IouMode { Union, Min };

float iou(const Box& a, const Box& b, IouMode mode = IouMode::Union);

/// Greedy non-maximum suppression. Returns kept indices in descending score order;
/// equal scores keep ascending index order.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const float> scores, float threshold,
                             IouMode mode = IouMode::Union);
std::vector<std::size_t> nms(std::span<const Detection> dets, float threshold, IouMode mode = IouMode::Union);

/// Returns nullopt when the corrected box has non-positive width or height.
std::optional<Box> apply_regression(const Box& box, const RegOffsets& off);

/// Smallest center-preserving square containing the box.
Box to_square(const Box& box);

/// P-Net cell geometry.
inline constexpr int kPNetStride = 2;
inline constexpr int kPNetCell = 12;

/// Candidates for every map cell with face probability >= threshold.
/// face_prob is [1,1,h,w], box_offsets [1,4,h,w].
std::vector<Candidate> decode_pnet_map(const Tensor& face_prob, const Tensor& box_offsets, float scale,
                                       float threshold);

/// Integer copy plan for cropping a box out of an image with zero fill.
struct CropPlan {
    int src_x1 = 0, src_y1 = 0, src_x2 = 0, src_y2 = 0;  // clamped source rectangle, exclusive end
    int dst_x = 0, dst_y = 0;                            // where the source lands in the crop
    int dst_w = 0, dst_h = 0;                            // crop extent (rounded box extent)
};

/// Rounds half away from zero. Throws std::invalid_argument when the box misses the image.
CropPlan crop_geometry(const Box& box, int image_w, int image_h);

}  // namespace mtcnn
