#include "mtcnn/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mtcnn {

bool Box::valid() const
{
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 > x1 && y2 > y1;
}

float iou(const Box& a, const Box& b, IouMode mode)
{
    const float iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const float ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0 || ih <= 0) {
        return 0.0f;
    }
    const float inter = iw * ih;
    const float denom = mode == IouMode::Union ? a.area() + b.area() - inter : std::min(a.area(), b.area());
    return std::clamp(inter / denom, 0.0f, 1.0f);
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const float> scores, float threshold, IouMode mode)
{
    if (boxes.size() != scores.size()) {
        throw std::invalid_argument("nms: boxes and scores differ in length");
    }
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    std::vector<std::size_t> kept;
    std::vector<char> suppressed(boxes.size(), 0);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::size_t cur = order[i];
        if (suppressed[cur]) {
            continue;
        }
        kept.push_back(cur);
        for (std::size_t j = i + 1; j < order.size(); ++j) {
            const std::size_t other = order[j];
            if (!suppressed[other] && iou(boxes[cur], boxes[other], mode) > threshold) {
                suppressed[other] = 1;
            }
        }
    }
    return kept;
}

std::vector<std::size_t> nms(std::span<const Detection> dets, float threshold, IouMode mode)
{
    std::vector<Box> boxes;
    std::vector<float> scores;
    boxes.reserve(dets.size());
    scores.reserve(dets.size());
    for (const auto& d : dets) {
        boxes.push_back(d.box);
        scores.push_back(d.score);
    }
    return nms(boxes, scores, threshold, mode);
}

std::optional<Box> apply_regression(const Box& box, const RegOffsets& off)
{
    const float w = box.width();
    const float h = box.height();
    Box out{box.x1 + off.dx1 * w, box.y1 + off.dy1 * h, box.x2 + off.dx2 * w, box.y2 + off.dy2 * h};
    if (!out.valid()) {
        return std::nullopt;
    }
    return out;
}

Box to_square(const Box& box)
{
    const float side = std::max(box.width(), box.height());
    const float cx = box.x1 + box.width() * 0.5f;
    const float cy = box.y1 + box.height() * 0.5f;
    return {cx - side * 0.5f, cy - side * 0.5f, cx + side * 0.5f, cy + side * 0.5f};
}

std::vector<Candidate> decode_pnet_map(const Tensor& face_prob, const Tensor& box_offsets, float scale,
                                       float threshold)
{
    if (face_prob.rank() != 4 || box_offsets.rank() != 4 || face_prob.dim(1) != 1 || box_offsets.dim(1) != 4 ||
        face_prob.dim(2) != box_offsets.dim(2) || face_prob.dim(3) != box_offsets.dim(3)) {
        throw ShapeError("decode_pnet_map: maps must be [1,1,h,w] and [1,4,h,w] with equal extents");
    }
    if (!(scale > 0.0f && scale <= 1.0f)) {
        throw std::invalid_argument("decode_pnet_map: scale must be in (0, 1]");
    }
    const int h = face_prob.dim(2), w = face_prob.dim(3);
    std::vector<Candidate> out;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const float p = face_prob.at(0, 0, i, j);
            if (p < threshold) {
                continue;
            }
            Candidate c;
            c.det.box = {static_cast<float>(kPNetStride * j) / scale, static_cast<float>(kPNetStride * i) / scale,
                         static_cast<float>(kPNetStride * j + kPNetCell) / scale,
                         static_cast<float>(kPNetStride * i + kPNetCell) / scale};
            c.det.score = p;
            c.reg = {box_offsets.at(0, 0, i, j), box_offsets.at(0, 1, i, j), box_offsets.at(0, 2, i, j),
                     box_offsets.at(0, 3, i, j)};
            out.push_back(c);
        }
    }
    return out;
}

CropPlan crop_geometry(const Box& box, int image_w, int image_h)
{
    if (image_w <= 0 || image_h <= 0) {
        throw std::invalid_argument("crop_geometry: image extents must be positive");
    }
    if (!box.valid()) {
        throw std::invalid_argument("crop_geometry: invalid box");
    }
    const int bx1 = static_cast<int>(std::round(box.x1));
    const int by1 = static_cast<int>(std::round(box.y1));
    int bx2 = static_cast<int>(std::round(box.x2));
    int by2 = static_cast<int>(std::round(box.y2));
    bx2 = std::max(bx2, bx1 + 1);
    by2 = std::max(by2, by1 + 1);

    CropPlan plan;
    plan.dst_w = bx2 - bx1;
    plan.dst_h = by2 - by1;
    plan.src_x1 = std::max(bx1, 0);
    plan.src_y1 = std::max(by1, 0);
    plan.src_x2 = std::min(bx2, image_w);
    plan.src_y2 = std::min(by2, image_h);
    if (plan.src_x2 <= plan.src_x1 || plan.src_y2 <= plan.src_y1) {
        throw std::invalid_argument("crop_geometry: box lies entirely outside the image");
    }
    plan.dst_x = plan.src_x1 - bx1;
    plan.dst_y = plan.src_y1 - by1;
    return plan;
}

}  // namespace mtcnn
