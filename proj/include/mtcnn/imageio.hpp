#pragma once

#include "mtcnn/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mtcnn {

/// 8-bit image, row-major with interleaved channels (1 = gray, 3 = RGB).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0);

    std::uint8_t& at(int x, int y, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::uint8_t at(int x, int y, int c = 0) const
    {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool operator==(const Image&) const = default;
};

/// Gray images are replicated to three channels; RGB is returned unchanged.
Image to_rgb(const Image& image);
/// Integer luma (299 R + 587 G + 114 B) / 1000, rounded.
Image to_gray(const Image& image);

enum class PnmErrorKind { Io, BadMagic, BadHeader, UnsupportedMaxval, Truncated, UnsupportedChannels };

class PnmError : public std::runtime_error {
public:
    PnmError(PnmErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    PnmErrorKind kind() const { return kind_; }

private:
    PnmErrorKind kind_;
};

/// Binary PGM (P5) or PPM (P6) with maxval 255.
Image read_pnm(std::span<const std::uint8_t> bytes);
Image read_pnm(const std::filesystem::path& path);
/// Canonical "P6\n<w> <h>\n255\n" (or P5) header followed by raw pixels.
std::vector<std::uint8_t> encode_pnm(const Image& image);
/// Writes to a temporary file and renames it into place.
void write_pnm(const Image& image, const std::filesystem::path& path);

/// Copy of the image with 2-px green box borders and 3-px red landmark squares.
Image draw_overlay(const Image& image, std::span<const Detection> detections);

struct ImageResult {
    std::string image;
    std::vector<Detection> detections;
};

/// Fixed 4-decimal rendering, rounding the shortest decimal form half away from zero.
std::string format_decimal4(float value);

/// {"image": ..., "detections": [{"box": [...], "score": s, "landmarks": [[x,y] x5]}]}
std::string detections_to_json(const ImageResult& result);
/// JSON array with one result object per line.
std::string detections_to_json(std::span<const ImageResult> results);
/// Accepts a single result object or an array of them.
std::vector<ImageResult> parse_detections_json(std::string_view text);

}  // namespace mtcnn
