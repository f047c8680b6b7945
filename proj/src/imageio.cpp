#include "mtcnn/imageio.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>

namespace mtcnn {

namespace {

bool is_space(std::uint8_t c)
{
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

class HeaderParser {
public:
    explicit HeaderParser(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    // Skips whitespace and '#' comments, then reads a decimal integer.
    int number(const char* what)
    {
        skip();
        if (pos_ >= bytes_.size()) {
            throw PnmError(PnmErrorKind::Truncated, std::string("PNM header ends before ") + what);
        }
        long v = 0;
        std::size_t digits = 0;
        while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
            v = v * 10 + (bytes_[pos_] - '0');
            if (v > 1'000'000'000) {
                throw PnmError(PnmErrorKind::BadHeader, std::string("PNM ") + what + " too large");
            }
            ++pos_;
            ++digits;
        }
        if (digits == 0) {
            throw PnmError(PnmErrorKind::BadHeader, std::string("PNM header: expected ") + what);
        }
        return static_cast<int>(v);
    }

    // Exactly one whitespace byte separates maxval from the raster.
    void raster_separator()
    {
        if (pos_ >= bytes_.size()) {
            throw PnmError(PnmErrorKind::Truncated, "PNM header ends before raster");
        }
        if (!is_space(bytes_[pos_])) {
            throw PnmError(PnmErrorKind::BadHeader, "PNM header: missing whitespace after maxval");
        }
        ++pos_;
    }

    std::size_t pos() const { return pos_; }
    void seek(std::size_t p) { pos_ = p; }

private:
    void skip()
    {
        while (pos_ < bytes_.size()) {
            if (is_space(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') {
                    ++pos_;
                }
            } else {
                break;
            }
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

void append_point(std::string& out, float x, float y)
{
    out += '[';
    out += format_decimal4(x);
    out += ',';
    out += format_decimal4(y);
    out += ']';
}

void put_pixel(Image& img, int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b)
{
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) {
        return;
    }
    if (img.channels == 3) {
        img.at(x, y, 0) = r;
        img.at(x, y, 1) = g;
        img.at(x, y, 2) = b;
    } else {
        img.at(x, y) = g;
    }
}

}  // namespace

Image::Image(int w, int h, int c, std::uint8_t fill) : width(w), height(h), channels(c)
{
    if (w <= 0 || h <= 0 || (c != 1 && c != 3)) {
        throw std::invalid_argument("image extents must be positive with 1 or 3 channels");
    }
    data.assign(static_cast<std::size_t>(w) * h * c, fill);
}

Image to_rgb(const Image& image)
{
    if (image.channels == 3) {
        return image;
    }
    Image out(image.width, image.height, 3);
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(3 * i), 3, image.data[i]);
    }
    return out;
}

Image to_gray(const Image& image)
{
    if (image.channels == 1) {
        return image;
    }
    Image out(image.width, image.height, 1);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const unsigned v = 299u * image.data[3 * i] + 587u * image.data[3 * i + 1] + 114u * image.data[3 * i + 2];
        out.data[i] = static_cast<std::uint8_t>((v + 500u) / 1000u);
    }
    return out;
}

Image read_pnm(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw PnmError(PnmErrorKind::BadMagic, "not a binary PGM/PPM file (expected P5 or P6)");
    }
    const int channels = bytes[1] == '5' ? 1 : 3;
    HeaderParser p(bytes);
    p.seek(2);
    const int w = p.number("width");
    const int h = p.number("height");
    const int maxval = p.number("maxval");
    if (w <= 0 || h <= 0) {
        throw PnmError(PnmErrorKind::BadHeader, "PNM extents must be positive");
    }
    if (maxval != 255) {
        throw PnmError(PnmErrorKind::UnsupportedMaxval, "PNM maxval " + std::to_string(maxval) + " unsupported (need 255)");
    }
    p.raster_separator();
    Image img(w, h, channels);
    if (bytes.size() - p.pos() < img.data.size()) {
        throw PnmError(PnmErrorKind::Truncated, "PNM raster truncated: need " + std::to_string(img.data.size()) +
                                                    " bytes, have " + std::to_string(bytes.size() - p.pos()));
    }
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(p.pos()), img.data.size(), img.data.begin());
    return img;
}

Image read_pnm(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw PnmError(PnmErrorKind::Io, "cannot open image " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return read_pnm(bytes);
}

std::vector<std::uint8_t> encode_pnm(const Image& image)
{
    if (image.channels != 1 && image.channels != 3) {
        throw PnmError(PnmErrorKind::UnsupportedChannels,
                       "cannot encode " + std::to_string(image.channels) + "-channel image as PNM");
    }
    const std::string header = std::string(image.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(image.width) +
                               " " + std::to_string(image.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), image.data.begin(), image.data.end());
    return out;
}

void write_pnm(const Image& image, const std::filesystem::path& path)
{
    const auto bytes = encode_pnm(image);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw PnmError(PnmErrorKind::Io, "failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Image draw_overlay(const Image& image, std::span<const Detection> detections)
{
    Image out = image;
    for (const auto& d : detections) {
        const int x1 = static_cast<int>(std::round(d.box.x1));
        const int y1 = static_cast<int>(std::round(d.box.y1));
        const int x2 = static_cast<int>(std::round(d.box.x2));
        const int y2 = static_cast<int>(std::round(d.box.y2));
        for (int y = std::max(y1, 0); y < std::min(y2, out.height); ++y) {
            for (int x = std::max(x1, 0); x < std::min(x2, out.width); ++x) {
                if (x < x1 + 2 || x >= x2 - 2 || y < y1 + 2 || y >= y2 - 2) {
                    put_pixel(out, x, y, 0, 255, 0);
                }
            }
        }
    }
    for (const auto& d : detections) {
        if (!d.landmarks) {
            continue;
        }
        for (const auto& pt : *d.landmarks) {
            if (!std::isfinite(pt.x) || !std::isfinite(pt.y) || std::abs(pt.x) > 1e8f || std::abs(pt.y) > 1e8f) {
                continue;
            }
            const int cx = static_cast<int>(std::round(pt.x));
            const int cy = static_cast<int>(std::round(pt.y));
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    put_pixel(out, cx + dx, cy + dy, 255, 0, 0);
                }
            }
        }
    }
    return out;
}

std::string format_decimal4(float value)
{
    if (!std::isfinite(value)) {
        throw std::invalid_argument("cannot serialize non-finite value");
    }
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::fixed);
    std::string s(buf, res.ptr);
    bool negative = false;
    if (!s.empty() && s[0] == '-') {
        negative = true;
        s.erase(0, 1);
    }
    const auto dot = s.find('.');
    std::string int_part = dot == std::string::npos ? s : s.substr(0, dot);
    std::string frac = dot == std::string::npos ? "" : s.substr(dot + 1);
    const bool round_up = frac.size() > 4 && frac[4] >= '5';
    frac.resize(4, '0');
    std::string digits = int_part + frac;
    if (round_up) {
        int i = static_cast<int>(digits.size()) - 1;
        while (i >= 0 && digits[static_cast<std::size_t>(i)] == '9') {
            digits[static_cast<std::size_t>(i)] = '0';
            --i;
        }
        if (i < 0) {
            digits.insert(digits.begin(), '1');
        } else {
            ++digits[static_cast<std::size_t>(i)];
        }
    }
    std::string out = digits.substr(0, digits.size() - 4) + "." + digits.substr(digits.size() - 4);
    if (negative && out.find_first_not_of("0.") != std::string::npos) {
        out.insert(out.begin(), '-');
    }
    return out;
}

std::string detections_to_json(const ImageResult& result)
{
    std::string out = "{\"image\":" + nlohmann::json(result.image).dump() + ",\"detections\":[";
    for (std::size_t i = 0; i < result.detections.size(); ++i) {
        const auto& d = result.detections[i];
        if (i) {
            out += ',';
        }
        out += "{\"box\":[" + format_decimal4(d.box.x1) + "," + format_decimal4(d.box.y1) + "," +
               format_decimal4(d.box.x2) + "," + format_decimal4(d.box.y2) + "],\"score\":" + format_decimal4(d.score);
        if (d.landmarks) {
            out += ",\"landmarks\":[";
            for (std::size_t k = 0; k < d.landmarks->size(); ++k) {
                if (k) {
                    out += ',';
                }
                append_point(out, (*d.landmarks)[k].x, (*d.landmarks)[k].y);
            }
            out += ']';
        }
        out += '}';
    }
    out += "]}";
    return out;
}

std::string detections_to_json(std::span<const ImageResult> results)
{
    std::string out = "[";
    for (std::size_t i = 0; i < results.size(); ++i) {
        out += i ? ",\n" : "\n";
        out += detections_to_json(results[i]);
    }
    out += "\n]\n";
    return out;
}

std::vector<ImageResult> parse_detections_json(std::string_view text)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("detections JSON: ") + e.what());
    }
    auto parse_one = [](const nlohmann::json& j) {
        ImageResult r;
        r.image = j.at("image").get<std::string>();
        for (const auto& d : j.at("detections")) {
            Detection det;
            const auto& b = d.at("box");
            if (b.size() != 4) {
                throw std::invalid_argument("detections JSON: box must have 4 values");
            }
            det.box = {b[0].get<float>(), b[1].get<float>(), b[2].get<float>(), b[3].get<float>()};
            det.score = d.at("score").get<float>();
            if (d.contains("landmarks")) {
                const auto& l = d["landmarks"];
                if (l.size() != 5) {
                    throw std::invalid_argument("detections JSON: landmarks must have 5 points");
                }
                Landmarks pts;
                for (std::size_t k = 0; k < 5; ++k) {
                    pts[k] = {l[k].at(0).get<float>(), l[k].at(1).get<float>()};
                }
                det.landmarks = pts;
            }
            r.detections.push_back(det);
        }
        return r;
    };
    std::vector<ImageResult> out;
    try {
        if (doc.is_array()) {
            for (const auto& j : doc) {
                out.push_back(parse_one(j));
            }
        } else {
            out.push_back(parse_one(doc));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("detections JSON: ") + e.what());
    }
    return out;
}

}  // namespace mtcnn
