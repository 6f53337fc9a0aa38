#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <png.h>

#include "detail/text.hpp"
#include "error.hpp"

namespace mugshot {

namespace detail {
inline double clamp01(double v) {
    if (std::isnan(v)) return 0.0;
    return std::clamp(v, 0.0, 1.0);
}

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(clamp01(v) * 255.0));
}
}  // namespace detail

/// Single-channel raster, row-major, values in [0,1].
class GrayImage {
public:
    GrayImage(std::size_t width, std::size_t height, double fill = 0.0)
        : GrayImage(width, height, std::vector<double>(width * height, fill)) {}

    GrayImage(std::size_t width, std::size_t height, std::vector<double> pixels)
        : width_(width), height_(height), pixels_(std::move(pixels)) {
        if (width_ == 0 || height_ == 0) throw UsageError("image dimensions must be positive");
        if (pixels_.size() != width_ * height_)
            throw UsageError("pixel buffer size does not match image dimensions");
        for (auto& p : pixels_) p = detail::clamp01(p);
    }

    std::size_t width() const { return width_; }
    std::size_t height() const { return height_; }
    std::size_t size() const { return pixels_.size(); }

    double operator()(std::size_t row, std::size_t col) const { return pixels_[row * width_ + col]; }

    void set(std::size_t row, std::size_t col, double v) { pixels_[row * width_ + col] = detail::clamp01(v); }

    const std::vector<double>& pixels() const { return pixels_; }

    friend bool operator==(const GrayImage&, const GrayImage&) = default;

private:
    std::size_t width_;
    std::size_t height_;
    std::vector<double> pixels_;
};

/// Three-channel raster, interleaved RGB, values in [0,1].
class RgbImage {
public:
    RgbImage(std::size_t width, std::size_t height, double fill = 0.0)
        : RgbImage(width, height, std::vector<double>(width * height * 3, fill)) {}

    RgbImage(std::size_t width, std::size_t height, std::vector<double> interleaved)
        : width_(width), height_(height), data_(std::move(interleaved)) {
        if (width_ == 0 || height_ == 0) throw UsageError("image dimensions must be positive");
        if (data_.size() != width_ * height_ * 3)
            throw UsageError("pixel buffer size does not match image dimensions");
        for (auto& p : data_) p = detail::clamp01(p);
    }

    static RgbImage from_channels(const GrayImage& r, const GrayImage& g, const GrayImage& b) {
        if (r.width() != g.width() || r.width() != b.width() || r.height() != g.height() ||
            r.height() != b.height())
            throw UsageError("channel dimensions differ");
        std::vector<double> data(r.size() * 3);
        for (std::size_t i = 0; i < r.size(); ++i) {
            data[3 * i] = r.pixels()[i];
            data[3 * i + 1] = g.pixels()[i];
            data[3 * i + 2] = b.pixels()[i];
        }
        return RgbImage(r.width(), r.height(), std::move(data));
    }

    static RgbImage from_gray(const GrayImage& g) { return from_channels(g, g, g); }

    std::size_t width() const { return width_; }
    std::size_t height() const { return height_; }

    GrayImage channel(std::size_t k) const {
        if (k > 2) throw UsageError("channel index out of range");
        std::vector<double> px(width_ * height_);
        for (std::size_t i = 0; i < px.size(); ++i) px[i] = data_[3 * i + k];
        return GrayImage(width_, height_, std::move(px));
    }

    const std::vector<double>& data() const { return data_; }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;

private:
    std::size_t width_;
    std::size_t height_;
    std::vector<double> data_;
};

// ---- codecs ----------------------------------------------------------------

enum class ImageFormat { Pgm, Png, Jpeg, Unknown };

inline ImageFormat sniff_format(std::string_view bytes) {
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0) return ImageFormat::Png;
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return ImageFormat::Pgm;
    if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
        static_cast<unsigned char>(bytes[1]) == 0xD8)
        return ImageFormat::Jpeg;
    return ImageFormat::Unknown;
}

inline std::string_view extension_for(ImageFormat f) {
    switch (f) {
        case ImageFormat::Pgm: return ".pgm";
        case ImageFormat::Png: return ".png";
        case ImageFormat::Jpeg: return ".jpg";
        default: return ".bin";
    }
}

inline std::string encode_pgm(const GrayImage& img) {
    std::string out = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
    out.reserve(out.size() + img.size());
    for (double v : img.pixels()) out.push_back(static_cast<char>(detail::to_byte(v)));
    return out;
}

inline GrayImage decode_pgm(std::string_view bytes) {
    std::size_t pos = 0;
    auto skip_ws_and_comments = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> std::size_t {
        skip_ws_and_comments();
        std::size_t v = 0;
        std::size_t digits = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
            ++digits;
        }
        if (digits == 0) throw ValidationError("malformed PGM header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ValidationError("not a binary PGM (P5)");
    pos = 2;
    const auto w = read_int();
    const auto h = read_int();
    const auto maxval = read_int();
    if (maxval == 0 || maxval > 255) throw ValidationError("only 8-bit PGM is supported");
    ++pos;  // single whitespace before raster
    if (w == 0 || h == 0 || bytes.size() < pos + w * h) throw ValidationError("truncated PGM raster");
    std::vector<double> px(w * h);
    for (std::size_t i = 0; i < px.size(); ++i)
        px[i] = static_cast<unsigned char>(bytes[pos + i]) / static_cast<double>(maxval);
    return GrayImage(w, h, std::move(px));
}

inline std::string encode_png(const RgbImage& img) {
    std::vector<std::uint8_t> raw(img.data().size());
    std::transform(img.data().begin(), img.data().end(), raw.begin(), detail::to_byte);
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width());
    image.height = static_cast<png_uint_32>(img.height());
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, raw.data(), 0, nullptr))
        throw Error(std::string("PNG encode failed: ") + image.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, raw.data(), 0, nullptr))
        throw Error(std::string("PNG encode failed: ") + image.message);
    out.resize(size);
    return out;
}

inline RgbImage decode_png(std::string_view bytes) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw ValidationError(std::string("PNG decode failed: ") + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, raw.data(), 0, nullptr)) {
        png_image_free(&image);
        throw ValidationError(std::string("PNG decode failed: ") + image.message);
    }
    std::vector<double> data(raw.size());
    std::transform(raw.begin(), raw.end(), data.begin(), [](std::uint8_t b) { return b / 255.0; });
    return RgbImage(image.width, image.height, std::move(data));
}

inline GrayImage read_pgm(const std::string& path) { return decode_pgm(detail::read_file(path)); }
inline void write_pgm(const std::string& path, const GrayImage& img) { detail::write_file(path, encode_pgm(img)); }
inline RgbImage read_png(const std::string& path) { return decode_png(detail::read_file(path)); }
inline void write_png(const std::string& path, const RgbImage& img) { detail::write_file(path, encode_png(img)); }

}  // namespace mugshot
