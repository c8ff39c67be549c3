#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtcnn/tensor.hpp"

namespace rtcnn {

/// 8-bit image, interleaved (row-major, channels innermost). channels is 1 (gray) or 3 (RGB).
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::size_t ch = 1, std::uint8_t fill = 0)
        : width(w), height(h), channels(ch), pixels(w * h * ch, fill) {}

    bool empty() const { return width == 0 || height == 0; }
    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t ch = 0) { return pixels[(y * width + x) * channels + ch]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch = 0) const {
        return pixels[(y * width + x) * channels + ch];
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Face rectangle in pixels. Detection happens elsewhere; boxes are inputs.
struct FaceBox {
    long x = 0;
    long y = 0;
    long w = 0;
    long h = 0;

    friend bool operator==(const FaceBox&, const FaceBox&) = default;
};

/// Intersection of `box` with a width x height frame, or nullopt when nothing is left.
std::optional<FaceBox> clamp_box(const FaceBox& box, std::size_t width, std::size_t height);

/// Copies the clamped region. Throws DataError if the box misses the image entirely.
Image crop(const Image& img, const FaceBox& box);

/// Gray (or luma of RGB: 0.299 R + 0.587 G + 0.114 B), bilinear resize to target x target when the
/// source differs, then v / 127.5 - 1 clamped to [-1, 1]. Returns (1, 1, target, target).
/// Throws DataError for an empty image.
Tensor preprocess(const Image& img, std::size_t target = 48);

/// Gray (luma for RGB) bilinear resize with the same sampling as preprocess.
Image resize(const Image& img, std::size_t width, std::size_t height);

/// Inverse of the intensity mapping for display: [-1, 1] -> [0, 255], rounded and clamped.
Image to_image(const Tensor& t);

// ---------------------------------------------------------------------------------------------
// PGM (P5, maxval 255)

/// Throws ParseError for bad magic, header or truncation and FormatError(Unsupported) for any
/// maxval other than 255.
Image parse_pgm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> format_pgm(const Image& img);

Image read_pgm(const std::filesystem::path& path);
void write_pgm(const Image& img, const std::filesystem::path& path);

/// Raw intensities as a (1, 1, h, w) tensor with values 0..255.
Tensor decode_pgm(const std::filesystem::path& path);
/// Writes a (1, 1, h, w) tensor of intensities, rounding and clamping to 0..255.
void encode_pgm(const Tensor& t, const std::filesystem::path& path);

// ---------------------------------------------------------------------------------------------
// Datasets

struct Sample {
    Tensor image;       // (1, 1, 48, 48), values in [-1, 1]
    std::size_t label = 0;
    std::string usage;  // FER-2013 "Usage" value, empty when the source has none
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    std::size_t num_classes() const { return class_names.size(); }

    /// Stacks the chosen samples into one (k, 1, h, w) batch.
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> labels(std::span<const std::size_t> indices) const;

    /// Samples whose usage equals `usage`, in original order.
    Dataset filter_usage(const std::string& usage) const;
    /// First `count` samples.
    Dataset head(std::size_t count) const;

    /// Throws DataError if a label is out of range or a value is non-finite or outside [-1, 1].
    void validate() const;
};

struct FerOptions {
    /// Skip malformed rows (and count them) instead of failing on the first one.
    bool lenient = false;
    /// Keep only rows whose Usage column equals this value.
    std::optional<std::string> usage;
    /// Stop after this many accepted rows (0 = all).
    std::size_t limit = 0;
};

struct FerReport {
    std::size_t rows = 0;     // data rows read
    std::size_t skipped = 0;  // malformed rows dropped in lenient mode
    std::vector<std::string> problems;
};

/// Kaggle FER-2013 CSV: header `emotion,pixels,Usage` (Usage optional), 2304 space-separated
/// 0..255 integers per row. Rows are numbered from 1 at the header in error messages.
Dataset load_fer2013(const std::filesystem::path& path, const FerOptions& opts = {}, FerReport* report = nullptr);
Dataset parse_fer2013(std::istream& in, const FerOptions& opts = {}, FerReport* report = nullptr);

/// `path,label` manifest of pre-cropped face images (PGM). Paths are relative to the manifest's
/// directory; labels are class names from `class_names` or integer indices. An optional
/// `path,label` header line is skipped.
Dataset load_manifest(const std::filesystem::path& path, const std::vector<std::string>& class_names,
                      std::size_t target = 48);

/// Boxes CSV, one `x,y,w,h` per line; an optional `x,y,w,h` header is skipped.
std::vector<FaceBox> load_boxes(const std::filesystem::path& path);

}  // namespace rtcnn
