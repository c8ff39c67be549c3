#include "rtcnn/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>

#include "rtcnn/model.hpp"

namespace rtcnn {

namespace {

constexpr std::size_t kFerSide = 48;
constexpr std::size_t kFerPixels = kFerSide * kFerSide;
constexpr std::size_t kFerClasses = 7;

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' || s.front() == '\n'))
        s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n'))
        s.remove_suffix(1);
    return s;
}

std::string_view unquote(std::string_view s) {
    s = trim(s);
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
    s = trim(s);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Gray intensities (0..255, as double) of an 8-bit image, collapsing RGB by luma.
std::vector<double> intensities(const Image& img) {
    std::vector<double> out(img.width * img.height);
    if (img.channels == 1) {
        std::copy(img.pixels.begin(), img.pixels.end(), out.begin());
    } else if (img.channels == 3) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            const std::uint8_t* p = &img.pixels[i * 3];
            out[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
    } else {
        throw DataError("unsupported channel count " + std::to_string(img.channels));
    }
    return out;
}

// Bilinear with pixel centres at +0.5 and edge clamping.
std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t sw, std::size_t sh, std::size_t dw,
                                    std::size_t dh) {
    std::vector<double> dst(dw * dh);
    const double sx = static_cast<double>(sw) / static_cast<double>(dw);
    const double sy = static_cast<double>(sh) / static_cast<double>(dh);
    for (std::size_t y = 0; y < dh; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(sh - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < dw; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(sw - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = src[y0 * sw + x0] + wx * (src[y0 * sw + x1] - src[y0 * sw + x0]);
            const double bot = src[y1 * sw + x0] + wx * (src[y1 * sw + x1] - src[y1 * sw + x0]);
            dst[y * dw + x] = top + wy * (bot - top);
        }
    }
    return dst;
}

float scale_intensity(double v) {
    return static_cast<float>(std::clamp(v / 127.5 - 1.0, -1.0, 1.0));
}

}  // namespace

std::optional<FaceBox> clamp_box(const FaceBox& box, std::size_t width, std::size_t height) {
    const long x0 = std::max(box.x, 0L);
    const long y0 = std::max(box.y, 0L);
    const long x1 = std::min(box.x + box.w, static_cast<long>(width));
    const long y1 = std::min(box.y + box.h, static_cast<long>(height));
    if (box.w <= 0 || box.h <= 0 || x1 <= x0 || y1 <= y0) return std::nullopt;
    return FaceBox{x0, y0, x1 - x0, y1 - y0};
}

Image crop(const Image& img, const FaceBox& box) {
    const auto c = clamp_box(box, img.width, img.height);
    if (!c) {
        throw DataError("box (" + std::to_string(box.x) + "," + std::to_string(box.y) + "," + std::to_string(box.w) +
                        "," + std::to_string(box.h) + ") lies outside the " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " frame");
    }
    Image out(static_cast<std::size_t>(c->w), static_cast<std::size_t>(c->h), img.channels);
    const std::size_t row = out.width * img.channels;
    for (std::size_t y = 0; y < out.height; ++y) {
        const std::uint8_t* src = &img.pixels[((static_cast<std::size_t>(c->y) + y) * img.width +
                                               static_cast<std::size_t>(c->x)) * img.channels];
        std::copy(src, src + row, &out.pixels[y * row]);
    }
    return out;
}

Tensor preprocess(const Image& img, std::size_t target) {
    if (img.empty() || img.pixels.size() != img.width * img.height * img.channels)
        throw DataError("cannot preprocess an empty image");
    if (target == 0) throw DataError("preprocess target size must be positive");
    std::vector<double> gray = intensities(img);
    if (img.width != target || img.height != target)
        gray = resize_bilinear(gray, img.width, img.height, target, target);
    Tensor t(Shape{1, 1, target, target});
    for (std::size_t i = 0; i < gray.size(); ++i) t[i] = scale_intensity(gray[i]);
    return t;
}

Image resize(const Image& img, std::size_t width, std::size_t height) {
    if (img.empty() || width == 0 || height == 0) throw DataError("cannot resize to or from an empty image");
    std::vector<double> gray = intensities(img);
    if (img.width != width || img.height != height) gray = resize_bilinear(gray, img.width, img.height, width, height);
    Image out(width, height);
    for (std::size_t i = 0; i < gray.size(); ++i)
        out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(gray[i], 0.0, 255.0)));
    return out;
}

Image to_image(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.n != 1 || s.c != 1) throw ShapeError("to_image expects (1, 1, h, w), got " + s.str());
    Image img(s.w, s.h);
    for (std::size_t i = 0; i < t.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp((t[i] + 1.0) * 127.5, 0.0, 255.0)));
    return img;
}

// ---------------------------------------------------------------------------------------------
// PGM

Image parse_pgm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ParseError("not a binary PGM (expected P5)");
    pos = 2;

    auto next_field = [&](const char* what) -> unsigned long {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) ++pos;
        if (start == pos) throw ParseError(std::string("PGM header: missing ") + what);
        unsigned long v = 0;
        auto [ptr, ec] = std::from_chars(reinterpret_cast<const char*>(&bytes[start]),
                                         reinterpret_cast<const char*>(bytes.data() + pos), v);
        if (ec != std::errc()) throw ParseError(std::string("PGM header: bad ") + what);
        return v;
    };

    const unsigned long width = next_field("width");
    const unsigned long height = next_field("height");
    const unsigned long maxval = next_field("maxval");
    if (width == 0 || height == 0) throw ParseError("PGM header: zero dimension");
    if (width > (1UL << 15) || height > (1UL << 15)) throw ParseError("PGM header: dimensions too large");
    if (maxval == 0 || maxval > 65535) throw ParseError("PGM header: maxval " + std::to_string(maxval) + " out of range");
    if (maxval != 255)
        throw FormatError(FormatErrorKind::Unsupported,
                          "PGM maxval " + std::to_string(maxval) + " is not supported (only 255)");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError("PGM header: missing separator");
    ++pos;

    Image img(width, height);
    if (bytes.size() - pos < img.pixels.size())
        throw ParseError("PGM truncated: expected " + std::to_string(img.pixels.size()) + " pixel bytes, found " +
                         std::to_string(bytes.size() - pos));
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.pixels.size(), img.pixels.begin());
    return img;
}

std::vector<std::uint8_t> format_pgm(const Image& img) {
    if (img.channels != 1) throw DataError("PGM output needs a single-channel image");
    if (img.empty()) throw DataError("cannot write an empty image");
    const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

Image read_pgm(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    try {
        return parse_pgm(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void write_pgm(const Image& img, const std::filesystem::path& path) {
    const auto bytes = format_pgm(img);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Tensor decode_pgm(const std::filesystem::path& path) {
    const Image img = read_pgm(path);
    Tensor t(Shape{1, 1, img.height, img.width});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i];
    return t;
}

void encode_pgm(const Tensor& t, const std::filesystem::path& path) {
    const Shape& s = t.shape();
    if (s.n != 1 || s.c != 1) throw ShapeError("encode_pgm expects (1, 1, h, w), got " + s.str());
    Image img(s.w, s.h);
    for (std::size_t i = 0; i < t.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(t[i]), 0.0, 255.0)));
    write_pgm(img, path);
}

// ---------------------------------------------------------------------------------------------
// Datasets

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ContractError("empty batch");
    const Shape one = samples.at(indices[0]).image.shape();
    Tensor out(Shape{indices.size(), one.c, one.h, one.w});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Tensor& img = samples.at(indices[i]).image;
        if (img.shape() != one) throw ShapeError("dataset images differ in shape");
        std::copy(img.ptr(), img.ptr() + img.size(), out.sample(i));
    }
    return out;
}

std::vector<std::size_t> Dataset::labels(std::span<const std::size_t> indices) const {
    std::vector<std::size_t> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(samples.at(i).label);
    return out;
}

Dataset Dataset::filter_usage(const std::string& usage) const {
    Dataset out{{}, class_names};
    for (const Sample& s : samples)
        if (s.usage == usage) out.samples.push_back(s);
    return out;
}

Dataset Dataset::head(std::size_t count) const {
    Dataset out{{}, class_names};
    const std::size_t k = std::min(count, samples.size());
    out.samples.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(k));
    return out;
}

void Dataset::validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        if (s.label >= class_names.size())
            throw DataError("sample " + std::to_string(i) + ": label " + std::to_string(s.label) + " out of range");
        for (float v : s.image.data())
            if (!std::isfinite(v) || v < -1.0f || v > 1.0f)
                throw DataError("sample " + std::to_string(i) + ": value outside [-1, 1]");
    }
}

namespace {

Sample parse_fer_row(std::string_view line, bool has_usage, std::size_t row) {
    const auto fields = split(line, ',');
    const std::size_t expected = has_usage ? 3 : 2;
    if (fields.size() != expected)
        throw ParseError("expected " + std::to_string(expected) + " fields, found " + std::to_string(fields.size()), row);

    Sample s;
    unsigned label = 0;
    if (!parse_int(unquote(fields[0]), label)) throw ParseError("emotion is not an integer", row);
    if (label >= kFerClasses) throw ParseError("emotion " + std::to_string(label) + " outside [0, 7)", row);
    s.label = label;

    std::vector<double> px;
    px.reserve(kFerPixels);
    std::string_view rest = unquote(fields[1]);
    while (!rest.empty()) {
        const std::size_t lead = rest.find_first_not_of(" \t");
        if (lead == std::string_view::npos) break;
        rest.remove_prefix(lead);
        const std::size_t end = std::min(rest.find_first_of(" \t"), rest.size());
        unsigned v = 0;
        if (!parse_int(rest.substr(0, end), v) || v > 255)
            throw ParseError("pixel " + std::to_string(px.size() + 1) + " is not an integer in 0..255", row);
        px.push_back(v);
        rest.remove_prefix(end);
    }
    if (px.size() != kFerPixels)
        throw ParseError("expected " + std::to_string(kFerPixels) + " pixels, found " + std::to_string(px.size()), row);

    s.image = Tensor(Shape{1, 1, kFerSide, kFerSide});
    for (std::size_t i = 0; i < kFerPixels; ++i) s.image[i] = scale_intensity(px[i]);
    if (has_usage) s.usage = std::string(unquote(fields[2]));
    return s;
}

}  // namespace

Dataset parse_fer2013(std::istream& in, const FerOptions& opts, FerReport* report) {
    FerReport local;
    FerReport& rep = report ? *report : local;
    rep = {};

    std::string line;
    if (!std::getline(in, line)) throw ParseError("missing header `emotion,pixels,Usage`", 1);
    const auto header = split(trim(line), ',');
    bool has_usage = false;
    if (header.size() >= 2 && unquote(header[0]) == "emotion" && unquote(header[1]) == "pixels") {
        if (header.size() == 3 && unquote(header[2]) == "Usage")
            has_usage = true;
        else if (header.size() != 2)
            throw ParseError("unexpected header columns (want `emotion,pixels,Usage`)", 1);
    } else {
        throw ParseError("missing header `emotion,pixels,Usage`", 1);
    }

    Dataset ds{{}, default_class_names(kFerClasses)};
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        ++rep.rows;
        Sample s;
        try {
            s = parse_fer_row(trim(line), has_usage, row);
        } catch (const ParseError& e) {
            if (!opts.lenient) throw;
            ++rep.skipped;
            rep.problems.emplace_back(e.what());
            continue;
        }
        if (opts.usage && s.usage != *opts.usage) continue;
        ds.samples.push_back(std::move(s));
        if (opts.limit && ds.samples.size() >= opts.limit) break;
    }
    ds.validate();
    return ds;
}

Dataset load_fer2013(const std::filesystem::path& path, const FerOptions& opts, FerReport* report) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return parse_fer2013(in, opts, report);
}

Dataset load_manifest(const std::filesystem::path& path, const std::vector<std::string>& class_names,
                      std::size_t target) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    const std::filesystem::path base = path.parent_path();

    Dataset ds{{}, class_names};
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        const std::string_view t = trim(line);
        if (t.empty()) continue;
        if (row == 1 && t == "path,label") continue;
        const std::size_t comma = t.rfind(',');
        if (comma == std::string_view::npos) throw ParseError("expected `path,label`", row);
        const std::string file(unquote(t.substr(0, comma)));
        const std::string_view label = unquote(t.substr(comma + 1));

        std::size_t index = 0;
        const auto named = std::find(class_names.begin(), class_names.end(), label);
        if (named != class_names.end()) {
            index = static_cast<std::size_t>(named - class_names.begin());
        } else if (!parse_int(label, index) || index >= class_names.size()) {
            throw ParseError("unknown label '" + std::string(label) + "'", row);
        }

        std::filesystem::path img_path(file);
        if (img_path.is_relative()) img_path = base / img_path;
        ds.samples.push_back({preprocess(read_pgm(img_path), target), index, {}});
    }
    ds.validate();
    return ds;
}

std::vector<FaceBox> load_boxes(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<FaceBox> boxes;
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        const std::string_view t = trim(line);
        if (t.empty()) continue;
        if (row == 1 && t == "x,y,w,h") continue;
        const auto f = split(t, ',');
        FaceBox b;
        if (f.size() != 4 || !parse_int(f[0], b.x) || !parse_int(f[1], b.y) || !parse_int(f[2], b.w) ||
            !parse_int(f[3], b.h))
            throw ParseError("expected `x,y,w,h` integers", row);
        boxes.push_back(b);
    }
    return boxes;
}

}  // namespace rtcnn
