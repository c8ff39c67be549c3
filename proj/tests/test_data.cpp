#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rtcnn/data.hpp"
#include "synth_faces.hpp"

using namespace rtcnn;
namespace fs = std::filesystem;

namespace {

std::string pixels_row(std::size_t count, int value) {
    std::string s;
    for (std::size_t i = 0; i < count; ++i) {
        if (i) s += ' ';
        s += std::to_string(value);
    }
    return s;
}

Dataset parse(const std::string& text, FerOptions opts = {}, FerReport* report = nullptr) {
    std::istringstream in(text);
    return parse_fer2013(in, opts, report);
}

std::size_t parse_error_row(const std::string& text) {
    try {
        parse(text);
    } catch (const ParseError& e) {
        return e.row();
    }
    ADD_FAILURE() << "no parse error";
    return 0;
}

fs::path scratch_dir() {
    const fs::path d = fs::temp_directory_path() / "rtcnn_data_tests";
    fs::create_directories(d);
    return d;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Fer2013, ConstructedRow) {
    const Dataset d = parse("emotion,pixels,Usage\n3," + pixels_row(2304, 0) + ",Training\n");
    ASSERT_EQ(d.size(), 1u);
    EXPECT_EQ(d.samples[0].label, 3u);
    EXPECT_EQ(d.class_names[3], "happy");
    EXPECT_EQ(d.samples[0].usage, "Training");
    EXPECT_EQ(d.samples[0].image, Tensor::constant({1, 1, 48, 48}, -1.0f));
}

TEST(Fer2013, RowMajorLayoutAndScaling) {
    std::string px;
    for (std::size_t i = 0; i < 2304; ++i) px += (i ? " " : "") + std::to_string(i % 256);
    const Dataset d = parse("emotion,pixels\n0," + px + "\n");
    const Tensor& t = d.samples[0].image;
    for (std::size_t i : {0u, 1u, 47u, 48u, 1000u, 2303u})
        EXPECT_FLOAT_EQ(t(0, 0, i / 48, i % 48), static_cast<float>((i % 256) / 127.5 - 1.0));
    EXPECT_EQ(d.samples[0].usage, "");
}

TEST(Fer2013, StrictErrorsNameTheRow) {
    const std::string h = "emotion,pixels,Usage\n";
    const std::string ok = "1," + pixels_row(2304, 9) + ",Training\n";
    EXPECT_EQ(parse_error_row(h + ok + "2," + pixels_row(2303, 9) + ",Training\n"), 3u);
    EXPECT_EQ(parse_error_row(h + "2," + pixels_row(2304, 9) + " x,Training\n"), 2u);
    EXPECT_EQ(parse_error_row(h + "2," + pixels_row(2304, 256) + ",Training\n"), 2u);
    EXPECT_EQ(parse_error_row(h + ok + ok + "seven," + pixels_row(2304, 1) + ",Training\n"), 4u);
    EXPECT_EQ(parse_error_row("label,data\n" + ok), 1u);
    EXPECT_EQ(parse_error_row(""), 1u);
    EXPECT_THROW(parse(h + "7," + pixels_row(2304, 1) + ",Training\n"), ParseError);
}

TEST(Fer2013, LenientSkipsAndCounts) {
    const std::string text = "emotion,pixels,Usage\n1," + pixels_row(2304, 9) + ",Training\n2," + pixels_row(10, 9) +
                             ",Training\n4," + pixels_row(2304, 200) + ",PublicTest\n";
    FerReport report;
    const Dataset d = parse(text, FerOptions{true, std::nullopt, 0}, &report);
    EXPECT_EQ(d.size(), 2u);
    EXPECT_EQ(report.rows, 3u);
    EXPECT_EQ(report.skipped, 1u);
    ASSERT_EQ(report.problems.size(), 1u);
    EXPECT_NE(report.problems[0].find("row 3"), std::string::npos);
}

TEST(Fer2013, UsageFilterLimitAndOrder) {
    const std::string csv = synth::fer_csv({14, 7, 7, true, 5});
    const Dataset all = parse(csv);
    ASSERT_EQ(all.size(), 28u);
    const Dataset train = parse(csv, FerOptions{false, std::string("Training"), 0});
    const Dataset pub = parse(csv, FerOptions{false, std::string("PublicTest"), 0});
    const Dataset priv = parse(csv, FerOptions{false, std::string("PrivateTest"), 0});
    EXPECT_EQ(train.size() + pub.size() + priv.size(), all.size());
    EXPECT_EQ(train.size(), 14u);
    for (std::size_t i = 0; i < train.size(); ++i) EXPECT_EQ(train.samples[i].image, all.samples[i].image);
    EXPECT_EQ(all.filter_usage("PublicTest").size(), 7u);
    EXPECT_EQ(parse(csv, FerOptions{false, std::nullopt, 5}).size(), 5u);
    EXPECT_EQ(all.head(3).size(), 3u);
    EXPECT_NO_THROW(all.validate());
}

TEST(Fer2013, FileLoaderMatchesStream) {
    const fs::path p = scratch_dir() / "fer.csv";
    synth::write_fer_csv(p, {7, 0, 0, true, 9});
    const Dataset a = load_fer2013(p);
    const Dataset b = parse(synth::fer_csv({7, 0, 0, true, 9}));
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_THROW(load_fer2013(scratch_dir() / "missing.csv"), IoError);
}

TEST(Dataset, ValidateCatchesBadSamples) {
    Dataset d;
    d.class_names = {"a", "b"};
    d.samples.push_back({Tensor::zeros({1, 1, 48, 48}), 2, ""});
    EXPECT_THROW(d.validate(), DataError);
    d.samples[0].label = 1;
    d.samples[0].image[5] = 1.5f;
    EXPECT_THROW(d.validate(), DataError);
    d.samples[0].image[5] = std::nanf("");
    EXPECT_THROW(d.validate(), DataError);
}

TEST(Dataset, BatchStacksInRequestedOrder) {
    const Dataset d = parse(synth::fer_csv({3, 0, 0, false, 1}));
    const std::vector<std::size_t> idx{2, 0};
    const Tensor b = d.batch(idx);
    EXPECT_EQ(b.shape(), (Shape{2, 1, 48, 48}));
    EXPECT_EQ(b(0, 0, 10, 10), d.samples[2].image(0, 0, 10, 10));
    EXPECT_EQ(b(1, 0, 10, 10), d.samples[0].image(0, 0, 10, 10));
    EXPECT_EQ(d.labels(idx), (std::vector<std::size_t>{2, 0}));
}

TEST(Preprocess, EndpointsAndRange) {
    Image img(48, 48);
    img.at(0, 0) = 255;
    const Tensor t = preprocess(img);
    EXPECT_EQ(t(0, 0, 0, 0), 1.0f);
    EXPECT_EQ(t(0, 0, 1, 1), -1.0f);
    EXPECT_THROW(preprocess(Image{}), DataError);
}

TEST(Preprocess, GrayRgbEqualsGray) {
    for (int k : {0, 17, 128, 255}) {
        const Image gray(30, 20, 1, static_cast<std::uint8_t>(k));
        const Image rgb(30, 20, 3, static_cast<std::uint8_t>(k));
        EXPECT_EQ(preprocess(gray), preprocess(rgb)) << k;
    }
}

TEST(Preprocess, ResizeKeepsConstantsAndStaysInRange) {
    const Tensor c = preprocess(Image(96, 96, 1, 77));
    EXPECT_EQ(c.shape(), (Shape{1, 1, 48, 48}));
    for (float v : c.data()) EXPECT_FLOAT_EQ(v, static_cast<float>(77 / 127.5 - 1));

    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Tensor t = preprocess(synth::face(seed % 7, 7, seed, 20 + 13 * seed));
        for (float v : t.data()) {
            EXPECT_GE(v, -1.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(Preprocess, BilinearHalfPixelCentres) {
    // Downscaling 4 -> 2 with half-pixel centres samples exactly between source pixels.
    Image img(4, 1);
    img.pixels = {0, 100, 200, 250};
    Image tall(4, 4);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) tall.at(x, y) = img.pixels[x];
    const Tensor t = preprocess(tall, 2);
    EXPECT_FLOAT_EQ(t(0, 0, 0, 0), static_cast<float>(50 / 127.5 - 1));
    EXPECT_FLOAT_EQ(t(0, 0, 0, 1), static_cast<float>(225 / 127.5 - 1));
}

TEST(Boxes, ClampAndCrop) {
    EXPECT_EQ(clamp_box({-5, -5, 20, 20}, 10, 10), (FaceBox{0, 0, 10, 10}));
    EXPECT_EQ(clamp_box({8, 2, 5, 3}, 10, 10), (FaceBox{8, 2, 2, 3}));
    EXPECT_FALSE(clamp_box({10, 0, 5, 5}, 10, 10).has_value());
    EXPECT_FALSE(clamp_box({0, 0, 0, 5}, 10, 10).has_value());

    Image img(4, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i);
    const Image c = crop(img, {1, 1, 2, 5});
    EXPECT_EQ(c.width, 2u);
    EXPECT_EQ(c.height, 2u);
    EXPECT_EQ(c.pixels, (std::vector<std::uint8_t>{5, 6, 9, 10}));
    EXPECT_THROW(crop(img, {-10, 0, 5, 5}), DataError);
}

TEST(Boxes, CsvWithOptionalHeader) {
    const fs::path p = scratch_dir() / "boxes.csv";
    std::ofstream(p) << "x,y,w,h\n1,2,30,40\n-3,0,10,10\n";
    EXPECT_EQ(load_boxes(p), (std::vector<FaceBox>{{1, 2, 30, 40}, {-3, 0, 10, 10}}));
    std::ofstream(p) << "5,6,7,8\n";
    EXPECT_EQ(load_boxes(p), (std::vector<FaceBox>{{5, 6, 7, 8}}));
    std::ofstream(p) << "5,6,seven,8\n";
    EXPECT_THROW(load_boxes(p), ParseError);
}

TEST(Pgm, RoundTripAndComments) {
    Image img(2, 2);
    img.pixels = {0, 127, 200, 255};
    EXPECT_EQ(parse_pgm(format_pgm(img)), img);

    const auto with_comment = bytes_of(std::string("P5\n# made by hand\n2 2\n# another\n255\n") + "\x01\x02\x03\x04");
    EXPECT_EQ(parse_pgm(with_comment).pixels, (std::vector<std::uint8_t>{1, 2, 3, 4}));

    const fs::path p = scratch_dir() / "t.pgm";
    Tensor t({1, 1, 2, 3}, {0, 1, 2, 253, 254, 255});
    encode_pgm(t, p);
    EXPECT_EQ(decode_pgm(p), t);
    write_pgm(img, p);
    EXPECT_EQ(read_pgm(p), img);
}

TEST(Pgm, Rejections) {
    try {
        parse_pgm(bytes_of("P5\n1 1\n65535\n\x01\x02"));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatErrorKind::Unsupported);
    }
    EXPECT_THROW(parse_pgm(bytes_of("P2\n1 1\n255\n0")), ParseError);
    EXPECT_THROW(parse_pgm(bytes_of("P5\n2 2\n255\n\x01")), ParseError);
    EXPECT_THROW(parse_pgm(bytes_of("P5\n2")), ParseError);
    EXPECT_THROW(read_pgm(scratch_dir() / "nope.pgm"), IoError);
}

TEST(Manifest, LoadsNamesAndIndices) {
    const fs::path dir = scratch_dir() / "manifest";
    fs::remove_all(dir);
    const fs::path manifest = synth::write_gender_manifest(dir, 6, 3);
    const Dataset d = load_manifest(manifest, {"woman", "man"});
    EXPECT_EQ(d.size(), 6u);
    for (const Sample& s : d.samples) {
        EXPECT_LT(s.label, 2u);
        EXPECT_EQ(s.image.shape(), (Shape{1, 1, 48, 48}));
    }

    const fs::path alt = dir / "numeric.csv";
    std::ofstream(alt) << "face_0000.pgm,1\nface_0001.pgm,0\n";
    const Dataset n = load_manifest(alt, {"woman", "man"}, 32);
    EXPECT_EQ(n.labels(std::vector<std::size_t>{0, 1}), (std::vector<std::size_t>{1, 0}));
    EXPECT_EQ(n.samples[0].image.shape(), (Shape{1, 1, 32, 32}));

    std::ofstream(alt) << "face_0000.pgm,child\n";
    EXPECT_THROW(load_manifest(alt, {"woman", "man"}), ParseError);
    std::ofstream(alt) << "missing.pgm,man\n";
    EXPECT_THROW(load_manifest(alt, {"woman", "man"}), IoError);
}

TEST(Resize, ConstantsAndIdentity) {
    EXPECT_EQ(resize(Image(10, 7, 1, 42), 33, 5), Image(33, 5, 1, 42));
    const Image face = synth::face(2, 7, 1, 48);
    EXPECT_EQ(resize(face, 48, 48), face);
    EXPECT_EQ(resize(Image(4, 4, 3, 90), 2, 2), Image(2, 2, 1, 90));
    EXPECT_THROW(resize(Image{}, 2, 2), DataError);
}
