#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "rtcnn/pipeline.hpp"
#include "synth_faces.hpp"

using namespace rtcnn;

namespace {

struct Models {
    Model gender = build_mini_xception(2, 48, 11);
    Model emotion = build_mini_xception(7, 48, 12);
};

const Models& models() {
    static const Models m;
    return m;
}

Image frame() {
    Image f(120, 90);
    const Image face = synth::face(3, 7, 5, 60);
    for (std::size_t y = 0; y < 60; ++y)
        for (std::size_t x = 0; x < 60; ++x) f.at(x + 40, y + 20) = face.at(x, y);
    return f;
}

void expect_same(const Prediction& a, const Prediction& b) {
    EXPECT_EQ(a.index, b.index);
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.probability, b.probability);
}

}  // namespace

TEST(ClassifyFaces, NoBoxesNoResults) {
    EXPECT_TRUE(classify_faces(frame(), {}, models().gender, models().emotion).empty());
    EXPECT_THROW(classify_faces(Image{}, {}, models().gender, models().emotion), DataError);
}

TEST(ClassifyFaces, FullFrameBoxIsPlainInference) {
    const Image f = frame();
    const std::vector<FaceBox> boxes{{0, 0, 120, 90}};
    const auto r = classify_faces(f, boxes, models().gender, models().emotion);
    ASSERT_EQ(r.size(), 1u);
    ASSERT_TRUE(r[0].ok());
    const Tensor x = preprocess(f, 48);
    expect_same(r[0].gender, top_class(models().gender, predict(models().gender, x)));
    expect_same(r[0].emotion, top_class(models().emotion, predict(models().emotion, x)));
}

TEST(ClassifyFaces, CompositionWithCropAndClamp) {
    const Image f = frame();
    const std::vector<FaceBox> boxes{{40, 20, 60, 60}, {85, -5, 40, 40}, {500, 500, 10, 10}, {10, 10, 30, 30}};
    const auto r = classify_faces(f, boxes, models().gender, models().emotion);
    ASSERT_EQ(r.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r[i].box, boxes[i]);

    EXPECT_EQ(r[1].region, (FaceBox{85, 0, 35, 35}));
    EXPECT_FALSE(r[2].ok());
    EXPECT_FALSE(r[2].region.has_value());

    for (std::size_t i : {0u, 1u, 3u}) {
        ASSERT_TRUE(r[i].ok()) << *r[i].error;
        const Tensor x = preprocess(crop(f, boxes[i]), 48);
        expect_same(r[i].gender, top_class(models().gender, predict(models().gender, x)));
        expect_same(r[i].emotion, top_class(models().emotion, predict(models().emotion, x)));
        EXPECT_GE(r[i].gender.probability, 0.0);
        EXPECT_LE(r[i].emotion.probability, 1.0);
        EXPECT_EQ(r[i].gender.label, models().gender.metadata().class_names[r[i].gender.index]);
        EXPECT_GE(r[i].latency.total_us, r[i].latency.gender_us);
    }
}

TEST(ClassifyFaces, SharedModelsAcrossThreads) {
    const Image f = frame();
    const std::vector<FaceBox> boxes{{40, 20, 60, 60}, {0, 0, 50, 50}};
    const auto serial = classify_faces(f, boxes, models().gender, models().emotion);
    std::vector<std::vector<FaceResult>> out(4);
    std::vector<std::thread> pool;
    for (auto& o : out) pool.emplace_back([&] { o = classify_faces(f, boxes, models().gender, models().emotion); });
    for (auto& t : pool) t.join();
    for (const auto& o : out)
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            expect_same(o[i].gender, serial[i].gender);
            expect_same(o[i].emotion, serial[i].emotion);
        }
}

TEST(TopClass, PicksFirstMaximum) {
    const Tensor p({1, 7, 1, 1}, {0.1f, 0.3f, 0.3f, 0.1f, 0.1f, 0.05f, 0.05f});
    const Prediction t = top_class(models().emotion, p);
    EXPECT_EQ(t.index, 1u);
    EXPECT_EQ(t.label, "disgust");
    EXPECT_FLOAT_EQ(static_cast<float>(t.probability), 0.3f);
}

TEST(LatencyStats, FromSamples) {
    const std::vector<double> us{10, 20, 30, 40};
    const LatencyStats s = LatencyStats::from_samples(us);
    EXPECT_DOUBLE_EQ(s.mean_us, 25);
    EXPECT_DOUBLE_EQ(s.stddev_us, std::sqrt(125.0));
    EXPECT_EQ(s.min_us, 10);
    EXPECT_EQ(s.max_us, 40);
    EXPECT_EQ(s.iterations, 4u);
    const std::vector<double> same(5, 7.0);
    const LatencyStats c = LatencyStats::from_samples(same);
    EXPECT_EQ(c.stddev_us, 0.0);
    EXPECT_EQ(c.mean_us, 7.0);
}

TEST(Benchmark, ReportsRequestedIterations) {
    const BenchmarkReport r = benchmark(models().gender, models().emotion, 48, 10);
    for (const LatencyStats* s : {&r.pipeline, &r.mini, &r.sequential}) {
        EXPECT_EQ(s->iterations, 10u);
        EXPECT_LE(s->min_us, s->mean_us);
        EXPECT_LE(s->mean_us, s->max_us);
        EXPECT_GE(s->stddev_us, 0.0);
    }
    EXPECT_EQ(r.warmup, 3u);
    EXPECT_THROW(benchmark(models().gender, models().emotion, 48, 9), ConfigError);
    EXPECT_THROW(benchmark(models().gender, models().emotion, 48, 10, 2), ConfigError);
}
