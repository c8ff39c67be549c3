#include "rtcnn/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace rtcnn {

namespace {

using Clock = std::chrono::steady_clock;

double micros_since(Clock::time_point start) {
    return std::chrono::duration<double, std::micro>(Clock::now() - start).count();
}

std::size_t input_side(const Model& m) {
    const Shape& in = m.metadata().input;
    if (in.c != 1 || in.h != in.w) throw ConfigError("pipeline models need a square single-channel input");
    return in.h;
}

}  // namespace

Prediction top_class(const Model& m, const Tensor& probs) {
    if (probs.shape().n != 1) throw ContractError("top_class expects one sample");
    const float* p = probs.ptr();
    const std::size_t k = probs.size();
    const std::size_t best = static_cast<std::size_t>(std::max_element(p, p + k) - p);
    const auto& names = m.metadata().class_names;
    return {best, best < names.size() ? names[best] : "class" + std::to_string(best), p[best]};
}

std::vector<FaceResult> classify_faces(const Image& frame, std::span<const FaceBox> boxes, const Model& gender,
                                       const Model& emotion) {
    if (frame.empty()) throw DataError("empty frame");
    const std::size_t gender_hw = input_side(gender);
    const std::size_t emotion_hw = input_side(emotion);

    std::vector<FaceResult> results;
    results.reserve(boxes.size());
    for (const FaceBox& box : boxes) {
        FaceResult r;
        r.box = box;
        r.region = clamp_box(box, frame.width, frame.height);
        if (!r.region) {
            r.error = "box lies outside the frame";
            results.push_back(std::move(r));
            continue;
        }

        const auto t0 = Clock::now();
        const Image face = crop(frame, *r.region);
        const Tensor xg = preprocess(face, gender_hw);
        const Tensor xe = emotion_hw == gender_hw ? xg : preprocess(face, emotion_hw);
        r.latency.preprocess_us = micros_since(t0);

        const auto t1 = Clock::now();
        r.gender = top_class(gender, predict(gender, xg));
        r.latency.gender_us = micros_since(t1);

        const auto t2 = Clock::now();
        r.emotion = top_class(emotion, predict(emotion, xe));
        r.latency.emotion_us = micros_since(t2);
        r.latency.total_us = micros_since(t0);
        results.push_back(std::move(r));
    }
    return results;
}

LatencyStats LatencyStats::from_samples(std::span<const double> us) {
    LatencyStats s;
    s.iterations = us.size();
    if (us.empty()) return s;
    const double n = static_cast<double>(us.size());
    s.mean_us = std::accumulate(us.begin(), us.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : us) ss += (v - s.mean_us) * (v - s.mean_us);
    s.stddev_us = std::sqrt(ss / n);
    const auto [lo, hi] = std::minmax_element(us.begin(), us.end());
    s.min_us = *lo;
    s.max_us = *hi;
    // Rounding in the mean can land a hair outside [min, max] for near-constant samples.
    s.mean_us = std::clamp(s.mean_us, s.min_us, s.max_us);
    return s;
}

LatencyStats time_forward(const Model& m, std::size_t iterations, std::size_t warmup) {
    const Tensor x = Tensor::uniform(m.metadata().input, -1.0, 1.0, 7);
    for (std::size_t i = 0; i < warmup; ++i) (void)predict(m, x);
    std::vector<double> us(iterations);
    for (std::size_t i = 0; i < iterations; ++i) {
        const auto t0 = Clock::now();
        (void)predict(m, x);
        us[i] = micros_since(t0);
    }
    return LatencyStats::from_samples(us);
}

BenchmarkReport benchmark(const Model& gender, const Model& emotion, std::size_t input_hw, std::size_t iterations,
                          std::size_t warmup) {
    if (iterations < 10) throw ConfigError("benchmark needs at least 10 iterations");
    if (warmup < 3) throw ConfigError("benchmark needs at least 3 warm-up iterations");

    BenchmarkReport rep;
    rep.input_hw = input_hw;
    rep.warmup = warmup;

    Image frame(input_hw, input_hw);
    Xorshift64Star rng(99);
    for (auto& p : frame.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    const FaceBox whole{0, 0, static_cast<long>(input_hw), static_cast<long>(input_hw)};

    for (std::size_t i = 0; i < warmup; ++i) (void)classify_faces(frame, {&whole, 1}, gender, emotion);
    std::vector<double> us(iterations);
    for (std::size_t i = 0; i < iterations; ++i) {
        const auto t0 = Clock::now();
        (void)classify_faces(frame, {&whole, 1}, gender, emotion);
        us[i] = micros_since(t0);
    }
    rep.pipeline = LatencyStats::from_samples(us);

    const Model mini = build_mini_xception<float>(7, input_hw);
    const Model seq = build_sequential_fully_cnn<float>(7, input_hw);
    rep.mini = time_forward(mini, iterations, warmup);
    rep.sequential = time_forward(seq, iterations, warmup);
    return rep;
}

}  // namespace rtcnn
