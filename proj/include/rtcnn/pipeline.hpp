#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtcnn/data.hpp"
#include "rtcnn/model.hpp"

namespace rtcnn {

struct Prediction {
    std::size_t index = 0;
    std::string label;
    double probability = 0.0;
};

struct StageLatency {
    double preprocess_us = 0.0;
    double gender_us = 0.0;
    double emotion_us = 0.0;
    double total_us = 0.0;
};

struct FaceResult {
    FaceBox box;                    // as requested
    std::optional<FaceBox> region;  // clamped to the frame; empty when the box missed it
    Prediction gender;
    Prediction emotion;
    StageLatency latency;
    std::optional<std::string> error;

    bool ok() const { return !error; }
};

/// For each box, in order: clamp to the frame, crop, preprocess to each model's input size and run
/// both models in inference mode. A box that misses the frame yields an entry with `error` set.
/// Models are only read, so concurrent calls on shared models are safe.
std::vector<FaceResult> classify_faces(const Image& frame, std::span<const FaceBox> boxes, const Model& gender,
                                       const Model& emotion);

/// Highest-probability class of a single-sample probability tensor, named from `m`'s class table.
Prediction top_class(const Model& m, const Tensor& probs);

struct LatencyStats {
    double mean_us = 0.0;
    double stddev_us = 0.0;  // population standard deviation
    double min_us = 0.0;
    double max_us = 0.0;
    std::size_t iterations = 0;

    static LatencyStats from_samples(std::span<const double> us);
};

struct BenchmarkReport {
    std::size_t input_hw = 48;
    std::size_t warmup = 3;
    LatencyStats pipeline;    // one gender + emotion pass on a synthetic frame
    LatencyStats mini;        // mini-Xception forward alone
    LatencyStats sequential;  // sequential fully-CNN forward alone
};

/// Times the full two-model pass, then freshly initialized mini-Xception and sequential
/// fully-CNN forwards (7 classes) at input_hw. Classification only: no face detection.
/// Throws ConfigError if iterations < 10 or warmup < 3.
BenchmarkReport benchmark(const Model& gender, const Model& emotion, std::size_t input_hw, std::size_t iterations,
                          std::size_t warmup = 3);

/// Forward latency of a single model on a seeded random input.
LatencyStats time_forward(const Model& m, std::size_t iterations, std::size_t warmup = 3);

}  // namespace rtcnn
