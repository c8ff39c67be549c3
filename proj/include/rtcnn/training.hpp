#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtcnn/data.hpp"
#include "rtcnn/model.hpp"

namespace rtcnn {

template <typename T>
struct LossResult {
    double loss = 0.0;
    BasicTensor<T> d_logits;  // gradient with respect to the logits feeding the softmax
};

/// Mean of -log p[label] (p clamped to >= 1e-12) and the fused softmax + cross-entropy gradient
/// (probs - onehot) / n. Throws DataError for a label outside [0, K).
template <typename T>
LossResult<T> cross_entropy(const BasicTensor<T>& probs, std::span<const std::size_t> labels);

template <typename T>
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t t = 0;
    typename BasicModel<T>::Store m;
    typename BasicModel<T>::Store v;

    /// Zero moments shaped like every tensor in `params`.
    static AdamState for_params(const typename BasicModel<T>::Store& params, double lr = 1e-3);
};

/// One bias-corrected ADAM update:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2,
///   p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
/// Throws ContractError unless params, grads and state moments share the same keys and shapes.
template <typename T>
void adam_step(typename BasicModel<T>::Store& params, const typename BasicModel<T>::Store& grads, AdamState<T>& state);

enum class LrSchedule { Constant, Plateau };

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs = 10;
    double lr = 1e-3;
    LrSchedule schedule = LrSchedule::Constant;
    std::size_t plateau_patience = 5;  // epochs without val (or train loss) improvement
    double plateau_factor = 0.5;
    double min_lr = 1e-6;
    std::uint64_t seed = 1;
    std::optional<std::filesystem::path> checkpoint;
    /// Held-out share when the data carries no Usage column. 0 disables validation.
    double validation_fraction = 0.2;
    bool horizontal_flip = false;
    /// Stop once an epoch's training accuracy reaches this value.
    std::optional<double> target_train_accuracy;
    /// Re-estimate batch-norm running statistics over the training split after every epoch,
    /// so inference-mode evaluation does not lag behind the weights.
    bool recalibrate_bn = true;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;  // running train-mode accuracy over the epoch's batches
    std::optional<double> val_acc;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::size_t train_samples = 0;
    std::size_t val_samples = 0;
    std::optional<std::size_t> checkpoint_epoch;
    bool stopped_early = false;
};

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

/// Usage column when present (Training / PublicTest; PrivateTest is held out), otherwise a seeded
/// shuffle with the last `validation_fraction` share going to validation.
Split split_dataset(const Dataset& data, double validation_fraction, std::uint64_t seed);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Replaces every batch-norm running mean and variance with the sample-weighted average of the
/// batch statistics seen over `idx` in batches of `batch_size`. Parameters are untouched.
void recalibrate_batchnorm(Model& model, const Dataset& data, std::span<const std::size_t> idx,
                           std::size_t batch_size);

/// ADAM on cross-entropy. Shuffling and augmentation are functions of the seed, so a rerun from
/// the same starting weights reproduces the history exactly. train_acc is the running train-mode
/// accuracy over the epoch's batches; val_acc is measured in inference mode after the epoch (and
/// after batch-norm recalibration when enabled). When a checkpoint path is set the model is saved
/// whenever validation accuracy improves (or every epoch without validation).
/// Throws ConfigError when the dataset's class count does not match the model head.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------------------------
// Evaluation

struct ConfusionMatrix {
    std::vector<std::string> class_names;
    std::vector<std::uint64_t> counts;  // K x K, row = true class, column = predicted

    explicit ConfusionMatrix(std::vector<std::string> names = {});

    std::size_t size() const { return class_names.size(); }
    std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts[truth * size() + predicted]; }
    std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * size() + predicted]; }

    std::uint64_t total() const;
    std::uint64_t trace() const;
    std::uint64_t support(std::size_t truth) const;
    /// Row-normalized K x K grid; rows without support stay all zero.
    std::vector<double> normalized() const;
    std::vector<bool> zero_support_rows() const;

    /// Grid with a header row and a leading column of class names.
    std::string to_csv(bool normalize = true) const;
};

/// Throws DataError for out-of-range labels or predictions and ContractError on length mismatch.
ConfusionMatrix confusion_from_predictions(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                           std::vector<std::string> class_names);

struct EvalResult {
    double accuracy = 0.0;  // trace / total
    ConfusionMatrix cm;
};

/// Inference-mode predictions over the whole dataset. Throws ContractError for an empty dataset.
EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 64);

/// argmax over classes for every sample of an (n, K, 1, 1) probability tensor.
template <typename T>
std::vector<std::size_t> predicted_classes(const BasicTensor<T>& probs);

/// `epoch,train_loss,train_acc,val_acc`; val_acc is empty when there was no validation split.
std::string history_csv(const std::vector<EpochRecord>& history);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace rtcnn
