#include "rtcnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "rtcnn/serialize.hpp"

namespace rtcnn {

template <typename T>
LossResult<T> cross_entropy(const BasicTensor<T>& probs, std::span<const std::size_t> labels) {
    const Shape& s = probs.shape();
    if (s.h != 1 || s.w != 1) throw ShapeError("cross_entropy expects (n, K, 1, 1) probabilities, got " + s.str());
    if (labels.size() != s.n)
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for a batch of " +
                            std::to_string(s.n));

    LossResult<T> out{0.0, probs};
    const double inv_n = 1.0 / static_cast<double>(s.n);
    double total = 0.0;
    for (std::size_t i = 0; i < s.n; ++i) {
        if (labels[i] >= s.c)
            throw DataError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(s.c) + ")");
        const T* p = probs.sample(i);
        total -= std::log(std::max(static_cast<double>(p[labels[i]]), 1e-12));
        T* d = out.d_logits.sample(i);
        for (std::size_t k = 0; k < s.c; ++k) {
            const double onehot = k == labels[i] ? 1.0 : 0.0;
            d[k] = static_cast<T>((static_cast<double>(p[k]) - onehot) * inv_n);
        }
    }
    out.loss = total * inv_n;
    return out;
}

template <typename T>
AdamState<T> AdamState<T>::for_params(const typename BasicModel<T>::Store& params, double lr) {
    AdamState st;
    st.lr = lr;
    for (const auto& [key, p] : params) {
        st.m.emplace(key, BasicTensor<T>(p.shape()));
        st.v.emplace(key, BasicTensor<T>(p.shape()));
    }
    return st;
}

template <typename T>
void adam_step(typename BasicModel<T>::Store& params, const typename BasicModel<T>::Store& grads, AdamState<T>& state) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
        throw ContractError("adam_step: parameter, gradient and moment key sets differ");
    for (const auto& [key, p] : params) {
        const auto g = grads.find(key);
        const auto m = state.m.find(key);
        const auto v = state.v.find(key);
        if (g == grads.end() || m == state.m.end() || v == state.v.end())
            throw ContractError("adam_step: no gradient or moment for '" + key + "'");
        if (g->second.shape() != p.shape() || m->second.shape() != p.shape() || v->second.shape() != p.shape())
            throw ContractError("adam_step: shape mismatch for '" + key + "'");
    }

    state.t += 1;
    const double b1 = state.beta1;
    const double b2 = state.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (auto& [key, p] : params) {
        const T* g = grads.at(key).ptr();
        T* m = state.m.at(key).ptr();
        T* v = state.v.at(key).ptr();
        T* w = p.ptr();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double mi = b1 * m[i] + (1.0 - b1) * gi;
            const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            w[i] = static_cast<T>(w[i] - state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.epsilon));
        }
    }
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
        throw ConfigError("validation fraction must lie in [0, 1)");
    if (schedule == LrSchedule::Plateau && !(plateau_factor > 0.0 && plateau_factor < 1.0))
        throw ConfigError("plateau factor must lie in (0, 1)");
    if (target_train_accuracy && !(*target_train_accuracy > 0.0 && *target_train_accuracy <= 1.0))
        throw ConfigError("target training accuracy must lie in (0, 1]");
}

namespace {

template <typename Rng>
void shuffle(std::vector<std::size_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

void flip_horizontal(Tensor& batch, std::size_t sample) {
    const Shape& s = batch.shape();
    for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t y = 0; y < s.h; ++y) {
            float* row = &batch(sample, c, y, 0);
            std::reverse(row, row + s.w);
        }
}

std::vector<std::size_t> predict_indices(const Model& model, const Dataset& data, std::span<const std::size_t> idx,
                                         std::size_t batch_size) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (std::size_t first = 0; first < idx.size(); first += batch_size) {
        const auto chunk = idx.subspan(first, std::min(batch_size, idx.size() - first));
        const auto preds = predicted_classes(predict(model, data.batch(chunk)));
        out.insert(out.end(), preds.begin(), preds.end());
    }
    return out;
}

double accuracy_on(const Model& model, const Dataset& data, std::span<const std::size_t> idx) {
    const auto preds = predict_indices(model, data, idx, 64);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) hits += preds[i] == data.samples[idx[i]].label;
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

}  // namespace

Split split_dataset(const Dataset& data, double validation_fraction, std::uint64_t seed) {
    Split split;
    const bool has_usage =
        std::any_of(data.samples.begin(), data.samples.end(), [](const Sample& s) { return !s.usage.empty(); });
    if (has_usage) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (data.samples[i].usage == "Training") split.train.push_back(i);
            if (data.samples[i].usage == "PublicTest") split.val.push_back(i);
        }
        if (!split.train.empty()) return split;
        split.val.clear();
    }

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Xorshift64Star rng(seed ^ 0x5EED5EED5EED5EEDULL);
    shuffle(order, rng);
    const auto n_val = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(order.size())));
    split.train.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
    split.val.assign(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

void recalibrate_batchnorm(Model& model, const Dataset& data, std::span<const std::size_t> idx,
                           std::size_t batch_size) {
    if (idx.empty() || batch_size == 0) throw ContractError("batch-norm recalibration needs samples");
    // Momentum 0 makes each train-mode forward leave exactly that batch's statistics behind.
    Model probe(model.metadata());
    for (std::size_t i = 1; i < model.nodes().size(); ++i) {
        Node node = model.nodes()[i];
        node.bn_momentum = 0.0;
        probe.add_node(node);
    }
    probe.params() = model.params();

    std::map<std::string, std::vector<double>> sums;
    for (const auto& [key, buf] : model.buffers()) sums[key].assign(buf.size(), 0.0);
    for (std::size_t first = 0; first < idx.size(); first += batch_size) {
        const auto part = idx.subspan(first, std::min(batch_size, idx.size() - first));
        forward(probe, data.batch(part), Mode::Train, false);
        for (auto& [key, acc] : sums) {
            const Tensor& b = probe.buffers().at(key);
            for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += static_cast<double>(b[c]) * part.size();
        }
    }
    for (auto& [key, acc] : sums) {
        Tensor& b = model.buffers().at(key);
        for (std::size_t c = 0; c < acc.size(); ++c) b[c] = static_cast<float>(acc[c] / static_cast<double>(idx.size()));
    }
}

TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (data.empty()) throw DataError("training dataset is empty");
    if (data.num_classes() != model.num_classes())
        throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes but the model predicts " +
                          std::to_string(model.num_classes()));

    const Split split = split_dataset(data, cfg.validation_fraction, cfg.seed);
    if (split.train.empty()) throw DataError("no training samples after the train/validation split");

    TrainResult result;
    result.train_samples = split.train.size();
    result.val_samples = split.val.size();

    AdamState<float> adam = AdamState<float>::for_params(model.params(), cfg.lr);
    Xorshift64Star rng(cfg.seed);
    const std::size_t logits = logits_node(model);

    BackwardOptions<float> opts;
    opts.relu_mode = ReluMode::Standard;
    opts.param_grads = true;
    opts.input_grad = false;

    std::vector<std::size_t> order = split.train;
    double best_monitor = -INFINITY;
    std::optional<double> best_val;
    std::size_t stale = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle(order, rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
            const std::span<const std::size_t> idx(order.data() + first, std::min(cfg.batch_size, order.size() - first));
            Tensor x = data.batch(idx);
            if (cfg.horizontal_flip)
                for (std::size_t i = 0; i < idx.size(); ++i)
                    if (rng.below(2)) flip_horizontal(x, i);
            const auto labels = data.labels(idx);

            const Trace<float> trace = forward(model, x, Mode::Train, true);
            const LossResult<float> loss = cross_entropy(trace.output(), labels);
            const Gradients<float> grads = backward_from(model, trace, logits, loss.d_logits, opts);
            adam_step(model.params(), grads.params, adam);
            loss_sum += loss.loss * static_cast<double>(idx.size());
            const auto pred = predicted_classes(trace.output());
            for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
        }
        if (cfg.recalibrate_bn) recalibrate_batchnorm(model, data, split.train, cfg.batch_size);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = adam.lr;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
        if (!split.val.empty()) rec.val_acc = accuracy_on(model, data, split.val);
        result.history.push_back(rec);

        if (cfg.checkpoint) {
            const bool improved = !split.val.empty() && (!best_val || *rec.val_acc > *best_val);
            if (split.val.empty() || improved) {
                save_weights(model, *cfg.checkpoint);
                result.checkpoint_epoch = epoch;
            }
        }
        if (rec.val_acc && (!best_val || *rec.val_acc > *best_val)) best_val = rec.val_acc;

        if (cfg.schedule == LrSchedule::Plateau) {
            const double monitor = rec.val_acc ? *rec.val_acc : -rec.train_loss;
            if (monitor > best_monitor) {
                best_monitor = monitor;
                stale = 0;
            } else if (++stale >= cfg.plateau_patience) {
                adam.lr = std::max(cfg.min_lr, adam.lr * cfg.plateau_factor);
                stale = 0;
            }
        }

        if (on_epoch) on_epoch(rec);
        if (cfg.target_train_accuracy && rec.train_acc >= *cfg.target_train_accuracy) {
            result.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> names)
    : class_names(std::move(names)), counts(class_names.size() * class_names.size(), 0) {}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::trace() const {
    std::uint64_t t = 0;
    for (std::size_t k = 0; k < size(); ++k) t += at(k, k);
    return t;
}

std::uint64_t ConfusionMatrix::support(std::size_t truth) const {
    std::uint64_t s = 0;
    for (std::size_t k = 0; k < size(); ++k) s += at(truth, k);
    return s;
}

std::vector<double> ConfusionMatrix::normalized() const {
    const std::size_t k = size();
    std::vector<double> out(k * k, 0.0);
    for (std::size_t r = 0; r < k; ++r) {
        const std::uint64_t s = support(r);
        if (s == 0) continue;
        for (std::size_t c = 0; c < k; ++c) out[r * k + c] = static_cast<double>(at(r, c)) / static_cast<double>(s);
    }
    return out;
}

std::vector<bool> ConfusionMatrix::zero_support_rows() const {
    std::vector<bool> out(size());
    for (std::size_t r = 0; r < size(); ++r) out[r] = support(r) == 0;
    return out;
}

std::string ConfusionMatrix::to_csv(bool normalize) const {
    const std::size_t k = size();
    const auto norm = normalized();
    std::string out = "true\\predicted";
    for (const auto& name : class_names) out += "," + name;
    out += "\n";
    char buf[32];
    for (std::size_t r = 0; r < k; ++r) {
        out += class_names[r];
        for (std::size_t c = 0; c < k; ++c) {
            if (normalize)
                std::snprintf(buf, sizeof buf, ",%.6f", norm[r * k + c]);
            else
                std::snprintf(buf, sizeof buf, ",%llu", static_cast<unsigned long long>(at(r, c)));
            out += buf;
        }
        out += "\n";
    }
    return out;
}

ConfusionMatrix confusion_from_predictions(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                           std::vector<std::string> class_names) {
    if (truth.size() != predicted.size()) throw ContractError("truth and prediction counts differ");
    ConfusionMatrix cm(std::move(class_names));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= cm.size() || predicted[i] >= cm.size())
            throw DataError("class index out of range at position " + std::to_string(i));
        ++cm.at(truth[i], predicted[i]);
    }
    return cm;
}

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch_size) {
    if (data.empty()) throw ContractError("cannot evaluate on an empty dataset");
    if (data.num_classes() != model.num_classes())
        throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes but the model predicts " +
                          std::to_string(model.num_classes()));
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto preds = predict_indices(model, data, idx, std::max<std::size_t>(batch_size, 1));
    EvalResult r{0.0, confusion_from_predictions(data.labels(idx), preds, data.class_names)};
    r.accuracy = static_cast<double>(r.cm.trace()) / static_cast<double>(r.cm.total());
    return r;
}

template <typename T>
std::vector<std::size_t> predicted_classes(const BasicTensor<T>& probs) {
    const Shape& s = probs.shape();
    std::vector<std::size_t> out(s.n);
    for (std::size_t i = 0; i < s.n; ++i) {
        const T* p = probs.sample(i);
        out[i] = static_cast<std::size_t>(std::max_element(p, p + s.per_sample()) - p) / s.plane();
    }
    return out;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::string out = "epoch,train_loss,train_acc,val_acc\n";
    char buf[128];
    for (const EpochRecord& r : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,", r.epoch, r.train_loss, r.train_acc);
        out += buf;
        if (r.val_acc) {
            std::snprintf(buf, sizeof buf, "%.6f", *r.val_acc);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

template LossResult<float> cross_entropy(const Tensor&, std::span<const std::size_t>);
template LossResult<double> cross_entropy(const Tensor64&, std::span<const std::size_t>);
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(Model::Store&, const Model::Store&, AdamState<float>&);
template void adam_step<double>(Model64::Store&, const Model64::Store&, AdamState<double>&);
template std::vector<std::size_t> predicted_classes(const Tensor&);
template std::vector<std::size_t> predicted_classes(const Tensor64&);

}  // namespace rtcnn
