// rtcnn command-line tool: parameter budgets, training, evaluation, stacked classification,
// guided back-propagation and latency benchmarks.
//
// Machine-readable results go to stdout as JSON (one object per line); human-oriented tables
// and progress go to stderr.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rtcnn/data.hpp"
#include "rtcnn/model.hpp"
#include "rtcnn/pipeline.hpp"
#include "rtcnn/saliency.hpp"
#include "rtcnn/serialize.hpp"
#include "rtcnn/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kIo = 3, kContract = 4, kInternal = 5 };

int exit_code(rtcnn::ErrorCategory c) {
    switch (c) {
        case rtcnn::ErrorCategory::Io:
        case rtcnn::ErrorCategory::Parse:
        case rtcnn::ErrorCategory::Format: return kIo;
        case rtcnn::ErrorCategory::Shape:
        case rtcnn::ErrorCategory::Contract:
        case rtcnn::ErrorCategory::Config:
        case rtcnn::ErrorCategory::Data: return kContract;
    }
    return kInternal;
}

const char* category_name(rtcnn::ErrorCategory c) {
    switch (c) {
        case rtcnn::ErrorCategory::Io: return "io";
        case rtcnn::ErrorCategory::Parse: return "parse";
        case rtcnn::ErrorCategory::Format: return "format";
        case rtcnn::ErrorCategory::Shape: return "shape";
        case rtcnn::ErrorCategory::Contract: return "contract";
        case rtcnn::ErrorCategory::Config: return "config";
        case rtcnn::ErrorCategory::Data: return "data";
    }
    return "internal";
}

void emit(const json& j) { std::cout << j.dump() << '\n' << std::flush; }

json stats_json(const rtcnn::LatencyStats& s) {
    return {{"mean_us", s.mean_us}, {"stddev_us", s.stddev_us}, {"min_us", s.min_us}, {"max_us", s.max_us},
            {"iterations", s.iterations}};
}

json box_json(const rtcnn::FaceBox& b) { return {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}}; }

json prediction_json(const rtcnn::Prediction& p) {
    return {{"label", p.label}, {"index", p.index}, {"probability", p.probability}};
}

std::vector<std::string> split_labels(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    for (std::string item; std::getline(in, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

rtcnn::FaceBox parse_box(const std::string& s) {
    long v[4];
    char tail = 0;
    if (std::sscanf(s.c_str(), "%ld,%ld,%ld,%ld%c", &v[0], &v[1], &v[2], &v[3], &tail) != 4)
        throw rtcnn::ParseError("box must look like x,y,w,h, got '" + s + "'");
    return {v[0], v[1], v[2], v[3]};
}

const std::vector<std::string> kArchitectures{rtcnn::kMiniXception, "sequential", rtcnn::kSequentialFullyCnn};

// ---------------------------------------------------------------------------------------------
// Dataset flags shared by train and eval

struct DataFlags {
    std::string fer;
    std::string manifest;
    std::string labels = "woman,man";
    std::string usage;
    std::size_t limit = 0;
    bool lenient = false;

    void add(CLI::App* cmd) {
        auto* f = cmd->add_option("--data", fer, "FER-2013 style CSV (emotion,pixels[,Usage])");
        auto* m = cmd->add_option("--manifest", manifest, "path,label manifest of PGM face crops");
        f->excludes(m);
        cmd->add_option("--labels", labels, "Class names for --manifest, comma separated")->capture_default_str();
        cmd->add_option("--usage", usage, "Keep only FER rows with this Usage value");
        cmd->add_option("--limit", limit, "Use at most this many samples (0 = all)")->capture_default_str();
        cmd->add_flag("--lenient", lenient, "Skip malformed FER rows instead of failing");
    }

    rtcnn::Dataset load(std::size_t input_hw) const {
        if (fer.empty() && manifest.empty()) throw CLI::RequiredError("--data or --manifest");
        rtcnn::Dataset d;
        if (!fer.empty()) {
            if (input_hw != 48) throw rtcnn::ConfigError("FER-2013 rows are 48x48; the model expects " +
                                                         std::to_string(input_hw));
            rtcnn::FerOptions opts;
            opts.lenient = lenient;
            if (!usage.empty()) opts.usage = usage;
            opts.limit = limit;
            rtcnn::FerReport report;
            d = rtcnn::load_fer2013(fer, opts, &report);
            if (report.skipped) std::fprintf(stderr, "skipped %zu malformed rows\n", report.skipped);
        } else {
            d = rtcnn::load_manifest(manifest, split_labels(labels), input_hw);
            if (limit) d = d.head(limit);
        }
        if (d.empty()) throw rtcnn::DataError("no samples loaded");
        return d;
    }
};

// ---------------------------------------------------------------------------------------------
// params

struct ParamsCmd {
    std::string arch;
    std::size_t classes = 7;
    std::size_t input = 48;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("params", "Parameter count and per-layer table of a reference architecture");
        cmd->add_option("--arch", arch, "mini-xception or sequential")->required()->check(CLI::IsMember(kArchitectures));
        cmd->add_option("--classes", classes, "Number of output classes")->capture_default_str();
        cmd->add_option("--input", input, "Input height and width")->capture_default_str();
        cmd->callback([this] { run(); });
    }

    void run() const {
        const rtcnn::Model m = rtcnn::build_architecture(arch, classes, input);
        const auto rows = rtcnn::summarize(m);
        json layers = json::array();
        std::fprintf(stderr, "%-22s %-14s %-16s %10s %14s\n", "layer", "kind", "output", "params", "macs");
        for (const auto& r : rows) {
            layers.push_back({{"name", r.name},
                              {"kind", rtcnn::to_string(r.kind)},
                              {"output", {r.output.c, r.output.h, r.output.w}},
                              {"params", r.params},
                              {"macs", r.macs}});
            const std::string shape =
                std::to_string(r.output.c) + "x" + std::to_string(r.output.h) + "x" + std::to_string(r.output.w);
            std::fprintf(stderr, "%-22s %-14s %-16s %10zu %14llu\n", r.name.c_str(), rtcnn::to_string(r.kind),
                         shape.c_str(), r.params, static_cast<unsigned long long>(r.macs));
        }
        const std::size_t total = rtcnn::count_parameters(m);
        std::fprintf(stderr, "total trainable parameters: %zu\n", total);
        emit({{"command", "params"},
              {"arch", m.metadata().architecture},
              {"classes", classes},
              {"input", input},
              {"parameters", total},
              {"fully_connected", rtcnn::fully_connected_nodes(m)},
              {"layers", layers}});
    }
};

// ---------------------------------------------------------------------------------------------
// train

struct TrainCmd {
    std::string arch;
    DataFlags data;
    std::string out;
    std::string history;
    std::string schedule = "constant";
    std::size_t input = 48;
    std::optional<double> target_acc;
    bool no_recalibration = false;
    rtcnn::TrainConfig cfg;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("train", "Train a reference architecture with ADAM");
        cmd->add_option("--arch", arch, "mini-xception or sequential")->required()->check(CLI::IsMember(kArchitectures));
        data.add(cmd);
        cmd->add_option("--epochs", cfg.epochs)->capture_default_str();
        cmd->add_option("--seed", cfg.seed, "Seeds weight init, shuffling and the validation split")
            ->capture_default_str();
        cmd->add_option("--out", out, "Checkpoint path (best validation accuracy)")->required();
        cmd->add_option("--history", history, "History CSV path (default: next to --out)");
        cmd->add_option("--batch", cfg.batch_size)->capture_default_str();
        cmd->add_option("--lr", cfg.lr)->capture_default_str();
        cmd->add_option("--schedule", schedule)->check(CLI::IsMember({"constant", "plateau"}))->capture_default_str();
        cmd->add_option("--patience", cfg.plateau_patience, "Plateau schedule patience in epochs")
            ->capture_default_str();
        cmd->add_option("--val-fraction", cfg.validation_fraction,
                        "Validation share when the data has no Usage column (0 disables)")
            ->capture_default_str();
        cmd->add_option("--input", input, "Model input size (manifests are resized to it)")->capture_default_str();
        cmd->add_option("--target-acc", target_acc, "Stop once an epoch's training accuracy reaches this");
        cmd->add_flag("--flip", cfg.horizontal_flip, "Random horizontal flips");
        cmd->add_flag("--no-bn-recalibration", no_recalibration,
                      "Keep the momentum-averaged batch-norm statistics instead of re-estimating them per epoch");
        cmd->callback([this] { run(); });
    }

    void run() {
        const rtcnn::Dataset d = data.load(input);
        rtcnn::Model m = rtcnn::build_architecture(arch, d.num_classes(), input, cfg.seed);
        m.metadata().class_names = d.class_names;

        cfg.schedule = schedule == "plateau" ? rtcnn::LrSchedule::Plateau : rtcnn::LrSchedule::Constant;
        cfg.checkpoint = fs::path(out);
        cfg.target_train_accuracy = target_acc;
        cfg.recalibrate_bn = !no_recalibration;
        fs::path hist = history.empty() ? fs::path(out).replace_extension(".history.csv") : fs::path(history);

        const auto t0 = std::chrono::steady_clock::now();
        const rtcnn::TrainResult r = rtcnn::train(m, d, cfg, [&](const rtcnn::EpochRecord& e) {
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::fprintf(stderr, "epoch %4zu  loss %.4f  train_acc %.4f", e.epoch, e.train_loss, e.train_acc);
            if (e.val_acc) std::fprintf(stderr, "  val_acc %.4f", *e.val_acc);
            std::fprintf(stderr, "  lr %.2e  %.1fs\n", e.lr, s);
        });
        rtcnn::write_text(hist, rtcnn::history_csv(r.history));

        const rtcnn::EpochRecord& last = r.history.back();
        json final_epoch = {{"epoch", last.epoch}, {"train_loss", last.train_loss}, {"train_acc", last.train_acc}};
        final_epoch["val_acc"] = last.val_acc ? json(*last.val_acc) : json(nullptr);
        emit({{"command", "train"},
              {"arch", m.metadata().architecture},
              {"classes", m.metadata().class_names},
              {"train_samples", r.train_samples},
              {"val_samples", r.val_samples},
              {"epochs_run", r.history.size()},
              {"stopped_early", r.stopped_early},
              {"checkpoint", out},
              {"checkpoint_epoch", r.checkpoint_epoch ? json(*r.checkpoint_epoch) : json(nullptr)},
              {"history", hist.string()},
              {"final", final_epoch}});
    }
};

// ---------------------------------------------------------------------------------------------
// eval

struct EvalCmd {
    std::string weights;
    DataFlags data;
    std::string cm_path;
    bool raw_counts = false;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("eval", "Accuracy and confusion matrix of trained weights");
        cmd->add_option("--weights", weights)->required();
        data.add(cmd);
        cmd->add_option("--cm", cm_path, "Write the confusion matrix CSV here");
        cmd->add_flag("--counts", raw_counts, "Write raw counts instead of row-normalized fractions");
        cmd->callback([this] { run(); });
    }

    void run() const {
        const rtcnn::Model m = rtcnn::load_weights(weights);
        rtcnn::Dataset d = data.load(m.metadata().input.h);
        if (d.num_classes() == m.num_classes() && data.manifest.empty()) d.class_names = m.metadata().class_names;
        const rtcnn::EvalResult r = rtcnn::evaluate(m, d);
        if (!cm_path.empty()) rtcnn::write_text(cm_path, r.cm.to_csv(!raw_counts));

        const std::size_t k = r.cm.size();
        const auto norm = r.cm.normalized();
        json grid = json::array();
        std::fprintf(stderr, "%-12s", "true\\pred");
        for (const auto& n : r.cm.class_names) std::fprintf(stderr, " %9.9s", n.c_str());
        std::fprintf(stderr, "\n");
        for (std::size_t i = 0; i < k; ++i) {
            json row = json::array();
            std::fprintf(stderr, "%-12.12s", r.cm.class_names[i].c_str());
            for (std::size_t j = 0; j < k; ++j) {
                row.push_back(norm[i * k + j]);
                std::fprintf(stderr, " %9.3f", norm[i * k + j]);
            }
            std::fprintf(stderr, "\n");
            grid.push_back(row);
        }
        std::fprintf(stderr, "accuracy %.4f over %llu samples\n", r.accuracy,
                     static_cast<unsigned long long>(r.cm.total()));

        json empty_rows = json::array();
        const auto zero = r.cm.zero_support_rows();
        for (std::size_t i = 0; i < k; ++i)
            if (zero[i]) empty_rows.push_back(r.cm.class_names[i]);
        emit({{"command", "eval"},
              {"accuracy", r.accuracy},
              {"samples", r.cm.total()},
              {"classes", r.cm.class_names},
              {"confusion", grid},
              {"counts", r.cm.counts},
              {"zero_support", empty_rows},
              {"cm_csv", cm_path.empty() ? json(nullptr) : json(cm_path)}});
    }
};

// ---------------------------------------------------------------------------------------------
// classify

struct ClassifyCmd {
    std::string gender_weights;
    std::string emotion_weights;
    std::string image;
    std::string boxes_csv;
    std::vector<std::string> boxes;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("classify", "Gender and emotion for every face box in a PGM frame");
        cmd->add_option("--gender-weights", gender_weights)->required();
        cmd->add_option("--emotion-weights", emotion_weights)->required();
        cmd->add_option("--image", image, "Binary PGM frame")->required();
        cmd->add_option("--boxes", boxes_csv, "CSV of x,y,w,h face boxes (default: the whole frame)");
        cmd->add_option("--box", boxes, "A single x,y,w,h box; may repeat");
        cmd->callback([this] { run(); });
    }

    void run() const {
        const rtcnn::Model gender = rtcnn::load_weights(gender_weights);
        const rtcnn::Model emotion = rtcnn::load_weights(emotion_weights);
        const rtcnn::Image frame = rtcnn::read_pgm(image);

        std::vector<rtcnn::FaceBox> list;
        if (!boxes_csv.empty()) list = rtcnn::load_boxes(boxes_csv);
        for (const auto& b : boxes) list.push_back(parse_box(b));
        if (boxes_csv.empty() && boxes.empty())
            list.push_back({0, 0, static_cast<long>(frame.width), static_cast<long>(frame.height)});

        for (const rtcnn::FaceResult& r : rtcnn::classify_faces(frame, list, gender, emotion)) {
            json j = {{"box", box_json(r.box)}};
            if (!r.ok()) {
                j["error"] = *r.error;
                std::fprintf(stderr, "box %ld,%ld,%ld,%ld: %s\n", r.box.x, r.box.y, r.box.w, r.box.h, r.error->c_str());
            } else {
                j["region"] = box_json(*r.region);
                j["gender"] = prediction_json(r.gender);
                j["emotion"] = prediction_json(r.emotion);
                j["latency_us"] = {{"preprocess", r.latency.preprocess_us},
                                   {"gender", r.latency.gender_us},
                                   {"emotion", r.latency.emotion_us},
                                   {"total", r.latency.total_us}};
                std::fprintf(stderr, "box %ld,%ld,%ld,%ld: %s (%.2f), %s (%.2f), %.0f us\n", r.box.x, r.box.y, r.box.w,
                             r.box.h, r.gender.label.c_str(), r.gender.probability, r.emotion.label.c_str(),
                             r.emotion.probability, r.latency.total_us);
            }
            emit(j);
        }
    }
};

// ---------------------------------------------------------------------------------------------
// gbp

struct GbpCmd {
    std::string weights;
    std::string image;
    std::string mode = "guided";
    std::string out;
    std::string layer;
    bool montage = false;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("gbp", "Guided back-propagation saliency map of the strongest activation");
        cmd->add_option("--weights", weights)->required();
        cmd->add_option("--image", image, "Binary PGM input")->required();
        cmd->add_option("--mode", mode)->check(CLI::IsMember({"guided", "deconvnet", "standard"}))->capture_default_str();
        cmd->add_option("--out", out, "Output PGM")->required();
        cmd->add_option("--layer", layer, "Layer to visualize (default: last convolution before GAP)");
        cmd->add_flag("--montage", montage, "Write input and saliency side by side");
        cmd->callback([this] { run(); });
    }

    void run() const {
        const rtcnn::Model m = rtcnn::load_weights(weights);
        const rtcnn::Image img = rtcnn::read_pgm(image);
        const rtcnn::Shape in = m.metadata().input;
        if (in.h != in.w) throw rtcnn::ConfigError("saliency needs a square model input");

        const auto t0 = std::chrono::steady_clock::now();
        const auto map = rtcnn::saliency(m, rtcnn::preprocess(img, in.h), rtcnn::relu_mode_from_string(mode), layer);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

        rtcnn::Image rendered = rtcnn::resize(rtcnn::render(map), img.width, img.height);
        if (montage) rendered = rtcnn::montage(rtcnn::resize(img, img.width, img.height), rendered);
        rtcnn::write_pgm(rendered, out);
        std::fprintf(stderr, "%s saliency of %s[c=%zu, y=%zu, x=%zu] = %.4f in %.1f ms\n", mode.c_str(),
                     map.target.layer.c_str(), map.target.at.c, map.target.at.y, map.target.at.x,
                     map.target.activation, ms);
        emit({{"command", "gbp"},
              {"out", out},
              {"mode", mode},
              {"layer", map.target.layer},
              {"target", {{"channel", map.target.at.c}, {"y", map.target.at.y}, {"x", map.target.at.x}}},
              {"activation", map.target.activation},
              {"width", rendered.width},
              {"height", rendered.height}});
    }
};

// ---------------------------------------------------------------------------------------------
// bench

struct BenchCmd {
    std::string gender_weights;
    std::string emotion_weights;
    std::size_t iters = 100;
    std::size_t warmup = 3;
    std::size_t input = 48;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("bench", "Latency of the two-model pass and of each architecture alone");
        cmd->add_option("--gender-weights", gender_weights, "Default: freshly initialized 2-class mini-Xception");
        cmd->add_option("--emotion-weights", emotion_weights, "Default: freshly initialized 7-class mini-Xception");
        cmd->add_option("--iters", iters, "Measured iterations (at least 10)")->capture_default_str();
        cmd->add_option("--warmup", warmup, "Unmeasured warm-up iterations (at least 3)")->capture_default_str();
        cmd->add_option("--input", input, "Input size for the per-architecture timings")->capture_default_str();
        cmd->callback([this] { run(); });
    }

    void run() const {
        const rtcnn::Model gender = gender_weights.empty() ? rtcnn::build_mini_xception(2, 48, 1)
                                                           : rtcnn::load_weights(gender_weights);
        const rtcnn::Model emotion = emotion_weights.empty() ? rtcnn::build_mini_xception(7, 48, 2)
                                                             : rtcnn::load_weights(emotion_weights);
        const rtcnn::BenchmarkReport r = rtcnn::benchmark(gender, emotion, input, iters, warmup);
        const auto line = [](const char* name, const rtcnn::LatencyStats& s) {
            std::fprintf(stderr, "%-22s mean %10.1f us  std %9.1f  min %10.1f  max %10.1f  (n=%zu)\n", name, s.mean_us,
                         s.stddev_us, s.min_us, s.max_us, s.iterations);
        };
        line("gender+emotion pass", r.pipeline);
        line("mini-xception", r.mini);
        line("sequential-fully-cnn", r.sequential);
        std::fprintf(stderr, "classification only; face detection is not part of the timing\n");
        emit({{"command", "bench"},
              {"input", r.input_hw},
              {"warmup", r.warmup},
              {"pipeline", stats_json(r.pipeline)},
              {"mini_xception", stats_json(r.mini)},
              {"sequential_fully_cnn", stats_json(r.sequential)},
              {"mini_faster", r.mini.mean_us < r.sequential.mean_us},
              {"includes_face_detection", false}});
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Real-time CNN engine for gender and emotion classification"};
    app.set_version_flag("--version", "rtcnn 0.1.0");
    app.require_subcommand(1);

    ParamsCmd params;
    TrainCmd train;
    EvalCmd eval;
    ClassifyCmd classify;
    GbpCmd gbp;
    BenchCmd bench;
    params.add(app);
    train.add(app);
    eval.add(app);
    classify.add(app);
    gbp.add(app);
    bench.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        const auto parsed = app.get_subcommands();
        std::cerr << '\n' << (parsed.empty() ? app.help() : parsed.front()->help());
        return kUsage;
    } catch (const rtcnn::Error& e) {
        std::fprintf(stderr, "error (%s): %s\n", category_name(e.category()), e.what());
        return exit_code(e.category());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return kInternal;
    }
    return kOk;
}
