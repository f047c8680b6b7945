// mtcnn: detect, train, eval, bench, synth and compare from the command line.

#include "mtcnn/eval.hpp"
#include "mtcnn/haar.hpp"
#include "mtcnn/imageio.hpp"
#include "mtcnn/nets.hpp"
#include "mtcnn/pipeline.hpp"
#include "mtcnn/synth.hpp"
#include "mtcnn/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace fs = std::filesystem;
using namespace mtcnn;

namespace {

// Errors that map to exit code 2: unreadable images, weights or models.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_text_atomic(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out << text;
        if (!out) {
            throw std::runtime_error("cannot write " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        if (!cur.empty()) {
            out.push_back(cur);
        }
    }
    return out;
}

std::array<float, 3> parse_thresholds(const std::string& s)
{
    const auto parts = split(s, ',');
    if (parts.size() != 3) {
        throw CLI::ValidationError("--thresholds", "expected three comma-separated values");
    }
    std::array<float, 3> t{};
    for (int i = 0; i < 3; ++i) {
        t[i] = std::stof(parts[i]);
    }
    return t;
}

WeightStore load_weight_list(const std::string& list)
{
    WeightStore all;
    for (const auto& path : split(list, ',')) {
        try {
            all.merge(load_weights(path));
        } catch (const WeightError& e) {
            throw InputError(e.what());
        }
    }
    return all;
}

Image load_image(const fs::path& path)
{
    try {
        return read_pnm(path);
    } catch (const PnmError& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

HaarCascadeModel load_model(const std::string& path)
{
    try {
        return load_cascade(path);
    } catch (const std::runtime_error& e) {
        throw InputError(e.what());
    }
}

// The configured detector, either the three-stage cascade or the Haar baseline.
struct Detector {
    std::optional<CascadeNets> nets;
    std::optional<HaarCascadeModel> haar;
    CascadeConfig cfg;

    PipelineResult run(const Image& image) const
    {
        if (nets) {
            return detect(image, *nets, cfg);
        }
        PipelineResult r;
        const auto t0 = std::chrono::steady_clock::now();
        r.detections = detect_haar(image, *haar);
        r.seconds[0] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        r.counts = {r.detections.size(), r.detections.size(), r.detections.size()};
        return r;
    }
};

struct DetectorOptions {
    std::string detector = "mtcnn";
    std::string weights;
    std::string model;
    float min_face = 20.0f;
    float factor = 0.709f;
    std::string thresholds = "0.6,0.7,0.7";

    void add_to(CLI::App* app)
    {
        app->add_option("--detector", detector, "Detector to run")
            ->check(CLI::IsMember({"mtcnn", "haar"}))
            ->capture_default_str();
        app->add_option("--weights", weights, "Comma-separated weight files, merged (mtcnn)")->capture_default_str();
        app->add_option("--model", model, "Cascade model file (haar)")->capture_default_str();
        app->add_option("--min-face", min_face, "Smallest face size in pixels")->capture_default_str();
        app->add_option("--factor", factor, "Pyramid scale factor")->capture_default_str();
        app->add_option("--thresholds", thresholds, "Stage thresholds t1,t2,t3")->capture_default_str();
    }

    Detector build() const
    {
        Detector d;
        d.cfg.thresholds = parse_thresholds(thresholds);
        d.cfg.pyramid.min_face_size = min_face;
        d.cfg.pyramid.scale_factor = factor;
        d.cfg.validate();
        if (detector == "haar") {
            if (model.empty()) {
                throw CLI::ValidationError("--model", "required with --detector haar");
            }
            d.haar = load_model(model);
        } else {
            if (weights.empty()) {
                throw CLI::ValidationError("--weights", "required with --detector mtcnn");
            }
            try {
                d.nets.emplace(load_weight_list(weights));
            } catch (const WeightError& e) {
                throw InputError(e.what());
            }
        }
        return d;
    }
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads; results are stored by index by the caller.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn fn)
{
    const auto workers = static_cast<std::size_t>(std::max(1, jobs));
    if (workers == 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) {
                        error = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

std::vector<fs::path> list_images(const fs::path& dir)
{
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---- detect ----------------------------------------------------------------

struct DetectArgs {
    std::vector<std::string> images;
    std::string dir;
    DetectorOptions det;
    std::string out_json = "-";
    std::string out_overlay;
    bool verbose = false;
    int jobs = 1;
};

int run_detect(const DetectArgs& a)
{
    std::vector<fs::path> paths(a.images.begin(), a.images.end());
    if (!a.dir.empty()) {
        const auto more = list_images(a.dir);
        paths.insert(paths.end(), more.begin(), more.end());
    }
    if (paths.empty()) {
        throw CLI::ValidationError("--image/--dir", "no input images");
    }
    const Detector detector = a.det.build();

    std::vector<Image> images(paths.size());
    std::vector<PipelineResult> results(paths.size());
    parallel_for(paths.size(), a.jobs, [&](std::size_t i) {
        images[i] = load_image(paths[i]);
        results[i] = detector.run(images[i]);
    });

    std::vector<ImageResult> out;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const auto& r = results[i];
        if (a.verbose) {
            std::fprintf(stderr, "%s: pnet raw %zu, stage1 %zu (%.2f ms), stage2 %zu (%.2f ms), stage3 %zu (%.2f ms)\n",
                         paths[i].string().c_str(), r.stage1_raw, r.counts[0], r.seconds[0] * 1e3, r.counts[1],
                         r.seconds[1] * 1e3, r.counts[2], r.seconds[2] * 1e3);
        }
        if (!a.out_overlay.empty()) {
            const fs::path dst = fs::path(a.out_overlay) / (paths[i].stem().string() + ".overlay.ppm");
            fs::create_directories(a.out_overlay);
            write_pnm(draw_overlay(to_rgb(images[i]), r.detections), dst);
        }
        out.push_back({paths[i].string(), r.detections});
    }
    // one object for a single --image, an array otherwise
    const std::string json = (a.dir.empty() && out.size() == 1) ? detections_to_json(out.front())
                                                                 : detections_to_json(std::span<const ImageResult>(out));
    if (a.out_json == "-") {
        std::cout << json << '\n';
    } else {
        write_text_atomic(a.out_json, json + "\n");
    }
    return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
    std::string stage = "pnet";
    int synth_n = 2000;
    std::uint64_t seed = 42;
    int epochs = 30;
    float lr = 0;
    float ohem_ratio = 0.7f;
    int batch = 64;
    float momentum = 0.9f;
    std::string out_weights;
    std::string loss_csv;
    bool verbose = false;
};

float default_lr(Stage s)
{
    // the fully connected stages diverge at the P-Net rate
    return s == Stage::PNet ? 0.05f : 0.01f;
}

int run_train(const TrainArgs& a)
{
    const Stage stage = parse_stage(a.stage);
    const NetworkSpec spec = build_network(stage);
    TrainConfig cfg;
    cfg.learning_rate = a.lr > 0 ? a.lr : default_lr(stage);
    cfg.batch_size = a.batch;
    cfg.epochs = a.epochs;
    cfg.ohem_keep_ratio = a.ohem_ratio;
    cfg.rng_seed = a.seed;
    cfg.momentum = a.momentum;
    cfg.validate();

    const auto data = synth_dataset(a.synth_n, spec.input_size, a.seed);
    const auto res = train_stage(spec, init_weights(spec, a.seed), data, cfg, LossWeights::defaults_for(stage),
                                 [&](const EpochLosses& e) {
                                     if (a.verbose) {
                                         std::fprintf(stderr, "epoch %d det %.5f box %.5f landmark %.5f\n", e.epoch,
                                                      e.det, e.box, e.landmark);
                                     }
                                 });
    save_weights(res.weights, a.out_weights);
    if (!a.loss_csv.empty()) {
        write_text_atomic(a.loss_csv, loss_history_csv(res.history));
    }
    std::printf("%s trained on %d samples, %d epochs, accuracy %.4f\n", stage_name(stage).c_str(), a.synth_n,
                a.epochs, classification_accuracy(spec, res.weights, data));
    return 0;
}

struct TrainHaarArgs {
    int positives = 800;
    int stages = 10;
    float detection_rate = 0.995f;
    float fp_rate = 0.5f;
    int negatives = 1500;
    int max_stumps = 60;
    int feature_step = 2;
    std::uint64_t seed = 5;
    std::string out_model;
    bool verbose = false;
};

int run_train_haar(const TrainHaarArgs& a)
{
    const auto set = synth_haar_set(a.positives, 0, a.seed);
    const auto pool = enumerate_features(a.feature_step);
    CascadeTargets t;
    t.min_detection_rate = a.detection_rate;
    t.max_false_positive_rate = a.fp_rate;
    t.max_stages = a.stages;
    t.max_stumps_per_stage = a.max_stumps;
    t.max_negatives_per_stage = static_cast<std::size_t>(a.negatives);
    std::vector<StageReport> report;
    const auto model = build_cascade(set.positives, synth_negative_source(a.seed + 1), pool, t, &report);
    if (a.verbose) {
        for (std::size_t k = 0; k < report.size(); ++k) {
            std::fprintf(stderr, "stage %zu: %zu stumps, detection %.4f, false positives %.4f of %zu\n", k,
                         report[k].stumps, report[k].detection_rate, report[k].false_positive_rate,
                         report[k].negatives_in);
        }
    }
    save_cascade(model, a.out_model);
    std::printf("haar cascade with %zu stages written to %s\n", model.stages.size(), a.out_model.c_str());
    return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string detections_json;
    DetectorOptions det;
    bool run_detector = false;
    std::string truth;
    float iou = 0.5f;
    std::string out_csv;
    std::string matrix;
    int jobs = 1;
};

ConfusionMatrix parse_matrix(const std::string& s)
{
    const auto parts = split(s, ',');
    if (parts.size() != 4) {
        throw CLI::ValidationError("--matrix", "expected tp,fp,fn,tn");
    }
    std::array<std::uint64_t, 4> v{};
    for (int i = 0; i < 4; ++i) {
        std::size_t used = 0;
        const long long x = std::stoll(parts[i], &used);
        if (used != parts[i].size() || x < 0) {
            throw CLI::ValidationError("--matrix", "counts must be non-negative integers");
        }
        v[i] = static_cast<std::uint64_t>(x);
    }
    return {v[0], v[1], v[2], v[3]};
}

const ImageResult* find_result(const std::vector<ImageResult>& results, const std::string& image)
{
    for (const auto& r : results) {
        if (r.image == image) {
            return &r;
        }
    }
    // fall back to the file name when the paths were written relative to another directory
    const auto name = fs::path(image).filename();
    for (const auto& r : results) {
        if (fs::path(r.image).filename() == name) {
            return &r;
        }
    }
    return nullptr;
}

int run_eval(const EvalArgs& a)
{
    ConfusionMatrix cm;
    if (!a.matrix.empty()) {
        cm = parse_matrix(a.matrix);
    } else {
        if (a.truth.empty()) {
            throw CLI::ValidationError("--truth", "required unless --matrix is given");
        }
        const auto truth = read_manifest(a.truth);
        const fs::path base = fs::path(a.truth).parent_path();
        std::vector<std::vector<Detection>> dets(truth.size());
        if (!a.detections_json.empty()) {
            std::ifstream in(a.detections_json, std::ios::binary);
            if (!in) {
                throw InputError("cannot open " + a.detections_json);
            }
            std::ostringstream ss;
            ss << in.rdbuf();
            std::vector<ImageResult> results;
            try {
                results = parse_detections_json(ss.str());
            } catch (const std::exception& e) {
                throw InputError(a.detections_json + ": " + e.what());
            }
            for (std::size_t i = 0; i < truth.size(); ++i) {
                if (const auto* r = find_result(results, truth[i].image)) {
                    dets[i] = r->detections;
                }
            }
        } else if (a.run_detector) {
            const Detector detector = a.det.build();
            parallel_for(truth.size(), a.jobs, [&](std::size_t i) {
                const fs::path p = fs::path(truth[i].image).is_absolute() ? fs::path(truth[i].image)
                                                                          : base / truth[i].image;
                dets[i] = detector.run(load_image(p)).detections;
            });
        } else {
            throw CLI::ValidationError("eval", "give --detections-json, --detector or --matrix");
        }
        for (std::size_t i = 0; i < truth.size(); ++i) {
            cm.add_image(match_detections(dets[i], truth[i].boxes, a.iou), truth[i].boxes.size(), dets[i].size());
        }
    }
    const MetricsReport rep = compute_metrics(cm);
    std::printf("tp %llu fp %llu fn %llu tn %llu\n", static_cast<unsigned long long>(cm.tp),
                static_cast<unsigned long long>(cm.fp), static_cast<unsigned long long>(cm.fn),
                static_cast<unsigned long long>(cm.tn));
    std::fputs(metrics_text(rep).c_str(), stdout);
    if (!a.out_csv.empty()) {
        write_text_atomic(a.out_csv, metrics_csv(rep));
    }
    return 0;
}

// ---- bench -----------------------------------------------------------------

struct BenchArgs {
    std::string image;
    DetectorOptions det;
    int iters = 10;
    std::string out_csv = "-";
};

double percentile(std::vector<double> v, double q)
{
    std::sort(v.begin(), v.end());
    // nearest rank
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

int run_bench(const BenchArgs& a)
{
    const Image image = load_image(a.image);
    DetectorOptions opts = a.det;
    opts.detector = "mtcnn";
    const Detector detector = opts.build();
    std::array<std::vector<double>, 4> ms;
    for (int i = 0; i < a.iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const PipelineResult r = detector.run(image);
        const double total = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        for (int s = 0; s < 3; ++s) {
            ms[s].push_back(r.seconds[s] * 1e3);
        }
        ms[3].push_back(total);
    }
    std::ostringstream os;
    os << "stage,mean_ms,p50_ms,p95_ms\n";
    const char* names[] = {"stage1", "stage2", "stage3", "total"};
    char buf[160];
    for (int s = 0; s < 4; ++s) {
        double mean = 0;
        for (double v : ms[s]) {
            mean += v;
        }
        mean /= static_cast<double>(ms[s].size());
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f\n", names[s], mean, percentile(ms[s], 0.5),
                      percentile(ms[s], 0.95));
        os << buf;
    }
    if (a.out_csv == "-") {
        std::cout << os.str();
    } else {
        write_text_atomic(a.out_csv, os.str());
    }
    return 0;
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
    int n = 10;
    std::uint64_t seed = 1;
    std::string out_dir;
    int width = 128;
    int height = 128;
};

int run_synth(const SynthArgs& a)
{
    SceneConfig cfg;
    cfg.width = a.width;
    cfg.height = a.height;
    const auto scenes = synth_scenes(a.n, a.seed, cfg);
    fs::create_directories(a.out_dir);
    std::vector<GroundTruth> manifest;
    char name[64];
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        std::snprintf(name, sizeof name, "synth_%04zu.ppm", i);
        write_pnm(scenes[i].image, fs::path(a.out_dir) / name);
        GroundTruth gt{name, {}};
        for (const auto& f : scenes[i].faces) {
            gt.boxes.push_back(f.box);
        }
        manifest.push_back(std::move(gt));
    }
    write_text_atomic(fs::path(a.out_dir) / "manifest.txt", format_manifest(manifest));
    std::printf("wrote %d images and manifest.txt to %s\n", a.n, a.out_dir.c_str());
    return 0;
}

// ---- compare ---------------------------------------------------------------

struct CompareArgs {
    std::vector<std::string> entries;
    bool csv = false;
};

// name=<percent> or name=<metrics csv written by eval>
NamedResult parse_entry(const std::string& entry)
{
    const auto eq = entry.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw CLI::ValidationError("--result", "expected name=value: " + entry);
    }
    NamedResult r{entry.substr(0, eq), 0.0};
    std::string value = entry.substr(eq + 1);
    if (fs::is_regular_file(value)) {
        std::ifstream in(value);
        std::string header;
        std::string row;
        std::getline(in, header);
        std::getline(in, row);
        const auto names = split(header, ',');
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream rs(row);
        while (std::getline(rs, cell, ',')) {
            cells.push_back(cell);
        }
        cells.resize(names.size());
        MetricsReport m;
        for (std::size_t i = 0; i < names.size(); ++i) {
            std::optional<double> v;
            if (!cells[i].empty()) {
                v = std::stod(cells[i]);
            }
            if (names[i] == "precision") m.precision = v;
            else if (names[i] == "recall") m.recall = v;
            else if (names[i] == "specificity") m.specificity = v;
            else if (names[i] == "f1") m.f1 = v;
            else if (names[i] == "accuracy") m.accuracy = v;
        }
        r.value = m;
        return r;
    }
    if (!value.empty() && value.back() == '%') {
        value.pop_back();
    }
    try {
        std::size_t used = 0;
        r.value = std::stod(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
    } catch (const std::exception&) {
        throw CLI::ValidationError("--result", "not a percentage or metrics file: " + entry);
    }
    return r;
}

int run_compare(const CompareArgs& a)
{
    std::vector<NamedResult> rows;
    for (const auto& e : a.entries) {
        rows.push_back(parse_entry(e));
    }
    std::cout << compare_report(rows, a.csv ? ReportFormat::Csv : ReportFormat::Text);
    return 0;
}

// CLI11 only reads config files attached to the top-level app, so a subcommand's
// --config FILE is turned into ordinary flags here. Flags on the command line win;
// keys that are not flags of the subcommand are errors.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args)
{
    if (args.size() < 2) {
        return args;
    }
    const CLI::App* sub = app.get_subcommand_no_throw(args[1]);
    if (!sub) {
        return args;
    }
    std::optional<std::string> file;
    std::vector<std::string> rest;
    for (std::size_t i = 2; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 == args.size()) {
                throw std::runtime_error("--config needs a file");
            }
            file = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            file = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (!file) {
        return args;
    }
    if (!fs::is_regular_file(*file)) {
        throw std::runtime_error("cannot read config file " + *file);
    }
    auto given = [&](const std::string& flag) {
        return std::any_of(rest.begin(), rest.end(),
                           [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
    };
    std::vector<std::string> out{args[0], args[1]};
    for (const auto& item : CLI::ConfigINI().from_file(*file)) {
        const std::string key = item.fullname();
        const std::string flag = "--" + key;
        const CLI::Option* opt = sub->get_option_no_throw(flag);
        if (!opt || key == "config" || key == "help") {
            throw std::runtime_error(*file + ": unknown key '" + key + "' for " + args[1]);
        }
        if (given(flag)) {
            continue;
        }
        if (opt->get_expected_min() == 0) {
            const std::string v = item.inputs.empty() ? "true" : item.inputs.front();
            if (v == "true" || v == "1" || v == "on" || v == "yes") {
                out.push_back(flag);
            }
            continue;
        }
        for (const auto& v : item.inputs) {
            out.push_back(flag);
            out.push_back(v);
        }
    }
    out.insert(out.end(), rest.begin(), rest.end());
    return out;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Cascaded face detection: detect, train, evaluate"};
    app.require_subcommand(1);
    std::string config_path;  // consumed by expand_config before parsing

    DetectArgs detect_args;
    auto* detect_cmd = app.add_subcommand("detect", "Detect faces in PNM images");
    detect_cmd->add_option("--config", config_path, "key = value file with defaults for these flags");
    detect_cmd->add_option("--image", detect_args.images, "Input image (repeatable)");
    detect_cmd->add_option("--dir", detect_args.dir, "Directory of .ppm/.pgm images")->capture_default_str();
    detect_args.det.add_to(detect_cmd);
    detect_cmd->add_option("--out-json", detect_args.out_json, "Detections JSON ('-' for stdout)")
        ->capture_default_str();
    detect_cmd->add_option("--out-overlay", detect_args.out_overlay, "Directory for overlay images")
        ->capture_default_str();
    detect_cmd->add_flag("--verbose", detect_args.verbose, "Per-stage counts and timings on stderr");
    detect_cmd->add_option("--jobs", detect_args.jobs, "Images processed in parallel")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train one stage network on synthetic data");
    train_cmd->add_option("--config", config_path, "key = value file with defaults for these flags");
    train_cmd->add_option("--stage", train_args.stage, "pnet, rnet or onet")
        ->check(CLI::IsMember({"pnet", "rnet", "onet"}))
        ->capture_default_str();
    train_cmd->add_option("--synth-n", train_args.synth_n, "Synthetic training windows")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    train_cmd->add_option("--seed", train_args.seed, "Seed for data, init and shuffling")->capture_default_str();
    train_cmd->add_option("--epochs", train_args.epochs, "Epochs")->check(CLI::NonNegativeNumber)->capture_default_str();
    train_cmd->add_option("--lr", train_args.lr, "Learning rate; 0 picks 0.05 for pnet, 0.01 otherwise")
        ->capture_default_str();
    train_cmd->add_option("--ohem-ratio", train_args.ohem_ratio, "Fraction of hardest classification samples kept")
        ->capture_default_str();
    train_cmd->add_option("--batch", train_args.batch, "Mini-batch size")->capture_default_str();
    train_cmd->add_option("--momentum", train_args.momentum, "SGD momentum (0 for plain SGD)")->capture_default_str();
    train_cmd->add_option("--out-weights", train_args.out_weights, "Output weight file")->required();
    train_cmd->add_option("--loss-csv", train_args.loss_csv, "Per-epoch loss CSV")->capture_default_str();
    train_cmd->add_flag("--verbose", train_args.verbose, "Per-epoch losses on stderr");

    TrainHaarArgs haar_args;
    auto* haar_cmd = app.add_subcommand("train-haar", "Train the Haar cascade baseline on synthetic data");
    haar_cmd->add_option("--config", config_path, "key = value file with defaults for these flags");
    haar_cmd->add_option("--positives", haar_args.positives, "Face windows")->capture_default_str();
    haar_cmd->add_option("--stages", haar_args.stages, "Maximum stages")->capture_default_str();
    haar_cmd->add_option("--detection-rate", haar_args.detection_rate, "Per-stage minimum detection rate")
        ->capture_default_str();
    haar_cmd->add_option("--fp-rate", haar_args.fp_rate, "Per-stage maximum false-positive rate")
        ->capture_default_str();
    haar_cmd->add_option("--negatives", haar_args.negatives, "Negatives per stage")->capture_default_str();
    haar_cmd->add_option("--max-stumps", haar_args.max_stumps, "Maximum stumps per stage")->capture_default_str();
    haar_cmd->add_option("--feature-step", haar_args.feature_step, "Feature position and size step")
        ->capture_default_str();
    haar_cmd->add_option("--seed", haar_args.seed, "Seed")->capture_default_str();
    haar_cmd->add_option("--out-model", haar_args.out_model, "Output cascade model")->required();
    haar_cmd->add_flag("--verbose", haar_args.verbose, "Per-stage report on stderr");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Match detections against ground truth and report metrics");
    eval_cmd->add_option("--config", config_path, "key = value file with defaults for these flags");
    eval_cmd->add_option("--detections-json", eval_args.detections_json, "Detections written by detect")
        ->capture_default_str();
    eval_args.det.add_to(eval_cmd);
    eval_cmd->add_option("--truth", eval_args.truth, "Ground-truth manifest")->capture_default_str();
    eval_cmd->add_option("--iou", eval_args.iou, "Match threshold")->capture_default_str();
    eval_cmd->add_option("--out-csv", eval_args.out_csv, "Metrics CSV")->capture_default_str();
    eval_cmd->add_option("--matrix", eval_args.matrix, "tp,fp,fn,tn counts to score directly")->capture_default_str();
    eval_cmd->add_option("--jobs", eval_args.jobs, "Images processed in parallel")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("bench", "Per-stage latency of the cascade");
    bench_cmd->add_option("--config", config_path, "key = value file with defaults for these flags");
    bench_cmd->add_option("--image", bench_args.image, "Input image")->required();
    bench_args.det.add_to(bench_cmd);
    bench_cmd->add_option("--iters", bench_args.iters, "Runs")->check(CLI::PositiveNumber)->capture_default_str();
    bench_cmd->add_option("--out-csv", bench_args.out_csv, "CSV output ('-' for stdout)")->capture_default_str();

    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth", "Write synthetic scenes and their manifest");
    synth_cmd->add_option("--config", config_path, "key = value file with defaults for these flags");
    synth_cmd->add_option("--n", synth_args.n, "Images")->check(CLI::NonNegativeNumber)->capture_default_str();
    synth_cmd->add_option("--seed", synth_args.seed, "Seed")->capture_default_str();
    synth_cmd->add_option("--out-dir", synth_args.out_dir, "Output directory")->required();
    synth_cmd->add_option("--width", synth_args.width, "Image width")->check(CLI::Range(48, 4096))->capture_default_str();
    synth_cmd->add_option("--height", synth_args.height, "Image height")
        ->check(CLI::Range(48, 4096))
        ->capture_default_str();

    CompareArgs compare_args;
    auto* compare_cmd = app.add_subcommand("compare", "Side-by-side detector table");
    compare_cmd->add_option("--result", compare_args.entries, "name=<percent> or name=<eval metrics CSV>")
        ->required();
    compare_cmd->add_flag("--csv", compare_args.csv, "CSV instead of aligned text");

    std::vector<std::string> args(argv, argv + argc);
    try {
        args = expand_config(app, std::move(args));
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    std::vector<const char*> cargs;
    for (const auto& a : args) {
        cargs.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*detect_cmd) {
            return run_detect(detect_args);
        }
        if (*train_cmd) {
            return run_train(train_args);
        }
        if (*haar_cmd) {
            return run_train_haar(haar_args);
        }
        if (*eval_cmd) {
            eval_args.run_detector = eval_cmd->count("--detector") > 0 || !eval_args.det.weights.empty() ||
                                     !eval_args.det.model.empty();
            return run_eval(eval_args);
        }
        if (*bench_cmd) {
            return run_bench(bench_args);
        }
        if (*synth_cmd) {
            return run_synth(synth_args);
        }
        if (*compare_cmd) {
            return run_compare(compare_args);
        }
    } catch (const InputError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const CLI::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
