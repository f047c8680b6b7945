#include "mtcnn/eval.hpp"
#include "mtcnn/imageio.hpp"
#include "mtcnn/nets.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

using namespace mtcnn;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

fs::path scratch()
{
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / ("cli_test_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Run run(const std::string& args)
{
    const fs::path out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
    const std::string cmd = std::string(MTCNN_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return {WEXITSTATUS(status), slurp(out), slurp(err)};
}

std::string q(const fs::path& p)
{
    return "'" + p.string() + "'";
}

fs::path zero_weight_file()
{
    const fs::path p = scratch() / "zero.mtw";
    if (!fs::exists(p)) {
        WeightStore w;
        for (Stage s : {Stage::PNet, Stage::RNet, Stage::ONet}) w.merge(zero_weights(build_network(s)));
        save_weights(w, p);
    }
    return p;
}

fs::path random_weight_file()
{
    const fs::path p = scratch() / "random.mtw";
    if (!fs::exists(p)) {
        WeightStore w;
        for (Stage s : {Stage::PNet, Stage::RNet, Stage::ONet}) w.merge(init_weights(build_network(s), 3));
        save_weights(w, p);
    }
    return p;
}

fs::path blank_image()
{
    const fs::path p = scratch() / "blank.ppm";
    if (!fs::exists(p)) write_pnm(Image(96, 80, 3, 128), p);
    return p;
}

std::size_t count_lines(const std::string& s)
{
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST_CASE("detect on a blank image with zero weights finds nothing")
{
    const fs::path json = scratch() / "blank.json";
    const Run r = run("detect --image " + q(blank_image()) + " --weights " + q(zero_weight_file()) + " --out-json " +
                      q(json));
    CHECK(r.code == 0);
    const auto results = parse_detections_json(slurp(json));
    REQUIRE(results.size() == 1);
    CHECK(results[0].detections.empty());
    CHECK(results[0].image == blank_image().string());

    // stdout by default
    const Run s = run("detect --image " + q(blank_image()) + " --weights " + q(zero_weight_file()));
    CHECK(s.code == 0);
    CHECK(parse_detections_json(s.out).size() == 1);
}

TEST_CASE("detect error paths exit 2 with one stderr line")
{
    const Run missing = run("detect --image " + q(blank_image()) + " --weights " + q(scratch() / "nope.mtw"));
    CHECK(missing.code == 2);
    CHECK(count_lines(missing.err) == 1);
    CHECK(missing.out.empty());

    const fs::path junk = scratch() / "junk.ppm";
    std::ofstream(junk) << "P7 nonsense";
    const Run bad_image = run("detect --image " + q(junk) + " --weights " + q(zero_weight_file()));
    CHECK(bad_image.code == 2);
    CHECK(count_lines(bad_image.err) == 1);

    // a P-Net-only store cannot drive the cascade
    const fs::path partial = scratch() / "pnet_only.mtw";
    save_weights(zero_weights(build_pnet()), partial);
    const Run incomplete = run("detect --image " + q(blank_image()) + " --weights " + q(partial));
    CHECK(incomplete.code == 2);

    // no partial JSON is left behind
    const fs::path json = scratch() / "never.json";
    CHECK(run("detect --image " + q(junk) + " --weights " + q(zero_weight_file()) + " --out-json " + q(json)).code ==
          2);
    CHECK_FALSE(fs::exists(json));
}

TEST_CASE("detect over a directory writes an array and overlays")
{
    const fs::path dir = scratch() / "scenes";
    REQUIRE(run("synth --n 3 --seed 9 --out-dir " + q(dir)).code == 0);
    const fs::path json = scratch() / "dir.json", overlays = scratch() / "overlays";
    const Run r = run("detect --dir " + q(dir) + " --weights " + q(random_weight_file()) +
                      " --thresholds 0.3,0.3,0.3 --jobs 2 --verbose --out-json " + q(json) + " --out-overlay " +
                      q(overlays));
    CHECK(r.code == 0);
    const auto results = parse_detections_json(slurp(json));
    REQUIRE(results.size() == 3);
    for (std::size_t i = 0; i < results.size(); ++i) {
        CHECK(fs::path(results[i].image).filename().string() == "synth_000" + std::to_string(i) + ".ppm");
        for (const auto& d : results[i].detections) {
            REQUIRE(d.landmarks.has_value());
        }
    }
    CHECK(count_lines(r.err) == 3);
    CHECK(fs::exists(overlays / "synth_0000.overlay.ppm"));
}

TEST_CASE("train with zero epochs writes initial weights and a headered csv")
{
    const fs::path w = scratch() / "e0.mtw", csv = scratch() / "e0.csv";
    const Run r = run("train --stage pnet --synth-n 20 --seed 7 --epochs 0 --out-weights " + q(w) + " --loss-csv " +
                      q(csv));
    CHECK(r.code == 0);
    CHECK(slurp(csv) == "epoch,det_loss,box_loss,landmark_loss,total\n");
    CHECK(load_weights(w) == init_weights(build_pnet(), 7));
}

TEST_CASE("train is deterministic per seed")
{
    const fs::path a = scratch() / "a.mtw", b = scratch() / "b.mtw", c = scratch() / "c.mtw";
    const fs::path ca = scratch() / "a.csv", cb = scratch() / "b.csv";
    const std::string common = "train --stage rnet --synth-n 60 --epochs 2 --batch 16 ";
    REQUIRE(run(common + "--seed 5 --out-weights " + q(a) + " --loss-csv " + q(ca)).code == 0);
    REQUIRE(run(common + "--seed 5 --out-weights " + q(b) + " --loss-csv " + q(cb)).code == 0);
    REQUIRE(run(common + "--seed 6 --out-weights " + q(c)).code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(slurp(ca) == slurp(cb));
    CHECK(count_lines(slurp(ca)) == 3);
    CHECK(slurp(a) != slurp(c));
}

TEST_CASE("train rejects bad settings without leaving files")
{
    const fs::path w = scratch() / "bad.mtw";
    CHECK(run("train --stage pnet --synth-n 10 --epochs 1 --ohem-ratio 2 --out-weights " + q(w)).code != 0);
    CHECK(run("train --stage qnet --synth-n 10 --epochs 1 --out-weights " + q(w)).code != 0);
    CHECK(run("train --stage pnet --synth-n 10").code != 0);
    CHECK_FALSE(fs::exists(w));
}

TEST_CASE("eval scores a given matrix")
{
    const fs::path csv = scratch() / "table.csv";
    const Run r = run("eval --matrix 17620,335,30,280 --out-csv " + q(csv));
    CHECK(r.code == 0);
    for (const char* v : {"98.13%", "99.83%", "45.53%", "98.97%", "98.00%"}) {
        CHECK(r.out.find(v) != std::string::npos);
    }
    CHECK(slurp(csv) == "precision,recall,specificity,f1,accuracy\n98.13,99.83,45.53,98.97,98.00\n");
    CHECK(run("eval --matrix 1,2,3").code != 0);
    CHECK(run("eval --matrix 1,2,3,-4").code != 0);
}

TEST_CASE("eval matches detection files against a manifest")
{
    const fs::path truth = scratch() / "truth.txt", perfect = scratch() / "perfect.json";
    std::vector<GroundTruth> gt{{"x.ppm", {{10, 10, 40, 40}}}, {"y.ppm", {{5, 5, 30, 30}, {50, 50, 80, 80}}}};
    std::ofstream(truth) << format_manifest(gt);
    std::vector<ImageResult> res;
    for (const auto& g : gt) {
        ImageResult ir{g.image, {}};
        for (const auto& b : g.boxes) ir.detections.push_back({b, 0.9f, {}});
        res.push_back(ir);
    }
    std::ofstream(perfect) << detections_to_json(std::span<const ImageResult>(res));
    const Run r = run("eval --detections-json " + q(perfect) + " --truth " + q(truth));
    CHECK(r.code == 0);
    CHECK(r.out.find("tp 3 fp 0 fn 0 tn 0") != std::string::npos);
    CHECK(r.out.find("precision    100.00%") != std::string::npos);
    CHECK(r.out.find("recall       100.00%") != std::string::npos);

    const fs::path empty_truth = scratch() / "empty.txt", empty_json = scratch() / "empty.json";
    std::ofstream(empty_truth) << "";
    std::ofstream(empty_json) << "[]";
    const Run e = run("eval --detections-json " + q(empty_json) + " --truth " + q(empty_truth));
    CHECK(e.code == 0);
    CHECK(e.out.find("undefined") != std::string::npos);

    CHECK(run("eval --detections-json " + q(scratch() / "missing.json") + " --truth " + q(truth)).code == 2);
    CHECK(run("eval --truth " + q(truth)).code != 0);
}

TEST_CASE("bench reports every stage with positive timings")
{
    const fs::path scene = scratch() / "bench_scene";
    REQUIRE(run("synth --n 1 --seed 4 --out-dir " + q(scene)).code == 0);
    const Run r = run("bench --image " + q(scene / "synth_0000.ppm") + " --weights " + q(random_weight_file()) +
                      " --thresholds 0.3,0.3,0.3 --iters 2");
    CHECK(r.code == 0);
    std::istringstream in(r.out);
    std::string line;
    std::getline(in, line);
    CHECK(line == "stage,mean_ms,p50_ms,p95_ms");
    int rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        std::istringstream cells(line);
        std::string name, v;
        std::getline(cells, name, ',');
        while (std::getline(cells, v, ',')) {
            CHECK(std::stod(v) > 0.0);
        }
    }
    CHECK(rows == 4);
    CHECK(run("bench --image " + q(blank_image()) + " --weights " + q(random_weight_file()) + " --iters 0").code !=
          0);
}

TEST_CASE("synth writes images and a manifest deterministically")
{
    const fs::path a = scratch() / "sa", b = scratch() / "sb";
    REQUIRE(run("synth --n 5 --seed 12 --out-dir " + q(a)).code == 0);
    REQUIRE(run("synth --n 5 --seed 12 --out-dir " + q(b)).code == 0);
    const auto manifest = read_manifest(a / "manifest.txt");
    CHECK(manifest.size() == 5);
    for (const auto& m : manifest) {
        CHECK(slurp(a / m.image) == slurp(b / m.image));
        const Image img = read_pnm(a / m.image);
        CHECK_FALSE(m.boxes.empty());
        for (const auto& box : m.boxes) {
            CHECK(box.x1 >= 0);
            CHECK(box.y1 >= 0);
            CHECK(box.x2 <= img.width);
            CHECK(box.y2 <= img.height);
        }
    }
    CHECK(slurp(a / "manifest.txt") == slurp(b / "manifest.txt"));
}

TEST_CASE("config files supply defaults that flags override")
{
    const fs::path cfg = scratch() / "synth.cfg", dir = scratch() / "cfg_out", dir2 = scratch() / "cfg_out2";
    std::ofstream(cfg) << "# three small scenes\nn = 3\nseed = 8\nwidth = 64\n";
    REQUIRE(run("synth --config " + q(cfg) + " --out-dir " + q(dir)).code == 0);
    CHECK(read_manifest(dir / "manifest.txt").size() == 3);
    CHECK(read_pnm(dir / "synth_0000.ppm").width == 64);

    REQUIRE(run("synth --config " + q(cfg) + " --n 2 --out-dir " + q(dir2)).code == 0);
    CHECK(read_manifest(dir2 / "manifest.txt").size() == 2);

    // required flags may come from the file too
    const fs::path full = scratch() / "full.cfg", dir3 = scratch() / "cfg_out3";
    std::ofstream(full) << "n = 1\nout-dir = " << dir3.string() << "\n";
    REQUIRE(run("synth --config=" + q(full)).code == 0);
    CHECK(read_manifest(dir3 / "manifest.txt").size() == 1);
    CHECK(run("synth --config " + q(scratch() / "absent.cfg") + " --out-dir " + q(dir3)).code != 0);

    const fs::path bad = scratch() / "bad.cfg";
    std::ofstream(bad) << "n = 3\nbogus = 1\n";
    CHECK(run("synth --config " + q(bad) + " --out-dir " + q(scratch() / "never")).code != 0);
}

TEST_CASE("unknown flags and subcommands are rejected")
{
    CHECK(run("synth --n 1 --bogus --out-dir " + q(scratch() / "x")).code != 0);
    CHECK(run("frobnicate").code != 0);
    CHECK(run("").code != 0);
    const Run help = run("detect --help");
    CHECK(help.code == 0);
    CHECK(help.out.find("--min-face") != std::string::npos);
    CHECK(help.out.find("20") != std::string::npos);
}

TEST_CASE("compare renders named results")
{
    const Run r = run("compare --result Viola-Jones=74.38 --result 'Haar Cascade=94%' --result MTCNN=99.95 --csv");
    CHECK(r.code == 0);
    CHECK(r.out == "Algorithm,Accuracy\nViola-Jones,74.38%\nHaar Cascade,94%\nMTCNN,99.95%\n");
    CHECK(run("compare --result nonsense").code != 0);
}

TEST_CASE("cleanup")
{
    fs::remove_all(scratch());
    CHECK_FALSE(fs::exists(scratch()));
}
