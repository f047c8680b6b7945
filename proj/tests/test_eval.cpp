#include "mtcnn/eval.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

using namespace mtcnn;

namespace {

Detection det(Box b, float score)
{
    return {b, score, {}};
}

// Exhaustive reference for the greedy rule, written the slow way.
MatchCounts slow_match(const std::vector<Detection>& dets, const std::vector<Box>& truths, float t)
{
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // selection sort by (score desc, index asc)
    for (std::size_t i = 0; i < order.size(); ++i) {
        std::size_t best = i;
        for (std::size_t j = i + 1; j < order.size(); ++j) {
            const auto a = order[j], b = order[best];
            if (dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b)) best = j;
        }
        std::swap(order[i], order[best]);
    }
    std::vector<bool> used(truths.size(), false);
    MatchCounts m;
    for (auto d : order) {
        int pick = -1;
        float best = -1;
        for (std::size_t t_i = 0; t_i < truths.size(); ++t_i) {
            if (used[t_i]) continue;
            const float o = iou(dets[d].box, truths[t_i]);
            if (o > best) {
                best = o;
                pick = static_cast<int>(t_i);
            }
        }
        if (pick >= 0 && best >= t) {
            used[static_cast<std::size_t>(pick)] = true;
            ++m.tp;
        } else {
            ++m.fp;
        }
    }
    m.fn = truths.size() - m.tp;
    return m;
}

Box random_box(std::mt19937_64& rng)
{
    std::uniform_int_distribution<int> pos(0, 60), size(4, 30);
    const float x = static_cast<float>(pos(rng)), y = static_cast<float>(pos(rng));
    return {x, y, x + static_cast<float>(size(rng)), y + static_cast<float>(size(rng))};
}

}  // namespace

TEST_CASE("confusion matrix metrics reproduce the published table")
{
    const MetricsReport r = compute_metrics({17620, 335, 30, 280});
    REQUIRE(r.precision);
    REQUIRE(r.recall);
    REQUIRE(r.specificity);
    REQUIRE(r.f1);
    REQUIRE(r.accuracy);
    CHECK(std::fabs(*r.precision - 98.13) <= 0.01);
    CHECK(std::fabs(*r.recall - 99.83) <= 0.01);
    CHECK(std::fabs(*r.specificity - 45.53) <= 0.01);
    CHECK(std::fabs(*r.f1 - 98.97) <= 0.01);
    CHECK(std::fabs(*r.accuracy - 98.00) <= 0.01);
    // exact fractions
    CHECK(*r.precision == doctest::Approx(100.0 * 17620 / 17955));
    CHECK(*r.specificity == doctest::Approx(100.0 * 280 / 615));
    CHECK(*r.f1 == doctest::Approx(100.0 * 35240 / 35605));

    const std::string csv = metrics_csv(r);
    CHECK(csv == "precision,recall,specificity,f1,accuracy\n98.13,99.83,45.53,98.97,98.00\n");
    const std::string text = metrics_text(r);
    CHECK(text.find("98.13%") != std::string::npos);
    CHECK(text.find("45.53%") != std::string::npos);
    CHECK(std::count(text.begin(), text.end(), '\n') == 5);
}

TEST_CASE("metric edge cases")
{
    const MetricsReport ones = compute_metrics({1, 0, 0, 1});
    for (const auto& v : {ones.precision, ones.recall, ones.specificity, ones.f1, ones.accuracy}) {
        REQUIRE(v);
        CHECK(*v == 100.0);
    }
    const MetricsReport none = compute_metrics({});
    CHECK_FALSE(none.precision);
    CHECK_FALSE(none.recall);
    CHECK_FALSE(none.specificity);
    CHECK_FALSE(none.f1);
    CHECK_FALSE(none.accuracy);
    CHECK(metrics_csv(none) == "precision,recall,specificity,f1,accuracy\n,,,,\n");
    CHECK(metrics_text(none).find("undefined") != std::string::npos);

    // undefined is not zero
    const MetricsReport misses = compute_metrics({0, 0, 5, 0});
    CHECK_FALSE(misses.precision);
    REQUIRE(misses.recall);
    CHECK(*misses.recall == 0.0);
    CHECK_FALSE(misses.specificity);

    std::mt19937_64 rng(31);
    std::uniform_int_distribution<int> count(0, 1000);
    for (int i = 0; i < 500; ++i) {
        const ConfusionMatrix cm{static_cast<std::uint64_t>(count(rng)), static_cast<std::uint64_t>(count(rng)),
                                 static_cast<std::uint64_t>(count(rng)), static_cast<std::uint64_t>(count(rng))};
        const MetricsReport m = compute_metrics(cm);
        for (const auto& v : {m.precision, m.recall, m.specificity, m.f1, m.accuracy}) {
            if (v) {
                CHECK(*v >= 0.0);
                CHECK(*v <= 100.0);
            }
        }
        // F1 is the harmonic mean of precision and recall
        if (m.precision && m.recall && *m.precision + *m.recall > 0) {
            CHECK(*m.f1 == doctest::Approx(2 * *m.precision * *m.recall / (*m.precision + *m.recall)));
        }
    }
}

TEST_CASE("add_image accumulates per face and counts empty images as true negatives")
{
    ConfusionMatrix cm;
    cm.add_image({2, 1, 0}, 2, 3);
    cm.add_image({0, 0, 0}, 0, 0);
    cm.add_image({0, 2, 0}, 0, 2);
    cm.add_image({0, 0, 3}, 3, 0);
    CHECK(cm == ConfusionMatrix{2, 3, 3, 1});
}

TEST_CASE("match_detections examples")
{
    const Box t{10, 10, 30, 30};
    const std::vector<Box> one{t};
    CHECK(match_detections(std::vector<Detection>{det(t, 0.9f)}, one) == MatchCounts{1, 0, 0});

    // IoU 0.4: widths 20 and 20 offset so that overlap / union = 0.4
    const Box shifted{10 + 20.0f * 3 / 7, 10, 30 + 20.0f * 3 / 7, 30};
    REQUIRE(iou(shifted, t) == doctest::Approx(0.4).epsilon(1e-5));
    CHECK(match_detections(std::vector<Detection>{det(shifted, 0.9f)}, one) == MatchCounts{0, 1, 1});
    CHECK(match_detections(std::vector<Detection>{det(shifted, 0.9f)}, one, 0.3f) == MatchCounts{1, 0, 0});

    const std::vector<Box> three{{0, 0, 5, 5}, {10, 10, 15, 15}, {20, 20, 25, 25}};
    CHECK(match_detections({}, three) == MatchCounts{0, 0, 3});
    CHECK(match_detections(std::vector<Detection>{det(t, 0.5f)}, {}) == MatchCounts{0, 1, 0});

    // one truth is never matched twice; the higher score wins it
    const std::vector<Detection> dup{det(t, 0.4f), det(t, 0.8f)};
    CHECK(match_detections(dup, one) == MatchCounts{1, 1, 0});
}

TEST_CASE("greedy order decides contested truths")
{
    // the high-score detection overlaps both truths but prefers the closer one
    const std::vector<Box> truths{{0, 0, 20, 20}, {8, 0, 28, 20}};
    const std::vector<Detection> dets{det({1, 0, 21, 20}, 0.9f), det({4, 0, 24, 20}, 0.5f)};
    CHECK(match_detections(dets, truths) == MatchCounts{2, 0, 0});
    CHECK(match_detections(dets, truths) == slow_match(dets, truths, 0.5f));
}

TEST_CASE("match_detections invariants")
{
    std::mt19937_64 rng(32);
    std::uniform_int_distribution<int> n(0, 12), coarse(0, 4);
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<Box> truths;
        std::vector<Detection> dets;
        for (int i = n(rng); i > 0; --i) truths.push_back(random_box(rng));
        for (int i = n(rng); i > 0; --i) dets.push_back(det(random_box(rng), static_cast<float>(coarse(rng)) / 4));
        const MatchCounts m = match_detections(dets, truths);
        CHECK(m.tp + m.fn == truths.size());
        CHECK(m.tp + m.fp == dets.size());
        CHECK(m == slow_match(dets, truths, 0.5f));

        // permuting detections only reorders equal scores, which the index tie-break absorbs
        std::vector<Detection> shuffled = dets;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        std::stable_sort(shuffled.begin(), shuffled.end(),
                         [](const Detection& a, const Detection& b) { return a.score > b.score; });
        const MatchCounts p = match_detections(shuffled, truths);
        CHECK(p.tp + p.fn == truths.size());
        CHECK(p.tp + p.fp == dets.size());
    }
}

TEST_CASE("permuting equal-score detections keeps the counts")
{
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<Box> truths;
        std::vector<Detection> dets;
        for (int i = 0; i < 5; ++i) truths.push_back(random_box(rng));
        // disjoint-ish detections at one score: each truth has a single candidate
        for (const auto& t : truths) {
            dets.push_back(det(Box{t.x1 + 1, t.y1, t.x2 + 1, t.y2}, 0.7f));
        }
        for (int i = 0; i < 3; ++i) dets.push_back(det(Box{200.0f + i * 40, 200, 230.0f + i * 40, 230}, 0.7f));
        const MatchCounts base = match_detections(dets, truths);
        for (int k = 0; k < 5; ++k) {
            std::shuffle(dets.begin(), dets.end(), rng);
            CHECK(match_detections(dets, truths) == base);
        }
    }
}

TEST_CASE("format_percent")
{
    CHECK(format_percent(94.0) == "94%");
    CHECK(format_percent(74.38) == "74.38%");
    CHECK(format_percent(99.95) == "99.95%");
    CHECK(format_percent(98.0) == "98%");
    CHECK(format_percent(68.16) == "68.16%");
    CHECK(format_percent(45.5) == "45.5%");
    CHECK(format_percent(100.0) == "100%");
    CHECK(format_percent(0.0) == "0%");
    CHECK(format_percent(98.134) == "98.13%");
}

TEST_CASE("compare_report renders the comparison table shapes")
{
    const std::vector<NamedResult> first{{"Viola-Jones", 74.38}, {"Haar Cascade", 94.0}, {"MTCNN", 99.95}};
    CHECK(compare_report(first) ==
          "Algorithm     Accuracy\n"
          "Viola-Jones     74.38%\n"
          "Haar Cascade       94%\n"
          "MTCNN           99.95%\n");
    CHECK(compare_report(first, ReportFormat::Csv) ==
          "Algorithm,Accuracy\nViola-Jones,74.38%\nHaar Cascade,94%\nMTCNN,99.95%\n");

    const std::vector<NamedResult> second{{"Haar Cascade", 68.16}, {"MTCNN", 98.0}, {"Viola-Jones", 61.81}};
    const std::string csv = compare_report(second, ReportFormat::Csv);
    CHECK(csv == "Algorithm,Accuracy\nHaar Cascade,68.16%\nMTCNN,98%\nViola-Jones,61.81%\n");

    CHECK(compare_report(std::vector<NamedResult>{}) == "Algorithm  Accuracy\n");
    CHECK(compare_report(std::vector<NamedResult>{}, ReportFormat::Csv) == "Algorithm,Accuracy\n");

    // a full report widens every row
    const std::vector<NamedResult> mixed{{"MTCNN", compute_metrics({17620, 335, 30, 280})}, {"Haar Cascade", 94.0},
                                         {"Nothing", compute_metrics({})}};
    CHECK(compare_report(mixed, ReportFormat::Csv) ==
          "Algorithm,Precision,Recall,Specificity,F1,Accuracy\n"
          "MTCNN,98.13%,99.83%,45.53%,98.97%,98%\n"
          "Haar Cascade,-,-,-,-,94%\n"
          "Nothing,-,-,-,-,-\n");
    const std::string text = compare_report(mixed);
    std::size_t lines = 0, width = 0;
    for (std::size_t start = 0; start < text.size();) {
        const auto end = text.find('\n', start);
        const std::size_t len = end - start;
        if (lines == 0) width = len;
        CHECK(len == width);
        ++lines;
        start = end + 1;
    }
    CHECK(lines == 4);
}

TEST_CASE("manifest parsing")
{
    const std::string text = "# truths\n"
                             "a.ppm 1 2 3 4\n"
                             "\n"
                             "b.ppm\n"
                             "c.ppm 0 0 10 10 20 20 30.5 31\n";
    const auto m = parse_manifest(text);
    REQUIRE(m.size() == 3);
    CHECK(m[0] == GroundTruth{"a.ppm", {{1, 2, 3, 4}}});
    CHECK(m[1].boxes.empty());
    CHECK(m[2].boxes.size() == 2);
    CHECK(m[2].boxes[1] == Box{20, 20, 30.5f, 31});

    CHECK(parse_manifest(format_manifest(m)) == m);
    CHECK_THROWS(parse_manifest("a.ppm 1 2 3\n"));
    CHECK_THROWS(parse_manifest("a.ppm 1 2 x 4\n"));
    CHECK_THROWS(parse_manifest("a.ppm 5 5 1 1\n"));

    const auto path = std::filesystem::temp_directory_path() / ("eval_manifest_" + std::to_string(::getpid()));
    std::ofstream(path) << text;
    CHECK(read_manifest(path) == m);
    std::filesystem::remove(path);
    CHECK_THROWS(read_manifest(path));
}
