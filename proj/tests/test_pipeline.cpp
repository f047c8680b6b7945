#include "oracles.hpp"

#include "mtcnn/pipeline.hpp"
#include "mtcnn/synth.hpp"

#include <doctest.h>

using namespace mtcnn;

namespace {

WeightStore zero_cascade()
{
    WeightStore w = zero_weights(build_pnet());
    w.merge(zero_weights(build_rnet()));
    w.merge(zero_weights(build_onet()));
    return w;
}

WeightStore random_cascade(std::uint64_t seed)
{
    WeightStore w = init_weights(build_pnet(), seed);
    w.merge(init_weights(build_rnet(), seed + 1));
    w.merge(init_weights(build_onet(), seed + 2));
    return w;
}

// P-Net that fires on bright windows: every layer averages channel 0 through ReLUs, and the
// face logit is 20 * mean - 10.
WeightStore bright_spot_pnet()
{
    const NetworkSpec p = build_pnet();
    WeightStore w = zero_weights(p);
    Tensor& c1 = w.get("pnet.conv1.weight");
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                c1.at(0, c, i, j) = 1.0f / 27.0f;
    for (const char* name : {"pnet.conv2.weight", "pnet.conv3.weight"}) {
        Tensor& t = w.get(name);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                t.at(0, 0, i, j) = 1.0f / 9.0f;
    }
    w.get("pnet.conv4_1.weight").at(1, 0, 0, 0) = 20.0f;
    w.get("pnet.conv4_1.bias")[1] = -10.0f;
    return w;
}

}  // namespace

TEST_CASE("pyramid scales")
{
    const auto s = pyramid_scales(224, 224, {});
    REQUIRE(s.size() >= 3);
    CHECK(s[0] == doctest::Approx(0.6));
    CHECK(s[1] == doctest::Approx(0.4254).epsilon(1e-4));
    CHECK(s[2] == doctest::Approx(0.30161).epsilon(1e-4));
    CHECK(224 * s.back() >= 12);
    CHECK(224 * s.back() * 0.709 < 12);
    for (std::size_t i = 1; i < s.size(); ++i) {
        CHECK(s[i] < s[i - 1]);
        CHECK(s[i] / s[i - 1] == doctest::Approx(0.709).epsilon(1e-5));
    }

    CHECK(pyramid_scales(100, 80, {12.0f, 0.709f})[0] == 1.0f);
    CHECK(pyramid_scales(12, 12, {12.0f, 0.709f}) == std::vector<float>{1.0f});
    // the default 20 px minimum face cannot fit in a 12 px image
    CHECK(pyramid_scales(12, 12, {}).empty());
    CHECK_THROWS(pyramid_scales(11, 40, {}));
    CHECK_THROWS(pyramid_scales(100, 100, {10.0f, 0.709f}));
    CHECK_THROWS(pyramid_scales(100, 100, {20.0f, 1.0f}));

    std::mt19937_64 rng(1);
    const Image img = to_rgb(oracle::random_gray(157, 93, rng));
    const auto levels = build_pyramid(img, {});
    REQUIRE(levels.size() == pyramid_scales(93, 157, {}).size());
    for (const auto& l : levels) {
        CHECK(std::min(l.image.width, l.image.height) >= 12);
        CHECK(l.image.channels == 3);
    }
}

TEST_CASE("bilinear resize")
{
    std::mt19937_64 rng(2);
    const Image img = to_rgb(oracle::random_gray(13, 9, rng));
    CHECK(resize_bilinear(img, 9, 13) == img);

    const Image flat(7, 5, 3, 77);
    for (auto [h, w] : {std::pair{1, 1}, {3, 11}, {20, 20}}) {
        const Image r = resize_bilinear(flat, h, w);
        CHECK(r.width == w);
        CHECK(r.height == h);
        CHECK(std::all_of(r.data.begin(), r.data.end(), [](std::uint8_t v) { return v == 77; }));
    }

    Image checker(2, 2, 1);
    checker.at(1, 0) = 255;
    checker.at(0, 1) = 255;
    const auto v = resize_bilinear_values(checker, 3, 3);
    REQUIRE(v.size() == 9);
    CHECK(v[4] == doctest::Approx(127.5));
    CHECK(v[0] == doctest::Approx(0));    // clamped corner
    CHECK(v[2] == doctest::Approx(255));
    CHECK_THROWS(resize_bilinear(checker, 0, 3));
}

TEST_CASE("normalize")
{
    Image img(3, 1, 3);
    img.at(0, 0, 0) = 255;
    img.at(1, 0, 1) = 127;
    img.at(2, 0, 2) = 128;
    const Tensor t = normalize(img);
    CHECK(t.shape() == std::vector<int>{1, 3, 1, 3});
    CHECK(t.at(0, 0, 0, 0) == 0.99609375f);
    CHECK(t.at(0, 1, 0, 0) == -0.99609375f);
    CHECK(t.at(0, 1, 0, 1) == -0.00390625f);
    CHECK(t.at(0, 2, 0, 2) == 0.00390625f);
    // (127.5 - 127.5) / 128 would be 0; the two neighbours straddle it symmetrically
    CHECK(t.at(0, 1, 0, 1) + t.at(0, 2, 0, 2) == 0.0f);

    Image gray(2, 2, 1, 255);
    const Tensor g = normalize(gray);
    CHECK(g.shape() == std::vector<int>{1, 3, 2, 2});
    for (float x : g.values()) {
        CHECK(x == 0.99609375f);
    }
}

TEST_CASE("crop_patch zero fills outside the image")
{
    const Image img(20, 20, 3, 200);
    const Image p = crop_patch(img, Box{-5, -5, 15, 15}, 20);
    CHECK(p.width == 20);
    CHECK(p.at(0, 0, 0) == 0);
    CHECK(p.at(4, 4, 1) == 0);
    CHECK(p.at(5, 5, 2) == 200);
    CHECK(p.at(19, 19, 0) == 200);
    CHECK_THROWS(crop_patch(img, Box{30, 30, 40, 40}, 24));
}

TEST_CASE("landmark mapping")
{
    const std::array<float, 10> half{0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f};
    for (const Point& p : map_landmarks(Box{0, 0, 48, 48}, half)) {
        CHECK(p == Point{24, 24});
    }
    // interleaved (x, y) pairs
    const std::array<float, 10> off{0, 0, 1, 0, 0, 1, 1, 1, 0.25f, 0.75f};
    const Landmarks l = map_landmarks(Box{10, 20, 30, 60}, off);
    CHECK(l[0] == Point{10, 20});
    CHECK(l[1] == Point{30, 20});
    CHECK(l[2] == Point{10, 60});
    CHECK(l[3] == Point{30, 60});
    CHECK(l[4] == Point{15, 50});
    CHECK_THROWS(map_landmarks(Box{0, 0, 1, 1}, std::span<const float>(off.data(), 4)));
}

TEST_CASE("cascade weights are validated")
{
    CHECK_NOTHROW(CascadeNets{zero_cascade()});
    CHECK_THROWS_AS(CascadeNets{zero_weights(build_pnet())}, WeightError);
    CascadeConfig bad;
    bad.thresholds[1] = 1.0f;
    CHECK_THROWS(bad.validate());
    CascadeConfig bad_nms;
    bad_nms.rnet_nms.threshold = 0.0f;
    CHECK_THROWS(bad_nms.validate());
}

TEST_CASE("zero weights reject everything")
{
    const CascadeNets nets(zero_cascade());
    const Image blank(64, 48, 3, 128);
    CHECK(stage1(blank, nets, {}).empty());
    const PipelineResult r = detect(blank, nets);
    CHECK(r.detections.empty());
    CHECK(r.counts == std::array<std::size_t, 3>{0, 0, 0});
    CHECK(stage2(blank, {}, nets, {}).empty());
    CHECK(stage3(blank, {}, nets, {}).empty());

    const std::vector<Detection> cands{{{0, 0, 30, 30}, 0.9f, {}}, {{10, 5, 40, 35}, 0.8f, {}}};
    CHECK(stage2(blank, cands, nets, {}).empty());
    CHECK(stage3(blank, cands, nets, {}).empty());
}

TEST_CASE("planted bright region yields a covering candidate")
{
    WeightStore w = bright_spot_pnet();
    w.merge(zero_weights(build_rnet()));
    w.merge(zero_weights(build_onet()));
    const CascadeNets nets(std::move(w));

    Image img(96, 80, 3, 0);
    const Box planted{40, 30, 70, 60};
    for (int y = 30; y < 60; ++y)
        for (int x = 40; x < 70; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(x, y, c) = 255;
    std::size_t raw = 0;
    const auto cands = stage1(img, nets, {}, &raw);
    REQUIRE_FALSE(cands.empty());
    CHECK(cands.size() <= raw);
    float best = 0;
    for (const auto& d : cands) {
        best = std::max(best, iou(d.box, planted));
        CHECK(d.box.width() == doctest::Approx(d.box.height()));
        CHECK(iou(d.box, planted) > 0.0f);  // nothing fires on the dark background alone
    }
    CHECK(best >= 0.5f);

    // NMS only removes: a looser cross-scale pass never yields fewer candidates
    CascadeConfig loose;
    loose.cross_scale_nms.threshold = 1.0f;
    CHECK(stage1(img, nets, loose).size() >= cands.size());
}

TEST_CASE("stage counts, determinism and bounds")
{
    const CascadeNets nets(random_cascade(5));
    CascadeConfig cfg;
    // random weights hover near p = 0.5; low thresholds keep every stage busy
    cfg.thresholds = {0.3f, 0.3f, 0.3f};
    int busy = 0;
    for (const auto& scene : synth_scenes(6, 31)) {
        const PipelineResult a = detect(scene.image, nets, cfg);
        CHECK(a.counts[1] <= a.counts[0]);
        CHECK(a.counts[2] <= a.counts[1]);
        CHECK(a.counts[0] <= a.stage1_raw);
        CHECK(a.detections.size() == a.counts[2]);
        busy += a.counts[2] > 0;
        for (double s : a.seconds) {
            CHECK(s >= 0.0);
        }
        const float ext = static_cast<float>(std::max(scene.image.width, scene.image.height));
        for (const auto& d : a.detections) {
            CHECK(d.box.valid());
            REQUIRE(d.landmarks.has_value());
            CHECK(d.landmarks->size() == 5);
            CHECK(d.score >= 0.3f);
            CHECK(d.score <= 1.0f);
            for (float v : {d.box.x1, d.box.y1, d.box.x2, d.box.y2}) {
                CHECK(v >= -0.5f * ext);
                CHECK(v <= 1.5f * ext);
            }
            for (const Point& p : *d.landmarks) {
                CHECK(p.x >= -0.5f * ext);
                CHECK(p.y <= 1.5f * ext);
            }
        }
        const PipelineResult b = detect(scene.image, nets, cfg);
        REQUIRE(b.detections.size() == a.detections.size());
        for (std::size_t i = 0; i < a.detections.size(); ++i) {
            CHECK(a.detections[i].box == b.detections[i].box);
            CHECK(a.detections[i].score == b.detections[i].score);
            CHECK(*a.detections[i].landmarks == *b.detections[i].landmarks);
        }
        CHECK(a.counts == b.counts);

        // stage 2 keeps a subset: each output comes from refining some input candidate
        const auto s1 = stage1(scene.image, nets, cfg);
        CHECK(stage2(scene.image, s1, nets, cfg).size() <= s1.size());
    }
    CHECK(busy > 0);
}

TEST_CASE("gray input equals its rgb replication")
{
    const CascadeNets nets(random_cascade(8));
    CascadeConfig cfg;
    cfg.thresholds = {0.3f, 0.3f, 0.3f};
    std::mt19937_64 rng(3);
    const Image g = oracle::random_gray(60, 50, rng);
    const auto a = detect(g, nets, cfg);
    const auto b = detect(to_rgb(g), nets, cfg);
    REQUIRE(a.detections.size() == b.detections.size());
    for (std::size_t i = 0; i < a.detections.size(); ++i) {
        CHECK(a.detections[i].box == b.detections[i].box);
    }
}
