#include "oracles.hpp"

#include "mtcnn/training.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

using namespace mtcnn;

namespace {

// -log of the softmax face probability, clamped the same way as the loss.
double ref_cls_loss(double l0, double l1, int y)
{
    const double m = std::max(l0, l1);
    const double p1 = std::exp(l1 - m) / (std::exp(l0 - m) + std::exp(l1 - m));
    const double q = std::clamp(p1, 1e-7, 1.0 - 1e-7);
    return -(y * std::log(q) + (1 - y) * std::log(1.0 - q));
}

double ref_sq(const std::vector<double>& p, const std::vector<float>& t)
{
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        s += (p[i] - t[i]) * (p[i] - t[i]);
    }
    return s;
}

double max_abs_diff(const WeightStore& a, const WeightStore& b)
{
    double worst = 0;
    for (const auto& [name, t] : a) {
        const Tensor& u = b.get(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            worst = std::max(worst, static_cast<double>(std::fabs(t[i] - u[i])));
        }
    }
    return worst;
}

double max_abs(const WeightStore& a)
{
    double worst = 0;
    for (const auto& [name, t] : a) {
        for (float v : t.values()) {
            worst = std::max(worst, static_cast<double>(std::fabs(v)));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("cls_loss examples")
{
    CHECK(cls_loss(0.5f, 1) == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(cls_loss(0.5f, 0) == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(cls_loss(0.9f, 0) == doctest::Approx(2.302585).epsilon(1e-5));
    CHECK(cls_loss(1.0f - kProbEpsilon, 1) < 1e-6f);
    CHECK(cls_loss(0.0f, 0) < 1e-6f);
    // clamped, so never infinite
    CHECK(std::isfinite(cls_loss(0.0f, 1)));
    CHECK(std::isfinite(cls_loss(1.0f, 0)));
    CHECK(cls_loss(0.0f, 1) == doctest::Approx(-std::log(1e-7)).epsilon(1e-5));
}

TEST_CASE("cls_loss is non-negative and convex in the logit")
{
    for (int y = 0; y <= 1; ++y) {
        double prev_slope = -1e9;
        for (int i = -40; i < 40; ++i) {
            const double a = i * 0.25, b = (i + 1) * 0.25;
            const double la = ref_cls_loss(0, a, y), lb = ref_cls_loss(0, b, y);
            CHECK(cls_loss(static_cast<float>(1 / (1 + std::exp(-a))), y) >= 0.0f);
            const double slope = (lb - la) / 0.25;
            CHECK(slope >= prev_slope - 1e-9);
            prev_slope = slope;
        }
    }
}

TEST_CASE("cls logit gradient matches finite differences")
{
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> logit(-4, 4);
    int probes = 0;
    double worst = 0;
    for (int i = 0; i < 200; ++i) {
        const double l0 = logit(rng), l1 = logit(rng);
        const int y = i % 2;
        const auto g = cls_loss_logit_grad(static_cast<float>(l0), static_cast<float>(l1), y);
        const double eps = 1e-5;
        const double n0 = (ref_cls_loss(l0 + eps, l1, y) - ref_cls_loss(l0 - eps, l1, y)) / (2 * eps);
        const double n1 = (ref_cls_loss(l0, l1 + eps, y) - ref_cls_loss(l0, l1 - eps, y)) / (2 * eps);
        worst = std::max({worst, oracle::rel_error(g[0], n0, 1e-3), oracle::rel_error(g[1], n1, 1e-3)});
        probes += 2;
    }
    CHECK(probes >= 100);
    CHECK(worst < 1e-4);
    // saturated beyond the clamp
    const auto flat = cls_loss_logit_grad(-30.0f, 30.0f, 0);
    CHECK(flat[0] == 0.0f);
    CHECK(flat[1] == 0.0f);
}

TEST_CASE("box and landmark loss examples")
{
    const std::vector<float> z4(4, 0.0f), o4(4, 1.0f);
    CHECK(box_loss(z4, z4) == 0.0f);
    CHECK(box_loss(o4, o4) == 0.0f);
    CHECK(box_loss(z4, o4) == 4.0f);
    std::vector<float> a(10, 0.3f), b(10, 0.3f);
    CHECK(landmark_loss(a, b) == 0.0f);
    b[7] += 1.0f;
    CHECK(landmark_loss(a, b) == doctest::Approx(1.0));
    CHECK_THROWS(box_loss(a, b));
    CHECK_THROWS(landmark_loss(z4, o4));

    std::mt19937_64 rng(12);
    std::uniform_real_distribution<float> u(-2, 2);
    for (int i = 0; i < 50; ++i) {
        std::vector<float> p(10), t(10);
        for (auto& v : p) v = u(rng);
        for (auto& v : t) v = u(rng);
        const std::vector<double> pd(p.begin(), p.end());
        CHECK(landmark_loss(p, t) == doctest::Approx(ref_sq(pd, t)).epsilon(1e-5));
    }
}

TEST_CASE("regression loss gradients match finite differences")
{
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<float> u(-1, 1);
    int probes = 0;
    double worst = 0;
    for (std::size_t width : {4u, 10u}) {
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<float> p(width), t(width);
            for (auto& v : p) v = u(rng);
            for (auto& v : t) v = u(rng);
            const auto g = squared_distance_grad(p, t);
            std::vector<double> pd(p.begin(), p.end());
            for (std::size_t i = 0; i < width; ++i) {
                const double n = oracle::central_diff(pd, i, 1e-4, [&] { return ref_sq(pd, t); });
                worst = std::max(worst, oracle::rel_error(g[i], n, 1e-3));
                ++probes;
            }
        }
    }
    CHECK(probes >= 100);
    CHECK(worst < 1e-4);
}

TEST_CASE("total_loss gating")
{
    const LossWeights w{1.0f, 0.5f, 0.5f};
    CHECK(total_loss({0.6f, 0.2f, {}}, SampleKind::Positive, w) == doctest::Approx(0.7));
    CHECK(total_loss({0.6f, {}, {}}, SampleKind::Negative, w) == 0.6f);
    // absent-task predictions never matter
    CHECK(total_loss({0.6f, 123.0f, 9.0f}, SampleKind::Negative, w) == 0.6f);
    CHECK(total_loss({5.0f, 0.4f, 7.0f}, SampleKind::Part, w) == doctest::Approx(0.2));
    CHECK(total_loss({5.0f, 3.0f, 0.8f}, SampleKind::Landmark, w) == doctest::Approx(0.4));
    CHECK(total_loss({0.6f, 0.2f, {}}, SampleKind::Positive, LossWeights{1.0f, 0.0f, 0.5f}) == 0.6f);

    CHECK_THROWS_AS(total_loss({{}, 0.2f, {}}, SampleKind::Positive, w), std::invalid_argument);
    CHECK_THROWS_AS(total_loss({0.5f, {}, {}}, SampleKind::Positive, w), std::invalid_argument);
    CHECK_THROWS_AS(total_loss({0.5f, {}, {}}, SampleKind::Landmark, w), std::invalid_argument);

    CHECK(task_gates(SampleKind::Positive) == std::array<bool, 3>{true, true, false});
    CHECK(task_gates(SampleKind::Negative) == std::array<bool, 3>{true, false, false});
    CHECK(task_gates(SampleKind::Part) == std::array<bool, 3>{false, true, false});
    CHECK(task_gates(SampleKind::Landmark) == std::array<bool, 3>{false, false, true});

    CHECK_THROWS(LossWeights{0, 0, 0}.validate());
    CHECK_THROWS(LossWeights{-1, 1, 1}.validate());
    CHECK(LossWeights::defaults_for(Stage::ONet).landmark == 1.0f);
    CHECK(LossWeights::defaults_for(Stage::RNet).landmark == 0.5f);
}

TEST_CASE("ohem_select examples")
{
    const std::vector<float> l{5, 4, 3, 2, 1, 0, 6, 7, 8, 9};
    CHECK(ohem_select(l, 0.7f) == std::vector<std::size_t>{9, 8, 7, 6, 0, 1, 2});
    auto all = ohem_select(l, 1.0f);
    CHECK(all.size() == 10);
    CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == 10);
    const std::vector<float> eq(4, 1.5f);
    CHECK(ohem_select(eq, 0.5f) == std::vector<std::size_t>{0, 1});
    CHECK(ohem_select(std::vector<float>{3.0f}, 0.01f) == std::vector<std::size_t>{0});
    CHECK_THROWS(ohem_select(l, 0.0f));
    CHECK_THROWS(ohem_select(l, 1.5f));
}

TEST_CASE("ohem_select properties")
{
    std::mt19937_64 rng(14);
    std::uniform_int_distribution<int> size(1, 80), coarse(0, 9);
    std::uniform_real_distribution<float> ratio(0.05f, 1.0f);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<float> l(static_cast<std::size_t>(size(rng)));
        for (auto& v : l) v = static_cast<float>(coarse(rng));
        const float r = ratio(rng);
        const auto sel = ohem_select(l, r);
        CHECK(sel.size() == static_cast<std::size_t>(std::ceil(static_cast<double>(r) * l.size() - 1e-9)));
        std::vector<bool> in(l.size(), false);
        for (auto i : sel) in[i] = true;
        float min_sel = 1e9f, max_out = -1e9f;
        for (std::size_t i = 0; i < l.size(); ++i) {
            (in[i] ? min_sel : max_out) = in[i] ? std::min(min_sel, l[i]) : std::max(max_out, l[i]);
        }
        CHECK(min_sel >= max_out);
        for (std::size_t k = 1; k < sel.size(); ++k) {
            CHECK(l[sel[k - 1]] >= l[sel[k]]);
            if (l[sel[k - 1]] == l[sel[k]]) {
                CHECK(sel[k - 1] < sel[k]);
            }
        }
    }
}

TEST_CASE("sgd_step")
{
    WeightStore w, g;
    w.set("x", Tensor({1}, 1.0f));
    g.set("x", Tensor({1}, 2.0f));
    WeightStore same = w;
    sgd_step(same, g, 0.0f);
    CHECK(same == w);
    sgd_step(w, g, 0.1f);
    CHECK(w.get("x")[0] == doctest::Approx(0.8));

    g.set("y", Tensor({1}, 1.0f));
    CHECK_THROWS(sgd_step(w, g, 0.1f));
    WeightStore bad;
    bad.set("x", Tensor({2}, 1.0f));
    CHECK_THROWS(sgd_step(w, bad, 0.1f));
}

TEST_CASE("sgd on a convex quadratic decreases monotonically")
{
    std::mt19937_64 rng(15);
    const Tensor target = oracle::random_tensor({4, 5}, rng, -3.0f, 3.0f);
    const Tensor curv = oracle::random_tensor({4, 5}, rng, 0.5f, 2.0f);
    WeightStore w;
    w.set("q", Tensor({4, 5}, 0.0f));
    auto loss = [&] {
        double s = 0;
        for (std::size_t i = 0; i < target.size(); ++i) {
            const double d = w.get("q")[i] - target[i];
            s += curv[i] * d * d;
        }
        return s;
    };
    double prev = loss();
    for (int step = 0; step < 100; ++step) {
        WeightStore g;
        Tensor t({4, 5});
        for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] = 2.0f * curv[i] * (w.get("q")[i] - target[i]);
        }
        g.set("q", t);
        sgd_step(w, g, 0.05f);
        const double now = loss();
        CHECK(now < prev);
        prev = now;
    }
    CHECK(prev < 1e-3);
}

TEST_CASE("synth_dataset is deterministic and labelled consistently")
{
    const auto a = synth_dataset(70, 12, 3);
    const auto b = synth_dataset(70, 12, 3);
    REQUIRE(a.size() == 70);
    std::array<int, 4> counts{};
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].patch == b[i].patch);
        CHECK(a[i].kind == b[i].kind);
        CHECK(a[i].y_box == b[i].y_box);
        CHECK(a[i].y_landmark == b[i].y_landmark);
        CHECK(a[i].patch.shape() == std::vector<int>{3, 12, 12});
        ++counts[static_cast<std::size_t>(a[i].kind)];
        switch (a[i].kind) {
        case SampleKind::Positive:
            CHECK(a[i].y_det == 1);
            CHECK(a[i].y_box.has_value());
            break;
        case SampleKind::Negative:
            CHECK(a[i].y_det == 0);
            CHECK_FALSE(a[i].y_box.has_value());
            break;
        case SampleKind::Part: CHECK(a[i].y_box.has_value()); break;
        case SampleKind::Landmark: CHECK(a[i].y_landmark.has_value()); break;
        }
        for (float v : a[i].patch.values()) {
            CHECK(std::fabs(v) <= 1.0f);
        }
    }
    // 1:3:1:2
    CHECK(counts == std::array<int, 4>{10, 30, 10, 20});
    CHECK_FALSE(synth_dataset(70, 12, 4)[1].patch == a[1].patch);
}

TEST_CASE("synthetic windows respect their overlap bands")
{
    for (int size : {12, 24, 48}) {
        const auto windows = synth_windows(140, size, 40 + static_cast<std::uint64_t>(size));
        for (const auto& win : windows) {
            CHECK(win.patch.width == size);
            CHECK(win.patch.height == size);
            float best = 0;
            for (const auto& t : win.truths) {
                best = std::max(best, iou(win.crop, t.box));
            }
            switch (win.kind) {
            case SampleKind::Positive:
            case SampleKind::Landmark: CHECK(best >= 0.65f); break;
            case SampleKind::Part:
                CHECK(best >= 0.4f);
                CHECK(best < 0.65f);
                break;
            case SampleKind::Negative: CHECK(best < 0.3f); break;
            }
        }
    }
}

TEST_CASE("train_stage with zero learning rate leaves weights alone")
{
    const NetworkSpec p = build_pnet();
    const WeightStore init = init_weights(p, 1);
    const auto data = synth_dataset(100, 12, 5);
    TrainConfig cfg;
    cfg.learning_rate = 0;
    cfg.epochs = 3;
    cfg.batch_size = 32;
    std::vector<int> seen;
    const TrainResult r = train_stage(p, init, data, cfg, LossWeights{}, [&](const EpochLosses& e) {
        seen.push_back(e.epoch);
    });
    CHECK(r.weights == init);
    REQUIRE(r.history.size() == 3);
    CHECK(seen == std::vector<int>{1, 2, 3});
    for (const auto& e : r.history) {
        CHECK(e.total == doctest::Approx(r.history[0].total).epsilon(1e-6));
        CHECK(e.det == doctest::Approx(r.history[0].det).epsilon(1e-6));
    }
    const std::string csv = loss_history_csv(r.history);
    CHECK(csv.rfind("epoch,det_loss,box_loss,landmark_loss,total\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

    cfg.epochs = 0;
    CHECK(train_stage(p, init, data, cfg, LossWeights{}).history.empty());
}

TEST_CASE("train_stage input checks")
{
    const NetworkSpec r = build_rnet();
    const auto small = synth_dataset(10, 12, 5);
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS(train_stage(r, init_weights(r, 1), small, cfg, LossWeights{}));
    cfg.ohem_keep_ratio = 0;
    const NetworkSpec p = build_pnet();
    CHECK_THROWS(train_stage(p, init_weights(p, 1), small, cfg, LossWeights{}));
    cfg.ohem_keep_ratio = 0.7f;
    cfg.batch_size = 0;
    CHECK_THROWS(train_stage(p, init_weights(p, 1), small, cfg, LossWeights{}));
}

TEST_CASE("train_stage aborts on a diverging loss")
{
    const NetworkSpec p = build_pnet();
    const auto data = synth_dataset(64, 12, 6);
    TrainConfig cfg;
    cfg.learning_rate = 1e30f;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    CHECK_THROWS_AS(train_stage(p, init_weights(p, 1), data, cfg, LossWeights{}), TrainingError);
}

TEST_CASE("train_stage is deterministic for a seed")
{
    const NetworkSpec p = build_pnet();
    const auto data = synth_dataset(160, 12, 7);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.rng_seed = 3;
    const TrainResult a = train_stage(p, init_weights(p, 2), data, cfg, LossWeights{});
    const TrainResult b = train_stage(p, init_weights(p, 2), data, cfg, LossWeights{});
    CHECK(a.weights == b.weights);
    CHECK(loss_history_csv(a.history) == loss_history_csv(b.history));
    cfg.rng_seed = 4;
    const TrainResult c = train_stage(p, init_weights(p, 2), data, cfg, LossWeights{});
    CHECK_FALSE(a.weights == c.weights);
}

TEST_CASE("batch gradient under OHEM equals the gradient of the selected subset")
{
    const LossWeights det_only{1.0f, 0.0f, 0.0f};
    for (Stage stage : {Stage::PNet, Stage::RNet}) {
        const NetworkSpec spec = build_network(stage);
        const int size = spec.input_size;
        const auto data = synth_dataset(40, size, 8);
        const WeightStore w = init_weights(spec, 5);
        std::vector<std::size_t> batch(data.size());
        std::iota(batch.begin(), batch.end(), 0);

        for (float r : {0.3f, 0.7f, 1.0f}) {
            const BatchResult full = batch_gradients(spec, w, data, batch, r, det_only);
            const std::size_t n_det = full.loss_count[0];
            CHECK(full.selected.size() == static_cast<std::size_t>(std::ceil(r * n_det - 1e-9)));

            // excluded rows carry exactly zero classification gradient
            std::vector<bool> kept(batch.size(), false);
            for (auto k : full.selected) kept[k] = true;
            for (std::size_t k = 0; k < batch.size(); ++k) {
                if (!kept[k]) {
                    CHECK(full.head_grads.d_cls_logits[2 * k] == 0.0f);
                    CHECK(full.head_grads.d_cls_logits[2 * k + 1] == 0.0f);
                }
            }

            std::vector<std::size_t> subset;
            for (auto k : full.selected) subset.push_back(batch[k]);
            const BatchResult sub = batch_gradients(spec, w, data, subset, 1.0f, det_only);
            CHECK(sub.objective == doctest::Approx(full.objective).epsilon(1e-6));
            const double scale = std::max(max_abs(full.grads), 1e-6);
            CHECK(max_abs_diff(full.grads, sub.grads) / scale < 1e-5);
        }

        // regression tasks ignore the keep ratio
        const LossWeights all = LossWeights::defaults_for(stage);
        const BatchResult a = batch_gradients(spec, w, data, batch, 0.3f, all);
        const BatchResult b = batch_gradients(spec, w, data, batch, 1.0f, all);
        CHECK(a.head_grads.d_box == b.head_grads.d_box);
        CHECK(a.head_grads.d_landmarks == b.head_grads.d_landmarks);
    }
}

TEST_CASE("batch objective gradient matches finite differences")
{
    // d objective / d head output, probed through the network's own heads
    const NetworkSpec spec = build_pnet();
    const auto data = synth_dataset(21, 12, 9);
    WeightStore w = init_weights(spec, 6);
    std::vector<std::size_t> batch(data.size());
    std::iota(batch.begin(), batch.end(), 0);
    const LossWeights lw{1.0f, 0.5f, 0.5f};
    const BatchResult base = batch_gradients(spec, w, data, batch, 1.0f, lw);

    std::mt19937_64 rng(16);
    int probes = 0;
    double worst = 0;
    for (const char* name : {"pnet.conv4_1.bias", "pnet.conv4_2.bias", "pnet.conv4_3.bias"}) {
        Tensor& b = w.get(name);
        for (std::size_t i = 0; i < b.size(); ++i) {
            const float keep = b[i];
            const float eps = 1e-2f;
            b[i] = keep + eps;
            const double up = batch_gradients(spec, w, data, batch, 1.0f, lw).objective;
            b[i] = keep - eps;
            const double down = batch_gradients(spec, w, data, batch, 1.0f, lw).objective;
            b[i] = keep;
            const double n = (up - down) / (2.0 * eps);
            worst = std::max(worst, oracle::rel_error(base.grads.get(name)[i], n, 1e-3));
            ++probes;
        }
    }
    MESSAGE("head bias probes " << probes << ", worst rel error " << worst);
    CHECK(probes == 16);
    CHECK(worst < 1e-2);
}

TEST_CASE("short P-Net training improves held-out accuracy")
{
    const NetworkSpec p = build_pnet();
    const auto train = synth_dataset(600, 12, 54);
    const auto held = synth_dataset(300, 12, 1011);
    const WeightStore init = init_weights(p, 1);
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.learning_rate = 0.05f;
    const TrainResult r = train_stage(p, init, train, cfg, LossWeights::defaults_for(Stage::PNet));
    const double before = classification_accuracy(p, init, held);
    const double after = classification_accuracy(p, r.weights, held);
    MESSAGE("held-out accuracy " << before << " -> " << after);
    CHECK(r.history.back().total < r.history.front().total);
    CHECK(after > 0.85);
    CHECK(after > before);
}
