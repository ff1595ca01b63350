#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "lvseg/detector.hpp"
#include "lvseg/image_ops.hpp"
#include "test_util.hpp"

using namespace lvseg;
using namespace lvseg::det;

namespace {

DetectorConfig small_config() {
    DetectorConfig c;
    c.input_rows = c.input_cols = 32;
    c.base_channels = 4;
    c.hidden = 16;
    c.epochs = 3;
    return c;
}

// Bright filled ellipse on a dark background with its tight box.
BoxSample ellipse_sample(int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> rad(4.0, 9.0);
    double ry = rad(rng), rx = rad(rng);
    std::uniform_real_distribution<double> cy(ry + 1, n - ry - 1), cx(rx + 1, n - rx - 1);
    double y0 = cy(rng), x0 = cx(rng);
    BoxSample s{Image(n, n, 0.1), {}};
    Mask m(n, n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            double dy = (r - y0) / ry, dx = (c - x0) / rx;
            if (dy * dy + dx * dx <= 1.0) {
                s.frame(r, c) = 0.9;
                m(r, c) = 1;
            }
        }
    s.box = mask_bounds(m);
    return s;
}

bool same_weights(const BoxRegressor& a, const BoxRegressor& b) {
    const auto& pa = a.params().all();
    const auto& pb = b.params().all();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i].value.values() != pb[i].value.values()) return false;
    return true;
}

}  // namespace

TEST_CASE("iou examples") {
    BoundingBox a{0, 0, 10, 10}, b{5, 0, 15, 10};
    CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0));
    CHECK(iou(b, a) == iou(a, b));
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, {20, 20, 25, 25}) == 0.0);
    // Touching edges share no pixels.
    CHECK(iou(a, {10, 0, 12, 10}) == 0.0);
}

TEST_CASE("iou stays in [0,1] and is symmetric") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> d(0, 20);
    for (int i = 0; i < 200; ++i) {
        int x0 = d(rng), y0 = d(rng), x1 = d(rng), y1 = d(rng);
        BoundingBox a{std::min(x0, x1), std::min(y0, y1), std::max(x0, x1) + 1, std::max(y0, y1) + 1};
        x0 = d(rng), y0 = d(rng), x1 = d(rng), y1 = d(rng);
        BoundingBox b{std::min(x0, x1), std::min(y0, y1), std::max(x0, x1) + 1, std::max(y0, y1) + 1};
        double v = iou(a, b);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == iou(b, a));
        // Direct pixel count.
        long inter = 0, uni = 0;
        for (int r = 0; r < 22; ++r)
            for (int c = 0; c < 22; ++c) {
                bool ia = c >= a.x0 && c < a.x1 && r >= a.y0 && r < a.y1;
                bool ib = c >= b.x0 && c < b.x1 && r >= b.y0 && r < b.y1;
                inter += ia && ib;
                uni += ia || ib;
            }
        CHECK(v == doctest::Approx(double(inter) / uni));
    }
}

TEST_CASE("sequence_box examples") {
    std::vector<BoundingBox> same(3, BoundingBox{1, 2, 4, 6});
    CHECK(sequence_box(same) == BoundingBox{1, 2, 4, 6});
    std::vector<BoundingBox> two = {{0, 0, 2, 2}, {3, 3, 5, 5}};
    CHECK(sequence_box(two) == BoundingBox{0, 0, 5, 5});
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> d(0, 30);
    std::vector<BoundingBox> many;
    for (int i = 0; i < 10; ++i) {
        int x = d(rng), y = d(rng);
        many.push_back({x, y, x + 1 + d(rng) / 4, y + 1 + d(rng) / 4});
    }
    BoundingBox hull = sequence_box(many);
    for (const auto& b : many) CHECK(iou(hull, b) == doctest::Approx(double(b.area()) / hull.area()));
    CHECK_THROWS_AS(sequence_box(std::vector<BoundingBox>{}), Error);
}

TEST_CASE("denormalize_box always yields a valid box") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> wild(-3.0, 3.0);
    for (int i = 0; i < 500; ++i) {
        std::vector<double> v = {wild(rng), wild(rng), wild(rng), wild(rng)};
        BoundingBox b = denormalize_box(v, 17, 23);
        CHECK(b.valid_for(17, 23));
    }
    std::vector<double> exact = {0.25, 0.5, 0.75, 1.0};
    CHECK(denormalize_box(exact, 8, 8) == BoundingBox{2, 4, 6, 8});
    ad::Tensor t = normalized_box({2, 4, 6, 8}, 8, 8);
    CHECK(t.values() == exact);
}

TEST_CASE("untrained detector gives valid, deterministic boxes at any frame size") {
    std::mt19937_64 rng(4);
    BoxRegressor reg(small_config());
    for (int i = 0; i < 5; ++i) {
        Image f = test::random_image(20 + 7 * i, 40 - 3 * i, rng);
        BoundingBox b = detect(reg, f);
        CHECK(b.valid_for(f.rows(), f.cols()));
        CHECK(detect(reg, f) == b);
    }
}

TEST_CASE("single-frame overfit") {
    std::mt19937_64 rng(5);
    BoxSample s = ellipse_sample(32, rng);
    DetectorConfig c = small_config();
    c.epochs = 200;
    c.batch = 1;
    BoxRegressor reg(c);
    std::vector<double> losses = train_detector(reg, {s});
    REQUIRE(losses.size() == 200);
    CHECK(losses.back() < 1e-3);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("zero gradient leaves the weights alone") {
    DetectorConfig c = small_config();
    BoxRegressor reg(c);
    BoxSample s{Image(32, 32, 0.5), {8, 8, 24, 24}};
    // Dead trunk and hidden layer: the output is the head bias, set to the target.
    for (auto& p : reg.params().all()) {
        if (p.name == "fc.b") p.value.values() = normalized_box(s.box, 32, 32).values();
        else if (p.name.ends_with(".b")) p.value.fill(p.name.starts_with("trunk") ? -1.0 : 0.0);
        else if (p.name.starts_with("trunk")) p.value.fill(0.0);
    }
    BoxRegressor before(c);
    for (std::size_t i = 0; i < reg.params().all().size(); ++i)
        before.params().all()[i].value = reg.params().all()[i].value;
    std::vector<double> losses = train_detector(reg, {s});
    for (double l : losses) CHECK(l == 0.0);
    CHECK(same_weights(reg, before));
}

TEST_CASE("training is reproducible and logs JSON lines") {
    std::mt19937_64 rng(6);
    std::vector<BoxSample> data;
    for (int i = 0; i < 6; ++i) data.push_back(ellipse_sample(32, rng));
    DetectorConfig c = small_config();
    BoxRegressor a(c), b(c);
    std::ostringstream log;
    auto la = train_detector(a, data, &log);
    auto lb = train_detector(b, data);
    CHECK(la == lb);
    CHECK(same_weights(a, b));
    std::istringstream lines(log.str());
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        CHECK(line.find("\"epoch\":" + std::to_string(n + 1)) != std::string::npos);
        ++n;
    }
    CHECK(n == c.epochs);

    c.seed = 2;
    BoxRegressor other(c);
    train_detector(other, data);
    CHECK_FALSE(same_weights(a, other));
    CHECK_THROWS_AS(train_detector(other, {}), Error);
}

TEST_CASE("trained detector finds a single bright ellipse") {
    std::mt19937_64 rng(7);
    std::vector<BoxSample> train, test;
    for (int i = 0; i < 300; ++i) train.push_back(ellipse_sample(32, rng));
    for (int i = 0; i < 20; ++i) test.push_back(ellipse_sample(32, rng));
    DetectorConfig c;
    c.input_rows = c.input_cols = 32;
    c.epochs = 40;
    BoxRegressor reg(c);
    train_detector(reg, train);
    double mean = 0.0;
    for (const auto& s : test) mean += iou(detect(reg, s.frame), s.box);
    mean /= test.size();
    MESSAGE("held-out IoU " << mean);
    CHECK(mean >= 0.8);
}

TEST_CASE("checkpoint round trip and config JSON") {
    test::TempDir dir("det");
    DetectorConfig c = small_config();
    c.seed = 9;
    BoxRegressor reg(c);
    save(reg, dir.path() / "det.ckpt");
    BoxRegressor back = load_detector(dir.path() / "det.ckpt");
    CHECK(same_weights(reg, back));
    CHECK(back.config().seed == 9);
    std::mt19937_64 rng(8);
    Image f = test::random_image(32, 32, rng);
    CHECK(detect(reg, f) == detect(back, f));

    DetectorConfig j = DetectorConfig::from_json(c.to_json());
    CHECK(j.hidden == c.hidden);
    CHECK(j.input_rows == 32);
    CHECK_THROWS_AS(DetectorConfig::from_json(R"({"depth": 3})"), Error);
    CHECK_THROWS_AS(DetectorConfig::from_json(R"({"input_rows": 30})"), Error);
}
