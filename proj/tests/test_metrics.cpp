#include "dinocomplete/metrics.hpp"

#include <doctest.h>
#include <json.hpp>

#include <Eigen/QR>

#include <cmath>
#include <random>

using namespace dinocomplete;

namespace {

GridSpec grid(int edge) {
    GridSpec s;
    s.edge = edge;
    return s;
}

TsdfVolume random_occupancy(int edge, double p, std::mt19937_64& rng) {
    TsdfVolume v(grid(edge), 1.0f);
    std::bernoulli_distribution occ(p);
    for (auto& x : v.values) x = occ(rng) ? -1.0f : 1.0f;
    return v;
}

std::vector<Vec3> centers(const TsdfVolume& v) {
    std::vector<Vec3> out;
    const int g = v.spec.edge;
    for (int z = 0; z < g; ++z)
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x)
                if (v.at(x, y, z) <= 0) out.emplace_back(x, y, z);
    return out;
}

// Plain double loop, written independently of the library.
double brute_chamfer(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
    double a = 0, b = 0;
    for (const auto& x : p) {
        double best = 1e300;
        for (const auto& y : q) best = std::min(best, std::sqrt((x - y).dot(x - y)));
        a += best;
    }
    for (const auto& y : q) {
        double best = 1e300;
        for (const auto& x : p) best = std::min(best, std::sqrt((x - y).dot(x - y)));
        b += best;
    }
    return 0.5 * (a / p.size() + b / q.size());
}

}  // namespace

TEST_CASE("iou examples") {
    TsdfVolume a(grid(4), 1.0f), b(grid(4), 1.0f);
    CHECK(iou(a, b) == 1.0);  // empty union
    a.values[0] = a.values[1] = -1.0f;
    b.values[0] = b.values[1] = b.values[2] = b.values[3] = -1.0f;
    CHECK(iou(a, b) == 0.5);
    CHECK(iou(b, a) == 0.5);
    CHECK(iou(a, a) == 1.0);
    TsdfVolume c(grid(4), 1.0f);
    c.values[10] = 0.0f;  // zero is occupied
    CHECK(iou(a, c) == 0.0);
    CHECK_THROWS_AS(iou(a, TsdfVolume(grid(8))), MetricError);

    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        const auto p = random_occupancy(8, 0.3, rng), q = random_occupancy(8, 0.3, rng);
        CHECK(iou(p, q) == iou(q, p));
        CHECK(iou(p, q) >= 0.0);
        CHECK(iou(p, q) <= 1.0);
    }
}

TEST_CASE("chamfer examples and brute-force agreement") {
    TsdfVolume a(grid(8), 1.0f), b(grid(8), 1.0f);
    a.at(1, 1, 1) = -1.0f;
    b.at(1, 1, 3) = -1.0f;
    CHECK(chamfer(a, b) == 2.0);
    CHECK(chamfer(a, a) == 0.0);
    CHECK_THROWS_AS(chamfer(a, TsdfVolume(grid(8), 1.0f)), MetricError);
    CHECK_THROWS_AS(chamfer_points({}, {Vec3::Zero()}), MetricError);

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-5, 5);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Vec3> p(50), q(50);
        for (auto& x : p) x = Vec3(u(rng), u(rng), u(rng));
        for (auto& x : q) x = Vec3(u(rng), u(rng), u(rng));
        CHECK(chamfer_points(p, q) == doctest::Approx(brute_chamfer(p, q)).epsilon(1e-14));
        CHECK(chamfer_points(p, q) == chamfer_points(q, p));
    }
    // Voxel form on sets of up to 200 points equals the O(n^2) oracle.
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = random_occupancy(8, 0.1 + 0.1 * (trial % 3), rng);
        const auto q = random_occupancy(8, 0.1, rng);
        const auto pc = centers(p), qc = centers(q);
        REQUIRE(pc.size() <= 200);
        CHECK(chamfer(p, q) == doctest::Approx(brute_chamfer(pc, qc)).epsilon(1e-13));
        CHECK(chamfer(p, q) == doctest::Approx(chamfer(q, p)).epsilon(1e-15));
    }
}

TEST_CASE("l1 error") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-3, 3);
    TsdfVolume a(grid(4)), b(grid(4));
    for (auto& x : a.values) x = u(rng);
    for (auto& x : b.values) x = u(rng);
    CHECK(l1_error(a, a) == 0.0);
    double expect = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) expect += std::abs(double(a.values[i]) - b.values[i]) / 3.0;
    CHECK(l1_error(a, b) == doctest::Approx(expect / a.values.size()).epsilon(1e-12));
    TsdfVolume c = a;
    for (auto& x : c.values) x += 3.0f;
    CHECK(l1_error(c, a) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("report aggregates and serializes") {
    EvalReport r;
    r.config_json = R"({"variant":"full"})";
    TsdfVolume a(grid(4), 1.0f), b(grid(4), 1.0f);
    a.values[0] = -1.0f;
    b.values[0] = -1.0f;
    b.values[1] = -1.0f;
    r.add("s0", "val-seen", a, a);
    r.add("s1", "val-unseen", a, b);
    r.add("s2", "val-unseen", TsdfVolume(grid(4), 1.0f), b);  // no cd
    const auto rows = r.summary();
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].split == "val-seen");
    CHECK(rows[1].count == 2);
    CHECK(rows[1].cd_count == 1);
    CHECK(rows[2].split == "all");
    CHECK(rows[2].iou == doctest::Approx((1.0 + 0.5 + 0.0) / 3));

    const auto j = nlohmann::json::parse(r.to_json());
    CHECK(j.at("samples").size() == 3);
    CHECK(j.at("samples")[2].at("cd").is_null());
    CHECK(j.at("splits").at("all").at("count") == 3);
    CHECK(j.at("config").at("variant") == "full");
    const auto csv = r.to_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("pca of constant features is uniform grey") {
    const FeatureVolume f(grid(4), 5, 0.7f);
    const MaskVolume m(grid(4), 1.0f);
    const auto rgb = pca_colorize(f, m);
    CHECK(rgb.channels == 3);
    for (float v : rgb.values) CHECK(v == 0.5f);
    CHECK_THROWS_AS(pca_colorize(f, MaskVolume(grid(4), 0.0f)), MetricError);
}

TEST_CASE("pca recovers orthogonal axes and pads missing rank") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0, 1);
    FeatureVolume f(grid(4), 3);
    const std::size_t vox = 64;
    const double sd[3] = {1.0, 3.0, 2.0};
    for (std::size_t v = 0; v < vox; ++v)
        for (int k = 0; k < 3; ++k) f.values[k * vox + v] = static_cast<float>(sd[k] * n(rng));
    const auto b = fit_pca({{&f, nullptr}});
    // Largest variance first; sample covariance is only roughly diagonal, so check dominance.
    CHECK(std::abs(b.components[0 * 3 + 1]) > 0.9);
    CHECK(std::abs(b.components[1 * 3 + 2]) > 0.9);
    CHECK(std::abs(b.components[2 * 3 + 0]) > 0.9);

    // Rank 1: one varying channel, the rest constant.
    FeatureVolume g(grid(4), 4, 0.25f);
    for (std::size_t v = 0; v < vox; ++v) g.values[v] = static_cast<float>(v);
    const auto rgb = apply_pca(fit_pca({{&g, nullptr}}), g, nullptr);
    CHECK(rgb.values[0] == 0.0f);
    CHECK(rgb.values[vox - 1] == 1.0f);
    for (std::size_t v = 0; v < vox; ++v) {
        CHECK(rgb.values[vox + v] == 0.5f);
        CHECK(rgb.values[2 * vox + v] == 0.5f);
    }
}

TEST_CASE("pca colors are invariant to rotations of feature space up to sign") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0, 1);
    const int c = 6;
    const std::size_t vox = 512;
    FeatureVolume f(grid(8), c);
    MaskVolume m(grid(8));
    for (std::size_t v = 0; v < vox; ++v) {
        m.values[v] = (v % 3 != 0) ? 1.0f : 0.0f;
        for (int k = 0; k < c; ++k) f.values[k * vox + v] = static_cast<float>((k + 1) * n(rng));
    }
    Eigen::MatrixXd r(c, c);
    for (int i = 0; i < c * c; ++i) r.data()[i] = n(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(r).householderQ();
    FeatureVolume g(grid(8), c);
    for (std::size_t v = 0; v < vox; ++v)
        for (int i = 0; i < c; ++i) {
            double s = 0;
            for (int k = 0; k < c; ++k) s += q(i, k) * f.values[k * vox + v];
            g.values[i * vox + v] = static_cast<float>(s);
        }
    const auto a = pca_colorize(f, m), b = pca_colorize(g, m);
    for (int j = 0; j < 3; ++j) {
        double same = 0, flipped = 0;
        for (std::size_t v = 0; v < vox; ++v) {
            same = std::max(same, double(std::abs(a.values[j * vox + v] - b.values[j * vox + v])));
            if (m.values[v] > 0.5f)
                flipped = std::max(flipped, double(std::abs(a.values[j * vox + v] - (1 - b.values[j * vox + v]))));
        }
        CHECK(std::min(same, flipped) < 1e-4);
    }
}

TEST_CASE("shared pca fit applied to one member equals the joint projection") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0, 1);
    FeatureVolume a(grid(4), 4), b(grid(4), 4);
    for (auto& x : a.values) x = static_cast<float>(n(rng));
    for (auto& x : b.values) x = static_cast<float>(2 * n(rng) + 1);
    const auto basis = fit_pca({{&a, nullptr}, {&b, nullptr}});
    const auto ca = apply_pca(basis, a, nullptr);
    const auto cb = apply_pca(basis, b, nullptr);
    // Colors of both members together span [0, 1] on every component.
    for (int j = 0; j < 3; ++j) {
        float lo = 1, hi = 0;
        for (std::size_t v = 0; v < 64; ++v) {
            lo = std::min({lo, ca.values[j * 64 + v], cb.values[j * 64 + v]});
            hi = std::max({hi, ca.values[j * 64 + v], cb.values[j * 64 + v]});
        }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);
    }
    CHECK(apply_pca(basis, a, nullptr).values == ca.values);
    CHECK_THROWS_AS(apply_pca(basis, FeatureVolume(grid(4), 3), nullptr), MetricError);
}
