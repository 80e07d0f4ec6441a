#include "dinocomplete/diff.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace dinocomplete::diff;

namespace {

constexpr int kSeeds = 20;
constexpr double kGradTol = 1e-4;

Tensor randn(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> d(0.0, sd);
    for (auto& x : t.data) x = d(rng);
    return t;
}

// Values bounded away from zero so |.| and relu kinks are never straddled by the FD step.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
    Tensor t = randn(std::move(shape), rng);
    for (auto& x : t.data) x = (x < 0 ? -0.1 : 0.1) + x;
    return t;
}

// Random linear functional so every output element reaches the loss with its own weight.
Var project(const Var& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(mul(y, constant(randn(y.shape(), rng))));
}

double check_unary(Var (*op)(const Var&), bool avoid_zero) {
    double worst = 0;
    for (int s = 0; s < kSeeds; ++s) {
        std::mt19937_64 rng(s);
        const Tensor x = avoid_zero ? away_from_zero({3, 4}, rng) : randn({3, 4}, rng);
        worst = std::max(worst, grad_check_graph([&](const std::vector<Var>& v) { return project(op(v[0]), s); }, {x}));
    }
    return worst;
}

double check_graph(const std::function<Var(const std::vector<Var>&)>& build,
                   const std::function<std::vector<Tensor>(std::mt19937_64&)>& make) {
    double worst = 0;
    for (int s = 0; s < kSeeds; ++s) {
        std::mt19937_64 rng(1000 + s);
        worst = std::max(worst, grad_check_graph(build, make(rng)));
    }
    return worst;
}

// Direct summation oracle for cross-correlation.
Tensor naive_conv3(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int pad) {
    const int ci = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int co = k.dim(0), ks = k.dim(2);
    const int od = (d + 2 * pad - ks) / stride + 1, oh = (h + 2 * pad - ks) / stride + 1,
              ow = (w + 2 * pad - ks) / stride + 1;
    Tensor out({co, od, oh, ow});
    for (int o = 0; o < co; ++o)
        for (int z = 0; z < od; ++z)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    double s = b.data.empty() ? 0.0 : b.data[o];
                    for (int i = 0; i < ci; ++i)
                        for (int a = 0; a < ks; ++a)
                            for (int bb = 0; bb < ks; ++bb)
                                for (int c = 0; c < ks; ++c) {
                                    const int iz = z * stride - pad + a, iy = y * stride - pad + bb,
                                              ix = xx * stride - pad + c;
                                    if (iz < 0 || iy < 0 || ix < 0 || iz >= d || iy >= h || ix >= w) continue;
                                    s += k.data[(((o * ci + i) * ks + a) * ks + bb) * ks + c] *
                                         x.data[((i * d + iz) * h + iy) * w + ix];
                                }
                    out.data[((o * od + z) * oh + y) * ow + xx] = s;
                }
    return out;
}

// Scatter oracle for the transposed convolution.
Tensor naive_conv3_transpose(const Tensor& x, const Tensor& k, int stride, int pad) {
    const int ci = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int co = k.dim(1), ks = k.dim(2);
    const int od = (d - 1) * stride - 2 * pad + ks, oh = (h - 1) * stride - 2 * pad + ks,
              ow = (w - 1) * stride - 2 * pad + ks;
    Tensor out({co, od, oh, ow});
    for (int i = 0; i < ci; ++i)
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    for (int o = 0; o < co; ++o)
                        for (int a = 0; a < ks; ++a)
                            for (int bb = 0; bb < ks; ++bb)
                                for (int c = 0; c < ks; ++c) {
                                    const int oz = z * stride - pad + a, oy = y * stride - pad + bb,
                                              ox = xx * stride - pad + c;
                                    if (oz < 0 || oy < 0 || ox < 0 || oz >= od || oy >= oh || ox >= ow) continue;
                                    out.data[((o * od + oz) * oh + oy) * ow + ox] +=
                                        k.data[(((i * co + o) * ks + a) * ks + bb) * ks + c] *
                                        x.data[((i * d + z) * h + y) * w + xx];
                                }
    return out;
}

double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("grad_check on a quadratic and a sigmoid chain") {
    const std::vector<double> theta{0.3, -1.2, 2.0};
    auto f = [](std::span<const double> t) { return t[0] * t[0] + 3 * t[1] * t[1] + t[0] * t[2]; };
    const std::vector<double> g{2 * 0.3 + 2.0, 6 * -1.2, 0.3};
    CHECK(grad_check(f, theta, g) < 1e-9);

    const double err = grad_check_graph(
        [](const std::vector<Var>& v) { return sum(sigmoid(scale(sigmoid(v[0]), 3.0))); },
        {Tensor({4}, {0.1, -0.7, 1.3, 2.2})});
    CHECK(err < 1e-6);
}

TEST_CASE("elementwise primitives pass gradient checks") {
    CHECK(check_unary(&sigmoid, false) < kGradTol);
    CHECK(check_unary(&softplus, false) < kGradTol);
    CHECK(check_unary(&dinocomplete::diff::exp, false) < kGradTol);
    CHECK(check_unary(&dinocomplete::diff::abs, true) < kGradTol);
    CHECK(check_unary(&relu, true) < kGradTol);
    CHECK(check_unary(&dinocomplete::diff::tanh, false) < kGradTol);
    CHECK(check_unary(&neg, false) < kGradTol);

    auto two = [](std::mt19937_64& rng) { return std::vector<Tensor>{randn({2, 5}, rng), randn({2, 5}, rng)}; };
    CHECK(check_graph([](const std::vector<Var>& v) { return project(add(v[0], v[1]), 1); }, two) < kGradTol);
    CHECK(check_graph([](const std::vector<Var>& v) { return project(sub(v[0], v[1]), 2); }, two) < kGradTol);
    CHECK(check_graph([](const std::vector<Var>& v) { return project(mul(v[0], v[1]), 3); }, two) < kGradTol);
    CHECK(check_graph([](const std::vector<Var>& v) { return project(mul(v[0], v[0]), 4); }, two) < kGradTol);
    CHECK(check_graph([](const std::vector<Var>& v) { return project(add_scalar(scale(v[0], -2.5), 1.0), 5); },
                      two) < kGradTol);
    CHECK(check_graph([](const std::vector<Var>& v) { return project(mul_channels(v[0], v[1]), 6); },
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{randn({3, 2, 2, 2}, rng), randn({1, 2, 2, 2}, rng)};
                      }) < kGradTol);
}

TEST_CASE("structural primitives pass gradient checks") {
    auto one = [](std::mt19937_64& rng) { return std::vector<Tensor>{randn({2, 3, 2}, rng)}; };
    CHECK(check_graph([](const std::vector<Var>& v) { return project(reshape(v[0], {6, 2}), 1); }, one) < kGradTol);
    CHECK(check_graph([](const std::vector<Var>& v) { return project(concat(v[0], v[1]), 2); },
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{randn({2, 3, 2}, rng), randn({1, 3, 2}, rng)};
                      }) < kGradTol);
    auto idx = std::make_shared<const std::vector<std::uint32_t>>(std::vector<std::uint32_t>{5, 0, 0, 11, 3, 7, 7, 7});
    CHECK(check_graph([&](const std::vector<Var>& v) { return project(gather(v[0], idx, {2, 4}), 3); }, one) <
          kGradTol);
    CHECK(check_graph([](const std::vector<Var>& v) { return mul(sum(v[0]), sum(v[0])); }, one) < kGradTol);
    CHECK(check_graph([](const std::vector<Var>& v) { return mul(mean(v[0]), sum(v[0])); }, one) < kGradTol);
}

TEST_CASE("dense primitives pass gradient checks") {
    CHECK(check_graph([](const std::vector<Var>& v) { return project(linear(v[0], v[1], v[2]), 1); },
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{randn({4, 3}, rng), randn({5, 3}, rng), randn({5}, rng)};
                      }) < kGradTol);
    for (const auto& [stride, pad, ksize] : {std::tuple{1, 1, 3}, std::tuple{2, 1, 4}, std::tuple{1, 0, 1}}) {
        CAPTURE(stride);
        CHECK(check_graph(
                  [stride, pad](const std::vector<Var>& v) { return project(conv3(v[0], v[1], v[2], stride, pad), 2); },
                  [ksize](std::mt19937_64& rng) {
                      return std::vector<Tensor>{randn({2, 4, 4, 4}, rng), randn({3, 2, ksize, ksize, ksize}, rng, 0.3),
                                                 randn({3}, rng)};
                  }) < kGradTol);
    }
    for (const auto& [stride, pad, ksize] : {std::tuple{2, 0, 2}, std::tuple{2, 1, 4}, std::tuple{1, 0, 1}}) {
        CAPTURE(stride);
        CHECK(check_graph(
                  [stride, pad](const std::vector<Var>& v) {
                      return project(conv3_transpose(v[0], v[1], v[2], stride, pad), 3);
                  },
                  [ksize](std::mt19937_64& rng) {
                      return std::vector<Tensor>{randn({3, 2, 2, 2}, rng), randn({3, 2, ksize, ksize, ksize}, rng, 0.3),
                                                 randn({2}, rng)};
                  }) < kGradTol);
    }
    CHECK(check_graph([](const std::vector<Var>& v) { return project(layer_norm(v[0], v[1], v[2]), 4); },
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{randn({5, 4}, rng, 2.0), randn({4}, rng), randn({4}, rng)};
                      }) < kGradTol);
}

TEST_CASE("selective scan passes gradient checks in every argument") {
    const int L = 9, C = 3, N = 4;
    CHECK(check_graph(
              [](const std::vector<Var>& v) {
                  // delta and a are kept in their valid ranges by the parameterization.
                  return project(selective_scan(v[0], softplus(v[1]), neg(exp(v[2])), v[3], v[4], v[5]), 5);
              },
              [](std::mt19937_64& rng) {
                  return std::vector<Tensor>{randn({L, C}, rng), randn({L, C}, rng), randn({C, N}, rng, 0.5),
                                             randn({L, N}, rng),  randn({L, N}, rng), randn({C}, rng)};
              }) < kGradTol);
}

TEST_CASE("composite losses pass gradient checks") {
    // Weighted smooth-l1 with 5/3/1 style weights; errors kept off the |e| = beta seam.
    CHECK(check_graph(
              [](const std::vector<Var>& v) {
                  static const std::vector<double> target{0.0, 2.5, -3.0, 0.4, 1.0, -0.2, 3.0, -1.5};
                  static const std::vector<double> weight{5, 3, 1, 1, 3, 5, 1, 1};
                  return weighted_smooth_l1(v[0], target, weight, 1.0);
              },
              [](std::mt19937_64& rng) {
                  Tensor p({8});
                  const double offsets[8] = {0.3, -2.1, 0.6, 1.9, -0.45, 0.1, -3.0, 0.8};
                  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
                  const double target[8] = {0.0, 2.5, -3.0, 0.4, 1.0, -0.2, 3.0, -1.5};
                  for (int i = 0; i < 8; ++i) p.data[i] = target[i] + offsets[i] + jitter(rng);
                  return std::vector<Tensor>{p};
              }) < kGradTol);

    CHECK(check_graph(
              [](const std::vector<Var>& v) {
                  static std::vector<double> target, mhat;
                  if (target.empty()) {
                      std::mt19937_64 r(77);
                      target = randn({4, 6}, r).data;
                      mhat = {1, 0, 1, 1, 0, 1};
                  }
                  return distill_loss(v[0], target, sigmoid(v[1]), mhat, 1.0, 1.0, 1.0).total;
              },
              [](std::mt19937_64& rng) { return std::vector<Tensor>{randn({4, 6}, rng), randn({1, 6}, rng)}; }) <
          kGradTol);
}

TEST_CASE("composed conv, layer norm and scan back-propagate correctly") {
    CHECK(check_graph(
              [](const std::vector<Var>& v) {
                  const Var h = conv3(v[0], v[1], {}, 1, 1);  // [2, 2, 2, 2]
                  const Var seq = reshape(h, {4, 4});
                  const Var n = layer_norm(seq, v[2], v[3]);
                  const Var y = selective_scan(n, softplus(v[4]), constant(Tensor({4, 3}, {-1, -2, -3, -1, -2, -3,
                                                                                         -1, -2, -3, -1, -2, -3})),
                                               v[5], v[6], constant(Tensor({4}, {1.0, 0.5, -0.5, 0.2})));
                  return project(tanh(y), 9);
              },
              [](std::mt19937_64& rng) {
                  return std::vector<Tensor>{randn({1, 2, 2, 2}, rng), randn({2, 1, 3, 3, 3}, rng, 0.5),
                                             randn({4}, rng), randn({4}, rng), randn({4, 4}, rng),
                                             randn({4, 3}, rng), randn({4, 3}, rng)};
              }) < kGradTol);
}

TEST_CASE("conv3 forward equals the direct summation oracle") {
    std::mt19937_64 rng(3);
    const Tensor x = randn({2, 5, 5, 5}, rng), k = randn({3, 2, 3, 3, 3}, rng), b = randn({3}, rng);
    for (const auto& [stride, pad] : {std::pair{1, 1}, std::pair{1, 0}, std::pair{2, 1}}) {
        const auto out = conv3(constant(x), constant(k), constant(b), stride, pad);
        const auto ref = naive_conv3(x, k, b, stride, pad);
        REQUIRE(out.shape() == ref.shape);
        CHECK(max_abs(out.value().data, ref.data) < 1e-12);
    }
    const Tensor big = randn({4, 8, 8, 8}, rng), k4 = randn({5, 4, 4, 4, 4}, rng);
    const auto out = conv3(constant(big), constant(k4), {}, 2, 1);
    CHECK(max_abs(out.value().data, naive_conv3(big, k4, {}, 2, 1).data) < 1e-12);

    const Tensor xt = randn({3, 3, 3, 3}, rng), kt = randn({3, 2, 4, 4, 4}, rng);
    for (const auto& [stride, pad] : {std::pair{2, 1}, std::pair{1, 0}}) {
        const auto t = conv3_transpose(constant(xt), constant(kt), {}, stride, pad);
        CHECK(max_abs(t.value().data, naive_conv3_transpose(xt, kt, stride, pad).data) < 1e-12);
    }
}

TEST_CASE("identity kernels and weights") {
    std::mt19937_64 rng(1);
    const Tensor x = randn({3, 4, 4, 4}, rng);
    Tensor eye({3, 3, 1, 1, 1});
    for (int i = 0; i < 3; ++i) eye.data[i * 3 + i] = 1.0;
    CHECK(conv3(constant(x), constant(eye), {}, 1, 0).value().data == x.data);

    const Tensor r = randn({5, 3}, rng);
    Tensor w({3, 3});
    for (int i = 0; i < 3; ++i) w.data[i * 3 + i] = 1.0;
    CHECK(linear(constant(r), constant(w), constant(Tensor({3}))).value().data == r.data);
}

TEST_CASE("backward examples") {
    const Var x = parameter(Tensor({3}, {1.0, -2.0, 0.5}));
    backward(sum(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    const Var y = parameter(Tensor({3}, {1.0, -2.0, 0.5}));
    backward(sum(mul(y, y)));
    CHECK(y.grad() == std::vector<double>{2.0, -4.0, 1.0});

    CHECK_THROWS_AS(backward(mul(y, y)), ShapeError);

    // Leaves accumulate across backward calls until zeroed.
    backward(sum(y));
    CHECK(y.grad() == std::vector<double>{3.0, -3.0, 2.0});
    Var yy = y;
    yy.zero_grad();
    CHECK(yy.grad() == std::vector<double>{0.0, 0.0, 0.0});

    {
        NoGradGuard guard;
        const Var z = sum(mul(y, y));
        CHECK_FALSE(z.requires_grad());
    }
    CHECK(grad_enabled());
}

TEST_CASE("backward is bitwise deterministic") {
    auto run = [] {
        std::mt19937_64 rng(42);
        const Var x = parameter(randn({2, 4, 4, 4}, rng));
        const Var k = parameter(randn({3, 2, 3, 3, 3}, rng));
        backward(project(tanh(conv3(x, k, {}, 1, 1)), 5));
        auto g = x.grad();
        const auto gk = k.grad();
        g.insert(g.end(), gk.begin(), gk.end());
        return g;
    };
    CHECK(run() == run());
}

TEST_CASE("shape errors name the offending axis") {
    const Var a = constant(Tensor({2, 3})), b = constant(Tensor({3, 2}));
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(linear(a, constant(Tensor({4, 2}))), ShapeError);
    CHECK_THROWS_AS(concat(a, constant(Tensor({2, 4}))), ShapeError);
    CHECK_THROWS_AS(reshape(a, {5}), ShapeError);
    CHECK_THROWS_AS(conv3(constant(Tensor({2, 4, 4, 4})), constant(Tensor({1, 3, 3, 3, 3})), {}, 1, 1), ShapeError);
    try {
        conv3(constant(Tensor({2, 4, 4, 4})), constant(Tensor({1, 3, 3, 3, 3})), {}, 1, 1);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
}

TEST_CASE("Adam updates") {
    AdamConfig cfg;
    cfg.lr = 0.1;
    // Zero gradient leaves the parameter unchanged.
    std::vector<double> p{1.0}, m, v;
    adam_update(p, std::vector<double>{0.0}, m, v, 1, cfg);
    CHECK(p[0] == 1.0);

    // First step: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    p = {1.0};
    m.clear();
    v.clear();
    adam_update(p, std::vector<double>{0.5}, m, v, 1, cfg);
    CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));

    // Second step by hand.
    adam_update(p, std::vector<double>{-0.25}, m, v, 2, cfg);
    const double m2 = 0.9 * 0.05 + 0.1 * -0.25, v2 = 0.999 * 0.00025 + 0.001 * 0.0625;
    const double mh = m2 / (1 - 0.81), vh = v2 / (1 - 0.999 * 0.999);
    const double p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    CHECK(p[0] == doctest::Approx(p1 - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-12));

    CHECK_THROWS_AS(adam_update(p, std::vector<double>{1.0, 2.0}, m, v, 3, cfg), ShapeError);

    // adam_step on graph parameters matches the raw update.
    std::vector<Var> params{parameter(Tensor({2}, {0.5, -0.5}))};
    backward(sum(mul(params[0], params[0])));
    AdamState state;
    adam_step(params, state, cfg);
    CHECK(state.step == 1);
    CHECK(params[0].data()[0] == doctest::Approx(0.5 - 0.1).epsilon(1e-6));
    CHECK(params[0].data()[1] == doctest::Approx(-0.5 + 0.1).epsilon(1e-6));
}
