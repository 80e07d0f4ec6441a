#include "dinocomplete/ssm.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace dinocomplete;

namespace {

GridSpec grid(int edge) {
    GridSpec s;
    s.edge = edge;
    return s;
}

std::vector<double> normal(std::size_t n, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

double softplus(double x) { return x > 20 ? x : std::log1p(std::exp(x)); }

// Per-step recurrence written straight from h_k = exp(d a) h + (exp(d a) - 1)/a * b x.
std::vector<double> naive_scan(const SsmParams& p, const std::vector<double>& x, std::size_t len) {
    const int C = p.channels, N = p.state_dim;
    std::vector<double> h(static_cast<std::size_t>(C) * N, 0.0), y(len * C);
    for (std::size_t k = 0; k < len; ++k) {
        const double* xk = &x[k * C];
        std::vector<double> bk(N, 0.0), ck(N, 0.0);
        for (int n = 0; n < N; ++n)
            for (int j = 0; j < C; ++j) {
                bk[n] += p.b_weight[n * C + j] * xk[j];
                ck[n] += p.c_weight[n * C + j] * xk[j];
            }
        for (int c = 0; c < C; ++c) {
            double pre = p.delta_bias[c];
            for (int j = 0; j < C; ++j) pre += p.delta_weight[c * C + j] * xk[j];
            const double d = softplus(pre);
            double out = p.skip[c] * xk[c];
            for (int n = 0; n < N; ++n) {
                const double a = p.a_diag[c * N + n];
                double& hs = h[c * N + n];
                hs = std::exp(d * a) * hs + (std::exp(d * a) - 1.0) / a * bk[n] * xk[c];
                out += ck[n] * hs;
            }
            y[k * C + c] = out;
        }
    }
    return y;
}

std::vector<double> naive_ln(const std::vector<double>& x, std::size_t rows, int C,
                             const std::vector<double>& g, const std::vector<double>& b) {
    std::vector<double> y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0, var = 0;
        for (int c = 0; c < C; ++c) mean += x[r * C + c];
        mean /= C;
        for (int c = 0; c < C; ++c) var += (x[r * C + c] - mean) * (x[r * C + c] - mean);
        var /= C;
        for (int c = 0; c < C; ++c) y[r * C + c] = g[c] * (x[r * C + c] - mean) / std::sqrt(var + 1e-5) + b[c];
    }
    return y;
}

// serialize -> LN -> naive scan -> deserialize, on doubles.
std::vector<double> naive_voxel_op(const std::vector<double>& f, int C, int edge,
                                   const VoxelStateParams& p) {
    const auto order = hilbert_build(edge);
    const std::size_t L = order.size();
    std::vector<double> seq(L * C);
    for (std::size_t k = 0; k < L; ++k)
        for (int c = 0; c < C; ++c) seq[k * C + c] = f[c * L + order.voxel_at(k)];
    const auto y = naive_scan(p.ssm, naive_ln(seq, L, C, p.ln_gain, p.ln_bias), L);
    std::vector<double> out(f.size());
    for (std::size_t k = 0; k < L; ++k)
        for (int c = 0; c < C; ++c) out[c * L + order.voxel_at(k)] = y[k * C + c];
    return out;
}

std::vector<double> naive_chunk_op(const std::vector<double>& f, int C, int edge,
                                   const ChunkStateParams& p) {
    const int R = p.chunk, E = edge / R, T = p.token_dim, I = p.token_dim_in();
    const std::size_t nb = static_cast<std::size_t>(E) * E * E, nv = static_cast<std::size_t>(edge) * edge * edge;
    auto src = [&](int j, int bx, int by, int bz) {
        const int lx = j % R, ly = (j / R) % R, lz = (j / (R * R)) % R, c = j / (R * R * R);
        return c * nv + ((static_cast<std::size_t>(bz * R + lz) * edge + by * R + ly) * edge + bx * R + lx);
    };
    std::vector<double> tokens(T * nb, 0.0);
    for (int bz = 0; bz < E; ++bz)
        for (int by = 0; by < E; ++by)
            for (int bx = 0; bx < E; ++bx) {
                const std::size_t v = (static_cast<std::size_t>(bz) * E + by) * E + bx;
                for (int t = 0; t < T; ++t) {
                    double s = p.embed_bias[t];
                    for (int j = 0; j < I; ++j) s += p.embed_weight[t * I + j] * f[src(j, bx, by, bz)];
                    tokens[t * nb + v] = s;
                }
            }
    const auto mixed = naive_voxel_op(tokens, T, E, p.phi);
    std::vector<double> out(f.size(), 0.0);
    for (int bz = 0; bz < E; ++bz)
        for (int by = 0; by < E; ++by)
            for (int bx = 0; bx < E; ++bx) {
                const std::size_t v = (static_cast<std::size_t>(bz) * E + by) * E + bx;
                for (int j = 0; j < I; ++j) {
                    double s = p.unembed_bias[j];
                    for (int t = 0; t < T; ++t) s += p.unembed_weight[j * T + t] * mixed[t * nb + v];
                    out[src(j, bx, by, bz)] = s;
                }
            }
    return out;
}

FeatureVolume to_volume(const std::vector<double>& v, int C, int edge) {
    FeatureVolume f(grid(edge), C);
    for (std::size_t i = 0; i < v.size(); ++i) f.values[i] = static_cast<float>(v[i]);
    return f;
}

std::vector<double> to_doubles(const FeatureVolume& f) { return {f.values.begin(), f.values.end()}; }

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max(den, std::abs(b[i]));
    }
    return num / std::max(den, 1e-12);
}

}  // namespace

TEST_CASE("ZOH discretization closed forms") {
    const auto d = discretize(-1.0, std::log(2.0), 1.0);
    CHECK(std::abs(d.a_bar - 0.5) < 1e-12);
    CHECK(std::abs(d.b_bar - 0.5) < 1e-12);

    const auto tiny_a = discretize(-1e-9, 0.3, 2.0);
    CHECK(std::abs(tiny_a.b_bar - 0.6) < 1e-9);
    const auto zero_a = discretize(0.0, 0.3, 2.0);
    CHECK(zero_a.b_bar == doctest::Approx(0.6));

    const auto tiny_delta = discretize(-1.0, 1e-12, 1.0);
    CHECK(std::abs(tiny_delta.a_bar - 1.0) < 1e-11);
    CHECK(std::abs(tiny_delta.b_bar) < 1e-11);

    // Series and closed form agree on both sides of the switch.
    for (double z : {0.9e-6, 1.1e-6, 1e-4}) {
        const double a = -z / 0.5;
        CHECK(zoh_gain(a, 0.5) == doctest::Approx(std::expm1(-z) / a).epsilon(1e-12));
    }
    // d gain / d a against central differences.
    for (double a : {-3.0, -0.5, -1e-7}) {
        const double h = 1e-6;
        const double fd = (zoh_gain(a + h, 0.7) - zoh_gain(a - h, 0.7)) / (2 * h);
        CHECK(zoh_gain_da(a, 0.7) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("discretized state transition is stable for negative a") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ua(-50.0, -1e-6), ud(1e-6, 10.0);
    for (int i = 0; i < 1000; ++i) {
        const auto d = discretize(ua(rng), ud(rng), 1.0);
        CHECK(std::abs(d.a_bar) < 1.0);
    }
}

TEST_CASE("scan matches the naive recurrence on 100 random instances") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> ul(1, 512), uc(1, 16), un(1, 16);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t L = trial < 10 ? 64 : static_cast<std::size_t>(ul(rng));
        const int C = uc(rng), N = un(rng);
        auto p = SsmParams::init(C, N, rng());
        p.skip = normal(C, 1.0, rng);
        const auto x = normal(L * C, 1.0, rng);
        const auto fast = scan(p, x, L);
        const auto slow = naive_scan(p, x, L);
        for (std::size_t i = 0; i < fast.size(); ++i) worst = std::max(worst, std::abs(fast[i] - slow[i]));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("scan single step and memoryless limit") {
    std::mt19937_64 rng(5);
    auto p = SsmParams::init(3, 4, 9);
    const auto x = normal(3, 1.0, rng);
    const auto y = scan(p, x, 1);
    CHECK(rel_err(y, naive_scan(p, x, 1)) < 1e-12);

    // Very negative A: no state survives from one step to the next.
    for (auto& a : p.a_diag) a = -1e6;
    const auto xs = normal(5 * 3, 1.0, rng);
    const auto ys = scan(p, xs, 5);
    for (std::size_t k = 0; k < 5; ++k) {
        const std::vector<double> xk(xs.begin() + k * 3, xs.begin() + k * 3 + 3);
        const auto yk = scan(p, xk, 1);
        for (int c = 0; c < 3; ++c) CHECK(std::abs(ys[k * 3 + c] - yk[c]) < 1e-9);
    }
}

TEST_CASE("scan is causal") {
    std::mt19937_64 rng(8);
    const auto p = SsmParams::init(4, 8, 2);
    const std::size_t L = 40;
    const auto x = normal(L * 4, 1.0, rng);
    const auto y = scan(p, x, L);
    for (std::size_t j : {0u, 13u, 39u}) {
        auto xp = x;
        xp[j * 4 + 1] += 0.5;
        const auto yp = scan(p, xp, L);
        for (std::size_t k = 0; k < j; ++k)
            for (int c = 0; c < 4; ++c) CHECK(yp[k * 4 + c] == y[k * 4 + c]);
        double changed = 0;
        for (int c = 0; c < 4; ++c) changed += std::abs(yp[j * 4 + c] - y[j * 4 + c]);
        CHECK(changed > 0);
    }
}

TEST_CASE("constant-parameter scan equals its convolution kernel") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.05, 0.8);
    for (std::size_t L : {1u, 7u, 64u}) {
        const int C = 3, N = 5;
        ScanDims dims{L, C, N};
        std::vector<double> a(C * N), skip = normal(C, 1.0, rng), bc = normal(N, 1.0, rng),
                                      cc = normal(N, 1.0, rng), dc(C);
        for (auto& v : a) v = -u(rng) * 4;
        for (auto& v : dc) v = u(rng);
        std::vector<double> delta(L * C), b(L * N), cm(L * N);
        for (std::size_t k = 0; k < L; ++k) {
            for (int c = 0; c < C; ++c) delta[k * C + c] = dc[c];
            for (int n = 0; n < N; ++n) {
                b[k * N + n] = bc[n];
                cm[k * N + n] = cc[n];
            }
        }
        const auto x = normal(L * C, 1.0, rng);
        std::vector<double> y(L * C);
        selective_scan_forward(dims, x, delta, a, b, cm, skip, y);
        for (int c = 0; c < C; ++c) {
            std::vector<double> kern(L, 0.0);
            for (std::size_t j = 0; j < L; ++j)
                for (int n = 0; n < N; ++n) {
                    const auto d = discretize(a[c * N + n], dc[c], bc[n]);
                    kern[j] += cc[n] * std::pow(d.a_bar, static_cast<double>(j)) * d.b_bar;
                }
            for (std::size_t k = 0; k < L; ++k) {
                double conv = skip[c] * x[k * C + c];
                for (std::size_t j = 0; j <= k; ++j) conv += kern[j] * x[(k - j) * C + c];
                CHECK(std::abs(y[k * C + c] - conv) < 1e-5);
            }
        }
    }
}

TEST_CASE("layer norm examples") {
    const std::vector<double> g{2.0, 0.5, 1.0}, b{0.1, -0.2, 0.3};
    const auto c = layer_norm(std::vector<double>{4.0, 4.0, 4.0}, g, b);
    for (int i = 0; i < 3; ++i) CHECK(c[i] == doctest::Approx(b[i]));

    const double s = std::sqrt(1.5);
    const std::vector<double> unit{-s, 0.0, s}, ones{1, 1, 1}, zeros{0, 0, 0};
    const auto id = layer_norm(unit, ones, zeros);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(id[i] - unit[i]) < 1e-5);

    std::mt19937_64 rng(4);
    for (int t = 0; t < 20; ++t) {
        const auto x = normal(16, 3.0, rng), gg = normal(16, 1.0, rng), bb = normal(16, 1.0, rng);
        const auto y = layer_norm(x, gg, bb);
        const auto ref = naive_ln(x, 1, 16, gg, bb);
        for (int i = 0; i < 16; ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-12);
    }
    CHECK_THROWS_AS(layer_norm(std::vector<double>{1.0}, std::vector<double>{1.0}, std::vector<double>{0.0}),
                    std::invalid_argument);
}

TEST_CASE("voxel state operator matches the composition of oracles") {
    std::mt19937_64 rng(6);
    const int C = 3;
    auto p = VoxelStateParams::init(C, 4, 12);
    p.ln_gain = normal(C, 1.0, rng);
    p.ln_bias = normal(C, 0.5, rng);
    const auto f = normal(C * 64, 1.0, rng);
    const auto vol = to_volume(f, C, 4);
    const auto out = voxel_state_op(vol, p, hilbert_build(4));
    CHECK(rel_err(to_doubles(out), naive_voxel_op(to_doubles(vol), C, 4, p)) < 1e-5);

    const auto big = voxel_state_op(FeatureVolume(grid(32), 8, 0.5f), VoxelStateParams::init(8, 16, 1),
                                    hilbert_build(32));
    CHECK(big.channels == 8);
    CHECK(big.spec.edge == 32);

    p.zero_output();
    const auto z = voxel_state_op(vol, p, hilbert_build(4));
    for (float v : z.values) CHECK(v == 0.0f);
    CHECK_THROWS_AS(voxel_state_op(vol, p, hilbert_build(8)), std::invalid_argument);
}

TEST_CASE("chunk state operator matches the composition of oracles") {
    std::mt19937_64 rng(7);
    const int C = 2;
    auto p = ChunkStateParams::init(C, 2, 6, 4, 33);
    p.embed_bias = normal(6, 0.3, rng);
    p.unembed_bias = normal(p.token_dim_in(), 0.3, rng);
    const auto vol = to_volume(normal(C * 64, 1.0, rng), C, 4);
    const auto out = chunk_state_op(vol, p, hilbert_build(2));
    CHECK(rel_err(to_doubles(out), naive_chunk_op(to_doubles(vol), C, 4, p)) < 1e-5);

    p.zero_output();
    for (float v : chunk_state_op(vol, p, hilbert_build(2)).values) CHECK(v == 0.0f);
}

TEST_CASE("chunk operator shape at C=4, G=32, R=4") {
    const auto p = ChunkStateParams::init(4, 4, 64, 16, 1);
    const FeatureVolume f(grid(32), 4, 0.1f);
    const auto chunks = chunkify(f, 4);
    CHECK(chunks.spec.edge == 8);
    CHECK(chunks.channels == 4 * 64);
    const auto out = chunk_state_op(f, p, hilbert_build(8));
    CHECK(out.channels == 4);
    CHECK(out.spec.edge == 32);
}

TEST_CASE("multiscale refinement is the sum of branches plus the input") {
    std::mt19937_64 rng(9);
    const int C = 2;
    auto p = MultiscaleParams::init(C, 2, 4, 8, 4, 21);
    p.psi_a.unembed_bias = normal(p.psi_a.token_dim_in(), 0.2, rng);
    const auto vol = to_volume(normal(C * 512, 1.0, rng), C, 8);
    const auto f = to_doubles(vol);
    const auto phi = naive_voxel_op(f, C, 8, p.phi);
    const auto pa = naive_chunk_op(f, C, 8, p.psi_a);
    const auto pb = naive_chunk_op(f, C, 8, p.psi_b);
    std::vector<double> expect(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) expect[i] = phi[i] + pa[i] + pb[i] + f[i];
    CHECK(rel_err(to_doubles(multiscale_refine(vol, p)), expect) < 1e-5);

    // Zero input: only bias-driven branch terms survive.
    const FeatureVolume zero(grid(8), C);
    const auto z = multiscale_refine(zero, p);
    const auto zf = to_doubles(zero);
    const auto zp = naive_voxel_op(zf, C, 8, p.phi), za = naive_chunk_op(zf, C, 8, p.psi_a),
               zb = naive_chunk_op(zf, C, 8, p.psi_b);
    for (std::size_t i = 0; i < zf.size(); ++i) CHECK(std::abs(z.values[i] - (zp[i] + za[i] + zb[i])) < 1e-5);

    p.zero_output();
    const auto id = multiscale_refine(vol, p);
    CHECK(id.values == vol.values);

    auto bad = MultiscaleParams::init(C, 2, 2, 8, 4, 1);
    CHECK_THROWS_AS(multiscale_refine(vol, bad), std::invalid_argument);
}
