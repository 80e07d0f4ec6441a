#include "dinocomplete/ssm.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace dinocomplete {

namespace {

double softplus(double v) { return v > 20.0 ? v : std::log1p(std::exp(v)); }

std::vector<double> normal_vector(std::size_t n, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> out(n);
    for (auto& v : out) v = dist(rng);
    return out;
}

}  // namespace

double zoh_gain(double a, double delta) {
    const double z = delta * a;
    if (std::abs(z) < 1e-6) return delta * (1.0 + z / 2.0 + z * z / 6.0);
    return std::expm1(z) / a;
}

double zoh_gain_da(double a, double delta) {
    const double z = delta * a;
    if (std::abs(z) < 1e-4) return delta * delta * (0.5 + z / 3.0 + z * z / 8.0);
    return (delta * std::exp(z) - std::expm1(z) / a) / a;
}

Discretized discretize(double a, double delta, double b) {
    return {std::exp(delta * a), zoh_gain(a, delta) * b};
}

void selective_scan_forward(const ScanDims& dims, std::span<const double> x,
                            std::span<const double> delta, std::span<const double> a,
                            std::span<const double> b, std::span<const double> cm,
                            std::span<const double> skip, std::span<double> y,
                            std::vector<double>* states) {
    const int nc = dims.channels;
    const int ns = dims.state;
    std::vector<double> h(static_cast<std::size_t>(nc) * ns, 0.0);
    if (states) states->assign(dims.length * nc * ns, 0.0);
    for (std::size_t k = 0; k < dims.length; ++k) {
        const double* bk = b.data() + k * ns;
        const double* ck = cm.data() + k * ns;
        for (int c = 0; c < nc; ++c) {
            const double xk = x[k * nc + c];
            const double dt = delta[k * nc + c];
            double* hc = h.data() + static_cast<std::size_t>(c) * ns;
            const double* ac = a.data() + static_cast<std::size_t>(c) * ns;
            double acc = 0.0;
            for (int n = 0; n < ns; ++n) {
                hc[n] = std::exp(dt * ac[n]) * hc[n] + zoh_gain(ac[n], dt) * bk[n] * xk;
                acc += ck[n] * hc[n];
            }
            y[k * nc + c] = acc + skip[c] * xk;
        }
        if (states) {
            std::copy(h.begin(), h.end(), states->begin() + static_cast<std::ptrdiff_t>(k * nc * ns));
        }
    }
}

void selective_scan_backward(const ScanDims& dims, std::span<const double> x,
                             std::span<const double> delta, std::span<const double> a,
                             std::span<const double> b, std::span<const double> cm,
                             std::span<const double> skip, std::span<const double> states,
                             std::span<const double> dy, const ScanGrads& g) {
    const int nc = dims.channels;
    const int ns = dims.state;
    const std::size_t stride = static_cast<std::size_t>(nc) * ns;
    // carry[c, n] = dL/dh_k arriving from step k + 1.
    std::vector<double> carry(stride, 0.0);
    for (std::size_t kk = dims.length; kk-- > 0;) {
        const double* hk = states.data() + kk * stride;
        const double* hprev = kk > 0 ? states.data() + (kk - 1) * stride : nullptr;
        const double* bk = b.data() + kk * ns;
        const double* ck = cm.data() + kk * ns;
        double* dbk = g.b.data() + kk * ns;
        double* dck = g.cm.data() + kk * ns;
        for (int c = 0; c < nc; ++c) {
            const std::size_t kc = kk * nc + c;
            const double xk = x[kc];
            const double dt = delta[kc];
            const double dyk = dy[kc];
            const double* ac = a.data() + static_cast<std::size_t>(c) * ns;
            double* dac = g.a.data() + static_cast<std::size_t>(c) * ns;
            double* carry_c = carry.data() + static_cast<std::size_t>(c) * ns;
            double dx = skip[c] * dyk;
            double ddt = 0.0;
            g.skip[c] += dyk * xk;
            for (int n = 0; n < ns; ++n) {
                const std::size_t cn = static_cast<std::size_t>(c) * ns + n;
                const double abar = std::exp(dt * ac[n]);
                const double gain = zoh_gain(ac[n], dt);
                const double dh = carry_c[n] + ck[n] * dyk;
                dck[n] += dyk * hk[cn];
                const double d_abar = hprev ? dh * hprev[cn] : 0.0;
                const double d_gain = dh * bk[n] * xk;
                dbk[n] += dh * gain * xk;
                dx += dh * gain * bk[n];
                ddt += d_abar * abar * ac[n] + d_gain * abar;
                dac[n] += d_abar * abar * dt + d_gain * zoh_gain_da(ac[n], dt);
                carry_c[n] = dh * abar;
            }
            g.x[kc] += dx;
            g.delta[kc] += ddt;
        }
    }
}

void layer_norm_rows(std::size_t rows, int channels, std::span<const double> x,
                     std::span<const double> gain, std::span<const double> bias,
                     std::span<double> y) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * channels;
        double mean = 0.0;
        for (int c = 0; c < channels; ++c) mean += xr[c];
        mean /= channels;
        double var = 0.0;
        for (int c = 0; c < channels; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= channels;
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int c = 0; c < channels; ++c) {
            y[r * channels + c] = (xr[c] - mean) * rstd * gain[c] + bias[c];
        }
    }
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                               std::span<const double> bias) {
    if (x.size() < 2) throw std::invalid_argument("layer_norm needs at least two channels");
    std::vector<double> y(x.size());
    layer_norm_rows(1, static_cast<int>(x.size()), x, gain, bias, y);
    return y;
}

// --- parameters ---------------------------------------------------------------

SsmParams SsmParams::init(int channels, int state_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SsmParams p;
    p.channels = channels;
    p.state_dim = state_dim;
    p.a_diag.resize(static_cast<std::size_t>(channels) * state_dim);
    for (int c = 0; c < channels; ++c)
        for (int n = 0; n < state_dim; ++n) p.a_diag[c * state_dim + n] = -(n + 1.0);
    p.skip.assign(channels, 1.0);
    const double proj = 1.0 / std::sqrt(static_cast<double>(channels));
    p.delta_weight = normal_vector(static_cast<std::size_t>(channels) * channels, 0.1 * proj, rng);
    // softplus(delta_bias) log-uniform in [1e-3, 1e-1].
    std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
    p.delta_bias.resize(channels);
    for (auto& v : p.delta_bias) {
        const double dt = std::exp(u(rng));
        v = dt + std::log(-std::expm1(-dt));
    }
    p.b_weight = normal_vector(static_cast<std::size_t>(state_dim) * channels, proj, rng);
    p.c_weight = normal_vector(static_cast<std::size_t>(state_dim) * channels, proj, rng);
    return p;
}

void SsmParams::validate() const {
    const auto c = static_cast<std::size_t>(channels);
    const auto n = static_cast<std::size_t>(state_dim);
    if (channels <= 0 || state_dim <= 0) throw std::invalid_argument("SSM needs C, N > 0");
    if (a_diag.size() != c * n || skip.size() != c || delta_weight.size() != c * c ||
        delta_bias.size() != c || b_weight.size() != n * c || c_weight.size() != n * c) {
        throw std::invalid_argument("SSM parameter shapes do not match (C, N)");
    }
    for (double v : a_diag) {
        if (!(v < 0.0)) throw std::invalid_argument("SSM state matrix entries must be negative");
    }
}

VoxelStateParams VoxelStateParams::init(int channels, int state_dim, std::uint64_t seed) {
    VoxelStateParams p;
    p.ln_gain.assign(channels, 1.0);
    p.ln_bias.assign(channels, 0.0);
    p.ssm = SsmParams::init(channels, state_dim, seed);
    return p;
}

void VoxelStateParams::zero_output() {
    std::fill(ssm.c_weight.begin(), ssm.c_weight.end(), 0.0);
    std::fill(ssm.skip.begin(), ssm.skip.end(), 0.0);
}

ChunkStateParams ChunkStateParams::init(int channels, int chunk, int token_dim, int state_dim,
                                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ChunkStateParams p;
    p.chunk = chunk;
    p.channels = channels;
    p.token_dim = token_dim;
    const int in = p.token_dim_in();
    p.embed_weight = normal_vector(static_cast<std::size_t>(token_dim) * in,
                                   1.0 / std::sqrt(static_cast<double>(in)), rng);
    p.embed_bias.assign(token_dim, 0.0);
    p.unembed_weight = normal_vector(static_cast<std::size_t>(in) * token_dim,
                                     1.0 / std::sqrt(static_cast<double>(token_dim)), rng);
    p.unembed_bias.assign(in, 0.0);
    p.phi = VoxelStateParams::init(token_dim, state_dim, rng());
    return p;
}

void ChunkStateParams::zero_output() {
    std::fill(unembed_weight.begin(), unembed_weight.end(), 0.0);
    std::fill(unembed_bias.begin(), unembed_bias.end(), 0.0);
}

MultiscaleParams MultiscaleParams::init(int channels, int chunk_a, int chunk_b, int token_dim,
                                        int state_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    MultiscaleParams p;
    p.phi = VoxelStateParams::init(channels, state_dim, rng());
    p.psi_a = ChunkStateParams::init(channels, chunk_a, token_dim, state_dim, rng());
    p.psi_b = ChunkStateParams::init(channels, chunk_b, token_dim, state_dim, rng());
    return p;
}

void MultiscaleParams::zero_output() {
    phi.zero_output();
    psi_a.zero_output();
    psi_b.zero_output();
}

// --- operators ---------------------------------------------------------------

std::vector<double> scan(const SsmParams& p, std::span<const double> seq, std::size_t length) {
    p.validate();
    const int nc = p.channels;
    const int ns = p.state_dim;
    if (seq.size() != length * nc) throw std::invalid_argument("scan: sequence is not L x C");
    std::vector<double> delta(length * nc), b(length * ns), cm(length * ns), y(length * nc);
    for (std::size_t k = 0; k < length; ++k) {
        const double* xk = seq.data() + k * nc;
        for (int c = 0; c < nc; ++c) {
            double acc = p.delta_bias[c];
            for (int i = 0; i < nc; ++i) acc += p.delta_weight[c * nc + i] * xk[i];
            delta[k * nc + c] = softplus(acc);
        }
        for (int n = 0; n < ns; ++n) {
            double bb = 0.0, cc = 0.0;
            for (int i = 0; i < nc; ++i) {
                bb += p.b_weight[n * nc + i] * xk[i];
                cc += p.c_weight[n * nc + i] * xk[i];
            }
            b[k * ns + n] = bb;
            cm[k * ns + n] = cc;
        }
    }
    selective_scan_forward({length, nc, ns}, seq, delta, p.a_diag, b, cm, p.skip, y);
    return y;
}

Sequence scan(const SsmParams& params, const Sequence& seq) {
    std::vector<double> x(seq.values.begin(), seq.values.end());
    const auto y = scan(params, x, seq.length);
    Sequence out{seq.length, seq.channels, std::vector<float>(y.begin(), y.end())};
    return out;
}

FeatureVolume voxel_state_op(const FeatureVolume& f, const VoxelStateParams& params,
                             const HilbertOrder& order) {
    if (f.channels != params.channels()) {
        throw std::invalid_argument("voxel_state_op: volume has " + std::to_string(f.channels) +
                                    " channels, parameters expect " +
                                    std::to_string(params.channels()));
    }
    const Sequence seq = serialize(f, order);
    std::vector<double> x(seq.values.begin(), seq.values.end());
    std::vector<double> normed(x.size());
    layer_norm_rows(seq.length, seq.channels, x, params.ln_gain, params.ln_bias, normed);
    const auto y = scan(params.ssm, normed, seq.length);
    Sequence out{seq.length, seq.channels, std::vector<float>(y.begin(), y.end())};
    return deserialize(out, order, f.spec);
}

namespace {

FeatureVolume pointwise_linear(const FeatureVolume& in, int out_channels,
                               const std::vector<double>& weight, const std::vector<double>& bias) {
    const std::size_t nvox = in.spec.voxel_count();
    FeatureVolume out(in.spec, out_channels);
    std::vector<double> acc(nvox);
    for (int o = 0; o < out_channels; ++o) {
        std::fill(acc.begin(), acc.end(), bias[o]);
        for (int i = 0; i < in.channels; ++i) {
            const double w = weight[static_cast<std::size_t>(o) * in.channels + i];
            const float* src = in.values.data() + i * nvox;
            for (std::size_t v = 0; v < nvox; ++v) acc[v] += w * src[v];
        }
        for (std::size_t v = 0; v < nvox; ++v) out.values[o * nvox + v] = static_cast<float>(acc[v]);
    }
    return out;
}

}  // namespace

FeatureVolume chunk_state_op(const FeatureVolume& f, const ChunkStateParams& params,
                             const HilbertOrder& chunk_order) {
    if (f.channels != params.channels) {
        throw std::invalid_argument("chunk_state_op: channel count mismatch");
    }
    const FeatureVolume chunks = chunkify(f, params.chunk);
    const FeatureVolume tokens =
        pointwise_linear(chunks, params.token_dim, params.embed_weight, params.embed_bias);
    const FeatureVolume mixed = voxel_state_op(tokens, params.phi, chunk_order);
    const FeatureVolume back =
        pointwise_linear(mixed, params.token_dim_in(), params.unembed_weight, params.unembed_bias);
    return unchunkify(back, params.chunk, params.channels);
}

FeatureVolume multiscale_refine(const FeatureVolume& f, const MultiscaleParams& params) {
    const int g = f.spec.edge;
    if (params.psi_a.chunk * params.psi_b.chunk != g) {
        throw std::invalid_argument("multiscale_refine needs chunk_a * chunk_b == grid edge");
    }
    const FeatureVolume full = voxel_state_op(f, params.phi, HilbertOrder(g));
    const FeatureVolume pa = chunk_state_op(f, params.psi_a, HilbertOrder(g / params.psi_a.chunk));
    const FeatureVolume pb = chunk_state_op(f, params.psi_b, HilbertOrder(g / params.psi_b.chunk));
    if (full.values.size() != f.values.size() || pa.values.size() != f.values.size() ||
        pb.values.size() != f.values.size()) {
        throw std::invalid_argument("multiscale_refine: branch output shape mismatch");
    }
    FeatureVolume out = f;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] = static_cast<float>(static_cast<double>(full.values[i]) + pa.values[i] +
                                           pb.values[i] + f.values[i]);
    }
    return out;
}

}  // namespace dinocomplete
