#pragma once

#include "dinocomplete/serialization.hpp"
#include "dinocomplete/volume.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dinocomplete {

// ---------------------------------------------------------------------------
// Scalar ZOH discretization of one diagonal entry.

struct Discretized {
    double a_bar;
    double b_bar;
};

/// a_bar = exp(delta a), b_bar = (exp(delta a) - 1) / a * b, with the a -> 0
/// limit taken by series when |delta a| < 1e-6.
Discretized discretize(double a, double delta, double b);

/// (exp(delta a) - 1) / a, the factor multiplying b in discretize().
double zoh_gain(double a, double delta);
/// Partial derivative of zoh_gain with respect to a.
double zoh_gain_da(double a, double delta);

// ---------------------------------------------------------------------------
// Raw kernels on row-major double buffers. L = sequence length, C = channels,
// N = state size. Per position k the input-dependent quantities are
// delta[k, c] (already positive), b[k, n] and c[k, n]; a[c, n] is the
// diagonal state matrix and skip[c] the D term.

struct ScanDims {
    std::size_t length;
    int channels;
    int state;
};

/// y[k, c] = sum_n cm[k, n] h_k[c, n] + skip[c] x[k, c],
/// h_k[c, n] = exp(delta a) h_{k-1}[c, n] + zoh_gain(a, delta) b[k, n] x[k, c], h_{-1} = 0.
/// When `states` is non-null it receives h_k for every k (L x C x N).
void selective_scan_forward(const ScanDims& dims, std::span<const double> x,
                            std::span<const double> delta, std::span<const double> a,
                            std::span<const double> b, std::span<const double> cm,
                            std::span<const double> skip, std::span<double> y,
                            std::vector<double>* states = nullptr);

struct ScanGrads {
    std::span<double> x, delta, a, b, cm, skip;
};

/// Reverse-time adjoint of selective_scan_forward. Accumulates (+=) into grads.
void selective_scan_backward(const ScanDims& dims, std::span<const double> x,
                             std::span<const double> delta, std::span<const double> a,
                             std::span<const double> b, std::span<const double> cm,
                             std::span<const double> skip, std::span<const double> states,
                             std::span<const double> dy, const ScanGrads& grads);

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each length-C row to zero mean / unit variance, then applies gain and bias.
void layer_norm_rows(std::size_t rows, int channels, std::span<const double> x,
                     std::span<const double> gain, std::span<const double> bias,
                     std::span<double> y);

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                               std::span<const double> bias);

// ---------------------------------------------------------------------------
// Parameters

/// Selective SSM block. delta = softplus(delta_weight x + delta_bias) per
/// channel; b = b_weight x and c = c_weight x are shared across channels.
struct SsmParams {
    int channels = 0;
    int state_dim = 16;
    std::vector<double> a_diag;        // C x N, all < 0
    std::vector<double> skip;          // C
    std::vector<double> delta_weight;  // C x C
    std::vector<double> delta_bias;    // C
    std::vector<double> b_weight;      // N x C
    std::vector<double> c_weight;      // N x C

    /// a[c, n] = -(n + 1), small random projections, skip = 1.
    static SsmParams init(int channels, int state_dim, std::uint64_t seed);
    void validate() const;
};

/// LN followed by an SSM block, applied over a Hilbert-serialized grid.
struct VoxelStateParams {
    std::vector<double> ln_gain;
    std::vector<double> ln_bias;
    SsmParams ssm;

    static VoxelStateParams init(int channels, int state_dim, std::uint64_t seed);
    int channels() const { return ssm.channels; }
    /// Zeroes the SSM output path (c_weight and skip); the operator then returns zeros.
    void zero_output();
};

struct ChunkStateParams {
    int chunk = 0;
    int channels = 0;                // C of the full-resolution volume
    int token_dim = 64;
    std::vector<double> embed_weight;    // token_dim x (C R^3)
    std::vector<double> embed_bias;      // token_dim
    std::vector<double> unembed_weight;  // (C R^3) x token_dim
    std::vector<double> unembed_bias;    // C R^3
    VoxelStateParams phi;                // on token_dim channels

    static ChunkStateParams init(int channels, int chunk, int token_dim, int state_dim,
                                 std::uint64_t seed);
    int token_dim_in() const { return channels * chunk * chunk * chunk; }
    void zero_output();
};

struct MultiscaleParams {
    VoxelStateParams phi;
    ChunkStateParams psi_a;
    ChunkStateParams psi_b;

    static MultiscaleParams init(int channels, int chunk_a, int chunk_b, int token_dim,
                                 int state_dim, std::uint64_t seed);
    void zero_output();
};

// ---------------------------------------------------------------------------
// Operators

/// Selective scan of an L x C sequence (row-major) under `params`.
std::vector<double> scan(const SsmParams& params, std::span<const double> seq,
                         std::size_t length);
Sequence scan(const SsmParams& params, const Sequence& seq);

/// serialize -> per-element LN -> scan -> deserialize.
FeatureVolume voxel_state_op(const FeatureVolume& f, const VoxelStateParams& params,
                             const HilbertOrder& order);

/// chunkify -> embed -> voxel_state_op on the chunk grid -> unembed -> unchunkify.
/// `chunk_order` is the Hilbert order of the (G/R)^3 chunk grid.
FeatureVolume chunk_state_op(const FeatureVolume& f, const ChunkStateParams& params,
                             const HilbertOrder& chunk_order);

/// phi(f) + psi_a(f) + psi_b(f) + f. Requires chunk_a * chunk_b == G.
FeatureVolume multiscale_refine(const FeatureVolume& f, const MultiscaleParams& params);

}  // namespace dinocomplete
