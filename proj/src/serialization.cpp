#include "dinocomplete/serialization.hpp"

#include <stdexcept>
#include <string>

namespace dinocomplete {

std::array<std::uint32_t, 3> hilbert_decode(std::uint64_t index, int bits) {
    // De-interleave into transpose form; X[0] holds the most significant bit of each triple.
    std::array<std::uint32_t, 3> x{0, 0, 0};
    for (int b = 0; b < 3 * bits; ++b) {
        const std::uint32_t bit = static_cast<std::uint32_t>((index >> (3 * bits - 1 - b)) & 1u);
        x[b % 3] |= bit << (bits - 1 - b / 3);
    }
    // Skilling, "Programming the Hilbert curve" (2004): TransposetoAxes.
    const std::uint32_t n = 2u << (bits - 1);
    std::uint32_t t = x[2] >> 1;
    for (int i = 2; i > 0; --i) x[i] ^= x[i - 1];
    x[0] ^= t;
    for (std::uint32_t q = 2; q != n; q <<= 1) {
        const std::uint32_t p = q - 1;
        for (int i = 2; i >= 0; --i) {
            if (x[i] & q) {
                x[0] ^= p;
            } else {
                t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
    }
    return x;
}

HilbertOrder::HilbertOrder(int edge) : edge_(edge) {
    if (edge < 2 || !is_power_of_two(edge)) {
        throw std::invalid_argument("Hilbert order needs a power-of-two edge >= 2, got " +
                                    std::to_string(edge));
    }
    int bits = 0;
    while ((1 << bits) < edge) ++bits;
    const std::size_t n = static_cast<std::size_t>(edge) * edge * edge;
    forward_.resize(n);
    inverse_.resize(n);
    for (std::size_t h = 0; h < n; ++h) {
        const auto c = hilbert_decode(h, bits);
        const auto voxel = static_cast<std::uint32_t>((c[2] * edge + c[1]) * edge + c[0]);
        forward_[h] = voxel;
        inverse_[voxel] = static_cast<std::uint32_t>(h);
    }
}

std::array<int, 3> HilbertOrder::coords_at(std::size_t seq) const {
    const std::uint32_t v = forward_[seq];
    const auto e = static_cast<std::uint32_t>(edge_);
    return {static_cast<int>(v % e), static_cast<int>((v / e) % e), static_cast<int>(v / (e * e))};
}

HilbertOrder hilbert_build(int edge) { return HilbertOrder(edge); }

Sequence serialize(const FeatureVolume& vol, const HilbertOrder& order) {
    if (vol.spec.edge != order.edge()) {
        throw std::invalid_argument("serialize: volume edge does not match Hilbert order");
    }
    Sequence seq;
    seq.length = order.size();
    seq.channels = vol.channels;
    seq.values.resize(seq.length * vol.channels);
    const std::size_t nvox = vol.spec.voxel_count();
    for (std::size_t k = 0; k < seq.length; ++k) {
        const std::size_t voxel = order.voxel_at(k);
        for (int c = 0; c < vol.channels; ++c) seq.values[k * vol.channels + c] = vol.values[c * nvox + voxel];
    }
    return seq;
}

FeatureVolume deserialize(const Sequence& seq, const HilbertOrder& order, const GridSpec& spec) {
    if (spec.edge != order.edge() || seq.length != order.size()) {
        throw std::invalid_argument("deserialize: sequence length does not match Hilbert order");
    }
    FeatureVolume vol(spec, seq.channels);
    const std::size_t nvox = spec.voxel_count();
    for (std::size_t k = 0; k < seq.length; ++k) {
        const std::size_t voxel = order.voxel_at(k);
        for (int c = 0; c < seq.channels; ++c) vol.values[c * nvox + voxel] = seq.values[k * seq.channels + c];
    }
    return vol;
}

void ChunkLayout::validate() const {
    if (chunk <= 0 || edge % chunk != 0) {
        throw std::invalid_argument("chunk size " + std::to_string(chunk) +
                                    " does not divide grid edge " + std::to_string(edge));
    }
    if (channels <= 0) throw std::invalid_argument("chunk layout needs channels > 0");
}

std::vector<std::uint32_t> ChunkLayout::gather_index() const {
    validate();
    const int r = chunk;
    const int g = edge;
    const int n = chunks_per_axis();
    const std::size_t in_vox = static_cast<std::size_t>(g) * g * g;
    const std::size_t out_vox = static_cast<std::size_t>(n) * n * n;
    std::vector<std::uint32_t> idx(static_cast<std::size_t>(token_dim_in()) * out_vox);
    std::size_t o = 0;
    for (int c = 0; c < channels; ++c)
        for (int lz = 0; lz < r; ++lz)
            for (int ly = 0; ly < r; ++ly)
                for (int lx = 0; lx < r; ++lx)
                    for (int bz = 0; bz < n; ++bz)
                        for (int by = 0; by < n; ++by)
                            for (int bx = 0; bx < n; ++bx) {
                                const std::size_t z = bz * r + lz, y = by * r + ly, x = bx * r + lx;
                                idx[o++] = static_cast<std::uint32_t>(c * in_vox + (z * g + y) * g + x);
                            }
    return idx;
}

FeatureVolume chunkify(const FeatureVolume& vol, int chunk) {
    const ChunkLayout layout{vol.spec.edge, chunk, vol.channels};
    const auto idx = layout.gather_index();
    FeatureVolume out(vol.spec.with_edge(layout.chunks_per_axis()), layout.token_dim_in());
    for (std::size_t i = 0; i < idx.size(); ++i) out.values[i] = vol.values[idx[i]];
    return out;
}

FeatureVolume unchunkify(const FeatureVolume& vol, int chunk, int channels) {
    const int edge = vol.spec.edge * chunk;
    const ChunkLayout layout{edge, chunk, channels};
    if (vol.channels != layout.token_dim_in()) {
        throw std::invalid_argument("unchunkify: token channels " + std::to_string(vol.channels) +
                                    " != channels * chunk^3 = " +
                                    std::to_string(layout.token_dim_in()));
    }
    const auto idx = layout.gather_index();
    FeatureVolume out(vol.spec.with_edge(edge), channels);
    for (std::size_t i = 0; i < idx.size(); ++i) out.values[idx[i]] = vol.values[i];
    return out;
}

}  // namespace dinocomplete
