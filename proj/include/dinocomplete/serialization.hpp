#pragma once

#include "dinocomplete/volume.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace dinocomplete {

/// 3D Hilbert ordering of a cubic grid (Skilling's transpose transcoding,
/// axis order x, y, z, entry cell (0,0,0)).
class HilbertOrder {
public:
    explicit HilbertOrder(int edge);

    int edge() const { return edge_; }
    std::size_t size() const { return forward_.size(); }

    /// Sequence index -> linear voxel index.
    std::uint32_t voxel_at(std::size_t seq) const { return forward_[seq]; }
    /// Linear voxel index -> sequence index.
    std::uint32_t sequence_of(std::size_t voxel) const { return inverse_[voxel]; }
    std::array<int, 3> coords_at(std::size_t seq) const;

    const std::vector<std::uint32_t>& forward() const { return forward_; }
    const std::vector<std::uint32_t>& inverse() const { return inverse_; }

private:
    int edge_;
    std::vector<std::uint32_t> forward_;
    std::vector<std::uint32_t> inverse_;
};

HilbertOrder hilbert_build(int edge);

/// Decodes a Hilbert index of `bits` bits per axis into (x, y, z).
std::array<std::uint32_t, 3> hilbert_decode(std::uint64_t index, int bits);

/// L x C row-major sequence of channel vectors.
struct Sequence {
    std::size_t length = 0;
    int channels = 0;
    std::vector<float> values;

    float at(std::size_t k, int c) const { return values[k * channels + c]; }
};

Sequence serialize(const FeatureVolume& vol, const HilbertOrder& order);
FeatureVolume deserialize(const Sequence& seq, const HilbertOrder& order, const GridSpec& spec);

/// Folds every R^3 block into channels. Output channel index is
/// ((c * R + lz) * R + ly) * R + lx; output edge is G / R.
struct ChunkLayout {
    int edge = 0;
    int chunk = 0;
    int channels = 0;

    int chunks_per_axis() const { return edge / chunk; }
    int token_dim_in() const { return channels * chunk * chunk * chunk; }
    void validate() const;

    /// For every output element (token channel, chunk voxel) the source index
    /// in the C x G^3 input, in output order.
    std::vector<std::uint32_t> gather_index() const;
};

FeatureVolume chunkify(const FeatureVolume& vol, int chunk);
FeatureVolume unchunkify(const FeatureVolume& vol, int chunk, int channels);

}  // namespace dinocomplete
