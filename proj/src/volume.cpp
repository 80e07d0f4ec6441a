#include "dinocomplete/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dinocomplete {

bool is_power_of_two(long long v) { return v > 0 && (v & (v - 1)) == 0; }

void GridSpec::validate() const {
    if (edge < 2 || !is_power_of_two(edge)) {
        throw std::invalid_argument("grid edge must be a power of two >= 2, got " +
                                    std::to_string(edge));
    }
    if (!(origin_min.array() < origin_max.array()).all()) {
        throw std::invalid_argument("grid origin_min must be below origin_max on every axis");
    }
    if (!(truncation > 0.0)) {
        throw std::invalid_argument("grid truncation must be positive");
    }
}

Vec3 GridSpec::voxel_center(int x, int y, int z) const {
    return grid_to_canonical(Vec3(x, y, z), *this);
}

GridSpec GridSpec::with_edge(int new_edge) const {
    GridSpec s = *this;
    s.edge = new_edge;
    return s;
}

bool GridSpec::operator==(const GridSpec& other) const {
    return edge == other.edge && origin_min == other.origin_min &&
           origin_max == other.origin_max && truncation == other.truncation;
}

TsdfVolume::TsdfVolume(const GridSpec& s, float fill) : spec(s), values(s.voxel_count(), fill) {}

void TsdfVolume::validate() const {
    spec.validate();
    if (values.size() != spec.voxel_count()) {
        throw std::invalid_argument("tsdf volume size does not match grid edge");
    }
    const auto t = static_cast<float>(spec.truncation);
    for (float v : values) {
        if (!(v >= -t && v <= t)) {
            throw std::invalid_argument("tsdf value outside [-truncation, truncation]");
        }
    }
}

FeatureVolume::FeatureVolume(const GridSpec& s, int c, float fill)
    : spec(s), channels(c), values(static_cast<std::size_t>(c) * s.voxel_count(), fill) {}

void FeatureVolume::validate() const {
    spec.validate();
    if (channels <= 0) throw std::invalid_argument("feature volume needs at least one channel");
    if (values.size() != static_cast<std::size_t>(channels) * spec.voxel_count()) {
        throw std::invalid_argument("feature volume size does not match (channels, edge^3)");
    }
    for (float v : values) {
        if (!std::isfinite(v)) throw std::invalid_argument("feature volume has non-finite entry");
    }
}

MaskVolume::MaskVolume(const GridSpec& s, float fill) : spec(s), values(s.voxel_count(), fill) {}

void MaskVolume::validate() const {
    spec.validate();
    if (values.size() != spec.voxel_count()) {
        throw std::invalid_argument("mask volume size does not match grid edge");
    }
    for (float v : values) {
        if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("mask entry outside [0, 1]");
    }
}

bool MaskVolume::is_binary() const {
    return std::all_of(values.begin(), values.end(),
                       [](float v) { return v == 0.0f || v == 1.0f; });
}

std::size_t MaskVolume::count_nonzero() const {
    return static_cast<std::size_t>(
        std::count_if(values.begin(), values.end(), [](float v) { return v != 0.0f; }));
}

MaskVolume occupancy(const TsdfVolume& vol) {
    MaskVolume m(vol.spec);
    for (std::size_t i = 0; i < vol.values.size(); ++i) {
        m.values[i] = vol.values[i] <= 0.0f ? 1.0f : 0.0f;
    }
    return m;
}

Vec3 canonical_to_grid(const Vec3& p, const GridSpec& spec) {
    const Vec3 extent = spec.origin_max - spec.origin_min;
    return ((p - spec.origin_min).array() / extent.array() * (spec.edge - 1)).matrix();
}

Vec3 grid_to_canonical(const Vec3& g, const GridSpec& spec) {
    const Vec3 extent = spec.origin_max - spec.origin_min;
    return (spec.origin_min.array() + g.array() / (spec.edge - 1) * extent.array()).matrix();
}

}  // namespace dinocomplete
