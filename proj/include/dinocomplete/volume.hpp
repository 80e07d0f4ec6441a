#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace dinocomplete {

using Vec3 = Eigen::Vector3d;

/// Cubic voxel grid placed in canonical object space.
///
/// Voxel centers sit on the box corners: voxel 0 is at origin_min and voxel
/// edge-1 at origin_max, so voxel_size() = (max - min) / (edge - 1).
/// Linear voxel index is (z * edge + y) * edge + x (width fastest).
struct GridSpec {
    int edge = 32;
    Vec3 origin_min = Vec3::Constant(-0.5);
    Vec3 origin_max = Vec3::Constant(0.5);
    double truncation = 3.0;

    void validate() const;

    std::size_t voxel_count() const {
        const auto g = static_cast<std::size_t>(edge);
        return g * g * g;
    }
    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * edge + y) * edge + x;
    }
    bool contains(int x, int y, int z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < edge && y < edge && z < edge;
    }
    double voxel_size() const { return (origin_max.x() - origin_min.x()) / (edge - 1); }
    /// Canonical-space position of a voxel center.
    Vec3 voxel_center(int x, int y, int z) const;

    /// Same box and truncation with a different edge (used for coarse grids).
    GridSpec with_edge(int new_edge) const;

    bool operator==(const GridSpec& other) const;
};

bool is_power_of_two(long long v);

struct TsdfVolume {
    GridSpec spec;
    std::vector<float> values;

    TsdfVolume() = default;
    explicit TsdfVolume(const GridSpec& s, float fill = 0.0f);

    float at(int x, int y, int z) const { return values[spec.index(x, y, z)]; }
    float& at(int x, int y, int z) { return values[spec.index(x, y, z)]; }
    void validate() const;
};

struct FeatureVolume {
    GridSpec spec;
    int channels = 0;
    std::vector<float> values;  // channel-major: c * edge^3 + voxel

    FeatureVolume() = default;
    FeatureVolume(const GridSpec& s, int c, float fill = 0.0f);

    float at(int c, std::size_t voxel) const { return values[c * spec.voxel_count() + voxel]; }
    float& at(int c, std::size_t voxel) { return values[c * spec.voxel_count() + voxel]; }
    void validate() const;
};

struct MaskVolume {
    GridSpec spec;
    std::vector<float> values;

    MaskVolume() = default;
    explicit MaskVolume(const GridSpec& s, float fill = 0.0f);

    float at(int x, int y, int z) const { return values[spec.index(x, y, z)]; }
    void validate() const;
    bool is_binary() const;
    std::size_t count_nonzero() const;
};

/// 1 where value <= 0.
MaskVolume occupancy(const TsdfVolume& vol);

/// Maps canonical coordinates to continuous grid coordinates (G-1)(p-min)/(max-min).
Vec3 canonical_to_grid(const Vec3& p, const GridSpec& spec);
Vec3 grid_to_canonical(const Vec3& g, const GridSpec& spec);

// ---------------------------------------------------------------------------
// VXL1 binary format

enum class VolumeKind : std::uint32_t { Tsdf = 0, Feature = 1, Mask = 2 };

enum class VxlErrorCode {
    Io,
    BadMagic,
    BadKind,
    UnsupportedDtype,
    DimensionMismatch,
    TruncatedPayload,
    TrailingData,
};

const char* to_string(VxlErrorCode code);

class VxlError : public std::runtime_error {
public:
    VxlError(VxlErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    VxlErrorCode code() const { return code_; }

private:
    VxlErrorCode code_;
};

/// Untyped contents of a VXL1 file. Rasters (depth, patch features) use D = 1.
struct VxlArray {
    VolumeKind kind = VolumeKind::Tsdf;
    std::uint32_t channels = 1;
    std::uint32_t depth = 0, height = 0, width = 0;
    std::vector<float> data;

    std::size_t expected_size() const {
        return static_cast<std::size_t>(channels) * depth * height * width;
    }
};

using Volume = std::variant<TsdfVolume, FeatureVolume, MaskVolume>;

void write_vxl(const std::filesystem::path& path, const VxlArray& array);
VxlArray read_vxl(const std::filesystem::path& path);

/// Serialized bytes of a VXL1 array; write_vxl writes exactly these.
std::vector<std::uint8_t> encode_vxl(const VxlArray& array);
VxlArray decode_vxl(const std::vector<std::uint8_t>& bytes);

void write_volume(const std::filesystem::path& path, const Volume& vol);
void write_volume(const std::filesystem::path& path, const TsdfVolume& vol);
void write_volume(const std::filesystem::path& path, const FeatureVolume& vol);
void write_volume(const std::filesystem::path& path, const MaskVolume& vol);

/// Reads any cubic volume. The file carries no box/truncation, so those come from `base`.
Volume read_volume(const std::filesystem::path& path, const GridSpec& base = {});
TsdfVolume read_tsdf(const std::filesystem::path& path, const GridSpec& spec);
FeatureVolume read_features(const std::filesystem::path& path, const GridSpec& spec);
MaskVolume read_mask(const std::filesystem::path& path, const GridSpec& spec);

}  // namespace dinocomplete
