#pragma once

#include "dinocomplete/volume.hpp"

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

namespace dinocomplete {

using Mat3 = Eigen::Matrix3d;

/// Pinhole camera. A pixel q with depth d maps to canonical space as the row
/// vector (d K^-1 [u, w, 1]^T - t) R^T, i.e. R (d K^-1 q~ - t) in column form.
/// Conversely a canonical point X sits at camera coordinates R^T X + t.
struct CameraParams {
    Mat3 K = Mat3::Identity();
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    void validate() const;
};

/// Camera at `eye` looking at `target`; OpenCV-style axes (x right, y down, z forward).
CameraParams look_at_camera(const Vec3& eye, const Vec3& target, double focal_px, int width,
                            int height);

/// Dense raster with `channels` planes of height x width.
struct Raster {
    int channels = 1;
    int height = 0;
    int width = 0;
    std::vector<float> values;  // c * H * W + row * W + col

    Raster() = default;
    Raster(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w),
          values(static_cast<std::size_t>(c) * h * w, fill) {}

    float at(int c, int row, int col) const {
        return values[(static_cast<std::size_t>(c) * height + row) * width + col];
    }
    float& at(int c, int row, int col) {
        return values[(static_cast<std::size_t>(c) * height + row) * width + col];
    }
};

/// One rendered view. Depth 0 marks an invalid pixel. Pixel (row, col) has
/// coordinates q = (col + 0.5, row + 0.5).
struct ViewObservation {
    CameraParams camera;
    Raster depth;           // 1 x H x W
    Raster patch_features;  // C x H_p x W_p
    int patch_size = 8;

    int patches_y() const { return patch_features.height; }
    int patches_x() const { return patch_features.width; }
    int patch_count() const { return patch_features.height * patch_features.width; }
    int feature_channels() const { return patch_features.channels; }
    void validate() const;
};

/// Per-view splat sums S_v and W_v.
struct SplatAccumulator {
    GridSpec spec;
    int channels = 0;
    std::vector<double> feature_sum;  // c * G^3 + voxel
    std::vector<double> weight_sum;   // G^3

    SplatAccumulator() = default;
    SplatAccumulator(const GridSpec& s, int c)
        : spec(s), channels(c), feature_sum(static_cast<std::size_t>(c) * s.voxel_count(), 0.0),
          weight_sum(s.voxel_count(), 0.0) {}

    /// Field-wise sum with another accumulator on the same grid.
    void merge(const SplatAccumulator& other);
};

/// Per-voxel weight field aligned to a grid.
struct WeightField {
    GridSpec spec;
    std::vector<double> values;
};

struct VoxelWeight {
    std::size_t voxel;
    double weight;
};

/// Pairs with zero weight or outside the grid are left out; the rest are not renormalized.
struct TrilinearStencil {
    std::array<VoxelWeight, 8> entries{};
    int size = 0;

    const VoxelWeight* begin() const { return entries.data(); }
    const VoxelWeight* end() const { return entries.data() + size; }
};

inline constexpr double kFusionEps = 1e-8;

Vec3 back_project(double u, double w, double depth, const CameraParams& cam);
std::optional<Vec3> patch_center(const ViewObservation& view, int patch);
TrilinearStencil trilinear_weights(const Vec3& grid_point, const GridSpec& spec);

SplatAccumulator splat_view(const ViewObservation& view, const GridSpec& spec);
FeatureVolume normalize_view(const SplatAccumulator& acc, double eps = kFusionEps);
WeightField weights_of(const SplatAccumulator& acc);

std::pair<FeatureVolume, WeightField> tsdf_filter(const FeatureVolume& feat,
                                                  const WeightField& weights,
                                                  const TsdfVolume& gt);

FeatureVolume fuse_views(const std::vector<std::pair<FeatureVolume, WeightField>>& per_view,
                         double eps = kFusionEps);

MaskVolume coverage_mask(const SplatAccumulator& acc);
FeatureVolume incomplete_target(const FeatureVolume& fgt, const MaskVolume& cov);

// Camera files: JSON {K[9], R[9], t[3], patch_size, width, height}, row-major matrices.
struct CameraFile {
    CameraParams camera;
    int patch_size = 8;
    int width = 0;
    int height = 0;
};

void write_camera_json(const std::filesystem::path& path, const CameraFile& cam);
CameraFile read_camera_json(const std::filesystem::path& path);

/// Stores depth and patch features as VXL1 rasters with D = 1 next to a camera JSON.
void write_view(const std::filesystem::path& dir, const std::string& stem,
                const ViewObservation& view);
ViewObservation read_view(const std::filesystem::path& dir, const std::string& stem);

}  // namespace dinocomplete
