#pragma once

#include "dinocomplete/volume.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dinocomplete {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Occupancy (value <= 0) IoU; an empty union counts as 1.
double iou(const TsdfVolume& pred, const TsdfVolume& gt);

/// Symmetric mean nearest-neighbour distance between point sets (any units).
/// Throws MetricError when either set is empty.
double chamfer_points(const std::vector<Vec3>& p, const std::vector<Vec3>& q);

/// Chamfer distance between occupied voxel centers, in voxel units. Exact; voxels
/// occupied in both volumes short-circuit to distance 0.
double chamfer(const TsdfVolume& pred, const TsdfVolume& gt);

/// Mean |pred - gt| / truncation over all voxels.
double l1_error(const TsdfVolume& pred, const TsdfVolume& gt);

struct SampleMetrics {
    std::string id;
    std::string split;
    std::optional<double> cd;  // empty when a volume has no occupied voxel
    double iou = 0.0;
    double l1 = 0.0;
};

struct SplitSummary {
    std::string split;
    int count = 0;
    int cd_count = 0;
    double cd = 0.0;
    double iou = 0.0;
    double l1 = 0.0;
};

struct EvalReport {
    std::vector<SampleMetrics> samples;
    std::string config_json = "{}";

    SampleMetrics& add(const std::string& id, const std::string& split, const TsdfVolume& pred,
                       const TsdfVolume& gt);
    /// Per-split means plus an "all" row, in first-seen split order.
    std::vector<SplitSummary> summary() const;
    std::string to_json() const;
    std::string to_csv() const;
};

// --- PCA colorization ----------------------------------------------------------

/// Top-3 principal directions of masked feature vectors and the min/max of each
/// projection over the fit set. Components beyond the data's rank are flagged.
struct PcaBasis {
    int channels = 0;
    std::vector<double> mean;        // C
    std::vector<double> components;  // 3 x C, unit rows
    double lo[3] = {0, 0, 0};
    double hi[3] = {0, 0, 0};
    bool valid[3] = {false, false, false};
};

struct MaskedFeatures {
    const FeatureVolume* features;
    const MaskVolume* mask;  // nullptr = every voxel
};

/// Joint fit over every masked voxel of every volume. Throws MetricError with fewer than 3 voxels.
PcaBasis fit_pca(const std::vector<MaskedFeatures>& volumes);

/// 3 x G^3 colors in [0, 1]; unmasked voxels are 0, components beyond the rank are 0.5.
FeatureVolume apply_pca(const PcaBasis& basis, const FeatureVolume& features, const MaskVolume* mask);

FeatureVolume pca_colorize(const FeatureVolume& features, const MaskVolume& mask);

}  // namespace dinocomplete
