#pragma once

#include "dinocomplete/fusion.hpp"
#include "dinocomplete/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace dinocomplete {

enum class PrimitiveKind { Sphere = 0, Box = 1, Cylinder = 2 };

const char* to_string(PrimitiveKind kind);

/// Solid primitive in canonical coordinates. Only the fields of its kind are used.
struct Primitive {
    PrimitiveKind kind = PrimitiveKind::Sphere;
    Vec3 center = Vec3::Zero();
    double radius = 0.25;                        // sphere, cylinder
    Vec3 half_extents = Vec3::Constant(0.2);     // box
    Vec3 axis = Vec3::UnitZ();                   // cylinder, unit length
    double half_height = 0.2;                    // cylinder
    int label = 0;

    /// Exact Euclidean signed distance, negative inside.
    double sdf(const Vec3& p) const;
};

/// Union of labelled primitives.
struct ShapeProgram {
    std::vector<Primitive> primitives;

    double sdf(const Vec3& p) const;
    /// Label of the primitive whose surface is closest (smallest signed distance) at p.
    int label_at(const Vec3& p) const;
    /// Throws when empty, when a primitive is malformed, or when one misses the canonical box.
    void validate(const GridSpec& spec = {}) const;
};

/// Signed distance in voxel units sampled at voxel centers, clamped to +-truncation.
TsdfVolume analytic_tsdf(const ShapeProgram& prog, const GridSpec& spec);

struct RayHit {
    double depth = 0.0;  // camera z of the hit; 0 on a miss
    int label = -1;
};

/// Sphere-traces the ray through pixel coordinates (u, w).
RayHit cast_ray(const ShapeProgram& prog, const CameraParams& cam, double u, double w);

struct ScanResult {
    TsdfVolume partial;
    Raster depth;
};

/// Single-view scan. Voxels in observed free space get the clamped positive
/// distance along the ray, voxels near an observed surface the signed distance,
/// voxels behind surfaces (and outside the frustum) -truncation.
ScanResult virtual_scan(const ShapeProgram& prog, const CameraParams& cam, const GridSpec& spec,
                        int width, int height);

/// Deterministic label -> unit embedding table standing in for a 2D feature teacher.
class TeacherOracle {
public:
    /// Redraws the whole table until distinct labels have pairwise |cos| < 0.5.
    TeacherOracle(std::uint64_t seed, int dim, int labels);

    int dim() const { return dim_; }
    int labels() const { return labels_; }
    /// Number of table redraws needed to satisfy the separation bound.
    int redraws() const { return redraws_; }
    const double* embedding(int label) const;
    double max_abs_cosine() const;

private:
    int dim_;
    int labels_;
    int redraws_ = 0;
    std::vector<double> table_;
};

/// Per-pixel teacher features averaged over the valid pixels of each patch.
ViewObservation render_teacher_view(const ShapeProgram& prog, const CameraParams& cam,
                                    const TeacherOracle& oracle, int width, int height,
                                    int patch_size);

/// `count` cameras on a Fibonacci sphere of `radius`, rotated by `rotation`, looking at the origin.
std::vector<CameraParams> fibonacci_cameras(int count, double radius, const Mat3& rotation,
                                            double focal_px, int width, int height);

/// Focal length giving a half field of view with tangent 0.75 on a square raster.
double default_focal(int width);

struct SampleConfig {
    GridSpec spec;
    int views = 8;
    int width = 64;
    int height = 64;
    int patch_size = 8;
    double camera_radius = 1.6;
};

struct SampleArtifacts {
    TsdfVolume partial;
    TsdfVolume gt;
    FeatureVolume dino_gt;
    FeatureVolume dino_inc;
    MaskVolume mask;  // voxels with fused (inside-filtered) weight > 0
    std::vector<ViewObservation> views;  // the rendered teacher views, input view first
};

/// View 0 is the input view: it drives the partial scan and the coverage of dino_inc.
SampleArtifacts build_sample(const ShapeProgram& prog, const TeacherOracle& oracle,
                             const SampleConfig& cfg, std::uint64_t seed);

enum class ShapeFamily { Seen, Unseen };

/// Seen shapes mix spheres with boxes or cylinders; unseen shapes are box + cylinder composites.
ShapeProgram random_program(std::mt19937_64& rng, ShapeFamily family);

// --- datasets ------------------------------------------------------------------

struct ManifestEntry {
    std::string id;
    std::string split;  // train | val-seen | val-unseen
    std::filesystem::path partial, gt, dino_gt, dino_inc, mask;
};

struct Manifest {
    std::filesystem::path root;
    std::vector<ManifestEntry> entries;

    std::vector<const ManifestEntry*> split(const std::string& name) const;
};

/// Paths inside the manifest file are relative to its directory.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

ManifestEntry write_sample(const std::filesystem::path& dir, const std::string& id,
                           const std::string& split, const SampleArtifacts& sample);

struct DatasetConfig {
    int count = 200;
    std::uint64_t seed = 0;
    int feat_dim = 16;
    SampleConfig sample;
    /// Also write every sample's teacher views under out/views/<id>/.
    bool write_views = false;
};

/// Split of sample i: every tenth sample is val-unseen, the one before it val-seen.
std::string split_of(int index);

/// Writes `count` samples under `out` and returns the manifest (also written to out/manifest.json).
Manifest generate_dataset(const std::filesystem::path& out, const DatasetConfig& cfg);

}  // namespace dinocomplete
