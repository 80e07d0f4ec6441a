#include "dinocomplete/synth.hpp"

#include <Eigen/Geometry>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace dinocomplete {

const char* to_string(PrimitiveKind kind) {
    switch (kind) {
        case PrimitiveKind::Sphere: return "sphere";
        case PrimitiveKind::Box: return "box";
        case PrimitiveKind::Cylinder: return "cylinder";
    }
    return "unknown";
}

double Primitive::sdf(const Vec3& p) const {
    const Vec3 d = p - center;
    switch (kind) {
        case PrimitiveKind::Sphere:
            return d.norm() - radius;
        case PrimitiveKind::Box: {
            const Vec3 q = d.cwiseAbs() - half_extents;
            return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
        }
        case PrimitiveKind::Cylinder: {
            const double h = d.dot(axis);
            const double radial = (d - h * axis).norm();
            const double qr = radial - radius, qh = std::abs(h) - half_height;
            return std::hypot(std::max(qr, 0.0), std::max(qh, 0.0)) + std::min(std::max(qr, qh), 0.0);
        }
    }
    return std::numeric_limits<double>::infinity();
}

double ShapeProgram::sdf(const Vec3& p) const {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& prim : primitives) d = std::min(d, prim.sdf(p));
    return d;
}

int ShapeProgram::label_at(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    int label = -1;
    for (const auto& prim : primitives) {
        const double d = prim.sdf(p);
        if (d < best) {
            best = d;
            label = prim.label;
        }
    }
    return label;
}

void ShapeProgram::validate(const GridSpec& spec) const {
    if (primitives.empty()) throw std::invalid_argument("shape program has no primitives");
    for (const auto& p : primitives) {
        const bool ok = p.kind == PrimitiveKind::Sphere     ? p.radius > 0
                        : p.kind == PrimitiveKind::Box      ? (p.half_extents.array() > 0).all()
                                                            : p.radius > 0 && p.half_height > 0 &&
                                                             std::abs(p.axis.norm() - 1.0) < 1e-9;
        if (!ok) throw std::invalid_argument(std::string("malformed ") + to_string(p.kind));
        if (p.label < 0) throw std::invalid_argument("primitive labels must be non-negative");
        // The closest box point to the center must lie inside the primitive.
        const Vec3 nearest = p.center.cwiseMax(spec.origin_min).cwiseMin(spec.origin_max);
        if (p.sdf(nearest) > 0) {
            throw std::invalid_argument(std::string(to_string(p.kind)) + " misses the canonical box");
        }
    }
}

TsdfVolume analytic_tsdf(const ShapeProgram& prog, const GridSpec& spec) {
    prog.validate(spec);
    TsdfVolume out(spec);
    const double vs = spec.voxel_size();
    const double tr = spec.truncation;
    for (int z = 0; z < spec.edge; ++z)
        for (int y = 0; y < spec.edge; ++y)
            for (int x = 0; x < spec.edge; ++x) {
                const double d = prog.sdf(spec.voxel_center(x, y, z)) / vs;
                out.at(x, y, z) = static_cast<float>(std::clamp(d, -tr, tr));
            }
    return out;
}

namespace {

constexpr double kHitEps = 1e-5;
constexpr double kFarDepth = 6.0;
constexpr int kMaxSteps = 512;

Vec3 camera_center(const CameraParams& cam) { return -(cam.R * cam.t); }

// Canonical direction whose camera-z component is 1.
Vec3 pixel_direction(const CameraParams& cam, const Mat3& k_inv, double u, double w) {
    return cam.R * (k_inv * Vec3(u, w, 1.0));
}

}  // namespace

RayHit cast_ray(const ShapeProgram& prog, const CameraParams& cam, double u, double w) {
    const Mat3 k_inv = cam.K.inverse();
    const Vec3 origin = camera_center(cam);
    const Vec3 dir = pixel_direction(cam, k_inv, u, w);
    const double len = dir.norm();
    double depth = 0.0;
    for (int i = 0; i < kMaxSteps && depth < kFarDepth; ++i) {
        const Vec3 p = origin + depth * dir;
        const double d = prog.sdf(p);
        if (d < kHitEps) return {depth, prog.label_at(p)};
        depth += d / len;
    }
    return {};
}

ScanResult virtual_scan(const ShapeProgram& prog, const CameraParams& cam, const GridSpec& spec,
                        int width, int height) {
    cam.validate();
    spec.validate();
    if (width <= 0 || height <= 0) throw std::invalid_argument("scan raster must be non-empty");
    ScanResult out{TsdfVolume(spec), Raster(1, height, width)};
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
            out.depth.at(0, r, c) = static_cast<float>(cast_ray(prog, cam, c + 0.5, r + 0.5).depth);

    const Mat3 k_inv = cam.K.inverse();
    const Mat3 rt = cam.R.transpose();
    const double vs = spec.voxel_size();
    const double tr = spec.truncation;
    for (int z = 0; z < spec.edge; ++z)
        for (int y = 0; y < spec.edge; ++y)
            for (int x = 0; x < spec.edge; ++x) {
                const Vec3 cpt = rt * spec.voxel_center(x, y, z) + cam.t;
                float value = static_cast<float>(-tr);
                if (cpt.z() > 0) {
                    const Vec3 q = cam.K * (cpt / cpt.z());
                    const int col = static_cast<int>(std::floor(q.x()));
                    const int row = static_cast<int>(std::floor(q.y()));
                    if (col >= 0 && row >= 0 && col < width && row < height) {
                        const double d = out.depth.at(0, row, col);
                        if (d <= 0) {
                            value = static_cast<float>(tr);
                        } else {
                            // Distance along the ray from the voxel to the observed surface.
                            const double ray_scale = (k_inv * Vec3(q.x(), q.y(), 1.0)).norm();
                            value = static_cast<float>(std::clamp((d - cpt.z()) * ray_scale / vs, -tr, tr));
                        }
                    }
                }
                out.partial.at(x, y, z) = value;
            }
    return out;
}

TeacherOracle::TeacherOracle(std::uint64_t seed, int dim, int labels) : dim_(dim), labels_(labels) {
    if (dim < 2 || labels < 1) throw std::invalid_argument("teacher needs dim >= 2 and >= 1 label");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    table_.resize(static_cast<std::size_t>(dim) * labels);
    for (;;) {
        for (int l = 0; l < labels; ++l) {
            double norm = 0;
            for (int c = 0; c < dim; ++c) {
                table_[l * dim + c] = n(rng);
                norm += table_[l * dim + c] * table_[l * dim + c];
            }
            norm = std::sqrt(norm);
            for (int c = 0; c < dim; ++c) table_[l * dim + c] /= norm;
        }
        if (max_abs_cosine() < 0.5) break;
        ++redraws_;
    }
}

const double* TeacherOracle::embedding(int label) const {
    if (label < 0 || label >= labels_) throw std::out_of_range("teacher label out of range");
    return table_.data() + static_cast<std::size_t>(label) * dim_;
}

double TeacherOracle::max_abs_cosine() const {
    double worst = 0;
    for (int a = 0; a < labels_; ++a)
        for (int b = a + 1; b < labels_; ++b) {
            double dot = 0;
            for (int c = 0; c < dim_; ++c) dot += table_[a * dim_ + c] * table_[b * dim_ + c];
            worst = std::max(worst, std::abs(dot));
        }
    return worst;
}

ViewObservation render_teacher_view(const ShapeProgram& prog, const CameraParams& cam,
                                    const TeacherOracle& oracle, int width, int height,
                                    int patch_size) {
    if (patch_size <= 0 || width % patch_size || height % patch_size) {
        throw std::invalid_argument("raster size must be a multiple of the patch size");
    }
    ViewObservation view;
    view.camera = cam;
    view.patch_size = patch_size;
    view.depth = Raster(1, height, width);
    const int hp = height / patch_size, wp = width / patch_size, dim = oracle.dim();
    view.patch_features = Raster(dim, hp, wp);
    std::vector<double> sum(dim);
    for (int py = 0; py < hp; ++py)
        for (int px = 0; px < wp; ++px) {
            std::fill(sum.begin(), sum.end(), 0.0);
            int valid = 0;
            for (int r = py * patch_size; r < (py + 1) * patch_size; ++r)
                for (int c = px * patch_size; c < (px + 1) * patch_size; ++c) {
                    const RayHit hit = cast_ray(prog, cam, c + 0.5, r + 0.5);
                    view.depth.at(0, r, c) = static_cast<float>(hit.depth);
                    if (hit.depth <= 0) continue;
                    const double* e = oracle.embedding(hit.label);
                    for (int k = 0; k < dim; ++k) sum[k] += e[k];
                    ++valid;
                }
            if (!valid) continue;
            for (int k = 0; k < dim; ++k) view.patch_features.at(k, py, px) = static_cast<float>(sum[k] / valid);
        }
    return view;
}

double default_focal(int width) { return 0.5 * width / 0.75; }

std::vector<CameraParams> fibonacci_cameras(int count, double radius, const Mat3& rotation,
                                            double focal_px, int width, int height) {
    if (count < 1) throw std::invalid_argument("need at least one camera");
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    std::vector<CameraParams> cams;
    for (int i = 0; i < count; ++i) {
        const double y = 1.0 - 2.0 * (i + 0.5) / count;
        const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
        const Vec3 dir(r * std::cos(golden * i), y, r * std::sin(golden * i));
        cams.push_back(look_at_camera(radius * (rotation * dir), Vec3::Zero(), focal_px, width, height));
    }
    return cams;
}

namespace {

Mat3 random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    return q.toRotationMatrix();
}

}  // namespace

SampleArtifacts build_sample(const ShapeProgram& prog, const TeacherOracle& oracle,
                             const SampleConfig& cfg, std::uint64_t seed) {
    if (cfg.views < 1) throw std::invalid_argument("build_sample needs at least one view");
    std::mt19937_64 rng(seed);
    const auto cams = fibonacci_cameras(cfg.views, cfg.camera_radius, random_rotation(rng),
                                        default_focal(cfg.width), cfg.width, cfg.height);
    SampleArtifacts s;
    s.gt = analytic_tsdf(prog, cfg.spec);
    s.partial = virtual_scan(prog, cams[0], cfg.spec, cfg.width, cfg.height).partial;

    std::vector<std::pair<FeatureVolume, WeightField>> filtered;
    MaskVolume input_coverage(cfg.spec);
    for (int v = 0; v < cfg.views; ++v) {
        const auto view = render_teacher_view(prog, cams[v], oracle, cfg.width, cfg.height, cfg.patch_size);
        const auto acc = splat_view(view, cfg.spec);
        if (v == 0) input_coverage = coverage_mask(acc);
        filtered.push_back(tsdf_filter(normalize_view(acc), weights_of(acc), s.gt));
        s.views.push_back(view);
    }
    s.dino_gt = fuse_views(filtered);
    s.dino_inc = incomplete_target(s.dino_gt, input_coverage);
    s.mask = MaskVolume(cfg.spec);
    for (const auto& [f, w] : filtered)
        for (std::size_t k = 0; k < w.values.size(); ++k)
            if (w.values[k] > 0) s.mask.values[k] = 1.0f;
    return s;
}

ShapeProgram random_program(std::mt19937_64& rng, ShapeFamily family) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    std::vector<PrimitiveKind> kinds;
    if (family == ShapeFamily::Seen) {
        const PrimitiveKind partner = u01(rng) < 0.5 ? PrimitiveKind::Box : PrimitiveKind::Cylinder;
        const int n = 1 + static_cast<int>(u01(rng) * 3);
        for (int i = 0; i < n; ++i) kinds.push_back(u01(rng) < 0.5 ? PrimitiveKind::Sphere : partner);
    } else {
        kinds = {PrimitiveKind::Box, PrimitiveKind::Cylinder};
        if (u01(rng) < 0.5) kinds.push_back(u01(rng) < 0.5 ? PrimitiveKind::Box : PrimitiveKind::Cylinder);
        std::shuffle(kinds.begin(), kinds.end(), rng);
    }

    ShapeProgram prog;
    for (std::size_t i = 0; i < kinds.size(); ++i) {
        Primitive p;
        p.kind = kinds[i];
        p.label = static_cast<int>(kinds[i]);
        if (i == 0) {
            p.center = Vec3(uni(-0.12, 0.12), uni(-0.12, 0.12), uni(-0.12, 0.12));
        } else {
            // Attach to an earlier part so composites stay connected.
            const auto& anchor = prog.primitives[static_cast<std::size_t>(u01(rng) * i)];
            Vec3 dir(uni(-1, 1), uni(-1, 1), uni(-1, 1));
            if (dir.norm() < 1e-3) dir = Vec3::UnitX();
            p.center = (anchor.center + uni(0.15, 0.28) * dir.normalized()).cwiseMax(-0.25).cwiseMin(0.25);
        }
        switch (p.kind) {
            case PrimitiveKind::Sphere:
                p.radius = uni(0.12, 0.26);
                break;
            case PrimitiveKind::Box:
                p.half_extents = Vec3(uni(0.08, 0.22), uni(0.08, 0.22), uni(0.08, 0.22));
                break;
            case PrimitiveKind::Cylinder: {
                p.radius = uni(0.07, 0.16);
                p.half_height = uni(0.12, 0.28);
                const int axis = static_cast<int>(u01(rng) * 3);
                p.axis = Vec3::Unit(std::min(axis, 2));
                break;
            }
        }
        prog.primitives.push_back(p);
    }
    return prog;
}

// --- datasets ------------------------------------------------------------------

std::vector<const ManifestEntry*> Manifest::split(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == name) out.push_back(&e);
    return out;
}

namespace {

std::string relative_to(const std::filesystem::path& p, const std::filesystem::path& root) {
    return std::filesystem::path(p).lexically_relative(root).generic_string();
}

}  // namespace

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
    const auto root = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : manifest.entries) {
        list.push_back({{"id", e.id},
                        {"split", e.split},
                        {"files",
                         {{"partial", relative_to(e.partial, root)},
                          {"gt", relative_to(e.gt, root)},
                          {"dino_gt", relative_to(e.dino_gt, root)},
                          {"dino_inc", relative_to(e.dino_inc, root)},
                          {"mask", relative_to(e.mask, root)}}}});
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    out << list.dump(2) << '\n';
}

Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path.string());
    const auto j = nlohmann::json::parse(in);
    if (!j.is_array()) throw std::runtime_error("manifest must be a JSON list");
    Manifest m;
    m.root = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
    for (const auto& item : j) {
        ManifestEntry e;
        e.id = item.at("id").get<std::string>();
        e.split = item.at("split").get<std::string>();
        if (e.split != "train" && e.split != "val-seen" && e.split != "val-unseen") {
            throw std::runtime_error("manifest entry " + e.id + " has unknown split '" + e.split + "'");
        }
        const auto& f = item.at("files");
        e.partial = m.root / f.at("partial").get<std::string>();
        e.gt = m.root / f.at("gt").get<std::string>();
        e.dino_gt = m.root / f.at("dino_gt").get<std::string>();
        e.dino_inc = m.root / f.at("dino_inc").get<std::string>();
        e.mask = m.root / f.at("mask").get<std::string>();
        m.entries.push_back(std::move(e));
    }
    return m;
}

ManifestEntry write_sample(const std::filesystem::path& dir, const std::string& id,
                           const std::string& split, const SampleArtifacts& sample) {
    const auto sdir = dir / id;
    std::filesystem::create_directories(sdir);
    ManifestEntry e{id, split, sdir / "partial.vxl", sdir / "gt.vxl", sdir / "dino_gt.vxl",
                    sdir / "dino_inc.vxl", sdir / "mask.vxl"};
    write_volume(e.partial, sample.partial);
    write_volume(e.gt, sample.gt);
    write_volume(e.dino_gt, sample.dino_gt);
    write_volume(e.dino_inc, sample.dino_inc);
    write_volume(e.mask, sample.mask);
    return e;
}

std::string split_of(int index) {
    switch (index % 10) {
        case 9: return "val-unseen";
        case 8: return "val-seen";
        default: return "train";
    }
}

Manifest generate_dataset(const std::filesystem::path& out, const DatasetConfig& cfg) {
    if (cfg.count < 1) throw std::invalid_argument("dataset needs at least one sample");
    std::filesystem::create_directories(out);
    const TeacherOracle oracle(cfg.seed, cfg.feat_dim, 3);
    Manifest m;
    m.root = out;
    for (int i = 0; i < cfg.count; ++i) {
        std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                          static_cast<std::uint32_t>(i)};
        std::mt19937_64 rng(seq);
        const std::string split = split_of(i);
        const auto prog = random_program(rng, split == "val-unseen" ? ShapeFamily::Unseen : ShapeFamily::Seen);
        char id[32];
        std::snprintf(id, sizeof id, "sample_%04d", i);
        const auto sample = build_sample(prog, oracle, cfg.sample, rng());
        m.entries.push_back(write_sample(out, id, split, sample));
        if (cfg.write_views) std::filesystem::create_directories(out / "views" / id);
        if (cfg.write_views)
            for (std::size_t v = 0; v < sample.views.size(); ++v)
                write_view(out / "views" / id, "view_" + std::to_string(v), sample.views[v]);
    }
    write_manifest(out / "manifest.json", m);
    return m;
}

}  // namespace dinocomplete
