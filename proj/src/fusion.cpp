#include "dinocomplete/fusion.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace dinocomplete {

void CameraParams::validate() const {
    if (std::abs(K.determinant()) < 1e-12) throw std::invalid_argument("camera K is singular");
    if (std::abs(R.determinant() - 1.0) >= 1e-6 ||
        !(R * R.transpose()).isApprox(Mat3::Identity(), 1e-6)) {
        throw std::invalid_argument("camera R is not a rotation");
    }
}

CameraParams look_at_camera(const Vec3& eye, const Vec3& target, double focal_px, int width,
                            int height) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 up(0.0, 0.0, 1.0);
    if (std::abs(forward.dot(up)) > 0.999) up = Vec3(0.0, 1.0, 0.0);
    const Vec3 right = forward.cross(up).normalized();
    const Vec3 down = forward.cross(right);

    CameraParams cam;
    cam.R.col(0) = right;
    cam.R.col(1) = down;
    cam.R.col(2) = forward;
    cam.t = -cam.R.transpose() * eye;
    cam.K << focal_px, 0.0, 0.5 * width, 0.0, focal_px, 0.5 * height, 0.0, 0.0, 1.0;
    return cam;
}

void ViewObservation::validate() const {
    camera.validate();
    if (patch_size <= 0) throw std::invalid_argument("patch_size must be positive");
    if (depth.channels != 1) throw std::invalid_argument("depth raster must have one channel");
    if (depth.height != patch_features.height * patch_size ||
        depth.width != patch_features.width * patch_size) {
        throw std::invalid_argument("depth raster is not patch grid * patch_size");
    }
    for (float d : depth.values) {
        if (!(d >= 0.0f)) throw std::invalid_argument("negative or NaN depth");
    }
    for (float f : patch_features.values) {
        if (!std::isfinite(f)) throw std::invalid_argument("non-finite patch feature");
    }
}

void SplatAccumulator::merge(const SplatAccumulator& other) {
    if (!(spec == other.spec) || channels != other.channels) {
        throw std::invalid_argument("cannot merge accumulators on different grids");
    }
    for (std::size_t i = 0; i < feature_sum.size(); ++i) feature_sum[i] += other.feature_sum[i];
    for (std::size_t i = 0; i < weight_sum.size(); ++i) weight_sum[i] += other.weight_sum[i];
}

Vec3 back_project(double u, double w, double depth, const CameraParams& cam) {
    Eigen::FullPivLU<Mat3> lu(cam.K);
    if (!lu.isInvertible()) throw std::invalid_argument("camera K is not invertible");
    const Vec3 q(u, w, 1.0);
    const Vec3 cam_point = depth * lu.solve(q);
    // Row-vector form: (d K^-1 q~ - t) R^T.
    const Eigen::RowVector3d row = (cam_point - cam.t).transpose() * cam.R.transpose();
    return row.transpose();
}

std::optional<Vec3> patch_center(const ViewObservation& view, int patch) {
    const int ps = view.patch_size;
    const int py = patch / view.patches_x();
    const int px = patch % view.patches_x();
    const Mat3 k_inv = view.camera.K.inverse();
    Vec3 sum = Vec3::Zero();
    int count = 0;
    for (int row = py * ps; row < (py + 1) * ps; ++row) {
        for (int col = px * ps; col < (px + 1) * ps; ++col) {
            const double d = view.depth.at(0, row, col);
            if (d <= 0.0) continue;
            const Vec3 cam_point = d * (k_inv * Vec3(col + 0.5, row + 0.5, 1.0));
            sum += view.camera.R * (cam_point - view.camera.t);
            ++count;
        }
    }
    if (count == 0) return std::nullopt;
    return sum / count;
}

TrilinearStencil trilinear_weights(const Vec3& p, const GridSpec& spec) {
    TrilinearStencil out;
    const int x0 = static_cast<int>(std::floor(p.x()));
    const int y0 = static_cast<int>(std::floor(p.y()));
    const int z0 = static_cast<int>(std::floor(p.z()));
    for (int dz = 0; dz <= 1; ++dz) {
        const int z = z0 + dz;
        const double wz = 1.0 - std::abs(p.z() - z);
        if (z < 0 || z >= spec.edge || wz <= 0.0) continue;
        for (int dy = 0; dy <= 1; ++dy) {
            const int y = y0 + dy;
            const double wy = 1.0 - std::abs(p.y() - y);
            if (y < 0 || y >= spec.edge || wy <= 0.0) continue;
            for (int dx = 0; dx <= 1; ++dx) {
                const int x = x0 + dx;
                const double wx = 1.0 - std::abs(p.x() - x);
                if (x < 0 || x >= spec.edge || wx <= 0.0) continue;
                out.entries[out.size++] = {spec.index(x, y, z), wx * wy * wz};
            }
        }
    }
    return out;
}

SplatAccumulator splat_view(const ViewObservation& view, const GridSpec& spec) {
    const int channels = view.feature_channels();
    SplatAccumulator acc(spec, channels);
    const std::size_t nvox = spec.voxel_count();
    const int hw = view.patch_count();
    for (int i = 0; i < hw; ++i) {
        const auto center = patch_center(view, i);
        if (!center) continue;
        const int py = i / view.patches_x();
        const int px = i % view.patches_x();
        for (const auto& [voxel, w] : trilinear_weights(canonical_to_grid(*center, spec), spec)) {
            acc.weight_sum[voxel] += w;
            for (int c = 0; c < channels; ++c) {
                acc.feature_sum[c * nvox + voxel] += w * view.patch_features.at(c, py, px);
            }
        }
    }
    return acc;
}

FeatureVolume normalize_view(const SplatAccumulator& acc, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("normalize_view needs eps > 0");
    FeatureVolume out(acc.spec, acc.channels);
    const std::size_t nvox = acc.spec.voxel_count();
    for (int c = 0; c < acc.channels; ++c) {
        for (std::size_t v = 0; v < nvox; ++v) {
            const double w = acc.weight_sum[v];
            out.values[c * nvox + v] =
                w == 0.0 ? 0.0f : static_cast<float>(acc.feature_sum[c * nvox + v] / (w + eps));
        }
    }
    return out;
}

WeightField weights_of(const SplatAccumulator& acc) { return {acc.spec, acc.weight_sum}; }

std::pair<FeatureVolume, WeightField> tsdf_filter(const FeatureVolume& feat,
                                                  const WeightField& weights,
                                                  const TsdfVolume& gt) {
    const std::size_t nvox = gt.spec.voxel_count();
    if (feat.spec.edge != gt.spec.edge || weights.values.size() != nvox ||
        feat.values.size() != static_cast<std::size_t>(feat.channels) * nvox) {
        throw std::invalid_argument("tsdf_filter: shape mismatch between features, weights and tsdf");
    }
    std::pair<FeatureVolume, WeightField> out{feat, weights};
    for (std::size_t v = 0; v < nvox; ++v) {
        if (gt.values[v] <= 0.0f) continue;
        out.second.values[v] = 0.0;
        for (int c = 0; c < feat.channels; ++c) out.first.values[c * nvox + v] = 0.0f;
    }
    return out;
}

FeatureVolume fuse_views(const std::vector<std::pair<FeatureVolume, WeightField>>& per_view,
                         double eps) {
    if (per_view.empty()) throw std::invalid_argument("fuse_views needs at least one view");
    const auto& first = per_view.front().first;
    const std::size_t nvox = first.spec.voxel_count();
    for (const auto& [f, w] : per_view) {
        if (f.spec.edge != first.spec.edge || f.channels != first.channels ||
            w.values.size() != nvox) {
            throw std::invalid_argument("fuse_views: inconsistent view shapes");
        }
    }
    std::vector<double> num(static_cast<std::size_t>(first.channels) * nvox, 0.0);
    std::vector<double> den(nvox, 0.0);
    for (const auto& [f, w] : per_view) {
        for (std::size_t v = 0; v < nvox; ++v) {
            const double wv = w.values[v];
            if (wv == 0.0) continue;
            den[v] += wv;
            for (int c = 0; c < first.channels; ++c) num[c * nvox + v] += wv * f.values[c * nvox + v];
        }
    }
    FeatureVolume out(first.spec, first.channels);
    for (int c = 0; c < first.channels; ++c) {
        for (std::size_t v = 0; v < nvox; ++v) {
            out.values[c * nvox + v] = static_cast<float>(num[c * nvox + v] / (den[v] + eps));
        }
    }
    return out;
}

MaskVolume coverage_mask(const SplatAccumulator& acc) {
    MaskVolume m(acc.spec);
    for (std::size_t v = 0; v < m.values.size(); ++v) m.values[v] = acc.weight_sum[v] > 0.0 ? 1.0f : 0.0f;
    return m;
}

FeatureVolume incomplete_target(const FeatureVolume& fgt, const MaskVolume& cov) {
    const std::size_t nvox = cov.spec.voxel_count();
    if (fgt.spec.edge != cov.spec.edge ||
        fgt.values.size() != static_cast<std::size_t>(fgt.channels) * nvox) {
        throw std::invalid_argument("incomplete_target: shape mismatch");
    }
    FeatureVolume out = fgt;
    for (int c = 0; c < fgt.channels; ++c) {
        for (std::size_t v = 0; v < nvox; ++v) out.values[c * nvox + v] *= cov.values[v];
    }
    return out;
}

// --- camera / view files ----------------------------------------------------

namespace {

nlohmann::json mat_to_json(const Mat3& m) {
    nlohmann::json a = nlohmann::json::array();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
    return a;
}

Mat3 mat_from_json(const nlohmann::json& a, const char* key) {
    if (!a.is_array() || a.size() != 9) {
        throw std::invalid_argument(std::string("camera key '") + key + "' needs 9 numbers");
    }
    Mat3 m;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m(r, c) = a.at(r * 3 + c).get<double>();
    return m;
}

}  // namespace

void write_camera_json(const std::filesystem::path& path, const CameraFile& cam) {
    nlohmann::json j;
    j["K"] = mat_to_json(cam.camera.K);
    j["R"] = mat_to_json(cam.camera.R);
    j["t"] = {cam.camera.t.x(), cam.camera.t.y(), cam.camera.t.z()};
    j["patch_size"] = cam.patch_size;
    j["width"] = cam.width;
    j["height"] = cam.height;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write camera file: " + path.string());
    out << j.dump(2) << '\n';
}

CameraFile read_camera_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read camera file: " + path.string());
    const auto j = nlohmann::json::parse(in);
    CameraFile cam;
    cam.camera.K = mat_from_json(j.at("K"), "K");
    cam.camera.R = mat_from_json(j.at("R"), "R");
    const auto& t = j.at("t");
    if (!t.is_array() || t.size() != 3) throw std::invalid_argument("camera key 't' needs 3 numbers");
    cam.camera.t = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
    cam.patch_size = j.at("patch_size").get<int>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.camera.validate();
    return cam;
}

void write_view(const std::filesystem::path& dir, const std::string& stem,
                const ViewObservation& view) {
    write_camera_json(dir / (stem + "_camera.json"),
                      {view.camera, view.patch_size, view.depth.width, view.depth.height});
    auto raster_array = [](const Raster& r, VolumeKind kind) {
        VxlArray a;
        a.kind = kind;
        a.channels = static_cast<std::uint32_t>(r.channels);
        a.depth = 1;
        a.height = static_cast<std::uint32_t>(r.height);
        a.width = static_cast<std::uint32_t>(r.width);
        a.data = r.values;
        return a;
    };
    write_vxl(dir / (stem + "_depth.vxl"), raster_array(view.depth, VolumeKind::Tsdf));
    write_vxl(dir / (stem + "_features.vxl"), raster_array(view.patch_features, VolumeKind::Feature));
}

ViewObservation read_view(const std::filesystem::path& dir, const std::string& stem) {
    const CameraFile cam = read_camera_json(dir / (stem + "_camera.json"));
    auto to_raster = [](VxlArray a) {
        if (a.depth != 1) throw VxlError(VxlErrorCode::DimensionMismatch, "raster needs D = 1");
        Raster r;
        r.channels = static_cast<int>(a.channels);
        r.height = static_cast<int>(a.height);
        r.width = static_cast<int>(a.width);
        r.values = std::move(a.data);
        return r;
    };
    ViewObservation view;
    view.camera = cam.camera;
    view.patch_size = cam.patch_size;
    view.depth = to_raster(read_vxl(dir / (stem + "_depth.vxl")));
    view.patch_features = to_raster(read_vxl(dir / (stem + "_features.vxl")));
    if (view.depth.width != cam.width || view.depth.height != cam.height) {
        throw VxlError(VxlErrorCode::DimensionMismatch, "depth raster does not match camera size");
    }
    view.validate();
    return view;
}

}  // namespace dinocomplete
