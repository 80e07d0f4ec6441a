#include "dinocomplete/metrics.hpp"

#include <json.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace dinocomplete {

namespace {

void require_same(const TsdfVolume& a, const TsdfVolume& b, const char* what) {
    if (!(a.spec == b.spec) || a.values.size() != b.values.size()) {
        throw MetricError(std::string(what) + ": volumes have different grids");
    }
}

struct Voxel {
    int x, y, z;
};

std::vector<Voxel> occupied(const TsdfVolume& v) {
    std::vector<Voxel> out;
    const int g = v.spec.edge;
    for (int z = 0; z < g; ++z)
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x)
                if (v.at(x, y, z) <= 0) out.push_back({x, y, z});
    return out;
}

// Mean over `from` of the distance to the nearest voxel of `to`.
double directed(const std::vector<Voxel>& from, const std::vector<Voxel>& to, const TsdfVolume& to_vol) {
    double total = 0;
    for (const auto& p : from) {
        if (to_vol.at(p.x, p.y, p.z) <= 0) continue;  // nearest is itself
        long best = std::numeric_limits<long>::max();
        for (const auto& q : to) {
            const long dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        total += std::sqrt(static_cast<double>(best));
    }
    return total / static_cast<double>(from.size());
}

}  // namespace

double iou(const TsdfVolume& pred, const TsdfVolume& gt) {
    require_same(pred, gt, "iou");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const bool p = pred.values[i] <= 0, g = gt.values[i] <= 0;
        inter += p && g;
        uni += p || g;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double chamfer_points(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
    if (p.empty() || q.empty()) throw MetricError("chamfer: empty point set");
    auto one_way = [](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
        double total = 0;
        for (const auto& x : a) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& y : b) best = std::min(best, (x - y).squaredNorm());
            total += std::sqrt(best);
        }
        return total / static_cast<double>(a.size());
    };
    return 0.5 * (one_way(p, q) + one_way(q, p));
}

double chamfer(const TsdfVolume& pred, const TsdfVolume& gt) {
    require_same(pred, gt, "chamfer");
    const auto p = occupied(pred);
    const auto q = occupied(gt);
    if (p.empty() || q.empty()) throw MetricError("chamfer: a volume has no occupied voxel");
    return 0.5 * (directed(p, q, gt) + directed(q, p, pred));
}

double l1_error(const TsdfVolume& pred, const TsdfVolume& gt) {
    require_same(pred, gt, "l1_error");
    double total = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i)
        total += std::abs(static_cast<double>(pred.values[i]) - gt.values[i]);
    return total / (static_cast<double>(pred.values.size()) * gt.spec.truncation);
}

// --- reports -------------------------------------------------------------------

SampleMetrics& EvalReport::add(const std::string& id, const std::string& split, const TsdfVolume& pred,
                               const TsdfVolume& gt) {
    SampleMetrics m;
    m.id = id;
    m.split = split;
    m.iou = iou(pred, gt);
    m.l1 = l1_error(pred, gt);
    try {
        m.cd = chamfer(pred, gt);
    } catch (const MetricError&) {
        m.cd.reset();
    }
    samples.push_back(std::move(m));
    return samples.back();
}

std::vector<SplitSummary> EvalReport::summary() const {
    std::vector<SplitSummary> rows;
    auto row_for = [&](const std::string& split) -> SplitSummary& {
        for (auto& r : rows)
            if (r.split == split) return r;
        rows.push_back({split});
        return rows.back();
    };
    SplitSummary all{"all"};
    for (const auto& s : samples) {
        for (SplitSummary* r : {&row_for(s.split), &all}) {
            ++r->count;
            r->iou += s.iou;
            r->l1 += s.l1;
            if (s.cd) {
                ++r->cd_count;
                r->cd += *s.cd;
            }
        }
    }
    rows.push_back(all);
    for (auto& r : rows) {
        if (r.count) {
            r.iou /= r.count;
            r.l1 /= r.count;
        }
        if (r.cd_count) r.cd /= r.cd_count;
    }
    return rows;
}

std::string EvalReport::to_json() const {
    using nlohmann::json;
    json per = json::array();
    for (const auto& s : samples) {
        per.push_back({{"id", s.id},
                       {"split", s.split},
                       {"cd", s.cd ? json(*s.cd) : json(nullptr)},
                       {"iou", s.iou},
                       {"l1", s.l1}});
    }
    json splits = json::object();
    for (const auto& r : summary()) {
        splits[r.split] = {{"count", r.count},
                           {"cd_count", r.cd_count},
                           {"cd", r.cd_count ? json(r.cd) : json(nullptr)},
                           {"iou", r.iou},
                           {"l1", r.l1}};
    }
    return json{{"samples", per}, {"splits", splits}, {"config", json::parse(config_json)}}.dump(2);
}

std::string EvalReport::to_csv() const {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "id,split,cd,iou,l1\n";
    for (const auto& s : samples) {
        out << s.id << ',' << s.split << ',';
        if (s.cd) out << *s.cd;
        out << ',' << s.iou << ',' << s.l1 << '\n';
    }
    return out.str();
}

// --- PCA -----------------------------------------------------------------------

namespace {

bool selected(const MaskVolume* mask, std::size_t v) { return !mask || mask->values[v] > 0.5f; }

}  // namespace

PcaBasis fit_pca(const std::vector<MaskedFeatures>& volumes) {
    if (volumes.empty()) throw MetricError("pca: no volumes to fit");
    const int c = volumes.front().features->channels;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(c);
    std::size_t n = 0;
    for (const auto& mv : volumes) {
        if (mv.features->channels != c) throw MetricError("pca: volumes have different channel counts");
        if (mv.mask && mv.mask->values.size() != mv.features->spec.voxel_count()) {
            throw MetricError("pca: mask grid does not match the features");
        }
        const std::size_t vox = mv.features->spec.voxel_count();
        for (std::size_t v = 0; v < vox; ++v) {
            if (!selected(mv.mask, v)) continue;
            for (int k = 0; k < c; ++k) sum[k] += mv.features->values[k * vox + v];
            ++n;
        }
    }
    if (n < 3) throw MetricError("pca: needs at least 3 masked voxels, got " + std::to_string(n));
    const Eigen::VectorXd mean = sum / static_cast<double>(n);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(c, c);
    Eigen::VectorXd x(c);
    for (const auto& mv : volumes) {
        const std::size_t vox = mv.features->spec.voxel_count();
        for (std::size_t v = 0; v < vox; ++v) {
            if (!selected(mv.mask, v)) continue;
            for (int k = 0; k < c; ++k) x[k] = mv.features->values[k * vox + v] - mean[k];
            cov.selfadjointView<Eigen::Lower>().rankUpdate(x);
        }
    }
    cov = cov.selfadjointView<Eigen::Lower>();
    cov /= static_cast<double>(n);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);

    PcaBasis b;
    b.channels = c;
    b.mean.assign(mean.data(), mean.data() + c);
    b.components.assign(3 * static_cast<std::size_t>(c), 0.0);
    for (int j = 0; j < 3 && j < c; ++j) {
        const int col = c - 1 - j;  // eigenvalues ascend
        const double lambda = eig.eigenvalues()[col];
        if (!(lambda > 1e-12 * std::max(top, 1.0)) || lambda <= 0) continue;
        Eigen::VectorXd e = eig.eigenvectors().col(col);
        // Sign convention: the largest-magnitude entry is positive.
        Eigen::Index arg;
        e.cwiseAbs().maxCoeff(&arg);
        if (e[arg] < 0) e = -e;
        for (int k = 0; k < c; ++k) b.components[j * c + k] = e[k];
        b.valid[j] = true;
        b.lo[j] = std::numeric_limits<double>::infinity();
        b.hi[j] = -std::numeric_limits<double>::infinity();
    }
    for (const auto& mv : volumes) {
        const std::size_t vox = mv.features->spec.voxel_count();
        for (std::size_t v = 0; v < vox; ++v) {
            if (!selected(mv.mask, v)) continue;
            for (int j = 0; j < 3; ++j) {
                if (!b.valid[j]) continue;
                double p = 0;
                for (int k = 0; k < c; ++k) p += (mv.features->values[k * vox + v] - mean[k]) * b.components[j * c + k];
                b.lo[j] = std::min(b.lo[j], p);
                b.hi[j] = std::max(b.hi[j], p);
            }
        }
    }
    return b;
}

FeatureVolume apply_pca(const PcaBasis& b, const FeatureVolume& f, const MaskVolume* mask) {
    if (f.channels != b.channels) throw MetricError("pca: feature channels do not match the fitted basis");
    const int c = b.channels;
    const std::size_t vox = f.spec.voxel_count();
    FeatureVolume out(f.spec, 3);
    for (std::size_t v = 0; v < vox; ++v) {
        if (!selected(mask, v)) continue;
        for (int j = 0; j < 3; ++j) {
            double color = 0.5;
            if (b.valid[j]) {
                double p = 0;
                for (int k = 0; k < c; ++k) p += (f.values[k * vox + v] - b.mean[k]) * b.components[j * c + k];
                const double span = b.hi[j] - b.lo[j];
                color = span > 0 ? std::clamp((p - b.lo[j]) / span, 0.0, 1.0) : 0.5;
            }
            out.values[j * vox + v] = static_cast<float>(color);
        }
    }
    return out;
}

FeatureVolume pca_colorize(const FeatureVolume& features, const MaskVolume& mask) {
    return apply_pca(fit_pca({{&features, &mask}}), features, &mask);
}

}  // namespace dinocomplete
