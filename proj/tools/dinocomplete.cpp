// dinocomplete command-line front end.
//
// Every subcommand exits 0 on success. Failures print one JSON object
// {"error": {"code": ..., "message": ...}} on stderr and exit with the code
// listed in `Exit` below; `check` exits 1 when any gate fails.

#include "checks.hpp"

#include "dinocomplete/fusion.hpp"
#include "dinocomplete/metrics.hpp"
#include "dinocomplete/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>

using namespace dinocomplete;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stable exit codes.
enum Exit : int {
    kOk = 0,
    kCheckFailed = 1,
    kUsage = 2,
    kMissingFile = 3,
    kBadConfig = 4,
    kBadData = 5,
    kTrainingDiverged = 6,
    kInternal = 10,
};

struct CliError : std::runtime_error {
    CliError(std::string code, int exit, const std::string& msg)
        : std::runtime_error(msg), code(std::move(code)), exit(exit) {}
    std::string code;
    int exit;
};

int fail(const std::string& code, int exit, const std::string& message) {
    std::cerr << json{{"error", {{"code", code}, {"message", message}, {"exit", exit}}}}.dump() << std::endl;
    return exit;
}

void require_file(const fs::path& p) {
    if (!fs::is_regular_file(p)) throw CliError("missing_file", kMissingFile, "no such file: " + p.string());
}

void require_dir(const fs::path& p) {
    if (!fs::is_directory(p)) throw CliError("missing_file", kMissingFile, "no such directory: " + p.string());
}

fs::path manifest_of(const fs::path& data) {
    const auto m = fs::is_directory(data) ? data / "manifest.json" : data;
    require_file(m);
    return m;
}

// Grid edge of a dataset, taken from its first ground-truth volume.
GridSpec spec_of(const Manifest& m) {
    if (m.entries.empty()) throw CliError("empty_dataset", kBadData, "manifest lists no samples");
    const auto v = read_volume(m.entries.front().gt);
    return std::visit([](const auto& vol) { return vol.spec; }, v);
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw CliError("io", kMissingFile, "cannot write " + p.string());
    out << text;
}

std::string log_json(const TrainLog& log) {
    json j;
    j["epochs"] = json::array();
    for (const auto& e : log.epochs)
        j["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"cos", e.cos}, {"mse", e.mse}, {"mask", e.mask}});
    j["step_losses"] = log.step_losses;
    return j.dump(2);
}

TrainConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
    TrainConfig cfg;
    if (!path.empty()) {
        require_file(path);
        try {
            cfg = load_train_config(path);
        } catch (const std::exception& e) {
            throw CliError("invalid_config", kBadConfig, path + ": " + e.what());
        }
    }
    if (seed) cfg.seed = *seed;
    return cfg;
}

ModelConfig model_for(const TrainConfig& cfg, const GridSpec& spec) {
    if (cfg.edge != spec.edge)
        throw CliError("invalid_config", kBadConfig,
                       "config edge " + std::to_string(cfg.edge) + " does not match the data (" +
                           std::to_string(spec.edge) + ")");
    auto m = cfg.model();
    m.truncation = spec.truncation;
    return m;
}

std::string meta_json(const std::string& kind, const TrainConfig& cfg, const ModelConfig& m) {
    return json{{"kind", kind},
                {"variant", to_string(cfg.variant)},
                {"edge", m.edge},
                {"truncation", m.truncation},
                {"config", json::parse(train_config_to_json(cfg))}}
        .dump();
}

struct LoadedModel {
    TrainConfig cfg;
    ModelConfig model;
};

LoadedModel model_from_checkpoint(const fs::path& ckpt, const std::string& kind) {
    require_file(ckpt);
    const auto info = read_checkpoint_info(ckpt);
    json meta;
    try {
        meta = json::parse(info.meta_json);
    } catch (const json::exception&) {
        throw CliError("invalid_checkpoint", kBadData, ckpt.string() + ": metadata is not JSON");
    }
    if (meta.value("kind", "") != kind)
        throw CliError("invalid_checkpoint", kBadData, ckpt.string() + ": expected a " + kind + " checkpoint");
    LoadedModel out;
    out.cfg = train_config_from_json(meta.at("config").dump());
    GridSpec spec;
    spec.edge = meta.at("edge").get<int>();
    spec.truncation = meta.at("truncation").get<double>();
    out.model = model_for(out.cfg, spec);
    return out;
}

TsdfVolume read_input(const fs::path& p, const ModelConfig& m) {
    require_file(p);
    GridSpec spec;
    spec.edge = m.edge;
    spec.truncation = m.truncation;
    return read_tsdf(p, spec);
}

// --- subcommands ---------------------------------------------------------------

struct SynthArgs {
    int n = 200, views = 8, feat_dim = 16, edge = 32;
    std::uint64_t seed = 0;
    std::string out;
    bool export_views = false;
};

int run_synth(const SynthArgs& a) {
    DatasetConfig cfg;
    cfg.count = a.n;
    cfg.seed = a.seed;
    cfg.feat_dim = a.feat_dim;
    cfg.sample.views = a.views;
    cfg.sample.spec.edge = a.edge;
    cfg.write_views = a.export_views;
    try {
        cfg.sample.spec.validate();
    } catch (const std::exception& e) {
        throw CliError("invalid_argument", kUsage, e.what());
    }
    if (a.n < 1 || a.views < 1 || a.feat_dim < 1) throw CliError("invalid_argument", kUsage, "--n, --views and --feat-dim must be >= 1");
    const auto m = generate_dataset(a.out, cfg);
    std::cout << json{{"samples", m.entries.size()}, {"manifest", (fs::path(a.out) / "manifest.json").string()}}.dump()
              << std::endl;
    return kOk;
}

struct FuseArgs {
    std::string views, gt, out;
    int edge = 0;
};

int run_fuse(const FuseArgs& a) {
    require_dir(a.views);
    require_file(a.gt);
    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(a.views)) {
        const auto name = e.path().filename().string();
        const std::string suffix = "_camera.json";
        if (name.size() > suffix.size() && name.ends_with(suffix)) stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
    // Natural order so view_10 follows view_9; the first stem is the input view.
    std::sort(stems.begin(), stems.end(), [](const std::string& x, const std::string& y) {
        return x.size() != y.size() ? x.size() < y.size() : x < y;
    });
    if (stems.empty()) throw CliError("missing_file", kMissingFile, "no *_camera.json views in " + a.views);

    GridSpec spec;
    const auto gt_any = read_volume(a.gt);
    if (!std::holds_alternative<TsdfVolume>(gt_any)) throw CliError("bad_volume", kBadData, a.gt + " is not a TSDF volume");
    spec.edge = a.edge > 0 ? a.edge : std::get<TsdfVolume>(gt_any).spec.edge;
    const auto gt = read_tsdf(a.gt, spec);

    std::vector<std::pair<FeatureVolume, WeightField>> filtered;
    MaskVolume coverage(spec);
    for (std::size_t v = 0; v < stems.size(); ++v) {
        const auto acc = splat_view(read_view(a.views, stems[v]), spec);
        if (v == 0) coverage = coverage_mask(acc);
        filtered.push_back(tsdf_filter(normalize_view(acc), weights_of(acc), gt));
    }
    const auto fused = fuse_views(filtered);
    MaskVolume mask(spec);
    for (const auto& [f, w] : filtered)
        for (std::size_t k = 0; k < w.values.size(); ++k)
            if (w.values[k] > 0) mask.values[k] = 1.0f;
    fs::create_directories(a.out);
    const fs::path out(a.out);
    write_volume(out / "dino_gt.vxl", fused);
    write_volume(out / "dino_inc.vxl", incomplete_target(fused, coverage));
    write_volume(out / "mask.vxl", mask);
    write_volume(out / "coverage.vxl", coverage);
    std::cout << json{{"views", stems.size()}, {"out", a.out}}.dump() << std::endl;
    return kOk;
}

struct TrainArgs {
    std::string data, config, out, log, student;
    std::optional<std::uint64_t> seed;
};

void print_epoch(const char* what, const EpochStats& s) {
    json j{{"phase", what}, {"epoch", s.epoch}, {"loss", s.loss}};
    if (std::string(what) == "distill") {
        j["cos"] = s.cos;
        j["mse"] = s.mse;
        j["mask"] = s.mask;
    }
    std::cout << j.dump() << std::endl;
}

int run_distill_train(const TrainArgs& a) {
    const auto cfg = load_config(a.config, a.seed);
    const auto manifest = read_manifest(manifest_of(a.data));
    const auto spec = spec_of(manifest);
    const auto model = model_for(cfg, spec);
    const auto train = load_split(manifest, "train", spec, cfg.feat_dim);
    DistillNet net(model, cfg.seed);
    const auto log = train_distill(net, train, cfg, [](const EpochStats& s) { print_epoch("distill", s); });
    save_checkpoint(a.out, net.params(), meta_json("student", cfg, model));
    if (!a.log.empty()) write_text(a.log, log_json(log));
    return kOk;
}

int run_complete_train(const TrainArgs& a) {
    const auto cfg = load_config(a.config, a.seed);
    const auto manifest = read_manifest(manifest_of(a.data));
    const auto spec = spec_of(manifest);
    const auto model = model_for(cfg, spec);
    const auto train = load_split(manifest, "train", spec, cfg.feat_dim);
    CompletionNet net(model, cfg.variant, cfg.seed + 1);
    if (!a.student.empty()) {
        if (!net.has_student())
            throw CliError("invalid_argument", kUsage, "--student given but variant tsdf_only has no student");
        require_file(a.student);
        load_checkpoint(a.student, net.params(), "student.");
    }
    const auto log = train_completion(net, train, cfg, [](const EpochStats& s) { print_epoch("complete", s); });
    save_checkpoint(a.out, net.params(), meta_json("completion", cfg, model));
    if (!a.log.empty()) write_text(a.log, log_json(log));
    return kOk;
}

struct CompleteArgs {
    std::string model, input, out, data, split = "val", out_dir;
};

int run_complete(const CompleteArgs& a) {
    const auto loaded = model_from_checkpoint(a.model, "completion");
    CompletionNet net(loaded.model, loaded.cfg.variant, 0);
    load_checkpoint(a.model, net.params());
    if (!a.input.empty()) {
        if (a.out.empty()) throw CliError("invalid_argument", kUsage, "--input needs --out");
        write_volume(a.out, complete_forward(net, read_input(a.input, loaded.model)));
        return kOk;
    }
    if (a.data.empty() || a.out_dir.empty())
        throw CliError("invalid_argument", kUsage, "give --input/--out or --data/--out-dir");
    const auto manifest = read_manifest(manifest_of(a.data));
    fs::create_directories(a.out_dir);
    int n = 0;
    for (const auto& e : manifest.entries) {
        const bool take = a.split == "all" || e.split == a.split ||
                          (a.split == "val" && (e.split == "val-seen" || e.split == "val-unseen"));
        if (!take) continue;
        write_volume(fs::path(a.out_dir) / (e.id + ".vxl"), complete_forward(net, read_input(e.partial, loaded.model)));
        ++n;
    }
    std::cout << json{{"completed", n}, {"out_dir", a.out_dir}}.dump() << std::endl;
    return kOk;
}

struct EvalArgs {
    std::string pred, gt, data, split = "val", out, csv;
    bool copy_baseline = false;
};

int run_eval(const EvalArgs& a) {
    EvalReport report;
    json config{{"split", a.split}, {"copy_baseline", a.copy_baseline}};
    if (!a.data.empty()) {
        const auto manifest = read_manifest(manifest_of(a.data));
        const auto spec = spec_of(manifest);
        if (a.pred.empty() && !a.copy_baseline) throw CliError("invalid_argument", kUsage, "--data needs --pred or --copy-baseline");
        if (!a.pred.empty()) require_dir(a.pred);
        config["data"] = a.data;
        for (const auto& e : manifest.entries) {
            const bool take = a.split == "all" || e.split == a.split ||
                              (a.split == "val" && (e.split == "val-seen" || e.split == "val-unseen"));
            if (!take) continue;
            const fs::path pred = a.copy_baseline ? e.partial : fs::path(a.pred) / (e.id + ".vxl");
            require_file(pred);
            report.add(e.id, e.split, read_tsdf(pred, spec), read_tsdf(e.gt, spec));
        }
    } else {
        if (a.pred.empty() || a.gt.empty()) throw CliError("invalid_argument", kUsage, "give --pred and --gt, or --data");
        require_dir(a.pred);
        require_dir(a.gt);
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(a.gt))
            if (e.is_regular_file() && e.path().extension() == ".vxl") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& g : files) {
            const auto p = fs::path(a.pred) / g.filename();
            require_file(p);
            const auto gv = read_volume(g);
            if (!std::holds_alternative<TsdfVolume>(gv)) throw CliError("bad_volume", kBadData, g.string() + " is not a TSDF volume");
            const auto spec = std::get<TsdfVolume>(gv).spec;
            report.add(g.stem().string(), "all", read_tsdf(p, spec), std::get<TsdfVolume>(gv));
        }
        config["pred"] = a.pred;
        config["gt"] = a.gt;
    }
    if (report.samples.empty()) throw CliError("empty_dataset", kBadData, "nothing to evaluate");
    report.config_json = config.dump();
    const auto text = report.to_json();
    if (a.out.empty())
        std::cout << text << std::endl;
    else
        write_text(a.out, text);
    if (!a.csv.empty()) write_text(a.csv, report.to_csv());
    return kOk;
}

struct PcaArgs {
    std::vector<std::string> features, masks;
    std::string out_dir, model, input;
};

int run_viz_pca(const PcaArgs& a) {
    std::vector<FeatureVolume> feats;
    std::vector<MaskVolume> masks;
    std::vector<std::string> stems;
    if (!a.model.empty()) {
        // Student features of one TSDF input, colored over the student's own mask.
        const auto loaded = model_from_checkpoint(a.model, "student");
        DistillNet net(loaded.model, 0);
        load_checkpoint(a.model, net.params());
        auto [f, m] = student_forward(net, read_input(a.input, loaded.model));
        for (auto& v : m.values) v = v >= 0.5f ? 1.0f : 0.0f;
        feats.push_back(std::move(f));
        masks.push_back(std::move(m));
        stems.push_back(fs::path(a.input).stem().string() + "_student");
    } else {
        if (a.features.empty()) throw CliError("invalid_argument", kUsage, "give --features or --model/--input");
        if (!a.masks.empty() && a.masks.size() != a.features.size())
            throw CliError("invalid_argument", kUsage, "--mask count must match --features");
        for (std::size_t i = 0; i < a.features.size(); ++i) {
            require_file(a.features[i]);
            const auto any = read_volume(a.features[i]);
            if (!std::holds_alternative<FeatureVolume>(any))
                throw CliError("bad_volume", kBadData, a.features[i] + " is not a feature volume");
            feats.push_back(std::get<FeatureVolume>(any));
            if (!a.masks.empty()) {
                require_file(a.masks[i]);
                masks.push_back(read_mask(a.masks[i], feats.back().spec));
            } else {
                masks.emplace_back(feats.back().spec, 1.0f);
            }
            stems.push_back(fs::path(a.features[i]).stem().string());
        }
        // Same file name in different sample directories: qualify with the directory.
        if (std::set<std::string>(stems.begin(), stems.end()).size() != stems.size())
            for (std::size_t i = 0; i < stems.size(); ++i)
                stems[i] = fs::path(a.features[i]).parent_path().filename().string() + "_" + stems[i];
    }
    // One shared embedding so colors are comparable across the inputs.
    std::vector<MaskedFeatures> fit;
    for (std::size_t i = 0; i < feats.size(); ++i) fit.push_back({&feats[i], &masks[i]});
    const auto basis = fit_pca(fit);
    fs::create_directories(a.out_dir);
    json written = json::array();
    for (std::size_t i = 0; i < feats.size(); ++i) {
        const auto path = fs::path(a.out_dir) / (stems[i] + "_rgb.vxl");
        write_volume(path, apply_pca(basis, feats[i], &masks[i]));
        written.push_back(path.string());
    }
    std::cout << json{{"written", written}}.dump() << std::endl;
    return kOk;
}

int run_check() {
    bool all = true;
    for (const auto& r : checks::run_oracle_checks()) {
        std::cout << checks::format_result(r) << std::endl;
        all = all && r.pass;
    }
    return all ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dinocomplete: feature-distilled TSDF shape completion at desk scale"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic dataset with manifest");
    s->add_option("--n", synth.n, "number of samples")->capture_default_str();
    s->add_option("--seed", synth.seed, "dataset seed")->capture_default_str();
    s->add_option("--out", synth.out, "output directory")->required();
    s->add_option("--views", synth.views, "teacher views per sample")->capture_default_str();
    s->add_option("--feat-dim", synth.feat_dim, "teacher feature channels")->capture_default_str();
    s->add_option("--edge", synth.edge, "grid edge")->capture_default_str();
    s->add_flag("--export-views", synth.export_views, "also write the rendered views under out/views/");

    FuseArgs fuse;
    auto* f = app.add_subcommand("fuse", "fuse stored views into teacher targets");
    f->add_option("--views", fuse.views, "directory of <stem>_camera.json/_depth.vxl/_features.vxl")->required();
    f->add_option("--gt", fuse.gt, "ground-truth TSDF used for filtering")->required();
    f->add_option("--out", fuse.out, "output directory")->required();
    f->add_option("--edge", fuse.edge, "grid edge (default: from --gt)");

    TrainArgs dtrain;
    auto* d = app.add_subcommand("distill-train", "pretrain the student against teacher features");
    d->add_option("--data", dtrain.data, "dataset directory or manifest")->required();
    d->add_option("--config", dtrain.config, "training config JSON");
    d->add_option("--out", dtrain.out, "checkpoint path")->required();
    d->add_option("--log", dtrain.log, "per-epoch loss log (JSON)");
    d->add_option("--seed", dtrain.seed, "override the config seed");

    TrainArgs ctrain;
    auto* c = app.add_subcommand("complete-train", "train the completion network");
    c->add_option("--data", ctrain.data, "dataset directory or manifest")->required();
    c->add_option("--config", ctrain.config, "training config JSON");
    c->add_option("--out", ctrain.out, "checkpoint path")->required();
    c->add_option("--log", ctrain.log, "per-epoch loss log (JSON)");
    c->add_option("--student", ctrain.student, "distilled student checkpoint");
    c->add_option("--seed", ctrain.seed, "override the config seed");

    CompleteArgs complete;
    auto* p = app.add_subcommand("complete", "run a trained completion model");
    p->add_option("--model", complete.model, "completion checkpoint")->required();
    p->add_option("--input", complete.input, "partial TSDF volume");
    p->add_option("--out", complete.out, "output TSDF volume");
    p->add_option("--data", complete.data, "dataset directory or manifest");
    p->add_option("--split", complete.split, "train | val-seen | val-unseen | val | all")->capture_default_str();
    p->add_option("--out-dir", complete.out_dir, "directory for <id>.vxl predictions");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "score predictions (CD, IoU, l1)");
    e->add_option("--pred", eval.pred, "prediction directory");
    e->add_option("--gt", eval.gt, "ground-truth directory (matched by file name)");
    e->add_option("--data", eval.data, "dataset directory or manifest (predictions named <id>.vxl)");
    e->add_option("--split", eval.split, "split when using --data")->capture_default_str();
    e->add_flag("--copy-baseline", eval.copy_baseline, "score the partial input itself");
    e->add_option("--out", eval.out, "report JSON (default: stdout)");
    e->add_option("--csv", eval.csv, "also write a flat CSV table");

    PcaArgs pca;
    auto* v = app.add_subcommand("viz-pca", "shared PCA colorization of feature volumes");
    v->add_option("--features", pca.features, "feature volumes");
    v->add_option("--mask", pca.masks, "masks, one per feature volume");
    v->add_option("--model", pca.model, "student checkpoint (with --input)");
    v->add_option("--input", pca.input, "TSDF input for the student");
    v->add_option("--out-dir", pca.out_dir, "output directory")->required();

    auto* k = app.add_subcommand("check", "run the oracle and gradient gates");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        return fail("usage", kUsage, ex.what());
    }

    try {
        if (*s) return run_synth(synth);
        if (*f) return run_fuse(fuse);
        if (*d) return run_distill_train(dtrain);
        if (*c) return run_complete_train(ctrain);
        if (*p) return run_complete(complete);
        if (*e) return run_eval(eval);
        if (*v) return run_viz_pca(pca);
        if (*k) return run_check();
    } catch (const CliError& ex) {
        return fail(ex.code, ex.exit, ex.what());
    } catch (const VxlError& ex) {
        return fail(std::string("vxl_") + to_string(ex.code()), kBadData, ex.what());
    } catch (const MetricError& ex) {
        return fail("metric", kBadData, ex.what());
    } catch (const TrainingError& ex) {
        return fail("training_diverged", kTrainingDiverged, ex.what());
    } catch (const json::exception& ex) {
        return fail("invalid_json", kBadConfig, ex.what());
    } catch (const std::invalid_argument& ex) {
        return fail("invalid_argument", kBadConfig, ex.what());
    } catch (const std::exception& ex) {
        return fail("runtime", kInternal, ex.what());
    }
    return kInternal;
}
