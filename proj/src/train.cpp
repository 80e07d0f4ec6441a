#include "dinocomplete/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace dinocomplete {

using diff::Tensor;
using diff::Var;
using nlohmann::json;

// --- config --------------------------------------------------------------------

ModelConfig TrainConfig::model() const {
    ModelConfig m;
    m.edge = edge;
    m.feat_dim = feat_dim;
    m.state_dim = state_dim;
    m.token_dim = token_dim;
    m.chunk_a = chunk_a;
    m.chunk_b = chunk_b;
    return m;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be finite and >= 0");
    if (max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
    loss_weights.validate();
    model().validate();
}

namespace {

template <class T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            throw std::invalid_argument("unknown key '" + key + "' in " + where);
        }
    }
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    reject_unknown(j,
                   {"seed", "epochs", "batch_size", "lr", "loss_weights", "edge", "chunk_a", "chunk_b", "feat_dim",
                    "state_dim", "token_dim", "variant", "freeze_student", "max_steps"},
                   "training config");
    TrainConfig c;
    try {
        take(j, "seed", c.seed);
        take(j, "epochs", c.epochs);
        take(j, "batch_size", c.batch_size);
        take(j, "lr", c.lr);
        take(j, "edge", c.edge);
        take(j, "chunk_a", c.chunk_a);
        take(j, "chunk_b", c.chunk_b);
        take(j, "feat_dim", c.feat_dim);
        take(j, "state_dim", c.state_dim);
        take(j, "token_dim", c.token_dim);
        take(j, "freeze_student", c.freeze_student);
        take(j, "max_steps", c.max_steps);
        if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
        if (j.contains("loss_weights")) {
            const auto& w = j.at("loss_weights");
            if (!w.is_object()) throw std::invalid_argument("loss_weights must be an object");
            reject_unknown(w, {"w_fn", "w_fp", "w_correct", "lambda_cos", "lambda_mse", "lambda_mask", "beta"},
                           "loss_weights");
            auto& lw = c.loss_weights;
            take(w, "w_fn", lw.w_fn);
            take(w, "w_fp", lw.w_fp);
            take(w, "w_correct", lw.w_correct);
            take(w, "lambda_cos", lw.lambda_cos);
            take(w, "lambda_mse", lw.lambda_mse);
            take(w, "lambda_mask", lw.lambda_mask);
            take(w, "beta", lw.beta);
        }
    } catch (const json::type_error& e) {
        throw std::invalid_argument(std::string("config has a value of the wrong type: ") + e.what());
    }
    c.validate();
    return c;
}

std::string train_config_to_json(const TrainConfig& c) {
    const auto& w = c.loss_weights;
    const json j = {{"seed", c.seed},
                    {"epochs", c.epochs},
                    {"batch_size", c.batch_size},
                    {"lr", c.lr},
                    {"loss_weights",
                     {{"w_fn", w.w_fn},
                      {"w_fp", w.w_fp},
                      {"w_correct", w.w_correct},
                      {"lambda_cos", w.lambda_cos},
                      {"lambda_mse", w.lambda_mse},
                      {"lambda_mask", w.lambda_mask},
                      {"beta", w.beta}}},
                    {"edge", c.edge},
                    {"chunk_a", c.chunk_a},
                    {"chunk_b", c.chunk_b},
                    {"feat_dim", c.feat_dim},
                    {"state_dim", c.state_dim},
                    {"token_dim", c.token_dim},
                    {"variant", to_string(c.variant)},
                    {"freeze_student", c.freeze_student},
                    {"max_steps", c.max_steps}};
    return j.dump(2);
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return train_config_from_json(ss.str());
}

// --- data ----------------------------------------------------------------------

std::vector<TrainSample> load_split(const Manifest& m, const std::string& split, const GridSpec& spec,
                                    int feat_dim) {
    std::vector<TrainSample> out;
    for (const auto& e : m.entries) {
        const bool take_it = split == "val" ? (e.split == "val-seen" || e.split == "val-unseen") : e.split == split;
        if (!take_it) continue;
        TrainSample s;
        s.id = e.id;
        const auto partial = read_tsdf(e.partial, spec);
        const auto gt = read_tsdf(e.gt, spec);
        const auto feat = read_features(e.dino_gt, spec);
        const auto mask = read_mask(e.mask, spec);
        if (feat.channels != feat_dim) {
            throw std::runtime_error(e.id + ": teacher features have " + std::to_string(feat.channels) +
                                     " channels, config expects " + std::to_string(feat_dim));
        }
        s.input.resize(partial.values.size());
        for (std::size_t i = 0; i < s.input.size(); ++i) s.input[i] = partial.values[i] / spec.truncation;
        s.gt.assign(gt.values.begin(), gt.values.end());
        s.dino_gt.assign(feat.values.begin(), feat.values.end());
        s.mask.assign(mask.values.begin(), mask.values.end());
        out.push_back(std::move(s));
    }
    return out;
}

// --- training loop -------------------------------------------------------------

namespace {

struct StepLoss {
    Var total;
    double cos = 0, mse = 0, mask = 0;
};

Var input_var(const TrainSample& s, int edge) {
    return diff::constant(Tensor({1, edge, edge, edge}, s.input));
}

std::vector<Var> trainable(const ParamStore& store, bool freeze_student) {
    std::vector<Var> out;
    for (std::size_t i = 0; i < store.names().size(); ++i) {
        if (freeze_student && store.names()[i].rfind("student.", 0) == 0) continue;
        out.push_back(store.vars()[i]);
    }
    return out;
}

TrainLog run(ParamStore& store, const std::vector<TrainSample>& data, const TrainConfig& cfg,
             const std::function<StepLoss(const TrainSample&)>& loss_of, const EpochCallback& on_epoch) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("training set is empty");
    auto params = trainable(store, cfg.freeze_student);
    diff::AdamState adam;
    diff::AdamConfig opt;
    opt.lr = cfg.lr;
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    TrainLog log;
    int steps = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        EpochStats stats;
        stats.epoch = epoch;
        std::size_t seen = 0;
        bool stop = false;
        for (std::size_t start = 0; start < order.size() && !stop; start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            store.zero_grad();
            double step_loss = 0;
            for (std::size_t k = start; k < end; ++k) {
                const auto& sample = data[order[k]];
                const StepLoss l = loss_of(sample);
                const double v = l.total.data()[0];
                if (!std::isfinite(v)) {
                    std::ostringstream msg;
                    msg << "non-finite loss at epoch " << epoch << ", step " << steps << ", sample " << sample.id
                        << ": total=" << v << " cos=" << l.cos << " mse=" << l.mse << " mask=" << l.mask;
                    throw TrainingError(msg.str());
                }
                diff::backward(diff::scale(l.total, inv));
                step_loss += v * inv;
                stats.loss += v;
                stats.cos += l.cos;
                stats.mse += l.mse;
                stats.mask += l.mask;
                ++seen;
            }
            diff::adam_step(params, adam, opt);
            log.step_losses.push_back(step_loss);
            ++steps;
            stop = cfg.max_steps > 0 && steps >= cfg.max_steps;
        }
        const double n = static_cast<double>(seen);
        stats.loss /= n;
        stats.cos /= n;
        stats.mse /= n;
        stats.mask /= n;
        log.epochs.push_back(stats);
        if (on_epoch) on_epoch(stats);
        if (stop) break;
    }
    store.zero_grad();
    return log;
}

}  // namespace

TrainLog train_distill(DistillNet& net, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
    const int g = net.config().edge;
    const auto& w = cfg.loss_weights;
    return run(
        net.params(), data, cfg,
        [&](const TrainSample& s) {
            const auto out = net.forward(input_var(s, g));
            const auto t = diff::distill_loss(out.features, s.dino_gt, out.mask, s.mask, w.lambda_cos, w.lambda_mse,
                                              w.lambda_mask);
            return StepLoss{t.total, t.cos, t.mse, t.mask};
        },
        on_epoch);
}

TrainLog train_completion(CompletionNet& net, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                          const EpochCallback& on_epoch) {
    const int g = net.config().edge;
    return run(
        net.params(), data, cfg,
        [&](const TrainSample& s) { return StepLoss{tsdf_loss(net.forward(input_var(s, g)), s.gt, cfg.loss_weights)}; },
        on_epoch);
}

double masked_cosine(const DistillNet& net, const std::vector<TrainSample>& data, const GridSpec& spec) {
    diff::NoGradGuard guard;
    const std::size_t v = spec.voxel_count();
    const int c = net.config().feat_dim;
    double total = 0;
    std::size_t count = 0;
    for (const auto& s : data) {
        const auto out = net.forward(input_var(s, spec.edge));
        const auto z = out.features.data();
        for (std::size_t i = 0; i < v; ++i) {
            if (s.mask[i] <= 0.5) continue;
            double dot = 0, nz = 0, nt = 0;
            for (int k = 0; k < c; ++k) {
                const double a = z[k * v + i], b = s.dino_gt[k * v + i];
                dot += a * b;
                nz += a * a;
                nt += b * b;
            }
            if (nz == 0 || nt == 0) continue;
            total += dot / std::sqrt(nz * nt);
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

// --- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'C', 'K', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct RawCheckpoint {
    json index;
    std::vector<double> payload;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[4];
    std::uint32_t len = 0;
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error(path.string() + " is not a checkpoint (bad magic)");
    }
    if (!in.read(reinterpret_cast<char*>(&len), 4)) throw std::runtime_error("truncated checkpoint header");
    std::string text(len, '\0');
    if (!in.read(text.data(), len)) throw std::runtime_error("truncated checkpoint index");
    RawCheckpoint raw;
    raw.index = json::parse(text);
    const auto total = raw.index.at("count").get<std::size_t>();
    raw.payload.resize(total);
    if (!in.read(reinterpret_cast<char*>(raw.payload.data()), static_cast<std::streamsize>(total * sizeof(double)))) {
        throw std::runtime_error("truncated checkpoint payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes after checkpoint");
    return raw;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const std::string& meta_json) {
    json params = json::array();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < store.names().size(); ++i) {
        const auto& v = store.vars()[i];
        params.push_back({{"name", store.names()[i]}, {"shape", v.shape()}, {"offset", offset}});
        offset += v.size();
    }
    const json index = {{"meta", meta_json.empty() ? json::object() : json::parse(meta_json)},
                        {"params", params},
                        {"count", offset},
                        {"dtype", "float64"}};
    const std::string text = index.dump();

    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
        const auto len = static_cast<std::uint32_t>(text.size());
        out.write(kMagic, 4);
        out.write(reinterpret_cast<const char*>(&len), 4);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& v : store.vars())
            out.write(reinterpret_cast<const char*>(v.data().data()),
                      static_cast<std::streamsize>(v.size() * sizeof(double)));
        if (!out.flush()) throw std::runtime_error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
    const auto raw = read_raw(path);
    CheckpointInfo info;
    info.meta_json = raw.index.at("meta").dump();
    for (const auto& p : raw.index.at("params")) info.names.push_back(p.at("name").get<std::string>());
    return info;
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, ParamStore& store, const std::string& prefix) {
    const auto raw = read_raw(path);
    std::map<std::string, const json*> stored;
    CheckpointInfo info;
    info.meta_json = raw.index.at("meta").dump();
    for (const auto& p : raw.index.at("params")) {
        info.names.push_back(p.at("name").get<std::string>());
        stored[info.names.back()] = &p;
    }
    std::size_t used = 0;
    for (std::size_t i = 0; i < store.names().size(); ++i) {
        const auto& name = store.names()[i];
        if (name.rfind(prefix, 0) != 0) continue;
        const auto it = stored.find(name);
        if (it == stored.end()) throw std::runtime_error("checkpoint " + path.string() + " lacks '" + name + "'");
        const auto shape = it->second->at("shape").get<diff::Shape>();
        auto var = store.vars()[i];
        if (shape != var.shape()) {
            throw std::runtime_error("checkpoint shape " + diff::shape_str(shape) + " for '" + name +
                                     "' does not match the model's " + diff::shape_str(var.shape()));
        }
        const auto offset = it->second->at("offset").get<std::size_t>();
        if (offset + var.size() > raw.payload.size()) throw std::runtime_error("checkpoint offset out of range");
        std::copy_n(raw.payload.begin() + static_cast<std::ptrdiff_t>(offset), var.size(),
                    var.mutable_value().data.begin());
        ++used;
    }
    if (prefix.empty() && used != stored.size()) {
        throw std::runtime_error("checkpoint " + path.string() + " holds parameters the model does not have");
    }
    if (used == 0) throw std::runtime_error("checkpoint " + path.string() + " has no parameters under '" + prefix + "'");
    return info;
}

}  // namespace dinocomplete
