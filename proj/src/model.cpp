#include "dinocomplete/model.hpp"

#include <cmath>
#include <stdexcept>

namespace dinocomplete {

using diff::Shape;
using diff::Tensor;
using diff::Var;

// --- parameters ----------------------------------------------------------------

Var ParamStore::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(diff::parameter(std::move(init)));
    return vars_.back();
}

const Var& ParamStore::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return vars_[it->second];
}

std::vector<Var> ParamStore::vars_with_prefix(const std::string& prefix) const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i].rfind(prefix, 0) == 0) out.push_back(vars_[i]);
    return out;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& v : vars_) v.zero_grad();
}

Tensor he_normal(Shape shape, double fan_in, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
    for (auto& x : t.data) x = n(rng);
    return t;
}

Var tsdf_input(const TsdfVolume& x) {
    const int g = x.spec.edge;
    Tensor t({1, g, g, g});
    const double inv = 1.0 / x.spec.truncation;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = x.values[i] * inv;
    return diff::constant(std::move(t));
}

Var feature_input(const FeatureVolume& f) {
    const int g = f.spec.edge;
    return diff::constant(Tensor({f.channels, g, g, g}, std::vector<double>(f.values.begin(), f.values.end())));
}

namespace {

Tensor from_vector(Shape shape, const std::vector<double>& v) { return Tensor(std::move(shape), v); }

std::vector<double> to_vector(const Var& v) { return {v.data().begin(), v.data().end()}; }

Var conv_param(ParamStore& s, const std::string& name, Shape shape, double fan_in, std::mt19937_64& rng) {
    return s.add(name, he_normal(std::move(shape), fan_in, rng));
}

Var bias_param(ParamStore& s, const std::string& name, int n, double fill = 0.0) {
    return s.add(name, Tensor({n}, fill));
}

void fill_zero(Var v) {
    auto& d = v.mutable_value().data;
    std::fill(d.begin(), d.end(), 0.0);
}

}  // namespace

// --- state-space blocks --------------------------------------------------------

VoxelStateBlock::VoxelStateBlock(ParamStore& store, const std::string& prefix, int channels, int edge,
                                 int state_dim, std::uint64_t seed)
    : channels_(channels), state_dim_(state_dim) {
    const auto init = VoxelStateParams::init(channels, state_dim, seed);
    const auto& p = init.ssm;
    std::vector<double> log_neg_a(p.a_diag.size());
    for (std::size_t i = 0; i < log_neg_a.size(); ++i) log_neg_a[i] = std::log(-p.a_diag[i]);
    ln_gain_ = store.add(prefix + "ln_gain", from_vector({channels}, init.ln_gain));
    ln_bias_ = store.add(prefix + "ln_bias", from_vector({channels}, init.ln_bias));
    log_neg_a_ = store.add(prefix + "log_neg_a", from_vector({channels, state_dim}, log_neg_a));
    skip_ = store.add(prefix + "skip", from_vector({channels}, p.skip));
    delta_w_ = store.add(prefix + "delta_w", from_vector({channels, channels}, p.delta_weight));
    delta_b_ = store.add(prefix + "delta_b", from_vector({channels}, p.delta_bias));
    b_w_ = store.add(prefix + "b_w", from_vector({state_dim, channels}, p.b_weight));
    c_w_ = store.add(prefix + "c_w", from_vector({state_dim, channels}, p.c_weight));

    if (edge > 0) {
        const HilbertOrder order(edge);
        const std::size_t len = order.size();
        auto to = std::make_shared<std::vector<std::uint32_t>>(len * channels);
        auto from = std::make_shared<std::vector<std::uint32_t>>(len * channels);
        for (std::size_t k = 0; k < len; ++k)
            for (int c = 0; c < channels; ++c) {
                const std::size_t src = c * len + order.voxel_at(k);
                (*to)[k * channels + c] = static_cast<std::uint32_t>(src);
                (*from)[src] = static_cast<std::uint32_t>(k * channels + c);
            }
        to_seq_ = std::move(to);
        from_seq_ = std::move(from);
    }
}

Var VoxelStateBlock::forward_sequence(const Var& seq) const {
    const Var n = diff::layer_norm(seq, ln_gain_, ln_bias_);
    const Var delta = diff::softplus(diff::linear(n, delta_w_, delta_b_));
    const Var b = diff::linear(n, b_w_);
    const Var c = diff::linear(n, c_w_);
    const Var a = diff::neg(diff::exp(log_neg_a_));
    return diff::selective_scan(n, delta, a, b, c, skip_);
}

Var VoxelStateBlock::forward(const Var& x) const {
    if (!to_seq_) throw std::logic_error("voxel state block was built without a grid");
    if (x.size() != to_seq_->size()) {
        throw diff::ShapeError("voxel state block: input " + diff::shape_str(x.shape()) +
                               " does not match its grid and channel count");
    }
    const int len = static_cast<int>(to_seq_->size() / channels_);
    const Var seq = diff::gather(x, to_seq_, {len, channels_});
    return diff::gather(forward_sequence(seq), from_seq_, x.shape());
}

VoxelStateParams VoxelStateBlock::snapshot() const {
    VoxelStateParams p;
    p.ln_gain = to_vector(ln_gain_);
    p.ln_bias = to_vector(ln_bias_);
    p.ssm.channels = channels_;
    p.ssm.state_dim = state_dim_;
    p.ssm.a_diag = to_vector(log_neg_a_);
    for (auto& a : p.ssm.a_diag) a = -std::exp(a);
    p.ssm.skip = to_vector(skip_);
    p.ssm.delta_weight = to_vector(delta_w_);
    p.ssm.delta_bias = to_vector(delta_b_);
    p.ssm.b_weight = to_vector(b_w_);
    p.ssm.c_weight = to_vector(c_w_);
    return p;
}

void VoxelStateBlock::zero_output() {
    fill_zero(c_w_);
    fill_zero(skip_);
}

ChunkStateBlock::ChunkStateBlock(ParamStore& store, const std::string& prefix, int channels, int edge,
                                 int chunk, int token_dim, int state_dim, std::uint64_t seed)
    : channels_(channels), edge_(edge), chunk_(chunk), token_dim_(token_dim) {
    const ChunkLayout layout{edge, chunk, channels};
    layout.validate();
    const auto init = ChunkStateParams::init(channels, chunk, token_dim, state_dim, seed);
    const int in = init.token_dim_in();
    embed_w_ = store.add(prefix + "embed_w", from_vector({token_dim, in}, init.embed_weight));
    embed_b_ = store.add(prefix + "embed_b", from_vector({token_dim}, init.embed_bias));
    unembed_w_ = store.add(prefix + "unembed_w", from_vector({in, token_dim}, init.unembed_weight));
    unembed_b_ = store.add(prefix + "unembed_b", from_vector({in}, init.unembed_bias));
    phi_ = VoxelStateBlock(store, prefix + "phi.", token_dim, 0, state_dim, seed ^ 0x9e3779b97f4a7c15ULL);
    // Copy the sub-operator's own initialization so snapshot() reproduces ChunkStateParams::init.
    const auto& src = init.phi;
    auto set = [&](const std::string& name, const std::vector<double>& v) {
        store.get(prefix + "phi." + name).node()->value.data = v;
    };
    std::vector<double> log_neg_a(src.ssm.a_diag.size());
    for (std::size_t i = 0; i < log_neg_a.size(); ++i) log_neg_a[i] = std::log(-src.ssm.a_diag[i]);
    set("ln_gain", src.ln_gain);
    set("ln_bias", src.ln_bias);
    set("log_neg_a", log_neg_a);
    set("skip", src.ssm.skip);
    set("delta_w", src.ssm.delta_weight);
    set("delta_b", src.ssm.delta_bias);
    set("b_w", src.ssm.b_weight);
    set("c_w", src.ssm.c_weight);

    const int e = edge / chunk;
    const HilbertOrder order(e);
    const auto gather_index = layout.gather_index();
    const std::size_t cells = order.size();
    auto to = std::make_shared<std::vector<std::uint32_t>>(cells * in);
    auto from = std::make_shared<std::vector<std::uint32_t>>(cells * in);
    for (std::size_t k = 0; k < cells; ++k)
        for (int j = 0; j < in; ++j) {
            const std::uint32_t src_index = gather_index[j * cells + order.voxel_at(k)];
            (*to)[k * in + j] = src_index;
            (*from)[src_index] = static_cast<std::uint32_t>(k * in + j);
        }
    to_tokens_ = std::move(to);
    from_tokens_ = std::move(from);
}

Var ChunkStateBlock::forward(const Var& x) const {
    if (x.size() != to_tokens_->size()) {
        throw diff::ShapeError("chunk state block: input " + diff::shape_str(x.shape()) +
                               " does not match its grid and channel count");
    }
    const int in = channels_ * chunk_ * chunk_ * chunk_;
    const int cells = static_cast<int>(to_tokens_->size() / in);
    const Var chunks = diff::gather(x, to_tokens_, {cells, in});
    const Var tokens = diff::linear(chunks, embed_w_, embed_b_);
    const Var mixed = phi_.forward_sequence(tokens);
    const Var back = diff::linear(mixed, unembed_w_, unembed_b_);
    return diff::gather(back, from_tokens_, x.shape());
}

ChunkStateParams ChunkStateBlock::snapshot() const {
    ChunkStateParams p;
    p.chunk = chunk_;
    p.channels = channels_;
    p.token_dim = token_dim_;
    p.embed_weight = to_vector(embed_w_);
    p.embed_bias = to_vector(embed_b_);
    p.unembed_weight = to_vector(unembed_w_);
    p.unembed_bias = to_vector(unembed_b_);
    p.phi = phi_.snapshot();
    return p;
}

void ChunkStateBlock::zero_output() {
    fill_zero(unembed_w_);
    fill_zero(unembed_b_);
}

MultiscaleBlock::MultiscaleBlock(ParamStore& store, const std::string& prefix, int channels, int edge,
                                 int chunk_a, int chunk_b, int token_dim, int state_dim, std::uint64_t seed) {
    if (chunk_a * chunk_b != edge) {
        throw std::invalid_argument("multiscale block needs chunk_a * chunk_b == grid edge");
    }
    std::mt19937_64 rng(seed);
    phi_ = VoxelStateBlock(store, prefix + "phi.", channels, edge, state_dim, rng());
    psi_a_ = ChunkStateBlock(store, prefix + "psi_a.", channels, edge, chunk_a, token_dim, state_dim, rng());
    psi_b_ = ChunkStateBlock(store, prefix + "psi_b.", channels, edge, chunk_b, token_dim, state_dim, rng());
}

Var MultiscaleBlock::forward(const Var& x) const {
    return diff::add(diff::add(diff::add(phi_.forward(x), psi_a_.forward(x)), psi_b_.forward(x)), x);
}

MultiscaleParams MultiscaleBlock::snapshot() const {
    return {phi_.snapshot(), psi_a_.snapshot(), psi_b_.snapshot()};
}

void MultiscaleBlock::zero_output() {
    phi_.zero_output();
    psi_a_.zero_output();
    psi_b_.zero_output();
}

// --- networks ------------------------------------------------------------------

void ModelConfig::validate() const {
    if (edge < 8 || !is_power_of_two(edge)) throw std::invalid_argument("model edge must be a power of two >= 8");
    if (truncation <= 0) throw std::invalid_argument("truncation must be positive");
    if (feat_dim < 1 || state_dim < 1 || token_dim < 1 || dec_dim < 2 || fuse_dim < 2) {
        throw std::invalid_argument("model widths must be positive (dec_dim, fuse_dim >= 2)");
    }
    if (chunk_a * chunk_b != edge) {
        throw std::invalid_argument("chunk_a * chunk_b must equal the grid edge (" + std::to_string(chunk_a) +
                                    " * " + std::to_string(chunk_b) + " != " + std::to_string(edge) + ")");
    }
}

const char* to_string(Variant v) {
    switch (v) {
        case Variant::TsdfOnly: return "tsdf_only";
        case Variant::TsdfDino: return "tsdf_dino";
        case Variant::Full: return "full";
    }
    return "unknown";
}

Variant variant_from_string(const std::string& s) {
    if (s == "tsdf_only") return Variant::TsdfOnly;
    if (s == "tsdf_dino") return Variant::TsdfDino;
    if (s == "full") return Variant::Full;
    throw std::invalid_argument("unknown model variant '" + s + "' (tsdf_only | tsdf_dino | full)");
}

Var StudentOutput::gated() const { return diff::mul_channels(features, mask); }

namespace {

constexpr int kW1 = 16, kW2 = 32, kW3 = 64;

}  // namespace

StudentNet::StudentNet(ParamStore& s, const std::string& p, const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    e1w_ = conv_param(s, p + "enc1.w", {kW1, 1, 4, 4, 4}, 64, rng);
    e1b_ = bias_param(s, p + "enc1.b", kW1);
    e2w_ = conv_param(s, p + "enc2.w", {kW2, kW1, 4, 4, 4}, kW1 * 64, rng);
    e2b_ = bias_param(s, p + "enc2.b", kW2);
    e3w_ = conv_param(s, p + "enc3.w", {kW3, kW2, 3, 3, 3}, kW2 * 27, rng);
    e3b_ = bias_param(s, p + "enc3.b", kW3);
    d1w_ = conv_param(s, p + "dec1.w", {kW3, kW2, 2, 2, 2}, kW3, rng);
    d1b_ = bias_param(s, p + "dec1.b", kW2);
    d2w_ = conv_param(s, p + "dec2.w", {kW2 + kW1, kW1, 2, 2, 2}, kW2 + kW1, rng);
    d2b_ = bias_param(s, p + "dec2.b", kW1);
    fw_ = conv_param(s, p + "feat.w", {cfg.feat_dim, kW1 + 1, 1, 1, 1}, 2.0 * (kW1 + 1), rng);
    fb_ = bias_param(s, p + "feat.b", cfg.feat_dim);
    mw_ = conv_param(s, p + "mask.w", {1, kW1 + 1, 1, 1, 1}, 2.0 * (kW1 + 1), rng);
    mb_ = bias_param(s, p + "mask.b", 1);
}

StudentOutput StudentNet::forward(const Var& x) const {
    using namespace diff;
    const Var e1 = relu(conv3(x, e1w_, e1b_, 2, 1));
    const Var e2 = relu(conv3(e1, e2w_, e2b_, 2, 1));
    const Var e3 = relu(conv3(e2, e3w_, e3b_, 1, 1));
    const Var d1 = relu(conv3_transpose(e3, d1w_, d1b_, 2, 0));
    const Var d2 = relu(conv3_transpose(concat(d1, e1), d2w_, d2b_, 2, 0));
    const Var h = concat(d2, x);
    return {conv3(h, fw_, fb_, 1, 0), sigmoid(conv3(h, mw_, mb_, 1, 0))};
}

CompletionNet::CompletionNet(const ModelConfig& cfg, Variant variant, std::uint64_t seed)
    : cfg_(cfg), variant_(variant) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto& s = store_;
    e1w_ = conv_param(s, "tsdf_enc.enc1.w", {kW1, 1, 4, 4, 4}, 64, rng);
    e1b_ = bias_param(s, "tsdf_enc.enc1.b", kW1);
    e2w_ = conv_param(s, "tsdf_enc.enc2.w", {kW2, kW1, 4, 4, 4}, kW1 * 64, rng);
    e2b_ = bias_param(s, "tsdf_enc.enc2.b", kW2);
    e3w_ = conv_param(s, "tsdf_enc.enc3.w", {cfg.fuse_dim, kW2, 3, 3, 3}, kW2 * 27, rng);
    e3b_ = bias_param(s, "tsdf_enc.enc3.b", cfg.fuse_dim);
    const std::uint64_t student_seed = rng();
    if (has_student()) {
        student_ = StudentNet(s, "student.", cfg, student_seed);
        pw_ = conv_param(s, "dino_proj.w", {cfg.fuse_dim, cfg.feat_dim, 4, 4, 4}, cfg.feat_dim * 64, rng);
        pb_ = bias_param(s, "dino_proj.b", cfg.fuse_dim);
        const int bottleneck = cfg.edge / 4;
        phi_tsdf_ = VoxelStateBlock(s, "phi_tsdf.", cfg.fuse_dim, bottleneck, cfg.state_dim, rng());
        phi_dino_ = VoxelStateBlock(s, "phi_dino.", cfg.fuse_dim, bottleneck, cfg.state_dim, rng());
    }
    d1w_ = conv_param(s, "decoder.up1.w", {cfg.fuse_dim, kW2, 2, 2, 2}, cfg.fuse_dim, rng);
    d1b_ = bias_param(s, "decoder.up1.b", kW2);
    d2w_ = conv_param(s, "decoder.up2.w", {kW2 + kW1, kW1, 2, 2, 2}, kW2 + kW1, rng);
    d2b_ = bias_param(s, "decoder.up2.b", kW1);
    ow_ = conv_param(s, "decoder.out.w", {cfg.dec_dim, kW1 + 1, 1, 1, 1}, 2.0 * (kW1 + 1), rng);
    ob_ = bias_param(s, "decoder.out.b", cfg.dec_dim);
    if (variant_ == Variant::Full) {
        lambda_ = MultiscaleBlock(s, "lambda.", cfg.dec_dim, cfg.edge, cfg.chunk_a, cfg.chunk_b, cfg.token_dim,
                                  cfg.state_dim, rng());
        // Start as the identity: random branches add chunk-blocky noise right before the head.
        lambda_.zero_output();
    }
    hw_ = conv_param(s, "head.w", {1, cfg.dec_dim, 1, 1, 1}, 2.0 * cfg.dec_dim, rng);
    hb_ = bias_param(s, "head.b", 1);
}

Var CompletionNet::fuse(const Var& z_tsdf, const Var& z_dino) const {
    if (z_tsdf.shape() != z_dino.shape()) {
        throw diff::ShapeError("fuse: " + diff::shape_str(z_tsdf.shape()) + " vs " + diff::shape_str(z_dino.shape()));
    }
    return diff::add(diff::add(phi_tsdf_.forward(z_tsdf), phi_dino_.forward(z_dino)), z_tsdf);
}

Var CompletionNet::forward(const Var& x) const {
    using namespace diff;
    const int g = cfg_.edge;
    if (x.shape() != Shape{1, g, g, g}) {
        throw ShapeError("complete_forward expects [1, " + std::to_string(g) + ", " + std::to_string(g) + ", " +
                         std::to_string(g) + "], got " + shape_str(x.shape()));
    }
    const Var e1 = relu(conv3(x, e1w_, e1b_, 2, 1));
    const Var e2 = relu(conv3(e1, e2w_, e2b_, 2, 1));
    Var z = relu(conv3(e2, e3w_, e3b_, 1, 1));
    if (has_student()) {
        const Var z_dino = relu(conv3(student_.forward(x).gated(), pw_, pb_, 4, 0));
        z = fuse(z, z_dino);
    }
    const Var d1 = relu(conv3_transpose(z, d1w_, d1b_, 2, 0));
    const Var d2 = relu(conv3_transpose(concat(d1, e1), d2w_, d2b_, 2, 0));
    Var f = conv3(concat(d2, x), ow_, ob_, 1, 0);
    if (variant_ == Variant::Full) f = lambda_.forward(f);
    return scale(tanh(conv3(f, hw_, hb_, 1, 0)), cfg_.truncation);
}

void CompletionNet::zero_head() { fill_zero(hw_); }

DistillNet::DistillNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    student_ = StudentNet(store_, "student.", cfg, seed);
}

TsdfVolume complete_forward(const CompletionNet& net, const TsdfVolume& x) {
    if (x.spec.edge != net.config().edge) {
        throw std::invalid_argument("complete_forward: input edge " + std::to_string(x.spec.edge) +
                                    " does not match the model edge " + std::to_string(net.config().edge));
    }
    diff::NoGradGuard guard;
    const Var y = net.forward(tsdf_input(x));
    TsdfVolume out(x.spec);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = static_cast<float>(y.data()[i]);
    return out;
}

std::pair<FeatureVolume, MaskVolume> student_forward(const DistillNet& net, const TsdfVolume& x) {
    if (x.spec.edge != net.config().edge) {
        throw std::invalid_argument("student_forward: input edge does not match the model edge");
    }
    diff::NoGradGuard guard;
    const auto out = net.forward(tsdf_input(x));
    FeatureVolume f(x.spec, net.config().feat_dim);
    for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = static_cast<float>(out.features.data()[i]);
    MaskVolume m(x.spec);
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = static_cast<float>(out.mask.data()[i]);
    return {f, m};
}

// --- losses --------------------------------------------------------------------

void LossWeights::validate() const {
    for (double w : {w_fn, w_fp, w_correct, lambda_cos, lambda_mse, lambda_mask}) {
        if (!(w >= 0)) throw std::invalid_argument("loss weights must be non-negative");
    }
    if (!(beta > 0)) throw std::invalid_argument("smooth-l1 beta must be positive");
}

TsdfMasks tsdf_masks(std::span<const double> pred, std::span<const double> gt) {
    if (pred.size() != gt.size()) throw std::invalid_argument("tsdf_masks: size mismatch");
    TsdfMasks m{std::vector<double>(pred.size()), std::vector<double>(pred.size()), std::vector<double>(pred.size())};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] <= 0, g = gt[i] <= 0;
        m.fp[i] = p && !g;
        m.fn[i] = !p && g;
        m.correct[i] = p == g;
    }
    return m;
}

TsdfMasks tsdf_masks(const TsdfVolume& pred, const TsdfVolume& gt) {
    if (!(pred.spec == gt.spec)) throw std::invalid_argument("tsdf_masks: grid mismatch");
    const std::vector<double> p(pred.values.begin(), pred.values.end()), g(gt.values.begin(), gt.values.end());
    return tsdf_masks(p, g);
}

namespace {

std::vector<double> loss_weights_of(const TsdfMasks& m, const LossWeights& w) {
    std::vector<double> out(m.fp.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w.w_fn * m.fn[i] + w.w_fp * m.fp[i] + w.w_correct * m.correct[i];
    return out;
}

}  // namespace

Var tsdf_loss(const Var& pred, std::span<const double> gt, const LossWeights& w) {
    // Masks come from values only: the indicator carries no gradient.
    const auto weights = loss_weights_of(tsdf_masks(pred.data(), gt), w);
    return diff::weighted_smooth_l1(pred, gt, weights, w.beta);
}

double tsdf_loss_value(const TsdfVolume& pred, const TsdfVolume& gt, const LossWeights& w) {
    const auto weights = loss_weights_of(tsdf_masks(pred, gt), w);
    double total = 0;
    for (std::size_t i = 0; i < weights.size(); ++i)
        total += weights[i] * diff::smooth_l1(static_cast<double>(pred.values[i]) - gt.values[i], w.beta);
    return total / static_cast<double>(weights.size());
}

}  // namespace dinocomplete
