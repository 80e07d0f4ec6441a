#pragma once

#include "dinocomplete/diff.hpp"
#include "dinocomplete/serialization.hpp"
#include "dinocomplete/ssm.hpp"
#include "dinocomplete/volume.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dinocomplete {

/// Named trainable tensors, in registration order.
class ParamStore {
public:
    diff::Var add(const std::string& name, diff::Tensor init);
    const diff::Var& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::string>& names() const { return names_; }
    const std::vector<diff::Var>& vars() const { return vars_; }
    std::vector<diff::Var> vars_with_prefix(const std::string& prefix) const;
    std::size_t scalar_count() const;
    void zero_grad();

private:
    std::vector<std::string> names_;
    std::vector<diff::Var> vars_;
    std::map<std::string, std::size_t> index_;
};

/// Zero-mean normal tensor with standard deviation sqrt(2 / fan_in).
diff::Tensor he_normal(diff::Shape shape, double fan_in, std::mt19937_64& rng);

/// Input TSDF as a [1, G, G, G] tensor scaled by 1 / truncation.
diff::Var tsdf_input(const TsdfVolume& x);
/// [C, G, G, G] tensor of a feature volume.
diff::Var feature_input(const FeatureVolume& f);

// --- state-space blocks on the graph -------------------------------------------

/// phi(f) = SSM(LN(HIL(f))) on a [C, G, G, G] tensor. Parameters live in a ParamStore
/// under `prefix`; A is stored as log(-a) so it stays negative during training.
/// `edge` = 0 builds a sequence-only block.
class VoxelStateBlock {
public:
    VoxelStateBlock() = default;
    VoxelStateBlock(ParamStore& store, const std::string& prefix, int channels, int edge,
                    int state_dim, std::uint64_t seed);

    /// x holds C x edge^3 values, channel-major; the output has x's shape.
    diff::Var forward(const diff::Var& x) const;
    /// Same operator on a row-major [L, C] sequence already in scan order.
    diff::Var forward_sequence(const diff::Var& seq) const;

    /// Copy of the current parameters as the plain operator parameters.
    VoxelStateParams snapshot() const;
    int channels() const { return channels_; }
    /// Zeroes the output path (C projection and skip).
    void zero_output();

private:
    int channels_ = 0;
    int state_dim_ = 0;
    std::shared_ptr<const std::vector<std::uint32_t>> to_seq_, from_seq_;
    diff::Var ln_gain_, ln_bias_, log_neg_a_, skip_, delta_w_, delta_b_, b_w_, c_w_;
};

/// psi_R: chunkify -> embed -> phi over the chunk grid -> unembed -> unchunkify.
class ChunkStateBlock {
public:
    ChunkStateBlock() = default;
    ChunkStateBlock(ParamStore& store, const std::string& prefix, int channels, int edge, int chunk,
                    int token_dim, int state_dim, std::uint64_t seed);

    diff::Var forward(const diff::Var& x) const;
    ChunkStateParams snapshot() const;
    void zero_output();

private:
    int channels_ = 0, edge_ = 0, chunk_ = 0, token_dim_ = 0;
    std::shared_ptr<const std::vector<std::uint32_t>> to_tokens_;  // [C,V] -> Hilbert-ordered [L, C R^3]
    std::shared_ptr<const std::vector<std::uint32_t>> from_tokens_;
    diff::Var embed_w_, embed_b_, unembed_w_, unembed_b_;
    VoxelStateBlock phi_;
};

/// lambda(f) = phi(f) + psi_a(f) + psi_b(f) + f.
class MultiscaleBlock {
public:
    MultiscaleBlock() = default;
    MultiscaleBlock(ParamStore& store, const std::string& prefix, int channels, int edge, int chunk_a,
                    int chunk_b, int token_dim, int state_dim, std::uint64_t seed);

    diff::Var forward(const diff::Var& x) const;
    MultiscaleParams snapshot() const;
    void zero_output();

private:
    VoxelStateBlock phi_;
    ChunkStateBlock psi_a_, psi_b_;
};

// --- networks ------------------------------------------------------------------

struct ModelConfig {
    int edge = 32;
    double truncation = 3.0;
    int feat_dim = 16;
    int state_dim = 16;
    int token_dim = 64;
    int fuse_dim = 64;
    int dec_dim = 8;
    int chunk_a = 4;
    int chunk_b = 8;

    void validate() const;
};

enum class Variant { TsdfOnly, TsdfDino, Full };

const char* to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct StudentOutput {
    diff::Var features;  // [C_feat, G, G, G]
    diff::Var mask;      // [1, G, G, G], sigmoid probabilities
    diff::Var gated() const;
};

/// E_dino: strided conv encoder to G/4, transposed-conv decoder with skips, feature and mask heads.
class StudentNet {
public:
    StudentNet() = default;
    StudentNet(ParamStore& store, const std::string& prefix, const ModelConfig& cfg, std::uint64_t seed);

    StudentOutput forward(const diff::Var& x) const;

private:
    diff::Var e1w_, e1b_, e2w_, e2b_, e3w_, e3b_, d1w_, d1b_, d2w_, d2b_, fw_, fb_, mw_, mb_;
};

/// Geometry encoder, optional student + cross-modal fusion, decoder, optional multiscale head.
class CompletionNet {
public:
    CompletionNet(const ModelConfig& cfg, Variant variant, std::uint64_t seed);

    /// Predicted TSDF [1, G, G, G] in [-truncation, truncation].
    diff::Var forward(const diff::Var& x) const;

    /// Cross-modal fusion at the bottleneck: phi_tsdf(z_tsdf) + phi_dino(z_dino) + z_tsdf.
    diff::Var fuse(const diff::Var& z_tsdf, const diff::Var& z_dino) const;

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const ModelConfig& config() const { return cfg_; }
    Variant variant() const { return variant_; }
    bool has_student() const { return variant_ != Variant::TsdfOnly; }

    VoxelStateBlock& phi_tsdf() { return phi_tsdf_; }
    VoxelStateBlock& phi_dino() { return phi_dino_; }
    MultiscaleBlock& multiscale() { return lambda_; }
    /// Zeroes the final 1x1 projection, leaving a constant trunc * tanh(bias) field.
    void zero_head();

private:
    ModelConfig cfg_;
    Variant variant_;
    ParamStore store_;
    StudentNet student_;
    diff::Var e1w_, e1b_, e2w_, e2b_, e3w_, e3b_, pw_, pb_;
    diff::Var d1w_, d1b_, d2w_, d2b_, ow_, ob_, hw_, hb_;
    VoxelStateBlock phi_tsdf_, phi_dino_;
    MultiscaleBlock lambda_;
};

/// Student-only network used for distillation pretraining (parameters under "student.").
class DistillNet {
public:
    DistillNet(const ModelConfig& cfg, std::uint64_t seed);
    StudentOutput forward(const diff::Var& x) const { return student_.forward(x); }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    ParamStore store_;
    StudentNet student_;
};

/// Inference in double precision without graph recording; output converted to float32.
TsdfVolume complete_forward(const CompletionNet& net, const TsdfVolume& x);
std::pair<FeatureVolume, MaskVolume> student_forward(const DistillNet& net, const TsdfVolume& x);

// --- losses --------------------------------------------------------------------

struct LossWeights {
    double w_fn = 5.0;
    double w_fp = 3.0;
    double w_correct = 1.0;
    double lambda_cos = 1.0;
    double lambda_mse = 1.0;
    double lambda_mask = 0.1;
    double beta = 1.0;

    void validate() const;
};

struct TsdfMasks {
    std::vector<double> fp, fn, correct;
};

/// Sign-aware masks with occupancy = value <= 0.
TsdfMasks tsdf_masks(std::span<const double> pred, std::span<const double> gt);
TsdfMasks tsdf_masks(const TsdfVolume& pred, const TsdfVolume& gt);

/// mean_v (w_fn M_fn + w_fp M_fp + w_correct M_correct) smooth_l1(pred - gt); masks are constants.
diff::Var tsdf_loss(const diff::Var& pred, std::span<const double> gt, const LossWeights& w);
double tsdf_loss_value(const TsdfVolume& pred, const TsdfVolume& gt, const LossWeights& w);

}  // namespace dinocomplete
