#pragma once

#include "dinocomplete/model.hpp"
#include "dinocomplete/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dinocomplete {

struct TrainConfig {
    std::uint64_t seed = 0;
    int epochs = 10;
    int batch_size = 4;
    double lr = 1e-4;
    LossWeights loss_weights;
    int edge = 32;  // grid edge of the data the model is built for
    int chunk_a = 4;
    int chunk_b = 8;
    int feat_dim = 16;
    int state_dim = 16;
    int token_dim = 64;
    Variant variant = Variant::Full;
    bool freeze_student = false;
    /// Stops after this many optimizer steps when > 0 (the partial epoch is still logged).
    int max_steps = 0;

    ModelConfig model() const;
    void validate() const;
};

/// Unknown keys are rejected so typos do not silently fall back to defaults.
TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;  // mean total loss over the epoch's samples
    double cos = 0.0;   // distillation only: mean cosine term
    double mse = 0.0;
    double mask = 0.0;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
    std::vector<double> step_losses;  // mean loss of every optimizer step, in order
};

/// Raised on NaN/Inf losses; what() carries the step, sample id and the offending terms.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One sample held in memory at training precision.
struct TrainSample {
    std::string id;
    std::vector<double> input;    // partial TSDF / truncation
    std::vector<double> gt;       // ground-truth TSDF
    std::vector<double> dino_gt;  // C_feat x G^3 teacher features
    std::vector<double> mask;     // m-hat
};

/// Reads one split (train | val-seen | val-unseen); "val" means both validation splits.
std::vector<TrainSample> load_split(const Manifest& m, const std::string& split, const GridSpec& spec,
                                    int feat_dim);

using EpochCallback = std::function<void(const EpochStats&)>;

/// Student pretraining against teacher features: L = lc L_cos + lm L_mse + lk L_mask.
TrainLog train_distill(DistillNet& net, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

/// Completion training under the sign-aware TSDF loss.
TrainLog train_completion(CompletionNet& net, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {});

/// Mean per-voxel cosine between raw student features and the teacher over m-hat, pooled over samples.
double masked_cosine(const DistillNet& net, const std::vector<TrainSample>& data, const GridSpec& spec);

// --- checkpoints ---------------------------------------------------------------

/// "DCK1" magic, u32 index length, JSON index {meta, params: [{name, shape, offset}]},
/// then little-endian float64 values. Written to a temp file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const std::string& meta_json);

struct CheckpointInfo {
    std::string meta_json;
    std::vector<std::string> names;
};

/// Copies every stored array whose name starts with `prefix` into the matching parameter.
/// Missing parameters or shape mismatches throw; extra stored arrays are ignored only with a prefix.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, ParamStore& store,
                               const std::string& prefix = "");
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace dinocomplete
