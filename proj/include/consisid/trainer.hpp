#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "consisid/diffusion.hpp"
#include "consisid/extractors.hpp"
#include "consisid/injection.hpp"
#include "consisid/synthdata.hpp"

namespace csid::train {

using ag::Var;

struct ComponentFlags {
    bool gfe = true;  // low-frequency path
    bool lfe = true;  // high-frequency path
    bool cft = true;  // coarse-to-fine phases
    bool dml = true;  // dynamic mask loss
    bool dcl = true;  // dynamic cross-face reference
};

struct TrainConfig {
    double alpha = 0.5;
    double beta = 0.5;
    double zeta_sigma = 0.05;
    double null_text_ratio = 0.1;
    double learning_rate = 1e-3;
    int total_steps = 2000;
    double coarse_fraction = 0.5;
    int batch_size = 8;
    std::uint64_t seed = 0;
    double divergence_grad_threshold = 1e3;
    int divergence_patience = 5;
    double grad_clip = 1.0;
    double weight_decay = 0.01;
    int warmup_steps = 50;
    int lr_cycles = 1;
    double drop_token_prob = 0.1;
    int window_frames = 4;
    int inject_nonfinite_step = -1;  // test hook: poison one weight before this step
    ComponentFlags flags;

    void validate() const;
};

// The plan actually trained once component flags are applied.
inject::InjectionPlan effective_plan(const inject::InjectionPlan& plan, const ComponentFlags& flags);

// Trilinear (half-pixel) resampling of a T x H x W mask onto the latent grid,
// broadcast over `channels`. Result layout matches LatentVideo tokens.
std::vector<double> mask_to_latent(std::span<const std::uint8_t> mask, int frames, int height, int width, int latent_frames,
                                   int grid_h, int grid_w, int channels);

// L_d = sum(M (eps - eps_hat)^2) / max(sum M, 1)
Var masked_loss(const Var& eps, const Var& eps_hat, std::span<const double> mask);

struct MaskLossResult {
    Var loss;
    bool masked = false;
};

// Draws p in (0, 1]; p > alpha selects the masked loss, otherwise plain MSE.
MaskLossResult dynamic_mask_loss(const Var& eps, const Var& eps_hat, std::span<const double> mask, double alpha, Rng& rng);

enum class RefBranch { InWindow, CrossFace, Fallback };
const char* ref_branch_name(RefBranch b);

struct Reference {
    synth::Image face;       // aligned S x S crop with noise applied
    synth::Image keypoints;  // keypoint image of the aligned landmarks
    RefBranch branch = RefBranch::InWindow;
    int frame = 0;
};

// Draws p in (0, 1]; p <= beta takes the reference from outside the training
// window (falls back to inside when none exist), else from inside. Gaussian
// noise with std zeta_sigma is added in both branches, then clipped to [0, 1].
Reference select_reference(const synth::VideoSample& sample, int window_start, int window_len, double beta,
                           double zeta_sigma, Rng& rng);

// Reference built from a fixed frame without noise (evaluation).
Reference reference_from_frame(const synth::VideoSample& sample, int frame);

enum class Phase { Coarse, Fine };
const char* phase_name(Phase p);

struct StepRecord {
    std::int64_t step = 0;
    Phase phase = Phase::Fine;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    int masked = 0, unmasked = 0;
    int in_window = 0, cross_face = 0, fallback = 0;
    int null_text = 0;
};

struct TrainedModel {
    std::unique_ptr<nn::ParamStore> params;
    inject::ConditionedModel model;
};

// Builds a fresh model for (config, plan) with parameters seeded from `seed`.
TrainedModel make_model(const inject::ModelConfig& cfg, const inject::InjectionPlan& plan, const extract::Towers* towers,
                        std::uint64_t seed);

struct TrainState {
    TrainConfig config;
    diffusion::NoiseSchedule schedule;
    TrainedModel net;
    nn::AdamW optimizer;
    std::int64_t step = 0;
    Phase phase = Phase::Fine;
    std::vector<StepRecord> history;
    bool diverged = false;
    std::int64_t divergence_step = -1;
    std::string divergence_reason;
    int consecutive_high = 0;

    Phase phase_at(std::int64_t s) const;
};

TrainState init_state(const TrainConfig& cfg, const inject::ModelConfig& model_cfg, const inject::InjectionPlan& plan,
                      const extract::Towers* towers, const diffusion::NoiseSchedule& schedule);

// Indices of the samples used at a given step.
std::vector<int> batch_indices(const TrainConfig& cfg, std::int64_t step, int dataset_size);

// Forward + backward over one batch, leaving gradients in the parameters.
// Returns the record (loss, branch tags, grad norm before clipping).
StepRecord compute_gradients(TrainState& state, std::span<const synth::VideoSample> dataset, std::span<const int> batch);

// One optimizer step. Sets the divergence flag (and skips the update) on a
// non-finite loss/gradient or after `divergence_patience` consecutive steps
// above the gradient threshold.
StepRecord train_step(TrainState& state, std::span<const synth::VideoSample> dataset, std::span<const int> batch);

struct TrainResult {
    TrainState state;
    std::vector<std::string> checkpoints;
};

// Runs the full schedule. When out_dir is non-empty, writes metrics.jsonl
// (one record per step) and checkpoints at the phase boundary and at the end
// (or at divergence). `header` is embedded in every checkpoint.
TrainResult run_training(const TrainConfig& cfg, const inject::ModelConfig& model_cfg, const inject::InjectionPlan& plan,
                         std::span<const synth::VideoSample> dataset, const extract::Towers* towers,
                         const diffusion::NoiseSchedule& schedule, const std::string& out_dir, const std::string& header);

std::string step_record_json(const StepRecord& r);

// --- frozen tower pretraining ---

struct TowerTrainConfig {
    int identity_steps = 300;
    int caption_steps = 300;
    int batch_size = 16;
    double learning_rate = 2e-3;
    double temperature = 0.1;
    std::uint64_t seed = 0;
};

struct TowerTrainReport {
    double face_loss = 0, metric_a_loss = 0, metric_b_loss = 0, caption_loss = 0;
};

// Identity classification for the face tower and both metric encoders on
// augmented aligned crops; contrastive frame/caption training for the
// semantic and caption towers.
TowerTrainReport pretrain_towers(extract::Towers& towers, nn::ParamStore& ps, std::span<const synth::VideoSample> dataset,
                                 const TowerTrainConfig& cfg);

// Random similarity jitter, blur and pixel noise applied to aligned crops.
synth::Image augment_crop(const synth::VideoSample& sample, int frame, Rng& rng);

// Frame t of a video upsampled to the semantic tower's input size.
synth::Image semantic_input(const synth::VideoSample& sample, int frame);

}  // namespace csid::train
