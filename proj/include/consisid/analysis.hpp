#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "consisid/diffusion.hpp"
#include "consisid/extractors.hpp"
#include "consisid/injection.hpp"
#include "consisid/synthdata.hpp"
#include "consisid/trainer.hpp"

namespace csid::analysis {

using ag::Var;

inline constexpr double kAmplitudeFloor = 1e-12;

struct SpectrumProfile {
    std::vector<double> radial_bins;    // 0 (DC), 1, ..., N/2
    std::vector<double> log_amplitude;  // mean log amplitude per radius bin
    std::vector<double> relative;       // log_amplitude - log_amplitude[0]
};

struct Spectrum {
    int size = 0;                  // N, zero-padded square transform size
    std::vector<double> log_map;   // N x N, DC shifted to the center, averaged over frames
    SpectrumProfile profile;
};

// Luminance of each frame restricted to the mask's bounding box (masked pixels
// mean-subtracted, others zero), zero-padded to a power-of-two square, 2-D DFT,
// |F| floored at 1e-12, log, radially averaged with bins round(|k|) and
// averaged over frames. masks may be empty (whole frame) or one H*W mask per
// frame. Throws std::invalid_argument on empty input or an empty mask.
Spectrum fourier_spectrum(std::span<const synth::Image> frames, std::span<const std::vector<std::uint8_t>> masks = {});

struct BandEnergy {
    double low = 0.0;   // mean relative log amplitude over bins < split
    double high = 0.0;  // bins >= split
};

// split_radius defaults (when < 0) to half the Nyquist radius.
BandEnergy band_energy(const SpectrumProfile& profile, double split_radius = -1.0);

double cosine(std::span<const double> a, std::span<const double> b);

// Mean cosine between the encoder embedding of each frame (aligned with the
// given keypoints when present, else the full frame resized) and the reference.
double face_sim(const extract::FaceTower& encoder, std::span<const synth::Image> frames,
                std::span<const std::array<synth::Point, synth::kKeypoints>> keypoints, const synth::Image& ref_face);

struct FidResult {
    double value = 0.0;
    bool ridge = false;  // a 1e-6 ridge was added to an ill-conditioned covariance
};

// Frechet distance between Gaussian fits of two feature sets (rows = samples).
// Throws std::invalid_argument when either set has fewer than dim+1 rows.
FidResult fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

// 100 * max(cos(mean frame embedding, caption embedding), 0)
double clip_score(const extract::Towers& towers, std::span<const synth::Image> frames, std::span<const std::uint16_t> caption);

struct MetricReport {
    double face_sim_a = 0, face_sim_b = 0, clip_score = 0, fid = 0;
    bool fid_ridge = false;
    double low_band_energy = 0, high_band_energy = 0;
    int samples = 0;
};

struct EvalPair {
    int video = 0;           // index into the held-out set
    train::Reference ref;    // reference face taken outside the generated frames
    std::vector<std::uint16_t> caption;
};

// Pair k uses held-out video (k mod identities) * videos_per_identity + k / identities,
// so consecutive pairs cycle through identities.
std::vector<EvalPair> make_eval_pairs(std::span<const synth::VideoSample> held_out, int count, int identities,
                                      int frames);

struct GeneratedVideo {
    std::vector<synth::Image> frames;
};

GeneratedVideo generate(const inject::ConditionedModel& model, const diffusion::NoiseSchedule& schedule,
                        const train::Reference& ref, std::span<const std::uint16_t> caption,
                        const diffusion::SamplerConfig& cfg);

struct EvalOptions {
    diffusion::SamplerConfig sampler;
    double split_radius = -1.0;
};

struct EvalResult {
    MetricReport report;
    std::vector<GeneratedVideo> videos;
    std::vector<double> face_sim_per_pair;
    std::vector<BandEnergy> bands_per_pair;
    double seconds = 0.0;
};

// Generates one video per pair (sampler seed derived from pair index) and
// scores it against the held-out ground truth.
EvalResult evaluate(const inject::ConditionedModel& model, const extract::Towers& towers,
                    const diffusion::NoiseSchedule& schedule, std::span<const synth::VideoSample> held_out,
                    std::span<const EvalPair> pairs, const EvalOptions& opts);

// --- reports ---

struct PaperRow {
    std::string key;
    double face_sim_arc, face_sim_cur, clip_score, fid;
    std::string speed;      // step ablation only
    bool unstable = false;  // the reference run did not converge
};

// Reference numbers reported for the full-scale model (not desk-scale targets).
std::optional<PaperRow> paper_injection_row(const std::string& plan);
std::optional<PaperRow> paper_component_row(const std::string& variant);
std::optional<PaperRow> paper_steps_row(int steps);

struct AblationRow {
    std::string key;
    bool unstable = false;
    std::string note;
    MetricReport metrics;
    double seconds = 0.0;
    std::optional<PaperRow> paper;
};

struct TableReport {
    std::string title;
    std::vector<AblationRow> rows;
    bool include_speed = false;
};

// CSV with a header line; unstable rows read "unstable" in every metric cell.
std::string to_csv(const TableReport& table);
// One JSON object per row, each carrying the given resolved config and version.
std::string to_jsonl(const TableReport& table, const std::string& config_json, const std::string& version);

struct InjectionAblationSpec {
    std::vector<std::string> plans;
    train::TrainConfig train;
    inject::ModelConfig model;
    EvalOptions eval;
    int eval_pairs = 20;
    int identities = 16;
};

struct InjectionAblationResult {
    TableReport table;
    std::vector<EvalResult> evals;  // empty entries for unstable runs
    bool any_unstable = false;
};

// Trains one model per plan and evaluates it; a diverged run is reported as
// unstable without aborting the others. out_dir (may be empty) receives one
// training directory per plan.
InjectionAblationResult run_injection_ablation(const InjectionAblationSpec& spec, std::span<const synth::VideoSample> train_set,
                                               std::span<const synth::VideoSample> held_out, const extract::Towers& towers,
                                               const diffusion::NoiseSchedule& schedule, const std::string& out_dir,
                                               const std::string& header);

std::vector<int> default_step_values();

// Samples the evaluation pairs once per t with a fixed seed and records metrics
// and wall-clock seconds per row.
TableReport run_steps_ablation(const inject::ConditionedModel& model, const extract::Towers& towers,
                               const diffusion::NoiseSchedule& schedule, std::span<const synth::VideoSample> held_out,
                               std::span<const EvalPair> pairs, std::span<const int> t_values, const EvalOptions& base);

// Portable graymap of a log-amplitude map, linearly scaled to 0..255.
std::string spectrum_pgm(const Spectrum& s);

}  // namespace csid::analysis
