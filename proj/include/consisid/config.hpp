#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "consisid/analysis.hpp"
#include "consisid/curation.hpp"
#include "json.hpp"

namespace csid::config {

using Json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "0.1.0";

// Invalid configuration or command line (exit code 1).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Every accepted key with its default value.
Json default_config();

// Overlays `overlay` onto `base`. Keys absent from `base` and values whose
// JSON type differs from the default are rejected.
void merge_into(Json& base, const Json& overlay, const std::string& prefix = "");

// "a.b.c=value": value is parsed as JSON when possible, otherwise taken as a string.
void apply_set(Json& doc, const std::string& assignment);

// defaults < file < --set overrides < --seed.
Json load_layered(const std::string& file, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed);

struct Paths {
    std::string train_data, held_out_data, towers, checkpoint, video, mask_data, curate_input;
};

struct Inputs {
    int reference_video = 0;  // index into the held-out set
    int reference_frame = -1; // -1 = last frame
    std::string prompt;       // empty = the video's own caption
    int spectrum_video = 0;   // dataset index used when no video file is given
};

struct RunConfig {
    Json doc;  // fully resolved document
    std::uint64_t seed = 0;
    synth::DatasetSpec dataset;
    inject::ModelConfig model;
    double beta_start = 1e-4, beta_end = 2e-2;
    train::TrainConfig train;
    inject::InjectionPlan plan;
    train::TowerTrainConfig towers;
    analysis::EvalOptions eval;
    int eval_pairs = 20;
    std::vector<std::string> ablation_plans;
    std::vector<int> ablation_steps;
    curate::CurationParams curation;
    Paths paths;
    Inputs inputs;

    diffusion::NoiseSchedule schedule() const;
};

// Converts and validates every section; throws ConfigError.
RunConfig resolve(const Json& doc);

}  // namespace csid::config
