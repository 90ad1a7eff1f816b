#pragma once

#include <string>
#include <vector>

#include "consisid/backbone.hpp"
#include "consisid/extractors.hpp"

namespace csid::inject {

using ag::Var;
using model::HfSite;

struct InjectionPlan {
    std::string name = "custom";
    bool low_freq = true;
    bool keypoints = true;
    HfSite hf_site = HfSite::Inner;

    // a..g as in the injection ablation, plus "none" (no identity signal).
    // a = high-frequency only, b = low-frequency only.
    static InjectionPlan named(const std::string& name);
    static std::vector<std::string> names();
    bool uses_gfe() const { return low_freq; }
    bool uses_lfe() const { return hf_site != HfSite::None; }
};

// Broadcasts the GFE map ([grid_h*grid_w, C_g]) over all frames and appends
// it to the channels of every latent token ([frames*grid_h*grid_w, C]).
Var apply_low_freq(const Var& noise_latent, const Var& gfe_tokens, int frames);

// Z' = Z + Attention(Q from Z, K/V from F), zero-initialized output projection.
Var id_cross_attention(const model::IdCrossAttention& attn, const Var& z, const Var& f);

struct ModelConfig {
    model::DiTConfig dit;  // input_channels is derived from the plan
    int gfe_channels = 8;
    extract::QFormerConfig qformer;
};

struct Conditioning {
    Var gfe;        // [grid_h*grid_w, C_g] or null
    Var id_tokens;  // [Nq, d] or null
};

// Backbone plus extractors wired according to a plan. Parameters live in the
// caller's ParamStore under "text.", "dit.", "gfe." and "lfe."; the frozen
// towers are borrowed.
class ConditionedModel {
public:
    ConditionedModel() = default;
    ConditionedModel(nn::ParamStore& ps, const ModelConfig& cfg, const InjectionPlan& plan, const extract::Towers* towers);

    // Builds the identity signals for one reference. use_lfe = false skips the
    // high-frequency path (coarse phase). rng enables DropToken and dropout.
    Conditioning condition(const synth::Image& ref_face, const synth::Image& kps_image, bool use_lfe, double drop_prob,
                           Rng* rng) const;

    // x_t: [vision_tokens, base_channels] -> eps prediction of the same shape.
    Var predict(const Var& x_t, const Var& text, int t, const Conditioning& cond) const;

    const InjectionPlan& plan() const { return plan_; }
    const ModelConfig& config() const { return cfg_; }
    const model::TextEncoder& text() const { return text_; }
    const model::DiT& dit() const { return dit_; }
    const extract::GlobalFacialExtractor& gfe() const { return gfe_; }
    const extract::LocalFacialExtractor& lfe() const { return lfe_; }

private:
    ModelConfig cfg_;
    InjectionPlan plan_;
    const extract::Towers* towers_ = nullptr;
    model::TextEncoder text_;
    model::DiT dit_;
    extract::GlobalFacialExtractor gfe_;
    extract::LocalFacialExtractor lfe_;
};

ConditionedModel assemble(nn::ParamStore& ps, const ModelConfig& cfg, const InjectionPlan& plan,
                          const extract::Towers* towers);

}  // namespace csid::inject
