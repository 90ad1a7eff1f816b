#include "consisid/injection.hpp"

#include <stdexcept>

namespace csid::inject {

InjectionPlan InjectionPlan::named(const std::string& name) {
    InjectionPlan p;
    p.name = name;
    if (name == "a") {
        p.low_freq = false;
        p.hf_site = HfSite::Inner;
    } else if (name == "b") {
        p.hf_site = HfSite::None;
    } else if (name == "c") {
        p.hf_site = HfSite::Inner;
    } else if (name == "d") {
        p.keypoints = false;
        p.hf_site = HfSite::Inner;
    } else if (name == "e") {
        p.hf_site = HfSite::Output;
    } else if (name == "f") {
        p.hf_site = HfSite::Input;
    } else if (name == "g") {
        p.low_freq = false;
        p.hf_site = HfSite::Pre;
    } else if (name == "none") {
        p.low_freq = false;
        p.keypoints = false;
        p.hf_site = HfSite::None;
    } else {
        throw std::invalid_argument("unknown injection plan: " + name);
    }
    return p;
}

std::vector<std::string> InjectionPlan::names() { return {"a", "b", "c", "d", "e", "f", "g"}; }

Var apply_low_freq(const Var& noise_latent, const Var& gfe_tokens, int frames) {
    if (frames < 1 || noise_latent.shape().size() != 2 || gfe_tokens.shape().size() != 2 ||
        noise_latent.rows() != frames * gfe_tokens.rows())
        throw std::invalid_argument("apply_low_freq: GFE grid does not match the latent spatial dims");
    std::vector<Var> per_frame(frames, gfe_tokens);
    return ag::concat_cols({noise_latent, ag::concat_rows(per_frame)});
}

Var id_cross_attention(const model::IdCrossAttention& attn, const Var& z, const Var& f) { return attn(z, f); }

ConditionedModel::ConditionedModel(nn::ParamStore& ps, const ModelConfig& cfg, const InjectionPlan& plan,
                                   const extract::Towers* towers)
    : cfg_(cfg), plan_(plan), towers_(towers) {
    cfg_.dit.input_channels = cfg_.dit.base_channels() + (plan.low_freq ? cfg.gfe_channels : 0);
    if (cfg.gfe_channels < 1) throw std::invalid_argument("assemble: gfe_channels must be positive");
    if (plan.uses_lfe() && !towers) throw std::invalid_argument("assemble: the high-frequency path needs the towers");
    text_ = model::TextEncoder(ps, "text", cfg_.dit.text_vocab, cfg_.dit.max_text_tokens, cfg_.dit.dim);
    dit_ = model::DiT(ps, cfg_.dit, plan.hf_site, "dit");
    if (plan.low_freq) gfe_ = extract::GlobalFacialExtractor(ps, "gfe", cfg.gfe_channels, cfg_.dit.grid_h(), cfg_.dit.grid_w());
    if (plan.uses_lfe()) lfe_ = extract::LocalFacialExtractor(ps, "lfe", *towers, cfg_.dit.dim, cfg.qformer);
}

Conditioning ConditionedModel::condition(const synth::Image& ref_face, const synth::Image& kps_image, bool use_lfe,
                                         double drop_prob, Rng* rng) const {
    Conditioning c;
    if (plan_.low_freq) {
        if (plan_.keypoints) {
            c.gfe = gfe_.encode(ref_face, kps_image);
        } else {
            synth::Image blank{kps_image.height, kps_image.width, 3, std::vector<float>(kps_image.data.size(), 0.f)};
            c.gfe = gfe_.encode(ref_face, blank);
        }
    }
    if (plan_.uses_lfe() && use_lfe) {
        extract::TowerFeatures feats;
        {
            ag::NoGradGuard frozen;
            feats = extract::tower_features(*towers_, ref_face);
        }
        c.id_tokens = lfe_(feats, drop_prob, rng);
    }
    return c;
}

Var ConditionedModel::predict(const Var& x_t, const Var& text, int t, const Conditioning& cond) const {
    if (x_t.shape().size() != 2 || x_t.cols() != cfg_.dit.base_channels())
        throw std::invalid_argument("predict: latent must carry exactly the base channels");
    Var input = x_t;
    if (plan_.low_freq) {
        if (!cond.gfe) throw std::invalid_argument("predict: plan needs GFE features");
        input = apply_low_freq(x_t, cond.gfe, cfg_.dit.frames);
    } else if (cond.gfe) {
        throw std::invalid_argument("predict: plan takes no GFE input");
    }
    const Var* id = cond.id_tokens ? &cond.id_tokens : nullptr;
    return dit_.forward(input, text, t, id);
}

ConditionedModel assemble(nn::ParamStore& ps, const ModelConfig& cfg, const InjectionPlan& plan,
                          const extract::Towers* towers) {
    return ConditionedModel(ps, cfg, plan, towers);
}

}  // namespace csid::inject
