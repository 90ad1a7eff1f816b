#include "consisid/config.hpp"

#include <fstream>
#include <sstream>

namespace csid::config {

namespace {

const char* type_name(const Json& j) {
    if (j.is_boolean()) return "boolean";
    if (j.is_number()) return "number";
    if (j.is_string()) return "string";
    if (j.is_array()) return "array";
    if (j.is_object()) return "object";
    return "null";
}

bool same_kind(const Json& a, const Json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

template <typename T>
T get(const Json& doc, const char* section, const char* key) {
    try {
        return doc.at(section).at(key).get<T>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string(section) + "." + key + ": " + e.what());
    }
}

int get_int(const Json& doc, const char* section, const char* key) {
    const Json& v = doc.at(section).at(key);
    if (!v.is_number_integer() && !(v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long long>(v.get<double>()))))
        throw ConfigError(std::string(section) + "." + key + " must be an integer");
    return static_cast<int>(v.get<double>());
}

}  // namespace

Json default_config() {
    const synth::DatasetSpec ds;
    const inject::ModelConfig mc;
    const train::TrainConfig tc;
    const train::TowerTrainConfig tt;
    const diffusion::SamplerConfig sc;
    const curate::CurationParams cp;
    Json j;
    j["seed"] = 0;
    j["dataset"] = {{"identities", ds.identities},
                    {"videos_per_identity", ds.videos_per_identity},
                    {"frames", ds.frames},
                    {"height", ds.height},
                    {"width", ds.width}};
    j["model"] = {{"depth", mc.dit.depth},
                  {"dim", mc.dit.dim},
                  {"heads", mc.dit.heads},
                  {"patch", mc.dit.patch},
                  {"timestep_dim", mc.dit.timestep_dim},
                  {"mlp_ratio", mc.dit.mlp_ratio},
                  {"frames", mc.dit.frames},
                  {"gfe_channels", mc.gfe_channels},
                  {"qformer",
                   {{"queries", mc.qformer.queries},
                    {"layers", mc.qformer.layers},
                    {"heads", mc.qformer.heads},
                    {"max_kv", mc.qformer.max_kv},
                    {"kv_positions", mc.qformer.kv_positions},
                    {"dropout", mc.qformer.dropout}}}};
    j["diffusion"] = {{"timesteps", mc.dit.timesteps}, {"beta_start", 1e-4}, {"beta_end", 2e-2}};
    j["plan"] = "c";
    j["train"] = {{"alpha", tc.alpha},
                  {"beta", tc.beta},
                  {"zeta_sigma", tc.zeta_sigma},
                  {"null_text_ratio", tc.null_text_ratio},
                  {"learning_rate", tc.learning_rate},
                  {"total_steps", tc.total_steps},
                  {"coarse_fraction", tc.coarse_fraction},
                  {"batch_size", tc.batch_size},
                  {"divergence_grad_threshold", tc.divergence_grad_threshold},
                  {"divergence_patience", tc.divergence_patience},
                  {"grad_clip", tc.grad_clip},
                  {"weight_decay", tc.weight_decay},
                  {"warmup_steps", tc.warmup_steps},
                  {"lr_cycles", tc.lr_cycles},
                  {"drop_token_prob", tc.drop_token_prob},
                  {"inject_nonfinite_step", tc.inject_nonfinite_step},
                  {"flags", {{"gfe", true}, {"lfe", true}, {"cft", true}, {"dml", true}, {"dcl", true}}}};
    j["towers"] = {{"identity_steps", tt.identity_steps},
                   {"caption_steps", tt.caption_steps},
                   {"batch_size", tt.batch_size},
                   {"learning_rate", tt.learning_rate},
                   {"temperature", tt.temperature}};
    j["sampler"] = {{"steps", sc.steps}, {"guidance_scale", sc.guidance_scale}, {"clip_x0", sc.clip_x0}};
    j["eval"] = {{"pairs", 20}, {"split_radius", -1.0}};
    j["ablation"] = {{"plans", Json::array({"a", "b", "c", "d", "e", "f", "g"})},
                     {"steps", Json(analysis::default_step_values())}};
    j["curation"] = {{"tolerance_frames", cp.tolerance_frames},
                     {"min_face_area_frac", cp.min_face_area_frac},
                     {"min_keypoint_count", cp.min_keypoint_count},
                     {"iou_match_threshold", cp.iou_match_threshold},
                     {"keypoint_confidence", cp.keypoint_confidence},
                     {"window_frames", cp.window_frames}};
    j["paths"] = {{"train_data", ""}, {"held_out_data", ""}, {"towers", ""}, {"checkpoint", ""},
                  {"video", ""},      {"mask_data", ""},     {"curate_input", ""}};
    j["inputs"] = {{"reference_video", 0}, {"reference_frame", -1}, {"prompt", ""}, {"spectrum_video", 0}};
    return j;
}

void merge_into(Json& base, const Json& overlay, const std::string& prefix) {
    if (!overlay.is_object()) throw ConfigError("config" + (prefix.empty() ? std::string() : " section " + prefix) + " must be an object");
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key);
        Json& slot = base[it.key()];
        if (slot.is_object()) {
            merge_into(slot, it.value(), key);
        } else if (!same_kind(slot, it.value())) {
            throw ConfigError("config key " + key + " expects a " + type_name(slot) + ", got a " + type_name(it.value()));
        } else {
            slot = it.value();
        }
    }
}

void apply_set(Json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got: " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(text);
    } catch (const Json::parse_error&) {
        value = text;
    }
    // rebuild the nested overlay {"a": {"b": value}}
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) {
        if (part.empty()) throw ConfigError("malformed key: " + key);
        parts.push_back(part);
    }
    Json overlay = value;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) overlay = Json{{*it, overlay}};
    // a string value for a non-string slot keeps its original text, so the error names it
    merge_into(doc, overlay);
}

Json load_layered(const std::string& file, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed) {
    Json doc = default_config();
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw ConfigError("cannot open config file: " + file);
        Json overlay;
        try {
            overlay = Json::parse(in);
        } catch (const Json::parse_error& e) {
            throw ConfigError("config file " + file + " is not valid JSON: " + e.what());
        }
        merge_into(doc, overlay);
    }
    for (const auto& s : sets) apply_set(doc, s);
    if (seed) doc["seed"] = *seed;
    return doc;
}

diffusion::NoiseSchedule RunConfig::schedule() const {
    return diffusion::NoiseSchedule::linear(model.dit.timesteps, beta_start, beta_end);
}

RunConfig resolve(const Json& doc) {
    RunConfig c;
    c.doc = doc;
    try {
        const Json& s = doc.at("seed");
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0))
            throw ConfigError("seed must be a non-negative integer");
        c.seed = s.get<std::uint64_t>();

        auto& ds = c.dataset;
        ds.identities = get_int(doc, "dataset", "identities");
        ds.videos_per_identity = get_int(doc, "dataset", "videos_per_identity");
        ds.frames = get_int(doc, "dataset", "frames");
        ds.height = get_int(doc, "dataset", "height");
        ds.width = get_int(doc, "dataset", "width");
        ds.seed = c.seed;
        if (ds.identities < 1 || ds.videos_per_identity < 1 || ds.frames < 1)
            throw ConfigError("dataset counts must be positive");
        if (ds.height < 8 || ds.width < 8) throw ConfigError("dataset frames must be at least 8 x 8");

        auto& d = c.model.dit;
        d.depth = get_int(doc, "model", "depth");
        d.dim = get_int(doc, "model", "dim");
        d.heads = get_int(doc, "model", "heads");
        d.patch = get_int(doc, "model", "patch");
        d.timestep_dim = get_int(doc, "model", "timestep_dim");
        d.mlp_ratio = get_int(doc, "model", "mlp_ratio");
        d.frames = get_int(doc, "model", "frames");
        d.height = ds.height;
        d.width = ds.width;
        d.text_vocab = synth::vocab::kSize;
        d.input_channels = d.base_channels();
        d.timesteps = get_int(doc, "diffusion", "timesteps");
        c.model.gfe_channels = get_int(doc, "model", "gfe_channels");
        auto& q = c.model.qformer;
        const Json& qj = doc.at("model").at("qformer");
        q.queries = qj.at("queries").get<int>();
        q.layers = qj.at("layers").get<int>();
        q.heads = qj.at("heads").get<int>();
        q.max_kv = qj.at("max_kv").get<int>();
        q.kv_positions = qj.at("kv_positions").get<bool>();
        q.dropout = qj.at("dropout").get<double>();
        if (q.queries < 1 || q.layers < 1 || q.heads < 1 || q.max_kv < 1 || d.dim % q.heads != 0)
            throw ConfigError("model.qformer sizes must be positive and divide model.dim");
        if (!(q.dropout >= 0.0 && q.dropout < 1.0)) throw ConfigError("model.qformer.dropout must be in [0, 1)");
        if (c.model.gfe_channels < 1) throw ConfigError("model.gfe_channels must be positive");
        if (d.frames > ds.frames) throw ConfigError("model.frames exceeds dataset.frames");
        d.validate();

        c.beta_start = get<double>(doc, "diffusion", "beta_start");
        c.beta_end = get<double>(doc, "diffusion", "beta_end");
        if (!(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0))
            throw ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1");

        c.plan = inject::InjectionPlan::named(doc.at("plan").get<std::string>());

        auto& t = c.train;
        t.alpha = get<double>(doc, "train", "alpha");
        t.beta = get<double>(doc, "train", "beta");
        t.zeta_sigma = get<double>(doc, "train", "zeta_sigma");
        t.null_text_ratio = get<double>(doc, "train", "null_text_ratio");
        t.learning_rate = get<double>(doc, "train", "learning_rate");
        t.total_steps = get_int(doc, "train", "total_steps");
        t.coarse_fraction = get<double>(doc, "train", "coarse_fraction");
        t.batch_size = get_int(doc, "train", "batch_size");
        t.divergence_grad_threshold = get<double>(doc, "train", "divergence_grad_threshold");
        t.divergence_patience = get_int(doc, "train", "divergence_patience");
        t.grad_clip = get<double>(doc, "train", "grad_clip");
        t.weight_decay = get<double>(doc, "train", "weight_decay");
        t.warmup_steps = get_int(doc, "train", "warmup_steps");
        t.lr_cycles = get_int(doc, "train", "lr_cycles");
        t.drop_token_prob = get<double>(doc, "train", "drop_token_prob");
        t.inject_nonfinite_step = get_int(doc, "train", "inject_nonfinite_step");
        const Json& f = doc.at("train").at("flags");
        t.flags = {f.at("gfe").get<bool>(), f.at("lfe").get<bool>(), f.at("cft").get<bool>(), f.at("dml").get<bool>(),
                   f.at("dcl").get<bool>()};
        t.window_frames = d.frames;
        t.seed = c.seed;
        t.validate();

        auto& tw = c.towers;
        tw.identity_steps = get_int(doc, "towers", "identity_steps");
        tw.caption_steps = get_int(doc, "towers", "caption_steps");
        tw.batch_size = get_int(doc, "towers", "batch_size");
        tw.learning_rate = get<double>(doc, "towers", "learning_rate");
        tw.temperature = get<double>(doc, "towers", "temperature");
        tw.seed = derive_seed(c.seed, "towers");
        if (tw.identity_steps < 0 || tw.caption_steps < 0 || tw.batch_size < 2 || !(tw.learning_rate > 0.0) ||
            !(tw.temperature > 0.0))
            throw ConfigError("towers settings out of range");

        auto& sm = c.eval.sampler;
        sm.steps = get_int(doc, "sampler", "steps");
        sm.guidance_scale = get<double>(doc, "sampler", "guidance_scale");
        sm.clip_x0 = get<bool>(doc, "sampler", "clip_x0");
        sm.seed = derive_seed(c.seed, "sampler");
        if (sm.steps < 1 || sm.steps > d.timesteps) throw ConfigError("sampler.steps must be in [1, diffusion.timesteps]");
        if (!(sm.guidance_scale >= 1.0)) throw ConfigError("sampler.guidance_scale must be >= 1");

        c.eval_pairs = get_int(doc, "eval", "pairs");
        c.eval.split_radius = get<double>(doc, "eval", "split_radius");
        const int held_out = ds.identities * ds.videos_per_identity;
        if (c.eval_pairs < 1 || c.eval_pairs > held_out) throw ConfigError("eval.pairs must be in [1, held-out size]");
        if (ds.frames <= d.frames) throw ConfigError("dataset.frames must exceed model.frames to leave a reference frame");

        for (const auto& p : doc.at("ablation").at("plans")) {
            const auto name = p.get<std::string>();
            inject::InjectionPlan::named(name);
            c.ablation_plans.push_back(name);
        }
        for (const auto& st : doc.at("ablation").at("steps")) {
            const int v = st.get<int>();
            if (v < 1 || v > d.timesteps) throw ConfigError("ablation.steps entries must be in [1, diffusion.timesteps]");
            c.ablation_steps.push_back(v);
        }

        auto& cp = c.curation;
        cp.tolerance_frames = get_int(doc, "curation", "tolerance_frames");
        cp.min_face_area_frac = get<double>(doc, "curation", "min_face_area_frac");
        cp.min_keypoint_count = get_int(doc, "curation", "min_keypoint_count");
        cp.iou_match_threshold = get<double>(doc, "curation", "iou_match_threshold");
        cp.keypoint_confidence = get<double>(doc, "curation", "keypoint_confidence");
        cp.window_frames = get_int(doc, "curation", "window_frames");
        cp.validate();

        const Json& p = doc.at("paths");
        c.paths = {p.at("train_data").get<std::string>(), p.at("held_out_data").get<std::string>(),
                   p.at("towers").get<std::string>(),     p.at("checkpoint").get<std::string>(),
                   p.at("video").get<std::string>(),      p.at("mask_data").get<std::string>(),
                   p.at("curate_input").get<std::string>()};
        const Json& in = doc.at("inputs");
        c.inputs.reference_video = in.at("reference_video").get<int>();
        c.inputs.reference_frame = in.at("reference_frame").get<int>();
        c.inputs.prompt = in.at("prompt").get<std::string>();
        c.inputs.spectrum_video = in.at("spectrum_video").get<int>();
        if (c.inputs.reference_video < 0 || c.inputs.reference_video >= held_out)
            throw ConfigError("inputs.reference_video out of range");
        if (c.inputs.reference_frame < -1 || c.inputs.reference_frame >= ds.frames)
            throw ConfigError("inputs.reference_frame out of range");
        if (c.inputs.spectrum_video < 0 || c.inputs.spectrum_video >= held_out)
            throw ConfigError("inputs.spectrum_video out of range");
        if (!c.inputs.prompt.empty()) synth::vocab::parse_caption(c.inputs.prompt);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return c;
}

}  // namespace csid::config
