#include "consisid/backbone.hpp"

#include <stdexcept>

namespace csid::model {

LatentVideo patchify(std::span<const double> video, int frames, int height, int width, int channels, int p) {
    if (p < 1 || height % p != 0 || width % p != 0)
        throw std::invalid_argument("patchify: frame dims must be divisible by the patch factor");
    if (video.size() != static_cast<std::size_t>(frames) * height * width * channels)
        throw std::invalid_argument("patchify: video size does not match dims");
    LatentVideo z;
    z.frames = frames;
    z.grid_h = height / p;
    z.grid_w = width / p;
    z.patch = p;
    z.base_channels = z.channels = channels * p * p;
    z.data.resize(video.size());
    for (int t = 0; t < frames; ++t)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                for (int c = 0; c < channels; ++c) {
                    const int token = (t * z.grid_h + y / p) * z.grid_w + x / p;
                    const int ch = ((y % p) * p + x % p) * channels + c;
                    z.at(token, ch) = video[((static_cast<std::size_t>(t) * height + y) * width + x) * channels + c];
                }
    return z;
}

std::vector<double> unpatchify(const LatentVideo& z, int channels) {
    const int p = z.patch;
    if (z.base_channels != channels * p * p) throw std::invalid_argument("unpatchify: channel count mismatch");
    const int height = z.grid_h * p, width = z.grid_w * p;
    std::vector<double> video(static_cast<std::size_t>(z.frames) * height * width * channels);
    for (int t = 0; t < z.frames; ++t)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                for (int c = 0; c < channels; ++c) {
                    const int token = (t * z.grid_h + y / p) * z.grid_w + x / p;
                    const int ch = ((y % p) * p + x % p) * channels + c;
                    video[((static_cast<std::size_t>(t) * height + y) * width + x) * channels + c] = z.at(token, ch);
                }
    return video;
}

LatentVideo strip_conditioning(const LatentVideo& latent) {
    LatentVideo out = latent;
    out.channels = latent.base_channels;
    out.data.resize(static_cast<std::size_t>(latent.tokens()) * latent.base_channels);
    for (int i = 0; i < latent.tokens(); ++i)
        for (int c = 0; c < latent.base_channels; ++c) out.at(i, c) = latent.at(i, c);
    return out;
}

const char* hf_site_name(HfSite site) {
    switch (site) {
        case HfSite::None: return "none";
        case HfSite::Inner: return "inner";
        case HfSite::Output: return "output";
        case HfSite::Input: return "input";
        case HfSite::Pre: return "pre";
    }
    return "none";
}

HfSite parse_hf_site(const std::string& name) {
    for (HfSite s : {HfSite::None, HfSite::Inner, HfSite::Output, HfSite::Input, HfSite::Pre})
        if (name == hf_site_name(s)) return s;
    throw std::invalid_argument("unknown injection site: " + name);
}

void DiTConfig::validate() const {
    if (depth < 1 || dim < 1 || heads < 1 || dim % heads != 0)
        throw std::invalid_argument("DiTConfig: dim must be a positive multiple of heads");
    if (patch < 1 || height % patch != 0 || width % patch != 0)
        throw std::invalid_argument("DiTConfig: frame dims must be divisible by the patch factor");
    if (input_channels < base_channels()) throw std::invalid_argument("DiTConfig: input_channels below base channels");
    if (text_vocab < 1 || max_text_tokens < 1 || timestep_dim < 2 || mlp_ratio < 1 || frames < 1 || timesteps < 1)
        throw std::invalid_argument("DiTConfig: non-positive size");
}

TextEncoder::TextEncoder(nn::ParamStore& ps, const std::string& name, int vocab, int max_tokens, int dim)
    : vocab_(vocab), max_tokens_(max_tokens), dim_(dim) {
    table_ = ps.add(name + ".table", {vocab + 1, dim}, nn::Init::Normal, 0.5);
    pos_ = ps.add(name + ".pos", {max_tokens, dim}, nn::Init::Normal, 0.1);
}

Var TextEncoder::encode(std::span<const std::uint16_t> tokens) const {
    if (tokens.empty()) return null_embedding();
    if (static_cast<int>(tokens.size()) > max_tokens_) throw std::invalid_argument("text_encode: caption too long");
    std::vector<int> idx;
    for (auto t : tokens) {
        if (t >= vocab_) throw std::invalid_argument("text_encode: token outside vocabulary");
        idx.push_back(t);
    }
    return ag::add(ag::gather_rows(table_, idx), ag::slice_rows(pos_, 0, static_cast<int>(tokens.size())));
}

Var TextEncoder::null_embedding() const {
    const int row = vocab_;
    return ag::slice_rows(table_, row, row + 1);
}

IdCrossAttention::IdCrossAttention(nn::ParamStore& ps, const std::string& name, int dim, int h)
    : norm(ps, name + ".norm", dim),
      wq(ps, name + ".wq", dim, dim, false),
      wk(ps, name + ".wk", dim, dim, false),
      wv(ps, name + ".wv", dim, dim, false),
      wo(ps, name + ".wo", dim, dim, false, true),
      heads(h) {}

Var IdCrossAttention::operator()(const Var& z, const Var& f) const {
    if (z.cols() != f.cols()) throw std::invalid_argument("id_cross_attention: model dims differ");
    Var a = ag::attention(wq(norm(z)), wk(f), wv(f), heads);
    return ag::add(z, wo(a));
}

DiT::DiT(nn::ParamStore& ps, const DiTConfig& cfg, HfSite site, const std::string& name) : cfg_(cfg), site_(site) {
    cfg_.validate();
    const int d = cfg.dim;
    in_proj_ = nn::Linear(ps, name + ".in_proj", cfg.input_channels, d);
    vision_pos_ = ps.add(name + ".vision_pos", {cfg.vision_tokens(), d}, nn::Init::Normal, 0.1);
    t_fc1_ = nn::Linear(ps, name + ".t_fc1", cfg.timestep_dim, d);
    t_fc2_ = nn::Linear(ps, name + ".t_fc2", d, d);
    const bool per_block = site == HfSite::Inner || site == HfSite::Output || site == HfSite::Input;
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string b = name + ".block" + std::to_string(i);
        DiTBlock blk;
        blk.norm1 = nn::LayerNorm(ps, b + ".norm1", d);
        blk.qkv = nn::Linear(ps, b + ".qkv", d, 3 * d);
        blk.proj = nn::Linear(ps, b + ".proj", d, d);
        blk.norm2 = nn::LayerNorm(ps, b + ".norm2", d);
        blk.mlp = nn::Mlp(ps, b + ".mlp", d, cfg.mlp_ratio * d);
        if (per_block) {
            blk.id_attn = IdCrossAttention(ps, b + ".id_attn", d, cfg.heads);
            blk.has_id = true;
        }
        blocks_.push_back(std::move(blk));
    }
    if (site == HfSite::Pre) pre_id_ = IdCrossAttention(ps, name + ".pre_id_attn", d, cfg.heads);
    out_norm_ = nn::LayerNorm(ps, name + ".out_norm", d);
    // the projection also sees the noisy base latent directly, so the near-identity
    // map needed at high noise levels does not have to pass through the blocks
    out_proj_ = nn::Linear(ps, name + ".out_proj", d + cfg.base_channels(), cfg.base_channels(), true, true);
}

Var DiT::apply_id(const IdCrossAttention& attn, const Var& tokens, int text_len, const Var* id_tokens) const {
    if (!id_tokens || !*id_tokens) return tokens;
    Var text = ag::slice_rows(tokens, 0, text_len);
    Var vision = ag::slice_rows(tokens, text_len, tokens.rows());
    return ag::concat_rows({text, attn(vision, *id_tokens)});
}

Var DiT::forward(const Var& latent, const Var& text, double t, const Var* id_tokens) const {
    if (latent.shape().size() != 2 || latent.rows() != cfg_.vision_tokens() || latent.cols() != cfg_.input_channels)
        throw std::invalid_argument("dit_forward: latent shape does not match the model wiring");
    if (text.shape().size() != 2 || text.cols() != cfg_.dim) throw std::invalid_argument("dit_forward: text dim mismatch");
    if (!(t >= 0.0 && t < cfg_.timesteps)) throw std::invalid_argument("dit_forward: timestep out of range");
    if (id_tokens && *id_tokens && id_tokens->cols() != cfg_.dim)
        throw std::invalid_argument("dit_forward: identity token dim mismatch");
    const int d = cfg_.dim;
    const int text_len = text.rows();

    Var temb_in = Var::constant({1, cfg_.timestep_dim}, nn::sinusoidal_embedding(t, cfg_.timestep_dim));
    Var temb = ag::reshape(t_fc2_(ag::silu(t_fc1_(temb_in))), {d});
    Var vision = ag::add(in_proj_(latent), vision_pos_);
    Var h = ag::add_rowvec(ag::concat_rows({text, vision}), temb);

    if (site_ == HfSite::Pre) h = apply_id(pre_id_, h, text_len, id_tokens);
    for (const auto& blk : blocks_) {
        if (site_ == HfSite::Input) h = apply_id(blk.id_attn, h, text_len, id_tokens);
        Var qkv = blk.qkv(blk.norm1(h));
        Var a = ag::attention(ag::slice_cols(qkv, 0, d), ag::slice_cols(qkv, d, 2 * d), ag::slice_cols(qkv, 2 * d, 3 * d),
                              cfg_.heads);
        h = ag::add(h, blk.proj(a));
        if (site_ == HfSite::Inner) h = apply_id(blk.id_attn, h, text_len, id_tokens);
        h = ag::add(h, blk.mlp(blk.norm2(h)));
        if (site_ == HfSite::Output) h = apply_id(blk.id_attn, h, text_len, id_tokens);
    }
    Var out = ag::slice_rows(h, text_len, h.rows());
    return out_proj_(ag::concat_cols({out_norm_(out), ag::slice_cols(latent, 0, cfg_.base_channels())}));
}

}  // namespace csid::model
