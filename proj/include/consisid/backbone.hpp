#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "consisid/autograd.hpp"
#include "consisid/nn.hpp"

namespace csid::model {

using ag::Var;

// Space-to-depth token grid standing in for the VAE latent. Token index is
// (t * grid_h + y) * grid_w + x; channel index within a token is
// (dy * p + dx) * C + c for the base channels, followed by any conditioning
// channels.
struct LatentVideo {
    int frames = 0, grid_h = 0, grid_w = 0, patch = 0;
    int base_channels = 0;
    int channels = 0;
    std::vector<double> data;  // [frames*grid_h*grid_w, channels]

    int tokens() const { return frames * grid_h * grid_w; }
    double at(int token, int c) const { return data[static_cast<std::size_t>(token) * channels + c]; }
    double& at(int token, int c) { return data[static_cast<std::size_t>(token) * channels + c]; }
    bool operator==(const LatentVideo&) const = default;
};

// video is T*H*W*C in row-major (HWC per frame). Throws std::invalid_argument
// when H or W is not divisible by p.
LatentVideo patchify(std::span<const double> video, int frames, int height, int width, int channels, int p);
std::vector<double> unpatchify(const LatentVideo& latent, int channels = 3);

// Keeps the first `base_channels` of every token.
LatentVideo strip_conditioning(const LatentVideo& latent);

enum class HfSite { None, Inner, Output, Input, Pre };
const char* hf_site_name(HfSite site);
HfSite parse_hf_site(const std::string& name);

struct DiTConfig {
    int depth = 4;
    int dim = 128;
    int heads = 4;
    int text_vocab = 17;
    int max_text_tokens = 8;
    int patch = 4;
    int input_channels = 48;
    int timestep_dim = 64;
    int mlp_ratio = 4;
    int frames = 4;
    int height = 32;
    int width = 32;
    int timesteps = 200;   // valid timestep range [0, timesteps)

    int base_channels() const { return 3 * patch * patch; }
    int grid_h() const { return height / patch; }
    int grid_w() const { return width / patch; }
    int vision_tokens() const { return frames * grid_h() * grid_w(); }
    void validate() const;
};

// Learned token table with a reserved null row (index text_vocab) and learned positions.
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(nn::ParamStore& ps, const std::string& name, int vocab, int max_tokens, int dim);

    // Empty caption returns the null embedding. Throws std::invalid_argument on
    // out-of-vocabulary tokens or captions longer than max_tokens.
    Var encode(std::span<const std::uint16_t> tokens) const;
    Var null_embedding() const;  // [1, dim]

private:
    Var table_, pos_;
    int vocab_ = 0, max_tokens_ = 0, dim_ = 0;
};

// Residual cross-attention from vision tokens to identity tokens:
// Z' = Z + Attention(LN(Z) Wq, F Wk, F Wv) Wo with Wo zero at init.
struct IdCrossAttention {
    nn::LayerNorm norm;
    nn::Linear wq, wk, wv, wo;
    int heads = 1;

    IdCrossAttention() = default;
    IdCrossAttention(nn::ParamStore& ps, const std::string& name, int dim, int heads);
    Var operator()(const Var& z, const Var& f) const;
};

struct DiTBlock {
    nn::LayerNorm norm1, norm2;
    nn::Linear qkv, proj;
    nn::Mlp mlp;
    IdCrossAttention id_attn;  // present for Inner/Output/Input sites
    bool has_id = false;
};

class DiT {
public:
    DiT() = default;
    DiT(nn::ParamStore& ps, const DiTConfig& cfg, HfSite site, const std::string& name = "dit");

    // latent: [vision_tokens, input_channels]; text: [L, dim]; id_tokens may be
    // null (identity path skipped). Returns the eps prediction [vision_tokens, base_channels].
    Var forward(const Var& latent, const Var& text, double t, const Var* id_tokens) const;

    const DiTConfig& config() const { return cfg_; }
    HfSite site() const { return site_; }

private:
    Var apply_id(const IdCrossAttention& attn, const Var& tokens, int text_len, const Var* id_tokens) const;

    DiTConfig cfg_;
    HfSite site_ = HfSite::None;
    nn::Linear in_proj_, t_fc1_, t_fc2_, out_proj_;
    nn::LayerNorm out_norm_;
    Var vision_pos_;
    std::vector<DiTBlock> blocks_;
    IdCrossAttention pre_id_;
};

}  // namespace csid::model
