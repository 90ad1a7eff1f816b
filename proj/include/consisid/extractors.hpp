#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "consisid/autograd.hpp"
#include "consisid/nn.hpp"
#include "consisid/synthdata.hpp"

namespace csid::extract {

using ag::Var;

// Low-frequency path: ref face and keypoint image (both S x S) concatenated to
// six channels, then a strided conv stack down to the latent grid.
// Output tokens are [grid_h * grid_w, channels] in row-major spatial order.
class GlobalFacialExtractor {
public:
    GlobalFacialExtractor() = default;
    GlobalFacialExtractor(nn::ParamStore& ps, const std::string& name, int channels, int grid_h, int grid_w,
                          int ref_size = synth::kRefSize);

    Var encode(const synth::Image& ref_face, const synth::Image& kps_image) const;
    Var encode_chw(const Var& six_channel) const;
    int channels() const { return channels_; }

private:
    std::vector<nn::Conv2d> convs_;
    nn::Conv2d head_;
    int channels_ = 0, grid_h_ = 0, grid_w_ = 0, ref_size_ = 0;
};

struct TowerFeatures {
    Var penultimate;          // [c, h, w]
    std::vector<Var> shallow; // early stage maps, [c_i, h_i, w_i]
    Var semantic;             // [g*g, c'] token grid
    int grid = 0;             // g
};

// Identity classifier: four stride-2 conv stages, global average pool, linear
// embedding, linear classifier. Used for the LFE face tower and for the two
// metric encoders (with different widths and seeds).
class FaceTower {
public:
    struct Output {
        Var penultimate;
        std::vector<Var> shallow;
        Var embedding;  // [1, embed_dim]
        Var logits;     // [1, classes]
    };

    FaceTower() = default;
    FaceTower(nn::ParamStore& ps, const std::string& name, std::array<int, 4> widths, int embed_dim, int classes);

    Output forward(const Var& image_chw) const;
    Output forward(const synth::Image& image) const;
    int embed_dim() const { return embed_.out_features(); }

private:
    std::vector<nn::Conv2d> stages_;
    nn::Linear embed_, classify_;
};

// Image tower of the two-tower caption model; also the LFE's semantic tower.
class SemanticTower {
public:
    SemanticTower() = default;
    SemanticTower(nn::ParamStore& ps, const std::string& name, int width, int embed_dim);

    Var tokens(const Var& image_chw) const;  // [g*g, width], g = input / 16
    Var embed(const Var& image_chw) const;   // [1, embed_dim]
    int width() const { return width_; }

private:
    std::vector<nn::Conv2d> stages_;
    nn::Linear head_;
    int width_ = 0;
};

// Bag-of-words caption encoder (text side of the two-tower model).
class CaptionTower {
public:
    CaptionTower() = default;
    CaptionTower(nn::ParamStore& ps, const std::string& name, int vocab, int embed_dim);
    Var embed(std::span<const std::uint16_t> tokens) const;  // [1, embed_dim]

private:
    Var table_;
    nn::Linear head_;
    int vocab_ = 0;
};

// Frozen, pretrained networks shared by the LFE and the metrics.
struct Towers {
    FaceTower face;       // inside the LFE
    SemanticTower semantic;
    CaptionTower caption;
    FaceTower metric_a;   // FaceSim stand-ins; never used inside the LFE
    FaceTower metric_b;

    static constexpr int kEmbedDim = 32;
    Towers() = default;
    Towers(nn::ParamStore& ps, int identities, int vocab);
};

// Resizes an HWC image to size x size with half-pixel bilinear sampling.
synth::Image resize_image(const synth::Image& img, int size);

struct FuseResult {
    Var kv;                          // [n_kept + n_penultimate, d]
    std::vector<int> positions;      // original token slot of every kv row
    int semantic_kept = 0;
};

// Token fusion ahead of the Q-Former: shallow face-tower maps are resized to
// the semantic grid, concatenated with the semantic tokens, and projected to
// d; penultimate-map tokens get their own projection. DropToken removes each
// semantic-origin token with probability drop_prob but keeps at least one.
class TokenFuser {
public:
    TokenFuser() = default;
    TokenFuser(nn::ParamStore& ps, const std::string& name, std::span<const int> shallow_channels, int semantic_channels,
               int penultimate_channels, int dim);

    FuseResult operator()(const TowerFeatures& features, double drop_prob, Rng* rng) const;

private:
    nn::Linear semantic_proj_, penultimate_proj_;
};

struct QFormerConfig {
    int queries = 16;
    int layers = 2;
    int heads = 4;
    int max_kv = 64;
    bool kv_positions = true;
    double dropout = 0.1;  // feature dropout inside the FFN (training only)
};

class QFormer {
public:
    struct Layer {
        nn::LayerNorm norm_q, norm_kv, norm_ffn;
        nn::Linear wq, wk, wv, wo;
        nn::Mlp ffn;
    };

    QFormer() = default;
    QFormer(nn::ParamStore& ps, const std::string& name, int dim, const QFormerConfig& cfg);

    // positions may be empty (no kv positions); rng enables feature dropout.
    // Throws std::invalid_argument on empty kv.
    Var operator()(const Var& kv, std::span<const int> positions, Rng* rng) const;
    const QFormerConfig& config() const { return cfg_; }

private:
    QFormerConfig cfg_;
    Var queries_, kv_pos_;
    std::vector<Layer> layers_;
};

// Trainable high-frequency path: token fusion + Q-Former.
struct LocalFacialExtractor {
    TokenFuser fuser;
    QFormer qformer;

    LocalFacialExtractor() = default;
    LocalFacialExtractor(nn::ParamStore& ps, const std::string& name, const Towers& towers, int dim, const QFormerConfig& cfg);
    Var operator()(const TowerFeatures& features, double drop_prob, Rng* rng) const;
};

TowerFeatures tower_features(const Towers& towers, const synth::Image& ref_face);

}  // namespace csid::extract
