#include "consisid/extractors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace csid::extract {

namespace {

Var six_channel_input(const synth::Image& ref, const synth::Image& kps, int size) {
    if (ref.height != size || ref.width != size || kps.height != size || kps.width != size || ref.channels != 3 ||
        kps.channels != 3)
        throw std::invalid_argument("gfe_encode: reference and keypoint images must both be S x S x 3");
    std::vector<double> data(static_cast<std::size_t>(6) * size * size);
    for (int c = 0; c < 6; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const float v = c < 3 ? ref.at(y, x, c) : kps.at(y, x, c - 3);
                data[(static_cast<std::size_t>(c) * size + y) * size + x] = 2.0 * v - 1.0;
            }
    return Var::constant({6, size, size}, std::move(data));
}

Var avg_pool(const Var& chw) { return ag::mean_rows(nn::chw_to_tokens(chw)); }

}  // namespace

GlobalFacialExtractor::GlobalFacialExtractor(nn::ParamStore& ps, const std::string& name, int channels, int grid_h,
                                             int grid_w, int ref_size)
    : channels_(channels), grid_h_(grid_h), grid_w_(grid_w), ref_size_(ref_size) {
    const int widths[] = {6, 16, 32, 32};
    for (int i = 0; i < 3; ++i)
        convs_.emplace_back(ps, name + ".conv" + std::to_string(i), widths[i], widths[i + 1], 4, 2, 1);
    head_ = nn::Conv2d(ps, name + ".head", widths[3], channels, 1, 1, 0);
}

Var GlobalFacialExtractor::encode_chw(const Var& x) const {
    if (x.shape().size() != 3 || x.dim(0) != 6) throw std::invalid_argument("gfe_encode: expected a 6-channel image");
    Var h = x;
    for (const auto& c : convs_) h = ag::silu(c(h));
    h = head_(h);
    const int hh = h.dim(1), ww = h.dim(2);
    return nn::resize_tokens(nn::chw_to_tokens(h), hh, ww, grid_h_, grid_w_);
}

Var GlobalFacialExtractor::encode(const synth::Image& ref_face, const synth::Image& kps_image) const {
    return encode_chw(six_channel_input(ref_face, kps_image, ref_size_));
}

FaceTower::FaceTower(nn::ParamStore& ps, const std::string& name, std::array<int, 4> widths, int embed_dim, int classes) {
    int cin = 3;
    for (int i = 0; i < 4; ++i) {
        stages_.emplace_back(ps, name + ".stage" + std::to_string(i), cin, widths[i], 4, 2, 1);
        cin = widths[i];
    }
    embed_ = nn::Linear(ps, name + ".embed", cin, embed_dim);
    classify_ = nn::Linear(ps, name + ".classify", embed_dim, classes);
}

FaceTower::Output FaceTower::forward(const Var& x) const {
    Output out;
    Var h = x;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        h = ag::silu(stages_[i](h));
        if (i < 2) out.shallow.push_back(h);
    }
    out.penultimate = h;
    out.embedding = embed_(avg_pool(h));
    // cosine classifier: logits depend on the embedding direction only
    out.logits = classify_(ag::scale(ag::l2_normalize_rows(out.embedding), 10.0));
    return out;
}

FaceTower::Output FaceTower::forward(const synth::Image& image) const {
    return forward(nn::image_to_chw(image.data, image.height, image.width, image.channels));
}

SemanticTower::SemanticTower(nn::ParamStore& ps, const std::string& name, int width, int embed_dim) : width_(width) {
    const int widths[] = {16, 32, width, width};
    int cin = 3;
    for (int i = 0; i < 4; ++i) {
        stages_.emplace_back(ps, name + ".stage" + std::to_string(i), cin, widths[i], 4, 2, 1);
        cin = widths[i];
    }
    head_ = nn::Linear(ps, name + ".head", width, embed_dim);
}

Var SemanticTower::tokens(const Var& x) const {
    Var h = x;
    for (const auto& s : stages_) h = ag::silu(s(h));
    return nn::chw_to_tokens(h);
}

Var SemanticTower::embed(const Var& x) const { return head_(ag::mean_rows(tokens(x))); }

CaptionTower::CaptionTower(nn::ParamStore& ps, const std::string& name, int vocab, int embed_dim) : vocab_(vocab) {
    table_ = ps.add(name + ".table", {vocab, embed_dim}, nn::Init::Normal, 0.5);
    head_ = nn::Linear(ps, name + ".head", embed_dim, embed_dim);
}

Var CaptionTower::embed(std::span<const std::uint16_t> tokens) const {
    if (tokens.empty()) throw std::invalid_argument("caption tower: empty caption");
    std::vector<int> idx;
    for (auto t : tokens) {
        if (t >= vocab_) throw std::invalid_argument("caption tower: token outside vocabulary");
        idx.push_back(t);
    }
    return head_(ag::mean_rows(ag::gather_rows(table_, idx)));
}

Towers::Towers(nn::ParamStore& ps, int identities, int vocab)
    : face(ps, "towers.face", {16, 32, 64, 64}, kEmbedDim, identities),
      semantic(ps, "towers.semantic", 32, kEmbedDim),
      caption(ps, "towers.caption", vocab, kEmbedDim),
      metric_a(ps, "towers.metric_a", {12, 24, 48, 48}, kEmbedDim, identities),
      metric_b(ps, "towers.metric_b", {16, 24, 40, 56}, kEmbedDim, identities) {}

synth::Image resize_image(const synth::Image& img, int size) {
    if (img.height == size && img.width == size) return img;
    synth::Image out{size, size, img.channels, std::vector<float>(static_cast<std::size_t>(size) * size * img.channels)};
    auto axis = [](int o, int in_n, int out_n, int& i0, int& i1, double& f) {
        const double src = std::clamp((o + 0.5) * in_n / out_n - 0.5, 0.0, static_cast<double>(in_n - 1));
        i0 = static_cast<int>(std::floor(src));
        i1 = std::min(i0 + 1, in_n - 1);
        f = src - i0;
    };
    for (int y = 0; y < size; ++y) {
        int y0, y1;
        double fy;
        axis(y, img.height, size, y0, y1, fy);
        for (int x = 0; x < size; ++x) {
            int x0, x1;
            double fx;
            axis(x, img.width, size, x0, x1, fx);
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = static_cast<float>((1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                                                     fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c)));
        }
    }
    return out;
}

TokenFuser::TokenFuser(nn::ParamStore& ps, const std::string& name, std::span<const int> shallow_channels,
                       int semantic_channels, int penultimate_channels, int dim) {
    int fused = semantic_channels;
    for (int c : shallow_channels) fused += c;
    semantic_proj_ = nn::Linear(ps, name + ".semantic_proj", fused, dim);
    penultimate_proj_ = nn::Linear(ps, name + ".penultimate_proj", penultimate_channels, dim);
}

FuseResult TokenFuser::operator()(const TowerFeatures& f, double drop_prob, Rng* rng) const {
    if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw std::invalid_argument("fuse_tokens: drop_prob outside [0,1]");
    const int g = f.grid;
    if (f.semantic.rows() != g * g) throw std::invalid_argument("fuse_tokens: semantic grid size mismatch");
    std::vector<Var> parts;
    for (const auto& s : f.shallow)
        parts.push_back(nn::resize_tokens(nn::chw_to_tokens(s), s.dim(1), s.dim(2), g, g));
    parts.push_back(f.semantic);
    Var fused = semantic_proj_(ag::concat_cols(parts));

    FuseResult out;
    std::vector<int> keep;
    for (int i = 0; i < g * g; ++i) {
        const bool drop = rng && drop_prob > 0.0 && uniform01(*rng) < drop_prob;
        if (!drop) keep.push_back(i);
    }
    if (keep.empty()) keep.push_back(rng ? uniform_int(*rng, 0, g * g - 1) : 0);
    out.semantic_kept = static_cast<int>(keep.size());
    Var kept = static_cast<int>(keep.size()) == g * g ? fused : ag::gather_rows(fused, keep);

    Var pen = penultimate_proj_(nn::chw_to_tokens(f.penultimate));
    out.kv = ag::concat_rows({kept, pen});
    out.positions = keep;
    for (int i = 0; i < pen.rows(); ++i) out.positions.push_back(g * g + i);
    return out;
}

QFormer::QFormer(nn::ParamStore& ps, const std::string& name, int dim, const QFormerConfig& cfg) : cfg_(cfg) {
    if (cfg.queries < 1 || cfg.layers < 1 || cfg.heads < 1 || dim % cfg.heads != 0)
        throw std::invalid_argument("QFormer: invalid configuration");
    queries_ = ps.add(name + ".queries", {cfg.queries, dim}, nn::Init::Normal, 0.5);
    if (cfg.kv_positions) kv_pos_ = ps.add(name + ".kv_pos", {cfg.max_kv, dim}, nn::Init::Normal, 0.1);
    for (int i = 0; i < cfg.layers; ++i) {
        const std::string l = name + ".layer" + std::to_string(i);
        Layer layer;
        layer.norm_q = nn::LayerNorm(ps, l + ".norm_q", dim);
        layer.norm_kv = nn::LayerNorm(ps, l + ".norm_kv", dim);
        layer.norm_ffn = nn::LayerNorm(ps, l + ".norm_ffn", dim);
        layer.wq = nn::Linear(ps, l + ".wq", dim, dim, false);
        layer.wk = nn::Linear(ps, l + ".wk", dim, dim, false);
        layer.wv = nn::Linear(ps, l + ".wv", dim, dim, false);
        layer.wo = nn::Linear(ps, l + ".wo", dim, dim, false);
        layer.ffn = nn::Mlp(ps, l + ".ffn", dim, 2 * dim);
        layers_.push_back(std::move(layer));
    }
}

Var QFormer::operator()(const Var& kv_in, std::span<const int> positions, Rng* rng) const {
    if (!kv_in || kv_in.shape().size() != 2 || kv_in.rows() < 1) throw std::invalid_argument("qformer: empty kv");
    Var kv = kv_in;
    if (cfg_.kv_positions && !positions.empty()) {
        if (static_cast<int>(positions.size()) != kv.rows()) throw std::invalid_argument("qformer: position count mismatch");
        for (int p : positions)
            if (p < 0 || p >= cfg_.max_kv) throw std::invalid_argument("qformer: kv position out of range");
        kv = ag::add(kv, ag::gather_rows(kv_pos_, positions));
    }
    Var q = queries_;
    for (const auto& layer : layers_) {
        Var kn = layer.norm_kv(kv);
        Var a = ag::attention(layer.wq(layer.norm_q(q)), layer.wk(kn), layer.wv(kn), cfg_.heads);
        q = ag::add(q, layer.wo(a));
        Var hidden = ag::gelu(layer.ffn.fc1(layer.norm_ffn(q)));
        if (rng && cfg_.dropout > 0.0) hidden = ag::dropout(hidden, cfg_.dropout, *rng);
        q = ag::add(q, layer.ffn.fc2(hidden));
    }
    return q;
}

LocalFacialExtractor::LocalFacialExtractor(nn::ParamStore& ps, const std::string& name, const Towers&, int dim,
                                           const QFormerConfig& cfg)
    : fuser(ps, name + ".fuse", std::vector<int>{16, 32}, 32, 64, dim), qformer(ps, name + ".qformer", dim, cfg) {}

Var LocalFacialExtractor::operator()(const TowerFeatures& features, double drop_prob, Rng* rng) const {
    FuseResult fused = fuser(features, drop_prob, rng);
    return qformer(fused.kv, fused.positions, rng);
}

TowerFeatures tower_features(const Towers& towers, const synth::Image& ref_face) {
    Var x = nn::image_to_chw(ref_face.data, ref_face.height, ref_face.width, ref_face.channels);
    auto face = towers.face.forward(x);
    TowerFeatures f;
    f.penultimate = face.penultimate;
    f.shallow = face.shallow;
    f.semantic = towers.semantic.tokens(x);
    f.grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(f.semantic.rows()))));
    return f;
}

}  // namespace csid::extract
