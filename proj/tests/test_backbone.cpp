#include "doctest.h"

#include <algorithm>

#include "consisid/backbone.hpp"
#include "grad_check.hpp"

using namespace csid;
using namespace csid::model;
using ag::Var;

namespace {

DiTConfig tiny_config() {
    DiTConfig c;
    c.depth = 1;
    c.dim = 16;
    c.heads = 2;
    c.frames = 2;
    c.height = 8;
    c.width = 8;
    c.timestep_dim = 8;
    c.mlp_ratio = 2;
    c.input_channels = 48;
    return c;
}

void randomize(nn::ParamStore& ps, const std::string& name, std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    Var v = ps.get(name);
    for (auto& x : v.mutable_value()) x = scale * standard_normal(rng);
}

}  // namespace

TEST_CASE("patchify round trip over random shapes") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const int p = std::vector<int>{1, 2, 4}[uniform_int(rng, 0, 2)];
        const int T = uniform_int(rng, 1, 4), H = p * uniform_int(rng, 1, 5), W = p * uniform_int(rng, 1, 5);
        const int C = uniform_int(rng, 1, 3);
        std::vector<double> v(static_cast<std::size_t>(T) * H * W * C);
        for (auto& x : v) x = standard_normal(rng);
        const auto z = patchify(v, T, H, W, C, p);
        CHECK(z.channels == C * p * p);
        CHECK(unpatchify(z, C) == v);
    }
}

TEST_CASE("patchify index mapping") {
    std::vector<double> zeros(4 * 16 * 16 * 3, 0.0);
    const auto z0 = patchify(zeros, 4, 16, 16, 3, 4);
    CHECK(std::all_of(z0.data.begin(), z0.data.end(), [](double x) { return x == 0.0; }));

    // pixel (t=2, y=9, x=6, c=1) -> grid cell (2, 2, 1), in-patch offset (1, 2)
    std::vector<double> one = zeros;
    one[((2 * 16 + 9) * 16 + 6) * 3 + 1] = 5.0;
    const auto z = patchify(one, 4, 16, 16, 3, 4);
    int nonzero = 0;
    for (int tok = 0; tok < z.tokens(); ++tok)
        for (int c = 0; c < z.channels; ++c)
            if (z.at(tok, c) != 0.0) {
                ++nonzero;
                CHECK(tok == (2 * 4 + 2) * 4 + 1);
                CHECK(c == (1 * 4 + 2) * 3 + 1);
            }
    CHECK(nonzero == 1);
    CHECK_THROWS_AS(patchify(std::vector<double>(1 * 10 * 8 * 3), 1, 10, 8, 3, 4), std::invalid_argument);
}

TEST_CASE("text encoder") {
    nn::ParamStore ps(1);
    TextEncoder enc(ps, "text", 17, 8, 16);
    const std::uint16_t a[] = {1, 9, 12, 15}, b[] = {9, 1, 12, 15};
    CHECK(std::ranges::equal(enc.encode(a).value(), enc.encode(a).value()));
    CHECK_FALSE(std::ranges::equal(enc.encode(a).value(), enc.encode(b).value()));
    const Var empty = enc.encode({});
    CHECK(empty.rows() == 1);
    CHECK(std::ranges::equal(empty.value(), enc.null_embedding().value()));
    const std::uint16_t bad[] = {17};
    CHECK_THROWS_AS(enc.encode(bad), std::invalid_argument);
}

TEST_CASE("dit output contract at init") {
    const auto cfg = tiny_config();
    nn::ParamStore ps(2);
    DiT dit(ps, cfg, HfSite::Inner);
    TextEncoder enc(ps, "text", cfg.text_vocab, cfg.max_text_tokens, cfg.dim);
    Rng rng(3);
    Var x = Var::constant({cfg.vision_tokens(), cfg.input_channels}, testing::random_vector(cfg.vision_tokens() * 48, rng));
    const std::uint16_t cap[] = {2, 8, 11, 16};
    Var f = Var::constant({4, cfg.dim}, testing::random_vector(4 * cfg.dim, rng));
    Var out = dit.forward(x, enc.encode(cap), 10, &f);
    CHECK(out.rows() == cfg.vision_tokens());
    CHECK(out.cols() == cfg.base_channels());
    CHECK(std::all_of(out.value().begin(), out.value().end(), [](double v) { return v == 0.0; }));

    Var bad = Var::constant({cfg.vision_tokens(), 40}, std::vector<double>(cfg.vision_tokens() * 40));
    CHECK_THROWS_AS(dit.forward(bad, enc.encode(cap), 10, nullptr), std::invalid_argument);
    CHECK_THROWS_AS(dit.forward(x, enc.encode(cap), cfg.timesteps, nullptr), std::invalid_argument);
}

TEST_CASE("dit is deterministic and batch independent") {
    const auto cfg = tiny_config();
    nn::ParamStore ps(4);
    DiT dit(ps, cfg, HfSite::Output);
    TextEncoder enc(ps, "text", cfg.text_vocab, cfg.max_text_tokens, cfg.dim);
    randomize(ps, "dit.out_proj.weight", 5);
    randomize(ps, "dit.block0.id_attn.wo.weight", 6);
    Rng rng(7);
    std::vector<Var> batch;
    for (int i = 0; i < 3; ++i)
        batch.push_back(Var::constant({cfg.vision_tokens(), 48}, testing::random_vector(cfg.vision_tokens() * 48, rng)));
    const std::uint16_t cap[] = {3, 9, 12, 15};
    Var f = Var::constant({4, cfg.dim}, testing::random_vector(4 * cfg.dim, rng));
    ag::NoGradGuard ng;
    std::vector<std::vector<double>> outs;
    for (auto& x : batch) {
        const Var y = dit.forward(x, enc.encode(cap), 50, &f);
        outs.emplace_back(y.value().begin(), y.value().end());
    }
    const int order[] = {2, 0, 1};
    for (int k = 0; k < 3; ++k) {
        const Var y = dit.forward(batch[order[k]], enc.encode(cap), 50, &f);
        CHECK(std::vector<double>(y.value().begin(), y.value().end()) == outs[order[k]]);
    }
}

TEST_CASE("dit gradients match finite differences") {
    const auto cfg = tiny_config();
    for (HfSite site : {HfSite::Inner, HfSite::Output, HfSite::Input, HfSite::Pre}) {
        nn::ParamStore ps(8);
        DiT dit(ps, cfg, site);
        TextEncoder enc(ps, "text", cfg.text_vocab, cfg.max_text_tokens, cfg.dim);
        // break the zero-init so every parameter receives gradient
        for (const auto& [name, v] : ps.entries())
            if (name.find("out_proj.weight") != std::string::npos || name.find(".wo.") != std::string::npos)
                randomize(ps, name, std::hash<std::string>{}(name), 0.3);
        Rng rng(9);
        Var x = Var::constant({cfg.vision_tokens(), 48}, testing::random_vector(cfg.vision_tokens() * 48, rng));
        Var f = Var::parameter({3, cfg.dim}, testing::random_vector(3 * cfg.dim, rng));
        Var target = Var::constant({cfg.vision_tokens(), 48}, testing::random_vector(cfg.vision_tokens() * 48, rng));
        const std::uint16_t cap[] = {1, 10, 13, 16};
        std::vector<Var> params;
        for (const auto& [_, v] : ps.entries()) params.push_back(v);
        params.push_back(f);
        auto r = testing::grad_check([&] { return ag::mse(dit.forward(x, enc.encode(cap), 123, &f), target); }, params, 1e-5, 16);
        INFO("site " << hf_site_name(site));
        CHECK(r.max_rel_err < 1e-3);
        CHECK(r.max_abs_grad > 0.0);
    }
}
