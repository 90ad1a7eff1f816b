#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "consisid/extractors.hpp"
#include "grad_check.hpp"

using namespace csid;
using namespace csid::extract;
using ag::Var;

namespace {

synth::Image random_image(int size, Rng& rng) {
    synth::Image img{size, size, 3, std::vector<float>(static_cast<std::size_t>(size) * size * 3)};
    for (auto& v : img.data) v = static_cast<float>(uniform01(rng));
    return img;
}

double l2(std::span<const double> v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("gfe output contract") {
    nn::ParamStore ps(1);
    GlobalFacialExtractor gfe(ps, "gfe", 8, 8, 8);
    Rng rng(2);
    const auto ref = random_image(64, rng), kps = random_image(64, rng);
    const Var a = gfe.encode(ref, kps);
    CHECK(a.rows() == 64);
    CHECK(a.cols() == 8);
    const Var b = gfe.encode(ref, kps);
    CHECK(std::ranges::equal(a.value(), b.value()));
    auto kps2 = kps;
    for (int i = 0; i < 200; ++i) kps2.data[i * 17] = 1.f - kps2.data[i * 17];
    const Var c = gfe.encode(ref, kps2);
    std::vector<double> diff(a.numel());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = a.value()[i] - c.value()[i];
    CHECK(l2(diff) > 0.0);
    CHECK_THROWS_AS(gfe.encode(random_image(32, rng), kps), std::invalid_argument);

    // a 4x6 latent grid is reached by resampling the 8x8 conv output
    GlobalFacialExtractor other(ps, "gfe2", 8, 4, 6);
    CHECK(other.encode(ref, kps).rows() == 24);
}

TEST_CASE("face tower stages") {
    nn::ParamStore ps(3);
    Towers towers(ps, 16, 17);
    Rng rng(4);
    const auto img = random_image(64, rng);
    const auto out = towers.face.forward(img);
    REQUIRE(out.shallow.size() == 2);
    for (const auto& s : out.shallow) {
        CHECK(s.dim(1) > out.penultimate.dim(1));
        CHECK(s.dim(2) > out.penultimate.dim(2));
    }
    CHECK(out.embedding.cols() == Towers::kEmbedDim);
    CHECK(std::ranges::equal(out.embedding.value(), towers.face.forward(img).embedding.value()));
    const auto f = tower_features(towers, img);
    CHECK(f.grid == 4);
    CHECK(f.semantic.rows() == 16);
    CHECK(std::ranges::equal(f.semantic.value(), tower_features(towers, img).semantic.value()));
}

TEST_CASE("fuse_tokens counts and DropToken frequency") {
    nn::ParamStore ps(5);
    Towers towers(ps, 16, 17);
    const int shallow[] = {16, 32};
    TokenFuser fuser(ps, "fuse", shallow, 32, 64, 24);
    Rng rng(6);
    const auto feats = tower_features(towers, random_image(64, rng));
    auto r0 = fuser(feats, 0.0, &rng);
    CHECK(r0.kv.rows() == 16 + 16);
    CHECK(r0.kv.cols() == 24);
    auto r1 = fuser(feats, 1.0, &rng);
    CHECK(r1.semantic_kept == 1);
    CHECK(r1.kv.rows() == 1 + 16);
    long dropped = 0, total = 0;
    for (int trial = 0; trial < 625; ++trial) {
        auto r = fuser(feats, 0.3, &rng);
        dropped += 16 - r.semantic_kept;
        total += 16;
    }
    CHECK(total == 10000);
    CHECK(std::abs(static_cast<double>(dropped) / total - 0.3) < 0.03);
    CHECK_THROWS_AS(fuser(feats, 1.5, &rng), std::invalid_argument);
}

TEST_CASE("qformer hand-computed single token") {
    nn::ParamStore ps(7);
    QFormerConfig cfg;
    cfg.queries = 3;
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.kv_positions = false;
    cfg.dropout = 0.0;
    QFormer qf(ps, "qf", 4, cfg);
    auto set = [&](const std::string& name, std::vector<double> v) {
        Var p = ps.get(name);
        std::copy(v.begin(), v.end(), p.mutable_value().begin());
    };
    const std::vector<double> eye = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    set("qf.queries", std::vector<double>(12, 0.0));
    set("qf.layer0.wq.weight", std::vector<double>(16, 0.0));
    set("qf.layer0.wk.weight", std::vector<double>(16, 0.0));
    set("qf.layer0.wv.weight", eye);
    set("qf.layer0.wo.weight", eye);
    set("qf.layer0.ffn.fc2.weight", std::vector<double>(32, 0.0));
    set("qf.layer0.ffn.fc2.bias", std::vector<double>(4, 0.0));
    const std::vector<double> kv = {0.5, -1.0, 2.0, 0.25};
    const Var out = qf(Var::constant({1, 4}, kv), {}, nullptr);
    // value vector = LN(kv) with unit gain and zero bias
    const double mean = (0.5 - 1.0 + 2.0 + 0.25) / 4.0;
    double var = 0;
    for (double x : kv) var += (x - mean) * (x - mean) / 4.0;
    for (int q = 0; q < 3; ++q)
        for (int j = 0; j < 4; ++j)
            CHECK(out.value()[q * 4 + j] == doctest::Approx((kv[j] - mean) / std::sqrt(var + 1e-5)).epsilon(1e-12));
}

TEST_CASE("qformer is permutation invariant without positions") {
    nn::ParamStore ps(8);
    QFormerConfig cfg;
    cfg.kv_positions = false;
    QFormer qf(ps, "qf", 16, cfg);
    Rng rng(9);
    const int n = 7;
    const auto kv = testing::random_vector(n * 16, rng);
    const Var base = qf(Var::constant({n, 16}, kv), {}, nullptr);
    CHECK(base.rows() == 16);
    CHECK(base.cols() == 16);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<double> pk(kv.size());
        for (int i = 0; i < n; ++i) std::copy_n(kv.begin() + perm[i] * 16, 16, pk.begin() + i * 16);
        const Var out = qf(Var::constant({n, 16}, pk), {}, nullptr);
        for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.value()[i] == doctest::Approx(base.value()[i]).epsilon(1e-10));
    }
    for (int len : {1, 3, 40}) CHECK(qf(Var::constant({len, 16}, testing::random_vector(len * 16, rng)), {}, nullptr).rows() == 16);
    CHECK_THROWS_AS(qf(Var(), {}, nullptr), std::invalid_argument);
}

TEST_CASE("extractor gradients match finite differences") {
    Rng rng(10);
    SUBCASE("gfe") {
        nn::ParamStore ps(11);
        GlobalFacialExtractor gfe(ps, "gfe", 8, 8, 8);
        Var x = Var::constant({6, 64, 64}, testing::random_vector(6 * 64 * 64, rng, 0.5));
        Var probe = Var::constant({64, 8}, testing::random_vector(512, rng));
        std::vector<Var> params;
        for (const auto& [_, v] : ps.entries()) params.push_back(v);
        auto r = testing::grad_check([&] { return ag::sum_all(ag::mul(gfe.encode_chw(x), probe)); }, params, 1e-5, 24);
        CHECK(r.max_rel_err < 1e-3);
    }
    SUBCASE("fuse_tokens and qformer") {
        nn::ParamStore tps(12);
        Towers towers(tps, 16, 17);
        const auto feats = tower_features(towers, random_image(64, rng));
        nn::ParamStore ps(13);
        const int shallow[] = {16, 32};
        TokenFuser fuser(ps, "fuse", shallow, 32, 64, 8);
        QFormerConfig cfg;
        cfg.heads = 2;
        cfg.dropout = 0.0;
        QFormer qf(ps, "qf", 8, cfg);
        Var probe = Var::constant({16, 8}, testing::random_vector(128, rng));
        std::vector<Var> params;
        for (const auto& [_, v] : ps.entries()) params.push_back(v);
        auto r = testing::grad_check(
            [&] {
                auto fused = fuser(feats, 0.0, nullptr);
                return ag::sum_all(ag::mul(qf(fused.kv, fused.positions, nullptr), probe));
            },
            params, 1e-5, 24);
        CHECK(r.max_rel_err < 1e-3);
        CHECK(r.max_abs_grad > 0.0);
    }
}

TEST_CASE("resize_image keeps constants and sizes") {
    synth::Image img{32, 32, 3, std::vector<float>(32 * 32 * 3, 0.25f)};
    const auto up = resize_image(img, 64);
    CHECK(up.height == 64);
    for (float v : up.data) CHECK(v == doctest::Approx(0.25f));
}
