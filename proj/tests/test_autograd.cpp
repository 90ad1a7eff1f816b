#include "doctest.h"

#include <cstdint>

#include "consisid/autograd.hpp"
#include "consisid/nn.hpp"
#include "grad_check.hpp"

using namespace csid;
using ag::Var;
using testing::grad_check;
using testing::random_vector;

namespace {

Var rand_param(ag::Shape shape, Rng& rng, double scale = 1.0) {
    return Var::parameter(shape, random_vector(ag::shape_numel(shape), rng, scale));
}

}  // namespace

TEST_CASE("matmul and linear gradients") {
    Rng rng(1);
    Var a = rand_param({3, 4}, rng), b = rand_param({4, 5}, rng), bias = rand_param({5}, rng);
    auto r = grad_check([&] { return ag::sum_all(ag::mul(ag::linear(a, b, bias), ag::linear(a, b, bias))); }, {a, b, bias});
    CHECK(r.max_rel_err < 1e-5);
    auto r2 = grad_check([&] { return ag::mean_all(ag::silu(ag::matmul(ag::transpose(b), ag::transpose(a)))); }, {a, b});
    CHECK(r2.max_rel_err < 1e-5);
}

TEST_CASE("elementwise, norm and attention gradients") {
    Rng rng(2);
    Var x = rand_param({4, 6}, rng), y = rand_param({4, 6}, rng);
    Var g = rand_param({6}, rng), bb = rand_param({6}, rng);
    Var w = rand_param({6}, rng);
    CHECK(grad_check([&] { return ag::sum_all(ag::mul(ag::gelu(x), ag::sub(y, x))); }, {x, y}).max_rel_err < 1e-5);
    CHECK(grad_check([&] { return ag::sum_all(ag::mul(ag::layer_norm(x, g, bb), y)); }, {x, g, bb}).max_rel_err < 1e-5);
    CHECK(grad_check([&] { return ag::sum_all(ag::mul(ag::add_rowvec(ag::scale(x, 0.3), w), y)); }, {x, w}).max_rel_err < 1e-5);
    Var q = rand_param({3, 6}, rng), k = rand_param({5, 6}, rng), v = rand_param({5, 6}, rng);
    Var probe = Var::constant({3, 6}, random_vector(18, rng));
    CHECK(grad_check([&] { return ag::sum_all(ag::mul(ag::attention(q, k, v, 2), probe)); }, {q, k, v}).max_rel_err < 1e-5);
    CHECK(grad_check([&] { return ag::sum_all(ag::mul(ag::l2_normalize_rows(x), y)); }, {x}).max_rel_err < 1e-5);
}

TEST_CASE("structural op gradients") {
    Rng rng(3);
    Var a = rand_param({2, 3}, rng), b = rand_param({4, 3}, rng), c = rand_param({2, 5}, rng);
    const int idx[] = {3, 0, 0, 2};
    auto f = [&] {
        Var rows = ag::concat_rows({a, b});
        Var sl = ag::slice_rows(rows, 1, 5);
        Var g = ag::gather_rows(sl, idx);
        Var cols = ag::concat_cols({a, c});
        Var sc = ag::slice_cols(cols, 2, 7);
        Var r = ag::reshape(sc, {5, 2});
        return ag::add(ag::sum_all(ag::mul(g, g)), ag::sum_all(ag::mul(ag::mean_rows(r), ag::mean_rows(r))));
    };
    CHECK(grad_check(f, {a, b, c}).max_rel_err < 1e-5);
}

TEST_CASE("conv2d matches a direct loop and has correct gradients") {
    Rng rng(4);
    Var x = rand_param({2, 6, 5}, rng), w = rand_param({3, 2 * 3 * 3}, rng), b = rand_param({3}, rng);
    Var y = ag::conv2d(x, w, b, 3, 2, 1);
    REQUIRE(y.shape() == ag::Shape{3, 3, 3});
    for (int co = 0; co < 3; ++co)
        for (int oy = 0; oy < 3; ++oy)
            for (int ox = 0; ox < 3; ++ox) {
                double s = b.value()[co];
                for (int ci = 0; ci < 2; ++ci)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                            if (iy < 0 || iy >= 6 || ix < 0 || ix >= 5) continue;
                            s += w.value()[co * 18 + ci * 9 + ky * 3 + kx] * x.value()[(ci * 6 + iy) * 5 + ix];
                        }
                CHECK(y.value()[(co * 3 + oy) * 3 + ox] == doctest::Approx(s).epsilon(1e-12));
            }
    CHECK(grad_check([&] { return ag::sum_all(ag::mul(ag::conv2d(x, w, b, 3, 2, 1), ag::conv2d(x, w, b, 3, 2, 1))); }, {x, w, b})
              .max_rel_err < 1e-5);
}

TEST_CASE("losses") {
    Rng rng(5);
    Var a = rand_param({3, 4}, rng), b = rand_param({3, 4}, rng);
    std::vector<double> m(12, 0.0);
    m[1] = 1;
    m[7] = 0.5;
    CHECK(grad_check([&] { return ag::masked_mse(a, b, m); }, {a, b}).max_rel_err < 1e-5);
    const int labels[] = {0, 3, 2};
    CHECK(grad_check([&] { return ag::cross_entropy(a, labels); }, {a}).max_rel_err < 1e-5);
    CHECK(ag::masked_mse(a, b, std::vector<double>(12, 1.0)).item() == ag::mse(a, b).item());
    CHECK(ag::masked_mse(a, b, std::vector<double>(12, 0.0)).item() == 0.0);
}

TEST_CASE("no-grad mode records nothing") {
    Var a = Var::parameter({2, 2}, {1, 2, 3, 4});
    ag::NoGradGuard ng;
    Var y = ag::mul(a, a);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("adamw moves parameters against the gradient") {
    nn::ParamStore ps(3);
    Var w = ps.add("w", {4}, nn::Init::Normal);
    std::vector<double> before(w.value().begin(), w.value().end());
    nn::AdamW opt(nn::AdamW::Options{0.9, 0.999, 1e-8, 0.0});
    Var loss = ag::sum_all(ag::mul(w, w));
    ag::backward(loss);
    opt.step({w}, 0.1);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(w.value()[i]) < std::abs(before[i]));
}

TEST_CASE("cosine_with_restarts schedule") {
    CHECK(nn::cosine_with_restarts(0, 100, 10, 1) == doctest::Approx(0.1));
    CHECK(nn::cosine_with_restarts(10, 100, 10, 1) == doctest::Approx(1.0));
    CHECK(nn::cosine_with_restarts(55, 100, 10, 1) == doctest::Approx(0.5));
    // two cycles restart at the midpoint of the decay phase
    CHECK(nn::cosine_with_restarts(55, 100, 10, 2) == doctest::Approx(1.0));
}

TEST_CASE("tensor buffers are 64-byte aligned") {
    Rng rng(77);
    for (int n : {1, 3, 17, 64}) {
        const Var a = Var::constant({n, 5}, testing::random_vector(n * 5, rng));
        const Var b = Var::constant({5, 7}, testing::random_vector(35, rng));
        const Var c = ag::matmul(a, b);
        CHECK(reinterpret_cast<std::uintptr_t>(a.value().data()) % 64 == 0);
        CHECK(reinterpret_cast<std::uintptr_t>(c.value().data()) % 64 == 0);
    }
}
