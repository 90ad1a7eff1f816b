#include "doctest.h"

#include <cmath>

#include "consisid/diffusion.hpp"
#include "consisid/errors.hpp"

using namespace csid;
using namespace csid::diffusion;

namespace {

double variance(const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("schedule invariants") {
    const auto s = NoiseSchedule::linear(1000);
    CHECK(NoiseSchedule::linear().steps == 200);
    CHECK(s.steps == 1000);
    CHECK(s.alpha_bars[0] == doctest::Approx(1 - 1e-4).epsilon(1e-12));
    for (int t = 0; t < s.steps; ++t) {
        CHECK(s.betas[t] > 0.0);
        CHECK(s.betas[t] < 1.0);
        CHECK(s.alpha_bars[t] > 0.0);
        CHECK(s.alpha_bars[t] < 1.0);
        if (t > 0) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    }
}

TEST_CASE("q_sample") {
    const auto s = NoiseSchedule::linear(1000);
    const std::vector<double> x0 = {1.0, -2.0, 0.5};
    const std::vector<double> zero(3, 0.0);
    const auto a = q_sample(s, x0, 0, zero);
    CHECK(a[0] == doctest::Approx(0.99995).epsilon(1e-6));
    const auto b = q_sample(s, x0, 400, zero);
    for (int i = 0; i < 3; ++i) CHECK(b[i] == std::sqrt(s.alpha_bars[400]) * x0[i]);
    CHECK_THROWS_AS(q_sample(s, x0, 1000, zero), std::invalid_argument);
    CHECK_THROWS_AS(q_sample(s, x0, -1, zero), std::invalid_argument);

    Rng rng(1);
    std::vector<double> big(10000), eps(10000);
    for (auto& x : big) x = standard_normal(rng);
    for (auto& e : eps) e = standard_normal(rng);
    CHECK(std::abs(variance(q_sample(s, big, 999, eps)) - 1.0) < 0.05);
}

TEST_CASE("training_loss oracles") {
    const auto s = NoiseSchedule::linear(1000);
    Rng data_rng(2);
    std::vector<double> x0(10000);
    for (auto& x : x0) x = std::tanh(standard_normal(data_rng));
    EpsModel zero = [](const ag::Var& x, int) { return ag::Var::constant(x.shape(), std::vector<double>(x.numel(), 0.0)); };
    Rng r1(3);
    CHECK(std::abs(training_loss(s, zero, x0, {100, 100}, r1).item() - 1.0) < 0.05);

    EpsModel perfect = [&](const ag::Var& x, int t) {
        std::vector<double> e(x.numel());
        for (std::size_t i = 0; i < e.size(); ++i)
            e[i] = (x.value()[i] - std::sqrt(s.alpha_bars[t]) * x0[i]) / std::sqrt(1 - s.alpha_bars[t]);
        return ag::Var::constant(x.shape(), e);
    };
    Rng r2(4);
    CHECK(training_loss(s, perfect, x0, {100, 100}, r2).item() < 1e-20);

    Rng r3(5), r4(5);
    CHECK(training_loss(s, zero, x0, {100, 100}, r3).item() == training_loss(s, zero, x0, {100, 100}, r4).item());

    EpsModel broken = [](const ag::Var& x, int) { return ag::Var::constant(x.shape(), std::vector<double>(x.numel(), NAN)); };
    Rng r5(6);
    CHECK_THROWS_AS(training_loss(s, broken, x0, {100, 100}, r5), NumericDivergenceError);
}

TEST_CASE("cfg_combine") {
    const std::vector<double> u = {1, 2, 3}, c = {2, 0, 5};
    CHECK(cfg_combine(u, c, 1.0) == c);
    CHECK(cfg_combine(u, c, 0.0) == u);
    CHECK(cfg_combine(c, c, 6.0) == c);
    CHECK(cfg_combine(u, c, 2.0) == std::vector<double>{3, -2, 7});
}

TEST_CASE("sampling timesteps are a uniform stride") {
    CHECK(sampling_timesteps(1000, 1) == std::vector<int>{999});
    CHECK(sampling_timesteps(1000, 4) == std::vector<int>{999, 749, 499, 249});
    const auto all = sampling_timesteps(100, 100);
    for (int i = 0; i < 100; ++i) CHECK(all[i] == 99 - i);
    CHECK_THROWS_AS(sampling_timesteps(100, 0), std::invalid_argument);
    CHECK_THROWS_AS(sampling_timesteps(100, 101), std::invalid_argument);
}

TEST_CASE("sampler recovers constant data with a perfect oracle") {
    const auto s = NoiseSchedule::linear(1000);
    const double c = 0.37;
    GuidedEps oracle = [&](std::span<const double> x, int t, bool) {
        std::vector<double> e(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            e[i] = (x[i] - std::sqrt(s.alpha_bars[t]) * c) / std::sqrt(1 - s.alpha_bars[t]);
        return e;
    };
    SamplerConfig cfg;
    cfg.steps = 50;
    const auto out = sample(s, oracle, 4096, cfg);
    double mean = 0;
    for (double v : out) mean += v / 4096.0;
    CHECK(std::abs(mean - c) < 0.05 * c);
    CHECK(sample(s, oracle, 4096, cfg) == out);
}

TEST_CASE("steps=1 applies exactly one update") {
    const auto s = NoiseSchedule::linear(1000);
    int calls = 0;
    GuidedEps counter = [&](std::span<const double> x, int, bool) {
        ++calls;
        return std::vector<double>(x.size(), 0.0);
    };
    SamplerConfig cfg;
    cfg.steps = 1;
    cfg.guidance_scale = 1.0;
    sample(s, counter, 8, cfg);
    CHECK(calls == 1);
    calls = 0;
    cfg.guidance_scale = 6.0;
    sample(s, counter, 8, cfg);
    CHECK(calls == 2);
}

TEST_CASE("zero predictor variance follows the scalar recursion") {
    const auto s = NoiseSchedule::linear(1000);
    GuidedEps zero = [](std::span<const double> x, int, bool) { return std::vector<double>(x.size(), 0.0); };
    for (int steps : {1, 7, 50}) {
        SamplerConfig cfg;
        cfg.steps = steps;
        cfg.clip_x0 = false;
        const auto out = sample(s, zero, 10000, cfg);
        // with eps = 0, x <- sqrt(ab_prev / ab) x at every step
        double gain = 1.0;
        const auto ts = sampling_timesteps(s.steps, steps);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const double prev = i + 1 < ts.size() ? s.alpha_bars[ts[i + 1]] : 1.0;
            gain *= std::sqrt(prev / s.alpha_bars[ts[i]]);
        }
        CHECK(std::abs(variance(out) / (gain * gain) - 1.0) < 0.05);
    }
}

TEST_CASE("sampler reports the step of a non-finite latent") {
    const auto s = NoiseSchedule::linear(1000);
    int calls = 0;
    GuidedEps flaky = [&](std::span<const double> x, int, bool) {
        ++calls;
        return std::vector<double>(x.size(), calls >= 3 ? INFINITY : 0.0);
    };
    SamplerConfig cfg;
    cfg.steps = 10;
    cfg.guidance_scale = 1.0;
    cfg.clip_x0 = false;
    try {
        sample(s, flaky, 8, cfg);
        FAIL("expected divergence");
    } catch (const NumericDivergenceError& e) {
        CHECK(e.step == 2);
    }
}
