#include "consisid/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "consisid/errors.hpp"

namespace csid::diffusion {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("noise schedule needs at least one step");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw std::invalid_argument("noise schedule betas must satisfy 0 < start <= end < 1");
    NoiseSchedule s;
    s.steps = steps;
    double ab = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double beta = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1);
        s.betas.push_back(beta);
        ab *= 1.0 - beta;
        s.alpha_bars.push_back(ab);
    }
    return s;
}

void NoiseSchedule::check_timestep(int t) const {
    if (t < 0 || t >= steps) throw std::invalid_argument("timestep " + std::to_string(t) + " outside schedule");
}

std::vector<double> q_sample(const NoiseSchedule& sched, std::span<const double> x0, int t, std::span<const double> eps) {
    sched.check_timestep(t);
    if (x0.size() != eps.size()) throw std::invalid_argument("q_sample: eps shape differs from x0");
    const double a = std::sqrt(sched.alpha_bars[t]), b = std::sqrt(1.0 - sched.alpha_bars[t]);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

NoisedSample draw_noised(const NoiseSchedule& sched, std::span<const double> x0, Rng& rng) {
    NoisedSample s;
    s.t = uniform_int(rng, 0, sched.steps - 1);
    s.eps.resize(x0.size());
    for (auto& e : s.eps) e = standard_normal(rng);
    s.x_t = q_sample(sched, x0, s.t, s.eps);
    return s;
}

ag::Var training_loss(const NoiseSchedule& sched, const EpsModel& model, std::span<const double> x0, ag::Shape shape, Rng& rng) {
    NoisedSample ns = draw_noised(sched, x0, rng);
    ag::Var eps_hat = model(ag::Var::constant(shape, ns.x_t), ns.t);
    for (double v : eps_hat.value())
        if (!std::isfinite(v)) throw NumericDivergenceError("non-finite model output in training loss", -1);
    return ag::mse(eps_hat, ag::Var::constant(std::move(shape), std::move(ns.eps)));
}

std::vector<double> cfg_combine(std::span<const double> eps_uncond, std::span<const double> eps_cond, double w) {
    if (eps_uncond.size() != eps_cond.size()) throw std::invalid_argument("cfg_combine: shape mismatch");
    std::vector<double> out(eps_cond.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]);
    return out;
}

std::vector<int> sampling_timesteps(int schedule_steps, int sampler_steps) {
    if (sampler_steps < 1 || sampler_steps > schedule_steps)
        throw std::invalid_argument("sampler steps must lie in [1, T_diffusion]");
    std::vector<int> ts;
    for (int i = 0; i < sampler_steps; ++i) {
        const double v = static_cast<double>(sampler_steps - i) * schedule_steps / sampler_steps;
        ts.push_back(static_cast<int>(std::lround(v)) - 1);
    }
    return ts;
}

std::vector<double> ddim_step(const NoiseSchedule& sched, std::span<const double> x_t, std::span<const double> eps, int t,
                              int t_prev, bool clip_x0) {
    const double ab = sched.alpha_bars[t];
    const double ab_prev = t_prev >= 0 ? sched.alpha_bars[t_prev] : 1.0;
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double pa = std::sqrt(ab_prev), pb = std::sqrt(1.0 - ab_prev);
    std::vector<double> out(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        double x0 = (x_t[i] - sb * eps[i]) / sa;
        double e = eps[i];
        if (clip_x0 && (x0 > 1.0 || x0 < -1.0)) {
            x0 = std::clamp(x0, -1.0, 1.0);
            e = (x_t[i] - sa * x0) / sb;  // keep the update consistent with the clipped x0
        }
        out[i] = pa * x0 + pb * e;
    }
    return out;
}

std::vector<double> sample(const NoiseSchedule& sched, const GuidedEps& model, std::size_t numel, const SamplerConfig& cfg) {
    const auto ts = sampling_timesteps(sched.steps, cfg.steps);
    Rng rng(derive_seed(cfg.seed, "sampler-init"));
    std::vector<double> x(numel);
    for (auto& v : x) v = standard_normal(rng);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
        std::vector<double> eps = model(x, t, true);
        if (cfg.guidance_scale != 1.0) eps = cfg_combine(model(x, t, false), eps, cfg.guidance_scale);
        x = ddim_step(sched, x, eps, t, t_prev, cfg.clip_x0);
        for (double v : x)
            if (!std::isfinite(v))
                throw NumericDivergenceError("non-finite latent at sampler step " + std::to_string(i), static_cast<std::int64_t>(i));
    }
    return x;
}

}  // namespace csid::diffusion
