#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "consisid/autograd.hpp"
#include "consisid/rng.hpp"

namespace csid::diffusion {

struct NoiseSchedule {
    int steps = 0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    // Linear beta ramp; alpha_bar_t = prod_{s<=t} (1 - beta_s).
    static NoiseSchedule linear(int steps = 200, double beta_start = 1e-4, double beta_end = 2e-2);
    void check_timestep(int t) const;
};

// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps
std::vector<double> q_sample(const NoiseSchedule& sched, std::span<const double> x0, int t, std::span<const double> eps);

struct NoisedSample {
    int t = 0;
    std::vector<double> eps;
    std::vector<double> x_t;
};

// Draws t uniformly from [0, steps) and eps from a standard normal, then noises x0.
NoisedSample draw_noised(const NoiseSchedule& sched, std::span<const double> x0, Rng& rng);

// Differentiable noise predictor: (x_t, t) -> eps_hat with x_t's shape.
using EpsModel = std::function<ag::Var(const ag::Var& x_t, int t)>;

// Base objective: mean squared error between eps and the model prediction at a
// random timestep. Throws NumericDivergenceError on a non-finite prediction.
ag::Var training_loss(const NoiseSchedule& sched, const EpsModel& model, std::span<const double> x0, ag::Shape shape, Rng& rng);

// eps = eps_uncond + w (eps_cond - eps_uncond)
std::vector<double> cfg_combine(std::span<const double> eps_uncond, std::span<const double> eps_cond, double w);

struct SamplerConfig {
    int steps = 50;
    double guidance_scale = 6.0;
    std::uint64_t seed = 0;
    bool clip_x0 = true;  // clamp the predicted x0 to [-1, 1] at every step
};

// Descending timesteps of the strided sub-schedule: round((S - i) * T / S) - 1.
std::vector<int> sampling_timesteps(int schedule_steps, int sampler_steps);

// Non-differentiable predictor used at sampling time; `conditional` selects
// the text-conditioned branch (false = null text).
using GuidedEps = std::function<std::vector<double>(std::span<const double> x_t, int t, bool conditional)>;

// Deterministic DDIM-style sampler from x_T ~ N(0, I) drawn at cfg.seed.
// Guidance scale 1 evaluates only the conditional branch. Throws
// NumericDivergenceError (with the step index) on non-finite intermediates.
std::vector<double> sample(const NoiseSchedule& sched, const GuidedEps& model, std::size_t numel, const SamplerConfig& cfg);

// One deterministic update from timestep t to t_prev (t_prev < 0 means the clean endpoint).
std::vector<double> ddim_step(const NoiseSchedule& sched, std::span<const double> x_t, std::span<const double> eps, int t,
                              int t_prev, bool clip_x0);

}  // namespace csid::diffusion
