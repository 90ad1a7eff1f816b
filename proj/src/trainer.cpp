#include "consisid/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "consisid/backbone.hpp"
#include "consisid/errors.hpp"
#include "json.hpp"

namespace csid::train {

namespace {

void check_unit(double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(what) + " must lie in [0,1]");
}

// p in (0, 1], so that p <= 0 and p > 1 are both impossible
double draw_p(Rng& rng) { return 1.0 - uniform01(rng); }

void axis_weights(int o, int in_n, int out_n, int& i0, int& i1, double& f) {
    const double src = std::clamp((o + 0.5) * in_n / out_n - 0.5, 0.0, static_cast<double>(in_n - 1));
    i0 = static_cast<int>(std::floor(src));
    i1 = std::min(i0 + 1, in_n - 1);
    f = src - i0;
}

}  // namespace

void TrainConfig::validate() const {
    check_unit(alpha, "train.alpha");
    check_unit(beta, "train.beta");
    check_unit(null_text_ratio, "train.null_text_ratio");
    check_unit(coarse_fraction, "train.coarse_fraction");
    check_unit(drop_token_prob, "train.drop_token_prob");
    if (!(zeta_sigma >= 0.0)) throw std::invalid_argument("train.zeta_sigma must be non-negative");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be positive");
    if (total_steps < 1 || batch_size < 1) throw std::invalid_argument("train.total_steps and batch_size must be positive");
    if (!(divergence_grad_threshold > 0.0) || divergence_patience < 1)
        throw std::invalid_argument("train divergence settings must be positive");
    if (!(grad_clip > 0.0) || weight_decay < 0.0 || warmup_steps < 0 || lr_cycles < 1 || window_frames < 1)
        throw std::invalid_argument("train optimizer settings out of range");
}

inject::InjectionPlan effective_plan(const inject::InjectionPlan& plan, const ComponentFlags& flags) {
    inject::InjectionPlan p = plan;
    if (!flags.gfe) {
        p.low_freq = false;
        p.keypoints = false;
    }
    if (!flags.lfe) p.hf_site = model::HfSite::None;
    return p;
}

std::vector<double> mask_to_latent(std::span<const std::uint8_t> mask, int frames, int height, int width, int latent_frames,
                                   int grid_h, int grid_w, int channels) {
    if (mask.size() != static_cast<std::size_t>(frames) * height * width || frames < 1 || latent_frames < 1 || grid_h < 1 ||
        grid_w < 1 || channels < 1)
        throw std::invalid_argument("mask_to_latent: mask size does not match dims");
    if (height % grid_h != 0 || width % grid_w != 0)
        throw std::invalid_argument("mask_to_latent: frame dims not divisible by the latent grid");
    std::vector<double> out(static_cast<std::size_t>(latent_frames) * grid_h * grid_w * channels);
    auto at = [&](int t, int y, int x) { return static_cast<double>(mask[(static_cast<std::size_t>(t) * height + y) * width + x]); };
    for (int t = 0; t < latent_frames; ++t) {
        int t0, t1;
        double ft;
        axis_weights(t, frames, latent_frames, t0, t1, ft);
        for (int y = 0; y < grid_h; ++y) {
            int y0, y1;
            double fy;
            axis_weights(y, height, grid_h, y0, y1, fy);
            for (int x = 0; x < grid_w; ++x) {
                int x0, x1;
                double fx;
                axis_weights(x, width, grid_w, x0, x1, fx);
                auto plane = [&](int tt) {
                    return (1 - fy) * ((1 - fx) * at(tt, y0, x0) + fx * at(tt, y0, x1)) +
                           fy * ((1 - fx) * at(tt, y1, x0) + fx * at(tt, y1, x1));
                };
                const double v = std::clamp((1 - ft) * plane(t0) + ft * plane(t1), 0.0, 1.0);
                const std::size_t token = (static_cast<std::size_t>(t) * grid_h + y) * grid_w + x;
                std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(token * channels), channels, v);
            }
        }
    }
    return out;
}

Var masked_loss(const Var& eps, const Var& eps_hat, std::span<const double> mask) { return ag::masked_mse(eps, eps_hat, mask); }

MaskLossResult dynamic_mask_loss(const Var& eps, const Var& eps_hat, std::span<const double> mask, double alpha, Rng& rng) {
    check_unit(alpha, "alpha");
    MaskLossResult r;
    r.masked = draw_p(rng) > alpha;
    r.loss = r.masked ? masked_loss(eps, eps_hat, mask) : ag::mse(eps, eps_hat);
    return r;
}

const char* ref_branch_name(RefBranch b) {
    switch (b) {
        case RefBranch::InWindow: return "in_window";
        case RefBranch::CrossFace: return "cross_face";
        case RefBranch::Fallback: return "fallback";
    }
    return "in_window";
}

Reference reference_from_frame(const synth::VideoSample& sample, int frame) {
    const auto kps = sample.frame_keypoints(frame);
    const auto tr = synth::alignment_transform(kps);
    Reference r;
    r.face = synth::warp_similarity(sample.frame(frame), tr, synth::kRefSize);
    std::array<synth::Point, synth::kKeypoints> aligned;
    for (int k = 0; k < synth::kKeypoints; ++k) aligned[k] = tr.apply(kps[k]);
    r.keypoints = synth::render_keypoints_rgb(aligned, synth::kRefSize);
    r.frame = frame;
    return r;
}

Reference select_reference(const synth::VideoSample& sample, int window_start, int window_len, double beta,
                           double zeta_sigma, Rng& rng) {
    check_unit(beta, "beta");
    if (window_start < 0 || window_len < 1 || window_start + window_len > sample.frames)
        throw std::invalid_argument("select_reference: window outside the video");
    RefBranch branch = RefBranch::InWindow;
    int frame;
    if (draw_p(rng) <= beta) {
        const int outside = sample.frames - window_len;
        if (outside > 0) {
            branch = RefBranch::CrossFace;
            int k = uniform_int(rng, 0, outside - 1);
            frame = k < window_start ? k : k + window_len;
        } else {
            branch = RefBranch::Fallback;
            frame = window_start + uniform_int(rng, 0, window_len - 1);
        }
    } else {
        frame = window_start + uniform_int(rng, 0, window_len - 1);
    }
    Reference r = reference_from_frame(sample, frame);
    r.branch = branch;
    if (zeta_sigma > 0.0)
        for (auto& v : r.face.data)
            v = static_cast<float>(std::clamp(v + zeta_sigma * standard_normal(rng), 0.0, 1.0));
    return r;
}

const char* phase_name(Phase p) { return p == Phase::Coarse ? "coarse" : "fine"; }

TrainedModel make_model(const inject::ModelConfig& cfg, const inject::InjectionPlan& plan, const extract::Towers* towers,
                        std::uint64_t seed) {
    TrainedModel m;
    m.params = std::make_unique<nn::ParamStore>(derive_seed(seed, "model-params"));
    m.model = inject::assemble(*m.params, cfg, plan, towers);
    return m;
}

Phase TrainState::phase_at(std::int64_t s) const {
    if (!config.flags.cft) return Phase::Fine;
    const auto boundary = static_cast<std::int64_t>(std::llround(config.coarse_fraction * config.total_steps));
    return s < boundary ? Phase::Coarse : Phase::Fine;
}

TrainState init_state(const TrainConfig& cfg, const inject::ModelConfig& model_cfg, const inject::InjectionPlan& plan,
                      const extract::Towers* towers, const diffusion::NoiseSchedule& schedule) {
    cfg.validate();
    TrainState st;
    st.config = cfg;
    st.schedule = schedule;
    if (model_cfg.dit.timesteps != schedule.steps) throw std::invalid_argument("model timestep range differs from the schedule");
    st.net = make_model(model_cfg, effective_plan(plan, cfg.flags), towers, cfg.seed);
    nn::AdamW::Options opt;
    opt.weight_decay = cfg.weight_decay;
    st.optimizer = nn::AdamW(opt);
    st.phase = st.phase_at(0);
    return st;
}

std::vector<int> batch_indices(const TrainConfig& cfg, std::int64_t step, int dataset_size) {
    if (dataset_size < 1) throw std::invalid_argument("empty dataset");
    Rng rng(derive_seed(cfg.seed, 0xba7c5ULL, static_cast<std::uint64_t>(step)));
    std::vector<int> all(dataset_size);
    std::iota(all.begin(), all.end(), 0);
    const int n = std::min(cfg.batch_size, dataset_size);
    for (int i = 0; i < n; ++i) std::swap(all[i], all[i + uniform_int(rng, 0, dataset_size - 1 - i)]);
    std::vector<int> out(all.begin(), all.begin() + n);
    while (static_cast<int>(out.size()) < cfg.batch_size) out.push_back(uniform_int(rng, 0, dataset_size - 1));
    return out;
}

StepRecord compute_gradients(TrainState& st, std::span<const synth::VideoSample> dataset, std::span<const int> batch) {
    const TrainConfig& cfg = st.config;
    auto& model = st.net.model;
    const auto& dcfg = model.config().dit;
    st.phase = st.phase_at(st.step);
    st.net.params->set_trainable("lfe.", st.phase == Phase::Fine);
    st.net.params->zero_grad();

    StepRecord rec;
    rec.step = st.step;
    rec.phase = st.phase;
    std::vector<Var> losses;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = dataset[batch[i]];
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(st.step), i));
        const int len = cfg.window_frames;
        if (len != dcfg.frames || s.frames < len || s.height != dcfg.height || s.width != dcfg.width)
            throw std::invalid_argument("training sample dims do not match the model");
        const int start = uniform_int(rng, 0, s.frames - len);

        const std::size_t frame_px = static_cast<std::size_t>(s.height) * s.width * 3;
        std::vector<double> video(frame_px * len);
        for (std::size_t k = 0; k < video.size(); ++k) video[k] = 2.0 * s.pixels[start * frame_px + k] - 1.0;
        const auto x0 = model::patchify(video, len, s.height, s.width, 3, dcfg.patch);

        const double beta = cfg.flags.dcl ? cfg.beta : 0.0;
        const double zeta = cfg.flags.dcl ? cfg.zeta_sigma : 0.0;
        const Reference ref = select_reference(s, start, len, beta, zeta, rng);
        rec.in_window += ref.branch == RefBranch::InWindow;
        rec.cross_face += ref.branch == RefBranch::CrossFace;
        rec.fallback += ref.branch == RefBranch::Fallback;

        const bool null_text = uniform01(rng) < cfg.null_text_ratio;
        rec.null_text += null_text;
        const Var text = null_text ? model.text().null_embedding() : model.text().encode(s.caption_tokens);
        const auto cond = model.condition(ref.face, ref.keypoints, st.phase == Phase::Fine, cfg.drop_token_prob, &rng);

        const auto noised = diffusion::draw_noised(st.schedule, x0.data, rng);
        const ag::Shape shape{x0.tokens(), x0.channels};
        const Var eps_hat = model.predict(Var::constant(shape, noised.x_t), text, noised.t, cond);
        const Var eps = Var::constant(shape, noised.eps);
        if (cfg.flags.dml) {
            const auto mask = mask_to_latent(s.mask, s.frames, s.height, s.width, s.frames, x0.grid_h, x0.grid_w, 1);
            // restrict to the window: trilinear over the whole clip, then slice the window's latent frames
            const std::size_t per_frame = static_cast<std::size_t>(x0.grid_h) * x0.grid_w;
            std::vector<double> m(static_cast<std::size_t>(x0.tokens()) * x0.channels);
            for (std::size_t tok = 0; tok < static_cast<std::size_t>(x0.tokens()); ++tok)
                std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(tok * x0.channels), x0.channels, mask[start * per_frame + tok]);
            auto r = dynamic_mask_loss(eps, eps_hat, m, cfg.alpha, rng);
            rec.masked += r.masked;
            rec.unmasked += !r.masked;
            losses.push_back(r.loss);
        } else {
            rec.unmasked += 1;
            losses.push_back(ag::mse(eps, eps_hat));
        }
    }
    Var total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = ag::add(total, losses[i]);
    total = ag::scale(total, 1.0 / static_cast<double>(losses.size()));
    rec.loss = total.item();
    if (std::isfinite(rec.loss) && total.requires_grad()) ag::backward(total);
    rec.grad_norm = nn::global_grad_norm(st.net.params->trainable());
    return rec;
}

StepRecord train_step(TrainState& st, std::span<const synth::VideoSample> dataset, std::span<const int> batch) {
    const TrainConfig& cfg = st.config;
    if (st.diverged) throw std::logic_error("train_step called on a diverged run");
    if (cfg.inject_nonfinite_step >= 0 && st.step == cfg.inject_nonfinite_step) {
        for (Var w : st.net.params->trainable()) w.mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
    }
    StepRecord rec = compute_gradients(st, dataset, batch);
    const auto params = st.net.params->trainable();
    rec.lr = cfg.learning_rate * nn::cosine_with_restarts(st.step, cfg.total_steps, cfg.warmup_steps, cfg.lr_cycles);
    if (!std::isfinite(rec.loss) || !std::isfinite(rec.grad_norm)) {
        st.diverged = true;
        st.divergence_reason = "non-finite loss or gradient";
    } else if (rec.grad_norm > cfg.divergence_grad_threshold) {
        if (++st.consecutive_high >= cfg.divergence_patience) {
            st.diverged = true;
            st.divergence_reason = "gradient norm above threshold";
        }
    } else {
        st.consecutive_high = 0;
    }
    st.history.push_back(rec);
    if (st.diverged) {
        st.divergence_step = st.step;
        return rec;
    }
    nn::clip_grad_norm(params, cfg.grad_clip);
    st.optimizer.step(params, rec.lr);
    ++st.step;
    return rec;
}

std::string step_record_json(const StepRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["phase"] = phase_name(r.phase);
    j["loss"] = std::isfinite(r.loss) ? nlohmann::ordered_json(r.loss) : nlohmann::ordered_json("nan");
    j["grad_norm"] = std::isfinite(r.grad_norm) ? nlohmann::ordered_json(r.grad_norm) : nlohmann::ordered_json("nan");
    j["lr"] = r.lr;
    j["branch_tags"] = {{"masked", r.masked},       {"unmasked", r.unmasked}, {"in_window", r.in_window},
                        {"cross_face", r.cross_face}, {"fallback", r.fallback}, {"null_text", r.null_text}};
    return j.dump();
}

TrainResult run_training(const TrainConfig& cfg, const inject::ModelConfig& model_cfg, const inject::InjectionPlan& plan,
                         std::span<const synth::VideoSample> dataset, const extract::Towers* towers,
                         const diffusion::NoiseSchedule& schedule, const std::string& out_dir, const std::string& header) {
    if (dataset.empty()) throw std::invalid_argument("run_training: empty dataset");
    TrainResult res{init_state(cfg, model_cfg, plan, towers, schedule), {}};
    TrainState& st = res.state;
    std::ofstream log;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        log.open(std::filesystem::path(out_dir) / "metrics.jsonl", std::ios::trunc);
    }
    auto save = [&](const std::string& file) {
        if (out_dir.empty()) return;
        const auto path = (std::filesystem::path(out_dir) / file).string();
        nn::save_checkpoint(path, header, {st.net.params.get()});
        res.checkpoints.push_back(path);
    };
    while (st.step < cfg.total_steps && !st.diverged) {
        const auto batch = batch_indices(cfg, st.step, static_cast<int>(dataset.size()));
        const Phase before = st.phase_at(st.step);
        const StepRecord rec = train_step(st, dataset, batch);
        if (log.is_open()) log << step_record_json(rec) << '\n' << std::flush;
        if (!st.diverged && before == Phase::Coarse && st.phase_at(st.step) == Phase::Fine) save("checkpoint_coarse.ckpt");
    }
    save("checkpoint_final.ckpt");
    return res;
}

synth::Image semantic_input(const synth::VideoSample& sample, int frame) {
    return extract::resize_image(sample.frame(frame), synth::kRefSize);
}

synth::Image augment_crop(const synth::VideoSample& sample, int frame, Rng& rng) {
    const auto kps = sample.frame_keypoints(frame);
    const auto a = synth::alignment_transform(kps);
    const double S = synth::kRefSize;
    const double ang = (uniform01(rng) * 2 - 1) * 8.0 * 3.141592653589793 / 180.0;
    const double sc = 0.92 + 0.16 * uniform01(rng);
    const double sx = (uniform01(rng) * 2 - 1) * 2.0, sy = (uniform01(rng) * 2 - 1) * 2.0;
    // jitter J(z) = c + s e^{i ang} (z - c) + shift, composed after the alignment
    const double jr = sc * std::cos(ang), ji = sc * std::sin(ang);
    const double c = S / 2;
    const double jbr = c - (jr * c - ji * c) + sx, jbi = c - (ji * c + jr * c) + sy;
    synth::Similarity t;
    t.ar = jr * a.ar - ji * a.ai;
    t.ai = jr * a.ai + ji * a.ar;
    t.br = jr * a.br - ji * a.bi + jbr;
    t.bi = jr * a.bi + ji * a.br + jbi;
    synth::Image img = synth::warp_similarity(sample.frame(frame), t, synth::kRefSize);

    const double sigma = 2.0 * uniform01(rng);
    if (sigma > 0.3) {
        const int rad = static_cast<int>(std::ceil(2 * sigma));
        std::vector<double> k(2 * rad + 1);
        double ks = 0;
        for (int i = -rad; i <= rad; ++i) ks += (k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma)));
        for (auto& v : k) v /= ks;
        synth::Image tmp = img;
        const int n = img.height;
        for (int pass = 0; pass < 2; ++pass) {
            const synth::Image& src = pass == 0 ? img : tmp;
            synth::Image& dst = pass == 0 ? tmp : img;
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x)
                    for (int ch = 0; ch < 3; ++ch) {
                        double acc = 0;
                        for (int i = -rad; i <= rad; ++i) {
                            const int yy = pass == 1 ? std::clamp(y + i, 0, n - 1) : y;
                            const int xx = pass == 0 ? std::clamp(x + i, 0, n - 1) : x;
                            acc += k[i + rad] * src.at(yy, xx, ch);
                        }
                        dst.at(y, x, ch) = static_cast<float>(acc);
                    }
        }
    }
    const double noise = 0.08 * uniform01(rng);
    for (auto& v : img.data) v = static_cast<float>(std::clamp(v + noise * standard_normal(rng), 0.0, 1.0));
    return img;
}

TowerTrainReport pretrain_towers(extract::Towers& towers, nn::ParamStore& ps, std::span<const synth::VideoSample> dataset,
                                 const TowerTrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("pretrain_towers: empty dataset");
    TowerTrainReport report;
    const int n = static_cast<int>(dataset.size());

    struct Job {
        const extract::FaceTower* tower;
        std::string prefix;
        double* loss;
    };
    const Job jobs[] = {{&towers.face, "towers.face", &report.face_loss},
                        {&towers.metric_a, "towers.metric_a", &report.metric_a_loss},
                        {&towers.metric_b, "towers.metric_b", &report.metric_b_loss}};
    for (const auto& job : jobs) {
        ps.set_trainable("towers.", false);
        ps.set_trainable(job.prefix + ".", true);
        nn::AdamW opt;
        const std::uint64_t job_seed = derive_seed(cfg.seed, job.prefix);
        for (int step = 0; step < cfg.identity_steps; ++step) {
            Rng rng(derive_seed(job_seed, static_cast<std::uint64_t>(step)));
            ps.zero_grad();
            std::vector<Var> logits;
            std::vector<int> labels;
            for (int b = 0; b < cfg.batch_size; ++b) {
                const auto& s = dataset[uniform_int(rng, 0, n - 1)];
                const auto crop = augment_crop(s, uniform_int(rng, 0, s.frames - 1), rng);
                logits.push_back(job.tower->forward(crop).logits);
                labels.push_back(static_cast<int>(s.identity.identity_id));
            }
            Var loss = ag::cross_entropy(ag::concat_rows(logits), labels);
            ag::backward(loss);
            const auto params = ps.trainable();
            nn::clip_grad_norm(params, 5.0);
            opt.step(params, cfg.learning_rate * nn::cosine_with_restarts(step, cfg.identity_steps, 20, 1));
            *job.loss = loss.item();
        }
    }

    ps.set_trainable("towers.", false);
    ps.set_trainable("towers.semantic.", true);
    ps.set_trainable("towers.caption.", true);
    nn::AdamW opt;
    const std::uint64_t cap_seed = derive_seed(cfg.seed, "towers.contrastive");
    const int bsz = std::min(cfg.batch_size, n);
    for (int step = 0; step < cfg.caption_steps; ++step) {
        Rng rng(derive_seed(cap_seed, static_cast<std::uint64_t>(step)));
        ps.zero_grad();
        std::vector<int> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = 0; i < bsz; ++i) std::swap(idx[i], idx[i + uniform_int(rng, 0, n - 1 - i)]);
        std::vector<Var> img, txt;
        std::vector<int> labels;
        for (int b = 0; b < bsz; ++b) {
            const auto& s = dataset[idx[b]];
            const auto frame = semantic_input(s, uniform_int(rng, 0, s.frames - 1));
            img.push_back(towers.semantic.embed(nn::image_to_chw(frame.data, frame.height, frame.width, 3)));
            txt.push_back(towers.caption.embed(s.caption_tokens));
            labels.push_back(b);
        }
        Var iv = ag::l2_normalize_rows(ag::concat_rows(img));
        Var tv = ag::l2_normalize_rows(ag::concat_rows(txt));
        Var logits = ag::scale(ag::matmul(iv, ag::transpose(tv)), 1.0 / cfg.temperature);
        Var loss = ag::scale(ag::add(ag::cross_entropy(logits, labels), ag::cross_entropy(ag::transpose(logits), labels)), 0.5);
        ag::backward(loss);
        const auto params = ps.trainable();
        nn::clip_grad_norm(params, 5.0);
        opt.step(params, cfg.learning_rate * nn::cosine_with_restarts(step, cfg.caption_steps, 20, 1));
        report.caption_loss = loss.item();
    }
    ps.set_trainable("towers.", false);
    return report;
}

}  // namespace csid::train
