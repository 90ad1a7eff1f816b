#include "consisid/analysis.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "consisid/errors.hpp"
#include "json.hpp"

namespace csid::analysis {

using ag::Var;

namespace {

int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

double luminance(const synth::Image& img, int y, int x) {
    return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

struct Box {
    int y0, x0, y1, x1;  // inclusive-exclusive
};

Box mask_box(const synth::Image& img, const std::vector<std::uint8_t>* mask) {
    if (!mask) return {0, 0, img.height, img.width};
    if (mask->size() != static_cast<std::size_t>(img.height) * img.width)
        throw std::invalid_argument("fourier_spectrum: mask size does not match the frame");
    Box b{img.height, img.width, 0, 0};
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if ((*mask)[static_cast<std::size_t>(y) * img.width + x]) {
                b.y0 = std::min(b.y0, y);
                b.x0 = std::min(b.x0, x);
                b.y1 = std::max(b.y1, y + 1);
                b.x1 = std::max(b.x1, x + 1);
            }
    if (b.y1 <= b.y0) throw std::invalid_argument("fourier_spectrum: empty mask");
    return b;
}

class Fft2d {
public:
    explicit Fft2d(int n) : n_(n) {
        in_ = fftw_alloc_complex(static_cast<std::size_t>(n) * n);
        out_ = fftw_alloc_complex(static_cast<std::size_t>(n) * n);
        plan_ = fftw_plan_dft_2d(n, n, in_, out_, FFTW_FORWARD, FFTW_ESTIMATE);
    }
    ~Fft2d() {
        fftw_destroy_plan(plan_);
        fftw_free(in_);
        fftw_free(out_);
    }
    Fft2d(const Fft2d&) = delete;
    Fft2d& operator=(const Fft2d&) = delete;

    // Returns |F| for a real n x n input (row-major).
    std::vector<double> amplitude(const std::vector<double>& real) {
        const std::size_t nn = static_cast<std::size_t>(n_) * n_;
        for (std::size_t i = 0; i < nn; ++i) {
            in_[i][0] = real[i];
            in_[i][1] = 0.0;
        }
        fftw_execute(plan_);
        std::vector<double> a(nn);
        for (std::size_t i = 0; i < nn; ++i) a[i] = std::hypot(out_[i][0], out_[i][1]);
        return a;
    }

private:
    int n_;
    fftw_complex* in_;
    fftw_complex* out_;
    fftw_plan plan_;
};

std::vector<double> frame_embedding(const extract::FaceTower& enc, const synth::Image& img) {
    ag::NoGradGuard guard;
    const Var e = enc.forward(img).embedding;
    return {e.value().begin(), e.value().end()};
}

synth::Image aligned_or_resized(const synth::Image& frame, const std::array<synth::Point, synth::kKeypoints>* kps) {
    if (kps) {
        try {
            return synth::crop_align(frame, *kps);
        } catch (const DegenerateGeometryError&) {
            // fall through to the unaligned frame
        }
    }
    return extract::resize_image(frame, synth::kRefSize);
}

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = static_cast<Eigen::Index>(rows.front().size());
    Eigen::MatrixXd m(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(rows[i].size()) != d) throw std::invalid_argument("fid: ragged features");
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rows[i][j];
    }
    return m;
}

void gaussian_fit(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

bool ill_conditioned(const Eigen::MatrixXd& cov) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    const double hi = es.eigenvalues().maxCoeff();
    const double lo = es.eigenvalues().minCoeff();
    return !(hi > 0.0) || lo < 1e-10 * hi;
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

}  // namespace

Spectrum fourier_spectrum(std::span<const synth::Image> frames, std::span<const std::vector<std::uint8_t>> masks) {
    if (frames.empty()) throw std::invalid_argument("fourier_spectrum: no frames");
    if (!masks.empty() && masks.size() != frames.size())
        throw std::invalid_argument("fourier_spectrum: need one mask per frame");

    std::vector<Box> boxes;
    int extent = 1;
    for (std::size_t f = 0; f < frames.size(); ++f) {
        boxes.push_back(mask_box(frames[f], masks.empty() ? nullptr : &masks[f]));
        extent = std::max({extent, boxes.back().y1 - boxes.back().y0, boxes.back().x1 - boxes.back().x0});
    }
    const int n = next_pow2(extent);
    const int half = n / 2;
    const std::size_t nn = static_cast<std::size_t>(n) * n;

    Spectrum out;
    out.size = n;
    out.log_map.assign(nn, 0.0);
    auto& prof = out.profile;
    prof.radial_bins.resize(half + 1);
    std::iota(prof.radial_bins.begin(), prof.radial_bins.end(), 0.0);
    prof.log_amplitude.assign(half + 1, 0.0);

    // bin of every frequency index (signed frequencies, DC at index 0)
    std::vector<int> bin(nn, -1);
    std::vector<int> bin_count(half + 1, 0);
    for (int v = 0; v < n; ++v)
        for (int u = 0; u < n; ++u) {
            const int fy = v < half ? v : v - n;
            const int fx = u < half ? u : u - n;
            const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(fy * fy + fx * fx))));
            if (r <= half) {
                bin[static_cast<std::size_t>(v) * n + u] = r;
                ++bin_count[r];
            }
        }

    Fft2d fft(n);
    for (std::size_t f = 0; f < frames.size(); ++f) {
        const auto& img = frames[f];
        const auto* mask = masks.empty() ? nullptr : &masks[f];
        const Box& b = boxes[f];
        auto inside = [&](int y, int x) { return !mask || (*mask)[static_cast<std::size_t>(y) * img.width + x] != 0; };
        double sum = 0.0;
        int count = 0;
        for (int y = b.y0; y < b.y1; ++y)
            for (int x = b.x0; x < b.x1; ++x)
                if (inside(y, x)) {
                    sum += luminance(img, y, x);
                    ++count;
                }
        const double mean = sum / count;
        std::vector<double> buf(nn, 0.0);
        for (int y = b.y0; y < b.y1; ++y)
            for (int x = b.x0; x < b.x1; ++x)
                if (inside(y, x)) buf[static_cast<std::size_t>(y - b.y0) * n + (x - b.x0)] = luminance(img, y, x) - mean;

        const auto amp = fft.amplitude(buf);
        std::vector<double> per_bin(half + 1, 0.0);
        for (int v = 0; v < n; ++v)
            for (int u = 0; u < n; ++u) {
                const std::size_t i = static_cast<std::size_t>(v) * n + u;
                const double la = std::log(std::max(amp[i], kAmplitudeFloor));
                const std::size_t shifted = static_cast<std::size_t>((v + half) % n) * n + (u + half) % n;
                out.log_map[shifted] += la / static_cast<double>(frames.size());
                if (bin[i] >= 0) per_bin[bin[i]] += la;
            }
        for (int r = 0; r <= half; ++r)
            prof.log_amplitude[r] += per_bin[r] / bin_count[r] / static_cast<double>(frames.size());
    }
    prof.relative.resize(half + 1);
    for (int r = 0; r <= half; ++r) prof.relative[r] = prof.log_amplitude[r] - prof.log_amplitude[0];
    return out;
}

BandEnergy band_energy(const SpectrumProfile& profile, double split_radius) {
    const auto bins = profile.relative.size();
    if (bins < 2) throw std::invalid_argument("band_energy: profile too short");
    const double nyquist = profile.radial_bins.back();
    const double split = split_radius < 0.0 ? nyquist / 2.0 : split_radius;
    if (!(split > 0.0) || split > nyquist) throw std::invalid_argument("band_energy: split radius out of range");
    BandEnergy e;
    int nl = 0, nh = 0;
    for (std::size_t i = 0; i < bins; ++i) {
        if (profile.radial_bins[i] < split) {
            e.low += profile.relative[i];
            ++nl;
        } else {
            e.high += profile.relative[i];
            ++nh;
        }
    }
    e.low /= std::max(nl, 1);
    e.high /= std::max(nh, 1);
    return e;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("cosine: size mismatch");
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double den = std::sqrt(aa * bb);
    return den > 0.0 ? ab / den : 0.0;
}

double face_sim(const extract::FaceTower& encoder, std::span<const synth::Image> frames,
                std::span<const std::array<synth::Point, synth::kKeypoints>> keypoints, const synth::Image& ref_face) {
    if (frames.empty()) throw std::invalid_argument("face_sim: no frames");
    if (!keypoints.empty() && keypoints.size() != frames.size())
        throw std::invalid_argument("face_sim: need keypoints for every frame");
    const auto ref = frame_embedding(encoder, aligned_or_resized(ref_face, nullptr));
    double total = 0.0;
    for (std::size_t f = 0; f < frames.size(); ++f) {
        const auto crop = aligned_or_resized(frames[f], keypoints.empty() ? nullptr : &keypoints[f]);
        total += cosine(frame_embedding(encoder, crop), ref);
    }
    return total / static_cast<double>(frames.size());
}

FidResult fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("fid: empty feature set");
    const std::size_t d = a.front().size();
    if (b.front().size() != d) throw std::invalid_argument("fid: dimension mismatch");
    if (a.size() < d + 1 || b.size() < d + 1) throw std::invalid_argument("fid: need at least dim + 1 samples per set");
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    gaussian_fit(to_matrix(a), mu_a, cov_a);
    gaussian_fit(to_matrix(b), mu_b, cov_b);
    FidResult r;
    if (ill_conditioned(cov_a) || ill_conditioned(cov_b)) {
        const auto eye = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
        cov_a += 1e-6 * eye;
        cov_b += 1e-6 * eye;
        r.ridge = true;
    }
    // tr sqrt(Ca Cb) = tr sqrt(Ca^1/2 Cb Ca^1/2), which is symmetric PSD
    const Eigen::MatrixXd sa = sym_sqrt(cov_a);
    const Eigen::MatrixXd inner = sa * cov_b * sa;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    r.value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    r.value = std::max(r.value, 0.0);
    return r;
}

double clip_score(const extract::Towers& towers, std::span<const synth::Image> frames, std::span<const std::uint16_t> caption) {
    if (frames.empty()) throw std::invalid_argument("clip_score: no frames");
    ag::NoGradGuard guard;
    std::vector<double> mean(extract::Towers::kEmbedDim, 0.0);
    for (const auto& f : frames) {
        const auto img = extract::resize_image(f, synth::kRefSize);
        const Var e = towers.semantic.embed(nn::image_to_chw(img.data, img.height, img.width, img.channels));
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += e.value()[i] / static_cast<double>(frames.size());
    }
    const Var c = towers.caption.embed(caption);
    return 100.0 * std::max(cosine(mean, c.value()), 0.0);
}

std::vector<EvalPair> make_eval_pairs(std::span<const synth::VideoSample> held_out, int count, int identities, int frames) {
    if (identities <= 0 || held_out.empty() || held_out.size() % identities != 0)
        throw std::invalid_argument("make_eval_pairs: held-out set is not grouped by identity");
    const int per_identity = static_cast<int>(held_out.size()) / identities;
    if (count <= 0 || count > static_cast<int>(held_out.size()))
        throw std::invalid_argument("make_eval_pairs: pair count out of range");
    std::vector<EvalPair> pairs;
    for (int k = 0; k < count; ++k) {
        const int video = (k % identities) * per_identity + k / identities;
        const auto& s = held_out[video];
        if (s.frames <= frames) throw std::invalid_argument("make_eval_pairs: clip has no frame outside the window");
        pairs.push_back({video, train::reference_from_frame(s, s.frames - 1), s.caption_tokens});
    }
    return pairs;
}

GeneratedVideo generate(const inject::ConditionedModel& model, const diffusion::NoiseSchedule& schedule,
                        const train::Reference& ref, std::span<const std::uint16_t> caption,
                        const diffusion::SamplerConfig& cfg) {
    ag::NoGradGuard guard;
    const auto& d = model.config().dit;
    const auto cond = model.condition(ref.face, ref.keypoints, true, 0.0, nullptr);
    const Var text = model.text().encode(caption);
    const Var null_text = model.text().null_embedding();
    const int base = d.base_channels();
    const ag::Shape shape{d.vision_tokens(), base};
    const diffusion::GuidedEps eps = [&](std::span<const double> x, int t, bool conditional) {
        const Var out = model.predict(Var::constant(shape, {x.begin(), x.end()}), conditional ? text : null_text, t, cond);
        return std::vector<double>(out.value().begin(), out.value().end());
    };
    const auto x0 = diffusion::sample(schedule, eps, static_cast<std::size_t>(shape[0]) * base, cfg);

    model::LatentVideo lat;
    lat.frames = d.frames;
    lat.grid_h = d.grid_h();
    lat.grid_w = d.grid_w();
    lat.patch = d.patch;
    lat.base_channels = base;
    lat.channels = base;
    lat.data = x0;
    const auto video = model::unpatchify(lat, 3);
    GeneratedVideo out;
    const std::size_t frame_px = static_cast<std::size_t>(d.height) * d.width * 3;
    for (int t = 0; t < d.frames; ++t) {
        synth::Image img{d.height, d.width, 3, std::vector<float>(frame_px)};
        for (std::size_t k = 0; k < frame_px; ++k)
            img.data[k] = static_cast<float>(std::clamp(0.5 * (video[t * frame_px + k] + 1.0), 0.0, 1.0));
        out.frames.push_back(std::move(img));
    }
    return out;
}

EvalResult evaluate(const inject::ConditionedModel& model, const extract::Towers& towers,
                    const diffusion::NoiseSchedule& schedule, std::span<const synth::VideoSample> held_out,
                    std::span<const EvalPair> pairs, const EvalOptions& opts) {
    if (pairs.empty()) throw std::invalid_argument("evaluate: no pairs");
    const int frames = model.config().dit.frames;
    const auto t0 = std::chrono::steady_clock::now();
    EvalResult res;
    std::vector<std::vector<double>> gen_feats, real_feats;
    double sa = 0, sb = 0, sc = 0, low = 0, high = 0;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& p = pairs[k];
        const auto& gt = held_out[p.video];
        auto scfg = opts.sampler;
        scfg.seed = derive_seed(derive_seed(opts.sampler.seed, "eval-pair"), k);
        res.videos.push_back(generate(model, schedule, p.ref, p.caption, scfg));
        const auto& gen = res.videos.back().frames;

        std::vector<std::array<synth::Point, synth::kKeypoints>> kps;
        std::vector<std::vector<std::uint8_t>> masks;
        for (int t = 0; t < frames; ++t) {
            kps.push_back(gt.frame_keypoints(t));
            const auto m = gt.frame_mask(t);
            masks.emplace_back(m.begin(), m.end());
            gen_feats.push_back(frame_embedding(towers.metric_a, aligned_or_resized(gen[t], &kps.back())));
            real_feats.push_back(frame_embedding(towers.metric_a, aligned_or_resized(gt.frame(t), &kps.back())));
        }
        const double fa = face_sim(towers.metric_a, gen, kps, p.ref.face);
        res.face_sim_per_pair.push_back(fa);
        sa += fa;
        sb += face_sim(towers.metric_b, gen, kps, p.ref.face);
        sc += clip_score(towers, gen, p.caption);
        const auto band = band_energy(fourier_spectrum(gen, masks).profile, opts.split_radius);
        res.bands_per_pair.push_back(band);
        low += band.low;
        high += band.high;
    }
    const double n = static_cast<double>(pairs.size());
    auto& r = res.report;
    r.samples = static_cast<int>(pairs.size());
    r.face_sim_a = sa / n;
    r.face_sim_b = sb / n;
    r.clip_score = sc / n;
    r.low_band_energy = low / n;
    r.high_band_energy = high / n;
    if (gen_feats.size() > gen_feats.front().size()) {
        const auto f = fid(gen_feats, real_feats);
        r.fid = f.value;
        r.fid_ridge = f.ridge;
    } else {
        r.fid = std::numeric_limits<double>::quiet_NaN();
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

std::optional<PaperRow> paper_injection_row(const std::string& plan) {
    static const std::vector<PaperRow> rows = {
        {"a", 0.05, 0.05, 34.86, 269.88, "", false}, {"b", 0.66, 0.68, 34.48, 104.34, "", false},
        {"c", 0.73, 0.75, 36.77, 127.42, "", false}, {"d", 0.64, 0.68, 30.69, 177.65, "", false},
        {"e", 0.62, 0.66, 33.61, 164.15, "", false}, {"f", 0, 0, 0, 0, "", true},
        {"g", 0, 0, 0, 0, "", true},
    };
    for (const auto& r : rows)
        if (r.key == plan) return r;
    return std::nullopt;
}

std::optional<PaperRow> paper_component_row(const std::string& variant) {
    static const std::vector<PaperRow> rows = {
        {"no_gfe", 0.05, 0.05, 34.86, 269.88, "", false}, {"no_lfe", 0.66, 0.68, 34.48, 104.34, "", false},
        {"no_cft", 0.54, 0.58, 34.47, 144.62, "", false}, {"no_dml", 0.62, 0.67, 34.23, 187.78, "", false},
        {"no_dcl", 0.65, 0.69, 32.21, 117.80, "", false}, {"full", 0.73, 0.75, 36.77, 127.42, "", false},
    };
    for (const auto& r : rows)
        if (r.key == variant) return r;
    return std::nullopt;
}

std::optional<PaperRow> paper_steps_row(int steps) {
    static const std::vector<PaperRow> rows = {
        {"25", 0.50, 0.53, 30.43, 184.44, "50+", false},   {"50", 0.52, 0.54, 33.08, 163.68, "100+", false},
        {"75", 0.43, 0.52, 31.92, 200.86, "160+", false},  {"100", 0.46, 0.55, 32.25, 212.74, "220+", false},
        {"125", 0.42, 0.51, 32.38, 185.85, "270+", false}, {"150", 0.34, 0.40, 32.41, 186.56, "330+", false},
        {"175", 0.35, 0.42, 29.98, 186.99, "390+", false}, {"200", 0.33, 0.39, 31.18, 166.79, "440+", false},
    };
    for (const auto& r : rows)
        if (r.key == std::to_string(steps)) return r;
    return std::nullopt;
}

std::string to_csv(const TableReport& table) {
    std::ostringstream os;
    os << "key,face_sim_a,face_sim_b,clip_score,fid,fid_ridge,low_band,high_band,samples";
    if (table.include_speed) os << ",seconds";
    os << ",paper_face_sim_arc,paper_face_sim_cur,paper_clip_score,paper_fid";
    if (table.include_speed) os << ",paper_speed";
    os << ",note\n";
    for (const auto& r : table.rows) {
        const auto& m = r.metrics;
        os << r.key;
        if (r.unstable) {
            for (int i = 0; i < 8; ++i) os << ",unstable";
            if (table.include_speed) os << ",unstable";
        } else {
            os << ',' << fmt(m.face_sim_a) << ',' << fmt(m.face_sim_b) << ',' << fmt(m.clip_score) << ',' << fmt(m.fid)
               << ',' << (m.fid_ridge ? 1 : 0) << ',' << fmt(m.low_band_energy) << ',' << fmt(m.high_band_energy) << ','
               << m.samples;
            if (table.include_speed) os << ',' << fmt(r.seconds);
        }
        if (r.paper && r.paper->unstable) {
            os << ",unstable,unstable,unstable,unstable";
        } else if (r.paper) {
            os << ',' << fmt(r.paper->face_sim_arc) << ',' << fmt(r.paper->face_sim_cur) << ','
               << fmt(r.paper->clip_score) << ',' << fmt(r.paper->fid);
        } else {
            os << ",,,,";
        }
        if (table.include_speed) os << ',' << (r.paper ? r.paper->speed : "");
        os << ',' << r.note << '\n';
    }
    return os.str();
}

std::string to_jsonl(const TableReport& table, const std::string& config_json, const std::string& version) {
    using json = nlohmann::ordered_json;
    const json config = config_json.empty() ? json::object() : json::parse(config_json);
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json("nan"); };
    std::ostringstream os;
    for (const auto& r : table.rows) {
        json j;
        j["table"] = table.title;
        j["key"] = r.key;
        j["unstable"] = r.unstable;
        if (!r.unstable) {
            j["face_sim_a"] = num(r.metrics.face_sim_a);
            j["face_sim_b"] = num(r.metrics.face_sim_b);
            j["clip_score"] = num(r.metrics.clip_score);
            j["fid"] = num(r.metrics.fid);
            j["fid_ridge"] = r.metrics.fid_ridge;
            j["low_band"] = num(r.metrics.low_band_energy);
            j["high_band"] = num(r.metrics.high_band_energy);
            j["samples"] = r.metrics.samples;
            if (table.include_speed) j["seconds"] = r.seconds;
        }
        if (!r.note.empty()) j["note"] = r.note;
        if (r.paper) {
            json p;
            if (r.paper->unstable) {
                p["unstable"] = true;
            } else {
                p = {{"face_sim_arc", r.paper->face_sim_arc},
                     {"face_sim_cur", r.paper->face_sim_cur},
                     {"clip_score", r.paper->clip_score},
                     {"fid", r.paper->fid}};
                if (!r.paper->speed.empty()) p["speed"] = r.paper->speed;
            }
            j["paper_reference"] = p;
        }
        j["version"] = version;
        j["config"] = config;
        os << j.dump() << '\n';
    }
    return os.str();
}

InjectionAblationResult run_injection_ablation(const InjectionAblationSpec& spec, std::span<const synth::VideoSample> train_set,
                                               std::span<const synth::VideoSample> held_out, const extract::Towers& towers,
                                               const diffusion::NoiseSchedule& schedule, const std::string& out_dir,
                                               const std::string& header) {
    InjectionAblationResult res;
    res.table.title = "injection";
    const auto pairs = make_eval_pairs(held_out, spec.eval_pairs, spec.identities, spec.model.dit.frames);
    for (const auto& name : spec.plans) {
        const auto plan = inject::InjectionPlan::named(name);
        std::string dir;
        if (!out_dir.empty()) {
            dir = (std::filesystem::path(out_dir) / ("plan_" + name)).string();
            std::filesystem::create_directories(dir);
        }
        AblationRow row;
        row.key = name;
        row.paper = paper_injection_row(name);
        const auto t0 = std::chrono::steady_clock::now();
        try {
            auto tr = train::run_training(spec.train, spec.model, plan, train_set, &towers, schedule, dir, header);
            if (tr.state.diverged) {
                row.unstable = true;
                row.note = "diverged at step " + std::to_string(tr.state.divergence_step) + ": " + tr.state.divergence_reason;
                res.evals.emplace_back();
            } else {
                auto ev = evaluate(tr.state.net.model, towers, schedule, held_out, pairs, spec.eval);
                row.metrics = ev.report;
                res.evals.push_back(std::move(ev));
            }
        } catch (const NumericDivergenceError& e) {
            row.unstable = true;
            row.note = std::string("non-finite values: ") + e.what();
            res.evals.emplace_back();
        }
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.any_unstable = res.any_unstable || row.unstable;
        res.table.rows.push_back(std::move(row));
    }
    return res;
}

std::vector<int> default_step_values() { return {25, 50, 75, 100, 125, 150, 175, 200}; }

TableReport run_steps_ablation(const inject::ConditionedModel& model, const extract::Towers& towers,
                               const diffusion::NoiseSchedule& schedule, std::span<const synth::VideoSample> held_out,
                               std::span<const EvalPair> pairs, std::span<const int> t_values, const EvalOptions& base) {
    TableReport table;
    table.title = "steps";
    table.include_speed = true;
    for (const int t : t_values) {
        AblationRow row;
        row.key = std::to_string(t);
        row.paper = paper_steps_row(t);
        auto opts = base;
        opts.sampler.steps = t;
        try {
            const auto ev = evaluate(model, towers, schedule, held_out, pairs, opts);
            row.metrics = ev.report;
            row.seconds = ev.seconds;
        } catch (const NumericDivergenceError& e) {
            row.unstable = true;
            row.note = std::string("non-finite values: ") + e.what();
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string spectrum_pgm(const Spectrum& s) {
    const auto [lo, hi] = std::minmax_element(s.log_map.begin(), s.log_map.end());
    const double range = *hi - *lo;
    std::string out = "P5\n" + std::to_string(s.size) + " " + std::to_string(s.size) + "\n255\n";
    for (const double v : s.log_map) {
        const double u = range > 0 ? (v - *lo) / range : 0.0;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * u))));
    }
    return out;
}

}  // namespace csid::analysis
