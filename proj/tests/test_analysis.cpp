#include "doctest.h"

#include <cmath>
#include <complex>
#include <functional>

#include <Eigen/Dense>

#include "consisid/analysis.hpp"
#include "consisid/trainer.hpp"

using namespace csid;
using namespace csid::analysis;

namespace {

synth::Image gray(int h, int w, const std::function<double(int, int)>& f) {
    synth::Image img{h, w, 3, std::vector<float>(static_cast<std::size_t>(h) * w * 3)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(f(y, x));
    return img;
}

// Direct O(N^4) DFT radial profile of a real N x N image (mean already removed).
std::vector<double> naive_profile(const std::vector<double>& img, int n) {
    const double pi = std::acos(-1.0);
    std::vector<double> sum(n / 2 + 1, 0.0);
    std::vector<int> cnt(n / 2 + 1, 0);
    for (int v = 0; v < n; ++v)
        for (int u = 0; u < n; ++u) {
            std::complex<double> acc = 0.0;
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x)
                    acc += img[y * n + x] * std::polar(1.0, -2.0 * pi * (static_cast<double>(v * y) / n + static_cast<double>(u * x) / n));
            const int fy = v < n / 2 ? v : v - n, fx = u < n / 2 ? u : u - n;
            const int r = static_cast<int>(std::lround(std::sqrt(fy * fy + fx * fx)));
            if (r > n / 2) continue;
            sum[r] += std::log(std::max(std::abs(acc), 1e-12));
            ++cnt[r];
        }
    for (std::size_t r = 0; r < sum.size(); ++r) sum[r] /= cnt[r];
    return sum;
}

// sqrt of a (non-symmetric) matrix product by Denman-Beavers iteration
Eigen::MatrixXd db_sqrt(const Eigen::MatrixXd& a) {
    Eigen::MatrixXd y = a, z = Eigen::MatrixXd::Identity(a.rows(), a.cols());
    for (int i = 0; i < 100; ++i) {
        const Eigen::MatrixXd yn = 0.5 * (y + z.inverse());
        const Eigen::MatrixXd zn = 0.5 * (z + y.inverse());
        y = yn;
        z = zn;
    }
    return y;
}

std::vector<std::vector<double>> gaussian_rows(int n, int d, Rng& rng, double shift = 0.0) {
    std::vector<std::vector<double>> rows(n, std::vector<double>(d));
    for (auto& r : rows)
        for (int j = 0; j < d; ++j) r[j] = standard_normal(rng) * (1.0 + 0.3 * j) + shift;
    return rows;
}

inject::ModelConfig tiny_model() {
    inject::ModelConfig c;
    c.dit.depth = 1;
    c.dit.dim = 16;
    c.dit.heads = 2;
    c.dit.frames = 2;
    c.dit.height = 16;
    c.dit.width = 16;
    c.dit.timestep_dim = 8;
    c.dit.mlp_ratio = 2;
    c.dit.timesteps = 200;
    c.gfe_channels = 4;
    c.qformer.queries = 4;
    c.qformer.layers = 1;
    c.qformer.heads = 2;
    c.qformer.dropout = 0.0;
    return c;
}

}  // namespace

TEST_CASE("constant image has a flat floor spectrum") {
    const std::vector<synth::Image> frames{gray(16, 16, [](int, int) { return 0.3; })};
    const auto s = fourier_spectrum(frames);
    CHECK(s.size == 16);
    for (const double v : s.profile.log_amplitude) CHECK(v == doctest::Approx(std::log(kAmplitudeFloor)));
    for (const double v : s.profile.relative) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("radial profile matches a direct DFT") {
    Rng rng(11);
    std::vector<double> lum(64);
    for (auto& v : lum) v = uniform01(rng);
    const auto img = gray(8, 8, [&](int y, int x) { return lum[y * 8 + x]; });
    double mean = 0;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) mean += (0.299 + 0.587 + 0.114) * img.at(y, x, 0) / 64.0;
    std::vector<double> centered(64);
    for (int i = 0; i < 64; ++i) centered[i] = (0.299 + 0.587 + 0.114) * img.data[i * 3] - mean;
    const auto oracle = naive_profile(centered, 8);
    const std::vector<synth::Image> frames{img};
    const auto s = fourier_spectrum(frames);
    REQUIRE(s.profile.log_amplitude.size() == oracle.size());
    // DC is at the floor in both; other bins agree
    for (std::size_t r = 1; r < oracle.size(); ++r) CHECK(s.profile.log_amplitude[r] == doctest::Approx(oracle[r]).epsilon(1e-9));
}

TEST_CASE("single frequency peaks at its radius") {
    const double pi = std::acos(-1.0);
    const std::vector<synth::Image> frames{gray(32, 32, [&](int, int x) { return 0.5 + 0.4 * std::cos(2 * pi * 6 * x / 32.0); })};
    const auto s = fourier_spectrum(frames);
    const auto peak = std::max_element(s.log_map.begin(), s.log_map.end()) - s.log_map.begin();
    CHECK(peak / 32 == 16);  // DC row after the shift
    CHECK(std::abs(peak % 32 - 16) == 6);
}

TEST_CASE("mask restricts the analysed region") {
    const double pi = std::acos(-1.0);
    // high frequency outside the mask, smooth ramp inside
    const auto img = gray(32, 32, [&](int y, int x) {
        if (y >= 8 && y < 24 && x >= 8 && x < 24) return 0.3 + 0.02 * x;
        return 0.5 + 0.5 * std::cos(pi * x);
    });
    std::vector<std::uint8_t> mask(32 * 32, 0);
    for (int y = 8; y < 24; ++y)
        for (int x = 8; x < 24; ++x) mask[y * 32 + x] = 1;
    const std::vector<synth::Image> frames{img};
    const std::vector<std::vector<std::uint8_t>> masks{mask};
    const auto masked = fourier_spectrum(frames, masks);
    const auto whole = fourier_spectrum(frames);
    CHECK(masked.size == 16);
    CHECK(whole.size == 32);
    const auto bm = band_energy(masked.profile), bw = band_energy(whole.profile);
    CHECK(bm.low - bm.high > bw.low - bw.high);

    const std::vector<std::vector<std::uint8_t>> empty{std::vector<std::uint8_t>(32 * 32, 0)};
    CHECK_THROWS_AS(fourier_spectrum(frames, empty), std::invalid_argument);
    CHECK_THROWS_AS(fourier_spectrum(std::span<const synth::Image>{}), std::invalid_argument);
}

TEST_CASE("band energy split") {
    SpectrumProfile p;
    p.radial_bins = {0, 1, 2, 3, 4};
    p.relative = {0, 1, 2, 3, 5};
    const auto e = band_energy(p);  // split = 2: bins 0,1 low; 2,3,4 high
    CHECK(e.low == doctest::Approx(0.5));
    CHECK(e.high == doctest::Approx(10.0 / 3.0));
    const auto e3 = band_energy(p, 3.0);
    CHECK(e3.low == doctest::Approx(1.0));
    CHECK_THROWS(band_energy(p, 9.0));
}

TEST_CASE("fid analytics") {
    Rng rng(21);
    const auto a = gaussian_rows(200, 4, rng);
    CHECK(fid(a, a).value == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(std::abs(fid(a, a).value) < 1e-6);

    auto b = a;
    const std::vector<double> delta{0.5, -1.0, 0.25, 2.0};
    for (auto& r : b)
        for (int j = 0; j < 4; ++j) r[j] += delta[j];
    const double d2 = 0.25 + 1.0 + 0.0625 + 4.0;
    CHECK(std::abs(fid(a, b).value - d2) < 1e-4);

    // random 5-dim case against an independent square-root oracle
    const auto x = gaussian_rows(60, 5, rng), y = gaussian_rows(70, 5, rng, 0.3);
    auto stats = [](const std::vector<std::vector<double>>& rows, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        const int n = static_cast<int>(rows.size()), d = static_cast<int>(rows[0].size());
        mu = Eigen::VectorXd::Zero(d);
        for (const auto& r : rows)
            for (int j = 0; j < d; ++j) mu[j] += r[j] / n;
        cov = Eigen::MatrixXd::Zero(d, d);
        for (const auto& r : rows)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) cov(i, j) += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1);
    };
    Eigen::VectorXd ma, mb;
    Eigen::MatrixXd ca, cb;
    stats(x, ma, ca);
    stats(y, mb, cb);
    const double oracle = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * db_sqrt(ca * cb).trace();
    const auto r = fid(x, y);
    CHECK(std::abs(r.value - oracle) < 1e-6);
    CHECK_FALSE(r.ridge);

    // rank-deficient features get the ridge and a flag
    auto z = gaussian_rows(40, 3, rng);
    for (auto& row : z) row[2] = row[0];
    CHECK(fid(z, z).ridge);
    CHECK_THROWS_AS(fid(gaussian_rows(3, 4, rng), a), std::invalid_argument);
}

TEST_CASE("face_sim and clip_score ranges") {
    nn::ParamStore ps(5);
    extract::Towers towers(ps, 4, synth::vocab::kSize);
    synth::DatasetSpec spec{2, 2, 8, 32, 32, 3};
    const auto held = synth::make_dataset(spec, 1);
    const auto ref = train::reference_from_frame(held[0], 7);
    const std::vector<synth::Image> same{ref.face, ref.face};
    CHECK(face_sim(towers.metric_a, same, {}, ref.face) == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<synth::Image> frames;
    std::vector<std::array<synth::Point, synth::kKeypoints>> kps;
    for (int t = 0; t < 3; ++t) {
        frames.push_back(held[0].frame(t));
        kps.push_back(held[0].frame_keypoints(t));
    }
    const double fs = face_sim(towers.metric_a, frames, kps, ref.face);
    CHECK(fs >= -1.0);
    CHECK(fs <= 1.0);
    const double cs = clip_score(towers, frames, held[0].caption_tokens);
    CHECK(cs >= 0.0);
    CHECK(cs <= 100.0);
}

TEST_CASE("evaluation pairs cycle through identities") {
    synth::DatasetSpec spec{4, 3, 8, 16, 16, 8};
    const auto held = synth::make_dataset(spec, 1);
    const auto pairs = make_eval_pairs(held, 6, 4, 4);
    REQUIRE(pairs.size() == 6);
    for (int k = 0; k < 6; ++k) {
        CHECK(held[pairs[k].video].identity.identity_id == static_cast<std::uint32_t>(k % 4));
        CHECK(pairs[k].ref.frame == 7);
        CHECK(pairs[k].caption == held[pairs[k].video].caption_tokens);
    }
    CHECK(pairs[4].video == 1);
    CHECK_THROWS(make_eval_pairs(held, 6, 5, 4));
    CHECK_THROWS(make_eval_pairs(held, 6, 4, 8));
}

TEST_CASE("reports render unstable rows and embed the config") {
    TableReport t;
    t.title = "injection";
    AblationRow ok;
    ok.key = "c";
    ok.metrics.face_sim_a = 0.5;
    ok.metrics.samples = 20;
    ok.paper = paper_injection_row("c");
    AblationRow bad;
    bad.key = "f";
    bad.unstable = true;
    bad.note = "diverged";
    bad.paper = paper_injection_row("f");
    t.rows = {ok, bad};
    const auto csv = to_csv(t);
    CHECK(csv.find("f,unstable,unstable") != std::string::npos);
    CHECK(csv.find("c,0.5,") != std::string::npos);
    CHECK(csv.find("0.73,0.75,36.77,127.42") != std::string::npos);
    const auto jl = to_jsonl(t, R"({"seed":7})", "9.9.9");
    CHECK(jl.find(R"("unstable":true)") != std::string::npos);
    CHECK(jl.find(R"("config":{"seed":7})") != std::string::npos);
    CHECK(jl.find(R"("version":"9.9.9")") != std::string::npos);
    CHECK(std::count(jl.begin(), jl.end(), '\n') == 2);

    CHECK(paper_steps_row(50)->speed == "100+");
    CHECK_FALSE(paper_steps_row(60).has_value());
    CHECK(paper_component_row("no_dcl")->clip_score == 32.21);
    CHECK(paper_injection_row("g")->unstable);
}

TEST_CASE("generation and step sweep on a tiny untrained model") {
    synth::DatasetSpec spec{2, 2, 8, 16, 16, 4};
    const auto held = synth::make_dataset(spec, 1);
    nn::ParamStore tps(9);
    extract::Towers towers(tps, 2, synth::vocab::kSize);
    const auto mc = tiny_model();
    auto m = train::make_model(mc, inject::InjectionPlan::named("c"), &towers, 1);
    const auto sched = diffusion::NoiseSchedule::linear(200);
    const auto pairs = make_eval_pairs(held, 2, 2, 2);
    EvalOptions opts;
    opts.sampler.steps = 5;
    const auto a = evaluate(m.model, towers, sched, held, pairs, opts);
    const auto b = evaluate(m.model, towers, sched, held, pairs, opts);
    REQUIRE(a.videos.size() == 2);
    CHECK(a.videos[0].frames.size() == 2);
    CHECK(a.videos[0].frames[0].data == b.videos[0].frames[0].data);
    CHECK(a.report.face_sim_a == b.report.face_sim_a);
    CHECK(std::isnan(a.report.fid));  // 4 samples of 32-d features are too few

    const std::vector<int> ts{2, 8};
    const auto table = run_steps_ablation(m.model, towers, sched, held, pairs, ts, opts);
    REQUIRE(table.rows.size() == 2);
    CHECK(table.include_speed);
    CHECK(table.rows[1].seconds > table.rows[0].seconds);
    CHECK(to_csv(table).find("seconds") != std::string::npos);
}
