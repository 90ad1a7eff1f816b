#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <tuple>

#include "consisid/errors.hpp"
#include "consisid/synthdata.hpp"

using namespace csid;
using namespace csid::synth;

namespace {

SceneScript static_script(int frames, Point center, double scale, double expr, int bg = 2) {
    SceneScript s;
    s.background_id = bg;
    s.face_center.assign(frames, center);
    s.face_scale.assign(frames, scale);
    s.expression.assign(frames, expr);
    s.caption_tokens = {static_cast<std::uint16_t>(bg), vocab::kPlacementBase + 1, vocab::kActionBase, vocab::kSizeBase};
    return s;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("consisid_test_" + name);
}

}  // namespace

TEST_CASE("generate_identity is deterministic and in range") {
    CHECK(generate_identity(7) == generate_identity(7));
    std::set<std::tuple<float, float, float, float, int>> seen;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto id = generate_identity(s);
        seen.insert({id.face_hue, id.eye_spacing, id.face_aspect, id.skin_tone, id.marker_bits});
        CHECK(id.face_hue >= 0.f);
        CHECK(id.face_hue < 1.f);
        CHECK(id.eye_spacing >= 0.2f);
        CHECK(id.eye_spacing <= 0.45f);
        CHECK(id.face_aspect >= 0.7f);
        CHECK(id.face_aspect <= 1.3f);
        CHECK(id.skin_tone >= 0.f);
        CHECK(id.skin_tone <= 1.f);
    }
    CHECK(seen.size() >= 99);
}

TEST_CASE("static script renders identical frames") {
    const auto id = generate_identity(3);
    const auto v = render_video(id, static_script(8, {16, 16}, 0.6, 0.3), 8, 32, 32);
    for (int t = 1; t < 8; ++t) CHECK(v.frame(t).data == v.frame(0).data);
}

TEST_CASE("mask equals the analytic ellipse pixel set") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto id = generate_identity(seed);
        const double scale = 0.35 + 0.02 * static_cast<double>(seed);
        const Point c{14.3 + 0.1 * static_cast<double>(seed), 17.1};
        const auto v = render_video(id, static_script(8, c, scale, 0.0), 8, 32, 32);
        // ellipse with vertical semi-axis scale*H/2 and horizontal 0.85*aspect times that
        const double b = scale * 32 / 2.0, a = 0.85 * id.face_aspect * b;
        int expected = 0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const double dx = (x + 0.5 - c.x) / a, dy = (y + 0.5 - c.y) / b;
                expected += dx * dx + dy * dy <= 1.0;
            }
        int counted = 0;
        for (auto m : v.frame_mask(0)) counted += m;
        CHECK(counted == expected);
    }
}

TEST_CASE("keypoints lie inside the frame and the face mask") {
    DatasetSpec spec;
    spec.identities = 6;
    spec.videos_per_identity = 4;
    for (const auto& v : make_dataset(spec)) {
        for (int t = 0; t < v.frames; ++t) {
            const auto kps = v.frame_keypoints(t);
            const auto mask = v.frame_mask(t);
            for (const auto& p : kps) {
                REQUIRE(p.x >= 0);
                REQUIRE(p.y >= 0);
                REQUIRE(p.x < v.width);
                REQUIRE(p.y < v.height);
                CHECK(mask[static_cast<int>(p.y) * v.width + static_cast<int>(p.x)] == 1);
            }
            // inter-eye distance must stay above the crop precondition
            CHECK(std::hypot(kps[1].x - kps[0].x, kps[1].y - kps[0].y) > 2.0);
        }
        for (float px : v.pixels) {
            CHECK(std::isfinite(px));
            CHECK(px >= 0.f);
            CHECK(px <= 1.f);
        }
    }
}

TEST_CASE("each marker bit paints at least four face pixels") {
    auto id = generate_identity(11);
    for (double scale : {0.55, 0.7}) {
        for (int bit = 0; bit < 8; ++bit) {
            id.marker_bits = 0;
            const auto plain = render_video(id, static_script(8, {16, 16}, scale, 0.0), 8, 32, 32);
            id.marker_bits = static_cast<std::uint8_t>(1u << bit);
            const auto marked = render_video(id, static_script(8, {16, 16}, scale, 0.0), 8, 32, 32);
            int changed = 0;
            const auto a = plain.frame(0), b = marked.frame(0);
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    bool diff = false;
                    for (int c = 0; c < 3; ++c) diff |= a.at(y, x, c) != b.at(y, x, c);
                    if (diff) {
                        ++changed;
                        CHECK(plain.frame_mask(0)[y * 32 + x] == 1);
                    }
                }
            CHECK(changed >= 4);
        }
    }
}

TEST_CASE("render_video argument checks") {
    const auto id = generate_identity(1);
    CHECK_THROWS_AS(render_video(id, static_script(7, {16, 16}, 0.5, 0), 8, 32, 32), std::invalid_argument);
    CHECK_THROWS_AS(render_video(id, static_script(4, {4, 4}, 0.5, 0), 4, 32, 32), std::invalid_argument);
}

TEST_CASE("captions round trip through text") {
    const auto s = make_scene(5, 8, 32, 32);
    REQUIRE(s.caption_tokens.size() == 4);
    CHECK(vocab::parse_caption(vocab::caption_text(s.caption_tokens)) == s.caption_tokens);
    CHECK_THROWS_AS(vocab::parse_caption("beach purple"), std::invalid_argument);
    for (auto t : s.caption_tokens) CHECK(t < vocab::kSize);
}

TEST_CASE("crop_align of a canonical frame is an axis-aligned resample") {
    Image frame{64, 64, 3, std::vector<float>(64 * 64 * 3)};
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            for (int c = 0; c < 3; ++c) frame.at(y, x, c) = static_cast<float>(((x * 7 + y * 3 + c * 11) % 17) / 16.0);
    const Point kps[5] = {{0.35 * 64, 0.4 * 64}, {0.65 * 64, 0.4 * 64}, {20, 30}, {44, 30}, {32, 36}};
    const auto out = crop_align(frame, kps);
    double worst = 0;
    for (std::size_t i = 0; i < out.data.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(out.data[i] - frame.data[i])));
    CHECK(worst < 1e-6);
}

TEST_CASE("crop_align maps rotated eyes to canonical positions") {
    // Two bright blobs at the eyes of a face rotated by 10 degrees about (30,34);
    // the warped blob centroids must land on the canonical eye positions.
    const double ang = 10.0 * 3.14159265358979 / 180.0, scale = 0.55;
    const Point center{30, 34};
    auto place = [&](double cx, double cy) {
        const double dx = (cx - 32) * scale, dy = (cy - 32) * scale;
        return Point{center.x + dx * std::cos(ang) - dy * std::sin(ang), center.y + dx * std::sin(ang) + dy * std::cos(ang)};
    };
    const Point le = place(0.35 * 64, 0.4 * 64), re = place(0.65 * 64, 0.4 * 64);
    Image frame{64, 64, 3, std::vector<float>(64 * 64 * 3, 0.f)};
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double gl = std::exp(-((px - le.x) * (px - le.x) + (py - le.y) * (py - le.y)) / 2.0);
            const double gr = std::exp(-((px - re.x) * (px - re.x) + (py - re.y) * (py - re.y)) / 2.0);
            frame.at(y, x, 0) = static_cast<float>(gl);
            frame.at(y, x, 1) = static_cast<float>(gr);
        }
    const Point kps[5] = {le, re, {0, 0}, {0, 0}, {0, 0}};
    const auto out = crop_align(frame, kps);
    for (int c = 0; c < 2; ++c) {
        double sx = 0, sy = 0, sw = 0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const double w = out.at(y, x, c);
                sx += w * (x + 0.5);
                sy += w * (y + 0.5);
                sw += w;
            }
        const double tx = c == 0 ? 0.35 * 64 : 0.65 * 64;
        CHECK(std::abs(sx / sw - tx) < 1.0);
        CHECK(std::abs(sy / sw - 0.4 * 64) < 1.0);
    }
    // the transform itself agrees with the analytic inverse of the placement
    const auto tr = alignment_transform(kps);
    const Point mapped = tr.apply(place(40, 50));
    CHECK(mapped.x == doctest::Approx(40).epsilon(1e-9));
    CHECK(mapped.y == doctest::Approx(50).epsilon(1e-9));
}

TEST_CASE("crop_align rejects coincident eyes") {
    Image frame{32, 32, 3, std::vector<float>(32 * 32 * 3, 0.5f)};
    const Point kps[5] = {{10, 10}, {11, 11}, {5, 5}, {20, 5}, {12, 14}};
    CHECK_THROWS_AS(crop_align(frame, kps), DegenerateGeometryError);
}

TEST_CASE("render_keypoints_rgb rasterizes fixed colored disks") {
    const Point kps[5] = {{10.5, 10.5}, {30.5, 10.5}, {5.5, 30.5}, {40.5, 30.5}, {20.5, 50.5}};
    const auto img = render_keypoints_rgb(kps, 64);
    CHECK(img.at(10, 10, 0) == 1.f);
    CHECK(img.at(10, 10, 1) == 0.f);
    CHECK(img.at(10, 30, 1) == 1.f);
    CHECK(img.at(30, 5, 2) == 1.f);
    CHECK(img.at(30, 40, 0) == 1.f);
    CHECK(img.at(30, 40, 1) == 1.f);
    CHECK(img.at(50, 20, 2) == 1.f);
    CHECK(img.at(12, 10, 0) == 1.f);   // radius 2 reaches here
    CHECK(img.at(13, 10, 0) == 0.f);   // and no further
    CHECK(img.at(0, 63, 0) == 0.f);

    const Point corner[5] = {{-5, -5}, {-5, -5}, {-5, -5}, {-5, -5}, {-5, -5}};
    const auto clipped = render_keypoints_rgb(corner, 32);
    CHECK(clipped.at(0, 0, 0) + clipped.at(0, 0, 1) + clipped.at(0, 0, 2) > 0.f);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (x * x + y * y > 4) CHECK(clipped.at(y, x, 0) + clipped.at(y, x, 1) + clipped.at(y, x, 2) == 0.f);

    const Point few[4] = {};
    CHECK_THROWS_AS(render_keypoints_rgb(std::span<const Point>(few, 4), 32), std::invalid_argument);
}

TEST_CASE("dataset file round trip") {
    DatasetSpec spec;
    spec.identities = 3;
    spec.videos_per_identity = 2;
    const auto data = make_dataset(spec);
    const auto path = temp_path("ds.bin").string();
    save_dataset(path, data);
    CHECK(load_dataset(path) == data);

    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    CHECK(std::string(bytes.data(), 4) == "CSID");
    bytes.resize(bytes.size() - 17);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_dataset(path), CorruptFileError);
    bytes[0] = 'X';
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_dataset(path), CorruptFileError);

    save_dataset(path, {});
    CHECK(load_dataset(path).empty());
    CHECK(std::filesystem::file_size(path) == 12);
    std::filesystem::remove(path);
}

TEST_CASE("dataset is deterministic and splits differ") {
    DatasetSpec spec;
    spec.identities = 2;
    spec.videos_per_identity = 2;
    CHECK(make_dataset(spec) == make_dataset(spec));
    const auto a = make_dataset(spec, 0), b = make_dataset(spec, 1);
    CHECK(a[0].identity == b[0].identity);
    CHECK(a[0].pixels != b[0].pixels);
}

TEST_CASE("identities are linearly separable from mean face crops") {
    // Softmax regression on the per-video mean of aligned 16x16 face crops.
    DatasetSpec spec;
    const auto data = make_dataset(spec);
    const int S = 16, D = S * S * 3 + 1, K = spec.identities;
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    for (const auto& v : data) {
        std::vector<double> f(D, 0.0);
        for (int t = 0; t < v.frames; ++t) {
            const auto kps = v.frame_keypoints(t);
            const auto crop = crop_align(v.frame(t), kps, S);
            for (int i = 0; i < S * S * 3; ++i) f[i] += crop.data[i] / v.frames;
        }
        f[D - 1] = 1.0;
        feats.push_back(f);
        labels.push_back(static_cast<int>(v.identity.identity_id));
    }
    std::vector<double> W(static_cast<std::size_t>(K) * D, 0.0);
    const int n = static_cast<int>(feats.size());
    for (int it = 0; it < 300; ++it) {
        std::vector<double> grad(W.size(), 0.0);
        for (int i = 0; i < n; ++i) {
            std::vector<double> z(K, 0.0);
            double mx = -1e300;
            for (int k = 0; k < K; ++k) {
                for (int j = 0; j < D; ++j) z[k] += W[k * D + j] * feats[i][j];
                mx = std::max(mx, z[k]);
            }
            double s = 0;
            for (auto& v : z) s += (v = std::exp(v - mx));
            for (int k = 0; k < K; ++k) {
                const double g = z[k] / s - (k == labels[i] ? 1.0 : 0.0);
                for (int j = 0; j < D; ++j) grad[k * D + j] += g * feats[i][j] / n;
            }
        }
        for (std::size_t q = 0; q < W.size(); ++q) W[q] -= 0.5 * grad[q];
    }
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        int best = 0;
        double bv = -1e300;
        for (int k = 0; k < K; ++k) {
            double z = 0;
            for (int j = 0; j < D; ++j) z += W[k * D + j] * feats[i][j];
            if (z > bv) bv = z, best = k;
        }
        correct += best == labels[i];
    }
    CHECK(correct > 0.9 * n);
}
