#include "consisid/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "consisid/errors.hpp"
#include "consisid/io.hpp"
#include "consisid/rng.hpp"

namespace csid::synth {

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int i = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

constexpr Rgb kBackgrounds[vocab::kBackgrounds] = {
    {0.85, 0.78, 0.55}, {0.15, 0.45, 0.18}, {0.55, 0.55, 0.60}, {0.35, 0.33, 0.32},
    {0.92, 0.94, 0.98}, {0.80, 0.55, 0.30}, {0.20, 0.25, 0.55}, {0.05, 0.05, 0.12},
};
constexpr double kPlacementX[vocab::kPlacements] = {0.4, 0.5, 0.6};
constexpr double kSizeScale[vocab::kSizes] = {0.55, 0.7};
constexpr double kMarkerU[4] = {-0.45, -0.15, 0.15, 0.45};
constexpr double kMarkerV[2] = {-0.55, 0.2};

struct FaceGeometry {
    double cx, cy, rx, ry;
    bool inside(double px, double py) const {
        const double u = (px - cx) / rx, v = (py - cy) / ry;
        return u * u + v * v <= 1.0;
    }
};

FaceGeometry face_geometry(const IdentitySpec& spec, Point center, double scale, int height) {
    const double ry = scale * height / 2.0;
    const double rx = ry * 0.85 * spec.face_aspect;
    return {center.x, center.y, rx, ry};
}

std::array<Point, kKeypoints> face_keypoints(const IdentitySpec& spec, const FaceGeometry& g) {
    const double eye_dx = spec.eye_spacing * g.ry;
    return {{
        {g.cx - eye_dx, g.cy - 0.2 * g.ry},
        {g.cx + eye_dx, g.cy - 0.2 * g.ry},
        {g.cx - 0.75 * g.rx, g.cy - 0.05 * g.ry},
        {g.cx + 0.75 * g.rx, g.cy - 0.05 * g.ry},
        {g.cx, g.cy + 0.1 * g.ry},
    }};
}

}  // namespace

IdentitySpec generate_identity(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "identity-spec"));
    IdentitySpec s;
    s.identity_id = static_cast<std::uint32_t>(seed);
    s.face_hue = static_cast<float>(uniform01(rng));
    if (s.face_hue >= 1.f) s.face_hue = 0.f;
    s.eye_spacing = static_cast<float>(0.2 + 0.25 * uniform01(rng));
    s.face_aspect = static_cast<float>(0.7 + 0.6 * uniform01(rng));
    s.skin_tone = static_cast<float>(uniform01(rng));
    s.marker_bits = static_cast<std::uint8_t>(rng() & 0xffu);
    return s;
}

namespace vocab {

const std::vector<std::string>& words() {
    static const std::vector<std::string> w = {
        "beach", "forest", "office", "street", "snow", "desert", "studio", "night",
        "left", "center", "right",
        "still", "smiling", "frowning", "talking",
        "small", "large",
    };
    return w;
}

std::string caption_text(std::span<const std::uint16_t> tokens) {
    std::string out;
    for (auto t : tokens) {
        if (!out.empty()) out += ' ';
        out += t < words().size() ? words()[t] : "<" + std::to_string(t) + ">";
    }
    return out;
}

std::vector<std::uint16_t> parse_caption(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::uint16_t> out;
    std::string w;
    while (in >> w) {
        auto it = std::find(words().begin(), words().end(), w);
        if (it == words().end()) throw std::invalid_argument("unknown caption word: " + w);
        out.push_back(static_cast<std::uint16_t>(it - words().begin()));
    }
    return out;
}

}  // namespace vocab

SceneScript scene_from_caption(std::span<const std::uint16_t> caption, int frames, int height, int width) {
    if (caption.size() != 4) throw std::invalid_argument("scene caption must have four words");
    const int bg = caption[0];
    const int place = caption[1] - vocab::kPlacementBase;
    const int action = caption[2] - vocab::kActionBase;
    const int size = caption[3] - vocab::kSizeBase;
    if (bg < 0 || bg >= vocab::kBackgrounds || place < 0 || place >= vocab::kPlacements || action < 0 ||
        action >= vocab::kActions || size < 0 || size >= vocab::kSizes)
        throw std::invalid_argument("caption words out of grammar order");
    SceneScript s;
    s.background_id = bg;
    s.caption_tokens.assign(caption.begin(), caption.end());
    for (int t = 0; t < frames; ++t) {
        s.face_center.push_back({kPlacementX[place] * width, 0.5 * height});
        s.face_scale.push_back(kSizeScale[size]);
        const double phase = frames > 1 ? static_cast<double>(t) / (frames - 1) : 0.0;
        double e = 0.0;
        switch (action) {
            case 1: e = phase; break;
            case 2: e = -phase; break;
            case 3: e = (t % 2 == 0) ? 0.6 : -0.6; break;
            default: break;
        }
        s.expression.push_back(e);
    }
    return s;
}

SceneScript make_scene(std::uint64_t seed, int frames, int height, int width) {
    Rng rng(derive_seed(seed, "scene"));
    const std::uint16_t caption[4] = {
        static_cast<std::uint16_t>(uniform_int(rng, 0, vocab::kBackgrounds - 1)),
        static_cast<std::uint16_t>(vocab::kPlacementBase + uniform_int(rng, 0, vocab::kPlacements - 1)),
        static_cast<std::uint16_t>(vocab::kActionBase + uniform_int(rng, 0, vocab::kActions - 1)),
        static_cast<std::uint16_t>(vocab::kSizeBase + uniform_int(rng, 0, vocab::kSizes - 1)),
    };
    return scene_from_caption(caption, frames, height, width);
}

Image VideoSample::frame(int t) const {
    Image img{height, width, 3, {}};
    const std::size_t n = static_cast<std::size_t>(height) * width * 3;
    img.data.assign(pixels.begin() + static_cast<std::ptrdiff_t>(t * n), pixels.begin() + static_cast<std::ptrdiff_t>((t + 1) * n));
    return img;
}

std::array<Point, kKeypoints> VideoSample::frame_keypoints(int t) const {
    std::array<Point, kKeypoints> out;
    for (int k = 0; k < kKeypoints; ++k)
        out[k] = {keypoints[(static_cast<std::size_t>(t) * kKeypoints + k) * 2],
                  keypoints[(static_cast<std::size_t>(t) * kKeypoints + k) * 2 + 1]};
    return out;
}

std::span<const std::uint8_t> VideoSample::frame_mask(int t) const {
    const std::size_t n = static_cast<std::size_t>(height) * width;
    return std::span<const std::uint8_t>(mask).subspan(t * n, n);
}

VideoSample render_video(const IdentitySpec& spec, const SceneScript& script, int frames, int height, int width) {
    if (frames < 8 || height < 8 || width < 8) throw std::invalid_argument("render_video: T, H, W must be >= 8");
    if (static_cast<int>(script.face_center.size()) != frames || static_cast<int>(script.face_scale.size()) != frames ||
        static_cast<int>(script.expression.size()) != frames)
        throw std::invalid_argument("render_video: script length does not match frame count");
    if (script.background_id < 0 || script.background_id >= vocab::kBackgrounds)
        throw std::invalid_argument("render_video: background id out of range");

    VideoSample v;
    v.frames = frames;
    v.height = height;
    v.width = width;
    v.caption_tokens = script.caption_tokens;
    v.identity = spec;
    v.pixels.assign(static_cast<std::size_t>(frames) * height * width * 3, 0.f);
    v.keypoints.assign(static_cast<std::size_t>(frames) * kKeypoints * 2, 0.f);
    v.mask.assign(static_cast<std::size_t>(frames) * height * width, 0);

    const Rgb bg = kBackgrounds[script.background_id];
    const Rgb skin = hsv_to_rgb(spec.face_hue, 0.25 + 0.5 * spec.skin_tone, 0.95 - 0.45 * spec.skin_tone);
    const Rgb eye_col{0.05, 0.05, 0.05};
    const Rgb mouth_col{0.55, 0.08, 0.10};
    const Rgb marker_col{0.08, 0.08, 0.40};

    for (int t = 0; t < frames; ++t) {
        const double scale = script.face_scale[t];
        if (!(scale >= 0.3 && scale <= 0.8)) throw std::invalid_argument("render_video: face scale outside [0.3,0.8]");
        const double expr = std::clamp(script.expression[t], -1.0, 1.0);
        const FaceGeometry g = face_geometry(spec, script.face_center[t], scale, height);
        const auto kps = face_keypoints(spec, g);
        const double eye_r = std::max(0.7, 0.13 * g.rx);
        const int patch = std::max(2, static_cast<int>(std::lround(0.18 * g.ry)));

        float* px = v.pixels.data() + static_cast<std::size_t>(t) * height * width * 3;
        std::uint8_t* mk = v.mask.data() + static_cast<std::size_t>(t) * height * width;
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const double cx = x + 0.5, cy = y + 0.5;
                Rgb c;
                const double shade = 0.8 + 0.35 * (cy / height);
                c = {bg.r * shade, bg.g * shade, bg.b * shade};
                if (g.inside(cx, cy)) {
                    mk[y * width + x] = 1;
                    const double u = (cx - g.cx) / g.rx, w = (cy - g.cy) / g.ry;
                    const double lit = 1.0 - 0.18 * (u * u + w * w);
                    c = {skin.r * lit, skin.g * lit, skin.b * lit};
                    for (int e = 0; e < 2; ++e) {
                        const double dx = cx - kps[e].x, dy = cy - kps[e].y;
                        if (dx * dx + dy * dy <= eye_r * eye_r) c = eye_col;
                    }
                    const double mdx = cx - g.cx;
                    const double half_mouth = 0.4 * g.rx;
                    if (std::abs(mdx) <= half_mouth) {
                        const double q = mdx / half_mouth;
                        const double my = g.cy + 0.45 * g.ry + expr * 0.12 * g.ry * (1.0 - q * q);
                        if (std::abs(cy - my) <= 0.5 + 0.04 * g.ry) c = mouth_col;
                    }
                    for (int bit = 0; bit < 8; ++bit) {
                        if (!((spec.marker_bits >> bit) & 1u)) continue;
                        const double mxc = g.cx + kMarkerU[bit % 4] * g.rx;
                        const double myc = g.cy + kMarkerV[bit / 4] * g.ry;
                        const int x0 = static_cast<int>(std::floor(mxc - patch / 2.0 + 0.5));
                        const int y0 = static_cast<int>(std::floor(myc - patch / 2.0 + 0.5));
                        if (x >= x0 && x < x0 + patch && y >= y0 && y < y0 + patch) c = marker_col;
                    }
                }
                float* o = px + (static_cast<std::size_t>(y) * width + x) * 3;
                o[0] = static_cast<float>(std::clamp(c.r, 0.0, 1.0));
                o[1] = static_cast<float>(std::clamp(c.g, 0.0, 1.0));
                o[2] = static_cast<float>(std::clamp(c.b, 0.0, 1.0));
            }
        }
        // Keypoints must land on a face pixel of their frame.
        const int fx = std::clamp(static_cast<int>(std::floor(g.cx)), 0, width - 1);
        const int fy = std::clamp(static_cast<int>(std::floor(g.cy)), 0, height - 1);
        for (int k = 0; k < kKeypoints; ++k) {
            Point p = kps[k];
            const int ix = static_cast<int>(std::floor(p.x)), iy = static_cast<int>(std::floor(p.y));
            if (ix < 0 || iy < 0 || ix >= width || iy >= height || !mk[iy * width + ix]) p = {fx + 0.5, fy + 0.5};
            v.keypoints[(static_cast<std::size_t>(t) * kKeypoints + k) * 2] = static_cast<float>(p.x);
            v.keypoints[(static_cast<std::size_t>(t) * kKeypoints + k) * 2 + 1] = static_cast<float>(p.y);
        }
    }
    return v;
}

Point Similarity::apply(Point p) const {
    return {ar * p.x - ai * p.y + br, ai * p.x + ar * p.y + bi};
}

Point Similarity::invert(Point p) const {
    const double x = p.x - br, y = p.y - bi;
    const double d = ar * ar + ai * ai;
    return {(ar * x + ai * y) / d, (ar * y - ai * x) / d};
}

Similarity alignment_transform(std::span<const Point> keypoints, int size) {
    if (keypoints.size() < 2) throw std::invalid_argument("alignment_transform: need eye keypoints");
    const Point l = keypoints[0], r = keypoints[1];
    const double sx = r.x - l.x, sy = r.y - l.y;
    if (std::hypot(sx, sy) <= 2.0) throw DegenerateGeometryError("crop_align: inter-eye distance <= 2 px");
    const double dx = 0.3 * size, dy = 0.0;
    // a = (dst_r - dst_l) / (src_r - src_l)
    const double den = sx * sx + sy * sy;
    Similarity s;
    s.ar = (dx * sx + dy * sy) / den;
    s.ai = (dy * sx - dx * sy) / den;
    const Point canon_l{0.35 * size, 0.4 * size};
    s.br = canon_l.x - (s.ar * l.x - s.ai * l.y);
    s.bi = canon_l.y - (s.ai * l.x + s.ar * l.y);
    return s;
}

Image warp_similarity(const Image& frame, const Similarity& transform, int size) {
    Image out{size, size, frame.channels, std::vector<float>(static_cast<std::size_t>(size) * size * frame.channels)};
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const Point src = transform.invert({x + 0.5, y + 0.5});
            const double fx = std::clamp(src.x - 0.5, 0.0, static_cast<double>(frame.width - 1));
            const double fy = std::clamp(src.y - 0.5, 0.0, static_cast<double>(frame.height - 1));
            const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
            const int x1 = std::min(x0 + 1, frame.width - 1), y1 = std::min(y0 + 1, frame.height - 1);
            const double ax = fx - x0, ay = fy - y0;
            for (int c = 0; c < frame.channels; ++c) {
                const double v = (1 - ay) * ((1 - ax) * frame.at(y0, x0, c) + ax * frame.at(y0, x1, c)) +
                                 ay * ((1 - ax) * frame.at(y1, x0, c) + ax * frame.at(y1, x1, c));
                out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return out;
}

Image crop_align(const Image& frame, std::span<const Point> keypoints, int size) {
    return warp_similarity(frame, alignment_transform(keypoints, size), size);
}

Image render_keypoints_rgb(std::span<const Point> keypoints, int size) {
    if (keypoints.size() < static_cast<std::size_t>(kKeypoints))
        throw std::invalid_argument("render_keypoints_rgb: need 5 keypoints");
    if (size < 16) throw std::invalid_argument("render_keypoints_rgb: size must be >= 16");
    static constexpr float kColors[kKeypoints][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}};
    Image img{size, size, 3, std::vector<float>(static_cast<std::size_t>(size) * size * 3, 0.f)};
    for (int k = 0; k < kKeypoints; ++k) {
        const int cx = std::clamp(static_cast<int>(std::floor(keypoints[k].x)), 0, size - 1);
        const int cy = std::clamp(static_cast<int>(std::floor(keypoints[k].y)), 0, size - 1);
        for (int y = std::max(0, cy - kKeypointRadius); y <= std::min(size - 1, cy + kKeypointRadius); ++y)
            for (int x = std::max(0, cx - kKeypointRadius); x <= std::min(size - 1, cx + kKeypointRadius); ++x)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= kKeypointRadius * kKeypointRadius)
                    for (int c = 0; c < 3; ++c) img.at(y, x, c) = kColors[k][c];
    }
    return img;
}

namespace {
constexpr char kDatasetMagic[4] = {'C', 'S', 'I', 'D'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const std::string& path, std::span<const VideoSample> samples) {
    io::BinaryWriter w;
    w.put_bytes(std::string_view(kDatasetMagic, 4));
    w.put<std::uint32_t>(kDatasetVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(samples.size()));
    for (const auto& s : samples) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(s.frames));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(s.height));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(s.width));
        w.put_array(s.pixels.data(), s.pixels.size());
        w.put_array(s.keypoints.data(), s.keypoints.size());
        w.put_array(s.mask.data(), s.mask.size());
        w.put<std::uint16_t>(static_cast<std::uint16_t>(s.caption_tokens.size()));
        w.put_array(s.caption_tokens.data(), s.caption_tokens.size());
        w.put<float>(s.identity.face_hue);
        w.put<float>(s.identity.eye_spacing);
        w.put<float>(s.identity.face_aspect);
        w.put<float>(s.identity.skin_tone);
        w.put<std::uint32_t>(s.identity.identity_id);
        w.put<std::uint32_t>(s.identity.marker_bits);
    }
    io::write_file_atomic(path, w.buffer());
}

void save_video(const std::string& path, std::span<const Image> frames) {
    if (frames.empty()) throw std::invalid_argument("save_video: no frames");
    const auto& f0 = frames.front();
    io::BinaryWriter w;
    w.put_bytes("CSVD");
    w.put<std::uint32_t>(1);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(frames.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f0.height));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f0.width));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f0.channels));
    for (const auto& f : frames) {
        if (f.height != f0.height || f.width != f0.width || f.channels != f0.channels)
            throw std::invalid_argument("save_video: frames differ in size");
        w.put_array(f.data.data(), f.data.size());
    }
    io::write_file_atomic(path, w.buffer());
}

std::vector<Image> load_video(const std::string& path) {
    io::BinaryReader r(io::read_file(path));
    if (r.get_bytes(4) != "CSVD") throw CorruptFileError("bad video magic");
    if (r.get<std::uint32_t>() != 1) throw CorruptFileError("unsupported video version");
    const auto t = r.get<std::uint32_t>();
    const auto h = r.get<std::uint32_t>();
    const auto w = r.get<std::uint32_t>();
    const auto c = r.get<std::uint32_t>();
    if (t == 0 || h == 0 || w == 0 || c == 0 || h > 4096 || w > 4096 || c > 4) throw CorruptFileError("bad video dims");
    const std::size_t px = static_cast<std::size_t>(h) * w * c;
    if (r.remaining() != px * t * sizeof(float)) throw CorruptFileError("video size mismatch");
    std::vector<Image> out;
    for (std::uint32_t i = 0; i < t; ++i) {
        Image img{static_cast<int>(h), static_cast<int>(w), static_cast<int>(c), std::vector<float>(px)};
        r.get_array(img.data.data(), px);
        out.push_back(std::move(img));
    }
    return out;
}

std::string to_ppm(const Image& img) {
    if (img.channels != 3) throw std::invalid_argument("to_ppm: expects RGB");
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    for (const float v : img.data)
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.f, 1.f)))));
    return out;
}

std::vector<VideoSample> load_dataset(const std::string& path) {
    io::BinaryReader r(io::read_file(path));
    if (r.get_bytes(4) != std::string(kDatasetMagic, 4)) throw CorruptFileError("bad dataset magic");
    if (r.get<std::uint32_t>() != kDatasetVersion) throw CorruptFileError("unsupported dataset version");
    const auto count = r.get<std::uint32_t>();
    std::vector<VideoSample> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        VideoSample s;
        s.frames = static_cast<int>(r.get<std::uint32_t>());
        s.height = static_cast<int>(r.get<std::uint32_t>());
        s.width = static_cast<int>(r.get<std::uint32_t>());
        const std::size_t n = static_cast<std::size_t>(s.frames) * s.height * s.width;
        if (s.frames <= 0 || s.height <= 0 || s.width <= 0 || n * 3 * sizeof(float) > r.remaining())
            throw CorruptFileError("implausible sample dimensions");
        s.pixels.resize(n * 3);
        r.get_array(s.pixels.data(), s.pixels.size());
        s.keypoints.resize(static_cast<std::size_t>(s.frames) * kKeypoints * 2);
        r.get_array(s.keypoints.data(), s.keypoints.size());
        s.mask.resize(n);
        r.get_array(s.mask.data(), s.mask.size());
        s.caption_tokens.resize(r.get<std::uint16_t>());
        r.get_array(s.caption_tokens.data(), s.caption_tokens.size());
        s.identity.face_hue = r.get<float>();
        s.identity.eye_spacing = r.get<float>();
        s.identity.face_aspect = r.get<float>();
        s.identity.skin_tone = r.get<float>();
        s.identity.identity_id = r.get<std::uint32_t>();
        const auto bits = r.get<std::uint32_t>();
        if (bits > 0xffu) throw CorruptFileError("marker bits out of range");
        s.identity.marker_bits = static_cast<std::uint8_t>(bits);
        out.push_back(std::move(s));
    }
    if (!r.at_end()) throw CorruptFileError("trailing bytes in dataset");
    return out;
}

IdentitySpec dataset_identity(const DatasetSpec& spec, int index) {
    IdentitySpec id = generate_identity(derive_seed(spec.seed, 0x1d, static_cast<std::uint64_t>(index)));
    id.identity_id = static_cast<std::uint32_t>(index);
    return id;
}

std::vector<VideoSample> make_dataset(const DatasetSpec& spec, int split) {
    std::vector<VideoSample> out;
    out.reserve(static_cast<std::size_t>(spec.identities) * spec.videos_per_identity);
    for (int i = 0; i < spec.identities; ++i) {
        const IdentitySpec id = dataset_identity(spec, i);
        for (int v = 0; v < spec.videos_per_identity; ++v) {
            const auto scene_seed = derive_seed(spec.seed, 0x5c + static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(i),
                                                static_cast<std::uint64_t>(v));
            const SceneScript script = make_scene(scene_seed, spec.frames, spec.height, spec.width);
            out.push_back(render_video(id, script, spec.frames, spec.height, spec.width));
        }
    }
    return out;
}

}  // namespace csid::synth
