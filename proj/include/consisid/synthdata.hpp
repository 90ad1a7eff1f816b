#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace csid::synth {

struct IdentitySpec {
    std::uint32_t identity_id = 0;
    float face_hue = 0.f;     // [0,1)
    float eye_spacing = 0.3f; // [0.2,0.45], inter-eye distance as a fraction of face height
    float face_aspect = 1.f;  // [0.7,1.3]
    float skin_tone = 0.5f;   // [0,1]
    std::uint8_t marker_bits = 0;

    bool operator==(const IdentitySpec&) const = default;
};

IdentitySpec generate_identity(std::uint64_t seed);

struct Point {
    double x = 0.0;
    double y = 0.0;
};

// Caption vocabulary: one word from each group, in this order.
namespace vocab {
inline constexpr int kBackgrounds = 8;
inline constexpr int kPlacements = 3;
inline constexpr int kActions = 4;
inline constexpr int kSizes = 2;
inline constexpr int kPlacementBase = kBackgrounds;
inline constexpr int kActionBase = kPlacementBase + kPlacements;
inline constexpr int kSizeBase = kActionBase + kActions;
inline constexpr int kSize = kSizeBase + kSizes;
const std::vector<std::string>& words();
std::string caption_text(std::span<const std::uint16_t> tokens);
// Throws std::invalid_argument on an unknown word.
std::vector<std::uint16_t> parse_caption(const std::string& text);
}  // namespace vocab

struct SceneScript {
    int background_id = 0;
    std::vector<Point> face_center;    // per frame, pixels
    std::vector<double> face_scale;    // per frame, fraction of frame height in [0.3,0.8]
    std::vector<double> expression;    // per frame, mouth curvature in [-1,1]
    std::vector<std::uint16_t> caption_tokens;
};

// Scene drawn from the caption grammar: background, placement, action, size.
SceneScript make_scene(std::uint64_t seed, int frames, int height, int width);
SceneScript scene_from_caption(std::span<const std::uint16_t> caption, int frames, int height, int width);

struct Image {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<float> data;  // HWC

    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

inline constexpr int kKeypoints = 5;  // left eye, right eye, left ear, right ear, nose

struct VideoSample {
    int frames = 0, height = 0, width = 0;
    std::vector<float> pixels;            // T*H*W*3 in [0,1]
    std::vector<float> keypoints;         // T*5*2, (x,y) pixel coordinates
    std::vector<std::uint8_t> mask;       // T*H*W, 1 = face
    std::vector<std::uint16_t> caption_tokens;
    IdentitySpec identity;

    Image frame(int t) const;
    std::array<Point, kKeypoints> frame_keypoints(int t) const;
    std::span<const std::uint8_t> frame_mask(int t) const;

    bool operator==(const VideoSample&) const = default;
};

// Throws std::invalid_argument when dims < 8 or the script length differs from `frames`.
VideoSample render_video(const IdentitySpec& spec, const SceneScript& script, int frames, int height, int width);

inline constexpr int kRefSize = 64;

// Similarity transform dst = a * src + b in complex form.
struct Similarity {
    double ar = 1.0, ai = 0.0, br = 0.0, bi = 0.0;
    Point apply(Point p) const;
    Point invert(Point p) const;
};

// Maps the eye keypoints onto (0.35S, 0.4S) and (0.65S, 0.4S).
// Throws DegenerateGeometryError when the eyes are <= 2 px apart.
Similarity alignment_transform(std::span<const Point> keypoints, int size = kRefSize);
Image crop_align(const Image& frame, std::span<const Point> keypoints, int size = kRefSize);
Image warp_similarity(const Image& frame, const Similarity& transform, int size);

inline constexpr int kKeypointRadius = 2;
Image render_keypoints_rgb(std::span<const Point> keypoints, int size = kRefSize);

// Dataset file: "CSID", u32 version = 1, u32 count, then per sample
// u32 T,H,W; f32 pixels; f32 keypoints; u8 mask; u16 caption length + u16 tokens;
// identity as f32 hue, eye_spacing, aspect, skin_tone then u32 id, u32 marker_bits.
void save_dataset(const std::string& path, std::span<const VideoSample> samples);
std::vector<VideoSample> load_dataset(const std::string& path);

// Packed video file: "CSVD", u32 version = 1, u32 T,H,W,C, then f32 HWC frames.
void save_video(const std::string& path, std::span<const Image> frames);
std::vector<Image> load_video(const std::string& path);

// Binary PPM (P6) of an RGB image.
std::string to_ppm(const Image& img);

struct DatasetSpec {
    int identities = 16;
    int videos_per_identity = 8;
    int frames = 8;
    int height = 32;
    int width = 32;
    std::uint64_t seed = 0;
};

// Identities depend only on (seed, index); `split` selects an
// independent stream of scenes (0 = train, 1 = held-out evaluation).
std::vector<VideoSample> make_dataset(const DatasetSpec& spec, int split = 0);
IdentitySpec dataset_identity(const DatasetSpec& spec, int index);

}  // namespace csid::synth
