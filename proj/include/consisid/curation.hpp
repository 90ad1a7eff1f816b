#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace csid::curate {

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double area() const { return (x2 - x1) * (y2 - y1); }
};

enum class Category { Face, Head, Person };
const char* category_name(Category c);
// Throws std::invalid_argument on an unknown name.
Category parse_category(const std::string& s);

struct Keypoint {
    std::string name;
    double x = 0, y = 0;
    double confidence = 1.0;
};

struct Detection {
    Category category = Category::Face;
    Box bbox;
    double confidence = 1.0;
    std::vector<Keypoint> keypoints;
};

struct ClipDetections {
    std::string clip_id;
    int height = 0, width = 0;
    std::vector<std::vector<Detection>> frames;
};

struct CurationParams {
    int tolerance_frames = 5;
    double min_face_area_frac = 0.06;
    int min_keypoint_count = 3;
    double iou_match_threshold = 0.1;
    double keypoint_confidence = 0.5;  // keypoints below this do not count as valid
    int window_frames = 50;            // only the first frames are screened

    void validate() const;
};

struct IouResult {
    double value = 0.0;
    bool degenerate = false;  // a zero-area box, value forced to 0
};

IouResult iou_checked(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);

struct Verdict {
    bool accept = false;
    std::string reason;  // empty on accept
    int missing_count = 0;
    std::optional<double> min_face_area_frac;  // over retained frames
};

Verdict multi_view_filter(const ClipDetections& clip, const CurationParams& params);

struct Track {
    int track_id = 0;
    std::vector<std::optional<Box>> boxes;  // one slot per frame
};

struct Assignment {
    int m = 0;                          // max detections in any frame
    std::vector<std::vector<int>> ids;  // ids[frame][box]
    // links[f]: (box in frame f-1, box in frame f) continuations; links[0] is empty.
    // Ids agree along every link; equal ids without a link are reuse once all m ids are taken.
    std::vector<std::vector<std::array<int, 2>>> links;
    std::vector<Track> tracks;          // ordered by id
};

// Forward pass: frame 0 boxes get 1..k; later frames are matched to the
// previous frame by greedy descending IoU above the threshold (ties go to
// the lower box index), unmatched boxes take a never-used id while one
// remains <= m, else the smallest id absent from this and the previous frame.
// Backward pass: a box with no match in frame n-1 is matched against frame
// n-2 under the same rule and, when that id is free, its track from n onward
// is relabelled, bridging one-frame gaps. Throws InternalConsistencyError on
// duplicate ids within a frame.
Assignment assign_ids(const std::vector<std::vector<Box>>& frames, double iou_threshold = 0.1);

// Greedy matching between consecutive frames: pairs (prev index, cur index).
std::vector<std::array<int, 2>> greedy_match(const std::vector<Box>& prev, const std::vector<Box>& cur, double threshold);

struct CurateStats {
    int records = 0;
    int errors = 0;
    int accepted = 0;
};

// Reads one clip per line ({clip_id, frame_dims:[H,W], frames:[[{category,
// bbox:[x1,y1,x2,y2], confidence, keypoints:[{name,x,y,confidence}]}]]}) and
// writes one result per line; malformed lines become error records.
CurateStats curate(std::istream& in, std::ostream& out, const CurationParams& params);

// Parses one input record. Throws std::invalid_argument when malformed.
ClipDetections parse_clip(const std::string& line);
std::string result_json(const ClipDetections& clip, const Verdict& v, const Assignment& a);

}  // namespace csid::curate
