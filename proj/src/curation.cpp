#include "consisid/curation.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <set>
#include <stdexcept>

#include "consisid/errors.hpp"
#include "json.hpp"

namespace csid::curate {

using json = nlohmann::ordered_json;

const char* category_name(Category c) {
    switch (c) {
        case Category::Face: return "face";
        case Category::Head: return "head";
        case Category::Person: return "person";
    }
    return "?";
}

Category parse_category(const std::string& s) {
    if (s == "face") return Category::Face;
    if (s == "head") return Category::Head;
    if (s == "person") return Category::Person;
    throw std::invalid_argument("unknown category: " + s);
}

void CurationParams::validate() const {
    if (tolerance_frames < 0) throw std::invalid_argument("tolerance_frames must be >= 0");
    if (!(min_face_area_frac >= 0.0 && min_face_area_frac <= 1.0))
        throw std::invalid_argument("min_face_area_frac must be in [0, 1]");
    if (min_keypoint_count < 0) throw std::invalid_argument("min_keypoint_count must be >= 0");
    if (!(iou_match_threshold >= 0.0 && iou_match_threshold <= 1.0))
        throw std::invalid_argument("iou_match_threshold must be in [0, 1]");
    if (!(keypoint_confidence >= 0.0 && keypoint_confidence <= 1.0))
        throw std::invalid_argument("keypoint_confidence must be in [0, 1]");
    if (window_frames < 1) throw std::invalid_argument("window_frames must be >= 1");
}

IouResult iou_checked(const Box& a, const Box& b) {
    if (!(a.area() > 0.0) || !(b.area() > 0.0)) return {0.0, true};
    const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (w <= 0.0 || h <= 0.0) return {0.0, false};
    const double inter = w * h;
    return {inter / (a.area() + b.area() - inter), false};
}

double iou(const Box& a, const Box& b) { return iou_checked(a, b).value; }

Verdict multi_view_filter(const ClipDetections& clip, const CurationParams& params) {
    Verdict v;
    if (clip.frames.empty()) {
        v.reason = "empty";
        return v;
    }
    const double frame_area = static_cast<double>(clip.height) * clip.width;
    const int n = std::min<int>(static_cast<int>(clip.frames.size()), params.window_frames);
    bool small_face = false;
    for (int f = 0; f < n; ++f) {
        bool face = false, head = false, person = false;
        int best_kps = 0;
        double largest_face = 0.0;
        for (const auto& d : clip.frames[f]) {
            face |= d.category == Category::Face;
            head |= d.category == Category::Head;
            person |= d.category == Category::Person;
            const int valid = static_cast<int>(std::count_if(d.keypoints.begin(), d.keypoints.end(), [&](const Keypoint& k) {
                return k.confidence >= params.keypoint_confidence;
            }));
            best_kps = std::max(best_kps, valid);
            if (d.category == Category::Face) largest_face = std::max(largest_face, d.bbox.area());
        }
        if (!(face && head && person) || best_kps < params.min_keypoint_count) {
            ++v.missing_count;
            continue;
        }
        const double frac = frame_area > 0.0 ? largest_face / frame_area : 0.0;
        v.min_face_area_frac = v.min_face_area_frac ? std::min(*v.min_face_area_frac, frac) : frac;
        if (frac < params.min_face_area_frac) small_face = true;
    }
    if (v.missing_count >= params.tolerance_frames) {
        v.reason = "missing_frames";
    } else if (small_face) {
        v.reason = "small_face";
    } else {
        v.accept = true;
    }
    return v;
}

std::vector<std::array<int, 2>> greedy_match(const std::vector<Box>& prev, const std::vector<Box>& cur, double threshold) {
    struct Cand {
        double iou;
        int i, j;
    };
    std::vector<Cand> cands;
    for (int j = 0; j < static_cast<int>(cur.size()); ++j)
        for (int i = 0; i < static_cast<int>(prev.size()); ++i) {
            const double v = iou(prev[i], cur[j]);
            if (v > threshold) cands.push_back({v, i, j});
        }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.iou != b.iou) return a.iou > b.iou;
        if (a.j != b.j) return a.j < b.j;
        return a.i < b.i;
    });
    std::vector<char> used_i(prev.size(), 0), used_j(cur.size(), 0);
    std::vector<std::array<int, 2>> out;
    for (const auto& c : cands) {
        if (used_i[c.i] || used_j[c.j]) continue;
        used_i[c.i] = used_j[c.j] = 1;
        out.push_back({c.i, c.j});
    }
    return out;
}

Assignment assign_ids(const std::vector<std::vector<Box>>& frames, double iou_threshold) {
    if (frames.empty()) throw std::invalid_argument("assign_ids: no frames");
    Assignment a;
    for (const auto& f : frames) a.m = std::max(a.m, static_cast<int>(f.size()));
    const int n = static_cast<int>(frames.size());
    a.ids.resize(n);
    a.links.resize(n);
    int next_fresh = 1;

    for (int f = 0; f < n; ++f) {
        auto& ids = a.ids[f];
        ids.assign(frames[f].size(), 0);
        std::set<int> taken;
        if (f > 0) {
            a.links[f] = greedy_match(frames[f - 1], frames[f], iou_threshold);
            for (const auto& [i, j] : a.links[f]) {
                ids[j] = a.ids[f - 1][i];
                taken.insert(ids[j]);
            }
        }
        const std::set<int> prev_ids = f > 0 ? std::set<int>(a.ids[f - 1].begin(), a.ids[f - 1].end()) : std::set<int>{};
        for (auto& id : ids) {
            if (id) continue;
            if (next_fresh <= a.m) {
                id = next_fresh++;
            } else {
                int pick = 0;
                for (int c = 1; c <= a.m && !pick; ++c)
                    if (!taken.count(c) && !prev_ids.count(c)) pick = c;
                for (int c = 1; c <= a.m && !pick; ++c)
                    if (!taken.count(c)) pick = c;
                id = pick;
            }
            taken.insert(id);
        }
    }

    // backward reconciliation: bridge boxes that lost their match for one frame
    for (int f = 2; f < n; ++f) {
        std::vector<char> has_prev(frames[f].size(), 0);
        for (const auto& [i, j] : a.links[f]) has_prev[j] = 1;
        std::vector<Box> orphans, gapped;
        std::vector<int> orphan_idx, gapped_idx;
        const std::set<int> mid(a.ids[f - 1].begin(), a.ids[f - 1].end());
        const std::set<int> here(a.ids[f].begin(), a.ids[f].end());
        for (int j = 0; j < static_cast<int>(frames[f].size()); ++j)
            if (!has_prev[j]) {
                orphans.push_back(frames[f][j]);
                orphan_idx.push_back(j);
            }
        for (int i = 0; i < static_cast<int>(frames[f - 2].size()); ++i) {
            const int id = a.ids[f - 2][i];
            if (!mid.count(id) && !here.count(id)) {
                gapped.push_back(frames[f - 2][i]);
                gapped_idx.push_back(i);
            }
        }
        if (orphans.empty() || gapped.empty()) continue;
        for (const auto& [gi, oj] : greedy_match(gapped, orphans, iou_threshold)) {
            const int target = a.ids[f - 2][gapped_idx[gi]];
            const int old = a.ids[f][orphan_idx[oj]];
            for (int g = f; g < n; ++g)
                for (auto& id : a.ids[g]) {
                    if (id == old) id = target;
                    else if (id == target) id = old;
                }
        }
    }

    for (int f = 0; f < n; ++f) {
        std::set<int> seen;
        for (const int id : a.ids[f]) {
            if (id < 1 || id > a.m) throw InternalConsistencyError("assign_ids: id out of range");
            if (!seen.insert(id).second) throw InternalConsistencyError("assign_ids: duplicate id within a frame");
        }
        for (const auto& [i, j] : a.links[f])
            if (a.ids[f - 1][i] != a.ids[f][j]) throw InternalConsistencyError("assign_ids: linked boxes disagree");
    }
    for (int id = 1; id <= a.m; ++id) {
        Track t;
        t.track_id = id;
        t.boxes.assign(n, std::nullopt);
        bool any = false;
        for (int f = 0; f < n; ++f)
            for (std::size_t j = 0; j < a.ids[f].size(); ++j)
                if (a.ids[f][j] == id) {
                    t.boxes[f] = frames[f][j];
                    any = true;
                }
        if (any) a.tracks.push_back(std::move(t));
    }
    return a;
}

namespace {

double number(const json& j, const char* what) {
    if (!j.is_number()) throw std::invalid_argument(std::string("expected a number for ") + what);
    return j.get<double>();
}

Box parse_box(const json& j) {
    if (!j.is_array() || j.size() != 4) throw std::invalid_argument("bbox must be [x1, y1, x2, y2]");
    Box b{number(j[0], "bbox"), number(j[1], "bbox"), number(j[2], "bbox"), number(j[3], "bbox")};
    if (!(b.x1 < b.x2 && b.y1 < b.y2)) throw std::invalid_argument("bbox is not well ordered");
    return b;
}

std::vector<Box> face_boxes(const std::vector<Detection>& frame) {
    std::vector<Box> out;
    for (const auto& d : frame)
        if (d.category == Category::Face) out.push_back(d.bbox);
    return out;
}

}  // namespace

ClipDetections parse_clip(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("record must be an object");
    ClipDetections c;
    if (!j.contains("clip_id")) throw std::invalid_argument("missing clip_id");
    c.clip_id = j["clip_id"].is_string() ? j["clip_id"].get<std::string>() : j["clip_id"].dump();
    const auto& dims = j.value("frame_dims", json());
    if (!dims.is_array() || dims.size() != 2) throw std::invalid_argument("frame_dims must be [H, W]");
    c.height = static_cast<int>(number(dims[0], "frame_dims"));
    c.width = static_cast<int>(number(dims[1], "frame_dims"));
    if (c.height <= 0 || c.width <= 0) throw std::invalid_argument("frame_dims must be positive");
    const auto& frames = j.value("frames", json());
    if (!frames.is_array()) throw std::invalid_argument("frames must be an array");
    for (const auto& fr : frames) {
        if (!fr.is_array()) throw std::invalid_argument("each frame must be an array of detections");
        std::vector<Detection> dets;
        for (const auto& d : fr) {
            if (!d.is_object() || !d.contains("category") || !d["category"].is_string() || !d.contains("bbox"))
                throw std::invalid_argument("detection needs category and bbox");
            Detection det;
            det.category = parse_category(d["category"].get<std::string>());
            det.bbox = parse_box(d["bbox"]);
            if (d.contains("confidence")) det.confidence = number(d["confidence"], "confidence");
            if (!(det.confidence >= 0.0 && det.confidence <= 1.0)) throw std::invalid_argument("confidence out of range");
            if (d.contains("keypoints")) {
                if (!d["keypoints"].is_array()) throw std::invalid_argument("keypoints must be an array");
                for (const auto& k : d["keypoints"]) {
                    if (!k.is_object()) throw std::invalid_argument("keypoint must be an object");
                    Keypoint kp;
                    kp.name = k.value("name", "");
                    kp.x = number(k.value("x", json()), "keypoint x");
                    kp.y = number(k.value("y", json()), "keypoint y");
                    if (k.contains("confidence")) kp.confidence = number(k["confidence"], "keypoint confidence");
                    det.keypoints.push_back(std::move(kp));
                }
            }
            dets.push_back(std::move(det));
        }
        c.frames.push_back(std::move(dets));
    }
    return c;
}

std::string result_json(const ClipDetections& clip, const Verdict& v, const Assignment& a) {
    json j;
    j["clip_id"] = clip.clip_id;
    j["verdict"] = v.accept ? "accept" : "reject";
    if (!v.accept) j["reason"] = v.reason;
    json tracks = json::array();
    for (const auto& t : a.tracks) {
        json boxes = json::array();
        for (const auto& b : t.boxes) boxes.push_back(b ? json::array({b->x1, b->y1, b->x2, b->y2}) : json(nullptr));
        tracks.push_back({{"track_id", t.track_id}, {"category", "face"}, {"boxes", boxes}});
    }
    j["tracks"] = tracks;
    j["stats"] = {{"frames", clip.frames.size()},
                  {"m", a.m},
                  {"missing_count", v.missing_count},
                  {"min_face_area_frac", v.min_face_area_frac ? json(*v.min_face_area_frac) : json(nullptr)}};
    return j.dump();
}

CurateStats curate(std::istream& in, std::ostream& out, const CurationParams& params) {
    params.validate();
    CurateStats st;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ++st.records;
        try {
            const auto clip = parse_clip(line);
            const auto verdict = multi_view_filter(clip, params);
            Assignment a;
            if (!clip.frames.empty()) {
                std::vector<std::vector<Box>> faces;
                for (const auto& f : clip.frames) faces.push_back(face_boxes(f));
                a = assign_ids(faces, params.iou_match_threshold);
            }
            st.accepted += verdict.accept;
            out << result_json(clip, verdict, a) << '\n';
        } catch (const std::invalid_argument& e) {
            ++st.errors;
            json err{{"line", line_no}, {"error", e.what()}};
            out << err.dump() << '\n';
        }
    }
    return st;
}

}  // namespace csid::curate
