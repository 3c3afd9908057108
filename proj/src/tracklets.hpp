#pragma once

#include <optional>

#include "annotation.hpp"

namespace ocf::trk {

using geom::Box7;
using geom::PointCloud;
using geom::Vec3;

// One RoI: the (possibly noisy) proposal box and its cropped points at one
// timestamp, plus the matched ground truth when known.
struct TrackletFrame {
    double timestamp = 0.0;
    PointCloud points;  // world frame, cropped to proposal + margin
    Box7 proposal;
    bool valid = true;
    int gt_track = -1;  // -1 when unmatched
    std::optional<Box7> gt_box;
    int source_frame = -1;  // frame index in the originating log, -1 for padding
};

struct Tracklet {
    int track_id = 0;
    std::vector<TrackletFrame> frames;

    void validate() const;  // timestamps strictly increasing, >=1 valid frame
};

// Per-frame box noise plus an optional per-track random-walk drift.
struct NoiseConfig {
    double sigma_center_frac = 0.1;        // center sigma as a fraction of each dim
    double sigma_scale = 0.05;             // dims multiply by exp(N(0, sigma))
    double sigma_yaw = 0.034906585039886591;  // 2 degrees
    double p_drop = 0.05;                  // per-frame probability of a dropped frame
    double drift_sigma = 0.0;              // random-walk center drift per frame (m)

    void validate() const;
};

// Crop margin applied when gathering per-frame points around a proposal, so
// the encoder keeps context when the center drifts.
constexpr double kCropMargin = 1.0;

// Clean tracklet straight from the log: proposals equal the GT boxes.
Tracklet make_gt_tracklet(const sim::SimLog& log, int track_id, double margin = kCropMargin);

// Noisy copy: per-frame independent center/size/yaw noise, optional drift,
// optional frame drops. Points are re-cropped from the log around the noisy
// proposals. Deterministic per seed.
Tracklet perturb_tracklet(const sim::SimLog& log, const Tracklet& gt, const NoiseConfig& noise,
                          uint64_t seed);

// Fixed-length windows: long tracks are cut into consecutive chunks, short
// ones are front-padded with invalid frames. mask[i] is 1 for real frames.
struct Window {
    Tracklet tracklet;
    std::vector<uint8_t> mask;
};
std::vector<Window> regularize_length(const Tracklet& t, int max_len);

// Highest-IoU ground truth for a proposal, if any overlaps it.
struct Match {
    int index = -1;  // position in the gts list
    double iou = 0.0;
};
std::optional<Match> match_roi_to_gt(const Box7& proposal, const std::vector<Box7>& gts);

// Balanced occupancy queries drawn from a GT grid and expressed in the RoI
// frame via the relative pose.
struct QueryBatch {
    std::vector<Vec3> positions;  // RoI-local
    std::vector<uint8_t> labels;  // 1 occupied, 0 free
};
QueryBatch sample_queries(const grid::OccGrid& gt_grid, const Box7& roi, const Box7& gt_box,
                          int n, uint64_t seed);

// Tracklet dataset directory: index.json plus one binary blob per frame.
struct TrackletDataset {
    NoiseConfig noise;
    uint64_t seed = 0;
    std::string scene_hash;
    std::vector<Tracklet> tracklets;
};
void save_dataset(const std::string& dir, const TrackletDataset& ds);
TrackletDataset load_dataset(const std::string& dir);

}  // namespace ocf::trk
