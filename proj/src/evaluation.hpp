#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "grid.hpp"

namespace ocf::eval {

using geom::Box7;
using grid::OccGrid;

// Outcome of comparing one predicted RoI-frame grid against one ground-truth
// object grid at one timestamp.
struct OccEvalRecord {
    int track_id = 0;
    int frame_id = 0;
    double iou = 0.0;
    int64_t intersection = 0;
    int64_t union_count = 0;
    int64_t ignored_unobserved = 0;  // GT voxels skipped entirely
    int64_t missed_as_free = 0;      // GT voxels landing outside the RoI grid
};

// Two-step IoU: every GT voxel center is carried into the RoI frame; centers
// inside the predicted grid read the containing voxel's state, centers that
// miss the grid count as free, and GT-unobserved voxels are skipped. Returns
// nullopt when the boxes do not overlap at all — such pairs are excluded from
// evaluation rather than scored.
std::optional<OccEvalRecord> occupancy_iou(const OccGrid& pred, const Box7& roi,
                                           const OccGrid& gt, const Box7& gt_box,
                                           int track_id = 0, int frame_id = 0);

struct MiouSummary {
    double iou = 0.0;         // pooled over all intersection/union counts
    double miou_box = 0.0;    // unweighted mean over records
    double miou_track = 0.0;  // mean over per-track mean IoUs
    int64_t n_records = 0;
    int64_t n_tracks = 0;
};

// Errors on an empty record list.
MiouSummary aggregate_miou(const std::vector<OccEvalRecord>& records);

// ---------------------------------------------------------------- detection

struct DetBox {
    int frame_id = 0;
    Box7 box;
    double score = 0.0;  // in [0, 1]
};

struct GtBoxRecord {
    int frame_id = 0;
    Box7 box;
    int n_points = 0;    // sensor returns inside the box at this frame
    double range = 0.0;  // distance from the sensor to the box center, meters
};

// Difficulty splits by GT point count: L1 has more than 5 points, L2 has 1-5.
// (This follows the stated breakdown rather than a cumulative convention;
// boxes with zero points are not evaluable in any split.)
enum class Difficulty { all, l1, l2 };

struct RangeBin {
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();  // half-open [lo, hi)
};

// The standard report slices: overall plus near/mid/far.
const std::vector<RangeBin>& standard_range_bins();

// Average precision over the 101-point interpolated precision-recall curve.
// Detections are greedily matched per frame in score order to the unmatched
// GT of highest 3-D IoU, requiring IoU >= iou_thr. The difficulty and range
// filters select GTs; a detection matched to an out-of-slice GT is ignored in
// that slice, while unmatched detections count as false positives in every
// slice. With heading_weighted, each true positive contributes
// 1 - |wrapped yaw error| / pi instead of 1 (APH).
double detection_ap(const std::vector<DetBox>& dets, const std::vector<GtBoxRecord>& gts,
                    double iou_thr, bool heading_weighted, Difficulty difficulty,
                    const RangeBin& bin);

struct ApRow {
    std::string difficulty;  // "ALL" | "L1" | "L2"
    RangeBin bin;
    double ap = 0.0;
    double aph = 0.0;
    int64_t n_gt = 0;  // GTs in this slice
};

// Full difficulty x range-bin table at one IoU threshold.
std::vector<ApRow> detection_table(const std::vector<DetBox>& dets,
                                   const std::vector<GtBoxRecord>& gts, double iou_thr);

constexpr double kDefaultIouThreshold = 0.7;

}  // namespace ocf::eval
