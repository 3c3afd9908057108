#include "evaluation.hpp"

#include <algorithm>
#include <cstring>
#include <map>

namespace ocf::eval {

using geom::RigidTransform;
using geom::Vec3;
using grid::CellState;

namespace {

bool same_box(const Box7& a, const Box7& b) {
    return std::memcmp(&a, &b, sizeof(Box7)) == 0;
}

}  // namespace

std::optional<OccEvalRecord> occupancy_iou(const OccGrid& pred, const Box7& roi,
                                           const OccGrid& gt, const Box7& gt_box,
                                           int track_id, int frame_id) {
    require(pred.spec.cell_count() > 0 && gt.spec.cell_count() > 0, Errc::invalid_argument,
            "occupancy_iou needs non-empty grids");
    roi.validate();
    gt_box.validate();
    if (geom::box_iou_3d(roi, gt_box) <= 0.0) return std::nullopt;

    // Bitwise-equal boxes skip the world round-trip so the identity case is
    // exact; otherwise GT centers ride gt->world->roi.
    const bool identity = same_box(roi, gt_box);
    RigidTransform gt_to_roi;
    if (!identity) gt_to_roi = geom::compose(geom::box_to_local(roi), geom::box_to_world(gt_box));

    OccEvalRecord rec;
    rec.track_id = track_id;
    rec.frame_id = frame_id;
    for (int k = 0; k < gt.spec.nz; ++k)
        for (int j = 0; j < gt.spec.ny; ++j)
            for (int i = 0; i < gt.spec.nx; ++i) {
                CellState s = gt.at(i, j, k);
                if (s == CellState::unobserved) {
                    ++rec.ignored_unobserved;
                    continue;
                }
                bool gt_occ = s == CellState::occupied;
                Vec3 c = gt.spec.center(i, j, k);
                if (!identity) c = gt_to_roi.apply(c);
                bool pred_occ = false;
                int pi = 0, pj = 0, pk = 0;
                if (pred.spec.locate(c, pi, pj, pk)) {
                    pred_occ = pred.at(pi, pj, pk) == CellState::occupied;
                } else {
                    ++rec.missed_as_free;
                }
                if (gt_occ && pred_occ) ++rec.intersection;
                if (gt_occ || pred_occ) ++rec.union_count;
            }
    rec.iou = rec.union_count > 0 ? double(rec.intersection) / double(rec.union_count) : 1.0;
    return rec;
}

MiouSummary aggregate_miou(const std::vector<OccEvalRecord>& records) {
    require(!records.empty(), Errc::invalid_argument, "aggregate_miou needs at least one record");
    MiouSummary s;
    s.n_records = int64_t(records.size());
    int64_t inter = 0, uni = 0;
    double box_sum = 0.0;
    std::map<int, std::pair<double, int64_t>> per_track;  // track -> (iou sum, n)
    for (const auto& r : records) {
        inter += r.intersection;
        uni += r.union_count;
        box_sum += r.iou;
        auto& t = per_track[r.track_id];
        t.first += r.iou;
        t.second += 1;
    }
    s.iou = uni > 0 ? double(inter) / double(uni) : 1.0;
    s.miou_box = box_sum / double(records.size());
    double track_sum = 0.0;
    for (const auto& [id, t] : per_track) track_sum += t.first / double(t.second);
    s.n_tracks = int64_t(per_track.size());
    s.miou_track = track_sum / double(per_track.size());
    return s;
}

// ---------------------------------------------------------------- detection

namespace {

bool in_difficulty(const GtBoxRecord& g, Difficulty d) {
    switch (d) {
        case Difficulty::all: return g.n_points >= 1;
        case Difficulty::l1: return g.n_points > 5;
        case Difficulty::l2: return g.n_points >= 1 && g.n_points <= 5;
    }
    return false;
}

bool in_bin(const GtBoxRecord& g, const RangeBin& b) { return g.range >= b.lo && g.range < b.hi; }

double heading_weight(double det_yaw, double gt_yaw) {
    double d = std::abs(geom::wrap_angle(det_yaw - gt_yaw));  // in [0, pi]
    double w = 1.0 - d / 3.14159265358979323846;
    return std::clamp(w, 0.0, 1.0);
}

// One scored prediction after matching: matched_gt < 0 means false positive
// everywhere; otherwise the slice of the matched GT decides TP vs ignored.
struct MatchedDet {
    double score = 0.0;
    int matched_gt = -1;  // index into gts
    double hweight = 0.0;
};

// Greedy score-descending matching within each frame; ties in score keep
// input order, ties in IoU take the lowest GT index.
std::vector<MatchedDet> match_detections(const std::vector<DetBox>& dets,
                                         const std::vector<GtBoxRecord>& gts, double iou_thr) {
    std::map<int, std::vector<size_t>> gts_by_frame;
    for (size_t g = 0; g < gts.size(); ++g) gts_by_frame[gts[g].frame_id].push_back(g);

    std::vector<size_t> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });

    std::vector<char> gt_taken(gts.size(), 0);
    std::vector<MatchedDet> out(dets.size());
    for (size_t oi = 0; oi < order.size(); ++oi) {
        size_t d = order[oi];
        out[d].score = dets[d].score;
        auto it = gts_by_frame.find(dets[d].frame_id);
        if (it == gts_by_frame.end()) continue;
        double best_iou = 0.0;
        int best_g = -1;
        for (size_t g : it->second) {
            if (gt_taken[g]) continue;
            double iou = geom::box_iou_3d(dets[d].box, gts[g].box);
            if (iou > best_iou) {
                best_iou = iou;
                best_g = int(g);
            }
        }
        if (best_g >= 0 && best_iou >= iou_thr) {
            gt_taken[size_t(best_g)] = 1;
            out[d].matched_gt = best_g;
            out[d].hweight = heading_weight(dets[d].box.yaw, gts[size_t(best_g)].box.yaw);
        }
    }
    return out;
}

}  // namespace

double detection_ap(const std::vector<DetBox>& dets, const std::vector<GtBoxRecord>& gts,
                    double iou_thr, bool heading_weighted, Difficulty difficulty,
                    const RangeBin& bin) {
    require(iou_thr > 0.0 && iou_thr < 1.0, Errc::invalid_argument,
            "IoU threshold must be in (0, 1)");
    for (const auto& d : dets)
        require(d.score >= 0.0 && d.score <= 1.0, Errc::invalid_argument,
                "detection scores must be in [0, 1]");

    int64_t n_gt = 0;
    for (const auto& g : gts)
        if (in_difficulty(g, difficulty) && in_bin(g, bin)) ++n_gt;
    if (n_gt == 0) return 0.0;

    std::vector<MatchedDet> matched = match_detections(dets, gts, iou_thr);

    // Keep TPs whose GT is in this slice plus all unmatched detections; drop
    // detections attributed to out-of-slice GTs.
    struct Item {
        double score;
        bool tp;
        double hweight;
    };
    std::vector<Item> items;
    items.reserve(matched.size());
    for (const auto& m : matched) {
        if (m.matched_gt >= 0) {
            const GtBoxRecord& g = gts[size_t(m.matched_gt)];
            if (!in_difficulty(g, difficulty) || !in_bin(g, bin)) continue;
            items.push_back({m.score, true, m.hweight});
        } else {
            items.push_back({m.score, false, 0.0});
        }
    }
    std::stable_sort(items.begin(), items.end(),
                     [](const Item& a, const Item& b) { return a.score > b.score; });

    // One operating point per distinct score so tied detections enter the
    // curve together.
    std::vector<std::pair<double, double>> points;  // (recall, precision)
    int64_t n_pred = 0;
    double tp_mass = 0.0;  // TP count, or heading-weight sum for APH
    size_t i = 0;
    while (i < items.size()) {
        size_t j = i;
        while (j < items.size() && items[j].score == items[i].score) {
            ++n_pred;
            if (items[j].tp) tp_mass += heading_weighted ? items[j].hweight : 1.0;
            ++j;
        }
        points.emplace_back(tp_mass / double(n_gt), tp_mass / double(n_pred));
        i = j;
    }

    double sum = 0.0;
    for (int r = 0; r <= 100; ++r) {
        double thr = double(r) / 100.0;
        double best = 0.0;
        for (const auto& [rec, prec] : points)
            if (rec >= thr) best = std::max(best, prec);
        sum += best;
    }
    return sum / 101.0;
}

const std::vector<RangeBin>& standard_range_bins() {
    static const std::vector<RangeBin> bins = {
        {0.0, std::numeric_limits<double>::infinity()},
        {0.0, 30.0},
        {30.0, 50.0},
        {50.0, std::numeric_limits<double>::infinity()},
    };
    return bins;
}

std::vector<ApRow> detection_table(const std::vector<DetBox>& dets,
                                   const std::vector<GtBoxRecord>& gts, double iou_thr) {
    const std::pair<Difficulty, std::string> diffs[] = {
        {Difficulty::all, "ALL"}, {Difficulty::l1, "L1"}, {Difficulty::l2, "L2"}};
    std::vector<ApRow> rows;
    for (const auto& [diff, name] : diffs)
        for (const RangeBin& bin : standard_range_bins()) {
            ApRow row;
            row.difficulty = name;
            row.bin = bin;
            row.ap = detection_ap(dets, gts, iou_thr, false, diff, bin);
            row.aph = detection_ap(dets, gts, iou_thr, true, diff, bin);
            for (const auto& g : gts)
                if (in_difficulty(g, diff) && in_bin(g, bin)) ++row.n_gt;
            rows.push_back(row);
        }
    return rows;
}

}  // namespace ocf::eval
