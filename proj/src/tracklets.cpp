#include "tracklets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ocf::trk {

void Tracklet::validate() const {
    require(!frames.empty(), Errc::invalid_argument, "tracklet has no frames");
    bool any_valid = false;
    for (size_t i = 0; i < frames.size(); ++i) {
        frames[i].proposal.validate();
        require(frames[i].points.frame == geom::Frame::world, Errc::invalid_argument,
                "tracklet points must be world-frame");
        if (i > 0)
            require(frames[i].timestamp > frames[i - 1].timestamp, Errc::invalid_argument,
                    "tracklet timestamps must be strictly increasing");
        any_valid = any_valid || frames[i].valid;
    }
    require(any_valid, Errc::invalid_argument, "tracklet has no valid frame");
}

void NoiseConfig::validate() const {
    require(sigma_center_frac >= 0 && sigma_scale >= 0 && sigma_yaw >= 0 && drift_sigma >= 0,
            Errc::invalid_argument, "noise sigmas must be non-negative");
    require(p_drop >= 0 && p_drop < 1, Errc::invalid_argument, "p_drop must be in [0, 1)");
}

Tracklet make_gt_tracklet(const sim::SimLog& log, int track_id, double margin) {
    log.actor_by_track(track_id);  // throws for unknown tracks
    Tracklet out;
    out.track_id = track_id;
    for (size_t f = 0; f < log.frames.size(); ++f) {
        const sim::FrameRecord& rec = log.frames[f];
        const sim::GtBox* gt = nullptr;
        for (const sim::GtBox& g : rec.gt_boxes)
            if (g.track_id == track_id) gt = &g;
        require(gt != nullptr, Errc::data_error, "log frame is missing a ground-truth box");

        TrackletFrame tf;
        tf.timestamp = double(f) * log.scene.frame_period;
        tf.proposal = gt->box;
        tf.points = geom::points_in_box(rec.cloud, gt->box, margin);
        tf.valid = true;
        tf.gt_track = track_id;
        tf.gt_box = gt->box;
        tf.source_frame = int(f);
        out.frames.push_back(std::move(tf));
    }
    out.validate();
    return out;
}

Tracklet perturb_tracklet(const sim::SimLog& log, const Tracklet& gt, const NoiseConfig& noise,
                          uint64_t seed) {
    noise.validate();
    gt.validate();
    Rng rng(mix_seed(seed, uint64_t(int64_t(gt.track_id))));

    Tracklet out;
    out.track_id = gt.track_id;
    geom::Vec3 drift;
    for (const TrackletFrame& fr : gt.frames) {
        // one draw per statement pins the stream layout
        geom::Vec3 dd, dc, ds;
        dd.x = rng.normal(0.0, noise.drift_sigma);
        dd.y = rng.normal(0.0, noise.drift_sigma);
        dd.z = rng.normal(0.0, noise.drift_sigma);
        drift += dd;
        dc.x = rng.normal(0.0, noise.sigma_center_frac * fr.proposal.dims.x);
        dc.y = rng.normal(0.0, noise.sigma_center_frac * fr.proposal.dims.y);
        dc.z = rng.normal(0.0, noise.sigma_center_frac * fr.proposal.dims.z);
        ds.x = std::exp(rng.normal(0.0, noise.sigma_scale));
        ds.y = std::exp(rng.normal(0.0, noise.sigma_scale));
        ds.z = std::exp(rng.normal(0.0, noise.sigma_scale));
        double dyaw = rng.normal(0.0, noise.sigma_yaw);
        bool dropped = rng.uniform() < noise.p_drop;

        TrackletFrame tf = fr;
        tf.proposal = geom::Box7(fr.proposal.center + dc + drift,
                                 {fr.proposal.dims.x * ds.x, fr.proposal.dims.y * ds.y,
                                  fr.proposal.dims.z * ds.z},
                                 fr.proposal.yaw + dyaw);
        tf.valid = fr.valid && !dropped;
        if (fr.source_frame >= 0) {
            require(size_t(fr.source_frame) < log.frames.size(), Errc::invalid_argument,
                    "tracklet refers to a frame outside the log");
            tf.points = geom::points_in_box(log.frames[size_t(fr.source_frame)].cloud,
                                            tf.proposal, kCropMargin);
        } else {
            tf.points = geom::PointCloud{};
        }
        out.frames.push_back(std::move(tf));
    }
    // A run of unlucky drops could invalidate everything; keep one frame so the
    // tracklet stays usable.
    bool any_valid = false;
    for (const TrackletFrame& fr : out.frames) any_valid = any_valid || fr.valid;
    if (!any_valid) out.frames.front().valid = true;
    out.validate();
    return out;
}

std::vector<Window> regularize_length(const Tracklet& t, int max_len) {
    require(max_len > 0, Errc::invalid_argument, "max_len must be positive");
    t.validate();

    std::vector<Window> out;
    size_t n = t.frames.size();
    for (size_t start = 0; start < n; start += size_t(max_len)) {
        size_t stop = std::min(n, start + size_t(max_len));
        size_t real = stop - start;
        size_t pad = size_t(max_len) - real;

        Window w;
        w.tracklet.track_id = t.track_id;
        const TrackletFrame& first = t.frames[start];
        double dt = real >= 2 ? t.frames[start + 1].timestamp - first.timestamp
                              : (n >= 2 ? t.frames[1].timestamp - t.frames[0].timestamp : 0.1);
        for (size_t i = 0; i < pad; ++i) {
            TrackletFrame tf;
            tf.timestamp = first.timestamp - double(pad - i) * dt;
            tf.proposal = first.proposal;
            tf.valid = false;
            tf.gt_track = -1;
            tf.source_frame = -1;
            w.tracklet.frames.push_back(std::move(tf));
            w.mask.push_back(0);
        }
        for (size_t i = start; i < stop; ++i) {
            w.tracklet.frames.push_back(t.frames[i]);
            w.mask.push_back(1);
        }
        out.push_back(std::move(w));
    }

    // A window cut from the middle of a track might contain only dropped
    // frames; such a window is still well-formed input for inference (the
    // encoder sees empties) but validate() requires one valid frame, so only
    // check windows that have one.
    for (Window& w : out) {
        bool any_valid = false;
        for (const TrackletFrame& fr : w.tracklet.frames) any_valid = any_valid || fr.valid;
        if (any_valid) w.tracklet.validate();
    }
    return out;
}

std::optional<Match> match_roi_to_gt(const Box7& proposal, const std::vector<Box7>& gts) {
    proposal.validate();
    Match best;
    for (size_t i = 0; i < gts.size(); ++i) {
        double iou = geom::box_iou_3d(proposal, gts[i]);
        if (iou > best.iou) best = Match{int(i), iou};
    }
    if (best.index < 0) return std::nullopt;
    return best;
}

namespace {

bool same_box(const Box7& a, const Box7& b) {
    return a.center.x == b.center.x && a.center.y == b.center.y && a.center.z == b.center.z &&
           a.dims.x == b.dims.x && a.dims.y == b.dims.y && a.dims.z == b.dims.z && a.yaw == b.yaw;
}

// m picks without replacement when the pool is large enough (partial
// Fisher-Yates), otherwise m uniform draws with replacement.
std::vector<size_t> draw_cells(std::vector<size_t> pool, size_t m, Rng& rng) {
    std::vector<size_t> out;
    out.reserve(m);
    if (pool.size() >= m) {
        for (size_t i = 0; i < m; ++i) {
            size_t j = i + size_t(rng.uniform_index(pool.size() - i));
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
    } else {
        for (size_t i = 0; i < m; ++i) out.push_back(pool[rng.uniform_index(pool.size())]);
    }
    return out;
}

}  // namespace

QueryBatch sample_queries(const grid::OccGrid& gt_grid, const Box7& roi, const Box7& gt_box,
                          int n, uint64_t seed) {
    require(n > 0, Errc::invalid_argument, "query count must be positive");
    roi.validate();
    gt_box.validate();

    const grid::GridSpec& spec = gt_grid.spec;
    std::vector<size_t> occ, fre;
    for (size_t i = 0; i < gt_grid.cells.size(); ++i) {
        if (gt_grid.cells[i] == uint8_t(grid::CellState::occupied)) occ.push_back(i);
        if (gt_grid.cells[i] == uint8_t(grid::CellState::free)) fre.push_back(i);
    }
    require(!occ.empty() || !fre.empty(), Errc::invalid_argument,
            "grid has no occupied or free cells to sample");

    size_t n_occ = size_t(n) / 2, n_free = size_t(n) - n_occ;
    if (occ.empty()) {
        n_occ = 0;
        n_free = size_t(n);
    } else if (fre.empty()) {
        n_occ = size_t(n);
        n_free = 0;
    }

    Rng rng(seed);
    std::vector<size_t> picked = draw_cells(occ, n_occ, rng);
    std::vector<size_t> picked_free = draw_cells(fre, n_free, rng);

    bool identical = same_box(roi, gt_box);
    geom::RigidTransform gt_to_roi =
        geom::compose(geom::box_to_local(roi), geom::box_to_world(gt_box));

    QueryBatch out;
    auto emit = [&](size_t cell, uint8_t label) {
        int i = int(cell % size_t(spec.nx));
        int j = int((cell / size_t(spec.nx)) % size_t(spec.ny));
        int k = int(cell / (size_t(spec.nx) * size_t(spec.ny)));
        geom::Vec3 c = spec.center(i, j, k);
        out.positions.push_back(identical ? c : gt_to_roi.apply(c));
        out.labels.push_back(label);
    };
    for (size_t cell : picked) emit(cell, 1);
    for (size_t cell : picked_free) emit(cell, 0);
    return out;
}

// ---- dataset directories -----------------------------------------------------

namespace {

void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
    const auto* b = reinterpret_cast<const uint8_t*>(&v);
    buf.insert(buf.end(), b, b + 4);
}

void put_f32(std::vector<uint8_t>& buf, float v) {
    const auto* b = reinterpret_cast<const uint8_t*>(&v);
    buf.insert(buf.end(), b, b + 4);
}

float take_f32(const std::vector<uint8_t>& buf, size_t& off) {
    float v;
    std::memcpy(&v, buf.data() + off, 4);
    off += 4;
    return v;
}

std::string blob_name(int track_id, size_t frame_index) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "t%04d_f%04zu.bin", track_id, frame_index);
    return buf;
}

json box_to_json(const geom::Box7& b) {
    return json{{"center", {b.center.x, b.center.y, b.center.z}},
                {"dims", {b.dims.x, b.dims.y, b.dims.z}},
                {"yaw", b.yaw}};
}

geom::Box7 box_from_json(const json& j) {
    const json& c = j.at("center");
    const json& d = j.at("dims");
    geom::Box7 b({c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()},
                 {d.at(0).get<double>(), d.at(1).get<double>(), d.at(2).get<double>()},
                 j.at("yaw").get<double>());
    b.validate();
    return b;
}

}  // namespace

void save_dataset(const std::string& dir, const TrackletDataset& ds) {
    ds.noise.validate();
    fs::create_directories(fs::path(dir) / "blobs");

    json tracks = json::array();
    for (const Tracklet& t : ds.tracklets) {
        t.validate();
        json frames = json::array();
        for (size_t fi = 0; fi < t.frames.size(); ++fi) {
            const TrackletFrame& fr = t.frames[fi];
            std::string blob = blob_name(t.track_id, fi);

            std::vector<uint8_t> buf;
            put_u32(buf, uint32_t(fr.points.size()));
            for (const geom::Vec3& p : fr.points.points) {
                put_f32(buf, float(p.x));
                put_f32(buf, float(p.y));
                put_f32(buf, float(p.z));
            }
            put_f32(buf, float(fr.proposal.center.x));
            put_f32(buf, float(fr.proposal.center.y));
            put_f32(buf, float(fr.proposal.center.z));
            put_f32(buf, float(fr.proposal.dims.x));
            put_f32(buf, float(fr.proposal.dims.y));
            put_f32(buf, float(fr.proposal.dims.z));
            put_f32(buf, float(fr.proposal.yaw));
            buf.push_back(fr.valid ? 1 : 0);
            io::write_file_atomic((fs::path(dir) / "blobs" / blob).string(), buf);

            json jf;
            jf["timestamp"] = fr.timestamp;
            jf["blob"] = blob;
            jf["gt_track"] = fr.gt_track;
            jf["gt_box"] = fr.gt_box ? box_to_json(*fr.gt_box) : json(nullptr);
            jf["source_frame"] = fr.source_frame;
            frames.push_back(jf);
        }
        tracks.push_back(json{{"track_id", t.track_id}, {"frames", frames}});
    }

    json index;
    index["noise"] = json{{"sigma_center_frac", ds.noise.sigma_center_frac},
                          {"sigma_scale", ds.noise.sigma_scale},
                          {"sigma_yaw", ds.noise.sigma_yaw},
                          {"p_drop", ds.noise.p_drop},
                          {"drift_sigma", ds.noise.drift_sigma}};
    index["seed"] = ds.seed;
    index["scene_hash"] = ds.scene_hash;
    index["tracks"] = tracks;
    io::write_json_atomic((fs::path(dir) / "index.json").string(), index);
}

TrackletDataset load_dataset(const std::string& dir) {
    json index = io::read_json((fs::path(dir) / "index.json").string());

    TrackletDataset ds;
    const json& jn = index.at("noise");
    ds.noise.sigma_center_frac = jn.at("sigma_center_frac").get<double>();
    ds.noise.sigma_scale = jn.at("sigma_scale").get<double>();
    ds.noise.sigma_yaw = jn.at("sigma_yaw").get<double>();
    ds.noise.p_drop = jn.at("p_drop").get<double>();
    ds.noise.drift_sigma = jn.at("drift_sigma").get<double>();
    ds.noise.validate();
    ds.seed = index.at("seed").get<uint64_t>();
    ds.scene_hash = index.at("scene_hash").get<std::string>();

    for (const json& jt : index.at("tracks")) {
        Tracklet t;
        t.track_id = jt.at("track_id").get<int>();
        for (const json& jf : jt.at("frames")) {
            std::string blob = jf.at("blob").get<std::string>();
            std::string path = (fs::path(dir) / "blobs" / blob).string();
            std::vector<uint8_t> buf = io::read_file(path);

            require(buf.size() >= 4, Errc::data_error, "truncated blob " + path);
            uint32_t n;
            std::memcpy(&n, buf.data(), 4);
            size_t expect = 4 + size_t(n) * 12 + 7 * 4 + 1;
            require(buf.size() == expect, Errc::data_error, "blob size mismatch in " + path);

            TrackletFrame fr;
            fr.timestamp = jf.at("timestamp").get<double>();
            fr.gt_track = jf.at("gt_track").get<int>();
            if (!jf.at("gt_box").is_null()) fr.gt_box = box_from_json(jf.at("gt_box"));
            fr.source_frame = jf.at("source_frame").get<int>();

            size_t off = 4;
            fr.points.frame = geom::Frame::world;
            fr.points.points.reserve(n);
            for (uint32_t i = 0; i < n; ++i) {
                double x = take_f32(buf, off), y = take_f32(buf, off), z = take_f32(buf, off);
                fr.points.points.emplace_back(x, y, z);
            }
            double cx = take_f32(buf, off), cy = take_f32(buf, off), cz = take_f32(buf, off);
            double dx = take_f32(buf, off), dy = take_f32(buf, off), dz = take_f32(buf, off);
            double yaw = take_f32(buf, off);
            fr.proposal = geom::Box7({cx, cy, cz}, {dx, dy, dz}, yaw);
            fr.proposal.validate();
            fr.valid = buf[off] != 0;
            t.frames.push_back(std::move(fr));
        }
        t.validate();
        ds.tracklets.push_back(std::move(t));
    }
    return ds;
}

}  // namespace ocf::trk
