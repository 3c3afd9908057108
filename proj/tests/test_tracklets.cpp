#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "io.hpp"
#include "test_util.hpp"
#include "tracklets.hpp"

using namespace ocf;
using testutil::TempDir;

namespace {

// Small but non-trivial log shared by most cases here.
const sim::SimLog& fixture_log() {
    static sim::SimLog log = [] {
        sim::SceneGenConfig cfg;
        cfg.n_actors = 3;
        cfg.frames = 8;
        cfg.seed = 42;
        cfg.min_radius = 8.0;
        cfg.max_radius = 16.0;
        sim::SensorModel sm;
        sm.rows = 24;
        sm.cols = 180;
        sm.el_min = -0.35;
        sm.el_max = 0.17;
        sm.max_range = 75.0;
        return sim::simulate(sim::generate_scene(cfg), sm, 7);
    }();
    return log;
}

trk::NoiseConfig zero_noise() {
    trk::NoiseConfig n;
    n.sigma_center_frac = 0.0;
    n.sigma_scale = 0.0;
    n.sigma_yaw = 0.0;
    n.p_drop = 0.0;
    n.drift_sigma = 0.0;
    return n;
}

bool same_box(const geom::Box7& a, const geom::Box7& b) {
    return a.center.x == b.center.x && a.center.y == b.center.y && a.center.z == b.center.z &&
           a.dims.x == b.dims.x && a.dims.y == b.dims.y && a.dims.z == b.dims.z && a.yaw == b.yaw;
}

}  // namespace

TEST_CASE("gt tracklets mirror the log") {
    const sim::SimLog& log = fixture_log();
    int track = log.scene.actors[1].track_id;
    trk::Tracklet t = trk::make_gt_tracklet(log, track);

    REQUIRE(t.frames.size() == log.frames.size());
    size_t total_points = 0;
    for (size_t f = 0; f < t.frames.size(); ++f) {
        const trk::TrackletFrame& fr = t.frames[f];
        CHECK(fr.timestamp == double(f) * log.scene.frame_period);
        CHECK(fr.valid);
        CHECK(fr.gt_track == track);
        CHECK(fr.source_frame == int(f));
        REQUIRE(fr.gt_box.has_value());
        CHECK(same_box(fr.proposal, *fr.gt_box));
        CHECK(same_box(fr.proposal, log.scene.actors[1].poses[f]));

        // every cropped point is inside proposal + margin (independent trig)
        for (const geom::Vec3& p : fr.points.points)
            CHECK(testutil::point_in_yawed_box(p, fr.proposal, trk::kCropMargin));
        // and the crop found everything the oracle finds
        size_t oracle = 0;
        for (const geom::Vec3& p : log.frames[f].cloud.points)
            if (testutil::point_in_yawed_box(p, fr.proposal, trk::kCropMargin)) ++oracle;
        CHECK(fr.points.size() == oracle);
        total_points += fr.points.size();
    }
    CHECK(total_points > 0);

    CHECK_THROWS_AS(trk::make_gt_tracklet(log, 9999), Error);
}

TEST_CASE("zero noise perturbation is the identity") {
    const sim::SimLog& log = fixture_log();
    trk::Tracklet gt = trk::make_gt_tracklet(log, log.scene.actors[0].track_id);
    trk::Tracklet p = trk::perturb_tracklet(log, gt, zero_noise(), 123);

    REQUIRE(p.frames.size() == gt.frames.size());
    for (size_t f = 0; f < gt.frames.size(); ++f) {
        CHECK(same_box(p.frames[f].proposal, gt.frames[f].proposal));
        CHECK(p.frames[f].valid);
        REQUIRE(p.frames[f].points.size() == gt.frames[f].points.size());
        for (size_t i = 0; i < p.frames[f].points.size(); ++i) {
            CHECK(p.frames[f].points.points[i].x == gt.frames[f].points.points[i].x);
            CHECK(p.frames[f].points.points[i].y == gt.frames[f].points.points[i].y);
            CHECK(p.frames[f].points.points[i].z == gt.frames[f].points.points[i].z);
        }
    }
}

TEST_CASE("perturbation is deterministic per seed and re-crops points") {
    const sim::SimLog& log = fixture_log();
    trk::Tracklet gt = trk::make_gt_tracklet(log, log.scene.actors[2].track_id);
    trk::NoiseConfig noise;  // defaults

    trk::Tracklet a = trk::perturb_tracklet(log, gt, noise, 5);
    trk::Tracklet b = trk::perturb_tracklet(log, gt, noise, 5);
    trk::Tracklet c = trk::perturb_tracklet(log, gt, noise, 6);

    bool any_box_differs = false;
    for (size_t f = 0; f < gt.frames.size(); ++f) {
        CHECK(same_box(a.frames[f].proposal, b.frames[f].proposal));
        CHECK(a.frames[f].valid == b.frames[f].valid);
        any_box_differs = any_box_differs || !same_box(a.frames[f].proposal, c.frames[f].proposal);

        // noise moved the box, so it is not the gt box
        CHECK_FALSE(same_box(a.frames[f].proposal, gt.frames[f].proposal));
        // re-crop: points live inside the noisy box, not necessarily the gt one
        for (const geom::Vec3& p : a.frames[f].points.points)
            CHECK(testutil::point_in_yawed_box(p, a.frames[f].proposal, trk::kCropMargin));
        // gt annotations ride along untouched
        REQUIRE(a.frames[f].gt_box.has_value());
        CHECK(same_box(*a.frames[f].gt_box, gt.frames[f].proposal));
        CHECK(a.frames[f].gt_track == gt.track_id);
    }
    CHECK(any_box_differs);
}

TEST_CASE("yaw noise has the configured standard deviation") {
    // one-frame log keeps the 1e4 perturbations cheap
    sim::SceneGenConfig cfg;
    cfg.n_actors = 1;
    cfg.frames = 1;
    cfg.seed = 3;
    sim::SensorModel sm;
    sm.rows = 4;
    sm.cols = 24;
    sm.el_min = -0.3;
    sm.el_max = 0.1;
    sm.max_range = 75.0;
    sim::SimLog log = sim::simulate(sim::generate_scene(cfg), sm, 1);
    trk::Tracklet gt = trk::make_gt_tracklet(log, log.scene.actors[0].track_id);

    trk::NoiseConfig noise;  // sigma_yaw defaults to 2 degrees
    const int n = 10000;
    double sum = 0.0, sum2 = 0.0;
    for (int s = 0; s < n; ++s) {
        trk::Tracklet p = trk::perturb_tracklet(log, gt, noise, uint64_t(s));
        double d = geom::wrap_angle(p.frames[0].proposal.yaw - gt.frames[0].proposal.yaw);
        sum += d;
        sum2 += d * d;
    }
    double mean = sum / n;
    double sd = std::sqrt(sum2 / n - mean * mean);
    double target = 2.0 * 3.14159265358979323846 / 180.0;
    CHECK(std::abs(sd / target - 1.0) < 0.05);
    CHECK(std::abs(mean) < 3.0 * target / std::sqrt(double(n)));
}

TEST_CASE("drift accumulates along the track") {
    const sim::SimLog& log = fixture_log();
    trk::Tracklet gt = trk::make_gt_tracklet(log, log.scene.actors[0].track_id);
    trk::NoiseConfig noise = zero_noise();
    noise.drift_sigma = 0.05;

    double msd_first = 0.0, msd_last = 0.0;
    const int n = 300;
    for (int s = 0; s < n; ++s) {
        trk::Tracklet p = trk::perturb_tracklet(log, gt, noise, uint64_t(s));
        geom::Vec3 e0 = p.frames.front().proposal.center - gt.frames.front().proposal.center;
        geom::Vec3 e7 = p.frames.back().proposal.center - gt.frames.back().proposal.center;
        msd_first += e0.dot(e0);
        msd_last += e7.dot(e7);
    }
    // random walk: expected msd grows linearly with the frame index (8x here)
    CHECK(msd_last > 3.0 * msd_first);
    CHECK(msd_first > 0.0);
}

TEST_CASE("frame drops follow p_drop") {
    const sim::SimLog& log = fixture_log();
    trk::Tracklet gt = trk::make_gt_tracklet(log, log.scene.actors[1].track_id);

    trk::NoiseConfig none = zero_noise();
    trk::Tracklet clean = trk::perturb_tracklet(log, gt, none, 1);
    for (const trk::TrackletFrame& fr : clean.frames) CHECK(fr.valid);

    trk::NoiseConfig half = zero_noise();
    half.p_drop = 0.5;
    int dropped = 0, total = 0;
    for (int s = 0; s < 400; ++s) {
        trk::Tracklet p = trk::perturb_tracklet(log, gt, half, uint64_t(s));
        for (const trk::TrackletFrame& fr : p.frames) {
            ++total;
            if (!fr.valid) ++dropped;
        }
    }
    double frac = double(dropped) / total;
    CHECK(frac > 0.45);
    CHECK(frac < 0.55);
}

TEST_CASE("noise configs are validated") {
    const sim::SimLog& log = fixture_log();
    trk::Tracklet gt = trk::make_gt_tracklet(log, log.scene.actors[0].track_id);

    trk::NoiseConfig bad = zero_noise();
    bad.sigma_yaw = -0.1;
    CHECK_THROWS_AS(trk::perturb_tracklet(log, gt, bad, 1), Error);

    bad = zero_noise();
    bad.p_drop = 1.0;
    CHECK_THROWS_AS(trk::perturb_tracklet(log, gt, bad, 1), Error);

    bad = zero_noise();
    bad.sigma_center_frac = -0.01;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("short tracklets are front-padded to the window length") {
    const sim::SimLog& log = fixture_log();
    trk::Tracklet t = trk::make_gt_tracklet(log, log.scene.actors[0].track_id);
    t.frames.resize(5);  // length 5

    std::vector<trk::Window> ws = trk::regularize_length(t, 8);
    REQUIRE(ws.size() == 1);
    const trk::Window& w = ws[0];
    CHECK(w.mask == std::vector<uint8_t>{0, 0, 0, 1, 1, 1, 1, 1});
    REQUIRE(w.tracklet.frames.size() == 8);
    for (size_t i = 0; i + 1 < 8; ++i)
        CHECK(w.tracklet.frames[i].timestamp < w.tracklet.frames[i + 1].timestamp);
    for (size_t i = 0; i < 3; ++i) {
        const trk::TrackletFrame& pad = w.tracklet.frames[i];
        CHECK_FALSE(pad.valid);
        CHECK(pad.source_frame == -1);
        CHECK(pad.gt_track == -1);
        CHECK_FALSE(pad.gt_box.has_value());
        CHECK(pad.points.empty());
        CHECK(same_box(pad.proposal, t.frames[0].proposal));
    }
    for (size_t i = 3; i < 8; ++i) {
        CHECK(w.tracklet.frames[i].valid);
        CHECK(w.tracklet.frames[i].source_frame == t.frames[i - 3].source_frame);
    }
}

TEST_CASE("long tracklets are chunked with every frame used once") {
    // synthetic 70-frame tracklet; only timestamps and ids matter here
    trk::Tracklet t;
    t.track_id = 4;
    for (int f = 0; f < 70; ++f) {
        trk::TrackletFrame fr;
        fr.timestamp = 0.1 * f;
        fr.proposal = geom::Box7({0, 0, 0}, {4, 2, 2}, 0.3);
        fr.valid = true;
        fr.source_frame = f;
        t.frames.push_back(fr);
    }

    std::vector<trk::Window> ws = trk::regularize_length(t, 32);
    REQUIRE(ws.size() == 3);
    std::multiset<int> seen;
    for (const trk::Window& w : ws) {
        REQUIRE(w.tracklet.frames.size() == 32);
        REQUIRE(w.mask.size() == 32);
        // zeros form a prefix
        size_t first_real = 32;
        for (size_t i = 0; i < 32; ++i)
            if (w.mask[i]) {
                first_real = i;
                break;
            }
        for (size_t i = 0; i < 32; ++i) {
            CHECK(w.mask[i] == (i >= first_real ? 1 : 0));
            if (w.mask[i]) seen.insert(w.tracklet.frames[i].source_frame);
            for (size_t j = i + 1; j < 32; ++j)
                CHECK(w.tracklet.frames[i].timestamp < w.tracklet.frames[j].timestamp);
        }
    }
    CHECK(seen.size() == 70);
    for (int f = 0; f < 70; ++f) CHECK(seen.count(f) == 1);

    // property holds over many lengths (the source tracklet has 70 frames)
    for (int len : {1, 2, 31, 32, 33, 64, 65, 70}) {
        trk::Tracklet s = t;
        s.frames.resize(size_t(len));
        std::vector<trk::Window> parts = trk::regularize_length(s, 32);
        CHECK(parts.size() == size_t((len + 31) / 32));
        std::set<int> ids;
        size_t real = 0;
        for (const trk::Window& w : parts)
            for (size_t i = 0; i < w.mask.size(); ++i)
                if (w.mask[i]) {
                    ++real;
                    ids.insert(w.tracklet.frames[i].source_frame);
                }
        CHECK(real == size_t(len));
        CHECK(ids.size() == size_t(len));
    }
}

TEST_CASE("roi matching picks the highest-iou ground truth") {
    geom::Box7 a({0, 0, 0}, {4, 2, 2}, 0.0);
    geom::Box7 b({10, 0, 0}, {4, 2, 2}, 0.0);
    geom::Box7 c({0.5, 0, 0}, {4, 2, 2}, 0.0);
    std::vector<geom::Box7> gts = {b, a};

    auto m = trk::match_roi_to_gt(c, gts);
    REQUIRE(m.has_value());
    CHECK(m->index == 1);
    CHECK(m->iou == geom::box_iou_3d(c, a));

    geom::Box7 far({100, 100, 0}, {4, 2, 2}, 0.0);
    CHECK_FALSE(trk::match_roi_to_gt(far, gts).has_value());
    CHECK_FALSE(trk::match_roi_to_gt(far, {}).has_value());

    // agreement with an argmax done in the test over random pairs
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        geom::Box7 roi = testutil::random_box(rng, 3.0);
        std::vector<geom::Box7> pool;
        for (int i = 0; i < 5; ++i) pool.push_back(testutil::random_box(rng, 3.0));
        int best = -1;
        double best_iou = 0.0;
        for (int i = 0; i < 5; ++i) {
            double iou = geom::box_iou_3d(roi, pool[i]);
            if (iou > best_iou) {
                best_iou = iou;
                best = i;
            }
        }
        auto got = trk::match_roi_to_gt(roi, pool);
        if (best < 0) {
            CHECK_FALSE(got.has_value());
        } else {
            REQUIRE(got.has_value());
            CHECK(got->index == best);
            CHECK(got->iou == best_iou);
        }
    }
}

TEST_CASE("query sampling balances classes and skips unobserved space") {
    grid::GridSpec spec({1.6, 0.8, 0.8}, 0.2);  // 8*4*4 = 128 cells
    grid::OccGrid g(spec);
    // 40 occupied, 60 free, 28 unobserved
    for (size_t i = 0; i < g.cells.size(); ++i)
        g.cells[i] = i < 40 ? uint8_t(grid::CellState::occupied)
                            : (i < 100 ? uint8_t(grid::CellState::free)
                                       : uint8_t(grid::CellState::unobserved));
    geom::Box7 box({0, 0, 0}, {1.6, 0.8, 0.8}, 0.0);

    trk::QueryBatch q = trk::sample_queries(g, box, box, 1024, 9);
    REQUIRE(q.positions.size() == 1024);
    REQUIRE(q.labels.size() == 1024);
    CHECK(std::count(q.labels.begin(), q.labels.end(), 1) == 512);
    CHECK(std::count(q.labels.begin(), q.labels.end(), 0) == 512);

    for (size_t i = 0; i < q.positions.size(); ++i) {
        int a, b, c;
        REQUIRE(g.spec.locate(q.positions[i], a, b, c));
        grid::CellState s = g.at(a, b, c);
        CHECK(s != grid::CellState::unobserved);
        CHECK(uint8_t(s) == (q.labels[i] ? 1 : 0));
        // roi == gt: positions are exact voxel centers
        geom::Vec3 center = g.spec.center(a, b, c);
        CHECK(q.positions[i].x == center.x);
        CHECK(q.positions[i].y == center.y);
        CHECK(q.positions[i].z == center.z);
    }

    // enough of both classes: draws are distinct cells per class
    std::set<std::array<int, 3>> occ_cells, free_cells;
    grid::OccGrid big(grid::GridSpec({3.2, 3.2, 1.6}, 0.2));  // 16*16*8 = 2048 cells
    for (size_t i = 0; i < big.cells.size(); ++i)
        big.cells[i] = i % 2 ? uint8_t(grid::CellState::occupied) : uint8_t(grid::CellState::free);
    geom::Box7 big_box({0, 0, 0}, {3.2, 3.2, 1.6}, 0.0);
    trk::QueryBatch qb = trk::sample_queries(big, big_box, big_box, 1024, 10);
    for (size_t i = 0; i < qb.positions.size(); ++i) {
        int a, b, c;
        REQUIRE(big.spec.locate(qb.positions[i], a, b, c));
        (qb.labels[i] ? occ_cells : free_cells).insert({a, b, c});
    }
    CHECK(occ_cells.size() == 512);
    CHECK(free_cells.size() == 512);
}

TEST_CASE("scarce classes are sampled with replacement") {
    grid::GridSpec spec({0.8, 0.8, 0.4}, 0.2);  // 4*4*2 = 32 cells
    grid::OccGrid g(spec);
    g.cells[3] = uint8_t(grid::CellState::occupied);
    g.cells[17] = uint8_t(grid::CellState::occupied);
    g.cells[30] = uint8_t(grid::CellState::occupied);
    geom::Box7 box({0, 0, 0}, {0.8, 0.8, 0.4}, 0.0);

    trk::QueryBatch q = trk::sample_queries(g, box, box, 8, 4);
    REQUIRE(q.labels.size() == 8);
    // occupied half comes from just three cells, so values repeat but stay valid
    std::set<size_t> allowed = {3, 17, 30};
    for (int i = 0; i < 4; ++i) {
        CHECK(q.labels[size_t(i)] == 1);
        int a, b, c;
        REQUIRE(g.spec.locate(q.positions[size_t(i)], a, b, c));
        CHECK(allowed.count(g.spec.index(a, b, c)) == 1);
    }
    // free half is drawn without replacement
    std::set<size_t> free_cells;
    for (int i = 4; i < 8; ++i) {
        CHECK(q.labels[size_t(i)] == 0);
        int a, b, c;
        REQUIRE(g.spec.locate(q.positions[size_t(i)], a, b, c));
        free_cells.insert(g.spec.index(a, b, c));
    }
    CHECK(free_cells.size() == 4);

    // one empty class: the whole batch comes from the other
    grid::OccGrid all_occ(spec, grid::CellState::occupied);
    trk::QueryBatch qo = trk::sample_queries(all_occ, box, box, 8, 4);
    CHECK(std::count(qo.labels.begin(), qo.labels.end(), 1) == 8);

    // all unobserved: nothing to sample
    grid::OccGrid none(spec, grid::CellState::unobserved);
    CHECK_THROWS_AS(trk::sample_queries(none, box, box, 8, 4), Error);
}

TEST_CASE("query positions move into the roi frame") {
    grid::GridSpec spec({1.2, 0.8, 0.8}, 0.2);
    grid::OccGrid g(spec);
    for (size_t i = 0; i < g.cells.size(); ++i)
        g.cells[i] = i % 3 == 0 ? uint8_t(grid::CellState::occupied) : uint8_t(grid::CellState::free);

    geom::Box7 gt_box({3.0, -1.0, 0.5}, {1.2, 0.8, 0.8}, 0.7);
    geom::Box7 roi({3.2, -0.8, 0.6}, {1.3, 0.9, 0.8}, 0.55);
    trk::QueryBatch q = trk::sample_queries(g, roi, gt_box, 64, 21);

    // oracle: raw trig through world coordinates
    auto to_world = [&](const geom::Vec3& p) {
        double c = std::cos(gt_box.yaw), s = std::sin(gt_box.yaw);
        return geom::Vec3(gt_box.center.x + c * p.x - s * p.y,
                          gt_box.center.y + s * p.x + c * p.y, gt_box.center.z + p.z);
    };
    auto to_roi = [&](const geom::Vec3& w) {
        double c = std::cos(roi.yaw), s = std::sin(roi.yaw);
        double dx = w.x - roi.center.x, dy = w.y - roi.center.y;
        return geom::Vec3(c * dx + s * dy, -s * dx + c * dy, w.z - roi.center.z);
    };

    // match each query against its source cell center by world-space proximity
    size_t matched = 0;
    for (const geom::Vec3& pos : q.positions) {
        for (int k = 0; k < spec.nz; ++k)
            for (int j = 0; j < spec.ny; ++j)
                for (int i = 0; i < spec.nx; ++i) {
                    geom::Vec3 expect = to_roi(to_world(spec.center(i, j, k)));
                    if (std::abs(expect.x - pos.x) < 1e-9 && std::abs(expect.y - pos.y) < 1e-9 &&
                        std::abs(expect.z - pos.z) < 1e-9) {
                        ++matched;
                        goto next;
                    }
                }
    next:;
    }
    CHECK(matched == q.positions.size());

    // determinism
    trk::QueryBatch q2 = trk::sample_queries(g, roi, gt_box, 64, 21);
    CHECK(q.labels == q2.labels);
    REQUIRE(q.positions.size() == q2.positions.size());
    for (size_t i = 0; i < q.positions.size(); ++i) CHECK(q.positions[i].x == q2.positions[i].x);
    trk::QueryBatch q3 = trk::sample_queries(g, roi, gt_box, 64, 22);
    bool differs = false;
    for (size_t i = 0; i < q.positions.size(); ++i)
        differs = differs || q.positions[i].x != q3.positions[i].x;
    CHECK(differs);
}

TEST_CASE("tracklet datasets round-trip through a directory") {
    TempDir td("trk_dataset");
    const sim::SimLog& log = fixture_log();

    trk::TrackletDataset ds;
    ds.noise.drift_sigma = 0.02;
    ds.seed = 99;
    ds.scene_hash = "deadbeef00000000";
    ds.tracklets.push_back(trk::make_gt_tracklet(log, log.scene.actors[0].track_id));
    trk::Tracklet noisy =
        trk::perturb_tracklet(log, trk::make_gt_tracklet(log, log.scene.actors[1].track_id),
                              ds.noise, ds.seed);
    noisy.track_id += 1000;  // ids stay unique inside one dataset
    ds.tracklets.push_back(noisy);

    trk::save_dataset(td.file("ds"), ds);
    trk::TrackletDataset back = trk::load_dataset(td.file("ds"));

    CHECK(back.noise.drift_sigma == 0.02);
    CHECK(back.seed == 99);
    CHECK(back.scene_hash == ds.scene_hash);
    REQUIRE(back.tracklets.size() == 2);
    for (size_t t = 0; t < 2; ++t) {
        const trk::Tracklet &a = back.tracklets[t], &b = ds.tracklets[t];
        CHECK(a.track_id == b.track_id);
        REQUIRE(a.frames.size() == b.frames.size());
        for (size_t f = 0; f < b.frames.size(); ++f) {
            const trk::TrackletFrame &x = a.frames[f], &y = b.frames[f];
            CHECK(x.timestamp == y.timestamp);
            CHECK(x.valid == y.valid);
            CHECK(x.gt_track == y.gt_track);
            CHECK(x.source_frame == y.source_frame);
            REQUIRE(x.gt_box.has_value() == y.gt_box.has_value());
            if (y.gt_box) CHECK(same_box(*x.gt_box, *y.gt_box));  // doubles, json-exact
            // binary payload is stored as f32
            CHECK(x.proposal.center.x == double(float(y.proposal.center.x)));
            CHECK(x.proposal.dims.y == double(float(y.proposal.dims.y)));
            CHECK(x.proposal.yaw == double(float(y.proposal.yaw)));
            REQUIRE(x.points.size() == y.points.size());
            for (size_t i = 0; i < y.points.size(); ++i) {
                CHECK(x.points.points[i].x == double(float(y.points.points[i].x)));
                CHECK(x.points.points[i].z == double(float(y.points.points[i].z)));
            }
        }
    }

    // saving the reloaded dataset reproduces the blobs byte for byte
    trk::save_dataset(td.file("ds2"), back);
    nlohmann::json index = io::read_json(td.file("ds/index.json"));
    std::string blob =
        "blobs/" + index.at("tracks")[0].at("frames")[0].at("blob").get<std::string>();
    CHECK(io::hash_file(td.file("ds/" + blob)) == io::hash_file(td.file("ds2/" + blob)));

    SUBCASE("truncated blobs are rejected") {
        std::vector<uint8_t> raw = io::read_file(td.file("ds/" + blob));
        raw.resize(raw.size() - 1);
        io::write_file_atomic(td.file("ds/" + blob), raw);
        CHECK_THROWS_AS(trk::load_dataset(td.file("ds")), Error);
    }
    SUBCASE("missing index is an io error") {
        CHECK_THROWS_AS(trk::load_dataset(td.file("nowhere")), Error);
    }
}
