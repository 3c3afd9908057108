#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "occnet.hpp"
#include "test_util.hpp"

using namespace ocf;
using ad::Tensor;
using geom::Box7;
using geom::PointCloud;
using geom::Vec3;
using grid::CellState;
using grid::GridSpec;
using grid::OccGrid;

namespace {

net::ModelConfig tiny_cfg() {
    net::ModelConfig c;
    c.embed_dim = 8;
    c.fused_dim = 8;
    c.encoder_widths = {8};
    c.layers = 2;
    c.heads = 2;
    c.hidden = 8;
    c.decoder_widths = {8};
    c.max_len = 8;
    c.n_queries = 16;
    return c;
}

PointCloud cloud_in_box(Rng& rng, const Box7& b, int n) {
    PointCloud pc;
    pc.frame = geom::Frame::world;
    geom::RigidTransform to_world = geom::box_to_world(b);
    for (int i = 0; i < n; ++i) {
        Vec3 local(rng.uniform(-0.5, 0.5) * b.dims.x, rng.uniform(-0.5, 0.5) * b.dims.y,
                   rng.uniform(-0.5, 0.5) * b.dims.z);
        pc.points.push_back(to_world.apply(local));
    }
    return pc;
}

// A moving box with mild proposal noise; every frame carries its GT match.
trk::Tracklet make_track(Rng& rng, int id, int n_frames, int pts_per_frame = 32,
                         bool noisy_proposals = true) {
    trk::Tracklet t;
    t.track_id = id;
    Vec3 dims(4.2, 1.9, 1.6);
    Vec3 c0(rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0), 0.8);
    Vec3 vel(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), 0.0);
    double yaw0 = rng.uniform(-3.0, 3.0);
    for (int f = 0; f < n_frames; ++f) {
        trk::TrackletFrame fr;
        fr.timestamp = 0.1 * f;
        fr.source_frame = f;
        Box7 gt(c0 + vel * double(f), dims, yaw0 + 0.05 * f);
        fr.gt_box = gt;
        fr.gt_track = id;
        if (noisy_proposals) {
            Vec3 jitter(rng.normal(0.0, 0.05), rng.normal(0.0, 0.05), rng.normal(0.0, 0.02));
            fr.proposal = Box7(gt.center + jitter, gt.dims, gt.yaw + rng.normal(0.0, 0.02));
        } else {
            fr.proposal = gt;
        }
        fr.points = cloud_in_box(rng, fr.proposal, pts_per_frame);
        t.frames.push_back(std::move(fr));
    }
    return t;
}

OccGrid random_tristate_grid(Rng& rng, const Vec3& dims, double voxel) {
    OccGrid g(GridSpec(dims, voxel), CellState::free);
    for (auto& c : g.cells) {
        double u = rng.uniform();
        c = uint8_t(u < 0.4 ? CellState::occupied
                            : (u < 0.8 ? CellState::free : CellState::unobserved));
    }
    return g;
}

trk::Window whole_window(const trk::Tracklet& t) {
    trk::Window w;
    w.tracklet = t;
    w.mask.assign(t.frames.size(), 1);
    return w;
}

ad::Params<double> to_double(const ad::Params<float>& p) {
    ad::Params<double> d;
    for (const auto& [name, t] : p.tensors) {
        Tensor<double>& dt = d.add(name, t.shape);
        for (size_t i = 0; i < t.data.size(); ++i) dt.data[i] = double(t.data[i]);
    }
    return d;
}

bool rows_equal(const Tensor<float>& a, const Tensor<float>& b, int row_count) {
    int cols = a.shape[1];
    if (b.shape[1] != cols) return false;
    return std::memcmp(a.data.data(), b.data.data(), sizeof(float) * size_t(row_count) * size_t(cols)) == 0;
}

}  // namespace

TEST_CASE("point decoration carries coordinates and six face distances") {
    Box7 b(Vec3(0, 0, 0), Vec3(4, 4, 2), 0.0);
    PointCloud pc;
    pc.frame = geom::Frame::box_local;
    pc.points = {Vec3(0, 0, 0), Vec3(2, 0, 0)};  // center and the +x face
    Tensor<double> d = net::decorate_points(pc, b);
    REQUIRE(d.shape == std::vector<int>{2, 9});
    CHECK(d.at2(0, 0) == 0.0);
    CHECK(d.at2(0, 3) == 2.0);  // +x face
    CHECK(d.at2(0, 4) == 2.0);  // -x face
    CHECK(d.at2(0, 5) == 2.0);
    CHECK(d.at2(0, 6) == 2.0);
    CHECK(d.at2(0, 7) == 1.0);
    CHECK(d.at2(0, 8) == 1.0);
    CHECK(d.at2(1, 0) == 2.0);                    // coordinates pass through
    CHECK(d.at2(1, 3) == doctest::Approx(0.0));   // on the +x face
    CHECK(d.at2(1, 4) == doctest::Approx(4.0));

    // per-axis distance pairs always sum to the box extent, any pose
    Rng rng(71);
    for (int trial = 0; trial < 20; ++trial) {
        Box7 rb = testutil::random_box(rng);
        PointCloud rpc = cloud_in_box(rng, rb, 8);
        Tensor<double> rd = net::decorate_points(rpc, rb);
        for (int r = 0; r < rd.shape[0]; ++r) {
            CHECK(rd.at2(r, 3) + rd.at2(r, 4) == doctest::Approx(rb.dims.x));
            CHECK(rd.at2(r, 5) + rd.at2(r, 6) == doctest::Approx(rb.dims.y));
            CHECK(rd.at2(r, 7) + rd.at2(r, 8) == doctest::Approx(rb.dims.z));
            CHECK(rd.at2(r, 0) == rpc.points[size_t(r)].x);
            // interior points keep all six distances non-negative
            for (int c = 3; c < 9; ++c) CHECK(rd.at2(r, c) >= -1e-9);
        }
    }
}

TEST_CASE("box residuals are exact inverses") {
    Rng rng(72);
    for (int trial = 0; trial < 50; ++trial) {
        Box7 roi = testutil::random_box(rng);
        Box7 gt = testutil::random_box(rng);

        std::array<double, 7> zero{};
        Box7 same = net::apply_residual(roi, zero);
        CHECK(same.center.x == doctest::Approx(roi.center.x));
        CHECK(same.dims.y == roi.dims.y);
        CHECK(same.yaw == doctest::Approx(roi.yaw));

        std::array<double, 7> self = net::residual_target(roi, roi);
        for (double v : self) CHECK(std::abs(v) < 1e-12);

        Box7 rt = net::apply_residual(roi, net::residual_target(roi, gt));
        CHECK(rt.center.x == doctest::Approx(gt.center.x).epsilon(1e-9));
        CHECK(rt.center.y == doctest::Approx(gt.center.y).epsilon(1e-9));
        CHECK(rt.center.z == doctest::Approx(gt.center.z).epsilon(1e-9));
        CHECK(rt.dims.x == doctest::Approx(gt.dims.x).epsilon(1e-9));
        CHECK(rt.dims.y == doctest::Approx(gt.dims.y).epsilon(1e-9));
        CHECK(rt.dims.z == doctest::Approx(gt.dims.z).epsilon(1e-9));
        CHECK(std::abs(geom::wrap_angle(rt.yaw - gt.yaw)) < 1e-9);
    }
}

TEST_CASE("model config validates and round-trips through JSON") {
    net::ModelConfig c = tiny_cfg();
    net::ModelConfig back = net::config_from_json(net::config_to_json(c));
    CHECK(back.embed_dim == c.embed_dim);
    CHECK(back.encoder_widths == c.encoder_widths);
    CHECK(back.single_branch == c.single_branch);
    CHECK(back.lambda_det == c.lambda_det);

    net::ModelConfig odd = c;
    odd.embed_dim = 7;
    CHECK_THROWS_AS(odd.validate(), Error);
    net::ModelConfig bad_heads = c;
    bad_heads.heads = 3;  // does not divide hidden = 8
    CHECK_THROWS_AS(bad_heads.validate(), Error);
    net::ModelConfig fs = net::ModelConfig::full_scale();
    CHECK_NOTHROW(fs.validate());
    CHECK(fs.embed_dim > c.embed_dim);
}

TEST_CASE("parameter init is deterministic and manifest-complete") {
    net::ModelConfig cfg = tiny_cfg();
    std::vector<std::string> names = net::param_manifest(cfg);
    CHECK(std::is_sorted(names.begin(), names.end()));
    CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());

    ad::Params<float> a = net::init_params(cfg, 5);
    ad::Params<float> b = net::init_params(cfg, 5);
    ad::Params<float> c = net::init_params(cfg, 6);
    REQUIRE(a.tensors.size() == names.size());
    size_t i = 0;
    bool any_diff = false;
    for (const auto& [name, t] : a.tensors) {
        CHECK(name == names[i++]);
        CHECK(t.data == b.at(name).data);  // same seed, bit for bit
        if (t.data != c.at(name).data) any_diff = true;
    }
    CHECK(any_diff);

    // layer norm gains start at one, biases at zero
    for (float v : a.at("attn.0.ln_g").data) CHECK(v == 1.0f);
    for (float v : a.at("attn.0.bq").data) CHECK(v == 0.0f);

    net::ModelConfig sb = cfg;
    sb.single_branch = true;
    std::vector<std::string> sb_names = net::param_manifest(sb);
    CHECK(sb_names.size() < names.size());
    for (const std::string& n : sb_names)
        CHECK(std::binary_search(names.begin(), names.end(), n));
    for (const std::string& n : sb_names) CHECK(n.find("enc.global") == std::string::npos);
}

TEST_CASE("window batches recentre proposals and pick up training targets") {
    Rng rng(73);
    trk::Tracklet t = make_track(rng, 9, 5);
    t.frames[2].valid = false;
    std::map<int, OccGrid> grids;
    grids.emplace(9, random_tristate_grid(rng, Vec3(4.2, 1.9, 1.6), 0.2));

    net::ModelConfig cfg = tiny_cfg();
    net::WindowBatch b = net::make_window_batch(whole_window(t), grids, cfg, 11, true);
    REQUIRE(b.frames.size() == 5);
    CHECK(b.track_id == 9);
    CHECK(b.n_valid == 4);
    CHECK(b.n_matched == 4);
    CHECK_FALSE(b.frames[2].valid);

    // the first valid proposal sits exactly at the shared-frame origin
    CHECK(b.frames[0].box7[0] == 0.0);
    CHECK(b.frames[0].box7[1] == 0.0);
    CHECK(b.frames[0].box7[2] == 0.0);
    // later boxes are offset by the actual center difference
    Vec3 expect = t.frames[3].proposal.center - t.frames[0].proposal.center;
    CHECK(b.frames[3].box7[0] == doctest::Approx(expect.x));
    CHECK(b.frames[3].box7[1] == doctest::Approx(expect.y));

    for (int f : {0, 1, 3, 4}) {
        const net::FrameBatch& fb = b.frames[size_t(f)];
        CHECK(fb.local_pts.shape == std::vector<int>{32, 9});
        CHECK(fb.global_pts.shape == std::vector<int>{32, 9});
        CHECK(fb.matched);
        REQUIRE(fb.queries.shape.size() == 2);
        CHECK(fb.queries.shape[0] > 0);
        CHECK(fb.queries.shape[0] <= cfg.n_queries);
        CHECK(fb.queries.shape[1] == 3);
        CHECK(fb.occ_labels.shape[0] == fb.queries.shape[0]);
        for (double l : fb.occ_labels.data) CHECK((l == 0.0 || l == 1.0));
        CHECK(fb.score_target >= 0.0);
        CHECK(fb.score_target <= 1.0);
        CHECK(fb.score_target > 0.3);  // mild jitter keeps real overlap
    }

    // an exact proposal yields a zero residual target and unit objectness
    trk::Tracklet clean = make_track(rng, 3, 2, 16, false);
    net::WindowBatch cb = net::make_window_batch(whole_window(clean), grids, cfg, 0, false);
    for (double v : cb.frames[0].det_target) CHECK(std::abs(v) < 1e-12);
    CHECK(cb.frames[0].score_target == doctest::Approx(1.0));

    // front padding from length regularization stays invalid
    std::vector<trk::Window> ws = trk::regularize_length(clean, 4);
    REQUIRE(ws.size() == 1);
    net::WindowBatch pb = net::make_window_batch(ws[0], grids, cfg, 0, false);
    CHECK(pb.frames.size() == 4);
    CHECK(pb.n_valid == 2);
    CHECK_FALSE(pb.frames[0].valid);
    CHECK_FALSE(pb.frames[1].valid);

    trk::Window dead = whole_window(t);
    std::fill(dead.mask.begin(), dead.mask.end(), uint8_t(0));
    CHECK_THROWS_AS(net::make_window_batch(dead, grids, cfg, 0, false), Error);
}

TEST_CASE("slot encodings ignore point order and duplication") {
    Rng rng(74);
    trk::Tracklet t = make_track(rng, 1, 4);
    net::ModelConfig cfg = tiny_cfg();
    ad::Params<float> params = net::init_params(cfg, 2);

    net::WindowBatch base = net::make_window_batch(whole_window(t), {}, cfg, 0, false);
    ad::Tape<float> t1;
    auto r1 = net::forward_window(t1, params, cfg, base, true, false);

    // shuffle every frame's points and duplicate one of them
    trk::Tracklet shuf = t;
    for (auto& fr : shuf.frames) {
        rng.shuffle(fr.points.points);
        fr.points.points.push_back(fr.points.points.front());
    }
    net::WindowBatch sb = net::make_window_batch(whole_window(shuf), {}, cfg, 0, false);
    ad::Tape<float> t2;
    auto r2 = net::forward_window(t2, params, cfg, sb, true, false);

    CHECK(t1.value(r1.z).data == t2.value(r2.z).data);
    CHECK(t1.value(r1.deltas).data == t2.value(r2.deltas).data);
    CHECK(t1.value(r1.scores).data == t2.value(r2.scores).data);
}

TEST_CASE("online latents at a frame ignore later frames bit for bit") {
    Rng rng(75);
    const int T = 10, keep = 6;  // frames 0..5 stay fixed
    trk::Tracklet t = make_track(rng, 4, T);
    net::ModelConfig cfg = tiny_cfg();
    ad::Params<float> params = net::init_params(cfg, 3);

    net::WindowBatch b1 = net::make_window_batch(whole_window(t), {}, cfg, 0, false);
    ad::Tape<float> t1;
    auto r1 = net::forward_window(t1, params, cfg, b1, true, false);

    // rewrite the future: new clouds, new boxes, one dropped frame
    trk::Tracklet mut = t;
    for (int f = keep; f < T; ++f) {
        trk::TrackletFrame& fr = mut.frames[size_t(f)];
        fr.proposal = Box7(fr.proposal.center + Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2), 0.1),
                           fr.proposal.dims * 1.1, fr.proposal.yaw + 0.4);
        fr.points = cloud_in_box(rng, fr.proposal, 48);
    }
    mut.frames[8].valid = false;
    net::WindowBatch b2 = net::make_window_batch(whole_window(mut), {}, cfg, 0, false);
    ad::Tape<float> t2;
    auto r2 = net::forward_window(t2, params, cfg, b2, true, false);

    CHECK(rows_equal(t1.value(r1.z), t2.value(r2.z), keep));
    CHECK(rows_equal(t1.value(r1.z_det), t2.value(r2.z_det), keep));
    CHECK(rows_equal(t1.value(r1.deltas), t2.value(r2.deltas), keep));
    CHECK(rows_equal(t1.value(r1.scores), t2.value(r2.scores), keep));

    // decoded occupancy at the last kept frame is bitwise stable too
    auto zrow = [&](ad::Tape<float>& tp, int node) {
        const Tensor<float>& z = tp.value(node);
        return std::vector<float>(z.data.begin() + (keep - 1) * cfg.fused_dim,
                                  z.data.begin() + keep * cfg.fused_dim);
    };
    std::vector<Vec3> probes = {Vec3(0.3, -0.2, 0.1), Vec3(-1.0, 0.5, -0.4), Vec3(0, 0, 0)};
    CHECK(net::decode_occupancy(params, cfg, zrow(t1, r1.z), probes) ==
          net::decode_occupancy(params, cfg, zrow(t2, r2.z), probes));

    // the future did change the late rows, so the test has teeth
    CHECK_FALSE(rows_equal(t1.value(r1.z), t2.value(r2.z), T));
}

TEST_CASE("offline attention uses the future") {
    Rng rng(76);
    trk::Tracklet t = make_track(rng, 5, 8);
    net::ModelConfig cfg = tiny_cfg();
    ad::Params<float> params = net::init_params(cfg, 4);
    net::WindowBatch b = net::make_window_batch(whole_window(t), {}, cfg, 0, false);

    ad::Tape<float> t1, t2;
    auto on = net::forward_window(t1, params, cfg, b, true, false);
    auto off = net::forward_window(t2, params, cfg, b, false, false);

    // some early frame must read differently once the future is visible
    bool mid_differs = !rows_equal(t1.value(on.z), t2.value(off.z), int(t.frames.size()) - 1);
    CHECK(mid_differs);
}

TEST_CASE("whole-history windows nest bitwise") {
    Rng rng(77);
    trk::Tracklet t = make_track(rng, 6, 6);
    net::ModelConfig cfg = tiny_cfg();
    net::ModelBundle m{cfg, net::init_params(cfg, 8)};

    net::InferConfig all_history;
    all_history.voxel = 0.25;
    net::InferConfig wide = all_history;
    wide.window = 8;  // covers the whole 6-frame track
    net::InferConfig narrow = all_history;
    narrow.window = 3;

    auto pa = net::infer_tracklet(m, t, all_history);
    auto pw = net::infer_tracklet(m, t, wide);
    auto pn = net::infer_tracklet(m, t, narrow);
    REQUIRE(pa.size() == 6);
    for (size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].valid);
        CHECK(pa[i].grid.cells == pw[i].grid.cells);
        CHECK(pa[i].score == pw[i].score);
        CHECK(std::memcmp(&pa[i].refined, &pw[i].refined, sizeof(Box7)) == 0);
    }
    // a genuinely restricted window changes late-frame predictions
    bool any_diff = false;
    for (size_t i = 3; i < pn.size(); ++i) any_diff = any_diff || pn[i].score != pa[i].score;
    CHECK(any_diff);
}

TEST_CASE("occupancy decoding is pure and matches the training-graph arithmetic") {
    Rng rng(78);
    net::ModelConfig cfg = tiny_cfg();
    ad::Params<float> params = net::init_params(cfg, 12);
    std::vector<float> z(size_t(cfg.fused_dim));
    for (auto& v : z) v = float(rng.uniform(-1.0, 1.0));
    std::vector<Vec3> queries;
    for (int i = 0; i < 40; ++i)
        queries.emplace_back(rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-1, 1));

    std::vector<double> p1 = net::decode_occupancy(params, cfg, z, queries);
    std::vector<double> p2 = net::decode_occupancy(params, cfg, z, queries);
    CHECK(p1 == p2);  // pure function, bit for bit
    for (double p : p1) {
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }

    // the tape decoder head computes the same probabilities
    ad::Tape<float> tape;
    Tensor<float> zt({1, cfg.fused_dim});
    zt.data = z;
    Tensor<float> qt({int(queries.size()), 3});
    for (size_t i = 0; i < queries.size(); ++i) {
        qt.at2(int(i), 0) = float(queries[i].x);
        qt.at2(int(i), 1) = float(queries[i].y);
        qt.at2(int(i), 2) = float(queries[i].z);
    }
    int pid0 = tape.leaf(params.at("dec.w0"));
    int pid0b = tape.leaf(params.at("dec.b0"));
    int pidw = tape.leaf(params.at("dec.wout"));
    int pidb = tape.leaf(params.at("dec.bout"));
    int x = tape.concat(tape.broadcast_rows(tape.row(tape.leaf(zt), 0), int(queries.size())),
                        tape.leaf(qt));
    int h = tape.relu(tape.add(tape.matmul(x, pid0), pid0b));
    int probs = tape.sigmoid(tape.add(tape.matmul(h, pidw), pidb));
    const Tensor<float>& tv = tape.value(probs);
    for (size_t i = 0; i < queries.size(); ++i)
        CHECK(std::abs(p1[i] - double(tv.data[i])) < 1e-6);
}

TEST_CASE("the tape loss equals a scalar recomputation of its three terms") {
    Rng rng(79);
    trk::Tracklet t = make_track(rng, 2, 4);
    std::map<int, OccGrid> grids;
    grids.emplace(2, random_tristate_grid(rng, Vec3(4.2, 1.9, 1.6), 0.2));
    net::ModelConfig cfg = tiny_cfg();
    net::WindowBatch b = net::make_window_batch(whole_window(t), grids, cfg, 21, true);
    REQUIRE(b.n_matched == 4);

    ad::Params<double> params = to_double(net::init_params(cfg, 13));
    ad::Tape<double> tape;
    auto fr = net::forward_window(tape, params, cfg, b, true, true);
    REQUIRE(fr.loss >= 0);
    CHECK(std::isfinite(fr.loss_value));

    // pull the head outputs back off the tape
    std::vector<double> occ_probs = tape.value(fr.occ_probs).data;
    std::vector<double> occ_labels;
    std::vector<std::array<double, 7>> residuals, residual_targets;
    std::vector<double> scores, score_targets;
    const Tensor<double>& deltas = tape.value(fr.deltas);
    const Tensor<double>& sv = tape.value(fr.scores);
    for (size_t f = 0; f < b.frames.size(); ++f) {
        const net::FrameBatch& fb = b.frames[f];
        if (!fb.valid) continue;
        scores.push_back(sv.at2(int(f), 0));
        score_targets.push_back(fb.score_target);
        if (!fb.matched) continue;
        occ_labels.insert(occ_labels.end(), fb.occ_labels.data.begin(), fb.occ_labels.data.end());
        std::array<double, 7> r;
        for (int c = 0; c < 7; ++c) r[size_t(c)] = deltas.at2(int(f), c);
        residuals.push_back(r);
        residual_targets.push_back(fb.det_target);
    }
    REQUIRE(occ_probs.size() == occ_labels.size());

    double recomputed = net::compute_loss(occ_probs, occ_labels, residuals, residual_targets,
                                          scores, score_targets, cfg);
    CHECK(recomputed == doctest::Approx(fr.loss_value).epsilon(1e-12));

    // the logged terms weight together into the total
    CHECK(fr.occ_term + cfg.lambda_det * fr.det_term + cfg.lambda_score * fr.score_term ==
          doctest::Approx(fr.loss_value).epsilon(1e-12));

    // doubling the detection weight moves the total by exactly that term
    net::ModelConfig heavier = cfg;
    heavier.lambda_det *= 2.0;
    double heavier_loss = net::compute_loss(occ_probs, occ_labels, residuals, residual_targets,
                                            scores, score_targets, heavier);
    CHECK(heavier_loss - recomputed == doctest::Approx(cfg.lambda_det * fr.det_term).epsilon(1e-9));

    CHECK_THROWS_AS(net::compute_loss({}, {}, {}, {}, {}, {}, cfg), Error);
}

TEST_CASE("full-model gradients match finite differences") {
    Rng rng(80);
    trk::Tracklet t = make_track(rng, 7, 3, 12);
    std::map<int, OccGrid> grids;
    grids.emplace(7, random_tristate_grid(rng, Vec3(4.2, 1.9, 1.6), 0.2));
    net::ModelConfig cfg = tiny_cfg();
    cfg.n_queries = 8;
    net::WindowBatch b = net::make_window_batch(whole_window(t), grids, cfg, 31, true);

    ad::Params<double> params = to_double(net::init_params(cfg, 17));
    ad::Tape<double> tape;
    std::map<std::string, int> pid;
    auto fr = net::forward_window(tape, params, cfg, b, true, true, &pid);
    tape.backward(fr.loss);

    auto loss_at = [&](const ad::Params<double>& p) {
        ad::Tape<double> t2;
        return net::forward_window(t2, p, cfg, b, true, true).loss_value;
    };

    const double h = 1e-6;
    double worst = 0.0;
    for (const auto& [name, tensor] : params.tensors) {
        const Tensor<double>& g = tape.grad(pid.at(name));
        size_t n = tensor.data.size();
        std::vector<size_t> picks = {0, n / 3, (2 * n) / 3, n - 1};
        std::sort(picks.begin(), picks.end());
        picks.erase(std::unique(picks.begin(), picks.end()), picks.end());
        for (size_t e : picks) {
            ad::Params<double> up = params, down = params;
            up.at(name).data[e] += h;
            down.at(name).data[e] -= h;
            double num = (loss_at(up) - loss_at(down)) / (2.0 * h);
            double ana = g.data[e];
            double scale = std::max({1.0, std::abs(num), std::abs(ana)});
            worst = std::max(worst, std::abs(num - ana) / scale);
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("single-branch models drop the shared-frame encoder but still run") {
    Rng rng(81);
    trk::Tracklet t = make_track(rng, 1, 4);
    std::map<int, OccGrid> grids;
    grids.emplace(1, random_tristate_grid(rng, Vec3(4.2, 1.9, 1.6), 0.2));
    net::ModelConfig cfg = tiny_cfg();
    cfg.single_branch = true;
    ad::Params<float> params = net::init_params(cfg, 19);
    for (const auto& [name, tv] : params.tensors) CHECK(name.find("enc.global") == std::string::npos);

    net::WindowBatch b = net::make_window_batch(whole_window(t), grids, cfg, 5, true);
    ad::Tape<float> tape;
    auto fr = net::forward_window(tape, params, cfg, b, true, true);
    CHECK(std::isfinite(fr.loss_value));
    CHECK(fr.loss_value > 0.0);
}

TEST_CASE("checkpoints round-trip bit for bit and reject mismatches") {
    net::ModelConfig cfg = tiny_cfg();
    net::ModelBundle m{cfg, net::init_params(cfg, 23)};
    io::CheckpointData c = net::to_checkpoint(m, nlohmann::json{{"epochs", 3}});
    CHECK(c.header.at("training").at("epochs") == 3);

    net::ModelBundle back = net::from_checkpoint(c);
    CHECK(back.cfg.embed_dim == cfg.embed_dim);
    REQUIRE(back.params.tensors.size() == m.params.tensors.size());
    for (const auto& [name, t] : m.params.tensors) CHECK(back.params.at(name).data == t.data);

    // through the container format on disk as well
    testutil::TempDir dir("occnet_ckpt");
    io::write_checkpoint(dir.file("model.bin"), c);
    net::ModelBundle disk = net::from_checkpoint(io::read_checkpoint(dir.file("model.bin")));
    for (const auto& [name, t] : m.params.tensors) CHECK(disk.params.at(name).data == t.data);

    io::CheckpointData renamed = c;
    renamed.header["manifest"][0]["name"] = "enc.local.bogus";
    CHECK_THROWS_AS(net::from_checkpoint(renamed), Error);

    io::CheckpointData truncated = c;
    truncated.payload.pop_back();
    CHECK_THROWS_AS(net::from_checkpoint(truncated), Error);

    io::CheckpointData wrong_kind = c;
    wrong_kind.header["kind"] = "something-else";
    CHECK_THROWS_AS(net::from_checkpoint(wrong_kind), Error);
}

TEST_CASE("training shrinks the loss and is seed-reproducible") {
    Rng rng(82);
    trk::TrackletDataset ds;
    ds.seed = 1;
    std::map<int, OccGrid> grids;
    for (int id = 0; id < 4; ++id) {
        ds.tracklets.push_back(make_track(rng, id, 8, 24));
        grids.emplace(id, random_tristate_grid(rng, Vec3(4.2, 1.9, 1.6), 0.2));
    }

    net::ModelConfig mcfg = tiny_cfg();
    mcfg.layers = 1;
    net::TrainConfig tcfg;
    tcfg.epochs = 3;
    tcfg.lr = 3e-3;
    tcfg.batch_size = 2;
    tcfg.val_fraction = 0.25;
    tcfg.val_iou_windows = 2;
    tcfg.seed = 7;

    net::TrainResult r1 = net::train(ds, grids, mcfg, tcfg);
    CHECK_FALSE(r1.aborted);
    REQUIRE(r1.log.size() == 3);
    CHECK(r1.best_epoch >= 1);
    CHECK(r1.log.back().train_loss < r1.log.front().train_loss);
    for (const auto& l : r1.log) {
        CHECK(std::isfinite(l.train_loss));
        CHECK(std::isfinite(l.val_loss));
        CHECK(l.lr > 0.0);
    }

    net::TrainResult r2 = net::train(ds, grids, mcfg, tcfg);
    for (size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].train_loss == r2.log[i].train_loss);
        CHECK(r1.log[i].val_loss == r2.log[i].val_loss);
        CHECK(r1.log[i].val_iou == r2.log[i].val_iou);
    }
    CHECK(r1.best_epoch == r2.best_epoch);
    for (const auto& [name, t] : r1.model.params.tensors)
        CHECK(t.data == r2.model.params.at(name).data);
}

TEST_CASE("the pooled baseline matches a hand voxelization") {
    Rng rng(83);
    trk::Tracklet t = make_track(rng, 1, 3, 40);
    t.frames[1].valid = false;  // a dropped frame contributes nothing
    double voxel = 0.2;
    auto preds = net::baseline_complete(t, voxel);
    REQUIRE(preds.size() == 3);
    CHECK_FALSE(preds[1].valid);
    CHECK(preds[0].valid);
    CHECK(preds[2].valid);
    CHECK(preds[2].score == 1.0);

    // oracle with raw trig: pool valid frames' points into each proposal frame
    for (int f : {0, 2}) {
        const Box7& roi = t.frames[size_t(f)].proposal;
        GridSpec spec(roi.dims, voxel);
        std::vector<uint8_t> cells(spec.cell_count(), uint8_t(CellState::free));
        for (int s = 0; s <= f; ++s) {
            if (!t.frames[size_t(s)].valid) continue;
            const Box7& src = t.frames[size_t(s)].proposal;
            double c = std::cos(src.yaw), sn = std::sin(src.yaw);
            for (const Vec3& p : t.frames[size_t(s)].points.points) {
                double dx = p.x - src.center.x, dy = p.y - src.center.y, dz = p.z - src.center.z;
                Vec3 local(c * dx + sn * dy, -sn * dx + c * dy, dz);
                int i = int(std::floor((local.x + roi.dims.x * 0.5) / voxel));
                int j = int(std::floor((local.y + roi.dims.y * 0.5) / voxel));
                int k = int(std::floor((local.z + roi.dims.z * 0.5) / voxel));
                if (i < 0 || j < 0 || k < 0 || i >= spec.nx || j >= spec.ny || k >= spec.nz)
                    continue;
                cells[spec.index(i, j, k)] = uint8_t(CellState::occupied);
            }
        }
        CHECK(preds[size_t(f)].grid.cells == cells);
    }
}

TEST_CASE("extrapolated decoding reduces to the standard grid on an identical box") {
    Rng rng(84);
    net::ModelConfig cfg = tiny_cfg();
    net::ModelBundle m{cfg, net::init_params(cfg, 29)};
    std::vector<float> z(size_t(cfg.fused_dim));
    for (auto& v : z) v = float(rng.uniform(-1.0, 1.0));

    Box7 roi = testutil::random_box(rng, 1.0, 2.0, 4.0);
    OccGrid same = net::extrapolate_to_gt(m, z, roi, roi, 0.25);

    GridSpec spec(roi.dims, 0.25);
    std::vector<Vec3> centers;
    for (int k = 0; k < spec.nz; ++k)
        for (int j = 0; j < spec.ny; ++j)
            for (int i = 0; i < spec.nx; ++i) centers.push_back(spec.center(i, j, k));
    std::vector<double> probs = net::decode_occupancy(m.params, cfg, z, centers);
    REQUIRE(same.cells.size() == probs.size());
    for (size_t i = 0; i < probs.size(); ++i)
        CHECK((probs[i] >= 0.5) == (CellState(same.cells[i]) == CellState::occupied));

    // a different target box decodes at its own grid, queried in the RoI frame
    Box7 gt(roi.center + Vec3(0.4, -0.2, 0.1), roi.dims * 1.15, roi.yaw + 0.2);
    OccGrid moved = net::extrapolate_to_gt(m, z, roi, gt, 0.25);
    GridSpec gspec(gt.dims, 0.25);
    CHECK(moved.cells.size() == gspec.cell_count());
    geom::RigidTransform to_world = geom::box_to_world(gt);
    geom::RigidTransform to_roi = geom::box_to_local(roi);
    int i = gspec.nx / 2, j = gspec.ny / 2, k = gspec.nz / 2;
    Vec3 q = to_roi.apply(to_world.apply(gspec.center(i, j, k)));
    double p = net::decode_occupancy(m.params, cfg, z, {q})[0];
    CHECK((p >= 0.5) == (CellState(moved.cells[gspec.index(i, j, k)]) == CellState::occupied));
}

TEST_CASE("inference with ground-truth grids feeds the matched box") {
    Rng rng(85);
    trk::Tracklet t = make_track(rng, 2, 4);
    net::ModelConfig cfg = tiny_cfg();
    net::ModelBundle m{cfg, net::init_params(cfg, 31)};

    net::InferConfig ic;
    ic.voxel = 0.25;
    ic.extrapolate = true;
    auto preds = net::infer_tracklet(m, t, ic);
    for (size_t f = 0; f < preds.size(); ++f) {
        REQUIRE(preds[f].valid);
        GridSpec expect(t.frames[f].gt_box->dims, 0.25);
        CHECK(preds[f].grid.spec.nx == expect.nx);
        CHECK(preds[f].grid.spec.ny == expect.ny);
        CHECK(preds[f].grid.spec.nz == expect.nz);
    }

    // extrapolation without ground truth is a usage error
    trk::Tracklet bare = t;
    for (auto& fr : bare.frames) fr.gt_box.reset();
    CHECK_THROWS_AS(net::infer_tracklet(m, bare, ic), Error);
}
