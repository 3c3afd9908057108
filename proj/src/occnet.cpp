#include "occnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace ocf::net {

using geom::RigidTransform;
using grid::CellState;
using grid::GridSpec;

// ------------------------------------------------------------------ config

void ModelConfig::validate() const {
    require(embed_dim > 0 && fused_dim > 0, Errc::invalid_argument,
            "latent widths must be positive");
    require(embed_dim % 2 == 0, Errc::invalid_argument,
            "embed width must be even to carry the position code");
    require(!encoder_widths.empty() && !decoder_widths.empty(), Errc::invalid_argument,
            "encoder and decoder need at least one hidden layer");
    for (int w : encoder_widths)
        require(w > 0, Errc::invalid_argument, "encoder widths must be positive");
    for (int w : decoder_widths)
        require(w > 0, Errc::invalid_argument, "decoder widths must be positive");
    require(layers > 0 && heads > 0 && hidden > 0, Errc::invalid_argument,
            "attention shape must be positive");
    require(hidden % heads == 0, Errc::invalid_argument,
            "head count must divide the attention width");
    require(max_len > 0 && n_queries > 0, Errc::invalid_argument,
            "window length and query count must be positive");
    require(lambda_det >= 0.0 && lambda_score >= 0.0, Errc::invalid_argument,
            "loss weights must be non-negative");
}

ModelConfig ModelConfig::full_scale() {
    ModelConfig c;
    c.embed_dim = 512;
    c.fused_dim = 512;
    c.encoder_widths = {128, 256};
    c.layers = 3;
    c.heads = 4;
    c.hidden = 512;
    c.decoder_widths = {512, 512};
    c.max_len = 64;
    c.n_queries = 1024;
    return c;
}

json config_to_json(const ModelConfig& c) {
    return json{{"embed_dim", c.embed_dim},
                {"fused_dim", c.fused_dim},
                {"encoder_widths", c.encoder_widths},
                {"layers", c.layers},
                {"heads", c.heads},
                {"hidden", c.hidden},
                {"decoder_widths", c.decoder_widths},
                {"single_branch", c.single_branch},
                {"max_len", c.max_len},
                {"n_queries", c.n_queries},
                {"lambda_det", c.lambda_det},
                {"lambda_score", c.lambda_score}};
}

ModelConfig config_from_json(const json& j) {
    require(j.is_object(), Errc::data_error, "model config must be a JSON object");
    ModelConfig c;
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<int>();
    if (j.contains("fused_dim")) c.fused_dim = j.at("fused_dim").get<int>();
    if (j.contains("encoder_widths")) c.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
    if (j.contains("layers")) c.layers = j.at("layers").get<int>();
    if (j.contains("heads")) c.heads = j.at("heads").get<int>();
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<int>();
    if (j.contains("decoder_widths")) c.decoder_widths = j.at("decoder_widths").get<std::vector<int>>();
    if (j.contains("single_branch")) c.single_branch = j.at("single_branch").get<bool>();
    if (j.contains("max_len")) c.max_len = j.at("max_len").get<int>();
    if (j.contains("n_queries")) c.n_queries = j.at("n_queries").get<int>();
    if (j.contains("lambda_det")) c.lambda_det = j.at("lambda_det").get<double>();
    if (j.contains("lambda_score")) c.lambda_score = j.at("lambda_score").get<double>();
    c.validate();
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},       {"lr", c.lr},
                {"batch_size", c.batch_size}, {"val_fraction", c.val_fraction},
                {"val_iou_windows", c.val_iou_windows}, {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
    require(j.is_object(), Errc::data_error, "training config must be a JSON object");
    TrainConfig c;
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("val_fraction")) c.val_fraction = j.at("val_fraction").get<double>();
    if (j.contains("val_iou_windows")) c.val_iou_windows = j.at("val_iou_windows").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    require(c.epochs > 0 && c.lr > 0.0 && c.batch_size > 0, Errc::invalid_argument,
            "training config needs positive epochs, lr, and batch size");
    require(c.val_fraction >= 0.0 && c.val_fraction < 1.0, Errc::invalid_argument,
            "validation fraction must be in [0, 1)");
    return c;
}

// --------------------------------------------------------------- parameters

namespace {

struct ParamSpec {
    std::string name;
    std::vector<int> shape;
};

void push_mlp(std::vector<ParamSpec>& out, const std::string& prefix, int in,
              const std::vector<int>& widths, int out_dim) {
    int cur = in;
    for (size_t i = 0; i < widths.size(); ++i) {
        out.push_back({prefix + ".w" + std::to_string(i), {cur, widths[i]}});
        out.push_back({prefix + ".b" + std::to_string(i), {widths[i]}});
        cur = widths[i];
    }
    out.push_back({prefix + ".wout", {cur, out_dim}});
    out.push_back({prefix + ".bout", {out_dim}});
}

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
    cfg.validate();
    const int e = cfg.embed_dim, c = cfg.fused_dim;
    std::vector<ParamSpec> out;
    push_mlp(out, "enc.local", 9, cfg.encoder_widths, e);
    out.push_back({"enc.local.empty", {e}});
    if (!cfg.single_branch) {
        push_mlp(out, "enc.global", 9, cfg.encoder_widths, e);
        out.push_back({"enc.global.empty", {e}});
    }
    push_mlp(out, "box_embed", 7, {e}, e);
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = "attn." + std::to_string(l);
        out.push_back({p + ".wq", {e, cfg.hidden}});
        out.push_back({p + ".bq", {cfg.hidden}});
        out.push_back({p + ".wk", {e, cfg.hidden}});
        out.push_back({p + ".bk", {cfg.hidden}});
        out.push_back({p + ".wv", {e, cfg.hidden}});
        out.push_back({p + ".bv", {cfg.hidden}});
        out.push_back({p + ".wo", {cfg.hidden, e}});
        out.push_back({p + ".bo", {e}});
        out.push_back({p + ".ln_g", {e}});
        out.push_back({p + ".ln_b", {e}});
    }
    push_mlp(out, "fuse.z", 2 * e, {c}, c);
    push_mlp(out, "fuse.det", c + e, {c}, c);
    push_mlp(out, "dec", c + 3, cfg.decoder_widths, 1);
    push_mlp(out, "det", c, {c}, 8);
    return out;
}

}  // namespace

std::vector<std::string> param_manifest(const ModelConfig& cfg) {
    std::vector<std::string> names;
    for (const auto& s : param_specs(cfg)) names.push_back(s.name);
    std::sort(names.begin(), names.end());
    return names;
}

Params<float> init_params(const ModelConfig& cfg, uint64_t seed) {
    Params<float> p;
    for (const auto& s : param_specs(cfg)) {
        Tensor<float>& t = p.add(s.name, s.shape);
        Rng rng(mix_seed(seed, fnv1a64(s.name.data(), s.name.size())));
        if (s.shape.size() == 2) {
            double scale = std::sqrt(6.0 / double(s.shape[0] + s.shape[1]));
            ad::fill_uniform(t, rng, -scale, scale);
        } else if (s.name.size() > 5 && s.name.substr(s.name.size() - 5) == "empty") {
            ad::fill_uniform(t, rng, -0.1, 0.1);
        } else if (s.name.find(".ln_g") != std::string::npos) {
            for (auto& x : t.data) x = 1.0f;
        }
        // remaining vectors are biases and layer-norm shifts: zero
    }
    return p;
}

// ---------------------------------------------------------------- geometry

Tensor<double> decorate_points(const PointCloud& pc, const Box7& roi) {
    roi.validate();
    RigidTransform to_local = geom::box_to_local(roi);
    Tensor<double> out({int(pc.size()), 9});
    const double hx = roi.dims.x * 0.5, hy = roi.dims.y * 0.5, hz = roi.dims.z * 0.5;
    for (size_t i = 0; i < pc.size(); ++i) {
        const Vec3& p = pc.points[i];
        Vec3 q = to_local.apply(p);
        double* r = out.data.data() + i * 9;
        r[0] = p.x;
        r[1] = p.y;
        r[2] = p.z;
        r[3] = hx - q.x;
        r[4] = q.x + hx;
        r[5] = hy - q.y;
        r[6] = q.y + hy;
        r[7] = hz - q.z;
        r[8] = q.z + hz;
    }
    return out;
}

std::array<double, 7> residual_target(const Box7& roi, const Box7& gt) {
    roi.validate();
    gt.validate();
    Vec3 local = geom::box_to_local(roi).apply(gt.center);
    double diag = roi.diagonal();
    return {local.x / diag,
            local.y / diag,
            local.z / diag,
            std::log(gt.dims.x / roi.dims.x),
            std::log(gt.dims.y / roi.dims.y),
            std::log(gt.dims.z / roi.dims.z),
            geom::wrap_angle(gt.yaw - roi.yaw)};
}

Box7 apply_residual(const Box7& roi, const std::array<double, 7>& r) {
    roi.validate();
    double diag = roi.diagonal();
    Vec3 local(r[0] * diag, r[1] * diag, r[2] * diag);
    Vec3 center = geom::box_to_world(roi).apply(local);
    Vec3 dims(roi.dims.x * std::exp(r[3]), roi.dims.y * std::exp(r[4]),
              roi.dims.z * std::exp(r[5]));
    return Box7(center, dims, geom::wrap_angle(roi.yaw + r[6]));
}

// ------------------------------------------------------------ window batch

WindowBatch make_window_batch(const Window& w, const std::map<int, OccGrid>& gt_grids,
                              const ModelConfig& cfg, uint64_t query_seed, bool with_targets) {
    const int T = int(w.tracklet.frames.size());
    require(T > 0 && w.mask.size() == size_t(T), Errc::invalid_argument,
            "window mask must cover every frame");
    WindowBatch b;
    b.track_id = w.tracklet.track_id;
    b.frames.resize(size_t(T));

    Vec3 origin;
    bool have_origin = false;
    for (int t = 0; t < T && !have_origin; ++t)
        if (w.mask[size_t(t)] && w.tracklet.frames[size_t(t)].valid) {
            origin = w.tracklet.frames[size_t(t)].proposal.center;
            have_origin = true;
        }
    require(have_origin, Errc::invalid_argument, "window has no valid frame");

    for (int t = 0; t < T; ++t) {
        const trk::TrackletFrame& fr = w.tracklet.frames[size_t(t)];
        FrameBatch& fb = b.frames[size_t(t)];
        fb.source_frame = fr.source_frame;
        fb.valid = w.mask[size_t(t)] != 0 && fr.valid;
        if (!fb.valid) continue;
        ++b.n_valid;
        fb.proposal = fr.proposal;
        fb.gt_box = fr.gt_box;

        PointCloud local =
            geom::transform_points(geom::box_to_local(fr.proposal), fr.points, geom::Frame::box_local);
        fb.local_pts = decorate_points(local, Box7(Vec3(), fr.proposal.dims, 0.0));

        PointCloud shared;
        shared.frame = geom::Frame::world;
        shared.points.reserve(fr.points.size());
        for (const Vec3& p : fr.points.points) shared.points.push_back(p - origin);
        Box7 rbox(fr.proposal.center - origin, fr.proposal.dims, fr.proposal.yaw);
        fb.global_pts = decorate_points(shared, rbox);
        fb.box7 = {rbox.center.x, rbox.center.y, rbox.center.z, rbox.dims.x,
                   rbox.dims.y,   rbox.dims.z,   rbox.yaw};

        if (fr.gt_box) {
            fb.matched = true;
            ++b.n_matched;
            fb.det_target = residual_target(fr.proposal, *fr.gt_box);
            fb.score_target = std::clamp(geom::box_iou_3d(fr.proposal, *fr.gt_box), 0.0, 1.0);
            if (with_targets) {
                auto git = gt_grids.find(fr.gt_track);
                // A fully unobserved volume (an object occluded in every
                // frame) has nothing to supervise occupancy against.
                bool observed = git != gt_grids.end() &&
                                git->second.count(CellState::occupied) +
                                        git->second.count(CellState::free) >
                                    0;
                if (observed) {
                    trk::QueryBatch qb =
                        trk::sample_queries(git->second, fr.proposal, *fr.gt_box, cfg.n_queries,
                                            mix_seed(query_seed, uint64_t(t)));
                    int n = int(qb.positions.size());
                    fb.queries = Tensor<double>({n, 3});
                    fb.occ_labels = Tensor<double>({n, 1});
                    for (int q = 0; q < n; ++q) {
                        fb.queries.at2(q, 0) = qb.positions[size_t(q)].x;
                        fb.queries.at2(q, 1) = qb.positions[size_t(q)].y;
                        fb.queries.at2(q, 2) = qb.positions[size_t(q)].z;
                        fb.occ_labels.data[size_t(q)] = double(qb.labels[size_t(q)]);
                    }
                }
            }
        }
    }
    return b;
}

// -------------------------------------------------------------- forward pass

namespace {

template <typename T>
Tensor<T> tensor_cast(const Tensor<double>& d) {
    Tensor<T> t(d.shape);
    for (size_t i = 0; i < d.data.size(); ++i) t.data[i] = T(d.data[i]);
    return t;
}

}  // namespace

template <typename T>
ForwardResult<T> forward_window(Tape<T>& tape, const Params<T>& params, const ModelConfig& cfg,
                                const WindowBatch& batch, bool causal, bool with_loss,
                                std::map<std::string, int>* param_ids) {
    cfg.validate();
    const int Tn = int(batch.frames.size());
    require(Tn > 0, Errc::invalid_argument, "forward pass needs at least one frame");
    require(batch.n_valid > 0, Errc::invalid_argument, "forward pass needs a valid frame");
    const int e = cfg.embed_dim;

    std::map<std::string, int> pid;
    for (const auto& [name, t] : params.tensors) pid[name] = tape.leaf(t);
    auto P = [&](const std::string& n) {
        auto it = pid.find(n);
        require(it != pid.end(), Errc::invalid_argument, "missing parameter " + n);
        return it->second;
    };
    auto linear = [&](int x, const std::string& w, const std::string& bias) {
        return tape.add(tape.matmul(x, P(w)), P(bias));
    };
    auto mlp = [&](int x, const std::string& prefix, size_t n_hidden) {
        for (size_t i = 0; i < n_hidden; ++i) {
            std::string s = std::to_string(i);
            x = tape.relu(linear(x, prefix + ".w" + s, prefix + ".b" + s));
        }
        return linear(x, prefix + ".wout", prefix + ".bout");
    };
    auto encode = [&](const Tensor<double>& pts, const std::string& branch) {
        if (pts.shape[0] == 0) return P("enc." + branch + ".empty");
        int x = tape.leaf(tensor_cast<T>(pts));
        return tape.max_rows(mlp(x, "enc." + branch, cfg.encoder_widths.size()));
    };

    // per-slot branch latents; padded slots hold zero rows
    Tensor<T> zero_row({e});
    std::vector<int> zl_rows(static_cast<size_t>(Tn));
    std::vector<int> zg_rows(static_cast<size_t>(Tn));
    for (int t = 0; t < Tn; ++t) {
        const FrameBatch& fb = batch.frames[size_t(t)];
        if (!fb.valid) {
            int z = tape.leaf(zero_row);
            zl_rows[size_t(t)] = z;
            zg_rows[size_t(t)] = z;
            continue;
        }
        zl_rows[size_t(t)] = encode(fb.local_pts, "local");
        zg_rows[size_t(t)] =
            cfg.single_branch ? zl_rows[size_t(t)] : encode(fb.global_pts, "global");
    }
    int zl = tape.stack_rows(zl_rows);
    int zg = tape.stack_rows(zg_rows);

    // attention input: branch latent + position code + box embedding, with
    // padded slots forced to zero
    Tensor<double> boxes({Tn, 7});
    std::vector<double> positions(static_cast<size_t>(Tn));
    Tensor<T> valid_mask({Tn, e});
    for (int t = 0; t < Tn; ++t) {
        positions[size_t(t)] = double(t);
        const FrameBatch& fb = batch.frames[size_t(t)];
        for (int i = 0; i < 7; ++i) boxes.at2(t, i) = fb.box7[size_t(i)];
        for (int i = 0; i < e; ++i) valid_mask.at2(t, i) = fb.valid ? T(1) : T(0);
    }
    int box_code = mlp(tape.leaf(tensor_cast<T>(boxes)), "box_embed", 1);
    int gamma = tape.leaf(ad::sinusoidal_pe<T>(positions, e));
    int x = tape.mul(tape.add(tape.add(zg, gamma), box_code), tape.leaf(valid_mask));

    // attention mask: a slot reads valid slots (its past under causal mode)
    // plus its own diagonal so every softmax row stays well-defined
    Tensor<T> attn_mask({Tn, Tn});
    for (int t = 0; t < Tn; ++t)
        for (int s = 0; s < Tn; ++s) {
            bool open = s == t || (batch.frames[size_t(t)].valid && batch.frames[size_t(s)].valid &&
                                   (!causal || s <= t));
            attn_mask.at2(t, s) = open ? T(0) : T(ad::kMaskedOut);
        }

    const int dh = cfg.hidden / cfg.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = "attn." + std::to_string(l);
        int q = linear(x, p + ".wq", p + ".bq");
        int k = linear(x, p + ".wk", p + ".bk");
        int v = linear(x, p + ".wv", p + ".bv");
        int merged = -1;
        for (int h = 0; h < cfg.heads; ++h) {
            int qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            int kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            int vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            int scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh);
            int weights = tape.softmax_masked(scores, attn_mask);
            int ho = tape.matmul(weights, vh);
            merged = h == 0 ? ho : tape.concat(merged, ho);
        }
        int attn_out = linear(merged, p + ".wo", p + ".bo");
        x = tape.layernorm(tape.add(x, attn_out), P(p + ".ln_g"), P(p + ".ln_b"));
    }

    ForwardResult<T> res;
    res.z = mlp(tape.concat(zl, x), "fuse.z", 1);
    res.z_det = mlp(tape.concat(res.z, zg), "fuse.det", 1);

    int det_out = mlp(res.z_det, "det", 1);
    res.deltas = tape.slice_cols(det_out, 0, 7);
    int logits = tape.slice_cols(det_out, 7, 8);
    res.scores = tape.sigmoid(logits);

    if (with_loss) {
        // occupancy term over every supervised frame's query batch
        std::vector<int> dec_inputs;
        std::vector<double> labels;
        for (int t = 0; t < Tn; ++t) {
            const FrameBatch& fb = batch.frames[size_t(t)];
            if (!fb.valid || !fb.matched || fb.queries.numel() == 0) continue;
            int zrow = tape.broadcast_rows(tape.row(res.z, t), fb.queries.shape[0]);
            dec_inputs.push_back(tape.concat(zrow, tape.leaf(tensor_cast<T>(fb.queries))));
            labels.insert(labels.end(), fb.occ_labels.data.begin(), fb.occ_labels.data.end());
        }
        int loss = -1;
        if (!dec_inputs.empty()) {
            int dec_in = dec_inputs.size() == 1 ? dec_inputs[0] : tape.stack_rows(dec_inputs);
            res.occ_probs = tape.sigmoid(mlp(dec_in, "dec", cfg.decoder_widths.size()));
            Tensor<T> label_t({int(labels.size()), 1});
            for (size_t i = 0; i < labels.size(); ++i) label_t.data[i] = T(labels[i]);
            int l_occ = tape.bce(res.occ_probs, label_t);
            res.occ_term = double(tape.value(l_occ).data[0]);
            loss = l_occ;
        }

        // detection term over matched frames
        std::vector<int> delta_rows;
        std::vector<double> det_targets;
        for (int t = 0; t < Tn; ++t) {
            const FrameBatch& fb = batch.frames[size_t(t)];
            if (!fb.valid || !fb.matched) continue;
            delta_rows.push_back(tape.row(res.deltas, t));
            det_targets.insert(det_targets.end(), fb.det_target.begin(), fb.det_target.end());
        }
        if (!delta_rows.empty()) {
            int d = tape.stack_rows(delta_rows);
            Tensor<T> target({int(delta_rows.size()), 7});
            for (size_t i = 0; i < det_targets.size(); ++i) target.data[i] = T(det_targets[i]);
            int l_det = tape.l1(d, target);
            res.det_term = double(tape.value(l_det).data[0]);
            int weighted = tape.scale(l_det, cfg.lambda_det);
            loss = loss < 0 ? weighted : tape.add(loss, weighted);
        }

        // objectness term over every valid frame
        std::vector<int> score_rows;
        std::vector<double> score_targets;
        for (int t = 0; t < Tn; ++t) {
            const FrameBatch& fb = batch.frames[size_t(t)];
            if (!fb.valid) continue;
            score_rows.push_back(tape.row(res.scores, t));
            score_targets.push_back(fb.score_target);
        }
        require(!score_rows.empty(), Errc::invalid_argument,
                "loss needs at least one valid frame");
        int s = tape.stack_rows(score_rows);
        Tensor<T> starget({int(score_rows.size()), 1});
        for (size_t i = 0; i < score_targets.size(); ++i) starget.data[i] = T(score_targets[i]);
        int l_score = tape.bce(s, starget);
        res.score_term = double(tape.value(l_score).data[0]);
        int weighted = tape.scale(l_score, cfg.lambda_score);
        loss = loss < 0 ? weighted : tape.add(loss, weighted);

        res.loss = loss;
        res.loss_value = double(tape.value(loss).data[0]);
    }

    if (param_ids) *param_ids = std::move(pid);
    return res;
}

template ForwardResult<float> forward_window<float>(Tape<float>&, const Params<float>&,
                                                    const ModelConfig&, const WindowBatch&, bool,
                                                    bool, std::map<std::string, int>*);
template ForwardResult<double> forward_window<double>(Tape<double>&, const Params<double>&,
                                                      const ModelConfig&, const WindowBatch&, bool,
                                                      bool, std::map<std::string, int>*);

// ------------------------------------------------------------------- decode

std::vector<double> decode_occupancy(const Params<float>& params, const ModelConfig& cfg,
                                     const std::vector<float>& z_row,
                                     const std::vector<Vec3>& queries) {
    cfg.validate();
    require(int(z_row.size()) == cfg.fused_dim, Errc::invalid_argument,
            "latent width mismatch in decode");
    const int in_dim = cfg.fused_dim + 3;
    std::vector<float> cur, next;
    std::vector<double> out;
    out.reserve(queries.size());
    for (const Vec3& q : queries) {
        require(q.finite(), Errc::invalid_argument, "decode query must be finite");
        cur.assign(z_row.begin(), z_row.end());
        cur.push_back(float(q.x));
        cur.push_back(float(q.y));
        cur.push_back(float(q.z));
        int width = in_dim;
        for (size_t li = 0; li <= cfg.decoder_widths.size(); ++li) {
            bool last = li == cfg.decoder_widths.size();
            std::string s = last ? "out" : std::to_string(li);
            const Tensor<float>& w = params.at("dec.w" + s);
            const Tensor<float>& b = params.at("dec.b" + s);
            require(w.shape[0] == width, Errc::internal, "decoder width mismatch");
            int out_dim = w.shape[1];
            next.assign(size_t(out_dim), 0.0f);
            for (int i = 0; i < width; ++i) {
                float xi = cur[size_t(i)];
                const float* wr = w.data.data() + size_t(i) * size_t(out_dim);
                for (int j = 0; j < out_dim; ++j) next[size_t(j)] += xi * wr[j];
            }
            for (int j = 0; j < out_dim; ++j) {
                next[size_t(j)] += b.data[size_t(j)];
                if (!last && next[size_t(j)] < 0.0f) next[size_t(j)] = 0.0f;
            }
            cur = next;
            width = out_dim;
        }
        double x = double(cur[0]);
        double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        out.push_back(p);
    }
    return out;
}

// --------------------------------------------------------------------- loss

namespace {

double bce_mean(const std::vector<double>& probs, const std::vector<double>& labels) {
    const double eps = 1e-7;
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        double p = std::clamp(probs[i], eps, 1.0 - eps);
        acc -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    return acc / double(probs.size());
}

}  // namespace

double compute_loss(const std::vector<double>& occ_probs, const std::vector<double>& occ_labels,
                    const std::vector<std::array<double, 7>>& residuals,
                    const std::vector<std::array<double, 7>>& residual_targets,
                    const std::vector<double>& scores, const std::vector<double>& score_targets,
                    const ModelConfig& cfg) {
    cfg.validate();
    require(occ_probs.size() == occ_labels.size(), Errc::invalid_argument,
            "occupancy probabilities and labels must pair up");
    require(residuals.size() == residual_targets.size(), Errc::invalid_argument,
            "residuals and targets must pair up");
    require(scores.size() == score_targets.size(), Errc::invalid_argument,
            "scores and targets must pair up");
    require(!scores.empty(), Errc::invalid_argument, "loss needs at least one valid frame");

    double loss = 0.0;
    if (!occ_probs.empty()) loss += bce_mean(occ_probs, occ_labels);
    if (!residuals.empty()) {
        double acc = 0.0;
        for (size_t i = 0; i < residuals.size(); ++i)
            for (int j = 0; j < 7; ++j)
                acc += std::abs(residuals[i][size_t(j)] - residual_targets[i][size_t(j)]);
        loss += cfg.lambda_det * acc / double(residuals.size() * 7);
    }
    loss += cfg.lambda_score * bce_mean(scores, score_targets);
    return loss;
}

// --------------------------------------------------------------- checkpoint

io::CheckpointData to_checkpoint(const ModelBundle& m, const json& training_meta) {
    m.cfg.validate();
    io::CheckpointData c;
    json manifest = json::array();
    size_t total = 0;
    for (const auto& [name, t] : m.params.tensors) {
        manifest.push_back({{"name", name}, {"shape", t.shape}});
        total += t.data.size();
    }
    c.header = json{{"kind", "occupancy-model"},
                    {"config", config_to_json(m.cfg)},
                    {"manifest", manifest}};
    if (!training_meta.is_null()) c.header["training"] = training_meta;
    c.payload.reserve(total);
    for (const auto& [name, t] : m.params.tensors)
        c.payload.insert(c.payload.end(), t.data.begin(), t.data.end());
    return c;
}

ModelBundle from_checkpoint(const io::CheckpointData& c) {
    require(c.header.is_object() && c.header.value("kind", "") == "occupancy-model",
            Errc::data_error, "checkpoint does not hold an occupancy model");
    require(c.header.contains("config") && c.header.contains("manifest"), Errc::data_error,
            "model checkpoint is missing its config or manifest");
    ModelBundle m;
    m.cfg = config_from_json(c.header.at("config"));

    std::vector<std::string> expected = param_manifest(m.cfg);
    const json& manifest = c.header.at("manifest");
    require(manifest.is_array() && manifest.size() == expected.size(), Errc::data_error,
            "model manifest does not match its config");
    size_t off = 0;
    for (size_t i = 0; i < manifest.size(); ++i) {
        const json& entry = manifest[i];
        std::string name = entry.at("name").get<std::string>();
        require(name == expected[i], Errc::data_error,
                "unexpected parameter " + name + " in checkpoint");
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        Tensor<float>& t = m.params.add(name, shape);
        require(off + t.data.size() <= c.payload.size(), Errc::data_error,
                "checkpoint payload is shorter than its manifest");
        std::copy(c.payload.begin() + ptrdiff_t(off),
                  c.payload.begin() + ptrdiff_t(off + t.data.size()), t.data.begin());
        off += t.data.size();
    }
    require(off == c.payload.size(), Errc::data_error,
            "checkpoint payload is longer than its manifest");
    // shape sanity against the config-derived specs
    for (const auto& s : param_specs(m.cfg)) {
        const Tensor<float>& t = m.params.at(s.name);
        require(t.shape == s.shape, Errc::data_error, "bad shape for parameter " + s.name);
    }
    return m;
}

// ----------------------------------------------------------------- training

namespace {

Params<float> clone_params(const Params<float>& p) { return p; }

// mean IoU of dense decodes at the last supervised frame of each window
double val_iou_probe(const Params<float>& params, const ModelConfig& cfg,
                     const std::vector<Window>& windows, const std::map<int, OccGrid>& gt_grids,
                     int cap) {
    std::vector<eval::OccEvalRecord> records;
    int used = 0;
    for (const Window& w : windows) {
        if (used >= cap) break;
        WindowBatch wb = make_window_batch(w, gt_grids, cfg, 0, false);
        if (wb.n_valid == 0) continue;
        int probe = -1;
        for (int t = int(wb.frames.size()) - 1; t >= 0; --t)
            if (wb.frames[size_t(t)].valid && wb.frames[size_t(t)].matched &&
                gt_grids.count(w.tracklet.frames[size_t(t)].gt_track)) {
                probe = t;
                break;
            }
        if (probe < 0) continue;
        ++used;
        Tape<float> tape;
        auto fr = forward_window(tape, params, cfg, wb, true, false);
        const Tensor<float>& z = tape.value(fr.z);
        std::vector<float> zrow(z.data.begin() + ptrdiff_t(size_t(probe) * size_t(cfg.fused_dim)),
                                z.data.begin() + ptrdiff_t((size_t(probe) + 1) * size_t(cfg.fused_dim)));
        const FrameBatch& fb = wb.frames[size_t(probe)];
        GridSpec spec(fb.proposal.dims, 0.2);
        std::vector<Vec3> centers;
        centers.reserve(spec.cell_count());
        for (int k = 0; k < spec.nz; ++k)
            for (int j = 0; j < spec.ny; ++j)
                for (int i = 0; i < spec.nx; ++i) centers.push_back(spec.center(i, j, k));
        std::vector<double> probs = decode_occupancy(params, cfg, zrow, centers);
        OccGrid pred(spec, CellState::free);
        for (size_t i = 0; i < probs.size(); ++i)
            if (probs[i] >= 0.5) pred.cells[i] = uint8_t(CellState::occupied);
        const OccGrid& gt = gt_grids.at(w.tracklet.frames[size_t(probe)].gt_track);
        auto rec = eval::occupancy_iou(pred, fb.proposal, gt, *fb.gt_box, w.tracklet.track_id,
                                       fb.source_frame);
        if (rec) records.push_back(*rec);
    }
    if (records.empty()) return 0.0;
    return eval::aggregate_miou(records).miou_box;
}

}  // namespace

TrainResult train(const trk::TrackletDataset& ds, const std::map<int, OccGrid>& gt_grids,
                  const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    mcfg.validate();
    require(tcfg.epochs > 0 && tcfg.lr > 0.0 && tcfg.batch_size > 0, Errc::invalid_argument,
            "training config needs positive epochs, lr, and batch size");
    require(tcfg.val_fraction >= 0.0 && tcfg.val_fraction < 1.0, Errc::invalid_argument,
            "validation fraction must be in [0, 1)");
    require(!ds.tracklets.empty(), Errc::invalid_argument, "training needs a non-empty dataset");

    // split by track id so clean and noisy variants of one object stay on the
    // same side
    std::vector<int> track_ids;
    for (const Tracklet& t : ds.tracklets) track_ids.push_back(t.track_id);
    std::sort(track_ids.begin(), track_ids.end());
    track_ids.erase(std::unique(track_ids.begin(), track_ids.end()), track_ids.end());
    Rng split_rng(mix_seed(tcfg.seed, 0x5311fULL));
    split_rng.shuffle(track_ids);
    size_t n_val = size_t(std::llround(tcfg.val_fraction * double(track_ids.size())));
    std::map<int, bool> val_of;
    for (size_t i = 0; i < track_ids.size(); ++i) val_of[track_ids[i]] = i < n_val;

    std::vector<Window> train_w, val_w;
    for (const Tracklet& t : ds.tracklets) {
        std::vector<Window> ws = trk::regularize_length(t, mcfg.max_len);
        auto& dst = val_of.at(t.track_id) ? val_w : train_w;
        for (Window& w : ws) dst.push_back(std::move(w));
    }
    require(!train_w.empty(), Errc::invalid_argument, "no training windows after the split");

    Params<float> params = init_params(mcfg, tcfg.seed);
    ad::AdamState<float> adam;
    ad::AdamConfig acfg;
    acfg.lr = tcfg.lr;

    const int64_t batches_per_epoch =
        int64_t((train_w.size() + size_t(tcfg.batch_size) - 1) / size_t(tcfg.batch_size));
    const int64_t total_steps = int64_t(tcfg.epochs) * batches_per_epoch;

    TrainResult result;
    Params<float> last_good = clone_params(params);
    double best_metric = -std::numeric_limits<double>::infinity();
    Rng order_rng(mix_seed(tcfg.seed, 0x0bdeULL));
    int64_t global_step = 0;

    std::vector<size_t> order(train_w.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t loss_n = 0;
        bool bad = false;
        std::string bad_reason;

        for (size_t start = 0; start < order.size() && !bad; start += size_t(tcfg.batch_size)) {
            size_t stop = std::min(order.size(), start + size_t(tcfg.batch_size));
            std::map<std::string, Tensor<float>> grad_acc;
            double lr_scale = ad::cosine_lr(1.0, global_step, total_steps);
            for (size_t bi = start; bi < stop; ++bi) {
                size_t widx = order[bi];
                uint64_t qseed = mix_seed(tcfg.seed, (uint64_t(epoch) << 24) ^ uint64_t(widx));
                WindowBatch wb = make_window_batch(train_w[widx], gt_grids, mcfg, qseed, true);
                Tape<float> tape;
                std::map<std::string, int> pid;
                auto fwd = forward_window(tape, params, mcfg, wb, true, true, &pid);
                if (!std::isfinite(fwd.loss_value)) {
                    bad = true;
                    bad_reason = "non-finite loss at epoch " + std::to_string(epoch);
                    break;
                }
                tape.backward(fwd.loss);
                for (const auto& [name, id] : pid) {
                    const Tensor<float>& g = tape.grad(id);
                    auto [it, fresh] = grad_acc.try_emplace(name, Tensor<float>(g.shape));
                    for (size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
                }
                loss_sum += fwd.loss_value;
                ++loss_n;
            }
            if (bad) break;
            double inv = 1.0 / double(stop - start);
            for (auto& [name, g] : grad_acc)
                for (auto& x : g.data) x = float(double(x) * inv);
            try {
                ad::adam_step(params, grad_acc, adam, acfg, lr_scale);
            } catch (const Error& err) {
                bad = true;
                bad_reason = err.what();
            }
            ++global_step;
        }

        if (bad) {
            result.aborted = true;
            result.abort_reason = bad_reason;
            result.model = ModelBundle{mcfg, last_good};
            return result;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_n > 0 ? loss_sum / double(loss_n) : 0.0;
        log.lr = tcfg.lr * ad::cosine_lr(1.0, global_step > 0 ? global_step - 1 : 0, total_steps);

        if (!val_w.empty()) {
            double vsum = 0.0;
            int64_t vn = 0;
            for (size_t i = 0; i < val_w.size(); ++i) {
                uint64_t qseed = mix_seed(tcfg.seed, 0xfeedULL ^ uint64_t(i));
                WindowBatch wb = make_window_batch(val_w[i], gt_grids, mcfg, qseed, true);
                Tape<float> tape;
                auto fwd = forward_window(tape, params, mcfg, wb, true, true);
                vsum += fwd.loss_value;
                ++vn;
            }
            log.val_loss = vn > 0 ? vsum / double(vn) : 0.0;
            log.val_iou = val_iou_probe(params, mcfg, val_w, gt_grids, tcfg.val_iou_windows);
        }

        result.log.push_back(log);
        if (on_epoch) on_epoch(log);

        double metric = val_w.empty() ? -log.train_loss : log.val_iou;
        if (metric > best_metric) {
            best_metric = metric;
            result.best_epoch = epoch;
            result.model = ModelBundle{mcfg, clone_params(params)};
        }
        last_good = clone_params(params);
    }
    if (result.best_epoch < 0) {
        result.best_epoch = tcfg.epochs;
        result.model = ModelBundle{mcfg, last_good};
    }
    return result;
}

// ---------------------------------------------------------------- inference

namespace {

std::vector<Vec3> grid_centers(const GridSpec& spec) {
    std::vector<Vec3> centers;
    centers.reserve(spec.cell_count());
    for (int k = 0; k < spec.nz; ++k)
        for (int j = 0; j < spec.ny; ++j)
            for (int i = 0; i < spec.nx; ++i) centers.push_back(spec.center(i, j, k));
    return centers;
}

OccGrid threshold_grid(const GridSpec& spec, const std::vector<double>& probs) {
    OccGrid g(spec, CellState::free);
    for (size_t i = 0; i < probs.size(); ++i)
        if (probs[i] >= 0.5) g.cells[i] = uint8_t(CellState::occupied);
    return g;
}

std::vector<float> latent_row(const Tensor<float>& z, int t, int width) {
    return std::vector<float>(z.data.begin() + ptrdiff_t(size_t(t) * size_t(width)),
                              z.data.begin() + ptrdiff_t((size_t(t) + 1) * size_t(width)));
}

bool bitwise_same_box(const Box7& a, const Box7& b) {
    return std::memcmp(&a, &b, sizeof(Box7)) == 0;
}

}  // namespace

OccGrid extrapolate_to_gt(const ModelBundle& m, const std::vector<float>& z_row, const Box7& roi,
                          const Box7& gt_box, double voxel) {
    roi.validate();
    gt_box.validate();
    GridSpec spec(gt_box.dims, voxel);
    std::vector<Vec3> centers = grid_centers(spec);
    if (!bitwise_same_box(roi, gt_box)) {
        RigidTransform gt_to_roi =
            geom::compose(geom::box_to_local(roi), geom::box_to_world(gt_box));
        for (Vec3& c : centers) c = gt_to_roi.apply(c);
    }
    return threshold_grid(spec, decode_occupancy(m.params, m.cfg, z_row, centers));
}

std::vector<FramePrediction> infer_tracklet(const ModelBundle& m, const Tracklet& t,
                                            const InferConfig& icfg) {
    m.cfg.validate();
    t.validate();
    require(icfg.voxel > 0.0, Errc::invalid_argument, "inference voxel size must be positive");
    const int T = int(t.frames.size());
    const int span = icfg.window <= 0 ? T : icfg.window;

    std::vector<FramePrediction> out(static_cast<size_t>(T));
    for (int i = 0; i < T; ++i) out[size_t(i)].source_frame = t.frames[size_t(i)].source_frame;

    auto predict_slot = [&](const WindowBatch& wb, const Tensor<float>& z,
                            const Tensor<float>& deltas, const Tensor<float>& scores, int slot,
                            FramePrediction& dst) {
        const FrameBatch& fb = wb.frames[size_t(slot)];
        std::vector<float> zrow = latent_row(z, slot, m.cfg.fused_dim);
        if (icfg.extrapolate) {
            require(fb.gt_box.has_value(), Errc::invalid_argument,
                    "extrapolated decoding needs a GT box on every valid frame");
            dst.grid = extrapolate_to_gt(m, zrow, fb.proposal, *fb.gt_box, icfg.voxel);
        } else {
            GridSpec spec(fb.proposal.dims, icfg.voxel);
            dst.grid =
                threshold_grid(spec, decode_occupancy(m.params, m.cfg, zrow, grid_centers(spec)));
        }
        std::array<double, 7> r;
        for (int i = 0; i < 7; ++i) r[size_t(i)] = double(deltas.at2(slot, i));
        dst.proposal = fb.proposal;
        dst.refined = apply_residual(fb.proposal, r);
        dst.score = double(scores.at2(slot, 0));
        dst.valid = true;
    };

    const bool whole_track = icfg.offline || span >= T;
    if (whole_track) {
        Window w;
        w.tracklet = t;
        w.mask.assign(size_t(T), 1);
        WindowBatch wb = make_window_batch(w, {}, m.cfg, 0, false);
        Tape<float> tape;
        auto fwd = forward_window(tape, m.params, m.cfg, wb, !icfg.offline, false);
        const Tensor<float>& z = tape.value(fwd.z);
        const Tensor<float>& deltas = tape.value(fwd.deltas);
        const Tensor<float>& scores = tape.value(fwd.scores);
        for (int i = 0; i < T; ++i)
            if (wb.frames[size_t(i)].valid) predict_slot(wb, z, deltas, scores, i, out[size_t(i)]);
        return out;
    }

    for (int i = 0; i < T; ++i) {
        if (!t.frames[size_t(i)].valid) continue;
        int lo = std::max(0, i - span + 1);
        Window w;
        w.tracklet.track_id = t.track_id;
        w.tracklet.frames.assign(t.frames.begin() + lo, t.frames.begin() + i + 1);
        w.mask.assign(size_t(i - lo + 1), 1);
        WindowBatch wb = make_window_batch(w, {}, m.cfg, 0, false);
        Tape<float> tape;
        auto fwd = forward_window(tape, m.params, m.cfg, wb, true, false);
        const Tensor<float>& z = tape.value(fwd.z);
        const Tensor<float>& deltas = tape.value(fwd.deltas);
        const Tensor<float>& scores = tape.value(fwd.scores);
        predict_slot(wb, z, deltas, scores, i - lo, out[size_t(i)]);
    }
    return out;
}

std::vector<FramePrediction> baseline_complete(const Tracklet& t, double voxel) {
    t.validate();
    require(voxel > 0.0, Errc::invalid_argument, "baseline voxel size must be positive");
    std::vector<FramePrediction> out(t.frames.size());
    std::vector<Vec3> pooled;  // object-frame points of all valid frames so far
    for (size_t i = 0; i < t.frames.size(); ++i) {
        const trk::TrackletFrame& fr = t.frames[i];
        out[i].source_frame = fr.source_frame;
        if (!fr.valid) continue;
        RigidTransform to_local = geom::box_to_local(fr.proposal);
        for (const Vec3& p : fr.points.points) pooled.push_back(to_local.apply(p));

        GridSpec spec(fr.proposal.dims, voxel);
        OccGrid g(spec, CellState::free);
        for (const Vec3& p : pooled) {
            int ci = 0, cj = 0, ck = 0;
            if (spec.locate(p, ci, cj, ck)) g.set(ci, cj, ck, CellState::occupied);
        }
        out[i].valid = true;
        out[i].proposal = fr.proposal;
        out[i].refined = fr.proposal;
        out[i].score = 1.0;
        out[i].grid = std::move(g);
    }
    return out;
}

}  // namespace ocf::net
