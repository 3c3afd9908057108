#include "pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "annotation.hpp"

namespace fs = std::filesystem;

namespace ocf::pipe {

// ---------------------------------------------------------------- plumbing

std::string file_digest(const std::string& path) {
    return "fnv1a64:" + io::hash_hex(io::hash_file(path));
}

namespace {

// Sorted relative listing of a directory's regular files, minus the stage
// bookkeeping files.
std::vector<std::string> artifact_files(const std::string& dir) {
    std::vector<std::string> rels;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string rel = fs::relative(entry.path(), dir).generic_string();
        if (rel == "manifest.json" || rel == ".lock") continue;
        rels.push_back(std::move(rel));
    }
    std::sort(rels.begin(), rels.end());
    return rels;
}

json scan_outputs(const std::string& dir) {
    json out = json::object();
    for (const std::string& rel : artifact_files(dir))
        out[rel] = file_digest((fs::path(dir) / rel).string());
    return out;
}

// Aggregate digest of a file or a whole artifact directory.
std::string path_digest(const std::string& path) {
    if (fs::is_regular_file(path)) return file_digest(path);
    require(fs::is_directory(path), Errc::io_error, "missing input: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    for (const std::string& rel : artifact_files(path)) {
        h = fnv1a64(rel.data(), rel.size(), h);
        uint64_t fh = io::hash_file((fs::path(path) / rel).string());
        h = fnv1a64(&fh, sizeof fh, h);
    }
    return "fnv1a64:" + io::hash_hex(h);
}

json input_entry(const std::string& path) {
    return json{{"path", path}, {"digest", path_digest(path)}};
}

json box_arr(const geom::Box7& b) {
    return json::array(
        {b.center.x, b.center.y, b.center.z, b.dims.x, b.dims.y, b.dims.z, b.yaw});
}

geom::Box7 box_from_arr(const json& a) {
    require(a.is_array() && a.size() == 7, Errc::data_error, "box must be a 7-number array");
    geom::Box7 b({a[0].get<double>(), a[1].get<double>(), a[2].get<double>()},
                 {a[3].get<double>(), a[4].get<double>(), a[5].get<double>()},
                 a[6].get<double>());
    b.validate();
    return b;
}

std::string grid_file_name(int track_id, int source_frame) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "t%04d_f%04d.ocog", track_id, source_frame);
    return buf;
}

trk::NoiseConfig noise_from_json(const json& j) {
    trk::NoiseConfig n;
    if (j.contains("sigma_center_frac")) n.sigma_center_frac = j.at("sigma_center_frac").get<double>();
    if (j.contains("sigma_scale")) n.sigma_scale = j.at("sigma_scale").get<double>();
    if (j.contains("sigma_yaw")) n.sigma_yaw = j.at("sigma_yaw").get<double>();
    if (j.contains("p_drop")) n.p_drop = j.at("p_drop").get<double>();
    if (j.contains("drift_sigma")) n.drift_sigma = j.at("drift_sigma").get<double>();
    n.validate();
    return n;
}

json noise_to_json(const trk::NoiseConfig& n) {
    return json{{"sigma_center_frac", n.sigma_center_frac},
                {"sigma_scale", n.sigma_scale},
                {"sigma_yaw", n.sigma_yaw},
                {"p_drop", n.p_drop},
                {"drift_sigma", n.drift_sigma}};
}

// track_<id>.ocog files from the annotation stage.
std::map<int, grid::OccGrid> load_grid_dir(const std::string& dir) {
    std::map<int, grid::OccGrid> grids;
    for (const std::string& rel : artifact_files(dir)) {
        int id = -1;
        if (std::sscanf(rel.c_str(), "track_%d.ocog", &id) != 1) continue;
        if (rel != "track_" + std::to_string(id) + ".ocog") continue;
        grids.emplace(id, io::read_occgrid((fs::path(dir) / rel).string()));
    }
    require(!grids.empty(), Errc::data_error, "no track_<id>.ocog grids in " + dir);
    return grids;
}

// Stage wrapper: lock, time, run, scan outputs, write the manifest.
template <typename Body>
RunManifest run_stage(const std::string& subcommand, const std::string& out_dir, Body&& body) {
    fs::create_directories(out_dir);
    DirLock lock(out_dir);
    auto start = std::chrono::steady_clock::now();
    RunManifest m;
    m.subcommand = subcommand;
    body(m);
    m.outputs = scan_outputs(out_dir);
    m.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(out_dir, m);
    return m;
}

}  // namespace

json manifest_to_json(const RunManifest& m) {
    return json{{"tool_version", m.tool_version}, {"subcommand", m.subcommand},
                {"config", m.config},             {"inputs", m.inputs},
                {"outputs", m.outputs},           {"seed", m.seed},
                {"wall_seconds", m.wall_seconds}};
}

RunManifest manifest_from_json(const json& j) {
    require(j.is_object(), Errc::data_error, "manifest must be a JSON object");
    RunManifest m;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.subcommand = j.at("subcommand").get<std::string>();
    m.config = j.value("config", json::object());
    m.inputs = j.value("inputs", json::object());
    m.outputs = j.value("outputs", json::object());
    m.seed = j.value("seed", uint64_t(0));
    m.wall_seconds = j.value("wall_seconds", 0.0);
    return m;
}

void write_manifest(const std::string& dir, const RunManifest& m) {
    io::write_json_atomic((fs::path(dir) / "manifest.json").string(), manifest_to_json(m));
}

std::optional<RunManifest> read_manifest(const std::string& dir) {
    std::string path = (fs::path(dir) / "manifest.json").string();
    if (!fs::exists(path)) return std::nullopt;
    return manifest_from_json(io::read_json(path));
}

void verify_upstream(const std::string& dir) {
    require(fs::is_directory(dir), Errc::io_error, "missing input directory: " + dir);
    std::optional<RunManifest> m = read_manifest(dir);
    if (!m) return;  // chain root without a manifest
    for (const auto& [rel, digest] : m->outputs.items()) {
        std::string path = (fs::path(dir) / rel).string();
        require(fs::exists(path), Errc::data_error,
                "stale artifact directory " + dir + ": " + rel + " is missing");
        require(file_digest(path) == digest.get<std::string>(), Errc::data_error,
                "stale artifact directory " + dir + ": " + rel +
                    " changed after its stage ran");
    }
}

DirLock::DirLock(const std::string& dir) {
    fs::create_directories(dir);
    std::string path = (fs::path(dir) / ".lock").string();
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    require(fd_ >= 0, Errc::io_error, "cannot open lock file " + path);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw Error(Errc::io_error, "another run holds the output directory lock " + path);
    }
}

DirLock::~DirLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

int thread_cap() {
    if (const char* env = std::getenv("OCCFORGE_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        require(end != env && *end == '\0' && v >= 1 && v <= 4096, Errc::invalid_argument,
                "OCCFORGE_THREADS must be a positive integer");
        return int(v);
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? int(hc) : 1;
}

// ------------------------------------------------------------------- stages

RunManifest simulate_stage(const std::string& scene_path, const std::string& out_dir,
                           std::optional<uint64_t> seed) {
    return run_stage("simulate", out_dir, [&](RunManifest& m) {
        json doc = io::read_json(scene_path);
        uint64_t used_seed = 1;
        if (doc.contains("generate") && doc.at("generate").contains("seed"))
            used_seed = doc.at("generate").at("seed").get<uint64_t>();
        else if (doc.contains("seed"))
            used_seed = doc.at("seed").get<uint64_t>();
        if (seed) {
            used_seed = *seed;
            // the seed governs every stochastic part of the stage, including
            // procedural scene generation
            if (doc.contains("generate")) doc["generate"]["seed"] = used_seed;
        }

        io::SceneBundle bundle = io::load_scene_doc(doc);
        sim::SimLog log = sim::simulate(bundle.scene, bundle.sensor, used_seed, thread_cap());
        io::save_simlog(out_dir, log);

        m.seed = used_seed;
        m.config = json{{"scene", scene_path}, {"frames", int(log.frames.size())},
                        {"actors", int(log.scene.actors.size())}};
        m.inputs["scene"] = input_entry(scene_path);
    });
}

RunManifest annotate_stage(const std::string& simlog_dir, const std::string& out_dir,
                           double voxel) {
    require(voxel > 0.0, Errc::invalid_argument, "voxel size must be positive");
    verify_upstream(simlog_dir);
    return run_stage("annotate", out_dir, [&](RunManifest& m) {
        sim::SimLog log = io::load_simlog(simlog_dir);
        std::map<int, grid::OccGrid> grids = anno::annotate_objects(log, voxel, thread_cap());
        std::string scene_hash = file_digest((fs::path(simlog_dir) / "scene.json").string());
        for (const auto& [id, g] : grids) {
            std::string name = "track_" + std::to_string(id) + ".ocog";
            io::write_occgrid((fs::path(out_dir) / name).string(), g);
            io::OcogMeta meta;
            meta.track_id = id;
            meta.frame_first = 0;
            meta.frame_last = int(log.frames.size()) - 1;
            meta.scene_hash = scene_hash;
            io::write_json_atomic((fs::path(out_dir) / (name + ".json")).string(),
                                  io::ocog_meta_to_json(meta));
        }
        m.config = json{{"voxel", voxel}, {"tracks", int(grids.size())}};
        m.inputs["simlog"] = input_entry(simlog_dir);
    });
}

RunManifest tracklets_stage(const std::string& simlog_dir, const std::string& noise_path,
                            const std::string& out_dir, bool clean,
                            std::optional<uint64_t> seed) {
    verify_upstream(simlog_dir);
    return run_stage("tracklets", out_dir, [&](RunManifest& m) {
        trk::NoiseConfig noise;
        uint64_t used_seed = 1;
        if (!noise_path.empty()) {
            json nd = io::read_json(noise_path);
            noise = noise_from_json(nd);
            if (nd.contains("seed")) used_seed = nd.at("seed").get<uint64_t>();
            m.inputs["noise"] = input_entry(noise_path);
        }
        if (seed) used_seed = *seed;

        sim::SimLog log = io::load_simlog(simlog_dir);
        trk::TrackletDataset ds;
        ds.noise = clean ? trk::NoiseConfig{0.0, 0.0, 0.0, 0.0, 0.0} : noise;
        ds.seed = used_seed;
        ds.scene_hash = file_digest((fs::path(simlog_dir) / "scene.json").string());
        for (const sim::Actor& actor : log.scene.actors) {
            trk::Tracklet gt = trk::make_gt_tracklet(log, actor.track_id);
            ds.tracklets.push_back(
                clean ? gt
                      : trk::perturb_tracklet(log, gt, noise,
                                              mix_seed(used_seed, uint64_t(actor.track_id))));
        }
        trk::save_dataset(out_dir, ds);

        m.seed = used_seed;
        m.config = json{{"noise", noise_to_json(noise)},
                        {"clean", clean},
                        {"tracks", int(ds.tracklets.size())}};
        m.inputs["simlog"] = input_entry(simlog_dir);
    });
}

RunManifest train_stage(const std::vector<std::string>& dataset_dirs,
                        const std::string& grids_dir, const std::string& model_config_path,
                        const std::string& train_config_path, const std::string& out_dir,
                        std::optional<uint64_t> seed,
                        const std::function<void(const net::EpochLog&)>& on_epoch) {
    require(!dataset_dirs.empty(), Errc::invalid_argument, "training needs a dataset");
    for (const std::string& d : dataset_dirs) verify_upstream(d);
    verify_upstream(grids_dir);
    return run_stage("train", out_dir, [&](RunManifest& m) {
        trk::TrackletDataset merged;
        for (size_t i = 0; i < dataset_dirs.size(); ++i) {
            trk::TrackletDataset ds = trk::load_dataset(dataset_dirs[i]);
            if (i == 0) {
                merged = std::move(ds);
            } else {
                require(ds.scene_hash == merged.scene_hash, Errc::data_error,
                        "datasets come from different scenes: " + dataset_dirs[i]);
                for (auto& t : ds.tracklets) merged.tracklets.push_back(std::move(t));
            }
            m.inputs["dataset_" + std::to_string(i)] = input_entry(dataset_dirs[i]);
        }
        std::map<int, grid::OccGrid> grids = load_grid_dir(grids_dir);
        m.inputs["grids"] = input_entry(grids_dir);

        net::ModelConfig mcfg;
        if (!model_config_path.empty()) {
            mcfg = net::config_from_json(io::read_json(model_config_path));
            m.inputs["model_config"] = input_entry(model_config_path);
        }
        net::TrainConfig tcfg;
        if (!train_config_path.empty()) {
            tcfg = net::train_config_from_json(io::read_json(train_config_path));
            m.inputs["train_config"] = input_entry(train_config_path);
        }
        if (seed) tcfg.seed = *seed;
        m.seed = tcfg.seed;
        m.config = json{{"model", net::config_to_json(mcfg)},
                        {"train", net::train_config_to_json(tcfg)}};

        net::TrainResult result = net::train(merged, grids, mcfg, tcfg, on_epoch);

        json log_rows = json::array();
        for (const net::EpochLog& l : result.log)
            log_rows.push_back(json{{"epoch", l.epoch},
                                    {"train_loss", l.train_loss},
                                    {"val_loss", l.val_loss},
                                    {"val_iou", l.val_iou},
                                    {"lr", l.lr}});
        json meta = json{{"best_epoch", result.best_epoch},
                         {"aborted", result.aborted},
                         {"abort_reason", result.abort_reason},
                         {"seed", tcfg.seed}};
        io::write_checkpoint((fs::path(out_dir) / "model.ockp").string(),
                             net::to_checkpoint(result.model, meta));
        io::write_json_atomic((fs::path(out_dir) / "training_log.json").string(),
                              json{{"epochs", log_rows}, {"best_epoch", result.best_epoch}});
        require(!result.aborted, Errc::internal,
                "training aborted (" + result.abort_reason +
                    "); the last good checkpoint was kept");
    });
}

namespace {

void write_predictions(const std::string& out_dir, const trk::TrackletDataset& ds,
                       const net::ModelBundle* model, const net::InferConfig& icfg,
                       bool baseline, double voxel, json& config_out) {
    json records = json::array();
    for (const trk::Tracklet& t : ds.tracklets) {
        std::vector<net::FramePrediction> preds =
            baseline ? net::baseline_complete(t, voxel) : net::infer_tracklet(*model, t, icfg);
        for (size_t i = 0; i < preds.size(); ++i) {
            const net::FramePrediction& p = preds[i];
            if (!p.valid) continue;
            std::string gname = grid_file_name(t.track_id, p.source_frame);
            io::write_occgrid((fs::path(out_dir) / gname).string(), p.grid);
            const trk::TrackletFrame& fr = t.frames[i];
            json rec{{"track", t.track_id},
                     {"source_frame", p.source_frame},
                     {"grid", gname},
                     {"proposal", box_arr(p.proposal)},
                     {"refined", box_arr(p.refined)},
                     {"score", p.score},
                     {"gt_track", fr.gt_track}};
            rec["gt_box"] = fr.gt_box ? box_arr(*fr.gt_box) : json(nullptr);
            records.push_back(std::move(rec));
        }
    }
    json doc{{"mode", baseline ? "baseline" : "model"},
             {"voxel", voxel},
             {"decode_frame", !baseline && icfg.extrapolate ? "gt" : "roi"},
             {"records", records}};
    if (!baseline) {
        doc["window"] = icfg.window;
        doc["offline"] = icfg.offline;
    }
    config_out = doc;
    config_out.erase("records");
    io::write_json_atomic((fs::path(out_dir) / "predictions.json").string(), doc);
}

}  // namespace

RunManifest infer_stage(const std::string& checkpoint_dir, const std::string& dataset_dir,
                        const std::string& out_dir, const net::InferConfig& icfg) {
    require(icfg.voxel > 0.0, Errc::invalid_argument, "voxel size must be positive");
    verify_upstream(checkpoint_dir);
    verify_upstream(dataset_dir);
    return run_stage("infer", out_dir, [&](RunManifest& m) {
        net::ModelBundle model = net::from_checkpoint(
            io::read_checkpoint((fs::path(checkpoint_dir) / "model.ockp").string()));
        trk::TrackletDataset ds = trk::load_dataset(dataset_dir);
        write_predictions(out_dir, ds, &model, icfg, false, icfg.voxel, m.config);
        m.inputs["checkpoint"] = input_entry(checkpoint_dir);
        m.inputs["dataset"] = input_entry(dataset_dir);
    });
}

RunManifest baseline_stage(const std::string& dataset_dir, const std::string& out_dir,
                           double voxel) {
    require(voxel > 0.0, Errc::invalid_argument, "voxel size must be positive");
    verify_upstream(dataset_dir);
    return run_stage("baseline", out_dir, [&](RunManifest& m) {
        trk::TrackletDataset ds = trk::load_dataset(dataset_dir);
        net::InferConfig unused;
        write_predictions(out_dir, ds, nullptr, unused, true, voxel, m.config);
        m.inputs["dataset"] = input_entry(dataset_dir);
    });
}

RunManifest eval_occ_stage(const std::string& pred_dir, const std::string& grids_dir,
                           const std::string& out_dir) {
    verify_upstream(pred_dir);
    verify_upstream(grids_dir);
    return run_stage("eval-occ", out_dir, [&](RunManifest& m) {
        json doc = io::read_json((fs::path(pred_dir) / "predictions.json").string());
        bool gt_frame = doc.value("decode_frame", "roi") == std::string("gt");
        std::map<int, grid::OccGrid> grids = load_grid_dir(grids_dir);

        std::vector<eval::OccEvalRecord> records;
        int skipped = 0;
        for (const json& rec : doc.at("records")) {
            int gt_track = rec.at("gt_track").get<int>();
            if (rec.at("gt_box").is_null() || !grids.count(gt_track)) {
                ++skipped;
                continue;
            }
            geom::Box7 gt_box = box_from_arr(rec.at("gt_box"));
            geom::Box7 roi = gt_frame ? gt_box : box_from_arr(rec.at("proposal"));
            grid::OccGrid pred = io::read_occgrid(
                (fs::path(pred_dir) / rec.at("grid").get<std::string>()).string());
            auto r = eval::occupancy_iou(pred, roi, grids.at(gt_track), gt_box,
                                         rec.at("track").get<int>(),
                                         rec.at("source_frame").get<int>());
            if (r) records.push_back(*r);
        }
        require(!records.empty(), Errc::data_error, "no evaluable prediction/GT pairs");
        eval::MiouSummary s = eval::aggregate_miou(records);
        io::write_json_atomic((fs::path(out_dir) / "metrics.json").string(),
                              json{{"pooled_iou", s.iou},
                                   {"miou_box", s.miou_box},
                                   {"miou_track", s.miou_track},
                                   {"n_records", s.n_records},
                                   {"n_tracks", s.n_tracks},
                                   {"n_skipped", skipped}});
        m.config = json{{"decode_frame", gt_frame ? "gt" : "roi"}};
        m.inputs["predictions"] = input_entry(pred_dir);
        m.inputs["grids"] = input_entry(grids_dir);
    });
}

RunManifest eval_det_stage(const std::string& pred_dir, const std::string& simlog_dir,
                           const std::string& out_dir, double iou_thr, bool use_proposals) {
    verify_upstream(pred_dir);
    verify_upstream(simlog_dir);
    return run_stage("eval-det", out_dir, [&](RunManifest& m) {
        json doc = io::read_json((fs::path(pred_dir) / "predictions.json").string());
        std::vector<eval::DetBox> dets;
        for (const json& rec : doc.at("records")) {
            eval::DetBox d;
            d.frame_id = rec.at("source_frame").get<int>();
            d.box = box_from_arr(rec.at(use_proposals ? "proposal" : "refined"));
            d.score = rec.at("score").get<double>();
            dets.push_back(std::move(d));
        }
        sim::SimLog log = io::load_simlog(simlog_dir);
        std::vector<eval::GtBoxRecord> gts;
        for (size_t f = 0; f < log.frames.size(); ++f)
            for (const sim::GtBox& g : log.frames[f].gt_boxes) {
                eval::GtBoxRecord r;
                r.frame_id = int(f);
                r.box = g.box;
                r.n_points = g.n_points;
                r.range = g.range;
                gts.push_back(std::move(r));
            }

        std::vector<eval::ApRow> rows = eval::detection_table(dets, gts, iou_thr);
        json jrows = json::array();
        for (const eval::ApRow& r : rows)
            jrows.push_back(json{{"difficulty", r.difficulty},
                                 {"range_lo", r.bin.lo},
                                 {"range_hi", std::isfinite(r.bin.hi) ? json(r.bin.hi) : json()},
                                 {"ap", r.ap},
                                 {"aph", r.aph},
                                 {"n_gt", r.n_gt}});
        io::write_json_atomic(
            (fs::path(out_dir) / "metrics.json").string(),
            json{{"iou_threshold", iou_thr},
                 {"boxes", use_proposals ? "proposal" : "refined"},
                 {"rows", jrows}});
        m.config = json{{"iou_threshold", iou_thr},
                        {"boxes", use_proposals ? "proposal" : "refined"}};
        m.inputs["predictions"] = input_entry(pred_dir);
        m.inputs["simlog"] = input_entry(simlog_dir);
    });
}

RunManifest export_ply_stage(const std::string& grid_path, const std::string& out_dir) {
    return run_stage("export-ply", out_dir, [&](RunManifest& m) {
        grid::OccGrid g = io::read_occgrid(grid_path);
        std::string stem = fs::path(grid_path).stem().string();
        io::write_occupied_ply((fs::path(out_dir) / (stem + ".ply")).string(), g);
        m.config = json{{"grid", grid_path}};
        m.inputs["grid"] = input_entry(grid_path);
    });
}

}  // namespace ocf::pipe
