#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "occnet.hpp"

namespace ocf::pipe {

using nlohmann::json;

constexpr const char* kToolVersion = "0.1.0";

// Digest string for one file: "fnv1a64:" + 16 hex digits.
std::string file_digest(const std::string& path);

// Record of one stage execution, written to <out_dir>/manifest.json on
// success. wall_seconds is the only field allowed to differ between re-runs
// with the same inputs and seed.
struct RunManifest {
    std::string tool_version = kToolVersion;
    std::string subcommand;
    json config = json::object();
    json inputs = json::object();   // name -> {path, digest}
    json outputs = json::object();  // relative path -> digest
    uint64_t seed = 0;
    double wall_seconds = 0.0;
};

json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const json& j);
void write_manifest(const std::string& dir, const RunManifest& m);
std::optional<RunManifest> read_manifest(const std::string& dir);

// Guards the stage hash chain: every output recorded in the directory's
// manifest must still hash to the recorded digest. A directory without a
// manifest passes (hand-authored inputs are legitimate chain roots); a
// recorded file that is missing or re-written fails hard.
void verify_upstream(const std::string& dir);

// Exclusive advisory lock on <dir>/.lock, held for the object's lifetime.
// A second concurrent holder fails immediately instead of queueing.
class DirLock {
  public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

  private:
    int fd_ = -1;
};

// Parallelism cap: OCCFORGE_THREADS when set (must be a positive integer),
// otherwise the hardware concurrency, and never below one.
int thread_cap();

// ---- stages -------------------------------------------------------------------
// Each stage locks its output directory, validates upstream manifests, writes
// its artifacts atomically, and finishes with a manifest. Inputs are paths
// produced by earlier stages (or hand-authored roots such as scene files).

// Scene document -> simulated log directory (range images + GT boxes).
RunManifest simulate_stage(const std::string& scene_path, const std::string& out_dir,
                           std::optional<uint64_t> seed);

// Sim log -> one tri-state occupancy grid per track ("track_<id>.ocog").
RunManifest annotate_stage(const std::string& simlog_dir, const std::string& out_dir,
                           double voxel);

// Sim log -> tracklet dataset. noise_path may be empty (defaults); clean
// builds proposals straight from the ground truth boxes with no drops.
RunManifest tracklets_stage(const std::string& simlog_dir, const std::string& noise_path,
                            const std::string& out_dir, bool clean,
                            std::optional<uint64_t> seed);

// Datasets + GT grids -> model checkpoint and epoch log. Config paths may be
// empty for the built-in desk-scale defaults. An aborted run still writes the
// last-good checkpoint, then raises.
RunManifest train_stage(const std::vector<std::string>& dataset_dirs,
                        const std::string& grids_dir, const std::string& model_config_path,
                        const std::string& train_config_path, const std::string& out_dir,
                        std::optional<uint64_t> seed,
                        const std::function<void(const net::EpochLog&)>& on_epoch = nullptr);

// Checkpoint + dataset -> per-frame predicted grids and refined boxes.
RunManifest infer_stage(const std::string& checkpoint_dir, const std::string& dataset_dir,
                        const std::string& out_dir, const net::InferConfig& icfg);

// Dataset -> pooled-point baseline predictions in the same layout.
RunManifest baseline_stage(const std::string& dataset_dir, const std::string& out_dir,
                           double voxel);

// Predictions + GT grids -> occupancy metrics JSON.
RunManifest eval_occ_stage(const std::string& pred_dir, const std::string& grids_dir,
                           const std::string& out_dir);

// Predictions + sim log -> AP/APH table JSON. use_proposals scores the
// unrefined input boxes instead of the refined ones.
RunManifest eval_det_stage(const std::string& pred_dir, const std::string& simlog_dir,
                           const std::string& out_dir, double iou_thr, bool use_proposals);

// One grid file -> ASCII PLY of its occupied voxels.
RunManifest export_ply_stage(const std::string& grid_path, const std::string& out_dir);

}  // namespace ocf::pipe
