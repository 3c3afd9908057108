#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "evaluation.hpp"
#include "io.hpp"
#include "tracklets.hpp"

namespace ocf::net {

using ad::Params;
using ad::Tape;
using ad::Tensor;
using geom::Box7;
using geom::PointCloud;
using geom::Vec3;
using grid::OccGrid;
using nlohmann::json;
using trk::Tracklet;
using trk::Window;

// Network shape and loss weights. The default is the desk-scale preset; the
// full-scale configuration from the reference setup is available through
// full_scale() but is far outside what a single core trains in reasonable
// time, so it exists for documentation and config files, not for the demos.
struct ModelConfig {
    int embed_dim = 64;   // e: width of each encoder branch latent
    int fused_dim = 64;   // c: width after fusion (kept equal to e by default)
    std::vector<int> encoder_widths = {64, 64};  // per-point MLP hidden widths
    int layers = 3;       // attention blocks
    int heads = 2;
    int hidden = 128;     // attention width, split across heads
    std::vector<int> decoder_widths = {128, 128};
    bool single_branch = false;  // ablation: drop the shared-frame branch
    int max_len = 32;     // training window length
    int n_queries = 256;  // occupancy queries per supervised frame
    double lambda_det = 2.0;
    double lambda_score = 1.0;

    void validate() const;
    static ModelConfig full_scale();
};

json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const json& j);

// Parameter names in manifest (lexicographic) order, and a deterministic
// initialization for them.
std::vector<std::string> param_manifest(const ModelConfig& cfg);
Params<float> init_params(const ModelConfig& cfg, uint64_t seed);

// ---- geometry helpers -------------------------------------------------------

// N x 9 rows: the point's coordinates in the input frame followed by its
// signed distances to the box's six faces (+x, -x, +y, -y, +z, -z) measured
// in the box frame. Point cloud and box must live in the same frame.
Tensor<double> decorate_points(const PointCloud& pc, const Box7& roi);

// Residual encoding between a proposal and a target box: center offset in the
// proposal frame divided by the proposal diagonal, per-axis log size ratios,
// and the wrapped yaw difference. apply_residual inverts residual_target.
std::array<double, 7> residual_target(const Box7& roi, const Box7& gt);
Box7 apply_residual(const Box7& roi, const std::array<double, 7>& r);

// ---- window batches ---------------------------------------------------------

// One attention slot, fully precomputed: decorated point matrices for both
// branches, the proposal recentred to the window origin, and (for training)
// query positions/labels plus box-refinement targets.
struct FrameBatch {
    bool valid = false;
    bool matched = false;  // has a GT box (and, with targets, a GT grid)
    int source_frame = -1;
    Box7 proposal;                       // original frame
    std::optional<Box7> gt_box;          // original frame
    Tensor<double> local_pts;            // N x 9, box frame
    Tensor<double> global_pts;           // N x 9, recentred shared frame
    std::array<double, 7> box7 = {};     // recentred proposal as a 7-vector
    Tensor<double> queries;              // n x 3, RoI frame (targets only)
    Tensor<double> occ_labels;           // n x 1 (targets only)
    std::array<double, 7> det_target = {};
    double score_target = 0.0;
};

struct WindowBatch {
    int track_id = 0;
    std::vector<FrameBatch> frames;
    int n_valid = 0;
    int n_matched = 0;
};

// Prepares a regularized window for the forward pass. The shared frame is the
// world frame translated so the first valid proposal center sits at the
// origin. With with_targets, frames holding a GT box and a grid in gt_grids
// get balanced occupancy queries (seeded per frame) and refinement targets.
WindowBatch make_window_batch(const Window& w, const std::map<int, OccGrid>& gt_grids,
                              const ModelConfig& cfg, uint64_t query_seed, bool with_targets);

// ---- forward pass -----------------------------------------------------------

template <typename T>
struct ForwardResult {
    int z = -1;         // T x c fused latents (decoder side)
    int z_det = -1;     // T x c detection latents
    int deltas = -1;    // T x 7 box residuals
    int scores = -1;    // T x 1 objectness after sigmoid
    int occ_probs = -1; // (sum of n over supervised frames) x 1, -1 when absent
    int loss = -1;      // scalar node, -1 without targets
    double loss_value = 0.0;
    double occ_term = 0.0;    // unweighted means, for logs and tests
    double det_term = 0.0;
    double score_term = 0.0;
};

// Builds the whole graph for one window on the given tape: dual-branch
// encoding, causal (or unrestricted, for offline mode) attention, fusion,
// occupancy decoding at the batch queries, and the detection head. Parameter
// leaves are created on the tape and reported through param_ids so gradients
// can be read back by name.
template <typename T>
ForwardResult<T> forward_window(Tape<T>& tape, const Params<T>& params, const ModelConfig& cfg,
                                const WindowBatch& batch, bool causal, bool with_loss,
                                std::map<std::string, int>* param_ids = nullptr);

// Decode occupancy probabilities for one latent row at the given RoI-frame
// positions. Pure function of (params, z, queries).
std::vector<double> decode_occupancy(const Params<float>& params, const ModelConfig& cfg,
                                     const std::vector<float>& z_row,
                                     const std::vector<Vec3>& queries);

// Scalar training objective mirroring the tape arithmetic: mean BCE over
// occupancy queries of supervised frames, plus lambda_det times the mean L1
// over residuals, plus lambda_score times the mean BCE over objectness.
// Errors when scores is empty (a window with no valid frames).
double compute_loss(const std::vector<double>& occ_probs, const std::vector<double>& occ_labels,
                    const std::vector<std::array<double, 7>>& residuals,
                    const std::vector<std::array<double, 7>>& residual_targets,
                    const std::vector<double>& scores, const std::vector<double>& score_targets,
                    const ModelConfig& cfg);

// ---- training ---------------------------------------------------------------

struct TrainConfig {
    int epochs = 12;
    double lr = 1e-3;          // base rate for the half-cosine schedule
    int batch_size = 2;        // windows whose gradients are averaged per step
    double val_fraction = 0.2; // tracks held aside for logging/model selection
    int val_iou_windows = 12;  // cap on windows probed for validation IoU
    uint64_t seed = 1;
};

json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j);

struct ModelBundle {
    ModelConfig cfg;
    Params<float> params;
};

io::CheckpointData to_checkpoint(const ModelBundle& m, const json& training_meta = {});
ModelBundle from_checkpoint(const io::CheckpointData& c);

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_iou = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    ModelBundle model;  // weights of the best epoch (by validation IoU)
    std::vector<EpochLog> log;
    int best_epoch = -1;
    bool aborted = false;
    std::string abort_reason;
};

// Single-threaded, seed-deterministic training over regularized windows.
// gt_grids maps track id to the object's ground-truth grid. A non-finite
// loss (or gradient) aborts and returns the weights from the last completed
// epoch. Progress lines go to the callback when one is given.
TrainResult train(const trk::TrackletDataset& ds, const std::map<int, OccGrid>& gt_grids,
                  const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::function<void(const EpochLog&)>& on_epoch = nullptr);

// ---- inference --------------------------------------------------------------

struct InferConfig {
    int window = 0;        // frames of history per prediction; <= 0 means all
    bool offline = false;  // attend to the whole track, future included
    double voxel = 0.2;
    bool extrapolate = false;  // decode on the GT box grid instead of the RoI
};

struct FramePrediction {
    int source_frame = -1;
    bool valid = false;
    Box7 proposal;
    Box7 refined;
    double score = 0.0;
    OccGrid grid;  // RoI frame, or GT frame when extrapolating
};

// Per-frame dense decoding at every voxel center plus box refinement;
// probabilities >= 0.5 become occupied, the rest free. Windows nest: any
// window covering the whole history equals the all-history setting.
std::vector<FramePrediction> infer_tracklet(const ModelBundle& m, const Tracklet& t,
                                            const InferConfig& icfg);

// Decode at every voxel center of the GT box, transformed into the RoI frame;
// centers outside the RoI still receive decoded probabilities. The result
// lives on the GT box grid.
OccGrid extrapolate_to_gt(const ModelBundle& m, const std::vector<float>& z_row,
                          const Box7& roi, const Box7& gt_box, double voxel);

// Non-learned reference: at each valid frame, pool the points of all valid
// frames up to it, mapped through their proposal poses into the object frame,
// and voxelize on that frame's RoI grid (occupied/free only).
std::vector<FramePrediction> baseline_complete(const Tracklet& t, double voxel);

}  // namespace ocf::net
