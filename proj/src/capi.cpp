#include "occforge/occforge.h"

#include <string>

#include "pipeline.hpp"

using namespace ocf;

namespace {

thread_local std::string g_last_error;

int map_code(Errc c) {
    switch (c) {
        case Errc::invalid_argument: return OCF_USAGE;
        case Errc::data_error: return OCF_DATA;
        case Errc::io_error: return OCF_DATA;
        case Errc::internal: return OCF_INTERNAL;
    }
    return OCF_INTERNAL;
}

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return OCF_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return map_code(e.code());
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return OCF_INTERNAL;
    } catch (...) {
        g_last_error = "unknown failure";
        return OCF_INTERNAL;
    }
}

int usage_error(const char* msg) {
    g_last_error = msg;
    return OCF_USAGE;
}

std::optional<uint64_t> opt_seed(const uint64_t* seed) {
    if (!seed) return std::nullopt;
    return *seed;
}

}  // namespace

extern "C" {

const char* ocf_version(void) { return pipe::kToolVersion; }

const char* ocf_last_error(void) { return g_last_error.c_str(); }

int ocf_simulate(const char* scene_path, const char* out_dir, const uint64_t* seed) {
    if (!scene_path || !out_dir) return usage_error("simulate needs a scene path and an output directory");
    return guarded([&] { pipe::simulate_stage(scene_path, out_dir, opt_seed(seed)); });
}

int ocf_annotate(const char* simlog_dir, const char* out_dir, double voxel_size) {
    if (!simlog_dir || !out_dir) return usage_error("annotate needs a sim log and an output directory");
    return guarded([&] { pipe::annotate_stage(simlog_dir, out_dir, voxel_size); });
}

int ocf_tracklets(const char* simlog_dir, const char* noise_path_or_null, const char* out_dir,
                  int clean, const uint64_t* seed) {
    if (!simlog_dir || !out_dir) return usage_error("tracklets needs a sim log and an output directory");
    return guarded([&] {
        pipe::tracklets_stage(simlog_dir, noise_path_or_null ? noise_path_or_null : "", out_dir,
                              clean != 0, opt_seed(seed));
    });
}

int ocf_train(const char* const* dataset_dirs, size_t n_datasets, const char* grids_dir,
              const char* model_config_or_null, const char* train_config_or_null,
              const char* out_dir, const uint64_t* seed, ocf_epoch_fn on_epoch, void* user) {
    if (!dataset_dirs || n_datasets == 0 || !grids_dir || !out_dir)
        return usage_error("train needs datasets, a grid directory, and an output directory");
    return guarded([&] {
        std::vector<std::string> dirs;
        for (size_t i = 0; i < n_datasets; ++i) {
            require(dataset_dirs[i] != nullptr, Errc::invalid_argument,
                    "train: null dataset directory");
            dirs.emplace_back(dataset_dirs[i]);
        }
        std::function<void(const net::EpochLog&)> cb;
        if (on_epoch)
            cb = [on_epoch, user](const net::EpochLog& l) {
                on_epoch(l.epoch, l.train_loss, l.val_loss, l.val_iou, user);
            };
        pipe::train_stage(dirs, grids_dir, model_config_or_null ? model_config_or_null : "",
                          train_config_or_null ? train_config_or_null : "", out_dir,
                          opt_seed(seed), cb);
    });
}

int ocf_infer(const char* checkpoint_dir, const char* dataset_dir, const char* out_dir,
              int window, int offline, double voxel_size, int extrapolate) {
    if (!checkpoint_dir || !dataset_dir || !out_dir)
        return usage_error("infer needs a checkpoint, a dataset, and an output directory");
    return guarded([&] {
        net::InferConfig icfg;
        icfg.window = window;
        icfg.offline = offline != 0;
        icfg.voxel = voxel_size;
        icfg.extrapolate = extrapolate != 0;
        pipe::infer_stage(checkpoint_dir, dataset_dir, out_dir, icfg);
    });
}

int ocf_baseline(const char* dataset_dir, const char* out_dir, double voxel_size) {
    if (!dataset_dir || !out_dir) return usage_error("baseline needs a dataset and an output directory");
    return guarded([&] { pipe::baseline_stage(dataset_dir, out_dir, voxel_size); });
}

int ocf_eval_occ(const char* pred_dir, const char* grids_dir, const char* out_dir) {
    if (!pred_dir || !grids_dir || !out_dir)
        return usage_error("eval-occ needs predictions, GT grids, and an output directory");
    return guarded([&] { pipe::eval_occ_stage(pred_dir, grids_dir, out_dir); });
}

int ocf_eval_det(const char* pred_dir, const char* simlog_dir, const char* out_dir,
                 double iou_threshold, int use_proposals) {
    if (!pred_dir || !simlog_dir || !out_dir)
        return usage_error("eval-det needs predictions, a sim log, and an output directory");
    return guarded([&] {
        pipe::eval_det_stage(pred_dir, simlog_dir, out_dir, iou_threshold, use_proposals != 0);
    });
}

int ocf_export_ply(const char* grid_path, const char* out_dir) {
    if (!grid_path || !out_dir) return usage_error("export-ply needs a grid file and an output directory");
    return guarded([&] { pipe::export_ply_stage(grid_path, out_dir); });
}

// ---- grid handles ---------------------------------------------------------

struct ocf_grid {
    grid::OccGrid g;
};

int ocf_grid_open(const char* path, ocf_grid** out) {
    if (!path || !out) return usage_error("grid_open needs a path and an output handle");
    *out = nullptr;
    return guarded([&] { *out = new ocf_grid{io::read_occgrid(path)}; });
}

void ocf_grid_close(ocf_grid* g) { delete g; }

int ocf_grid_dims(const ocf_grid* g, int* nx, int* ny, int* nz) {
    if (!g) return usage_error("grid_dims: null handle");
    if (nx) *nx = g->g.spec.nx;
    if (ny) *ny = g->g.spec.ny;
    if (nz) *nz = g->g.spec.nz;
    return OCF_OK;
}

double ocf_grid_voxel(const ocf_grid* g) { return g ? g->g.spec.voxel : 0.0; }

int ocf_grid_box_dims(const ocf_grid* g, double* dx, double* dy, double* dz) {
    if (!g) return usage_error("grid_box_dims: null handle");
    if (dx) *dx = g->g.spec.box_dims.x;
    if (dy) *dy = g->g.spec.box_dims.y;
    if (dz) *dz = g->g.spec.box_dims.z;
    return OCF_OK;
}

int ocf_grid_state(const ocf_grid* g, int i, int j, int k) {
    if (!g) {
        usage_error("grid_state: null handle");
        return -OCF_USAGE;
    }
    const grid::GridSpec& s = g->g.spec;
    if (i < 0 || j < 0 || k < 0 || i >= s.nx || j >= s.ny || k >= s.nz) {
        usage_error("grid_state: cell index out of range");
        return -OCF_USAGE;
    }
    return int(g->g.at(i, j, k));
}

int ocf_grid_counts(const ocf_grid* g, int64_t* n_free, int64_t* n_occupied,
                    int64_t* n_unobserved) {
    if (!g) return usage_error("grid_counts: null handle");
    if (n_free) *n_free = int64_t(g->g.count(grid::CellState::free));
    if (n_occupied) *n_occupied = int64_t(g->g.count(grid::CellState::occupied));
    if (n_unobserved) *n_unobserved = int64_t(g->g.count(grid::CellState::unobserved));
    return OCF_OK;
}

}  // extern "C"
