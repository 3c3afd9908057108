/* occforge C API: every pipeline stage behind a flat, ABI-stable surface.
 *
 * All functions return a status code; on failure ocf_last_error() holds a
 * human-readable message for the calling thread until its next API call.
 * Paths are UTF-8, NUL-terminated. Directory arguments are created on
 * demand; each stage takes an exclusive lock on its output directory and
 * writes a manifest.json (tool version, resolved config, input/output
 * digests, seed, wall time) on success.
 */
#ifndef OCCFORGE_H
#define OCCFORGE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define OCF_API __declspec(dllexport)
#else
#define OCF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. */
enum {
    OCF_OK = 0,       /* success */
    OCF_USAGE = 1,    /* invalid arguments or configuration */
    OCF_DATA = 2,     /* missing, corrupt, or inconsistent data */
    OCF_INTERNAL = 3  /* unexpected failure (e.g. diverged training) */
};

/* Library version string, e.g. "0.1.0". */
OCF_API const char* ocf_version(void);

/* Message from this thread's most recent failing call ("" if none). */
OCF_API const char* ocf_last_error(void);

/* ---- pipeline stages ----------------------------------------------------
 * seed pointers: NULL keeps the seed from the input document (or 1).
 */

/* Scene JSON -> simulated LiDAR log directory. */
OCF_API int ocf_simulate(const char* scene_path, const char* out_dir, const uint64_t* seed);

/* Sim log -> one tri-state occupancy grid per track (track_<id>.ocog). */
OCF_API int ocf_annotate(const char* simlog_dir, const char* out_dir, double voxel_size);

/* Sim log (+ optional noise JSON) -> tracklet dataset. clean != 0 keeps the
 * ground-truth boxes as proposals with no drops. */
OCF_API int ocf_tracklets(const char* simlog_dir, const char* noise_path_or_null,
                          const char* out_dir, int clean, const uint64_t* seed);

/* Epoch callback for ocf_train; user is passed through untouched. */
typedef void (*ocf_epoch_fn)(int epoch, double train_loss, double val_loss, double val_iou,
                             void* user);

/* Tracklet datasets + GT grids -> checkpoint directory (model.ockp and
 * training_log.json). Config paths may be NULL for built-in defaults. All
 * datasets must come from the same simulated scene. */
OCF_API int ocf_train(const char* const* dataset_dirs, size_t n_datasets, const char* grids_dir,
                      const char* model_config_or_null, const char* train_config_or_null,
                      const char* out_dir, const uint64_t* seed, ocf_epoch_fn on_epoch,
                      void* user);

/* Checkpoint + dataset -> per-frame predicted grids and refined boxes.
 * window <= 0 means all history; offline != 0 also attends to the future;
 * extrapolate != 0 decodes on each frame's GT box grid instead of the RoI. */
OCF_API int ocf_infer(const char* checkpoint_dir, const char* dataset_dir, const char* out_dir,
                      int window, int offline, double voxel_size, int extrapolate);

/* Dataset -> pooled-point baseline predictions in the same layout. */
OCF_API int ocf_baseline(const char* dataset_dir, const char* out_dir, double voxel_size);

/* Predictions + GT grids -> occupancy IoU metrics JSON. */
OCF_API int ocf_eval_occ(const char* pred_dir, const char* grids_dir, const char* out_dir);

/* Predictions + sim log -> AP/APH table JSON at one IoU threshold.
 * use_proposals != 0 scores the unrefined input boxes. */
OCF_API int ocf_eval_det(const char* pred_dir, const char* simlog_dir, const char* out_dir,
                         double iou_threshold, int use_proposals);

/* One .ocog grid -> ASCII PLY of occupied-voxel cubes. */
OCF_API int ocf_export_ply(const char* grid_path, const char* out_dir);

/* ---- occupancy grid handles ---------------------------------------------
 * Read-only access to .ocog files for embedding consumers.
 */

typedef struct ocf_grid ocf_grid;

/* Cell states as returned by ocf_grid_state. */
enum { OCF_CELL_FREE = 0, OCF_CELL_OCCUPIED = 1, OCF_CELL_UNOBSERVED = 2 };

/* Opens a grid file; *out receives the handle on success. */
OCF_API int ocf_grid_open(const char* path, ocf_grid** out);
OCF_API void ocf_grid_close(ocf_grid* g);

/* Cell counts along x/y/z. Any pointer may be NULL. */
OCF_API int ocf_grid_dims(const ocf_grid* g, int* nx, int* ny, int* nz);

/* Voxel edge length in meters, or 0 on a NULL handle. */
OCF_API double ocf_grid_voxel(const ocf_grid* g);

/* Box dimensions in meters. Any pointer may be NULL. */
OCF_API int ocf_grid_box_dims(const ocf_grid* g, double* dx, double* dy, double* dz);

/* State of cell (i,j,k) as an OCF_CELL_* value, or a negated status code
 * (e.g. -OCF_USAGE) when the handle is NULL or the index is out of range. */
OCF_API int ocf_grid_state(const ocf_grid* g, int i, int j, int k);

/* Number of cells in each state. Any pointer may be NULL. */
OCF_API int ocf_grid_counts(const ocf_grid* g, int64_t* n_free, int64_t* n_occupied,
                            int64_t* n_unobserved);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* OCCFORGE_H */
