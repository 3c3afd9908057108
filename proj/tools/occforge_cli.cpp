// occforge: deterministic object-occupancy pipeline driver.
//
// Every subcommand reads file artifacts, writes file artifacts, and records a
// manifest; nothing is kept in memory between stages. Exit codes: 0 success,
// 1 usage error, 2 data error.

#include <cinttypes>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "occforge/occforge.h"

namespace {

int report(int status) {
    if (status == OCF_OK) return 0;
    std::fprintf(stderr, "error: %s\n", ocf_last_error());
    return status == OCF_USAGE ? 1 : 2;
}

// "inf" (or anything non-positive) means the whole history.
bool parse_window(const std::string& s, int& out) {
    if (s == "inf") {
        out = 0;
        return true;
    }
    try {
        size_t used = 0;
        int v = std::stoi(s, &used);
        if (used != s.size() || v <= 0) return false;
        out = v;
        return true;
    } catch (...) {
        return false;
    }
}

struct SeedOpt {
    uint64_t value = 0;
    CLI::Option* opt = nullptr;

    void attach(CLI::App* sub) {
        opt = sub->add_option("--seed", value, "override the stage seed");
    }
    const uint64_t* get() const { return (opt && opt->count()) ? &value : nullptr; }
};

void print_epoch(int epoch, double train_loss, double val_loss, double val_iou, void*) {
    std::printf("epoch %3d  train %.5f  val %.5f  val-iou %.4f\n", epoch, train_loss, val_loss,
                val_iou);
    std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"object occupancy pipeline: simulate, annotate, complete, evaluate"};
    app.set_version_flag("--version", ocf_version());
    app.require_subcommand(1);

    int rc = 0;

    // simulate
    std::string sim_scene, sim_out;
    SeedOpt sim_seed;
    CLI::App* sim = app.add_subcommand("simulate", "render a scene into a LiDAR sequence log");
    sim->add_option("scene", sim_scene, "scene JSON (explicit or procedural)")->required();
    sim->add_option("-o,--out", sim_out, "output log directory")->required();
    sim_seed.attach(sim);
    sim->callback([&] { rc = report(ocf_simulate(sim_scene.c_str(), sim_out.c_str(), sim_seed.get())); });

    // annotate
    std::string ann_log, ann_out;
    double ann_voxel = 0.2;
    CLI::App* ann = app.add_subcommand("annotate", "label per-object tri-state occupancy grids");
    ann->add_option("simlog", ann_log, "simulated log directory")->required();
    ann->add_option("-o,--out", ann_out, "output grid directory")->required();
    ann->add_option("--voxel-size", ann_voxel, "voxel edge in meters")->capture_default_str();
    ann->callback([&] { rc = report(ocf_annotate(ann_log.c_str(), ann_out.c_str(), ann_voxel)); });

    // tracklets
    std::string trk_log, trk_noise, trk_out;
    bool trk_clean = false;
    SeedOpt trk_seed;
    CLI::App* trk = app.add_subcommand("tracklets", "build a tracklet dataset from a log");
    trk->add_option("simlog", trk_log, "simulated log directory")->required();
    trk->add_option("-o,--out", trk_out, "output dataset directory")->required();
    trk->add_option("--noise", trk_noise, "noise config JSON for perturbed proposals");
    trk->add_flag("--clean", trk_clean, "keep ground-truth boxes as proposals");
    trk_seed.attach(trk);
    trk->callback([&] {
        rc = report(ocf_tracklets(trk_log.c_str(), trk_noise.empty() ? nullptr : trk_noise.c_str(),
                                  trk_out.c_str(), trk_clean ? 1 : 0, trk_seed.get()));
    });

    // train
    std::vector<std::string> tr_datasets;
    std::string tr_grids, tr_model, tr_train, tr_out;
    bool tr_quiet = false;
    SeedOpt tr_seed;
    CLI::App* tr = app.add_subcommand("train", "fit the completion model on tracklet datasets");
    tr->add_option("--dataset", tr_datasets, "dataset directory (repeatable)")->required();
    tr->add_option("--grids", tr_grids, "ground-truth grid directory")->required();
    tr->add_option("--model-config", tr_model, "model config JSON");
    tr->add_option("--train-config", tr_train, "training config JSON");
    tr->add_option("-o,--out", tr_out, "output checkpoint directory")->required();
    tr->add_flag("--quiet", tr_quiet, "suppress per-epoch progress");
    tr_seed.attach(tr);
    tr->callback([&] {
        std::vector<const char*> dirs;
        for (const std::string& d : tr_datasets) dirs.push_back(d.c_str());
        rc = report(ocf_train(dirs.data(), dirs.size(), tr_grids.c_str(),
                              tr_model.empty() ? nullptr : tr_model.c_str(),
                              tr_train.empty() ? nullptr : tr_train.c_str(), tr_out.c_str(),
                              tr_seed.get(), tr_quiet ? nullptr : print_epoch, nullptr));
    });

    // infer
    std::string inf_ckpt, inf_ds, inf_out, inf_window = "inf";
    double inf_voxel = 0.2;
    bool inf_offline = false, inf_extrapolate = false;
    CLI::App* inf = app.add_subcommand("infer", "predict occupancy and refined boxes");
    inf->add_option("checkpoint", inf_ckpt, "checkpoint directory")->required();
    inf->add_option("dataset", inf_ds, "tracklet dataset directory")->required();
    inf->add_option("-o,--out", inf_out, "output prediction directory")->required();
    inf->add_option("--window", inf_window, "history frames per prediction, or 'inf'")
        ->capture_default_str();
    inf->add_flag("--offline", inf_offline, "attend to the whole track, future included");
    inf->add_flag("--extrapolate", inf_extrapolate, "decode on each frame's GT box grid");
    inf->add_option("--voxel-size", inf_voxel, "voxel edge in meters")->capture_default_str();
    inf->callback([&] {
        int window = 0;
        if (!parse_window(inf_window, window)) {
            std::fprintf(stderr, "error: --window must be a positive integer or 'inf'\n");
            rc = 1;
            return;
        }
        rc = report(ocf_infer(inf_ckpt.c_str(), inf_ds.c_str(), inf_out.c_str(), window,
                              inf_offline ? 1 : 0, inf_voxel, inf_extrapolate ? 1 : 0));
    });

    // baseline
    std::string base_ds, base_out;
    double base_voxel = 0.2;
    CLI::App* base = app.add_subcommand("baseline", "pooled-point completion without a model");
    base->add_option("dataset", base_ds, "tracklet dataset directory")->required();
    base->add_option("-o,--out", base_out, "output prediction directory")->required();
    base->add_option("--voxel-size", base_voxel, "voxel edge in meters")->capture_default_str();
    base->callback([&] { rc = report(ocf_baseline(base_ds.c_str(), base_out.c_str(), base_voxel)); });

    // eval-occ
    std::string eo_pred, eo_grids, eo_out;
    CLI::App* eo = app.add_subcommand("eval-occ", "occupancy IoU against ground-truth grids");
    eo->add_option("predictions", eo_pred, "prediction directory")->required();
    eo->add_option("grids", eo_grids, "ground-truth grid directory")->required();
    eo->add_option("-o,--out", eo_out, "output metrics directory")->required();
    eo->callback([&] { rc = report(ocf_eval_occ(eo_pred.c_str(), eo_grids.c_str(), eo_out.c_str())); });

    // eval-det
    std::string ed_pred, ed_log, ed_out;
    double ed_iou = 0.7;
    bool ed_proposals = false;
    CLI::App* ed = app.add_subcommand("eval-det", "detection AP/APH against logged boxes");
    ed->add_option("predictions", ed_pred, "prediction directory")->required();
    ed->add_option("simlog", ed_log, "simulated log directory")->required();
    ed->add_option("-o,--out", ed_out, "output metrics directory")->required();
    ed->add_option("--iou-threshold", ed_iou, "match threshold")->capture_default_str();
    ed->add_flag("--proposals", ed_proposals, "score the unrefined proposal boxes");
    ed->callback([&] {
        rc = report(ocf_eval_det(ed_pred.c_str(), ed_log.c_str(), ed_out.c_str(), ed_iou,
                                 ed_proposals ? 1 : 0));
    });

    // export-ply
    std::string ply_grid, ply_out;
    CLI::App* ply = app.add_subcommand("export-ply", "write occupied voxels as an ASCII PLY");
    ply->add_option("grid", ply_grid, "occupancy grid file")->required();
    ply->add_option("-o,--out", ply_out, "output directory")->required();
    ply->callback([&] { rc = report(ocf_export_ply(ply_grid.c_str(), ply_out.c_str())); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        auto parsed = app.get_subcommands();
        std::fprintf(stderr, "%s", (parsed.empty() ? app : *parsed.front()).help().c_str());
        return 1;
    }
    return rc;
}
