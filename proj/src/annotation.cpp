#include "annotation.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

namespace ocf::anno {

AggregatedObjectCloud aggregate_object_points(const sim::SimLog& log, int track_id,
                                              double margin) {
    log.actor_by_track(track_id);  // throws on unknown track
    AggregatedObjectCloud out;
    for (size_t f = 0; f < log.frames.size(); ++f) {
        const sim::FrameRecord& rec = log.frames[f];
        const sim::GtBox* gt = nullptr;
        for (const sim::GtBox& g : rec.gt_boxes)
            if (g.track_id == track_id) gt = &g;
        require(gt != nullptr, Errc::data_error, "frame without a GT box for the track");
        PointCloud inside = geom::points_in_box(rec.cloud, gt->box, margin);
        geom::RigidTransform to_local = geom::box_to_local(gt->box);
        for (const Vec3& p : inside.points) {
            out.points.push_back(to_local.apply(p));
            out.frame_ids.push_back(int(f));
        }
    }
    return out;
}

VoxelMask voxelize(const AggregatedObjectCloud& cloud, const Vec3& box_dims, double voxel) {
    grid::GridSpec spec(box_dims, voxel);
    VoxelMask mask(spec);
    for (const Vec3& p : cloud.points) {
        int i, j, k;
        if (spec.locate(p, i, j, k)) mask.occupied[spec.index(i, j, k)] = 1;
    }
    return mask;
}

OccGrid occlusion_reason(const VoxelMask& mask, const sim::SimLog& log, int track_id,
                         const sim::SensorModel& sm) {
    const sim::Actor& actor = log.actor_by_track(track_id);
    require(mask.spec.box_dims.x == actor.dims.x && mask.spec.box_dims.y == actor.dims.y &&
                mask.spec.box_dims.z == actor.dims.z,
            Errc::invalid_argument, "mask dims do not match the track's box dims");

    // box->world transform per frame, world->sensor per frame
    std::vector<geom::RigidTransform> box_to_world_t;
    std::vector<geom::RigidTransform> world_to_sensor;
    for (size_t f = 0; f < log.frames.size(); ++f) {
        const sim::FrameRecord& rec = log.frames[f];
        require(!rec.range_image.depths.empty(), Errc::data_error,
                "missing range image for frame " + std::to_string(f));
        const sim::GtBox* gt = nullptr;
        for (const sim::GtBox& g : rec.gt_boxes)
            if (g.track_id == track_id) gt = &g;
        require(gt != nullptr, Errc::data_error, "frame without a GT box for the track");
        box_to_world_t.push_back(geom::box_to_world(gt->box));
        world_to_sensor.push_back(geom::invert(rec.ego_pose));
    }

    const grid::GridSpec& spec = mask.spec;
    OccGrid out(spec, CellState::unobserved);
    for (int k = 0; k < spec.nz; ++k) {
        for (int j = 0; j < spec.ny; ++j) {
            for (int i = 0; i < spec.nx; ++i) {
                if (mask.at(i, j, k)) {
                    out.set(i, j, k, CellState::occupied);
                    continue;
                }
                Vec3 local = spec.center(i, j, k);
                bool free = false;
                for (size_t f = 0; f < log.frames.size() && !free; ++f) {
                    Vec3 world = box_to_world_t[f].apply(local);
                    Vec3 sensor = world_to_sensor[f].apply(world);
                    int u, v;
                    double r;
                    if (!sm.project(sensor, u, v, r)) continue;  // outside the field of view
                    float depth = log.frames[f].range_image.at(u, v);
                    double ref = depth < 0 ? sm.max_range : double(depth);
                    if (r < ref) free = true;
                }
                out.set(i, j, k, free ? CellState::free : CellState::unobserved);
            }
        }
    }
    return out;
}

std::map<int, OccGrid> annotate_objects(const sim::SimLog& log, double voxel, int n_threads) {
    require(voxel > 0, Errc::invalid_argument, "voxel size must be positive");
    std::vector<int> tracks;
    for (const sim::Actor& a : log.scene.actors) tracks.push_back(a.track_id);

    std::vector<OccGrid> grids(tracks.size());
    auto annotate_one = [&](size_t idx) {
        int tid = tracks[idx];
        const sim::Actor& actor = log.actor_by_track(tid);
        AggregatedObjectCloud cloud = aggregate_object_points(log, tid, 0.0);
        VoxelMask mask = voxelize(cloud, actor.dims, voxel);
        grids[idx] = occlusion_reason(mask, log, tid, log.sensor);
    };

    n_threads = std::max(1, std::min<int>(n_threads, int(tracks.size())));
    if (n_threads <= 1 || tracks.size() <= 1) {
        for (size_t i = 0; i < tracks.size(); ++i) annotate_one(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < tracks.size(); i = next.fetch_add(1))
                    annotate_one(i);
            });
        for (auto& th : pool) th.join();
    }

    std::map<int, OccGrid> out;
    for (size_t i = 0; i < tracks.size(); ++i) out.emplace(tracks[i], std::move(grids[i]));
    return out;
}

}  // namespace ocf::anno
