#pragma once

#include <map>

#include "simulator.hpp"

namespace ocf::anno {

using geom::Box7;
using geom::PointCloud;
using geom::Vec3;
using grid::CellState;
using grid::OccGrid;
using grid::VoxelMask;

// Multi-frame point accumulation in the object's box frame.
struct AggregatedObjectCloud {
    std::vector<Vec3> points;  // box-local
    std::vector<int> frame_ids;  // contributing frame per point
};

// Gathers the points inside each frame's GT box (+margin) and maps them into
// that frame's box coordinates.
AggregatedObjectCloud aggregate_object_points(const sim::SimLog& log, int track_id,
                                              double margin = 0.0);

// Occupied mask over half-open cells; points outside the grid are dropped.
VoxelMask voxelize(const AggregatedObjectCloud& cloud, const Vec3& box_dims, double voxel);

// Classifies unoccupied voxels as free or unobserved by projecting their
// world-frame centers into every frame's range image and comparing ranges.
// A no-return pixel counts as max_range.
OccGrid occlusion_reason(const VoxelMask& mask, const sim::SimLog& log, int track_id,
                         const sim::SensorModel& sm);

// aggregate -> voxelize -> occlusion_reason for every track in the log.
std::map<int, OccGrid> annotate_objects(const sim::SimLog& log, double voxel,
                                        int n_threads = 1);

constexpr double kDefaultVoxelSize = 0.2;

}  // namespace ocf::anno
