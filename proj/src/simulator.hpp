#pragma once

#include <optional>
#include <string>
#include <vector>

#include "grid.hpp"

namespace ocf::sim {

using geom::Box7;
using geom::PointCloud;
using geom::RigidTransform;
using geom::Vec3;

// Spherical range sensor: rows bin elevation, cols bin azimuth over [-pi, pi).
struct SensorModel {
    int rows = 0, cols = 0;
    double el_min = 0.0, el_max = 0.0;
    double max_range = 0.0;

    void validate() const;
    double el_step() const { return (el_max - el_min) / rows; }
    double az_step() const { return 6.283185307179586476925286766559 / cols; }

    // unit direction through the pixel center, sensor frame
    Vec3 ray_dir(int u, int v) const;

    // spherical projection with floor-to-bin indexing; returns false when the
    // direction falls outside the field of view or the point is at the origin
    bool project(const Vec3& p_sensor, int& u, int& v, double& range) const;
};

// Union of axis-aligned boxes in the object's local frame.
struct ShapePart {
    Vec3 center;
    Vec3 half;
};

struct ShapePrimitiveSet {
    std::vector<ShapePart> parts;

    void validate(const Vec3& box_dims) const;  // >=1 part, union within the box
    bool contains(const Vec3& p) const;
};

// Procedural vehicle catalog. Shapes are parameterized on normalized part
// layouts and a per-instance dimension jitter drawn from the seed.
extern const std::vector<std::string> kArchetypeNames;
struct CatalogShape {
    Vec3 dims;
    ShapePrimitiveSet shape;
};
CatalogShape make_archetype(const std::string& name, uint64_t seed);

struct Actor {
    int track_id = 0;
    std::string archetype;  // informational
    Vec3 dims;
    ShapePrimitiveSet shape;
    std::vector<Box7> poses;  // one per frame, world frame
};

struct Scene {
    int frame_count = 0;
    double frame_period = 0.1;
    uint64_t seed = 0;
    double depth_noise_sigma = 0.0;          // off by default
    std::vector<RigidTransform> ego;         // sensor pose per frame (sensor->world)
    std::vector<Actor> actors;

    void validate() const;
};

struct RangeImage {
    int rows = 0, cols = 0;
    std::vector<float> depths;  // -1 for no return
    RigidTransform sensor_pose;

    float at(int u, int v) const { return depths[size_t(u) * cols + v]; }
    float& at(int u, int v) { return depths[size_t(u) * cols + v]; }
};

struct GtBox {
    int track_id = 0;
    Box7 box;
    int n_points = 0;   // sensor returns inside the box this frame
    double range = 0.0; // ego distance to box center
};

struct FrameRecord {
    RangeImage range_image;
    PointCloud cloud;  // world frame
    std::vector<GtBox> gt_boxes;
    RigidTransform ego_pose;
};

struct SimLog {
    SensorModel sensor;
    Scene scene;
    std::vector<FrameRecord> frames;

    const Actor& actor_by_track(int track_id) const;
};

// Exact nearest-hit raycast of every pixel against all actor parts.
RangeImage render_range_image(const Scene& scene, const SensorModel& sm, int frame);

// One world-frame point per valid pixel, at ray direction times depth.
PointCloud range_image_to_points(const RangeImage& ri, const SensorModel& sm);

// Renders every frame and assembles ground truth. Deterministic per seed;
// the seed only drives the optional depth noise.
SimLog simulate(const Scene& scene, const SensorModel& sm, uint64_t seed, int n_threads = 1);

// Analytic occupancy of a shape on the box grid: a cell is occupied iff its
// center lies inside the part union.
grid::VoxelMask shape_voxelize(const ShapePrimitiveSet& s, const Box7& b, double voxel);

// Ray/part intersection helper shared with the visibility oracles: nearest
// positive hit distance of a world ray against one actor at one frame.
std::optional<double> ray_actor_hit(const Vec3& origin, const Vec3& dir, const Actor& actor,
                                    int frame);

// Nearest hit over all actors; empty when nothing is hit.
std::optional<double> ray_scene_hit(const Scene& scene, int frame, const Vec3& origin,
                                    const Vec3& dir);

// Scene generation for demos and tests: ego on a straight slow path, actors
// drawn from the catalog with mixed static/moving trajectories.
struct SceneGenConfig {
    int n_actors = 8;
    int frames = 24;
    double frame_period = 0.1;
    uint64_t seed = 1;
    double min_radius = 8.0;
    double max_radius = 30.0;
    double moving_fraction = 0.6;
    double ego_speed = 1.5;
    double sensor_height = 2.0;
};

Scene generate_scene(const SceneGenConfig& cfg);

SensorModel default_sensor();

}  // namespace ocf::sim
