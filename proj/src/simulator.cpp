#include "simulator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

namespace ocf::sim {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoPi = 6.283185307179586476925286766559;
}  // namespace

void SensorModel::validate() const {
    require(rows >= 2 && cols >= 2, Errc::invalid_argument, "sensor needs at least 2x2 pixels");
    require(el_min < el_max, Errc::invalid_argument, "sensor elevation range is empty");
    require(max_range > 0, Errc::invalid_argument, "sensor max_range must be positive");
}

Vec3 SensorModel::ray_dir(int u, int v) const {
    double el = el_min + (u + 0.5) * el_step();
    double az = -kPi + (v + 0.5) * az_step();
    double ce = std::cos(el);
    return {ce * std::cos(az), ce * std::sin(az), std::sin(el)};
}

bool SensorModel::project(const Vec3& p, int& u, int& v, double& range) const {
    range = p.norm();
    if (range <= 0.0) return false;
    double el = std::asin(std::clamp(p.z / range, -1.0, 1.0));
    double az = std::atan2(p.y, p.x);
    if (az >= kPi) az -= kTwoPi;  // atan2 may return exactly pi
    double fu = std::floor((el - el_min) / el_step());
    double fv = std::floor((az + kPi) / az_step());
    u = int(fu);
    v = int(fv);
    return fu >= 0 && u < rows && fv >= 0 && v < cols;
}

void ShapePrimitiveSet::validate(const Vec3& box_dims) const {
    require(!parts.empty(), Errc::invalid_argument, "shape needs at least one part");
    const double tol = 1e-9;
    for (const ShapePart& p : parts) {
        require(p.half.x > 0 && p.half.y > 0 && p.half.z > 0, Errc::invalid_argument,
                "shape part has non-positive extent");
        require(std::abs(p.center.x) + p.half.x <= box_dims.x * 0.5 + tol &&
                    std::abs(p.center.y) + p.half.y <= box_dims.y * 0.5 + tol &&
                    std::abs(p.center.z) + p.half.z <= box_dims.z * 0.5 + tol,
                Errc::invalid_argument, "shape part sticks out of the declared box");
    }
}

bool ShapePrimitiveSet::contains(const Vec3& p) const {
    for (const ShapePart& part : parts) {
        if (std::abs(p.x - part.center.x) <= part.half.x &&
            std::abs(p.y - part.center.y) <= part.half.y &&
            std::abs(p.z - part.center.z) <= part.half.z)
            return true;
    }
    return false;
}

void Scene::validate() const {
    require(frame_count >= 1, Errc::invalid_argument, "scene needs at least one frame");
    require(int(ego.size()) == frame_count, Errc::invalid_argument,
            "ego trajectory length does not match frame count");
    std::vector<int> ids;
    for (const Actor& a : actors) {
        require(int(a.poses.size()) == frame_count, Errc::invalid_argument,
                "actor trajectory length does not match frame count");
        a.shape.validate(a.dims);
        for (const Box7& b : a.poses) b.validate();
        ids.push_back(a.track_id);
    }
    std::sort(ids.begin(), ids.end());
    require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), Errc::invalid_argument,
            "track ids must be unique");
}

const Actor& SimLog::actor_by_track(int track_id) const {
    for (const Actor& a : scene.actors)
        if (a.track_id == track_id) return a;
    throw Error(Errc::invalid_argument, "unknown track id " + std::to_string(track_id));
}

namespace {

// Slab-method ray/AABB hit; returns nearest strictly positive distance.
std::optional<double> ray_aabb_hit(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
    double tmin = -1e300, tmax = 1e300;
    const double ov[3] = {o.x, o.y, o.z};
    const double dv[3] = {d.x, d.y, d.z};
    const double lv[3] = {lo.x, lo.y, lo.z};
    const double hv[3] = {hi.x, hi.y, hi.z};
    for (int i = 0; i < 3; ++i) {
        if (std::abs(dv[i]) < 1e-12) {
            if (ov[i] < lv[i] || ov[i] > hv[i]) return std::nullopt;
            continue;
        }
        double t1 = (lv[i] - ov[i]) / dv[i];
        double t2 = (hv[i] - ov[i]) / dv[i];
        if (t1 > t2) std::swap(t1, t2);
        tmin = std::max(tmin, t1);
        tmax = std::min(tmax, t2);
        if (tmin > tmax) return std::nullopt;
    }
    constexpr double eps = 1e-9;
    if (tmax < eps) return std::nullopt;
    return tmin > eps ? tmin : tmax;
}

}  // namespace

std::optional<double> ray_actor_hit(const Vec3& origin, const Vec3& dir, const Actor& actor,
                                    int frame) {
    geom::RigidTransform to_local = geom::box_to_local(actor.poses[frame]);
    Vec3 o = to_local.apply(origin);
    Vec3 d = to_local.rotation.apply(dir);
    std::optional<double> best;
    for (const ShapePart& part : actor.shape.parts) {
        auto t = ray_aabb_hit(o, d, part.center - part.half, part.center + part.half);
        if (t && (!best || *t < *best)) best = t;
    }
    return best;
}

std::optional<double> ray_scene_hit(const Scene& scene, int frame, const Vec3& origin,
                                    const Vec3& dir) {
    std::optional<double> best;
    for (const Actor& a : scene.actors) {
        auto t = ray_actor_hit(origin, dir, a, frame);
        if (t && (!best || *t < *best)) best = t;
    }
    return best;
}

RangeImage render_range_image(const Scene& scene, const SensorModel& sm, int frame) {
    sm.validate();
    require(frame >= 0 && frame < scene.frame_count, Errc::invalid_argument,
            "frame index out of range");
    RangeImage ri;
    ri.rows = sm.rows;
    ri.cols = sm.cols;
    ri.sensor_pose = scene.ego[frame];
    ri.depths.assign(size_t(sm.rows) * sm.cols, -1.0f);
    const Vec3 origin = ri.sensor_pose.translation;
    for (int u = 0; u < sm.rows; ++u) {
        for (int v = 0; v < sm.cols; ++v) {
            Vec3 dir = ri.sensor_pose.rotation.apply(sm.ray_dir(u, v));
            auto t = ray_scene_hit(scene, frame, origin, dir);
            if (t && *t <= sm.max_range) ri.at(u, v) = float(*t);
        }
    }
    return ri;
}

PointCloud range_image_to_points(const RangeImage& ri, const SensorModel& sm) {
    PointCloud pc;
    pc.frame = geom::Frame::world;
    for (int u = 0; u < ri.rows; ++u) {
        for (int v = 0; v < ri.cols; ++v) {
            float d = ri.at(u, v);
            if (d < 0) continue;
            Vec3 p = sm.ray_dir(u, v) * double(d);
            pc.points.push_back(ri.sensor_pose.apply(p));
        }
    }
    return pc;
}

SimLog simulate(const Scene& scene, const SensorModel& sm, uint64_t seed, int n_threads) {
    scene.validate();
    sm.validate();
    SimLog log;
    log.sensor = sm;
    log.scene = scene;
    log.frames.resize(scene.frame_count);

    auto render_frame = [&](int f) {
        FrameRecord& rec = log.frames[f];
        rec.ego_pose = scene.ego[f];
        rec.range_image = render_range_image(scene, sm, f);
        if (scene.depth_noise_sigma > 0) {
            Rng rng(mix_seed(seed, uint64_t(f)));
            for (float& d : rec.range_image.depths) {
                if (d < 0) continue;
                double nd = double(d) + rng.normal(0.0, scene.depth_noise_sigma);
                d = float(std::clamp(nd, 1e-3, sm.max_range));
            }
        }
        rec.cloud = range_image_to_points(rec.range_image, sm);
        for (const Actor& a : scene.actors) {
            GtBox g;
            g.track_id = a.track_id;
            g.box = a.poses[f];
            g.n_points = int(geom::points_in_box(rec.cloud, g.box, 0.0).size());
            g.range = (g.box.center - rec.ego_pose.translation).norm();
            rec.gt_boxes.push_back(g);
        }
    };

    n_threads = std::max(1, std::min(n_threads, scene.frame_count));
    if (n_threads == 1) {
        for (int f = 0; f < scene.frame_count; ++f) render_frame(f);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back([&] {
                for (int f = next.fetch_add(1); f < scene.frame_count; f = next.fetch_add(1))
                    render_frame(f);
            });
        for (auto& th : pool) th.join();
    }
    return log;
}

grid::VoxelMask shape_voxelize(const ShapePrimitiveSet& s, const Box7& b, double voxel) {
    b.validate();
    s.validate(b.dims);
    grid::GridSpec spec(b.dims, voxel);
    grid::VoxelMask mask(spec);
    for (int k = 0; k < spec.nz; ++k)
        for (int j = 0; j < spec.ny; ++j)
            for (int i = 0; i < spec.nx; ++i)
                if (s.contains(spec.center(i, j, k))) mask.set(i, j, k, true);
    return mask;
}

// ---------------------------------------------------------------------------
// catalog

const std::vector<std::string> kArchetypeNames = {"sedan",  "pickup",  "truck",
                                                  "bus",    "crane",   "trailer"};

namespace {

// part from normalized [-0.5, 0.5] coordinates of the box dims
ShapePart npart(const Vec3& dims, double x0, double x1, double y0, double y1, double z0,
                double z1) {
    Vec3 c((x0 + x1) * 0.5 * dims.x, (y0 + y1) * 0.5 * dims.y, (z0 + z1) * 0.5 * dims.z);
    Vec3 h((x1 - x0) * 0.5 * dims.x, (y1 - y0) * 0.5 * dims.y, (z1 - z0) * 0.5 * dims.z);
    return {c, h};
}

}  // namespace

CatalogShape make_archetype(const std::string& name, uint64_t seed) {
    Rng rng(mix_seed(seed, fnv1a64(name.data(), name.size())));
    auto jitter = [&] { return rng.uniform(0.92, 1.08); };

    Vec3 base;
    if (name == "sedan")
        base = {4.6, 1.9, 1.5};
    else if (name == "pickup")
        base = {5.4, 1.95, 1.8};
    else if (name == "truck")
        base = {8.5, 2.5, 3.2};
    else if (name == "bus")
        base = {11.0, 2.5, 3.0};
    else if (name == "crane")
        base = {7.5, 2.4, 3.0};
    else if (name == "trailer")
        base = {9.0, 2.5, 3.4};
    else
        throw Error(Errc::invalid_argument, "unknown archetype: " + name);

    Vec3 dims(base.x * jitter(), base.y * jitter(), base.z * jitter());
    CatalogShape out;
    out.dims = dims;
    auto& parts = out.shape.parts;
    if (name == "sedan") {
        parts.push_back(npart(dims, -0.5, 0.5, -0.5, 0.5, -0.5, 0.1));
        parts.push_back(npart(dims, -0.32, 0.25, -0.44, 0.44, 0.1, 0.5));
    } else if (name == "pickup") {
        parts.push_back(npart(dims, -0.08, 0.3, -0.48, 0.48, -0.5, 0.5));
        parts.push_back(npart(dims, 0.3, 0.5, -0.48, 0.48, -0.5, 0.1));
        parts.push_back(npart(dims, -0.5, -0.08, -0.48, 0.48, -0.5, -0.05));
    } else if (name == "truck") {
        parts.push_back(npart(dims, 0.28, 0.5, -0.45, 0.45, -0.5, 0.25));
        parts.push_back(npart(dims, -0.5, 0.26, -0.5, 0.5, -0.5, 0.5));
    } else if (name == "bus") {
        parts.push_back(npart(dims, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5));
    } else if (name == "crane") {
        parts.push_back(npart(dims, -0.5, -0.1, -0.5, 0.5, -0.5, 0.2));
        parts.push_back(npart(dims, -0.5, 0.5, -0.35, 0.35, -0.5, -0.2));
        parts.push_back(npart(dims, -0.1, 0.5, -0.12, 0.12, 0.2, 0.5));
    } else if (name == "trailer") {
        parts.push_back(npart(dims, -0.45, 0.5, -0.5, 0.5, -0.2, 0.5));
        parts.push_back(npart(dims, -0.5, 0.5, -0.2, 0.2, -0.5, -0.2));
    }
    return out;
}

SensorModel default_sensor() {
    SensorModel sm;
    sm.rows = 64;
    sm.cols = 900;
    sm.el_min = -0.35;
    sm.el_max = 0.17;
    sm.max_range = 75.0;
    return sm;
}

Scene generate_scene(const SceneGenConfig& cfg) {
    require(cfg.n_actors >= 1 && cfg.frames >= 1, Errc::invalid_argument,
            "scene generator needs actors and frames");
    Rng rng(mix_seed(cfg.seed, 0xacce55));
    Scene scene;
    scene.frame_count = cfg.frames;
    scene.frame_period = cfg.frame_period;
    scene.seed = cfg.seed;

    for (int f = 0; f < cfg.frames; ++f) {
        geom::RigidTransform ego;
        ego.rotation = geom::Mat3::identity();
        ego.translation = {cfg.ego_speed * cfg.frame_period * f, 0.0, cfg.sensor_height};
        scene.ego.push_back(ego);
    }

    // Placement keeps whole trajectories separated so object boxes stay
    // disjoint for the full sequence (center distance above the sum of the
    // footprint circumradii plus clearance, at every frame).
    std::vector<std::vector<Vec3>> placed_paths;
    std::vector<double> placed_radius;
    for (int i = 0; i < cfg.n_actors; ++i) {
        const std::string& arch = kArchetypeNames[i % kArchetypeNames.size()];
        CatalogShape cs = make_archetype(arch, rng.next_u64());
        double bev_radius = 0.5 * std::hypot(cs.dims.x, cs.dims.y);

        std::vector<Vec3> path;
        double yaw = 0.0, speed = 0.0, yaw_rate = 0.0;
        for (int attempt = 0; attempt < 200; ++attempt) {
            double r = rng.uniform(cfg.min_radius, cfg.max_radius);
            double az = rng.uniform(-kPi, kPi);
            Vec3 pos{r * std::cos(az), r * std::sin(az), cs.dims.z * 0.5};
            yaw = rng.uniform(-kPi, kPi);
            bool moving = rng.uniform() < cfg.moving_fraction;
            speed = moving ? rng.uniform(2.0, 8.0) : 0.0;
            yaw_rate = moving && rng.uniform() < 0.5 ? rng.uniform(-0.02, 0.02) : 0.0;

            path.clear();
            Vec3 c = pos;
            double y = yaw;
            for (int f = 0; f < cfg.frames; ++f) {
                path.push_back(c);
                c += Vec3(std::cos(y), std::sin(y), 0.0) * (speed * cfg.frame_period);
                y = geom::wrap_angle(y + yaw_rate);
            }

            bool ok = true;
            for (size_t p = 0; p < placed_paths.size() && ok; ++p) {
                double min_gap = bev_radius + placed_radius[p] + 0.5;
                for (int f = 0; f < cfg.frames && ok; ++f)
                    if ((path[f] - placed_paths[p][f]).norm() < min_gap) ok = false;
            }
            if (ok) break;
        }
        placed_paths.push_back(path);
        placed_radius.push_back(bev_radius);

        Actor a;
        a.track_id = i + 1;
        a.archetype = arch;
        a.dims = cs.dims;
        a.shape = cs.shape;
        double y = yaw;
        for (int f = 0; f < cfg.frames; ++f) {
            a.poses.emplace_back(path[f], cs.dims, y);
            y = geom::wrap_angle(y + yaw_rate);
        }
        scene.actors.push_back(a);
    }
    return scene;
}

}  // namespace ocf::sim
