#include "io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ocf::io {

// ---- bytes ------------------------------------------------------------------

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(bool(in), Errc::io_error, "cannot open " + path);
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    require(!in.bad(), Errc::io_error, "read failed on " + path);
    return data;
}

void write_file_atomic(const std::string& path, const void* data, size_t n) {
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(bool(out), Errc::io_error, "cannot open " + tmp + " for writing");
        out.write(static_cast<const char*>(data), std::streamsize(n));
        require(bool(out), Errc::io_error, "write failed on " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    require(!ec, Errc::io_error, "rename failed: " + tmp + " -> " + path);
}

void write_file_atomic(const std::string& path, const std::vector<uint8_t>& data) {
    write_file_atomic(path, data.data(), data.size());
}

uint64_t hash_bytes(const void* data, size_t n) { return fnv1a64(data, n); }

uint64_t hash_file(const std::string& path) {
    std::vector<uint8_t> data = read_file(path);
    return fnv1a64(data.data(), data.size());
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

json read_json(const std::string& path) {
    std::vector<uint8_t> data = read_file(path);
    json j = json::parse(data.begin(), data.end(), nullptr, false);
    require(!j.is_discarded(), Errc::data_error, "invalid JSON in " + path);
    return j;
}

void write_json_atomic(const std::string& path, const json& j) {
    std::string text = j.dump(2);
    text.push_back('\n');
    write_file_atomic(path, text.data(), text.size());
}

// ---- little-endian cursors ---------------------------------------------------

namespace {

struct Writer {
    std::vector<uint8_t> buf;

    void bytes(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u16(uint16_t v) { bytes(&v, 2); }
    void u32(uint32_t v) { bytes(&v, 4); }
    void f32(float v) { bytes(&v, 4); }
};

struct Reader {
    const std::vector<uint8_t>& buf;
    const std::string& path;
    size_t off = 0;

    void need(size_t n) {
        require(off + n <= buf.size(), Errc::data_error, "truncated file: " + path);
    }
    void magic(const char tag[4]) {
        need(4);
        require(std::memcmp(buf.data() + off, tag, 4) == 0, Errc::data_error,
                "bad magic in " + path + " (expected " + std::string(tag, 4) + ")");
        off += 4;
    }
    uint16_t u16() {
        need(2);
        uint16_t v;
        std::memcpy(&v, buf.data() + off, 2);
        off += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, buf.data() + off, 4);
        off += 4;
        return v;
    }
    float f32() {
        need(4);
        float v;
        std::memcpy(&v, buf.data() + off, 4);
        off += 4;
        return v;
    }
};

}  // namespace

// ---- OCRI ---------------------------------------------------------------------

void write_range_image(const std::string& path, const sim::RangeImage& ri,
                       const sim::SensorModel& sm) {
    require(ri.rows > 0 && ri.cols > 0, Errc::invalid_argument, "empty range image");
    require(ri.depths.size() == size_t(ri.rows) * ri.cols, Errc::invalid_argument,
            "range image depth count does not match its shape");
    Writer w;
    w.bytes("OCRI", 4);
    w.u32(uint32_t(ri.rows));
    w.u32(uint32_t(ri.cols));
    w.f32(float(sm.el_min));
    w.f32(float(sm.el_max));
    w.f32(float(sm.max_range));
    w.bytes(ri.depths.data(), ri.depths.size() * 4);
    write_file_atomic(path, w.buf);
}

RangeImageFile read_range_image(const std::string& path) {
    std::vector<uint8_t> data = read_file(path);
    Reader r{data, path};
    r.magic("OCRI");
    RangeImageFile out;
    out.image.rows = int(r.u32());
    out.image.cols = int(r.u32());
    require(out.image.rows > 0 && out.image.cols > 0 &&
                size_t(out.image.rows) * out.image.cols < (size_t(1) << 30),
            Errc::data_error, "unreasonable range image shape in " + path);
    out.el_min = r.f32();
    out.el_max = r.f32();
    out.max_range = r.f32();
    size_t n = size_t(out.image.rows) * out.image.cols;
    r.need(n * 4);
    out.image.depths.resize(n);
    std::memcpy(out.image.depths.data(), data.data() + r.off, n * 4);
    r.off += n * 4;
    require(r.off == data.size(), Errc::data_error, "trailing bytes in " + path);
    return out;
}

// ---- OCOG ----------------------------------------------------------------------

void write_occgrid(const std::string& path, const grid::OccGrid& g) {
    const grid::GridSpec& spec = g.spec;
    require(spec.cell_count() > 0, Errc::invalid_argument, "empty grid");
    require(spec.nx <= 0xffff && spec.ny <= 0xffff && spec.nz <= 0xffff, Errc::invalid_argument,
            "grid too large for the file format");
    require(g.cells.size() == spec.cell_count(), Errc::invalid_argument,
            "grid cell count does not match its spec");
    Writer w;
    w.bytes("OCOG", 4);
    w.u16(uint16_t(spec.nx));
    w.u16(uint16_t(spec.ny));
    w.u16(uint16_t(spec.nz));
    w.f32(float(spec.voxel));
    w.f32(float(spec.box_dims.x));
    w.f32(float(spec.box_dims.y));
    w.f32(float(spec.box_dims.z));
    std::vector<uint8_t> packed((g.cells.size() + 3) / 4, 0);
    for (size_t i = 0; i < g.cells.size(); ++i) {
        uint8_t s = g.cells[i];
        require(s <= 2, Errc::internal, "grid holds an invalid cell state");
        packed[i >> 2] |= uint8_t(s << ((i & 3) * 2));
    }
    w.bytes(packed.data(), packed.size());
    write_file_atomic(path, w.buf);
}

grid::OccGrid read_occgrid(const std::string& path) {
    std::vector<uint8_t> data = read_file(path);
    Reader r{data, path};
    r.magic("OCOG");
    int nx = r.u16(), ny = r.u16(), nz = r.u16();
    double voxel = r.f32();
    // one read per statement: argument evaluation order is unspecified
    geom::Vec3 dims;
    dims.x = r.f32();
    dims.y = r.f32();
    dims.z = r.f32();
    require(nx > 0 && ny > 0 && nz > 0 && voxel > 0, Errc::data_error,
            "invalid grid header in " + path);

    // The stored counts are authoritative; dims went through f32 so only check
    // they are consistent to within one cell.
    grid::GridSpec spec;
    spec.nx = nx;
    spec.ny = ny;
    spec.nz = nz;
    spec.voxel = voxel;
    spec.box_dims = dims;
    auto consistent = [voxel](int n, double extent) {
        return n * voxel > extent - 0.5 * voxel && n * voxel < extent + 1.5 * voxel;
    };
    require(consistent(nx, dims.x) && consistent(ny, dims.y) && consistent(nz, dims.z),
            Errc::data_error, "grid shape does not match its dims and voxel size in " + path);

    grid::OccGrid g(spec);
    size_t packed_n = (spec.cell_count() + 3) / 4;
    r.need(packed_n);
    for (size_t i = 0; i < spec.cell_count(); ++i) {
        uint8_t s = uint8_t((data[r.off + (i >> 2)] >> ((i & 3) * 2)) & 3);
        require(s <= 2, Errc::data_error, "reserved cell state in " + path);
        g.cells[i] = s;
    }
    r.off += packed_n;
    require(r.off == data.size(), Errc::data_error, "trailing bytes in " + path);
    return g;
}

json ocog_meta_to_json(const OcogMeta& m) {
    return json{{"track_id", m.track_id},
                {"frame_first", m.frame_first},
                {"frame_last", m.frame_last},
                {"scene_hash", m.scene_hash}};
}

OcogMeta ocog_meta_from_json(const json& j) {
    OcogMeta m;
    m.track_id = j.at("track_id").get<int>();
    m.frame_first = j.at("frame_first").get<int>();
    m.frame_last = j.at("frame_last").get<int>();
    m.scene_hash = j.at("scene_hash").get<std::string>();
    return m;
}

// ---- PLY ------------------------------------------------------------------------

void write_occupied_ply(const std::string& path, const grid::OccGrid& g) {
    const grid::GridSpec& spec = g.spec;
    size_t cubes = g.count(grid::CellState::occupied);
    std::string out;
    out += "ply\nformat ascii 1.0\n";
    out += "element vertex " + std::to_string(cubes * 8) + "\n";
    out += "property float x\nproperty float y\nproperty float z\n";
    out += "element face " + std::to_string(cubes * 6) + "\n";
    out += "property list uchar int vertex_indices\nend_header\n";

    char line[96];
    for (int k = 0; k < spec.nz; ++k)
        for (int j = 0; j < spec.ny; ++j)
            for (int i = 0; i < spec.nx; ++i) {
                if (g.at(i, j, k) != grid::CellState::occupied) continue;
                geom::Vec3 c = spec.center(i, j, k);
                double h = spec.voxel * 0.5;
                for (int corner = 0; corner < 8; ++corner) {
                    double x = c.x + ((corner & 1) ? h : -h);
                    double y = c.y + ((corner & 2) ? h : -h);
                    double z = c.z + ((corner & 4) ? h : -h);
                    std::snprintf(line, sizeof line, "%.6f %.6f %.6f\n", x, y, z);
                    out += line;
                }
            }
    // corner numbering: bit0 = +x, bit1 = +y, bit2 = +z
    static const int faces[6][4] = {{0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4},
                                    {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5}};
    for (size_t cube = 0; cube < cubes; ++cube) {
        int base = int(cube * 8);
        for (const int* f : faces) {
            std::snprintf(line, sizeof line, "4 %d %d %d %d\n", base + f[0], base + f[1],
                          base + f[2], base + f[3]);
            out += line;
        }
    }
    write_file_atomic(path, out.data(), out.size());
}

// ---- checkpoints -------------------------------------------------------------------

void write_checkpoint(const std::string& path, const CheckpointData& c) {
    std::string header = c.header.dump();
    Writer w;
    w.bytes("OCCK", 4);
    w.u32(uint32_t(header.size()));
    w.bytes(header.data(), header.size());
    w.bytes(c.payload.data(), c.payload.size() * 4);
    write_file_atomic(path, w.buf);
}

CheckpointData read_checkpoint(const std::string& path) {
    std::vector<uint8_t> data = read_file(path);
    Reader r{data, path};
    r.magic("OCCK");
    uint32_t header_len = r.u32();
    r.need(header_len);
    json header = json::parse(data.begin() + long(r.off), data.begin() + long(r.off + header_len),
                              nullptr, false);
    require(!header.is_discarded(), Errc::data_error, "invalid checkpoint header in " + path);
    r.off += header_len;
    size_t rest = data.size() - r.off;
    require(rest % 4 == 0, Errc::data_error, "checkpoint payload is not float-aligned in " + path);
    CheckpointData out;
    out.header = std::move(header);
    out.payload.resize(rest / 4);
    std::memcpy(out.payload.data(), data.data() + r.off, rest);
    return out;
}

// ---- scenes ---------------------------------------------------------------------------

namespace {

json vec3_to_json(const geom::Vec3& v) { return json::array({v.x, v.y, v.z}); }

geom::Vec3 vec3_from_json(const json& j) {
    require(j.is_array() && j.size() == 3, Errc::data_error, "expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json pose_to_json(const geom::RigidTransform& t) {
    json j;
    j["pos"] = vec3_to_json(t.translation);
    j["rot"] = t.rotation.m;
    return j;
}

geom::RigidTransform pose_from_json(const json& j) {
    geom::RigidTransform t;
    t.translation = vec3_from_json(j.at("pos"));
    if (j.contains("rot")) {
        const json& r = j.at("rot");
        require(r.is_array() && r.size() == 9, Errc::data_error, "pose rot must have 9 entries");
        for (int i = 0; i < 9; ++i) t.rotation.m[i] = r[i].get<double>();
    } else {
        t.rotation = geom::Mat3::rot_z(j.value("yaw", 0.0));
    }
    t.validate();
    return t;
}

json box_to_json(const geom::Box7& b) {
    return json{{"center", vec3_to_json(b.center)}, {"dims", vec3_to_json(b.dims)},
                {"yaw", b.yaw}};
}

geom::Box7 box_from_json(const json& j) {
    geom::Box7 b(vec3_from_json(j.at("center")), vec3_from_json(j.at("dims")),
                 j.at("yaw").get<double>());
    b.validate();
    return b;
}

}  // namespace

json sensor_to_json(const sim::SensorModel& sm) {
    return json{{"rows", sm.rows},
                {"cols", sm.cols},
                {"el_min", sm.el_min},
                {"el_max", sm.el_max},
                {"max_range", sm.max_range}};
}

sim::SensorModel sensor_from_json(const json& j) {
    sim::SensorModel sm;
    sm.rows = j.at("rows").get<int>();
    sm.cols = j.at("cols").get<int>();
    sm.el_min = j.at("el_min").get<double>();
    sm.el_max = j.at("el_max").get<double>();
    sm.max_range = j.at("max_range").get<double>();
    sm.validate();
    return sm;
}

json scene_to_json(const sim::Scene& s, const sim::SensorModel& sm) {
    json j;
    j["sensor"] = sensor_to_json(sm);
    j["frame_count"] = s.frame_count;
    j["frame_period"] = s.frame_period;
    j["seed"] = s.seed;
    j["depth_noise_sigma"] = s.depth_noise_sigma;
    json ego = json::array();
    for (const auto& t : s.ego) ego.push_back(pose_to_json(t));
    j["ego"] = ego;
    json actors = json::array();
    for (const sim::Actor& a : s.actors) {
        json ja;
        ja["track_id"] = a.track_id;
        ja["archetype"] = a.archetype;
        ja["dims"] = vec3_to_json(a.dims);
        json parts = json::array();
        for (const sim::ShapePart& p : a.shape.parts)
            parts.push_back(json{{"center", vec3_to_json(p.center)}, {"half", vec3_to_json(p.half)}});
        ja["parts"] = parts;
        json poses = json::array();
        for (const geom::Box7& b : a.poses)
            poses.push_back(json{{"center", vec3_to_json(b.center)}, {"yaw", b.yaw}});
        ja["poses"] = poses;
        actors.push_back(ja);
    }
    j["actors"] = actors;
    return j;
}

SceneBundle scene_from_json(const json& j) {
    SceneBundle out;
    out.sensor = sensor_from_json(j.at("sensor"));
    sim::Scene& s = out.scene;
    s.frame_count = j.at("frame_count").get<int>();
    s.frame_period = j.at("frame_period").get<double>();
    s.seed = j.value("seed", uint64_t(0));
    s.depth_noise_sigma = j.value("depth_noise_sigma", 0.0);
    for (const json& p : j.at("ego")) s.ego.push_back(pose_from_json(p));
    for (const json& ja : j.at("actors")) {
        sim::Actor a;
        a.track_id = ja.at("track_id").get<int>();
        a.archetype = ja.value("archetype", std::string("custom"));
        a.dims = vec3_from_json(ja.at("dims"));
        for (const json& jp : ja.at("parts"))
            a.shape.parts.push_back({vec3_from_json(jp.at("center")), vec3_from_json(jp.at("half"))});
        for (const json& jp : ja.at("poses"))
            a.poses.emplace_back(vec3_from_json(jp.at("center")), a.dims,
                                 jp.at("yaw").get<double>());
        s.actors.push_back(std::move(a));
    }
    s.validate();
    return out;
}

SceneBundle load_scene_doc(const json& j) {
    if (!j.contains("generate")) return scene_from_json(j);

    const json& g = j.at("generate");
    sim::SceneGenConfig cfg;
    cfg.n_actors = g.value("n_actors", cfg.n_actors);
    cfg.frames = g.value("frames", cfg.frames);
    cfg.frame_period = g.value("frame_period", cfg.frame_period);
    cfg.seed = g.value("seed", cfg.seed);
    cfg.min_radius = g.value("min_radius", cfg.min_radius);
    cfg.max_radius = g.value("max_radius", cfg.max_radius);
    cfg.moving_fraction = g.value("moving_fraction", cfg.moving_fraction);
    cfg.ego_speed = g.value("ego_speed", cfg.ego_speed);
    cfg.sensor_height = g.value("sensor_height", cfg.sensor_height);

    SceneBundle out;
    out.scene = sim::generate_scene(cfg);
    out.scene.depth_noise_sigma = j.value("depth_noise_sigma", 0.0);
    out.sensor = j.contains("sensor") ? sensor_from_json(j.at("sensor")) : sim::default_sensor();
    return out;
}

SceneBundle load_scene_file(const std::string& path) { return load_scene_doc(read_json(path)); }

// ---- sim log directories ------------------------------------------------------------------

namespace {

std::string frame_file(int f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%04d.ocri", f);
    return buf;
}

}  // namespace

void save_simlog(const std::string& dir, const sim::SimLog& log) {
    fs::create_directories(fs::path(dir) / "frames");
    write_json_atomic((fs::path(dir) / "scene.json").string(),
                      scene_to_json(log.scene, log.sensor));

    json frames = json::array();
    for (size_t f = 0; f < log.frames.size(); ++f) {
        const sim::FrameRecord& rec = log.frames[f];
        write_range_image((fs::path(dir) / "frames" / frame_file(int(f))).string(),
                          rec.range_image, log.sensor);
        json jf;
        jf["frame"] = int(f);
        jf["timestamp"] = double(f) * log.scene.frame_period;
        jf["ego"] = pose_to_json(rec.ego_pose);
        json boxes = json::array();
        for (const sim::GtBox& g : rec.gt_boxes) {
            json jb = box_to_json(g.box);
            jb["track_id"] = g.track_id;
            jb["n_points"] = g.n_points;
            jb["range"] = g.range;
            boxes.push_back(jb);
        }
        jf["boxes"] = boxes;
        frames.push_back(jf);
    }
    write_json_atomic((fs::path(dir) / "boxes.json").string(), frames);
}

sim::SimLog load_simlog(const std::string& dir) {
    SceneBundle bundle = scene_from_json(read_json((fs::path(dir) / "scene.json").string()));
    json frames = read_json((fs::path(dir) / "boxes.json").string());
    require(frames.is_array() && int(frames.size()) == bundle.scene.frame_count, Errc::data_error,
            "boxes.json frame count does not match the scene in " + dir);

    sim::SimLog log;
    log.sensor = bundle.sensor;
    log.scene = bundle.scene;
    for (int f = 0; f < bundle.scene.frame_count; ++f) {
        const json& jf = frames[size_t(f)];
        require(jf.at("frame").get<int>() == f, Errc::data_error,
                "boxes.json frames out of order in " + dir);
        sim::FrameRecord rec;
        rec.ego_pose = pose_from_json(jf.at("ego"));
        std::string path = (fs::path(dir) / "frames" / frame_file(f)).string();
        RangeImageFile rif = read_range_image(path);
        require(rif.image.rows == log.sensor.rows && rif.image.cols == log.sensor.cols,
                Errc::data_error, "range image shape mismatch in " + path);
        rec.range_image = rif.image;
        rec.range_image.sensor_pose = rec.ego_pose;
        rec.cloud = sim::range_image_to_points(rec.range_image, log.sensor);
        for (const json& jb : jf.at("boxes")) {
            sim::GtBox g;
            g.box = box_from_json(jb);
            g.track_id = jb.at("track_id").get<int>();
            g.n_points = jb.at("n_points").get<int>();
            g.range = jb.at("range").get<double>();
            rec.gt_boxes.push_back(g);
        }
        log.frames.push_back(std::move(rec));
    }
    return log;
}

}  // namespace ocf::io
