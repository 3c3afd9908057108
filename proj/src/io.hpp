#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "simulator.hpp"

namespace ocf::io {

// ---- bytes and hashing ----------------------------------------------------

std::vector<uint8_t> read_file(const std::string& path);

// Writes to a sibling temp file and renames into place.
void write_file_atomic(const std::string& path, const void* data, size_t n);
void write_file_atomic(const std::string& path, const std::vector<uint8_t>& data);

uint64_t hash_bytes(const void* data, size_t n);
uint64_t hash_file(const std::string& path);
std::string hash_hex(uint64_t h);

nlohmann::json read_json(const std::string& path);
void write_json_atomic(const std::string& path, const nlohmann::json& j);

// ---- range images ("OCRI") ------------------------------------------------
// magic "OCRI", little-endian: u32 rows, u32 cols, f32 el_min, f32 el_max,
// f32 max_range, then rows*cols f32 depths row-major (-1 = no return).

void write_range_image(const std::string& path, const sim::RangeImage& ri,
                       const sim::SensorModel& sm);

struct RangeImageFile {
    sim::RangeImage image;  // sensor_pose is not stored in the file
    double el_min = 0.0, el_max = 0.0, max_range = 0.0;
};
RangeImageFile read_range_image(const std::string& path);

// ---- occupancy grids ("OCOG") ---------------------------------------------
// magic "OCOG", little-endian: u16 nx, ny, nz, f32 voxel, 3x f32 box dims,
// then ceil(nx*ny*nz/4) bytes of 2-bit cells in x-fastest order
// (00 free, 01 occupied, 10 unobserved, 11 reserved).

void write_occgrid(const std::string& path, const grid::OccGrid& g);
grid::OccGrid read_occgrid(const std::string& path);

// Sidecar metadata conventionally stored at <path>.json.
struct OcogMeta {
    int track_id = 0;
    int frame_first = 0, frame_last = 0;
    std::string scene_hash;
};
nlohmann::json ocog_meta_to_json(const OcogMeta& m);
OcogMeta ocog_meta_from_json(const nlohmann::json& j);

// ---- voxel meshes ----------------------------------------------------------

// ASCII PLY with one cube per occupied voxel, coordinates in the box frame.
void write_occupied_ply(const std::string& path, const grid::OccGrid& g);

// ---- checkpoints ("OCCK") --------------------------------------------------
// magic "OCCK", u32 header length, JSON header (model config plus a tensor
// manifest with shapes and float offsets), then the f32 payload.

struct CheckpointData {
    nlohmann::json header;
    std::vector<float> payload;
};
void write_checkpoint(const std::string& path, const CheckpointData& c);
CheckpointData read_checkpoint(const std::string& path);

// ---- scenes and sim logs ----------------------------------------------------

struct SceneBundle {
    sim::Scene scene;
    sim::SensorModel sensor;
};

nlohmann::json sensor_to_json(const sim::SensorModel& sm);
sim::SensorModel sensor_from_json(const nlohmann::json& j);

// Fully explicit scene (ego poses, actor shapes and trajectories).
nlohmann::json scene_to_json(const sim::Scene& s, const sim::SensorModel& sm);
SceneBundle scene_from_json(const nlohmann::json& j);

// Loads a scene document; a {"generate": {...}} stanza is expanded through
// the procedural generator, otherwise the explicit form is required.
SceneBundle load_scene_doc(const nlohmann::json& j);
SceneBundle load_scene_file(const std::string& path);

// Sim log directory: scene.json, boxes.json, frames/frame_<k>.ocri. Point
// clouds are reconstructed from the range images on load.
void save_simlog(const std::string& dir, const sim::SimLog& log);
sim::SimLog load_simlog(const std::string& dir);

}  // namespace ocf::io
