#pragma once

#include <cstdint>
#include <vector>

#include "geometry.hpp"

namespace ocf::grid {

using geom::Vec3;

// Geometry of a box-frame voxel grid: counts come from the box dims and the
// voxel edge, cell (i,j,k) is centered at (-l/2+(i+0.5)*voxel, ...).
struct GridSpec {
    int nx = 0, ny = 0, nz = 0;
    double voxel = 0.0;
    Vec3 box_dims;

    GridSpec() = default;
    GridSpec(const Vec3& dims, double voxel_size);

    size_t cell_count() const { return size_t(nx) * ny * nz; }
    size_t index(int i, int j, int k) const { return size_t(i) + size_t(nx) * (j + size_t(ny) * k); }
    Vec3 center(int i, int j, int k) const {
        return {-box_dims.x * 0.5 + (i + 0.5) * voxel, -box_dims.y * 0.5 + (j + 0.5) * voxel,
                -box_dims.z * 0.5 + (k + 0.5) * voxel};
    }
    // floor-indexing over half-open cells [min, min+voxel); false if outside
    bool locate(const Vec3& p, int& i, int& j, int& k) const;
};

enum class CellState : uint8_t { free = 0, occupied = 1, unobserved = 2 };

// Binary occupied mask over a GridSpec.
struct VoxelMask {
    GridSpec spec;
    std::vector<uint8_t> occupied;

    explicit VoxelMask(const GridSpec& s) : spec(s), occupied(s.cell_count(), 0) {}
    bool at(int i, int j, int k) const { return occupied[spec.index(i, j, k)] != 0; }
    void set(int i, int j, int k, bool v) { occupied[spec.index(i, j, k)] = v ? 1 : 0; }
    size_t count() const;
};

// Tri-state object-centric occupancy volume.
struct OccGrid {
    GridSpec spec;
    std::vector<uint8_t> cells;  // CellState values

    OccGrid() = default;
    explicit OccGrid(const GridSpec& s, CellState fill = CellState::free)
        : spec(s), cells(s.cell_count(), uint8_t(fill)) {}

    CellState at(int i, int j, int k) const { return CellState(cells[spec.index(i, j, k)]); }
    void set(int i, int j, int k, CellState s) { cells[spec.index(i, j, k)] = uint8_t(s); }
    size_t count(CellState s) const;
};

}  // namespace ocf::grid
