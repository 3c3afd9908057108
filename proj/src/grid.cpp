#include "grid.hpp"

#include <algorithm>
#include <cmath>

namespace ocf::grid {

GridSpec::GridSpec(const Vec3& dims, double voxel_size) {
    require(voxel_size > 0, Errc::invalid_argument, "voxel size must be positive");
    require(dims.x > 0 && dims.y > 0 && dims.z > 0, Errc::invalid_argument,
            "grid box dims must be positive");
    nx = int(std::ceil(dims.x / voxel_size));
    ny = int(std::ceil(dims.y / voxel_size));
    nz = int(std::ceil(dims.z / voxel_size));
    voxel = voxel_size;
    box_dims = dims;
}

bool GridSpec::locate(const Vec3& p, int& i, int& j, int& k) const {
    double fx = std::floor((p.x + box_dims.x * 0.5) / voxel);
    double fy = std::floor((p.y + box_dims.y * 0.5) / voxel);
    double fz = std::floor((p.z + box_dims.z * 0.5) / voxel);
    i = int(fx);
    j = int(fy);
    k = int(fz);
    return fx >= 0 && fy >= 0 && fz >= 0 && i < nx && j < ny && k < nz;
}

size_t VoxelMask::count() const {
    return size_t(std::count(occupied.begin(), occupied.end(), uint8_t(1)));
}

size_t OccGrid::count(CellState s) const {
    return size_t(std::count(cells.begin(), cells.end(), uint8_t(s)));
}

}  // namespace ocf::grid
