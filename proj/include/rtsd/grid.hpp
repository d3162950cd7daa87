#ifndef RTSD_GRID_HPP
#define RTSD_GRID_HPP

#include <array>
#include <cstdint>
#include <vector>

#include "rtsd/errors.hpp"

namespace rtsd {

enum class Species : int { electron = 0, hole = 1 };

// Signal sign convention: full electron collection at the anode induces +1.
inline double species_sign(Species s) { return s == Species::electron ? 1.0 : -1.0; }

// Voxelized detector volume. The anode plane adjoins layer k = P-1,
// the cathode plane adjoins layer k = 0.
struct GridSpec {
  int M = 1;        // subpixels along OX
  int N = 1;        // subpixels along OY
  int P = 1;        // voxels along OZ
  int T = 1;        // time steps
  double dt = 1e-8; // step duration [s]

  int voxels() const { return M * N * P; }
  int columns() const { return M * N; }
  // 1 cathode + M*N anode subpixel electrodes
  int electrodes() const { return 1 + M * N; }

  int column(int i, int j) const { return i * N + j; }
  int index(int i, int j, int k) const { return (i * N + j) * P + k; }
  bool contains(int i, int j, int k) const {
    return i >= 0 && i < M && j >= 0 && j < N && k >= 0 && k < P;
  }

  void validate() const {
    if (M < 1 || N < 1 || P < 1 || T < 1)
      throw ValidationError("GridSpec: M, N, P, T must all be >= 1");
    if (!(dt > 0.0)) throw ValidationError("GridSpec: dt must be positive");
  }

  bool operator==(const GridSpec& o) const = default;
};

// Electrode indexing: 0 = cathode, 1 + i*N + j = anode subpixel (i,j).
inline int cathode_electrode() { return 0; }
inline int anode_electrode(const GridSpec& g, int i, int j) { return 1 + g.column(i, j); }

struct Offset {
  int dx, dy, dz;
  bool operator==(const Offset&) const = default;
};

// Drift offsets per species, (dx,dy,dz) lexicographic. Electrons advance
// toward the anode (dz in {+1,+2}), holes toward the cathode (dz in {-1,-2}).
std::vector<Offset> drift_offsets(Species s);

// Index of the on-axis single-step offset (0,0,+1) / (0,0,-1).
int on_axis_offset(Species s);

// Electron-hole pair deposited at one voxel at t = 0.
struct Injection {
  int i = 0, j = 0, k = 0;
  double magnitude = 1.0;
};

}  // namespace rtsd

#endif
