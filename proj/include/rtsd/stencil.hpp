#ifndef RTSD_STENCIL_HPP
#define RTSD_STENCIL_HPP

#include <vector>

#include "rtsd/grid.hpp"

namespace rtsd {

// Per-voxel distribution of emitted charge over the drift offsets.
// Fractions are nonnegative and sum to exactly 1 per voxel.
struct DriftStencil {
  Species species = Species::electron;
  int M = 1, N = 1, P = 1;
  std::vector<Offset> offsets;   // canonical order, see drift_offsets()
  std::vector<double> frac;      // V x offsets.size(), voxel-major

  int voxels() const { return M * N * P; }
  int n_offsets() const { return static_cast<int>(offsets.size()); }
  double at(int v, int o) const { return frac[static_cast<size_t>(v) * offsets.size() + o]; }

  // True when every voxel puts all mass on the on-axis single-step offset.
  bool on_axis_only() const;

  // Uniform-field configuration: all mass on (0,0,+1) / (0,0,-1).
  static DriftStencil uniform(Species s, int M, int N, int P);

  // Normalizes the given nonnegative fractions to sum 1 per voxel.
  static DriftStencil configured(Species s, int M, int N, int P,
                                 const std::vector<double>& raw_frac);

  void validate() const;
};

}  // namespace rtsd

#endif
