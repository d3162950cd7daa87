#ifndef RTSD_WEIGHTING_HPP
#define RTSD_WEIGHTING_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "rtsd/grid.hpp"

namespace rtsd {

enum class PhiMode { planar, small_pixel_analytic, file };

// Lateral detector geometry for the analytic small-pixel model, in units of
// the detector thickness. The central pixel (side pixel_size) is subdivided
// into M x N subpixel electrodes.
struct PixelGeometry {
  double thickness = 1.0;
  double pixel_size = 0.2;
};

// Shockley-Ramo weighting potential per electrode over the voxel grid.
// Electrode 0 is the cathode; 1 + i*N + j the anode subpixel (i,j).
struct WeightingPotentialField {
  int M = 1, N = 1, P = 1;
  std::vector<double> phi;            // E x (M*N*P), voxels (i,j,k) row-major
  std::vector<double> anode_plane;    // E x (M*N)
  std::vector<double> cathode_plane;  // E x (M*N)

  int voxels() const { return M * N * P; }
  int electrodes() const { return 1 + M * N; }

  // k == P addresses the anode plane, k == -1 the cathode plane;
  // lateral indices are clamped (virtual-boundary extension).
  double at(int e, int i, int j, int k) const;

  // Partition of unity, [0,1] range, and boundary-plane values.
  void validate(double tol = 1e-10) const;

  // Merges factor x factor electrode groups (summing their potentials) and
  // block-averages laterally over voxels, for coarse-grid datasets.
  WeightingPotentialField downsample(int factor) const;

  void save(const std::filesystem::path& dir, const std::string& stem) const;
  static WeightingPotentialField load(const std::filesystem::path& manifest_file);
};

WeightingPotentialField build_planar_phi(const GridSpec& grid);
WeightingPotentialField build_small_pixel_phi(const GridSpec& grid,
                                              const PixelGeometry& geom = {});

// Half-space weighting potential of a rectangle [x1,x2]x[y1,y2] held at unit
// potential on a grounded plane, evaluated at height z > 0 above the plane.
double rect_electrode_phi(double x, double y, double z, double x1, double x2, double y1,
                          double y2);

}  // namespace rtsd

#endif
