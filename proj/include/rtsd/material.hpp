#ifndef RTSD_MATERIAL_HPP
#define RTSD_MATERIAL_HPP

#include <string>
#include <vector>

#include "rtsd/grid.hpp"

namespace rtsd {

// Per-voxel transition probabilities for one carrier species.
// All values are dimensionless fractions in [0,1].
struct SpeciesCoeffs {
  std::vector<double> drift;                 // V: fraction of mobile charge leaving per step
  std::vector<double> rec;                   // V: recombination fraction
  std::vector<std::vector<double>> trap;     // centers x V: trapping fraction
  std::vector<std::vector<double>> detrap;   // centers x V: detrapping fraction

  int centers() const { return static_cast<int>(trap.size()); }
  static SpeciesCoeffs zeros(int voxels, int centers);
};

// The trainable unknowns / the synthetic ground truth. One trap center for
// electrons and two for holes by default.
struct MaterialMap {
  int M = 1, N = 1, P = 1;
  SpeciesCoeffs e, h;

  int voxels() const { return M * N * P; }
  const SpeciesCoeffs& coeffs(Species s) const { return s == Species::electron ? e : h; }
  SpeciesCoeffs& coeffs(Species s) { return s == Species::electron ? e : h; }

  static MaterialMap zeros(int M, int N, int P, int e_centers = 1, int h_centers = 2);

  // Every coefficient in [0,1]; per voxel and species rec + sum(trap) <= 1.
  void validate() const;

  // Packed flat order: eDrift, eRec, eT[0..], eD[0..], hDrift, hRec, hT[0..], hD[0..],
  // each a V-sized block with voxels in (i,j,k) row-major order.
  std::vector<double> pack() const;
  static MaterialMap unpack(const std::vector<double>& flat, int M, int N, int P,
                            int e_centers, int h_centers);
};

}  // namespace rtsd

#endif
