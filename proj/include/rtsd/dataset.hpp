#ifndef RTSD_DATASET_HPP
#define RTSD_DATASET_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rtsd/material.hpp"
#include "rtsd/transport.hpp"

namespace rtsd {

// Per-voxel sampling ranges for synthetic ground truth. Drift coefficients
// are drawn uniformly as direct per-step fractions; everything else is drawn
// log-uniformly as a lifetime [s] and converted via 1 - exp(-dt/tau).
struct CoeffProfile {
  // electron drift stays below ~0.85: at a voxel nobody transits (the lowest
  // injection depth) recombination only acts on the retained (1 - w_drift)
  // mass, and w_drift near 1 makes w_rec there effectively unidentifiable
  double e_drift_lo = 0.65, e_drift_hi = 0.85;
  double h_drift_lo = 0.2, h_drift_hi = 0.4;
  double tau_eT_lo = 5e-7, tau_eT_hi = 5e-6;
  // detrap lifetimes capped so a trapped packet visibly releases within the
  // simulated window (tau = 5e-6 is ~500 steps at dt = 1e-8)
  double tau_eD_lo = 5e-7, tau_eD_hi = 2e-6;
  // hole center 1 is the fast center, center 2 the slow one
  double tau_hT1_lo = 2e-7, tau_hT1_hi = 5e-7;
  double tau_hD1_lo = 2e-7, tau_hD1_hi = 5e-7;
  double tau_hT2_lo = 2e-6, tau_hT2_hi = 5e-6;
  double tau_hD2_lo = 2e-6, tau_hD2_hi = 5e-6;
  // recombination lifetimes short enough that the per-step fraction stays well
  // above the optimizer's late-stage resolution
  double tau_e_lo = 2e-7, tau_e_hi = 1e-6;
  double tau_h_lo = 2e-7, tau_h_hi = 1e-6;
};

// Draws a seeded per-voxel MaterialMap. Coefficients are constant within
// lateral_block x lateral_block subpixel blocks (1 = fully independent),
// which keeps block-averaged data exactly representable on the coarse grid.
MaterialMap sample_material_map(int M, int N, int P, double dt, int e_centers,
                                int h_centers, const CoeffProfile& profile, uint64_t seed,
                                int lateral_block = 1);

struct TrainingSample {
  std::vector<Injection> injections;
  // shapes: q_* (T,M,N,P); qt_* (T,centers,M,N,P); signals (T,E); all row-major
  std::vector<double> q_e, q_h, qt_e, qt_h, signals;
  double injected_total() const;
};

struct Dataset {
  GridSpec grid;
  int e_centers = 1, h_centers = 2;
  Boundary boundary = Boundary::closed_lateral;
  MobileMode mode = MobileMode::conservative;
  uint64_t seed = 0;
  WeightingPotentialField phi;
  DriftStencil stencil_e, stencil_h;
  std::optional<MaterialMap> ground_truth;
  std::vector<TrainingSample> samples;
};

struct GroundTruthConfig {
  GridSpec grid;
  uint64_t seed = 1;
  int e_centers = 1, h_centers = 2;
  CoeffProfile profile;
  int lateral_block = 1;
  std::optional<std::filesystem::path> material_file;  // overrides sampling
  PhiMode phi_mode = PhiMode::planar;
  PixelGeometry geometry;
  std::filesystem::path phi_file;                       // for PhiMode::file
  std::filesystem::path stencil_e_file, stencil_h_file; // empty -> uniform
  Boundary boundary = Boundary::closed_lateral;
  MobileMode mode = MobileMode::conservative;
  std::vector<std::vector<Injection>> sample_injections;
};

// Forward-simulates every sample with the ground-truth coefficients.
Dataset generate(const GroundTruthConfig& config);

// Arrays first, manifest.json last (write-then-commit).
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& manifest_file);

// Retains the OX/OY rectangle rows x cols (contiguous ascending indices) for
// all OZ, marking the lateral boundary as virtual.
Dataset subset_region(const Dataset& ds, const std::vector<int>& rows,
                      const std::vector<int>& cols);

// Lateral block-averaging of all per-subpixel data; factor x factor anode
// electrode groups are merged; injections are pooled per coarse voxel.
Dataset downsample_dataset(const Dataset& ds, int factor);

// One row per (t, voxel) plus a per-electrode signal table.
void export_sample_csv(const Dataset& ds, size_t sample_index,
                       const std::filesystem::path& dir);

// Stencil manifest + raw array, offsets in (dx,dy,dz) lexicographic order.
void save_stencil(const DriftStencil& st, const std::filesystem::path& dir,
                  const std::string& stem);
DriftStencil load_stencil(const std::filesystem::path& manifest_file);

}  // namespace rtsd

#endif
