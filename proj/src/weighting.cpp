#include "rtsd/weighting.hpp"

#include <algorithm>
#include <cmath>

#include "rtsd/io.hpp"

namespace rtsd {

namespace {

constexpr int kImageTerms = 64;

int clampi(int x, int lo, int hi) { return std::min(std::max(x, lo), hi); }

}  // namespace

double rect_electrode_phi(double x, double y, double z, double x1, double x2, double y1,
                          double y2) {
  auto corner = [z](double u, double v) {
    return std::atan(u * v / (z * std::sqrt(u * u + v * v + z * z)));
  };
  return (corner(x2 - x, y2 - y) - corner(x1 - x, y2 - y) - corner(x2 - x, y1 - y) +
          corner(x1 - x, y1 - y)) /
         (2.0 * M_PI);
}

double WeightingPotentialField::at(int e, int i, int j, int k) const {
  i = clampi(i, 0, M - 1);
  j = clampi(j, 0, N - 1);
  const int col = i * N + j;
  if (k >= P) return anode_plane[static_cast<size_t>(e) * M * N + col];
  if (k < 0) return cathode_plane[static_cast<size_t>(e) * M * N + col];
  return phi[static_cast<size_t>(e) * voxels() + (static_cast<size_t>(col) * P + k)];
}

void WeightingPotentialField::validate(double tol) const {
  const int E = electrodes();
  const int V = voxels();
  const int C = M * N;
  if (static_cast<int>(phi.size()) != E * V ||
      static_cast<int>(anode_plane.size()) != E * C ||
      static_cast<int>(cathode_plane.size()) != E * C)
    throw ValidationError("WeightingPotentialField: array size mismatch");
  for (double p : phi)
    if (!(p >= -tol && p <= 1.0 + tol))
      throw ValidationError("WeightingPotentialField: phi outside [0,1]");
  // partition of unity over electrodes, at voxels and both planes
  for (int v = 0; v < V; ++v) {
    double sum = 0.0;
    for (int e = 0; e < E; ++e) sum += phi[static_cast<size_t>(e) * V + v];
    if (std::abs(sum - 1.0) > tol)
      throw ValidationError("WeightingPotentialField: partition of unity violated at voxel " +
                            std::to_string(v));
  }
  for (int c = 0; c < C; ++c) {
    double sa = 0.0, sc = 0.0;
    for (int e = 0; e < E; ++e) {
      sa += anode_plane[static_cast<size_t>(e) * C + c];
      sc += cathode_plane[static_cast<size_t>(e) * C + c];
    }
    if (std::abs(sa - 1.0) > tol || std::abs(sc - 1.0) > tol)
      throw ValidationError("WeightingPotentialField: partition of unity violated on a plane");
  }
  // boundary values: 1 on own electrode footprint, 0 on all others
  for (int c = 0; c < C; ++c) {
    if (std::abs(cathode_plane[c] - 1.0) > tol || std::abs(anode_plane[c]) > tol)
      throw ValidationError("WeightingPotentialField: cathode boundary values wrong");
    for (int e = 1; e < E; ++e) {
      const double want = (e - 1 == c) ? 1.0 : 0.0;
      if (std::abs(anode_plane[static_cast<size_t>(e) * C + c] - want) > tol ||
          std::abs(cathode_plane[static_cast<size_t>(e) * C + c]) > tol)
        throw ValidationError("WeightingPotentialField: anode boundary values wrong");
    }
  }
}

WeightingPotentialField build_planar_phi(const GridSpec& grid) {
  grid.validate();
  WeightingPotentialField f;
  f.M = grid.M;
  f.N = grid.N;
  f.P = grid.P;
  const int V = f.voxels();
  const int C = grid.columns();
  const int E = f.electrodes();
  f.phi.assign(static_cast<size_t>(E) * V, 0.0);
  f.anode_plane.assign(static_cast<size_t>(E) * C, 0.0);
  f.cathode_plane.assign(static_cast<size_t>(E) * C, 0.0);
  for (int c = 0; c < C; ++c) {
    for (int k = 0; k < grid.P; ++k) {
      const double pa = static_cast<double>(k + 1) / grid.P;
      const size_t v = static_cast<size_t>(c) * grid.P + k;
      f.phi[v] = 1.0 - pa;                               // cathode
      f.phi[static_cast<size_t>(1 + c) * V + v] = pa;    // anode above this column
    }
    f.cathode_plane[c] = 1.0;
    f.anode_plane[static_cast<size_t>(1 + c) * C + c] = 1.0;
  }
  return f;
}

WeightingPotentialField build_small_pixel_phi(const GridSpec& grid,
                                              const PixelGeometry& geom) {
  grid.validate();
  if (!(geom.thickness > 0.0) || !(geom.pixel_size > 0.0))
    throw ValidationError("PixelGeometry: dimensions must be positive");
  WeightingPotentialField f;
  f.M = grid.M;
  f.N = grid.N;
  f.P = grid.P;
  const int V = f.voxels();
  const int C = grid.columns();
  const int E = f.electrodes();
  f.phi.assign(static_cast<size_t>(E) * V, 0.0);
  f.anode_plane.assign(static_cast<size_t>(E) * C, 0.0);
  f.cathode_plane.assign(static_cast<size_t>(E) * C, 0.0);

  const double L = geom.thickness;
  const double s = geom.pixel_size;
  const double wx = s / grid.M;
  const double wy = s / grid.N;
  const double dz = L / grid.P;

  // Anode subpixels: half-space rectangle solution mirrored to enforce
  // phi = 0 on the cathode plane. The cathode takes the remainder, which
  // keeps the partition of unity exact.
  for (int i = 0; i < grid.M; ++i) {
    for (int j = 0; j < grid.N; ++j) {
      const int e = 1 + i * grid.N + j;
      const double x1 = -0.5 * s + i * wx, x2 = x1 + wx;
      const double y1 = -0.5 * s + j * wy, y2 = y1 + wy;
      for (int ii = 0; ii < grid.M; ++ii) {
        for (int jj = 0; jj < grid.N; ++jj) {
          const double x = -0.5 * s + (ii + 0.5) * wx;
          const double y = -0.5 * s + (jj + 0.5) * wy;
          for (int k = 0; k < grid.P; ++k) {
            const double z = (grid.P - 1 - k + 0.5) * dz;  // distance from anode plane
            double val = 0.0;
            for (int n = 0; n < kImageTerms; ++n) {
              val += rect_electrode_phi(x, y, z + 2.0 * n * L, x1, x2, y1, y2);
              val -= rect_electrode_phi(x, y, 2.0 * (n + 1) * L - z, x1, x2, y1, y2);
            }
            f.phi[static_cast<size_t>(e) * V + grid.index(ii, jj, k)] = val;
          }
        }
      }
      f.anode_plane[static_cast<size_t>(e) * C + grid.column(i, j)] = 1.0;
    }
  }
  for (int v = 0; v < V; ++v) {
    double anodes = 0.0;
    for (int e = 1; e < E; ++e) anodes += f.phi[static_cast<size_t>(e) * V + v];
    f.phi[v] = 1.0 - anodes;
  }
  for (int c = 0; c < C; ++c) f.cathode_plane[c] = 1.0;
  return f;
}

WeightingPotentialField WeightingPotentialField::downsample(int factor) const {
  if (factor < 1 || M % factor != 0 || N % factor != 0)
    throw ValidationError("WeightingPotentialField::downsample: dimensions not divisible");
  WeightingPotentialField g;
  g.M = M / factor;
  g.N = N / factor;
  g.P = P;
  const int Ec = g.electrodes();
  const int Vc = g.voxels();
  const int Cc = g.M * g.N;
  g.phi.assign(static_cast<size_t>(Ec) * Vc, 0.0);
  g.anode_plane.assign(static_cast<size_t>(Ec) * Cc, 0.0);
  g.cathode_plane.assign(static_cast<size_t>(Ec) * Cc, 0.0);
  const double inv = 1.0 / (factor * factor);
  // fine electrode group for coarse electrode: cathode -> {cathode},
  // anode (I,J) -> the factor x factor block of fine anode subpixels
  for (int ec = 0; ec < Ec; ++ec) {
    std::vector<int> group;
    if (ec == 0) {
      group.push_back(0);
    } else {
      const int I = (ec - 1) / g.N, J = (ec - 1) % g.N;
      for (int di = 0; di < factor; ++di)
        for (int dj = 0; dj < factor; ++dj)
          group.push_back(1 + (I * factor + di) * N + (J * factor + dj));
    }
    for (int I = 0; I < g.M; ++I) {
      for (int J = 0; J < g.N; ++J) {
        for (int k = 0; k < P; ++k) {
          double sum = 0.0;
          for (int di = 0; di < factor; ++di)
            for (int dj = 0; dj < factor; ++dj) {
              const size_t v =
                  (static_cast<size_t>(I * factor + di) * N + (J * factor + dj)) * P + k;
              for (int ef : group) sum += phi[static_cast<size_t>(ef) * voxels() + v];
            }
          g.phi[static_cast<size_t>(ec) * Vc + (static_cast<size_t>(I) * g.N + J) * P + k] =
              sum * inv;
        }
        double sa = 0.0, sc = 0.0;
        for (int di = 0; di < factor; ++di)
          for (int dj = 0; dj < factor; ++dj) {
            const size_t c = static_cast<size_t>(I * factor + di) * N + (J * factor + dj);
            for (int ef : group) {
              sa += anode_plane[static_cast<size_t>(ef) * M * N + c];
              sc += cathode_plane[static_cast<size_t>(ef) * M * N + c];
            }
          }
        const size_t cc = static_cast<size_t>(I) * g.N + J;
        g.anode_plane[static_cast<size_t>(ec) * Cc + cc] = sa * inv;
        g.cathode_plane[static_cast<size_t>(ec) * Cc + cc] = sc * inv;
      }
    }
  }
  return g;
}

void WeightingPotentialField::save(const std::filesystem::path& dir,
                                   const std::string& stem) const {
  nlohmann::json man;
  man["version"] = 1;
  man["grid"] = {{"M", M}, {"N", N}, {"P", P}};
  std::vector<std::string> ids = {"cathode"};
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j)
      ids.push_back("anode_" + std::to_string(i) + "_" + std::to_string(j));
  man["electrodes"] = ids;
  man["phi"] = stem + "_phi.f64";
  man["anode_plane"] = stem + "_anode_plane.f64";
  man["cathode_plane"] = stem + "_cathode_plane.f64";
  io::write_f64(dir / (stem + "_phi.f64"), phi);
  io::write_f64(dir / (stem + "_anode_plane.f64"), anode_plane);
  io::write_f64(dir / (stem + "_cathode_plane.f64"), cathode_plane);
  io::write_json(dir / (stem + ".json"), man);
}

WeightingPotentialField WeightingPotentialField::load(
    const std::filesystem::path& manifest_file) {
  const auto man = io::read_json(manifest_file);
  WeightingPotentialField f;
  try {
    f.M = man.at("grid").at("M").get<int>();
    f.N = man.at("grid").at("N").get<int>();
    f.P = man.at("grid").at("P").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("weighting-potential manifest: " + std::string(e.what()));
  }
  if (f.M < 1 || f.N < 1 || f.P < 1)
    throw FormatError("weighting-potential manifest: bad grid shape");
  const auto dir = manifest_file.parent_path();
  const size_t E = f.electrodes(), V = f.voxels(), C = static_cast<size_t>(f.M) * f.N;
  f.phi = io::read_f64(dir / man.at("phi").get<std::string>(), E * V);
  f.anode_plane = io::read_f64(dir / man.at("anode_plane").get<std::string>(), E * C);
  f.cathode_plane = io::read_f64(dir / man.at("cathode_plane").get<std::string>(), E * C);
  f.validate(1e-6);
  return f;
}

}  // namespace rtsd
