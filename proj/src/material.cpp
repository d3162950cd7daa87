#include "rtsd/material.hpp"

namespace rtsd {

SpeciesCoeffs SpeciesCoeffs::zeros(int voxels, int centers) {
  SpeciesCoeffs c;
  c.drift.assign(voxels, 0.0);
  c.rec.assign(voxels, 0.0);
  c.trap.assign(centers, std::vector<double>(voxels, 0.0));
  c.detrap.assign(centers, std::vector<double>(voxels, 0.0));
  return c;
}

MaterialMap MaterialMap::zeros(int M, int N, int P, int e_centers, int h_centers) {
  MaterialMap m;
  m.M = M;
  m.N = N;
  m.P = P;
  m.e = SpeciesCoeffs::zeros(M * N * P, e_centers);
  m.h = SpeciesCoeffs::zeros(M * N * P, h_centers);
  return m;
}

namespace {

void validate_species(const SpeciesCoeffs& c, int V, const char* name) {
  auto in_unit = [](double w) { return w >= 0.0 && w <= 1.0; };
  if (static_cast<int>(c.drift.size()) != V || static_cast<int>(c.rec.size()) != V)
    throw ValidationError(std::string("MaterialMap: ") + name + " array size mismatch");
  for (const auto& arr : c.trap)
    if (static_cast<int>(arr.size()) != V)
      throw ValidationError(std::string("MaterialMap: ") + name + " trap array size mismatch");
  for (const auto& arr : c.detrap)
    if (static_cast<int>(arr.size()) != V)
      throw ValidationError(std::string("MaterialMap: ") + name + " detrap array size mismatch");
  if (c.trap.size() != c.detrap.size())
    throw ValidationError(std::string("MaterialMap: ") + name + " trap/detrap center count mismatch");
  for (int v = 0; v < V; ++v) {
    if (!in_unit(c.drift[v]) || !in_unit(c.rec[v]))
      throw ValidationError(std::string("MaterialMap: ") + name + " coefficient outside [0,1]");
    double budget = c.rec[v];
    for (size_t r = 0; r < c.trap.size(); ++r) {
      if (!in_unit(c.trap[r][v]) || !in_unit(c.detrap[r][v]))
        throw ValidationError(std::string("MaterialMap: ") + name + " coefficient outside [0,1]");
      budget += c.trap[r][v];
    }
    if (budget > 1.0 + 1e-12)
      throw ValidationError(std::string("MaterialMap: ") + name +
                            " rec + sum(trap) exceeds 1 at voxel " + std::to_string(v));
  }
}

}  // namespace

void MaterialMap::validate() const {
  const int V = voxels();
  validate_species(e, V, "electron");
  validate_species(h, V, "hole");
}

std::vector<double> MaterialMap::pack() const {
  std::vector<double> flat;
  const int V = voxels();
  flat.reserve(static_cast<size_t>(V) * (4 + 2 * e.centers() + 2 * h.centers()));
  auto append_species = [&](const SpeciesCoeffs& c) {
    flat.insert(flat.end(), c.drift.begin(), c.drift.end());
    flat.insert(flat.end(), c.rec.begin(), c.rec.end());
    for (const auto& arr : c.trap) flat.insert(flat.end(), arr.begin(), arr.end());
    for (const auto& arr : c.detrap) flat.insert(flat.end(), arr.begin(), arr.end());
  };
  append_species(e);
  append_species(h);
  return flat;
}

MaterialMap MaterialMap::unpack(const std::vector<double>& flat, int M, int N, int P,
                                int e_centers, int h_centers) {
  MaterialMap m = zeros(M, N, P, e_centers, h_centers);
  const size_t V = static_cast<size_t>(m.voxels());
  const size_t expected = V * (4 + 2 * e_centers + 2 * h_centers);
  if (flat.size() != expected)
    throw FormatError("MaterialMap::unpack: expected " + std::to_string(expected) +
                      " values, found " + std::to_string(flat.size()));
  size_t pos = 0;
  auto take = [&](std::vector<double>& dst) {
    std::copy(flat.begin() + pos, flat.begin() + pos + V, dst.begin());
    pos += V;
  };
  for (SpeciesCoeffs* c : {&m.e, &m.h}) {
    take(c->drift);
    take(c->rec);
    for (auto& arr : c->trap) take(arr);
    for (auto& arr : c->detrap) take(arr);
  }
  return m;
}

}  // namespace rtsd
