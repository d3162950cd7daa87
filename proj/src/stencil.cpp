#include "rtsd/stencil.hpp"

#include <cmath>

namespace rtsd {

bool DriftStencil::on_axis_only() const {
  const int axis = on_axis_offset(species);
  const int no = n_offsets();
  for (int v = 0; v < voxels(); ++v)
    for (int o = 0; o < no; ++o)
      if (o != axis && at(v, o) != 0.0) return false;
  return true;
}

DriftStencil DriftStencil::uniform(Species s, int M, int N, int P) {
  DriftStencil st;
  st.species = s;
  st.M = M;
  st.N = N;
  st.P = P;
  st.offsets = drift_offsets(s);
  st.frac.assign(static_cast<size_t>(M) * N * P * st.offsets.size(), 0.0);
  const int axis = on_axis_offset(s);
  for (int v = 0; v < st.voxels(); ++v)
    st.frac[static_cast<size_t>(v) * st.offsets.size() + axis] = 1.0;
  return st;
}

DriftStencil DriftStencil::configured(Species s, int M, int N, int P,
                                      const std::vector<double>& raw_frac) {
  DriftStencil st;
  st.species = s;
  st.M = M;
  st.N = N;
  st.P = P;
  st.offsets = drift_offsets(s);
  const size_t no = st.offsets.size();
  if (raw_frac.size() != static_cast<size_t>(M) * N * P * no)
    throw ValidationError("DriftStencil::configured: fraction array size mismatch");
  st.frac = raw_frac;
  for (int v = 0; v < st.voxels(); ++v) {
    double sum = 0.0;
    for (size_t o = 0; o < no; ++o) {
      const double f = st.frac[v * no + o];
      if (f < 0.0) throw ValidationError("DriftStencil::configured: negative fraction");
      sum += f;
    }
    if (!(sum > 0.0))
      throw ValidationError("DriftStencil::configured: zero total fraction at voxel " +
                            std::to_string(v));
    for (size_t o = 0; o < no; ++o) st.frac[v * no + o] /= sum;
  }
  return st;
}

void DriftStencil::validate() const {
  const size_t no = offsets.size();
  if (frac.size() != static_cast<size_t>(voxels()) * no)
    throw ValidationError("DriftStencil: fraction array size mismatch");
  for (int v = 0; v < voxels(); ++v) {
    double sum = 0.0;
    for (size_t o = 0; o < no; ++o) {
      if (frac[v * no + o] < 0.0) throw ValidationError("DriftStencil: negative fraction");
      sum += frac[v * no + o];
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw ValidationError("DriftStencil: fractions do not sum to 1 at voxel " +
                            std::to_string(v));
  }
}

}  // namespace rtsd
