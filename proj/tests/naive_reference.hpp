#ifndef RTSD_TESTS_NAIVE_REFERENCE_HPP
#define RTSD_TESTS_NAIVE_REFERENCE_HPP

// Independent reference implementation of the forward model. Unlike the
// engine it tracks every emitted packet individually and scores its
// Shockley-Ramo induction as sign * m * (phi(dst) - phi(src)) per move, with
// dense per-voxel arrays and no active-column bookkeeping. Agreement with the
// engine therefore checks the transport recurrence and the aggregated signal
// formula at once.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "rtsd/dataset.hpp"
#include "rtsd/transport.hpp"

namespace rtsd_tests {

using namespace rtsd;

struct NaiveTrace {
  std::vector<double> q_e, q_h;    // (T+1) x V
  std::vector<double> qt_e, qt_h;  // (T+1) x centers x V
  std::vector<double> signals;     // (T+1) x E
};

inline NaiveTrace naive_simulate(const GridSpec& g, const MaterialMap& mat,
                                 const DriftStencil& se, const DriftStencil& sh,
                                 const WeightingPotentialField& phi, Boundary boundary,
                                 MobileMode mode, const std::vector<Injection>& injections) {
  const int V = g.voxels(), E = g.electrodes(), T = g.T, P = g.P;
  const int ec = mat.e.centers(), hc = mat.h.centers();

  std::vector<double> q_e(V, 0.0), q_h(V, 0.0);
  std::vector<std::vector<double>> qt_e(ec, std::vector<double>(V, 0.0));
  std::vector<std::vector<double>> qt_h(hc, std::vector<double>(V, 0.0));
  std::vector<double> signal(E, 0.0);

  for (const auto& inj : injections) {
    q_e[g.index(inj.i, inj.j, inj.k)] += inj.magnitude;
    q_h[g.index(inj.i, inj.j, inj.k)] += inj.magnitude;
  }

  NaiveTrace out;
  out.q_e.assign(static_cast<size_t>(T + 1) * V, 0.0);
  out.q_h.assign(static_cast<size_t>(T + 1) * V, 0.0);
  out.qt_e.assign(static_cast<size_t>(T + 1) * ec * V, 0.0);
  out.qt_h.assign(static_cast<size_t>(T + 1) * hc * V, 0.0);
  out.signals.assign(static_cast<size_t>(T + 1) * E, 0.0);

  auto snap = [&](int t) {
    std::copy(q_e.begin(), q_e.end(), out.q_e.begin() + static_cast<size_t>(t) * V);
    std::copy(q_h.begin(), q_h.end(), out.q_h.begin() + static_cast<size_t>(t) * V);
    for (int r = 0; r < ec; ++r)
      std::copy(qt_e[r].begin(), qt_e[r].end(),
                out.qt_e.begin() + (static_cast<size_t>(t) * ec + r) * V);
    for (int r = 0; r < hc; ++r)
      std::copy(qt_h[r].begin(), qt_h[r].end(),
                out.qt_h.begin() + (static_cast<size_t>(t) * hc + r) * V);
    std::copy(signal.begin(), signal.end(), out.signals.begin() + static_cast<size_t>(t) * E);
  };
  snap(0);

  for (int t = 1; t <= T; ++t) {
    for (Species s : {Species::electron, Species::hole}) {
      const bool is_e = s == Species::electron;
      auto& q = is_e ? q_e : q_h;
      auto& qt = is_e ? qt_e : qt_h;
      const auto& c = mat.coeffs(s);
      const auto& st = is_e ? se : sh;
      const double sigma = species_sign(s);
      const int no = st.n_offsets();

      std::vector<double> e_out(V), arrivals(V, 0.0);
      for (int v = 0; v < V; ++v) e_out[v] = c.drift[v] * q[v];

      for (int i = 0; i < g.M; ++i)
        for (int j = 0; j < g.N; ++j)
          for (int k = 0; k < P; ++k) {
            const int u = g.index(i, j, k);
            for (int o = 0; o < no; ++o) {
              const double m = st.at(u, o) * e_out[u];
              if (m == 0.0) continue;
              const Offset off = st.offsets[o];
              const int di = i + off.dx, dj = j + off.dy, dk = k + off.dz;
              if (is_e ? dk >= P : dk < 0) {
                // collected by the plane electrode under the source subpixel
                for (int e = 0; e < E; ++e) {
                  const double dst =
                      is_e ? phi.anode_plane[static_cast<size_t>(e) * g.columns() +
                                             g.column(i, j)]
                           : phi.cathode_plane[static_cast<size_t>(e) * g.columns() +
                                               g.column(i, j)];
                  signal[e] += sigma * m * (dst - phi.at(e, i, j, k));
                }
                continue;
              }
              if (di < 0 || di >= g.M || dj < 0 || dj >= g.N) {
                if (boundary == Boundary::virtual_boundary) {
                  for (int e = 0; e < E; ++e)
                    signal[e] += sigma * m * (phi.at(e, di, dj, dk) - phi.at(e, i, j, k));
                } else {
                  arrivals[u] += m;  // closed edge: no displacement, no signal
                }
                continue;
              }
              arrivals[g.index(di, dj, dk)] += m;
              for (int e = 0; e < E; ++e)
                signal[e] += sigma * m * (phi.at(e, di, dj, dk) - phi.at(e, i, j, k));
            }
          }

      for (int v = 0; v < V; ++v) {
        const double q_int = q[v] - e_out[v] + arrivals[v];
        const double q_rec = c.rec[v] * q_int;
        const double q_int1 = q_int - q_rec;
        double trap_sum = 0.0, detrapped = 0.0;
        for (size_t r = 0; r < qt.size(); ++r) {
          trap_sum += c.trap[r][v];
          detrapped += c.detrap[r][v] * qt[r][v];
          qt[r][v] = qt[r][v] * (1.0 - c.detrap[r][v]) + c.trap[r][v] * q_int1;
        }
        double keep = 1.0 - trap_sum;
        if (mode == MobileMode::literal) keep -= c.rec[v];
        q[v] = q_int1 * keep + detrapped;
      }
    }
    snap(t);
  }
  return out;
}

struct RandomSetup {
  GridSpec grid;
  MaterialMap mat;
  DriftStencil se, sh;
  WeightingPotentialField phi;
  Boundary boundary = Boundary::closed_lateral;
  MobileMode mode = MobileMode::conservative;
  std::vector<Injection> injections;
};

// seeded scenario on grids <= 4x4x12, T <= 20, with dense random stencils
inline RandomSetup random_setup(uint64_t seed, bool fix_conservative = false) {
  std::mt19937_64 rng(seed);
  auto u01 = [&] { return (rng() >> 11) * 0x1.0p-53; };
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(u01() * (hi - lo + 1)); };

  RandomSetup s;
  s.grid = {pick(1, 4), pick(1, 4), pick(3, 12), pick(5, 20), 1e-8};
  s.mat = sample_material_map(s.grid.M, s.grid.N, s.grid.P, s.grid.dt, 1, 2, {}, rng());
  for (Species sp : {Species::electron, Species::hole}) {
    const auto offs = drift_offsets(sp);
    std::vector<double> raw(static_cast<size_t>(s.grid.voxels()) * offs.size());
    for (auto& f : raw) f = 0.05 + u01();
    auto& st = sp == Species::electron ? s.se : s.sh;
    st = DriftStencil::configured(sp, s.grid.M, s.grid.N, s.grid.P, raw);
  }
  s.phi = u01() < 0.5 ? build_planar_phi(s.grid) : build_small_pixel_phi(s.grid);
  s.boundary = u01() < 0.5 ? Boundary::closed_lateral : Boundary::virtual_boundary;
  s.mode = (fix_conservative || u01() < 0.5) ? MobileMode::conservative : MobileMode::literal;
  const int n_inj = pick(1, 3);
  for (int n = 0; n < n_inj; ++n)
    s.injections.push_back({pick(0, s.grid.M - 1), pick(0, s.grid.N - 1),
                            pick(0, s.grid.P - 1), 0.25 + u01()});
  return s;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = a.size() == b.size() ? 0.0 : std::numeric_limits<double>::infinity();
  for (size_t x = 0; x < a.size() && x < b.size(); ++x)
    m = std::max(m, std::abs(a[x] - b[x]));
  return m;
}

}  // namespace rtsd_tests

#endif
