#include "rtsd/transport.hpp"

#include <cmath>
#include <numeric>

namespace rtsd {

double gather(double prior, std::span<const double> incoming) {
  double q = prior;
  for (double m : incoming) q += m;
  return q;
}

std::pair<double, double> recombine(double q_int, double w_rec) {
  const double q_rec = w_rec * q_int;
  return {q_rec, q_int - q_rec};
}

double trap_update(double qt_prev, double q_int1, double w_trap, double w_detrap) {
  return qt_prev * (1.0 - w_detrap) + w_trap * q_int1;
}

double mobile(double q_int1, std::span<const double> qt_prev, double w_rec,
              std::span<const double> w_trap, std::span<const double> w_detrap,
              MobileMode mode) {
  double trap_sum = 0.0;
  for (double w : w_trap) trap_sum += w;
  if (mode == MobileMode::conservative && w_rec + trap_sum > 1.0 + 1e-12)
    throw ValidationError("mobile: w_rec + sum(w_trap) exceeds 1");
  double keep = 1.0 - trap_sum;
  if (mode == MobileMode::literal) keep -= w_rec;
  double q = q_int1 * keep;
  for (size_t r = 0; r < qt_prev.size(); ++r) q += w_detrap[r] * qt_prev[r];
  return q;
}

std::pair<double, double> emit(double q_mob, double w_drift) {
  const double q_out = w_drift * q_mob;
  return {q_out, q_mob - q_out};
}

std::vector<double> induce_signals(std::span<const ChargeMove> moves,
                                   const WeightingPotentialField& phi) {
  std::vector<double> incr(phi.electrodes(), 0.0);
  for (const auto& mv : moves) {
    const double sq = species_sign(mv.species) * mv.amount;
    for (int e = 0; e < phi.electrodes(); ++e)
      incr[e] += sq * (phi.at(e, mv.di, mv.dj, mv.dk) - phi.at(e, mv.si, mv.sj, mv.sk));
  }
  return incr;
}

ChargeState ChargeState::empty(const GridSpec& grid, int e_centers, int h_centers) {
  ChargeState st;
  const int V = grid.voxels();
  st.e.q.assign(V, 0.0);
  st.e.qt.assign(e_centers, std::vector<double>(V, 0.0));
  st.e.collected.assign(grid.electrodes(), 0.0);
  st.e.collected_col.assign(grid.columns(), 0.0);
  st.h.q.assign(V, 0.0);
  st.h.qt.assign(h_centers, std::vector<double>(V, 0.0));
  st.h.collected.assign(grid.electrodes(), 0.0);
  st.h.collected_col.assign(grid.columns(), 0.0);
  return st;
}

void ChargeState::inject(const GridSpec& grid, const Injection& inj) {
  if (!grid.contains(inj.i, inj.j, inj.k))
    throw ValidationError("Injection: voxel outside grid");
  if (!(inj.magnitude > 0.0)) throw ValidationError("Injection: magnitude must be positive");
  const int v = grid.index(inj.i, inj.j, inj.k);
  e.q[v] += inj.magnitude;
  e.injected += inj.magnitude;
  h.q[v] += inj.magnitude;
  h.injected += inj.magnitude;
}

double BalanceRecord::deviation() const {
  const double d = total() - injected;
  return injected > 0.0 ? d / injected : d;
}

BalanceRecord conservation_report(const SpeciesState& st) {
  BalanceRecord b;
  b.injected = st.injected;
  b.free_charge = std::accumulate(st.q.begin(), st.q.end(), 0.0);
  for (const auto& arr : st.qt) b.trapped += std::accumulate(arr.begin(), arr.end(), 0.0);
  b.recombined = st.recombined;
  b.collected = std::accumulate(st.collected.begin(), st.collected.end(), 0.0);
  b.escaped = st.escaped;
  return b;
}

void StepWorkspace::resize(int voxels, int columns) {
  e_out.assign(voxels, 0.0);
  arrivals.assign(voxels, 0.0);
  collected_col.assign(columns, 0.0);
}

TransportEngine::TransportEngine(const GridSpec& grid, const MaterialMap& materials,
                                 const DriftStencil& stencil_e,
                                 const DriftStencil& stencil_h,
                                 const WeightingPotentialField& phi, TransportConfig cfg)
    : grid_(grid), mat_(materials), stencil_e_(stencil_e), stencil_h_(stencil_h), phi_(phi),
      cfg_(cfg) {
  grid_.validate();
  if (mat_.M != grid.M || mat_.N != grid.N || mat_.P != grid.P)
    throw ValidationError("TransportEngine: material map shape mismatch");
  if (stencil_e_.species != Species::electron || stencil_h_.species != Species::hole)
    throw ValidationError("TransportEngine: stencil species mixed up");
  for (const DriftStencil* s : {&stencil_e_, &stencil_h_})
    if (s->M != grid.M || s->N != grid.N || s->P != grid.P)
      throw ValidationError("TransportEngine: stencil shape mismatch");
  if (phi_.M != grid.M || phi_.N != grid.N || phi_.P != grid.P)
    throw ValidationError("TransportEngine: weighting-potential shape mismatch");
}

void TransportEngine::step(ChargeState& state, ActiveColumns& active, StepWorkspace& ws,
                           std::vector<double>& signal_incr) const {
  const int E = grid_.electrodes();
  const int P = grid_.P;
  const int C = grid_.columns();
  signal_incr.assign(E, 0.0);

  for (Species s : {Species::electron, Species::hole}) {
    SpeciesState& st = state.species(s);
    const auto& coeffs = mat_.coeffs(s);
    const double sigma = species_sign(s);
    const bool toward_anode = s == Species::electron;
    const int centers = static_cast<int>(st.qt.size());

    replay_emissions(s, st.q, active, ws, [&](int v, int o, double m) {
      // virtual-boundary escape: induced signal uses the laterally clamped
      // potential at the (in-flight) destination position
      const Offset off = stencil(s).offsets[o];
      const int c = v / P, k = v % P;
      const int i = c / grid_.N, j = c % grid_.N;
      st.escaped += m;
      for (int e = 0; e < E; ++e)
        signal_incr[e] += sigma * m * phi_.at(e, i + off.dx, j + off.dy, k + off.dz);
    });

    // Ramo induction, aggregated over this step's transfers: every emitted
    // packet departs its source voxel; arrivals cover in-grid deliveries.
    for (int e = 0; e < E; ++e) {
      const size_t pb = static_cast<size_t>(e) * grid_.voxels();
      double acc = 0.0;
      for (int c : active.list) {
        const int base = c * P;
        for (int k = 0; k < P; ++k)
          acc += phi_.phi[pb + base + k] * (ws.arrivals[base + k] - ws.e_out[base + k]);
      }
      signal_incr[e] += sigma * acc;
    }
    for (int c = 0; c < C; ++c) {
      const double m = ws.collected_col[c];
      if (m == 0.0) continue;
      const int electrode = toward_anode ? 1 + c : cathode_electrode();
      st.collected[electrode] += m;
      st.collected_col[c] += m;
      const auto plane = toward_anode ? phi_.anode_plane.data() : phi_.cathode_plane.data();
      for (int e = 0; e < E; ++e)
        signal_incr[e] += sigma * m * plane[static_cast<size_t>(e) * C + c];
    }

    // local update: gather, recombine, trap/detrap, mobilize
    for (int c : active.list) {
      const int base = c * P;
      for (int k = 0; k < P; ++k) {
        const int v = base + k;
        const double q_int = st.q[v] - ws.e_out[v] + ws.arrivals[v];
        if (q_int < 0.0)
          throw InvariantFault("transport: negative gathered charge at voxel " +
                               std::to_string(v));
        const double q_rec = coeffs.rec[v] * q_int;
        const double q_int1 = q_int - q_rec;
        st.recombined += q_rec;
        double trap_sum = 0.0;
        double detrapped = 0.0;
        for (int r = 0; r < centers; ++r) {
          const double wT = coeffs.trap[r][v], wD = coeffs.detrap[r][v];
          trap_sum += wT;
          detrapped += wD * st.qt[r][v];
          st.qt[r][v] = st.qt[r][v] * (1.0 - wD) + wT * q_int1;
        }
        double keep = 1.0 - trap_sum;
        if (cfg_.mode == MobileMode::literal) keep -= coeffs.rec[v];
        const double q_mob = q_int1 * keep + detrapped;
        if (q_mob < 0.0)
          throw InvariantFault("transport: negative mobile charge at voxel " +
                               std::to_string(v));
        st.q[v] = q_mob;
      }
    }

    if (cfg_.check_conservation && cfg_.mode == MobileMode::conservative) {
      const auto bal = conservation_report(st);
      if (std::abs(bal.deviation()) > cfg_.conservation_tol)
        throw InvariantFault("transport: conservation deviation " +
                             std::to_string(bal.deviation()));
    }
  }
}

SimulationTrace TransportEngine::simulate(const std::vector<Injection>& injections) const {
  const int V = grid_.voxels();
  const int E = grid_.electrodes();
  const int T = grid_.T;

  ChargeState state = ChargeState::empty(grid_, mat_.e.centers(), mat_.h.centers());
  ActiveColumns active(grid_.columns());
  for (const auto& inj : injections) {
    state.inject(grid_, inj);
    active.add(grid_.column(inj.i, inj.j));
  }

  SimulationTrace tr;
  tr.grid = grid_;
  tr.e_centers = mat_.e.centers();
  tr.h_centers = mat_.h.centers();
  tr.q_e.assign(static_cast<size_t>(T + 1) * V, 0.0);
  tr.q_h.assign(static_cast<size_t>(T + 1) * V, 0.0);
  tr.qt_e.assign(static_cast<size_t>(T + 1) * tr.e_centers * V, 0.0);
  tr.qt_h.assign(static_cast<size_t>(T + 1) * tr.h_centers * V, 0.0);
  tr.signals.assign(static_cast<size_t>(T + 1) * E, 0.0);
  tr.coll_e.assign(static_cast<size_t>(T + 1) * grid_.columns(), 0.0);
  tr.coll_h.assign(static_cast<size_t>(T + 1) * grid_.columns(), 0.0);

  StepWorkspace ws;
  ws.resize(V, grid_.columns());
  std::vector<double> incr(E, 0.0);

  auto snapshot = [&](int t) {
    std::copy(state.e.q.begin(), state.e.q.end(), tr.q_e.begin() + tr.row_v(t));
    std::copy(state.h.q.begin(), state.h.q.end(), tr.q_h.begin() + tr.row_v(t));
    for (int r = 0; r < tr.e_centers; ++r)
      std::copy(state.e.qt[r].begin(), state.e.qt[r].end(),
                tr.qt_e.begin() + tr.row_qt(t, tr.e_centers) + static_cast<size_t>(r) * V);
    for (int r = 0; r < tr.h_centers; ++r)
      std::copy(state.h.qt[r].begin(), state.h.qt[r].end(),
                tr.qt_h.begin() + tr.row_qt(t, tr.h_centers) + static_cast<size_t>(r) * V);
    std::copy(state.e.collected_col.begin(), state.e.collected_col.end(),
              tr.coll_e.begin() + tr.row_c(t));
    std::copy(state.h.collected_col.begin(), state.h.collected_col.end(),
              tr.coll_h.begin() + tr.row_c(t));
  };
  snapshot(0);

  for (int t = 1; t <= T; ++t) {
    step(state, active, ws, incr);
    snapshot(t);
    for (int e = 0; e < E; ++e)
      tr.signals[tr.row_s(t) + e] = tr.signals[tr.row_s(t - 1) + e] + incr[e];
  }
  tr.final_state = std::move(state);
  tr.active_columns = active.list;
  std::sort(tr.active_columns.begin(), tr.active_columns.end());
  return tr;
}

}  // namespace rtsd
