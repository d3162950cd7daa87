#ifndef RTSD_TRANSPORT_HPP
#define RTSD_TRANSPORT_HPP

#include <algorithm>
#include <span>
#include <utility>
#include <vector>

#include "rtsd/grid.hpp"
#include "rtsd/material.hpp"
#include "rtsd/stencil.hpp"
#include "rtsd/weighting.hpp"

namespace rtsd {

// Lateral edge handling. Closed keeps would-be out-flux in its source voxel;
// virtual-boundary lets it leave the simulated region (tallied as escaped).
enum class Boundary { closed_lateral, virtual_boundary };

// Free-charge bookkeeping after trapping. Conservative removes recombined
// charge once; literal re-subtracts the recombination fraction as well.
enum class MobileMode { conservative, literal };

// ---------------------------------------------------------------------------
// Per-step update rules, one voxel at a time. The engine below applies the
// same arithmetic in bulk; these entry points exist for direct testing.

// q_int = prior + sum of stencil-weighted incoming emissions.
double gather(double prior, std::span<const double> incoming);

// (q_rec, q_int1): recombined loss and surviving free charge.
std::pair<double, double> recombine(double q_int, double w_rec);

// New trap occupancy for one center.
double trap_update(double qt_prev, double q_int1, double w_trap, double w_detrap);

// Net mobile charge after trapping/detrapping over all centers.
double mobile(double q_int1, std::span<const double> qt_prev, double w_rec,
              std::span<const double> w_trap, std::span<const double> w_detrap,
              MobileMode mode);

// (q_out, q_stay): fraction leaving next gather vs remaining in the voxel.
std::pair<double, double> emit(double q_mob, double w_drift);

// One packet displacement for Shockley-Ramo induction. k endpoints may
// address the electrode planes (k = P for the anode side, k = -1 for the
// cathode side).
struct ChargeMove {
  Species species;
  double amount;
  int si, sj, sk;
  int di, dj, dk;
};

// Per-electrode induced-charge increments for a set of moves.
std::vector<double> induce_signals(std::span<const ChargeMove> moves,
                                   const WeightingPotentialField& phi);

// ---------------------------------------------------------------------------

struct SpeciesState {
  std::vector<double> q;                // V free charge
  std::vector<std::vector<double>> qt;  // centers x V trapped charge
  double recombined = 0.0;
  double escaped = 0.0;
  double injected = 0.0;
  std::vector<double> collected;        // per electrode
  std::vector<double> collected_col;    // per source column (plane position)
};

struct ChargeState {
  SpeciesState e, h;
  SpeciesState& species(Species s) { return s == Species::electron ? e : h; }
  const SpeciesState& species(Species s) const { return s == Species::electron ? e : h; }
  static ChargeState empty(const GridSpec& grid, int e_centers = 1, int h_centers = 2);
  void inject(const GridSpec& grid, const Injection& inj);
};

struct BalanceRecord {
  double injected = 0, free_charge = 0, trapped = 0, recombined = 0, collected = 0,
         escaped = 0;
  double total() const { return free_charge + trapped + recombined + collected + escaped; }
  // relative to injected (absolute when nothing was injected)
  double deviation() const;
};

BalanceRecord conservation_report(const SpeciesState& st);

// Lateral columns that may hold charge; grows as emissions reach new columns.
struct ActiveColumns {
  std::vector<int> list;
  std::vector<uint8_t> mask;
  explicit ActiveColumns(int n_columns) : mask(n_columns, 0) {}
  void add(int c) {
    if (!mask[c]) {
      mask[c] = 1;
      list.push_back(c);
    }
  }
  void add_all() {
    list.clear();
    for (int c = 0; c < static_cast<int>(mask.size()); ++c) {
      mask[c] = 1;
      list.push_back(c);
    }
  }
};

// Snapshots of one injection's evolution. Row t holds the state after step t;
// row 0 is the initial state. Signals are cumulative induced charge.
struct SimulationTrace {
  GridSpec grid;
  int e_centers = 1, h_centers = 2;
  std::vector<double> q_e, q_h;    // (T+1) x V
  std::vector<double> qt_e, qt_h;  // (T+1) x centers x V
  std::vector<double> signals;     // (T+1) x E
  std::vector<double> coll_e, coll_h;  // (T+1) x C cumulative collected per column
  ChargeState final_state;
  std::vector<int> active_columns;

  size_t row_v(int t) const { return static_cast<size_t>(t) * grid.voxels(); }
  size_t row_qt(int t, int centers) const {
    return static_cast<size_t>(t) * centers * grid.voxels();
  }
  size_t row_s(int t) const { return static_cast<size_t>(t) * grid.electrodes(); }
  size_t row_c(int t) const { return static_cast<size_t>(t) * grid.columns(); }
};

struct TransportConfig {
  Boundary boundary = Boundary::closed_lateral;
  MobileMode mode = MobileMode::conservative;
  bool check_conservation = false;
  double conservation_tol = 1e-12;
};

// Scratch buffers reused across steps (and by the trainer's backward replay).
struct StepWorkspace {
  std::vector<double> e_out, arrivals;
  std::vector<double> collected_col;  // per-column mass collected this step
  void resize(int voxels, int columns);
  void clear_column(int col, int P) {
    std::fill_n(e_out.begin() + static_cast<size_t>(col) * P, P, 0.0);
    std::fill_n(arrivals.begin() + static_cast<size_t>(col) * P, P, 0.0);
  }
};

class TransportEngine {
 public:
  TransportEngine(const GridSpec& grid, const MaterialMap& materials,
                  const DriftStencil& stencil_e, const DriftStencil& stencil_h,
                  const WeightingPotentialField& phi, TransportConfig cfg = {});

  const GridSpec& grid() const { return grid_; }
  const TransportConfig& config() const { return cfg_; }

  // Advances one step (both species). signal_incr is overwritten with the
  // per-electrode induced-charge increments of this step.
  void step(ChargeState& state, ActiveColumns& active, StepWorkspace& ws,
            std::vector<double>& signal_incr) const;

  SimulationTrace simulate(const std::vector<Injection>& injections) const;

  // Phase A replay for one species: fills ws.e_out / ws.arrivals /
  // ws.collected_col from the given pre-step free charge, growing the active
  // set when emissions reach new columns. Used by both the forward step and
  // the trainer's backward pass. Escape moves are reported through the
  // callback (source voxel, offset index, mass).
  template <typename EscapeFn>
  void replay_emissions(Species s, std::span<const double> q_prev, ActiveColumns& active,
                        StepWorkspace& ws, EscapeFn&& on_escape) const;

  const DriftStencil& stencil(Species s) const {
    return s == Species::electron ? stencil_e_ : stencil_h_;
  }
  const WeightingPotentialField& phi() const { return phi_; }

 private:
  GridSpec grid_;
  const MaterialMap& mat_;
  const DriftStencil& stencil_e_;
  const DriftStencil& stencil_h_;
  const WeightingPotentialField& phi_;
  TransportConfig cfg_;
};

// ---------------------------------------------------------------------------

template <typename EscapeFn>
void TransportEngine::replay_emissions(Species s, std::span<const double> q_prev,
                                       ActiveColumns& active, StepWorkspace& ws,
                                       EscapeFn&& on_escape) const {
  const auto& st = stencil(s);
  const auto& coeffs = mat_.coeffs(s);
  const int P = grid_.P;
  const int no = st.n_offsets();
  const bool toward_anode = s == Species::electron;

  std::fill(ws.collected_col.begin(), ws.collected_col.end(), 0.0);
  for (int c : active.list) {
    ws.clear_column(c, P);
    const int base = c * P;
    for (int k = 0; k < P; ++k)
      ws.e_out[base + k] = coeffs.drift[base + k] * q_prev[base + k];
  }
  // Columns appended mid-loop carry no charge this step; their (cleared)
  // e_out contributes nothing when their turn comes.
  for (size_t idx = 0; idx < active.list.size(); ++idx) {
    const int c = active.list[idx];
    const int ci = c / grid_.N, cj = c % grid_.N;
    const int base = c * P;
    for (int k = 0; k < P; ++k) {
      const double eo = ws.e_out[base + k];
      if (eo == 0.0) continue;
      const size_t fbase = static_cast<size_t>(base + k) * no;
      for (int o = 0; o < no; ++o) {
        const double m = st.frac[fbase + o] * eo;
        if (m == 0.0) continue;
        const Offset off = st.offsets[o];
        const int dk = k + off.dz;
        if (toward_anode ? dk >= P : dk < 0) {
          // past the electrode plane: collected by the electrode under the
          // source subpixel
          ws.collected_col[c] += m;
          continue;
        }
        const int di = ci + off.dx, dj = cj + off.dy;
        if (di < 0 || di >= grid_.M || dj < 0 || dj >= grid_.N) {
          if (cfg_.boundary == Boundary::virtual_boundary) {
            on_escape(base + k, o, m);
          } else {
            ws.arrivals[base + k] += m;  // closed edge: stays put
          }
          continue;
        }
        const int dc = di * grid_.N + dj;
        if (!active.mask[dc]) {
          active.add(dc);
          ws.clear_column(dc, P);
        }
        ws.arrivals[dc * P + dk] += m;
      }
    }
  }
}

}  // namespace rtsd

#endif
