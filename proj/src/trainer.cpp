#include "rtsd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "rtsd/io.hpp"

namespace rtsd {

namespace {

double g_adjoint_corruption = 1.0;

double u01(std::mt19937_64& rng) { return (rng() >> 11) * 0x1.0p-53; }

// Packed parameter layout: eDrift, eRec, eT[0..], eD[0..], hDrift, hRec,
// hT[0..], hD[0..] (V values each), then raw stencil fractions when trained.
struct ParamLayout {
  size_t V;
  int ec, hc;
  bool sten;
  size_t no_e = 0, no_h = 0;

  size_t e_base() const { return 0; }
  size_t h_base() const { return (2 + 2 * static_cast<size_t>(ec)) * V; }
  size_t base(Species s) const { return s == Species::electron ? e_base() : h_base(); }
  size_t drift(Species s) const { return base(s); }
  size_t rec(Species s) const { return base(s) + V; }
  size_t trap(Species s, int r) const { return base(s) + (2 + static_cast<size_t>(r)) * V; }
  size_t detrap(Species s, int r) const {
    const int c = s == Species::electron ? ec : hc;
    return base(s) + (2 + static_cast<size_t>(c) + r) * V;
  }
  size_t n_mat() const { return (4 + 2 * static_cast<size_t>(ec + hc)) * V; }
  size_t raw_e() const { return n_mat(); }
  size_t raw_h() const { return n_mat() + no_e * V; }
  size_t total() const { return sten ? n_mat() + (no_e + no_h) * V : n_mat(); }

  std::string name(size_t p) const {
    if (p >= n_mat()) {
      const bool e = p < raw_h();
      const size_t rel = p - (e ? raw_e() : raw_h());
      const size_t no = e ? no_e : no_h;
      return std::string(e ? "stencil_e" : "stencil_h") + "[voxel " +
             std::to_string(rel / no) + ", offset " + std::to_string(rel % no) + "]";
    }
    const bool e = p < h_base();
    const size_t rel = p - (e ? e_base() : h_base());
    const size_t blk = rel / V;
    const int c = e ? ec : hc;
    std::string kind;
    if (blk == 0)
      kind = "Drift";
    else if (blk == 1)
      kind = "Rec";
    else if (blk < 2 + static_cast<size_t>(c))
      kind = "T" + std::to_string(blk - 1);
    else
      kind = "D" + std::to_string(blk - 1 - c);
    return std::string(e ? "w_e" : "w_h") + kind + "[voxel " + std::to_string(rel % V) + "]";
  }
};

ParamLayout layout_of(const TrainableWeights& w) {
  ParamLayout L;
  L.V = static_cast<size_t>(w.mat.voxels());
  L.ec = w.mat.e.centers();
  L.hc = w.mat.h.centers();
  L.sten = w.train_stencil;
  L.no_e = w.stencil_e.offsets.size();
  L.no_h = w.stencil_h.offsets.size();
  return L;
}

void normalize_stencil(DriftStencil& st, const std::vector<double>& raw) {
  const int no = st.n_offsets();
  const int on = on_axis_offset(st.species);
  st.frac = raw;
  for (int v = 0; v < st.voxels(); ++v) {
    double sum = 0.0;
    for (int o = 0; o < no; ++o) sum += raw[static_cast<size_t>(v) * no + o];
    if (sum > 0.0) {
      for (int o = 0; o < no; ++o) st.frac[static_cast<size_t>(v) * no + o] /= sum;
    } else {
      for (int o = 0; o < no; ++o)
        st.frac[static_cast<size_t>(v) * no + o] = o == on ? 1.0 : 0.0;
    }
  }
}

// Model electrode traces recomputed from the charge snapshots of row t
// (relative to row 0) via the weighting potentials; escaped charge is not
// representable and must be absent for this to equal the accumulated trace.
void recompute_signals(const SimulationTrace& tr, const WeightingPotentialField& phi, int t,
                       std::vector<double>& out) {
  const int E = phi.electrodes();
  const int V = phi.voxels();
  const int C = phi.M * phi.N;
  const int ec = tr.e_centers, hc = tr.h_centers;
  out.assign(E, 0.0);
  std::vector<double> net(V);
  for (int c : tr.active_columns) {
    for (int k = 0; k < phi.P; ++k) {
      const int v = c * phi.P + k;
      double x = tr.q_e[tr.row_v(t) + v] - tr.q_e[tr.row_v(0) + v] -
                 (tr.q_h[tr.row_v(t) + v] - tr.q_h[tr.row_v(0) + v]);
      for (int r = 0; r < ec; ++r)
        x += tr.qt_e[tr.row_qt(t, ec) + static_cast<size_t>(r) * V + v] -
             tr.qt_e[tr.row_qt(0, ec) + static_cast<size_t>(r) * V + v];
      for (int r = 0; r < hc; ++r)
        x -= tr.qt_h[tr.row_qt(t, hc) + static_cast<size_t>(r) * V + v] -
             tr.qt_h[tr.row_qt(0, hc) + static_cast<size_t>(r) * V + v];
      net[v] = x;
    }
  }
  for (int e = 0; e < E; ++e) {
    double acc = 0.0;
    for (int c : tr.active_columns)
      for (int k = 0; k < phi.P; ++k) {
        const int v = c * phi.P + k;
        acc += phi.phi[static_cast<size_t>(e) * V + v] * net[v];
      }
    for (int c = 0; c < C; ++c)
      acc += tr.coll_e[tr.row_c(t) + c] * phi.anode_plane[static_cast<size_t>(e) * C + c] -
             tr.coll_h[tr.row_c(t) + c] * phi.cathode_plane[static_cast<size_t>(e) * C + c];
    out[e] = acc;
  }
}

}  // namespace

void set_adjoint_corruption(double factor) { g_adjoint_corruption = factor; }

size_t TrainableWeights::n_params() const { return layout_of(*this).total(); }

std::vector<double> TrainableWeights::pack() const {
  std::vector<double> flat = mat.pack();
  if (train_stencil) {
    flat.insert(flat.end(), raw_e.begin(), raw_e.end());
    flat.insert(flat.end(), raw_h.begin(), raw_h.end());
  }
  return flat;
}

void TrainableWeights::unpack(const std::vector<double>& flat) {
  const ParamLayout L = layout_of(*this);
  if (flat.size() != L.total())
    throw ValidationError("TrainableWeights::unpack: parameter count mismatch");
  mat = MaterialMap::unpack({flat.begin(), flat.begin() + L.n_mat()}, mat.M, mat.N, mat.P,
                            L.ec, L.hc);
  if (train_stencil) {
    raw_e.assign(flat.begin() + L.raw_e(), flat.begin() + L.raw_h());
    raw_h.assign(flat.begin() + L.raw_h(), flat.end());
    normalize_stencil(stencil_e, raw_e);
    normalize_stencil(stencil_h, raw_h);
  }
}

void TrainableWeights::project() {
  const int V = mat.voxels();
  for (Species s : {Species::electron, Species::hole}) {
    auto& c = mat.coeffs(s);
    const int centers = c.centers();
    for (int v = 0; v < V; ++v) {
      auto clamp01 = [](double& x) { x = std::min(std::max(x, 0.0), 1.0); };
      clamp01(c.drift[v]);
      clamp01(c.rec[v]);
      double group = c.rec[v];
      for (int r = 0; r < centers; ++r) {
        clamp01(c.trap[r][v]);
        clamp01(c.detrap[r][v]);
        group += c.trap[r][v];
      }
      if (group > 1.0) {
        const double scale = 1.0 / group;
        c.rec[v] *= scale;
        for (int r = 0; r < centers; ++r) c.trap[r][v] *= scale;
      }
    }
  }
  if (train_stencil) {
    for (auto [st, raw] : {std::pair{&stencil_e, &raw_e}, std::pair{&stencil_h, &raw_h}}) {
      const int no = st->n_offsets();
      const int on = on_axis_offset(st->species);
      for (int v = 0; v < V; ++v) {
        double sum = 0.0;
        for (int o = 0; o < no; ++o) {
          double& x = (*raw)[static_cast<size_t>(v) * no + o];
          x = std::max(x, 0.0);
          sum += x;
        }
        if (sum > 0.0) {
          for (int o = 0; o < no; ++o) (*raw)[static_cast<size_t>(v) * no + o] /= sum;
        } else {
          for (int o = 0; o < no; ++o)
            (*raw)[static_cast<size_t>(v) * no + o] = o == on ? 1.0 : 0.0;
        }
      }
      st->frac = *raw;
    }
  }
}

void TrainableWeights::set_fixed_stencils(const DriftStencil& se, const DriftStencil& sh) {
  stencil_e = se;
  stencil_h = sh;
  train_stencil = false;
  raw_e.clear();
  raw_h.clear();
}

void TrainableWeights::enable_stencil_training() {
  train_stencil = true;
  raw_e = stencil_e.frac;
  raw_h = stencil_h.frac;
}

TrainableWeights make_initial_weights(const GridSpec& grid, int e_centers, int h_centers,
                                      const DriftStencil& se, const DriftStencil& sh,
                                      bool train_stencil, const InitConfig& init) {
  TrainableWeights w;
  w.mat = MaterialMap::zeros(grid.M, grid.N, grid.P, e_centers, h_centers);
  const int V = grid.voxels();
  auto center_val = [](const std::vector<double>& vals, int r) {
    if (vals.empty()) throw ValidationError("InitConfig: empty per-center init list");
    return vals[std::min<size_t>(r, vals.size() - 1)];
  };
  std::mt19937_64 rng(init.seed);
  auto fill = [&](std::vector<double>& a, double x) {
    for (int v = 0; v < V; ++v)
      a[v] = init.jitter > 0.0 ? x * (1.0 + init.jitter * (2.0 * u01(rng) - 1.0)) : x;
  };
  fill(w.mat.e.drift, init.e_drift);
  fill(w.mat.e.rec, init.e_rec);
  for (int r = 0; r < e_centers; ++r) {
    fill(w.mat.e.trap[r], init.e_trap);
    fill(w.mat.e.detrap[r], init.e_detrap);
  }
  fill(w.mat.h.drift, init.h_drift);
  fill(w.mat.h.rec, init.h_rec);
  for (int r = 0; r < h_centers; ++r) {
    fill(w.mat.h.trap[r], center_val(init.h_trap, r));
    fill(w.mat.h.detrap[r], center_val(init.h_detrap, r));
  }
  w.set_fixed_stencils(se, sh);
  if (train_stencil) {
    w.enable_stencil_training();
    if (init.stencil_off_axis > 0.0) {
      for (auto [st, raw] : {std::pair{&w.stencil_e, &w.raw_e},
                             std::pair{&w.stencil_h, &w.raw_h}}) {
        const int no = st->n_offsets();
        const int on = on_axis_offset(st->species);
        for (int v = 0; v < V; ++v)
          for (int o = 0; o < no; ++o)
            if (o != on) (*raw)[static_cast<size_t>(v) * no + o] += init.stencil_off_axis;
        normalize_stencil(*st, *raw);
        *raw = st->frac;
      }
    }
  }
  w.project();
  return w;
}

namespace {

// Least squares via normal equations; empty result when singular.
std::vector<double> solve_normal(const std::vector<std::vector<double>>& cols,
                                 const std::vector<double>& y) {
  const size_t n = cols.size();
  std::vector<double> A(n * n, 0.0), b(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (size_t t = 0; t < y.size(); ++t) s += cols[i][t] * cols[j][t];
      A[i * n + j] = A[j * n + i] = s;
    }
    for (size_t t = 0; t < y.size(); ++t) b[i] += cols[i][t] * y[t];
  }
  for (size_t p = 0; p < n; ++p) {  // gaussian elimination, partial pivot
    size_t piv = p;
    for (size_t r = p + 1; r < n; ++r)
      if (std::abs(A[r * n + p]) > std::abs(A[piv * n + p])) piv = r;
    if (std::abs(A[piv * n + p]) < 1e-300) return {};
    if (piv != p) {
      for (size_t c = 0; c < n; ++c) std::swap(A[p * n + c], A[piv * n + c]);
      std::swap(b[p], b[piv]);
    }
    for (size_t r = p + 1; r < n; ++r) {
      const double f = A[r * n + p] / A[p * n + p];
      for (size_t c = p; c < n; ++c) A[r * n + c] -= f * A[p * n + c];
      b[r] -= f * b[p];
    }
  }
  std::vector<double> x(n);
  for (size_t p = n; p-- > 0;) {
    double s = b[p];
    for (size_t c = p + 1; c < n; ++c) s -= A[p * n + c] * x[c];
    x[p] = s / A[p * n + p];
  }
  return x;
}

// Exact single-voxel regression of the transport recurrence
//   q(t) = a[(1-wd) q(t-1) + wd_up q_up(t-1)] + sum_z wD_z qt_z(t-1)
// against one stored sample. Noise-free data satisfies it exactly, so the
// solve recovers the bracketed combinations to machine precision.
struct MomentFit {
  double alpha_q = 0.0;          // a (1 - w_drift), a = (1-w_rec)(1-sum w_T)
  double beta_q = 0.0;           // a * w_drift(upstream); 0 without upstream
  std::vector<double> alpha_qt;  // per center: w_T (1-w_rec)(1-w_drift)
  std::vector<double> detrap;    // per center: w_D
  bool ok = false;
};

MomentFit fit_voxel(const Dataset& ds, const TrainingSample& s, Species sp, int v,
                    int v_up) {
  MomentFit f;
  const int V = ds.grid.voxels(), T = ds.grid.T;
  const int centers = sp == Species::electron ? ds.e_centers : ds.h_centers;
  const auto& q = sp == Species::electron ? s.q_e : s.q_h;
  const auto& qt = sp == Species::electron ? s.qt_e : s.qt_h;
  double q0_v = 0.0, q0_up = 0.0;
  for (const auto& inj : s.injections) {
    const int x = ds.grid.index(inj.i, inj.j, inj.k);
    if (x == v) q0_v += inj.magnitude;
    if (x == v_up) q0_up += inj.magnitude;
  }
  auto q_prev = [&](int t, int x) {  // state entering step t
    return t == 1 ? (x == v ? q0_v : q0_up)
                  : q[static_cast<size_t>(t - 2) * V + x];
  };
  auto qt_prev = [&](int t, int z) {
    return t == 1 ? 0.0
                  : qt[(static_cast<size_t>(t - 2) * centers + z) * V + v];
  };
  const bool up = v_up >= 0;
  std::vector<std::vector<double>> cols(1 + (up ? 1 : 0) + centers,
                                        std::vector<double>(T));
  std::vector<double> y(T);
  for (int t = 1; t <= T; ++t) {
    cols[0][t - 1] = q_prev(t, v);
    if (up) cols[1][t - 1] = q_prev(t, v_up);
    for (int z = 0; z < centers; ++z) cols[(up ? 2 : 1) + z][t - 1] = qt_prev(t, z);
    y[t - 1] = q[static_cast<size_t>(t - 1) * V + v];
  }
  auto sol = solve_normal(cols, y);
  if (sol.empty()) return f;
  f.alpha_q = sol[0];
  f.beta_q = up ? sol[1] : 0.0;
  f.detrap.assign(sol.begin() + (up ? 2 : 1), sol.end());
  f.alpha_qt.resize(centers);
  for (int z = 0; z < centers; ++z) {
    for (int t = 1; t <= T; ++t)
      y[t - 1] = qt[(static_cast<size_t>(t - 1) * centers + z) * V + v];
    auto solz = solve_normal(cols, y);
    if (solz.empty()) return f;
    f.alpha_qt[z] = solz[0];
  }
  f.ok = std::isfinite(f.alpha_q) && f.alpha_q > 0.0;
  for (double d : f.detrap) f.ok = f.ok && std::isfinite(d);
  for (double a : f.alpha_qt) f.ok = f.ok && std::isfinite(a);
  return f;
}

// First-step signal response to a unit drift fraction at the injected voxel
// (everything else immobile); linear in the true drift fraction there.
std::vector<double> probe_response(const Dataset& ds, const TrainingSample& s, int v,
                                   Species sp) {
  GridSpec g1 = ds.grid;
  g1.T = 1;
  MaterialMap probe = MaterialMap::zeros(g1.M, g1.N, g1.P, ds.e_centers, ds.h_centers);
  (sp == Species::electron ? probe.e.drift : probe.h.drift)[v] = 1.0;
  TransportConfig tc;
  tc.boundary = ds.boundary;
  tc.mode = ds.mode;
  TransportEngine eng(g1, probe, ds.stencil_e, ds.stencil_h, ds.phi, tc);
  const SimulationTrace tr = eng.simulate(s.injections);
  const int E = g1.electrodes();
  std::vector<double> c(E);
  for (int e = 0; e < E; ++e) c[e] = tr.signals[tr.row_s(1) + e];
  return c;
}

// Decomposition of the first-step signals into the two species' drift
// fractions at the injected voxel. With a depth-only weighting potential the
// two responses are parallel (an electron step up is indistinguishable from a
// hole step down) and only the sum is available.
struct DriftSplit {
  bool direct = false;
  double x_e = 0.0, x_h = 0.0;  // valid when direct
  double sum = 0.0;             // always valid: x_e + x_h
  bool ok = false;
};

DriftSplit split_first_signals(const Dataset& ds, const TrainingSample& s, int v) {
  DriftSplit out;
  const auto ce = probe_response(ds, s, v, Species::electron);
  const auto ch = probe_response(ds, s, v, Species::hole);
  const int E = ds.grid.electrodes();
  double gee = 0, geh = 0, ghh = 0, be = 0, bh = 0;
  for (int e = 0; e < E; ++e) {
    const double s1 = s.signals[e];  // t = 1 row
    gee += ce[e] * ce[e];
    geh += ce[e] * ch[e];
    ghh += ch[e] * ch[e];
    be += ce[e] * s1;
    bh += ch[e] * s1;
  }
  if (gee <= 0.0 || ghh <= 0.0) return out;
  const double det = gee * ghh - geh * geh;
  if (det > 1e-8 * gee * ghh) {
    out.direct = true;
    out.x_e = (ghh * be - geh * bh) / det;
    out.x_h = (gee * bh - geh * be) / det;
    out.sum = out.x_e + out.x_h;
  } else {
    out.sum = be / gee;
  }
  out.ok = std::isfinite(out.sum);
  return out;
}

struct SpeciesAnchor {
  double drift = 0.0, rec = 0.0;
  std::vector<double> trap, detrap;
  bool ok = false;
};

// Unwinds the fitted combinations once the voxel's drift fraction is known.
SpeciesAnchor close_voxel(const MomentFit& f, double x) {
  SpeciesAnchor a;
  const double keep = 1.0 - x;
  if (!(x > 0.0 && keep > 1e-6)) return a;
  double sum = f.alpha_q;
  for (double az : f.alpha_qt) sum += az;
  const double rec = 1.0 - sum / keep;  // alpha_q + sum alpha_qt = (1-r)(1-wd)
  if (!(rec >= -1e-9 && rec < 0.9)) return a;
  a.drift = x;
  a.rec = std::max(rec, 0.0);
  double trap_sum = 0.0;
  for (size_t z = 0; z < f.alpha_qt.size(); ++z) {
    const double wT = f.alpha_qt[z] / (keep * (1.0 - a.rec));
    const double wD = f.detrap[z];
    if (!(wT >= -1e-9 && wT < 1.0 && wD >= -1e-9 && wD <= 1.0)) return a;
    a.trap.push_back(std::max(wT, 0.0));
    a.detrap.push_back(std::clamp(wD, 0.0, 1.0));
    trap_sum += a.trap.back();
  }
  a.ok = a.rec + trap_sum <= 1.0;
  return a;
}

}  // namespace

void anchor_injection_voxels(const Dataset& ds, TrainableWeights& w) {
  if (ds.mode != MobileMode::conservative) return;
  if (!ds.stencil_e.on_axis_only() || !ds.stencil_h.on_axis_only()) return;
  if (ds.grid.T < 8) return;
  const int P = ds.grid.P;
  // per column: injection depth -> sample index (single-voxel samples only)
  std::map<int, std::map<int, size_t>> by_col;
  for (size_t si = 0; si < ds.samples.size(); ++si) {
    const auto& inj = ds.samples[si].injections;
    if (inj.empty()) continue;
    const int v0 = ds.grid.index(inj[0].i, inj[0].j, inj[0].k);
    bool single = true;
    for (const auto& x : inj) single = single && ds.grid.index(x.i, x.j, x.k) == v0;
    if (single) by_col[ds.grid.column(inj[0].i, inj[0].j)].emplace(inj[0].k, si);
  }
  for (const auto& [col, depths] : by_col) {
    if (depths.size() < 2) continue;
    const int k_lo = depths.begin()->first, k_hi = depths.rbegin()->first;
    const auto& s_lo = ds.samples[depths.begin()->second];
    const auto& s_hi = ds.samples[depths.rbegin()->second];
    const int n = k_hi - k_lo + 1;
    auto vox = [&](int k) { return col * P + k; };
    // electron fits from the lowest sample (its packet transits the whole
    // span), hole fits from the highest; the span endpoints have no upstream
    std::vector<MomentFit> fe(n), fh(n);
    bool ok = true;
    for (int i = 0; i < n; ++i) {
      const int k = k_lo + i;
      fe[i] = fit_voxel(ds, s_lo, Species::electron, vox(k), i > 0 ? vox(k - 1) : -1);
      fh[i] = fit_voxel(ds, s_hi, Species::hole, vox(k), i < n - 1 ? vox(k + 1) : -1);
      ok = ok && fe[i].ok && fh[i].ok;
    }
    const DriftSplit sp_lo = split_first_signals(ds, s_lo, vox(k_lo));
    const DriftSplit sp_hi = split_first_signals(ds, s_hi, vox(k_hi));
    if (!ok || !sp_lo.ok || !sp_hi.ok) continue;
    // chains x_e upward / x_h downward across the span given the endpoints
    auto chain_e = [&](double x0, std::vector<double>& xs) {
      xs.assign(n, 0.0);
      xs[0] = x0;
      for (int i = 1; i < n; ++i) {
        const double a = fe[i].beta_q / xs[i - 1];
        if (!(a > 0.0)) return false;
        xs[i] = 1.0 - fe[i].alpha_q / a;
        if (!(xs[i] > 1e-9 && xs[i] < 1.0 - 1e-6)) return false;
      }
      return true;
    };
    auto chain_h = [&](double xtop, std::vector<double>& xs) {
      xs.assign(n, 0.0);
      xs[n - 1] = xtop;
      for (int i = n - 2; i >= 0; --i) {
        const double a = fh[i].beta_q / xs[i + 1];
        if (!(a > 0.0)) return false;
        xs[i] = 1.0 - fh[i].alpha_q / a;
        if (!(xs[i] > 1e-9 && xs[i] < 1.0 - 1e-6)) return false;
      }
      return true;
    };
    std::vector<double> xe, xh;
    bool solved = false;
    if (sp_lo.direct && sp_hi.direct) {
      solved = sp_lo.x_e > 0.0 && sp_hi.x_h > 0.0 && chain_e(sp_lo.x_e, xe) &&
               chain_h(sp_hi.x_h, xh);
    } else {
      // depth-only potential: close the two gauge freedoms (one per species)
      // against the two first-step sums by a 1-D root search
      auto resid = [&](double x0) {
        if (!chain_e(x0, xe)) return std::numeric_limits<double>::quiet_NaN();
        const double xh_top = sp_hi.sum - xe[n - 1];
        if (!(xh_top > 1e-9 && xh_top < 1.0 - 1e-6))
          return std::numeric_limits<double>::quiet_NaN();
        if (!chain_h(xh_top, xh)) return std::numeric_limits<double>::quiet_NaN();
        return x0 + xh[0] - sp_lo.sum;
      };
      const double lo = 1e-3, hi = std::min(sp_lo.sum - 1e-3, 1.0 - 1e-3);
      const int grid_n = 512;
      double prev_x = 0.0, prev_f = std::numeric_limits<double>::quiet_NaN();
      for (int g = 0; g <= grid_n && !solved; ++g) {
        const double x = lo + (hi - lo) * g / grid_n;
        const double fv = resid(x);
        if (std::isfinite(prev_f) && std::isfinite(fv) &&
            ((prev_f <= 0.0) != (fv <= 0.0))) {
          double a = prev_x, b = x;
          for (int it = 0; it < 100; ++it) {
            const double m = 0.5 * (a + b);
            const double fm = resid(m);
            if (!std::isfinite(fm)) break;
            if ((fm <= 0.0) == (resid(a) <= 0.0)) a = m; else b = m;
          }
          solved = std::isfinite(resid(0.5 * (a + b)));
          if (solved) resid(0.5 * (a + b));  // leave xe/xh at the root
        }
        prev_x = x;
        prev_f = fv;
      }
    }
    if (!solved) continue;
    std::vector<SpeciesAnchor> ae(n), ah(n);
    bool all_ok = true;
    for (int i = 0; i < n; ++i) {
      ae[i] = close_voxel(fe[i], xe[i]);
      ah[i] = close_voxel(fh[i], xh[i]);
      all_ok = all_ok && ae[i].ok && ah[i].ok;
    }
    if (!all_ok) continue;
    for (int i = 0; i < n; ++i) {
      const int v = vox(k_lo + i);
      w.mat.e.drift[v] = ae[i].drift;
      w.mat.e.rec[v] = ae[i].rec;
      for (int z = 0; z < ds.e_centers; ++z) {
        w.mat.e.trap[z][v] = ae[i].trap[z];
        w.mat.e.detrap[z][v] = ae[i].detrap[z];
      }
      w.mat.h.drift[v] = ah[i].drift;
      w.mat.h.rec[v] = ah[i].rec;
      for (int z = 0; z < ds.h_centers; ++z) {
        w.mat.h.trap[z][v] = ah[i].trap[z];
        w.mat.h.detrap[z][v] = ah[i].detrap[z];
      }
    }
  }
}

LossBreakdown sample_loss(const SimulationTrace& model, const TrainingSample& gt,
                          const GridSpec& grid, int e_centers, int h_centers,
                          const WeightingPotentialField& phi, const LossConfig& cfg) {
  const size_t V = grid.voxels(), E = grid.electrodes(), T = grid.T;
  if (gt.q_e.size() != T * V || gt.qt_e.size() != T * e_centers * V ||
      gt.q_h.size() != T * V || gt.qt_h.size() != T * h_centers * V ||
      gt.signals.size() != T * E)
    throw ValidationError("sample_loss: ground-truth trace shape mismatch");
  if (model.q_e.size() != (T + 1) * V || model.signals.size() != (T + 1) * E)
    throw ValidationError("sample_loss: model trace shape mismatch");

  LossBreakdown out;
  std::vector<double> vtilde;
  for (size_t t = 1; t <= T; ++t) {
    const size_t g = t - 1;
    for (size_t e = 0; e < E; ++e) {
      const double d = model.signals[model.row_s(t) + e] - gt.signals[g * E + e];
      out.signal_term += cfg.k * d * d;
    }
    if (cfg.voltage == VoltageTerm::signal_consistency) {
      recompute_signals(model, phi, static_cast<int>(t), vtilde);
      for (size_t e = 0; e < E; ++e) {
        const double d = vtilde[e] - model.signals[model.row_s(t) + e];
        out.signal_term += cfg.k * d * d;
      }
    }
    for (size_t v = 0; v < V; ++v) {
      const double de = model.q_e[model.row_v(t) + v] - gt.q_e[g * V + v];
      const double dh = model.q_h[model.row_v(t) + v] - gt.q_h[g * V + v];
      out.electron_term += cfg.l * de * de;
      out.hole_term += cfg.n * dh * dh;
    }
    for (int r = 0; r < e_centers; ++r)
      for (size_t v = 0; v < V; ++v) {
        const double d = model.qt_e[model.row_qt(t, e_centers) + r * V + v] -
                         gt.qt_e[(g * e_centers + r) * V + v];
        out.electron_term += cfg.l * d * d;
      }
    for (int r = 0; r < h_centers; ++r)
      for (size_t v = 0; v < V; ++v) {
        const double d = model.qt_h[model.row_qt(t, h_centers) + r * V + v] -
                         gt.qt_h[(g * h_centers + r) * V + v];
        out.hole_term += cfg.n * d * d;
      }
  }
  out.total = out.signal_term + out.electron_term + out.hole_term;
  return out;
}

LossBreakdown total_loss(const Dataset& ds, const TrainableWeights& w,
                         const LossConfig& cfg) {
  TransportConfig tc;
  tc.boundary = ds.boundary;
  tc.mode = ds.mode;
  TransportEngine engine(ds.grid, w.mat, w.stencil_e, w.stencil_h, ds.phi, tc);
  LossBreakdown acc;
  for (const auto& s : ds.samples) {
    const SimulationTrace tr = engine.simulate(s.injections);
    const LossBreakdown l =
        sample_loss(tr, s, ds.grid, ds.e_centers, ds.h_centers, ds.phi, cfg);
    acc.total += l.total;
    acc.signal_term += l.signal_term;
    acc.electron_term += l.electron_term;
    acc.hole_term += l.hole_term;
  }
  return acc;
}

GradientResult backward(const Dataset& ds, const TrainableWeights& w, const LossConfig& cfg) {
  const GridSpec& grid = ds.grid;
  const int V = grid.voxels(), E = grid.electrodes(), C = grid.columns();
  const int P = grid.P, T = grid.T;
  const int ec = ds.e_centers, hc = ds.h_centers;
  const ParamLayout L = layout_of(w);
  const bool voltage = cfg.voltage == VoltageTerm::signal_consistency;

  TransportConfig tc;
  tc.boundary = ds.boundary;
  tc.mode = ds.mode;
  TransportEngine engine(grid, w.mat, w.stencil_e, w.stencil_h, ds.phi, tc);

  GradientResult res;
  res.grad.assign(L.total(), 0.0);
  // stencil gradients accumulate in normalized-fraction space and are chained
  // through the normalization at the end
  std::vector<double> gfrac_e, gfrac_h;
  if (w.train_stencil) {
    gfrac_e.assign(L.no_e * V, 0.0);
    gfrac_h.assign(L.no_h * V, 0.0);
  }

  // per-sample buffers, reused
  std::vector<double> lam_q_e(V), lam_q_h(V);
  std::vector<std::vector<double>> lam_qt_e(ec, std::vector<double>(V));
  std::vector<std::vector<double>> lam_qt_h(hc, std::vector<double>(V));
  std::vector<double> G(E), Lcoll_e(C), Lcoll_h(C);
  std::vector<double> a_buf(V), stay_adj(V), arr_adj(V), new_lam(V);
  std::vector<double> vtilde;
  StepWorkspace ws;
  ws.resize(V, C);

  for (const auto& sample : ds.samples) {
    const SimulationTrace tr = engine.simulate(sample.injections);
    const LossBreakdown l =
        sample_loss(tr, sample, grid, ec, hc, ds.phi, cfg);
    res.loss.total += l.total;
    res.loss.signal_term += l.signal_term;
    res.loss.electron_term += l.electron_term;
    res.loss.hole_term += l.hole_term;

    ActiveColumns active(C);
    if (w.train_stencil)
      active.add_all();
    else
      for (int c : tr.active_columns) active.add(c);

    std::fill(lam_q_e.begin(), lam_q_e.end(), 0.0);
    std::fill(lam_q_h.begin(), lam_q_h.end(), 0.0);
    for (auto& a : lam_qt_e) std::fill(a.begin(), a.end(), 0.0);
    for (auto& a : lam_qt_h) std::fill(a.begin(), a.end(), 0.0);
    std::fill(G.begin(), G.end(), 0.0);
    std::fill(Lcoll_e.begin(), Lcoll_e.end(), 0.0);
    std::fill(Lcoll_h.begin(), Lcoll_h.end(), 0.0);

    for (int t = T; t >= 1; --t) {
      const size_t g = static_cast<size_t>(t - 1);
      // direct loss adjoints at time t
      for (int e = 0; e < E; ++e)
        G[e] += 2.0 * cfg.k *
                (tr.signals[tr.row_s(t) + e] - sample.signals[g * E + e]);
      if (voltage) {
        recompute_signals(tr, ds.phi, t, vtilde);
        for (int e = 0; e < E; ++e) {
          const double vres = vtilde[e] - tr.signals[tr.row_s(t) + e];
          G[e] += -2.0 * cfg.k * vres;
        }
        for (int c : active.list)
          for (int k = 0; k < P; ++k) {
            const int v = c * P + k;
            double b = 0.0;
            for (int e = 0; e < E; ++e)
              b += (vtilde[e] - tr.signals[tr.row_s(t) + e]) *
                   ds.phi.phi[static_cast<size_t>(e) * V + v];
            b *= 2.0 * cfg.k;
            lam_q_e[v] += b;
            for (int r = 0; r < ec; ++r) lam_qt_e[r][v] += b;
            lam_q_h[v] -= b;
            for (int r = 0; r < hc; ++r) lam_qt_h[r][v] -= b;
          }
        for (int c = 0; c < C; ++c) {
          double ba = 0.0, bc = 0.0;
          for (int e = 0; e < E; ++e) {
            const double vres = vtilde[e] - tr.signals[tr.row_s(t) + e];
            ba += vres * ds.phi.anode_plane[static_cast<size_t>(e) * C + c];
            bc += vres * ds.phi.cathode_plane[static_cast<size_t>(e) * C + c];
          }
          Lcoll_e[c] += 2.0 * cfg.k * ba;
          Lcoll_h[c] -= 2.0 * cfg.k * bc;
        }
      }
      for (int c : active.list)
        for (int k = 0; k < P; ++k) {
          const int v = c * P + k;
          lam_q_e[v] +=
              2.0 * cfg.l * (tr.q_e[tr.row_v(t) + v] - sample.q_e[g * V + v]);
          lam_q_h[v] +=
              2.0 * cfg.n * (tr.q_h[tr.row_v(t) + v] - sample.q_h[g * V + v]);
          for (int r = 0; r < ec; ++r)
            lam_qt_e[r][v] += 2.0 * cfg.l *
                              (tr.qt_e[tr.row_qt(t, ec) + static_cast<size_t>(r) * V + v] -
                               sample.qt_e[(g * ec + r) * V + v]);
          for (int r = 0; r < hc; ++r)
            lam_qt_h[r][v] += 2.0 * cfg.n *
                              (tr.qt_h[tr.row_qt(t, hc) + static_cast<size_t>(r) * V + v] -
                               sample.qt_h[(g * hc + r) * V + v]);
        }

      // reverse the step t transition for each species
      for (Species s : {Species::electron, Species::hole}) {
        const bool is_e = s == Species::electron;
        const auto& coeffs = w.mat.coeffs(s);
        const auto& st = engine.stencil(s);
        const int no = st.n_offsets();
        const int centers = is_e ? ec : hc;
        const double sigma = species_sign(s);
        auto& lam_q = is_e ? lam_q_e : lam_q_h;
        auto& lam_qt = is_e ? lam_qt_e : lam_qt_h;
        auto& Lcoll = is_e ? Lcoll_e : Lcoll_h;
        auto& gfrac = is_e ? gfrac_e : gfrac_h;
        const double* q_prev =
            (is_e ? tr.q_e.data() : tr.q_h.data()) + tr.row_v(t - 1);
        const double* qt_prev =
            (is_e ? tr.qt_e.data() : tr.qt_h.data()) + tr.row_qt(t - 1, centers);

        engine.replay_emissions(s, std::span<const double>(q_prev, V), active, ws,
                                [](int, int, double) {});

        for (int c : active.list)
          for (int k = 0; k < P; ++k) {
            const int v = c * P + k;
            double a = 0.0;
            for (int e = 0; e < E; ++e)
              a += G[e] * ds.phi.phi[static_cast<size_t>(e) * V + v];
            a_buf[v] = a;
          }

        // pass A: local-update adjoints; fills stay/arrival adjoints and the
        // trap-chain gradients, rewrites lam_qt in place
        for (int c : active.list)
          for (int k = 0; k < P; ++k) {
            const int v = c * P + k;
            const double q_int = q_prev[v] - ws.e_out[v] + ws.arrivals[v];
            const double wrec = coeffs.rec[v];
            const double q_int1 = q_int * (1.0 - wrec);
            double trap_sum = 0.0;
            double lam_int1 = 0.0;
            const double lam_new = lam_q[v];
            for (int r = 0; r < centers; ++r) {
              const double wT = coeffs.trap[r][v], wD = coeffs.detrap[r][v];
              const double lam_t = lam_qt[r][v];
              trap_sum += wT;
              lam_int1 += wT * lam_t;
              res.grad[L.trap(s, r) + v] += q_int1 * (lam_t - lam_new);
              res.grad[L.detrap(s, r) + v] +=
                  qt_prev[static_cast<size_t>(r) * V + v] * (lam_new - lam_t);
              lam_qt[r][v] = (1.0 - wD) * lam_t + wD * lam_new;
            }
            double keep = 1.0 - trap_sum;
            if (ds.mode == MobileMode::literal) keep -= wrec;
            lam_int1 += lam_new * keep;
            res.grad[L.rec(s) + v] += -q_int * lam_int1;
            if (ds.mode == MobileMode::literal)
              res.grad[L.rec(s) + v] += -q_int1 * lam_new;
            const double lam_int = (1.0 - wrec) * lam_int1;
            stay_adj[v] = lam_int;
            arr_adj[v] = lam_int + sigma * a_buf[v];
          }

        // pass B: emission adjoints (classification mirrors the forward step)
        for (int c : active.list) {
          const int ci = c / grid.N, cj = c % grid.N;
          double plane_g = 0.0;
          bool plane_g_ready = false;
          for (int k = 0; k < P; ++k) {
            const int v = c * P + k;
            double acc_f = 0.0;
            for (int o = 0; o < no; ++o) {
              const double f = st.frac[static_cast<size_t>(v) * no + o];
              if (f == 0.0 && !w.train_stencil) continue;
              const Offset off = st.offsets[o];
              const int dk = k + off.dz;
              double lam_m;
              if (is_e ? dk >= P : dk < 0) {
                if (!plane_g_ready) {
                  const auto plane =
                      is_e ? ds.phi.anode_plane.data() : ds.phi.cathode_plane.data();
                  plane_g = 0.0;
                  for (int e = 0; e < E; ++e)
                    plane_g += G[e] * plane[static_cast<size_t>(e) * C + c];
                  plane_g_ready = true;
                }
                lam_m = sigma * plane_g + Lcoll[c];
              } else {
                const int di = ci + off.dx, dj = cj + off.dy;
                if (di < 0 || di >= grid.M || dj < 0 || dj >= grid.N) {
                  if (ds.boundary == Boundary::virtual_boundary) {
                    double a_ext = 0.0;
                    for (int e = 0; e < E; ++e)
                      a_ext += G[e] * ds.phi.at(e, di, dj, dk);
                    lam_m = sigma * a_ext;
                  } else {
                    lam_m = arr_adj[v];
                  }
                } else {
                  lam_m = arr_adj[(di * grid.N + dj) * P + dk];
                }
              }
              acc_f += f * lam_m;
              if (w.train_stencil)
                gfrac[static_cast<size_t>(v) * no + o] += ws.e_out[v] * lam_m;
            }
            const double lam_eo = acc_f - sigma * a_buf[v] - stay_adj[v];
            res.grad[L.drift(s) + v] += g_adjoint_corruption * q_prev[v] * lam_eo;
            new_lam[v] = stay_adj[v] + coeffs.drift[v] * lam_eo;
          }
        }
        for (int c : active.list)
          for (int k = 0; k < P; ++k) lam_q[c * P + k] = new_lam[c * P + k];
      }
    }
  }

  if (w.train_stencil) {
    // chain through per-voxel normalization f = raw / sum(raw)
    for (auto [raw, gfrac, off, no] :
         {std::tuple{&w.raw_e, &gfrac_e, L.raw_e(), static_cast<int>(L.no_e)},
          std::tuple{&w.raw_h, &gfrac_h, L.raw_h(), static_cast<int>(L.no_h)}}) {
      for (int v = 0; v < V; ++v) {
        double sum = 0.0, dot = 0.0;
        for (int o = 0; o < no; ++o) sum += (*raw)[static_cast<size_t>(v) * no + o];
        if (sum <= 0.0) continue;  // normalization fallback has zero derivative
        for (int o = 0; o < no; ++o)
          dot += (*raw)[static_cast<size_t>(v) * no + o] / sum *
                 (*gfrac)[static_cast<size_t>(v) * no + o];
        for (int o = 0; o < no; ++o)
          res.grad[off + static_cast<size_t>(v) * no + o] =
              ((*gfrac)[static_cast<size_t>(v) * no + o] - dot) / sum;
      }
    }
  }

  if (!std::isfinite(res.loss.total))
    throw DivergenceError("backward: non-finite loss");
  for (size_t p = 0; p < res.grad.size(); ++p)
    if (!std::isfinite(res.grad[p]))
      throw InvariantFault("backward: non-finite gradient for parameter " + L.name(p));
  return res;
}

std::vector<double> finite_diff_grad(const Dataset& ds, const TrainableWeights& w,
                                     const LossConfig& cfg, double eps) {
  if (!(eps > 0.0)) throw ValidationError("finite_diff_grad: eps must be positive");
  TrainableWeights probe = w;
  std::vector<double> theta = w.pack();
  std::vector<double> grad(theta.size(), 0.0);
  for (size_t p = 0; p < theta.size(); ++p) {
    const double saved = theta[p];
    theta[p] = saved + eps;
    probe.unpack(theta);
    const double lp = total_loss(ds, probe, cfg).total;
    theta[p] = saved - eps;
    probe.unpack(theta);
    const double lm = total_loss(ds, probe, cfg).total;
    theta[p] = saved;
    grad[p] = (lp - lm) / (2.0 * eps);
  }
  return grad;
}

AdamState AdamState::init(size_t n_params) {
  AdamState s;
  s.m.assign(n_params, 0.0);
  s.v.assign(n_params, 0.0);
  return s;
}

void adam_step(AdamState& state, const std::vector<double>& grad, TrainableWeights& w) {
  std::vector<double> theta = w.pack();
  if (grad.size() != theta.size() || state.m.size() != theta.size() ||
      state.v.size() != theta.size())
    throw ValidationError("adam_step: parameter/gradient shape mismatch");
  state.step += 1;
  const double b1t = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double b2t = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < theta.size(); ++p) {
    state.m[p] = state.beta1 * state.m[p] + (1.0 - state.beta1) * grad[p];
    state.v[p] = state.beta2 * state.v[p] + (1.0 - state.beta2) * grad[p] * grad[p];
    const double mhat = state.m[p] / b1t;
    const double vhat = state.v[p] / b2t;
    theta[p] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
  w.unpack(theta);
  w.project();
}

double lr_schedule(int epoch, const std::vector<double>& loss_history,
                   const ScheduleConfig& cfg) {
  if (!(cfg.drop_lr < cfg.initial_lr))
    throw ValidationError("ScheduleConfig: drop lr must be below initial lr");
  if (cfg.trigger == DropTrigger::fixed_epoch)
    return epoch >= cfg.drop_epoch ? cfg.drop_lr : cfg.initial_lr;
  const int W = cfg.window;
  if (W < 2) throw ValidationError("ScheduleConfig: oscillation window must be >= 2");
  const int n = std::min<int>(static_cast<int>(loss_history.size()), epoch);
  auto var = [&](int begin) {
    double mean = 0.0;
    for (int i = 0; i < W; ++i) mean += loss_history[begin + i];
    mean /= W;
    double v = 0.0;
    for (int i = 0; i < W; ++i) {
      const double d = loss_history[begin + i] - mean;
      v += d * d;
    }
    return v / W;
  };
  for (int e = 2 * W; e <= n; ++e)
    if (var(e - W) > cfg.ratio * var(e - 2 * W)) return cfg.drop_lr;
  return cfg.initial_lr;
}

std::vector<KindRange> default_err_ranges(const std::vector<Injection>& injections, int P,
                                          int e_centers, int h_centers) {
  if (injections.empty()) throw ValidationError("err ranges: no injections");
  int zmin = P, zmax = -1;
  for (const auto& inj : injections) {
    zmin = std::min(zmin, inj.k);
    zmax = std::max(zmax, inj.k);
  }
  const int e_lo = zmin, e_hi = P - 1;
  const int erec_hi = std::min(zmin + 15, P - 1);
  const int h_lo = std::max(zmin - 8, 0), h_hi = zmax;
  std::vector<KindRange> out;
  out.push_back({"eDrift", e_lo, e_hi});
  out.push_back({"eRec", e_lo, erec_hi});
  for (int r = 0; r < e_centers; ++r) {
    const std::string suf = e_centers > 1 ? std::to_string(r + 1) : "";
    out.push_back({"eT" + suf, e_lo, e_hi});
    out.push_back({"eD" + suf, e_lo, e_hi});
  }
  out.push_back({"hDrift", h_lo, h_hi});
  out.push_back({"hRec", h_lo, h_hi});
  for (int r = 0; r < h_centers; ++r) {
    const std::string suf = std::to_string(r + 1);
    out.push_back({"hT" + suf, h_lo, h_hi});
    out.push_back({"hD" + suf, h_lo, h_hi});
  }
  return out;
}

namespace {

const std::vector<double>* kind_array(const MaterialMap& m, const std::string& kind,
                                      int e_centers, int h_centers) {
  auto center_of = [](const std::string& s) { return s.empty() ? 0 : std::stoi(s) - 1; };
  if (kind == "eDrift") return &m.e.drift;
  if (kind == "eRec") return &m.e.rec;
  if (kind == "hDrift") return &m.h.drift;
  if (kind == "hRec") return &m.h.rec;
  if (kind.rfind("eT", 0) == 0) {
    const int r = center_of(kind.substr(2));
    return r < e_centers ? &m.e.trap[r] : nullptr;
  }
  if (kind.rfind("eD", 0) == 0) {
    const int r = center_of(kind.substr(2));
    return r < e_centers ? &m.e.detrap[r] : nullptr;
  }
  if (kind.rfind("hT", 0) == 0) {
    const int r = center_of(kind.substr(2));
    return r < h_centers ? &m.h.trap[r] : nullptr;
  }
  if (kind.rfind("hD", 0) == 0) {
    const int r = center_of(kind.substr(2));
    return r < h_centers ? &m.h.detrap[r] : nullptr;
  }
  return nullptr;
}

}  // namespace

ErrReport err_report(const MaterialMap& learned, const MaterialMap& gt,
                     const std::vector<Injection>& injections) {
  if (learned.M != gt.M || learned.N != gt.N || learned.P != gt.P ||
      learned.e.centers() != gt.e.centers() || learned.h.centers() != gt.h.centers())
    throw ValidationError("err_report: learned/ground-truth shape mismatch");
  const int M = gt.M, N = gt.N, P = gt.P;
  const int ec = gt.e.centers(), hc = gt.h.centers();
  ErrReport rep;
  double mean_acc = 0.0;
  int mean_n = 0;
  for (const auto& kr : default_err_ranges(injections, P, ec, hc)) {
    ErrEntry e;
    e.kind = kr.kind;
    e.z_lo = kr.z_lo;
    e.z_hi = kr.z_hi;
    const auto* wl = kind_array(learned, kr.kind, ec, hc);
    const auto* wg = kind_array(gt, kr.kind, ec, hc);
    if (!wl || !wg) throw ValidationError("err_report: unknown coefficient kind " + kr.kind);
    double sp_acc = 0.0;
    int sp_n = 0;
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) {
        double acc = 0.0;
        int cnt = 0;
        for (int k = kr.z_lo; k <= kr.z_hi; ++k) {
          const size_t v = (static_cast<size_t>(i) * N + j) * P + k;
          if ((*wg)[v] == 0.0) {
            ++e.excluded_points;
            continue;
          }
          const double rel = ((*wl)[v] - (*wg)[v]) / (*wg)[v];
          acc += rel * rel;
          ++cnt;
        }
        if (cnt == 0) {
          e.per_subpixel.push_back(std::nan(""));
          continue;
        }
        const double sub = std::sqrt(acc / cnt);
        e.per_subpixel.push_back(sub);
        sp_acc += sub;
        ++sp_n;
      }
    if (e.excluded_points > 0)
      std::fprintf(stderr,
                   "warning: err_metric(%s): %d zero ground-truth points excluded\n",
                   e.kind.c_str(), e.excluded_points);
    if (sp_n > 0) {
      e.err = sp_acc / sp_n;
      e.valid = true;
      mean_acc += e.err;
      ++mean_n;
    }
    rep.entries.push_back(std::move(e));
  }
  rep.mean = mean_n > 0 ? mean_acc / mean_n : 0.0;
  return rep;
}

void save_checkpoint(const std::filesystem::path& dir, const TrainableWeights& w,
                     const AdamState& adam, int epoch, const GridSpec& grid) {
  std::filesystem::create_directories(dir);
  io::write_f64(dir / "params.f64", w.pack());
  io::write_f64(dir / "adam_m.f64", adam.m);
  io::write_f64(dir / "adam_v.f64", adam.v);
  save_stencil(w.stencil_e, dir, "stencil_e");
  save_stencil(w.stencil_h, dir, "stencil_h");
  nlohmann::json j;
  j["format_version"] = 1;
  j["epoch"] = epoch;
  j["grid"] = {{"M", grid.M}, {"N", grid.N}, {"P", grid.P}, {"T", grid.T}, {"dt", grid.dt}};
  j["e_centers"] = w.mat.e.centers();
  j["h_centers"] = w.mat.h.centers();
  j["train_stencil"] = w.train_stencil;
  j["adam"] = {{"step", adam.step}, {"lr", adam.lr},    {"beta1", adam.beta1},
               {"beta2", adam.beta2}, {"eps", adam.eps}};
  j["arrays"] = {{"params", {{"file", "params.f64"}, {"count", w.n_params()}}},
                 {"adam_m", {{"file", "adam_m.f64"}, {"count", adam.m.size()}}},
                 {"adam_v", {{"file", "adam_v.f64"}, {"count", adam.v.size()}}}};
  io::write_json(dir / "checkpoint.json", j);
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest_file) {
  const auto j = io::read_json(manifest_file);
  if (!j.contains("format_version") || j["format_version"].get<int>() != 1)
    throw FormatError("checkpoint: format version mismatch");
  const auto dir = manifest_file.parent_path();
  Checkpoint ck;
  ck.epoch = j.at("epoch").get<int>();
  const auto& jg = j.at("grid");
  const int M = jg.at("M").get<int>(), N = jg.at("N").get<int>(), P = jg.at("P").get<int>();
  const int ec = j.at("e_centers").get<int>(), hc = j.at("h_centers").get<int>();
  ck.weights.mat = MaterialMap::zeros(M, N, P, ec, hc);
  ck.weights.stencil_e = load_stencil(dir / "stencil_e.json");
  ck.weights.stencil_h = load_stencil(dir / "stencil_h.json");
  ck.weights.train_stencil = j.at("train_stencil").get<bool>();
  if (ck.weights.train_stencil) {
    ck.weights.raw_e = ck.weights.stencil_e.frac;
    ck.weights.raw_h = ck.weights.stencil_h.frac;
  }
  const size_t n = j.at("arrays").at("params").at("count").get<size_t>();
  if (n != ck.weights.n_params())
    throw FormatError("checkpoint: parameter count does not match declared shape");
  ck.weights.unpack(io::read_f64(dir / "params.f64", n));
  ck.adam = AdamState::init(n);
  ck.adam.m = io::read_f64(dir / "adam_m.f64", n);
  ck.adam.v = io::read_f64(dir / "adam_v.f64", n);
  const auto& ja = j.at("adam");
  ck.adam.step = ja.at("step").get<int64_t>();
  ck.adam.lr = ja.at("lr").get<double>();
  ck.adam.beta1 = ja.at("beta1").get<double>();
  ck.adam.beta2 = ja.at("beta2").get<double>();
  ck.adam.eps = ja.at("eps").get<double>();
  return ck;
}

TrainResult train(const Dataset& ds, const TrainConfig& cfg) {
  TrainResult out;
  if (cfg.resume_weights) {
    out.weights = *cfg.resume_weights;
  } else {
    out.weights = make_initial_weights(ds.grid, ds.e_centers, ds.h_centers, ds.stencil_e,
                                       ds.stencil_h, cfg.train_stencil, cfg.init);
    if (cfg.init.anchor_injections) {
      anchor_injection_voxels(ds, out.weights);
      out.weights.project();
    }
  }
  out.adam = cfg.resume_adam ? *cfg.resume_adam : AdamState::init(out.weights.n_params());

  std::vector<double> history;
  history.reserve(cfg.max_epochs);
  const int end_epoch = cfg.start_epoch + cfg.max_epochs;
  bool dropped = false;

  if (cfg.max_epochs == 0) {
    const LossBreakdown l = total_loss(ds, out.weights, cfg.loss);
    out.curve.push_back({cfg.start_epoch, lr_schedule(cfg.start_epoch, history, cfg.schedule),
                         l.total, l.signal_term, l.electron_term, l.hole_term});
  }

  for (int epoch = cfg.start_epoch; epoch < end_epoch; ++epoch) {
    GradientResult gr = backward(ds, out.weights, cfg.loss);
    if (!std::isfinite(gr.loss.total))
      throw DivergenceError("training diverged: non-finite loss at epoch " +
                            std::to_string(epoch));
    const double lr = lr_schedule(epoch, history, cfg.schedule);
    dropped = dropped || lr <= cfg.schedule.drop_lr;
    out.adam.lr = lr;
    out.curve.push_back({epoch, lr, gr.loss.total, gr.loss.signal_term,
                         gr.loss.electron_term, gr.loss.hole_term});
    adam_step(out.adam, gr.grad, out.weights);
    history.push_back(gr.loss.total);
    ++out.epochs_run;

    if (cfg.checkpoint_interval > 0 && !cfg.out_dir.empty() &&
        (epoch + 1) % cfg.checkpoint_interval == 0)
      save_checkpoint(cfg.out_dir / ("ckpt_" + std::to_string(epoch + 1)), out.weights,
                      out.adam, epoch + 1, ds.grid);

    // plateau stop, only once the lr has dropped (pre-drop oscillation is
    // expected and must not trigger it)
    const int W = cfg.plateau_window;
    if (dropped && static_cast<int>(history.size()) > W) {
      const double before = history[history.size() - 1 - W];
      const double now = history.back();
      if (before - now < cfg.plateau_rel * std::max(before, 1e-300)) {
        out.plateau_stopped = true;
        break;
      }
    }
  }

  if (!cfg.out_dir.empty())
    save_checkpoint(cfg.out_dir / "checkpoint", out.weights, out.adam,
                    cfg.start_epoch + out.epochs_run, ds.grid);

  if (ds.ground_truth && !ds.samples.empty()) {
    std::vector<Injection> all;
    for (const auto& s : ds.samples)
      all.insert(all.end(), s.injections.begin(), s.injections.end());
    out.err = err_report(out.weights.mat, *ds.ground_truth, all);
  }
  return out;
}

}  // namespace rtsd
