#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "rtsd/dataset.hpp"
#include "rtsd/transport.hpp"

#include "naive_reference.hpp"

using namespace rtsd;

using namespace rtsd_tests;

// ---------------------------------------------------------------------------
// single-voxel update rules

TEST_CASE("gather adds stencil-weighted incoming mass") {
  const double in[] = {0.2 * 0.5, 0.4 * 0.25};
  CHECK(gather(0.1, in) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(gather(0.7, {}) == 0.7);
}

TEST_CASE("recombine splits off the recombination fraction") {
  const auto [q_rec, q_int1] = recombine(0.5, 0.1);
  CHECK(q_rec == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(q_int1 == doctest::Approx(0.45).epsilon(1e-15));
  const auto [r0, k0] = recombine(0.5, 0.0);
  CHECK(r0 == 0.0);
  CHECK(k0 == 0.5);
}

TEST_CASE("trap_update: decay plus capture") {
  CHECK(trap_update(0.2, 0.5, 0.1, 0.05) == doctest::Approx(0.24).epsilon(1e-15));
  CHECK(trap_update(0.3, 0.0, 0.0, 1.0) == 0.0);  // full detrap empties the level
}

TEST_CASE("mobile: conservative bookkeeping") {
  const double qt[] = {0.2, 0.1};
  const double wT[] = {0.1, 0.2};
  const double wD[] = {0.5, 0.5};
  CHECK(mobile(0.45, qt, 0.1, wT, wD, MobileMode::conservative) ==
        doctest::Approx(0.465).epsilon(1e-15));
}

TEST_CASE("mobile: literal mode re-subtracts the recombination fraction") {
  const double qt[] = {0.2, 0.1};
  const double wT[] = {0.1, 0.2};
  const double wD[] = {0.5, 0.5};
  const double cons = mobile(0.45, qt, 0.1, wT, wD, MobileMode::conservative);
  const double lit = mobile(0.45, qt, 0.1, wT, wD, MobileMode::literal);
  CHECK(cons - lit == doctest::Approx(0.1 * 0.45).epsilon(1e-12));
}

TEST_CASE("mobile: conservative rejects an over-committed budget") {
  const double qt[] = {0.0};
  const double wT[] = {0.6};
  const double wD[] = {0.1};
  CHECK_THROWS_AS(mobile(0.5, qt, 0.5, wT, wD, MobileMode::conservative), ValidationError);
  // literal mode tolerates it (free charge simply leaks)
  CHECK_NOTHROW(mobile(0.5, qt, 0.5, wT, wD, MobileMode::literal));
}

TEST_CASE("emit splits mobile charge by the drift fraction") {
  const auto [q_out, q_stay] = emit(0.465, 0.8);
  CHECK(q_out == doctest::Approx(0.372).epsilon(1e-15));
  CHECK(q_stay == doctest::Approx(0.093).epsilon(1e-15));
}

TEST_CASE("induce_signals: full plane-to-plane traversal") {
  GridSpec g{2, 2, 10, 1, 1e-8};
  const auto phi = build_small_pixel_phi(g);
  // an e-h pair born at (0,1,4): the electron reaches the anode plane, the
  // hole the cathode plane; together a full electron-hole collection
  const ChargeMove moves[] = {{Species::electron, 1.0, 0, 1, 4, 0, 1, g.P},
                              {Species::hole, 1.0, 0, 1, 4, 0, 1, -1}};
  const auto incr = induce_signals(moves, phi);
  // hole move cancels the electron's start/end contributions except at the
  // collecting electrodes: anode (0,1) gets +1, cathode -1, the rest 0
  for (int e = 0; e < g.electrodes(); ++e) {
    double want = 0.0;
    if (e == anode_electrode(g, 0, 1)) want = 1.0;
    if (e == cathode_electrode()) want = -1.0;
    CHECK(incr[e] == doctest::Approx(want).epsilon(1e-12));
  }
}

// ---------------------------------------------------------------------------
// engine vs naive oracle

TEST_CASE("engine agrees with the packet-tracking oracle on random configurations") {
  for (uint64_t seed = 1; seed <= 30; ++seed) {
    CAPTURE(seed);
    const RandomSetup s = random_setup(seed);
    TransportConfig tc{s.boundary, s.mode, s.mode == MobileMode::conservative, 1e-12};
    TransportEngine engine(s.grid, s.mat, s.se, s.sh, s.phi, tc);
    const SimulationTrace tr = engine.simulate(s.injections);
    const NaiveTrace ref = naive_simulate(s.grid, s.mat, s.se, s.sh, s.phi, s.boundary,
                                          s.mode, s.injections);
    CHECK(max_abs_diff(tr.q_e, ref.q_e) < 1e-12);
    CHECK(max_abs_diff(tr.q_h, ref.q_h) < 1e-12);
    CHECK(max_abs_diff(tr.qt_e, ref.qt_e) < 1e-12);
    CHECK(max_abs_diff(tr.qt_h, ref.qt_h) < 1e-12);
    CHECK(max_abs_diff(tr.signals, ref.signals) < 1e-12);
  }
}

TEST_CASE("conservative balance closes to 1e-12 and signals stay bounded") {
  for (uint64_t seed = 100; seed < 120; ++seed) {
    CAPTURE(seed);
    const RandomSetup s = random_setup(seed, /*fix_conservative=*/true);
    TransportConfig tc{s.boundary, MobileMode::conservative, true, 1e-12};
    TransportEngine engine(s.grid, s.mat, s.se, s.sh, s.phi, tc);
    const SimulationTrace tr = engine.simulate(s.injections);  // throws on violation
    double injected = 0.0;
    for (const auto& inj : s.injections) injected += inj.magnitude;
    for (const SpeciesState* st : {&tr.final_state.e, &tr.final_state.h}) {
      const auto bal = conservation_report(*st);
      CHECK(std::abs(bal.deviation()) < 1e-12);
      CHECK(bal.injected == doctest::Approx(injected).epsilon(1e-15));
    }
    for (double sv : tr.signals) CHECK(std::abs(sv) <= injected + 1e-9);
  }
}

TEST_CASE("literal mode leaks the recombination fraction from the balance") {
  const RandomSetup s = random_setup(42, true);
  TransportConfig lit{s.boundary, MobileMode::literal, false, 1e-12};
  TransportEngine engine(s.grid, s.mat, s.se, s.sh, s.phi, lit);
  const SimulationTrace tr = engine.simulate(s.injections);
  const auto bal = conservation_report(tr.final_state.e);
  CHECK(bal.deviation() < -1e-6);  // double-counted recombination loss
}

TEST_CASE("traces are linear in the injections") {
  const RandomSetup s = random_setup(77);
  TransportConfig tc{s.boundary, s.mode, false, 1e-12};
  TransportEngine engine(s.grid, s.mat, s.se, s.sh, s.phi, tc);
  const Injection a{0, 0, s.grid.P / 2, 0.6};
  const Injection b{s.grid.M - 1, s.grid.N - 1, 1, 0.9};
  const auto tr_a = engine.simulate({a});
  const auto tr_b = engine.simulate({b});
  const auto tr_ab = engine.simulate({a, b});
  for (size_t x = 0; x < tr_ab.q_e.size(); ++x)
    CHECK(tr_ab.q_e[x] == doctest::Approx(tr_a.q_e[x] + tr_b.q_e[x]).epsilon(1e-12));
  for (size_t x = 0; x < tr_ab.signals.size(); ++x)
    CHECK(tr_ab.signals[x] ==
          doctest::Approx(tr_a.signals[x] + tr_b.signals[x]).epsilon(1e-12).scale(1.0));
  // doubling the magnitude doubles everything
  const auto tr_2a = engine.simulate({{a.i, a.j, a.k, 2.0 * a.magnitude}});
  for (size_t x = 0; x < tr_2a.signals.size(); ++x)
    CHECK(tr_2a.signals[x] == doctest::Approx(2.0 * tr_a.signals[x]).epsilon(1e-12).scale(1.0));
}

TEST_CASE("lossless transport collects everything: anode signal converges to 1") {
  GridSpec g{3, 3, 20, 40, 1e-8};
  MaterialMap mat = MaterialMap::zeros(g.M, g.N, g.P, 1, 2);
  std::fill(mat.e.drift.begin(), mat.e.drift.end(), 1.0);
  std::fill(mat.h.drift.begin(), mat.h.drift.end(), 1.0);
  const auto se = DriftStencil::uniform(Species::electron, g.M, g.N, g.P);
  const auto sh = DriftStencil::uniform(Species::hole, g.M, g.N, g.P);
  const auto phi = build_small_pixel_phi(g);
  TransportEngine engine(g, mat, se, sh, phi, {Boundary::closed_lateral,
                                               MobileMode::conservative, true, 1e-12});
  const auto tr = engine.simulate({{1, 2, 7, 1.0}});
  const size_t last = tr.row_s(g.T);
  CHECK(tr.signals[last + anode_electrode(g, 1, 2)] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(tr.signals[last + cathode_electrode()] == doctest::Approx(-1.0).epsilon(1e-12));
  for (int e = 1; e < g.electrodes(); ++e)
    if (e != anode_electrode(g, 1, 2))
      CHECK(tr.signals[last + e] == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
  CHECK(tr.final_state.e.collected[anode_electrode(g, 1, 2)] ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(tr.final_state.h.collected[cathode_electrode()] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("charge in the last layer is collected in one step") {
  GridSpec g{1, 1, 6, 1, 1e-8};
  MaterialMap mat = MaterialMap::zeros(1, 1, 6, 1, 2);
  std::fill(mat.e.drift.begin(), mat.e.drift.end(), 1.0);  // holes immobile
  const auto se = DriftStencil::uniform(Species::electron, 1, 1, 6);
  const auto sh = DriftStencil::uniform(Species::hole, 1, 1, 6);
  const auto phi = build_planar_phi(g);
  TransportEngine engine(g, mat, se, sh, phi, {});
  const auto tr = engine.simulate({{0, 0, g.P - 1, 1.0}});
  CHECK(tr.final_state.e.collected[anode_electrode(g, 0, 0)] == doctest::Approx(1.0));
  // induced step: from phi = (k+1)/P = 1 at k = P-1 to 1 on the plane -> the
  // electron adds 0; the hole stands still; net anode increment is 0 here
  CHECK(tr.signals[tr.row_s(1) + anode_electrode(g, 0, 0)] ==
        doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
}

TEST_CASE("boundary handling on a single-column grid") {
  GridSpec g{1, 1, 8, 10, 1e-8};
  MaterialMap mat = MaterialMap::zeros(1, 1, 8, 1, 2);
  std::fill(mat.e.drift.begin(), mat.e.drift.end(), 0.8);
  std::fill(mat.h.drift.begin(), mat.h.drift.end(), 0.3);
  // half the emitted mass goes sideways (off the grid)
  const auto offs = drift_offsets(Species::electron);
  std::vector<double> raw_e(static_cast<size_t>(g.voxels()) * offs.size(), 0.0);
  for (int v = 0; v < g.voxels(); ++v) {
    raw_e[static_cast<size_t>(v) * offs.size() + on_axis_offset(Species::electron)] = 0.5;
    for (size_t o = 0; o < offs.size(); ++o)
      if (offs[o].dx == 1 && offs[o].dy == 0 && offs[o].dz == 1)
        raw_e[static_cast<size_t>(v) * offs.size() + o] = 0.5;
  }
  const auto se = DriftStencil::configured(Species::electron, 1, 1, 8, raw_e);
  const auto sh = DriftStencil::uniform(Species::hole, 1, 1, 8);
  const auto phi = build_planar_phi(g);

  TransportEngine closed(g, mat, se, sh, phi,
                         {Boundary::closed_lateral, MobileMode::conservative, true, 1e-12});
  const auto tr_c = closed.simulate({{0, 0, 3, 1.0}});
  CHECK(tr_c.final_state.e.escaped == 0.0);

  TransportEngine open(g, mat, se, sh, phi,
                       {Boundary::virtual_boundary, MobileMode::conservative, true, 1e-12});
  const auto tr_o = open.simulate({{0, 0, 3, 1.0}});
  CHECK(tr_o.final_state.e.escaped > 0.1);
  const auto bal = conservation_report(tr_o.final_state.e);
  CHECK(std::abs(bal.deviation()) < 1e-12);  // escapes are tallied, not lost
}

TEST_CASE("zero-coefficient material freezes all traces") {
  GridSpec g{2, 2, 5, 6, 1e-8};
  const MaterialMap mat = MaterialMap::zeros(2, 2, 5, 1, 2);
  const auto se = DriftStencil::uniform(Species::electron, 2, 2, 5);
  const auto sh = DriftStencil::uniform(Species::hole, 2, 2, 5);
  const auto phi = build_planar_phi(g);
  TransportEngine engine(g, mat, se, sh, phi, {});
  const auto tr = engine.simulate({{1, 0, 2, 1.0}});
  for (int t = 1; t <= g.T; ++t) {
    for (int v = 0; v < g.voxels(); ++v) {
      CHECK(tr.q_e[tr.row_v(t) + v] == tr.q_e[tr.row_v(0) + v]);
      CHECK(tr.q_h[tr.row_v(t) + v] == tr.q_h[tr.row_v(0) + v]);
    }
    for (int e = 0; e < g.electrodes(); ++e) CHECK(tr.signals[tr.row_s(t) + e] == 0.0);
  }
}

TEST_CASE("active-column tracking matches the columns actually reached") {
  GridSpec g{3, 3, 6, 8, 1e-8};
  MaterialMap mat = MaterialMap::zeros(3, 3, 6, 1, 2);
  std::fill(mat.e.drift.begin(), mat.e.drift.end(), 0.9);
  std::fill(mat.h.drift.begin(), mat.h.drift.end(), 0.3);
  const auto se = DriftStencil::uniform(Species::electron, 3, 3, 6);
  const auto sh = DriftStencil::uniform(Species::hole, 3, 3, 6);
  const auto phi = build_planar_phi(g);
  TransportEngine engine(g, mat, se, sh, phi, {});
  const auto tr = engine.simulate({{1, 1, 3, 1.0}});
  // on-axis stencils never leave the injection column
  CHECK(tr.active_columns == std::vector<int>{g.column(1, 1)});
  for (int t = 0; t <= g.T; ++t)
    for (int v = 0; v < g.voxels(); ++v)
      if (v / g.P != g.column(1, 1)) CHECK(tr.q_e[tr.row_v(t) + v] == 0.0);
}

TEST_CASE("engine rejects mismatched shapes and species") {
  GridSpec g{2, 2, 4, 3, 1e-8};
  const MaterialMap mat = MaterialMap::zeros(2, 2, 4, 1, 2);
  const MaterialMap bad_mat = MaterialMap::zeros(2, 2, 5, 1, 2);
  const auto se = DriftStencil::uniform(Species::electron, 2, 2, 4);
  const auto sh = DriftStencil::uniform(Species::hole, 2, 2, 4);
  const auto phi = build_planar_phi(g);
  CHECK_THROWS_AS(TransportEngine(g, bad_mat, se, sh, phi, {}), ValidationError);
  CHECK_THROWS_AS(TransportEngine(g, mat, sh, se, phi, {}), ValidationError);
  TransportEngine ok(g, mat, se, sh, phi, {});
  CHECK_THROWS_AS(ok.simulate({{5, 0, 0, 1.0}}), ValidationError);
  CHECK_THROWS_AS(ok.simulate({{0, 0, 0, -1.0}}), ValidationError);
}
