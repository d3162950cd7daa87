#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "rtsd/presets.hpp"
#include "rtsd/trainer.hpp"

using namespace rtsd;

namespace {

std::filesystem::path temp_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() / (std::string("rtsd_trainer_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Dataset small_dataset(uint64_t seed, Boundary boundary = Boundary::closed_lateral,
                      MobileMode mode = MobileMode::conservative) {
  GroundTruthConfig cfg;
  cfg.grid = {2, 2, 6, 8, 1e-8};
  cfg.seed = seed;
  cfg.boundary = boundary;
  cfg.mode = mode;
  cfg.sample_injections = {{{0, 1, 4, 1.0}}, {{1, 0, 3, 0.8}}};
  return generate(cfg);
}

TrainableWeights weights_for(const Dataset& ds, bool train_stencil = false,
                             double jitter = 0.3, uint64_t seed = 99) {
  InitConfig init;
  init.jitter = jitter;
  init.seed = seed;
  init.stencil_off_axis = train_stencil ? 0.03 : 0.0;
  return make_initial_weights(ds.grid, ds.e_centers, ds.h_centers, ds.stencil_e,
                              ds.stencil_h, train_stencil, init);
}

// relative disagreement with a floor keyed to the largest gradient entry
double grad_rel_error(const std::vector<double>& ga, const std::vector<double>& gf) {
  REQUIRE(ga.size() == gf.size());
  double gmax = 0.0;
  for (size_t p = 0; p < ga.size(); ++p)
    gmax = std::max({gmax, std::abs(ga[p]), std::abs(gf[p])});
  double worst = 0.0;
  for (size_t p = 0; p < ga.size(); ++p) {
    const double denom = std::max({std::abs(ga[p]), std::abs(gf[p]), 1e-8 * gmax, 1e-300});
    worst = std::max(worst, std::abs(ga[p] - gf[p]) / denom);
  }
  return worst;
}

SimulationTrace blank_trace(const GridSpec& g, int ec, int hc) {
  SimulationTrace tr;
  tr.grid = g;
  tr.e_centers = ec;
  tr.h_centers = hc;
  const size_t V = g.voxels(), E = g.electrodes();
  tr.q_e.assign((g.T + 1) * V, 0.0);
  tr.q_h.assign((g.T + 1) * V, 0.0);
  tr.qt_e.assign((g.T + 1) * ec * V, 0.0);
  tr.qt_h.assign((g.T + 1) * hc * V, 0.0);
  tr.signals.assign((g.T + 1) * E, 0.0);
  tr.coll_e.assign((g.T + 1) * g.columns(), 0.0);
  tr.coll_h.assign((g.T + 1) * g.columns(), 0.0);
  return tr;
}

}  // namespace

TEST_CASE("sample_loss: reference values and term grouping") {
  GridSpec g{1, 1, 1, 1, 1e-8};
  const auto phi = build_planar_phi(g);
  TrainingSample gt;
  gt.q_e.assign(1, 0.0);
  gt.q_h.assign(1, 0.0);
  gt.qt_e.assign(1, 0.0);
  gt.qt_h.assign(2, 0.0);
  gt.signals.assign(2, 0.0);

  SimulationTrace tr = blank_trace(g, 1, 2);
  tr.q_e[1] = 0.1;  // row 1, single voxel: deviation 0.1

  LossConfig cfg;  // k = 1, l = n = 1000
  auto l = sample_loss(tr, gt, g, 1, 2, phi, cfg);
  CHECK(l.electron_term == doctest::Approx(10.0).epsilon(1e-15));
  CHECK(l.total == doctest::Approx(10.0).epsilon(1e-15));
  CHECK(l.signal_term == 0.0);
  CHECK(l.hole_term == 0.0);

  tr.q_h[1] = 0.2;
  tr.signals[2] = 0.3;  // row 1, cathode
  l = sample_loss(tr, gt, g, 1, 2, phi, cfg);
  CHECK(l.hole_term == doctest::Approx(1000.0 * 0.04).epsilon(1e-12));
  CHECK(l.signal_term == doctest::Approx(0.09).epsilon(1e-12));
  CHECK(l.total == doctest::Approx(10.0 + 40.0 + 0.09).epsilon(1e-12));

  LossConfig no_signal = cfg;
  no_signal.k = 0.0;
  CHECK(sample_loss(tr, gt, g, 1, 2, phi, no_signal).signal_term == 0.0);

  TrainingSample bad = gt;
  bad.q_e.assign(2, 0.0);
  CHECK_THROWS_AS(sample_loss(tr, bad, g, 1, 2, phi, cfg), ValidationError);
}

TEST_CASE("ground-truth weights are an exact zero of the loss and the gradient") {
  const Dataset ds = small_dataset(17);
  TrainableWeights w;
  w.mat = *ds.ground_truth;
  w.set_fixed_stencils(ds.stencil_e, ds.stencil_h);

  LossConfig cfg;
  CHECK(total_loss(ds, w, cfg).total == 0.0);  // identical code path, bitwise zero
  const GradientResult gr = backward(ds, w, cfg);
  CHECK(gr.loss.total == 0.0);
  for (double gp : gr.grad) CHECK(gp == 0.0);
}

TEST_CASE("adjoint gradient matches central finite differences") {
  struct Case {
    const char* tag;
    Boundary boundary;
    MobileMode mode;
    bool stencil;
    VoltageTerm voltage;
  };
  const Case cases[] = {
      {"closed/conservative", Boundary::closed_lateral, MobileMode::conservative, false,
       VoltageTerm::disabled},
      {"virtual boundary", Boundary::virtual_boundary, MobileMode::conservative, false,
       VoltageTerm::disabled},
      {"literal mode", Boundary::closed_lateral, MobileMode::literal, false,
       VoltageTerm::disabled},
      {"trained stencils", Boundary::closed_lateral, MobileMode::conservative, true,
       VoltageTerm::disabled},
      {"voltage term", Boundary::closed_lateral, MobileMode::conservative, false,
       VoltageTerm::signal_consistency},
  };
  for (const auto& c : cases) {
    CAPTURE(c.tag);
    const Dataset ds = small_dataset(23, c.boundary, c.mode);
    const TrainableWeights w = weights_for(ds, c.stencil);
    LossConfig cfg;
    cfg.voltage = c.voltage;
    const GradientResult gr = backward(ds, w, cfg);
    const auto fd = finite_diff_grad(ds, w, cfg, 1e-6);
    CHECK(grad_rel_error(gr.grad, fd) < 1e-4);
  }
}

TEST_CASE("corrupted adjoint is caught by the finite-difference check") {
  const Dataset ds = small_dataset(23);
  const TrainableWeights w = weights_for(ds);
  LossConfig cfg;
  set_adjoint_corruption(2.0);
  const GradientResult gr = backward(ds, w, cfg);
  set_adjoint_corruption(1.0);
  const auto fd = finite_diff_grad(ds, w, cfg, 1e-6);
  CHECK(grad_rel_error(gr.grad, fd) > 1e-2);
}

TEST_CASE("gradients vanish for voxels no charge ever visits") {
  GroundTruthConfig cfg;
  cfg.grid = {1, 1, 10, 12, 1e-8};
  cfg.seed = 4;
  cfg.sample_injections = {{{0, 0, 5, 1.0}}};
  const Dataset ds = generate(cfg);
  const TrainableWeights w = weights_for(ds);
  const GradientResult gr = backward(ds, w, {});
  const int V = ds.grid.voxels();
  // electrons only ever occupy k >= 5: their coefficients below stay untouched
  for (int k = 0; k < 5; ++k) {
    CHECK(gr.grad[k] == 0.0);           // eDrift block
    CHECK(gr.grad[V + k] == 0.0);       // eRec block
    CHECK(gr.grad[2 * V + k] == 0.0);   // eT block
    CHECK(gr.grad[3 * V + k] == 0.0);   // eD block
  }
  // holes only ever occupy k <= 5
  for (int k = 6; k < 10; ++k) CHECK(gr.grad[4 * V + k] == 0.0);  // hDrift block
  // something must be nonzero in the traversed region
  double mass = 0.0;
  for (double gp : gr.grad) mass += std::abs(gp);
  CHECK(mass > 0.0);
}

TEST_CASE("projection: group rescaling and clamping") {
  TrainableWeights w;
  w.mat = MaterialMap::zeros(1, 1, 1, 1, 2);
  w.set_fixed_stencils(DriftStencil::uniform(Species::electron, 1, 1, 1),
                       DriftStencil::uniform(Species::hole, 1, 1, 1));
  w.mat.h.rec[0] = 0.6;
  w.mat.h.trap[0][0] = 0.3;
  w.mat.h.trap[1][0] = 0.3;
  w.mat.e.drift[0] = 1.3;
  w.mat.e.rec[0] = -0.2;
  w.project();
  CHECK(w.mat.h.rec[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(w.mat.h.trap[0][0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(w.mat.h.trap[1][0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(w.mat.e.drift[0] == 1.0);
  CHECK(w.mat.e.rec[0] == 0.0);
  w.mat.validate();
  const auto once = w.pack();
  w.project();
  CHECK(w.pack() == once);  // idempotent
}

TEST_CASE("projection: raw stencil fractions clamp and renormalize") {
  TrainableWeights w;
  w.mat = MaterialMap::zeros(1, 1, 1, 1, 2);
  w.set_fixed_stencils(DriftStencil::uniform(Species::electron, 1, 1, 1),
                       DriftStencil::uniform(Species::hole, 1, 1, 1));
  w.enable_stencil_training();
  const int no = w.stencil_e.n_offsets();
  const int axis = on_axis_offset(Species::electron);
  std::fill(w.raw_e.begin(), w.raw_e.end(), 0.0);
  w.raw_e[axis] = 3.0;
  w.raw_e[(axis + 1) % no] = -2.0;
  w.raw_e[(axis + 2) % no] = 1.0;
  w.project();
  CHECK(w.stencil_e.frac[axis] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(w.stencil_e.frac[(axis + 1) % no] == 0.0);
  CHECK(w.stencil_e.frac[(axis + 2) % no] == doctest::Approx(0.25).epsilon(1e-15));
  // all-negative row falls back to the on-axis unit
  std::fill(w.raw_h.begin(), w.raw_h.end(), -1.0);
  w.project();
  CHECK(w.stencil_h.frac[on_axis_offset(Species::hole)] == 1.0);
  w.stencil_e.validate();
  w.stencil_h.validate();
}

TEST_CASE("pack/unpack round-trip with trained stencils") {
  const Dataset ds = small_dataset(12);
  TrainableWeights w = weights_for(ds, /*train_stencil=*/true);
  const auto flat = w.pack();
  CHECK(flat.size() == w.n_params());
  CHECK(w.n_params() ==
        static_cast<size_t>(ds.grid.voxels()) * (10 + 18 + 18));
  TrainableWeights other = w;
  std::vector<double> perturbed = flat;
  for (auto& x : perturbed) x *= 1.5;
  other.unpack(perturbed);
  other.unpack(flat);
  CHECK(other.pack() == flat);
  CHECK(other.stencil_e.frac == w.stencil_e.frac);
  std::vector<double> wrong(flat.size() + 1, 0.0);
  CHECK_THROWS_AS(w.unpack(wrong), ValidationError);
}

TEST_CASE("adam: zero gradient is a no-op, first step moves by about lr") {
  const Dataset ds = small_dataset(5);
  TrainableWeights w = weights_for(ds, false, /*jitter=*/0.0);
  {
    AdamState st = AdamState::init(w.n_params());
    const auto before = w.pack();
    adam_step(st, std::vector<double>(w.n_params(), 0.0), w);
    CHECK(w.pack() == before);
  }
  const auto before = w.pack();
  AdamState st = AdamState::init(w.n_params());
  std::vector<double> g(w.n_params(), 0.0);
  g[0] = 4.2;       // pulls eDrift[0] down
  g[1] = -1e-3;     // pushes eDrift[1] up (init 0.9, no clamp engaged)
  adam_step(st, g, w);
  const auto after = w.pack();
  // bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
  CHECK(before[0] - after[0] == doctest::Approx(st.lr).epsilon(1e-6));
  CHECK(after[1] - before[1] == doctest::Approx(st.lr).epsilon(1e-6));
  CHECK(after[2] == before[2]);
}

TEST_CASE("lr_schedule: fixed-epoch drop") {
  ScheduleConfig cfg;
  cfg.drop_epoch = 2500;
  CHECK(lr_schedule(0, {}, cfg) == cfg.initial_lr);
  CHECK(lr_schedule(2499, {}, cfg) == cfg.initial_lr);
  CHECK(lr_schedule(2500, {}, cfg) == cfg.drop_lr);
  CHECK(lr_schedule(9999, {}, cfg) == cfg.drop_lr);
  ScheduleConfig bad = cfg;
  bad.drop_lr = bad.initial_lr;
  CHECK_THROWS_AS(lr_schedule(0, {}, bad), ValidationError);
}

TEST_CASE("lr_schedule: oscillation detector") {
  ScheduleConfig cfg;
  cfg.trigger = DropTrigger::oscillation;
  cfg.window = 10;
  cfg.ratio = 2.0;
  // smooth decay: variance shrinks window over window, no drop
  std::vector<double> smooth;
  for (int e = 0; e < 100; ++e) smooth.push_back(std::exp(-0.05 * e));
  CHECK(lr_schedule(100, smooth, cfg) == cfg.initial_lr);
  // onset of oscillation: flat then alternating
  std::vector<double> osc(smooth.begin(), smooth.begin() + 40);
  for (int e = 40; e < 60; ++e) osc.push_back(0.2 + ((e % 2) ? 0.15 : -0.15));
  CHECK(lr_schedule(60, osc, cfg) == cfg.drop_lr);
  ScheduleConfig bad = cfg;
  bad.window = 1;
  CHECK_THROWS_AS(lr_schedule(5, smooth, bad), ValidationError);
}

TEST_CASE("err metric: relative RMS per subpixel with range selection") {
  const std::vector<Injection> inj = {{0, 0, 77, 1.0}, {0, 0, 79, 1.0}};
  const auto ranges = default_err_ranges(inj, 100, 1, 2);
  REQUIRE(ranges.size() == 10);
  CHECK(ranges[0].kind == "eDrift");
  CHECK(ranges[0].z_lo == 77);
  CHECK(ranges[0].z_hi == 99);
  CHECK(ranges[1].kind == "eRec");
  CHECK(ranges[1].z_hi == 92);
  CHECK(ranges[4].kind == "hDrift");
  CHECK(ranges[4].z_lo == 69);
  CHECK(ranges[4].z_hi == 79);

  MaterialMap gt = MaterialMap::zeros(1, 1, 100, 1, 2);
  for (auto* arr : {&gt.e.drift, &gt.e.rec, &gt.h.drift, &gt.h.rec})
    std::fill(arr->begin(), arr->end(), 0.2);
  for (auto* c : {&gt.e, &gt.h})
    for (auto* group : {&c->trap, &c->detrap})
      for (auto& arr : *group) std::fill(arr.begin(), arr.end(), 0.1);
  MaterialMap learned = gt;
  // uniform +10% deviation -> every profile errs by exactly 0.1
  for (auto* arr : {&learned.e.drift, &learned.e.rec, &learned.h.drift, &learned.h.rec})
    for (auto& x : *arr) x *= 1.1;
  for (auto* c : {&learned.e, &learned.h})
    for (auto* group : {&c->trap, &c->detrap})
      for (auto& arr : *group)
        for (auto& x : arr) x *= 1.1;
  const auto rep = err_report(learned, gt, inj);
  REQUIRE(rep.entries.size() == 10);
  for (const auto& e : rep.entries) {
    CHECK(e.valid);
    CHECK(e.err == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(e.excluded_points == 0);
  }
  CHECK(rep.mean == doctest::Approx(0.1).epsilon(1e-12));

  // zero ground-truth points are excluded with a tally
  gt.e.drift[80] = 0.0;
  const auto rep2 = err_report(learned, gt, inj);
  CHECK(rep2.entries[0].excluded_points == 1);
  CHECK(rep2.entries[0].err == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("training on a single column recovers the loss floor") {
  GroundTruthConfig cfg;
  cfg.grid = {1, 1, 8, 14, 1e-8};
  cfg.seed = 8;
  cfg.sample_injections = {{{0, 0, 5, 1.0}}, {{0, 0, 6, 1.0}}};
  const Dataset ds = generate(cfg);

  TrainConfig tc;
  tc.max_epochs = 600;
  tc.schedule.drop_epoch = 450;
  tc.init.jitter = 0.0;
  const TrainResult res = train(ds, tc);
  REQUIRE(!res.curve.empty());
  const double first = res.curve.front().total;
  const double last = res.curve.back().total;
  CHECK(last < 0.01 * first);
  REQUIRE(res.err.has_value());
  // drift along the electron path is the best-identified coefficient
  bool found = false;
  for (const auto& e : res.err->entries)
    if (e.kind == "eDrift") {
      found = true;
      CHECK(e.err < 0.05);
    }
  CHECK(found);
}

TEST_CASE("training at the ground truth stays exactly there") {
  const Dataset ds = small_dataset(3);
  TrainableWeights gtw;
  gtw.mat = *ds.ground_truth;
  gtw.set_fixed_stencils(ds.stencil_e, ds.stencil_h);
  TrainConfig tc;
  tc.max_epochs = 25;
  tc.resume_weights = gtw;
  tc.resume_adam = AdamState::init(gtw.n_params());
  const TrainResult res = train(ds, tc);
  for (const auto& row : res.curve) CHECK(row.total == 0.0);
  CHECK(res.weights.pack() == gtw.pack());
}

TEST_CASE("non-finite data raises DivergenceError") {
  Dataset ds = small_dataset(6);
  ds.samples[0].signals[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.max_epochs = 3;
  CHECK_THROWS_AS(train(ds, tc), DivergenceError);
}

TEST_CASE("checkpoint round-trip and seamless resume") {
  const auto dir = temp_dir("ckpt");
  const Dataset ds = small_dataset(30);

  TrainConfig full;
  full.max_epochs = 24;
  full.schedule.drop_epoch = 12;
  full.init.jitter = 0.2;
  const TrainResult ref = train(ds, full);

  TrainConfig head = full;
  head.max_epochs = 10;
  const TrainResult part = train(ds, head);
  save_checkpoint(dir, part.weights, part.adam, part.epochs_run, ds.grid);
  const Checkpoint ck = load_checkpoint(dir / "checkpoint.json");
  CHECK(ck.epoch == 10);
  CHECK(ck.weights.pack() == part.weights.pack());
  CHECK(ck.adam.m == part.adam.m);
  CHECK(ck.adam.v == part.adam.v);
  CHECK(ck.adam.step == part.adam.step);

  TrainConfig tail = full;
  tail.resume_weights = ck.weights;
  tail.resume_adam = ck.adam;
  tail.start_epoch = ck.epoch;
  tail.max_epochs = 14;
  const TrainResult rest = train(ds, tail);
  CHECK(rest.weights.pack() == ref.weights.pack());
  CHECK(rest.adam.m == ref.adam.m);
  std::filesystem::remove_all(dir);
}

TEST_CASE("initial weights follow the per-kind constants") {
  const Dataset ds = small_dataset(1);
  InitConfig init;
  const TrainableWeights w = make_initial_weights(ds.grid, 1, 2, ds.stencil_e, ds.stencil_h,
                                                  false, init);
  CHECK(w.mat.e.drift[0] == init.e_drift);
  CHECK(w.mat.h.drift[0] == init.h_drift);
  CHECK(w.mat.h.trap[0][0] == init.h_trap[0]);
  CHECK(w.mat.h.trap[1][0] == init.h_trap[1]);
  CHECK(w.mat.h.trap[0][0] != w.mat.h.trap[1][0]);  // trap centers start distinct
  // jitter is seeded and reproducible
  InitConfig ji = init;
  ji.jitter = 0.1;
  ji.seed = 77;
  const auto a = make_initial_weights(ds.grid, 1, 2, ds.stencil_e, ds.stencil_h, false, ji);
  const auto b = make_initial_weights(ds.grid, 1, 2, ds.stencil_e, ds.stencil_h, false, ji);
  CHECK(a.pack() == b.pack());
  CHECK(a.pack() != w.pack());
}

TEST_CASE("presets are well-formed") {
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const PresetBundle p = make_preset(name, 1, false);
    CHECK(!p.gen.sample_injections.empty());
    p.gen.grid.validate();
    CHECK(p.train.max_epochs > 0);
  }
  CHECK_THROWS_AS(make_preset("no-such-preset", 1, false), ValidationError);
}
