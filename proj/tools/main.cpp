// rtsd: voxelized charge-transport simulation and coefficient learning for
// pixelated semiconductor detectors.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "rtsd/io.hpp"
#include "rtsd/presets.hpp"

using namespace rtsd;

namespace {

std::filesystem::path dataset_manifest(std::filesystem::path p) {
  if (std::filesystem::is_directory(p)) return p / "manifest.json";
  return p;
}

std::filesystem::path checkpoint_manifest(std::filesystem::path p) {
  if (std::filesystem::is_directory(p)) return p / "checkpoint.json";
  return p;
}

GroundTruthConfig parse_gen_config(const nlohmann::json& j) {
  GroundTruthConfig c;
  const auto& jg = j.at("grid");
  c.grid.M = jg.at("M").get<int>();
  c.grid.N = jg.at("N").get<int>();
  c.grid.P = jg.at("P").get<int>();
  c.grid.T = jg.at("T").get<int>();
  c.grid.dt = jg.value("dt", 1e-8);
  c.seed = j.value("seed", uint64_t{1});
  c.e_centers = j.value("e_centers", 1);
  c.h_centers = j.value("h_centers", 2);
  c.lateral_block = j.value("lateral_block", 1);
  if (j.contains("boundary")) {
    const auto b = j["boundary"].get<std::string>();
    if (b == "closed")
      c.boundary = Boundary::closed_lateral;
    else if (b == "virtual")
      c.boundary = Boundary::virtual_boundary;
    else
      throw ValidationError("config: unknown boundary '" + b + "'");
  }
  if (j.contains("mobile_mode")) {
    const auto m = j["mobile_mode"].get<std::string>();
    if (m == "conservative")
      c.mode = MobileMode::conservative;
    else if (m == "literal")
      c.mode = MobileMode::literal;
    else
      throw ValidationError("config: unknown mobile mode '" + m + "'");
  }
  if (j.contains("phi_mode")) {
    const auto m = j["phi_mode"].get<std::string>();
    if (m == "planar")
      c.phi_mode = PhiMode::planar;
    else if (m == "small_pixel")
      c.phi_mode = PhiMode::small_pixel_analytic;
    else if (m == "file")
      c.phi_mode = PhiMode::file;
    else
      throw ValidationError("config: unknown phi mode '" + m + "'");
  }
  if (j.contains("phi_file")) c.phi_file = j["phi_file"].get<std::string>();
  if (j.contains("geometry")) {
    c.geometry.thickness = j["geometry"].value("thickness", 1.0);
    c.geometry.pixel_size = j["geometry"].value("pixel_size", 0.2);
  }
  if (j.contains("stencil_e_file")) c.stencil_e_file = j["stencil_e_file"].get<std::string>();
  if (j.contains("stencil_h_file")) c.stencil_h_file = j["stencil_h_file"].get<std::string>();
  if (j.contains("material_file"))
    c.material_file = std::filesystem::path(j["material_file"].get<std::string>());
  if (j.contains("profile")) {
    const auto& p = j["profile"];
    auto set = [&](const char* key, double& field) { field = p.value(key, field); };
    set("e_drift_lo", c.profile.e_drift_lo);
    set("e_drift_hi", c.profile.e_drift_hi);
    set("h_drift_lo", c.profile.h_drift_lo);
    set("h_drift_hi", c.profile.h_drift_hi);
    set("tau_eT_lo", c.profile.tau_eT_lo);
    set("tau_eT_hi", c.profile.tau_eT_hi);
    set("tau_eD_lo", c.profile.tau_eD_lo);
    set("tau_eD_hi", c.profile.tau_eD_hi);
    set("tau_hT1_lo", c.profile.tau_hT1_lo);
    set("tau_hT1_hi", c.profile.tau_hT1_hi);
    set("tau_hD1_lo", c.profile.tau_hD1_lo);
    set("tau_hD1_hi", c.profile.tau_hD1_hi);
    set("tau_hT2_lo", c.profile.tau_hT2_lo);
    set("tau_hT2_hi", c.profile.tau_hT2_hi);
    set("tau_hD2_lo", c.profile.tau_hD2_lo);
    set("tau_hD2_hi", c.profile.tau_hD2_hi);
    set("tau_e_lo", c.profile.tau_e_lo);
    set("tau_e_hi", c.profile.tau_e_hi);
    set("tau_h_lo", c.profile.tau_h_lo);
    set("tau_h_hi", c.profile.tau_h_hi);
  }
  for (const auto& js : j.at("injections")) {
    std::vector<Injection> sample;
    for (const auto& ji : js) {
      Injection inj;
      inj.i = ji.at("i").get<int>();
      inj.j = ji.at("j").get<int>();
      inj.k = ji.at("k").get<int>();
      inj.magnitude = ji.value("magnitude", 1.0);
      sample.push_back(inj);
    }
    c.sample_injections.push_back(std::move(sample));
  }
  return c;
}

void apply_train_config(TrainConfig& c, const nlohmann::json& j) {
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    c.loss.k = l.value("k", c.loss.k);
    c.loss.l = l.value("l", c.loss.l);
    c.loss.n = l.value("n", c.loss.n);
    if (l.value("voltage", std::string("disabled")) == "signal-consistency")
      c.loss.voltage = VoltageTerm::signal_consistency;
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    c.schedule.initial_lr = s.value("initial_lr", c.schedule.initial_lr);
    c.schedule.drop_lr = s.value("drop_lr", c.schedule.drop_lr);
    c.schedule.drop_epoch = s.value("drop_epoch", c.schedule.drop_epoch);
    c.schedule.window = s.value("window", c.schedule.window);
    c.schedule.ratio = s.value("ratio", c.schedule.ratio);
    if (s.value("trigger", std::string("fixed-epoch")) == "oscillation")
      c.schedule.trigger = DropTrigger::oscillation;
  }
  if (j.contains("init")) {
    const auto& i = j["init"];
    c.init.e_drift = i.value("e_drift", c.init.e_drift);
    c.init.h_drift = i.value("h_drift", c.init.h_drift);
    c.init.e_rec = i.value("e_rec", c.init.e_rec);
    c.init.h_rec = i.value("h_rec", c.init.h_rec);
    c.init.e_trap = i.value("e_trap", c.init.e_trap);
    c.init.e_detrap = i.value("e_detrap", c.init.e_detrap);
    if (i.contains("h_trap")) c.init.h_trap = i["h_trap"].get<std::vector<double>>();
    if (i.contains("h_detrap")) c.init.h_detrap = i["h_detrap"].get<std::vector<double>>();
    c.init.jitter = i.value("jitter", c.init.jitter);
    c.init.stencil_off_axis = i.value("stencil_off_axis", c.init.stencil_off_axis);
  }
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.train_stencil = j.value("train_stencil", c.train_stencil);
  c.plateau_window = j.value("plateau_window", c.plateau_window);
  c.plateau_rel = j.value("plateau_rel", c.plateau_rel);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
}

void write_loss_csv(const std::filesystem::path& file, const std::vector<LossRow>& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,lr,loss,signal_term,electron_term,hole_term\n";
  for (const auto& r : curve)
    os << r.epoch << ',' << r.lr << ',' << r.total << ',' << r.signal_term << ','
       << r.electron_term << ',' << r.hole_term << "\n";
  io::write_text(file, os.str());
}

void write_err_csv(const std::filesystem::path& file, const ErrReport& rep) {
  std::ostringstream os;
  os.precision(17);
  os << "kind,z_lo,z_hi,err,valid,excluded_points,per_subpixel\n";
  for (const auto& e : rep.entries) {
    os << e.kind << ',' << e.z_lo << ',' << e.z_hi << ',' << e.err << ','
       << (e.valid ? 1 : 0) << ',' << e.excluded_points << ',';
    for (size_t i = 0; i < e.per_subpixel.size(); ++i)
      os << (i ? ";" : "") << e.per_subpixel[i];
    os << "\n";
  }
  os << "mean,,," << rep.mean << ",,,\n";
  io::write_text(file, os.str());
}

const std::vector<double>* coeff_of(const MaterialMap& m, const std::string& kind) {
  if (kind == "eDrift") return &m.e.drift;
  if (kind == "eRec") return &m.e.rec;
  if (kind == "hDrift") return &m.h.drift;
  if (kind == "hRec") return &m.h.rec;
  const int r = kind.size() > 2 ? std::stoi(kind.substr(2)) - 1 : 0;
  if (kind.rfind("eT", 0) == 0) return &m.e.trap[r];
  if (kind.rfind("eD", 0) == 0) return &m.e.detrap[r];
  if (kind.rfind("hT", 0) == 0) return &m.h.trap[r];
  if (kind.rfind("hD", 0) == 0) return &m.h.detrap[r];
  return nullptr;
}

void write_profiles(const std::filesystem::path& dir, const MaterialMap& learned,
                    const MaterialMap& gt, const std::vector<Injection>& injections) {
  std::filesystem::create_directories(dir);
  for (const auto& kr :
       default_err_ranges(injections, gt.P, gt.e.centers(), gt.h.centers())) {
    const auto* wl = coeff_of(learned, kr.kind);
    const auto* wg = coeff_of(gt, kr.kind);
    if (!wl || !wg) continue;
    std::ostringstream os;
    os.precision(17);
    os << "k";
    for (int i = 0; i < gt.M; ++i)
      for (int j = 0; j < gt.N; ++j)
        os << ",learned_" << i << '_' << j << ",truth_" << i << '_' << j;
    os << "\n";
    for (int k = kr.z_lo; k <= kr.z_hi; ++k) {
      os << k;
      for (int i = 0; i < gt.M; ++i)
        for (int j = 0; j < gt.N; ++j) {
          const size_t v = (static_cast<size_t>(i) * gt.N + j) * gt.P + k;
          os << ',' << (*wl)[v] << ',' << (*wg)[v];
        }
      os << "\n";
    }
    io::write_text(dir / (kr.kind + ".csv"), os.str());
  }
}

std::string err_table(const ErrReport& rep) {
  std::ostringstream os;
  os << "kind      range      Err\n";
  char buf[96];
  for (const auto& e : rep.entries) {
    std::snprintf(buf, sizeof(buf), "%-9s [%2d,%3d]  %s\n", e.kind.c_str(), e.z_lo, e.z_hi,
                  e.valid ? std::to_string(e.err).c_str() : "n/a");
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "mean Err: %.6f\n", rep.mean);
  os << buf;
  return os.str();
}

std::vector<Injection> all_injections(const Dataset& ds) {
  std::vector<Injection> all;
  for (const auto& s : ds.samples)
    all.insert(all.end(), s.injections.begin(), s.injections.end());
  return all;
}

// Maximum per-voxel off-axis stencil mass, restricted to voxels that carried
// charge at some step of some sample.
double max_off_axis_mass(const Dataset& ds, const TrainableWeights& w) {
  const int V = ds.grid.voxels();
  std::vector<uint8_t> traversed(V, 0);
  const size_t T = ds.grid.T;
  for (const auto& s : ds.samples)
    for (size_t t = 0; t < T; ++t)
      for (int v = 0; v < V; ++v)
        if (s.q_e[t * V + v] != 0.0 || s.q_h[t * V + v] != 0.0) traversed[v] = 1;
  double worst = 0.0;
  for (const DriftStencil* st : {&w.stencil_e, &w.stencil_h}) {
    const int on = on_axis_offset(st->species);
    for (int v = 0; v < V; ++v) {
      if (!traversed[v]) continue;
      double off_mass = 0.0;
      for (int o = 0; o < st->n_offsets(); ++o)
        if (o != on) off_mass += st->at(v, o);
      worst = std::max(worst, off_mass);
    }
  }
  return worst;
}

struct GradcheckResult {
  double max_rel = 0.0;
  std::string worst_param;
};

GradcheckResult gradcheck_once(const Dataset& ds, const TrainableWeights& w,
                               const LossConfig& lc, double eps) {
  const GradientResult gr = backward(ds, w, lc);
  const std::vector<double> fd = finite_diff_grad(ds, w, lc, eps);
  double gmax = 0.0;
  for (double g : gr.grad) gmax = std::max(gmax, std::abs(g));
  GradcheckResult out;
  for (size_t p = 0; p < fd.size(); ++p) {
    // floor at 1e-6*gmax: components much smaller than the dominant gradient
    // are roundoff-limited in the central difference
    const double denom =
        std::max({std::abs(gr.grad[p]), std::abs(fd[p]), 1e-6 * gmax, 1e-300});
    const double rel = std::abs(gr.grad[p] - fd[p]) / denom;
    if (rel > out.max_rel) {
      out.max_rel = rel;
      out.worst_param = "param " + std::to_string(p);
    }
  }
  return out;
}

Dataset make_gradcheck_dataset(int M, int N, int P, int T, uint64_t seed) {
  GroundTruthConfig gc;
  gc.grid = {M, N, P, T, 1e-8};
  gc.seed = seed;
  gc.sample_injections = {{{M / 2, N / 2, std::min(P - 3, (7 * P) / 10), 1.0}},
                          {{0, N - 1, P / 2, 1.0}}};
  return generate(gc);
}

TrainableWeights make_gradcheck_weights(const Dataset& ds, uint64_t seed,
                                        bool train_stencil) {
  TrainableWeights w;
  w.mat = sample_material_map(ds.grid.M, ds.grid.N, ds.grid.P, ds.grid.dt, ds.e_centers,
                              ds.h_centers, CoeffProfile{}, seed);
  w.set_fixed_stencils(ds.stencil_e, ds.stencil_h);
  if (train_stencil) {
    w.enable_stencil_training();
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    for (auto* raw : {&w.raw_e, &w.raw_h})
      for (double& x : *raw) x = 0.1 + 0.9 * ((rng() >> 11) * 0x1.0p-53);
    w.unpack(w.pack());  // keep the normalized stencils in sync with the raws
  }
  return w;
}

int run(int argc, char** argv) {
  CLI::App app{"Voxelized detector charge-transport simulator and coefficient learner"};
  app.require_subcommand(1);
  int workers = 1;
  app.add_option("--workers", workers, "worker threads (current engine is single-threaded)")
      ->check(CLI::PositiveNumber);

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string gen_config, gen_preset, gen_out = "dataset";
  uint64_t gen_seed = 0;
  bool gen_has_seed = false, keep_fine = false, paper_scale = false;
  int export_csv = -1;
  std::vector<int> subset_rows, subset_cols;
  int downsample = 1;
  gen->add_option("--config", gen_config, "generation config JSON");
  gen->add_option("--preset", gen_preset, "experiment preset name");
  gen->add_option("--seed", gen_seed, "ground-truth seed")->each([&](const std::string&) {
    gen_has_seed = true;
  });
  gen->add_option("--out", gen_out, "output directory");
  gen->add_flag("--keep-fine", keep_fine, "also write the pre-reduction dataset");
  gen->add_flag("--paper-scale", paper_scale, "full-scale preset schedules");
  gen->add_option("--export-csv", export_csv, "export this sample index as CSV");
  gen->add_option("--subset-rows", subset_rows, "retain these OX rows");
  gen->add_option("--subset-cols", subset_cols, "retain these OY columns");
  gen->add_option("--downsample", downsample, "lateral downsampling factor");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train coefficients against a dataset");
  std::string tr_data, tr_config, tr_out = "train_out", tr_resume;
  int tr_epochs = -1;
  uint64_t tr_seed = 0;
  bool tr_has_seed = false;
  tr->add_option("--data", tr_data, "dataset directory or manifest")->required();
  tr->add_option("--config", tr_config, "training config JSON");
  tr->add_option("--out", tr_out, "output directory");
  tr->add_option("--epochs", tr_epochs, "epoch count override");
  tr->add_option("--seed", tr_seed, "init seed")->each([&](const std::string&) {
    tr_has_seed = true;
  });
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint against ground truth");
  std::string ev_ckpt, ev_data, ev_out = "eval_out";
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory or manifest")->required();
  ev->add_option("--data", ev_data, "dataset directory or manifest")->required();
  ev->add_option("--out", ev_out, "output directory");

  // ---- gradcheck ----
  auto* gc = app.add_subcommand("gradcheck", "adjoint vs finite-difference check");
  int gc_M = 3, gc_N = 3, gc_P = 10, gc_T = 20, gc_draws = 1;
  double gc_eps = 1e-5;
  uint64_t gc_seed = 12345;
  bool gc_corrupt = false, gc_stencil = true;
  gc->add_option("--M", gc_M);
  gc->add_option("--N", gc_N);
  gc->add_option("--P", gc_P);
  gc->add_option("--T", gc_T);
  gc->add_option("--draws", gc_draws, "random parameter draws");
  gc->add_option("--eps", gc_eps, "finite-difference step");
  gc->add_option("--seed", gc_seed);
  gc->add_flag("--corrupt", gc_corrupt, "negative control: corrupt the adjoint");
  gc->add_flag("!--no-stencil", gc_stencil, "skip stencil-fraction parameters");

  // ---- experiment ----
  auto* ex = app.add_subcommand("experiment", "run a full preset pipeline");
  std::string ex_name, ex_out = "experiment_out";
  uint64_t ex_seed = 1;
  int ex_epochs = -1;
  bool ex_paper = false, ex_keep_fine = false;
  ex->add_option("name", ex_name, "preset name")->required();
  ex->add_option("--seed", ex_seed);
  ex->add_option("--out", ex_out, "output directory");
  ex->add_option("--epochs", ex_epochs, "epoch count override");
  ex->add_flag("--paper-scale", ex_paper, "full-scale schedule");
  ex->add_flag("--keep-fine", ex_keep_fine, "also write the pre-reduction dataset");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    Dataset ds;
    std::optional<Dataset> fine;
    if (!gen_preset.empty()) {
      PresetBundle bundle =
          make_preset(gen_preset, gen_has_seed ? gen_seed : 1, paper_scale);
      ds = preset_generate(bundle, &fine);
    } else if (!gen_config.empty()) {
      GroundTruthConfig c = parse_gen_config(io::read_json(gen_config));
      if (gen_has_seed) c.seed = gen_seed;
      ds = generate(c);
      if (!subset_rows.empty() || !subset_cols.empty()) {
        fine = std::move(ds);
        ds = subset_region(*fine, subset_rows, subset_cols);
      } else if (downsample > 1) {
        fine = std::move(ds);
        ds = downsample_dataset(*fine, downsample);
      }
    } else {
      throw ValidationError("gen: pass --config or --preset");
    }
    save_dataset(ds, gen_out);
    if (keep_fine && fine) save_dataset(*fine, std::filesystem::path(gen_out) / "fine");
    if (export_csv >= 0) export_sample_csv(ds, static_cast<size_t>(export_csv), gen_out);
    std::printf("dataset: %s\n  grid %dx%dx%d, T=%d, dt=%g\n  samples: %zu, seed: %llu\n",
                gen_out.c_str(), ds.grid.M, ds.grid.N, ds.grid.P, ds.grid.T, ds.grid.dt,
                ds.samples.size(), static_cast<unsigned long long>(ds.seed));
    return 0;
  }

  if (tr->parsed()) {
    const Dataset ds = load_dataset(dataset_manifest(tr_data));
    TrainConfig cfg;
    if (!tr_config.empty()) apply_train_config(cfg, io::read_json(tr_config));
    if (tr_epochs >= 0) cfg.max_epochs = tr_epochs;
    if (tr_has_seed) cfg.init.seed = tr_seed;
    cfg.out_dir = tr_out;
    if (!tr_resume.empty()) {
      const Checkpoint ck = load_checkpoint(checkpoint_manifest(tr_resume));
      cfg.resume_weights = ck.weights;
      cfg.resume_adam = ck.adam;
      cfg.start_epoch = ck.epoch;
    }
    const TrainResult res = train(ds, cfg);
    std::filesystem::create_directories(tr_out);
    write_loss_csv(std::filesystem::path(tr_out) / "loss.csv", res.curve);
    std::ostringstream sum;
    sum << "epochs run: " << res.epochs_run << "\n"
        << "final loss: " << (res.curve.empty() ? 0.0 : res.curve.back().total) << "\n"
        << "plateau stop: " << (res.plateau_stopped ? "yes" : "no") << "\n";
    if (res.err) {
      write_err_csv(std::filesystem::path(tr_out) / "err_report.csv", *res.err);
      write_profiles(std::filesystem::path(tr_out) / "profiles", res.weights.mat,
                     *ds.ground_truth, all_injections(ds));
      sum << err_table(*res.err);
    }
    io::write_text(std::filesystem::path(tr_out) / "summary.txt", sum.str());
    std::fputs(sum.str().c_str(), stdout);
    return 0;
  }

  if (ev->parsed()) {
    const Checkpoint ck = load_checkpoint(checkpoint_manifest(ev_ckpt));
    const Dataset ds = load_dataset(dataset_manifest(ev_data));
    if (!ds.ground_truth)
      throw ValidationError("eval: dataset carries no ground truth");
    const ErrReport rep = err_report(ck.weights.mat, *ds.ground_truth, all_injections(ds));
    const LossBreakdown l = total_loss(ds, ck.weights, LossConfig{});
    std::filesystem::create_directories(ev_out);
    write_err_csv(std::filesystem::path(ev_out) / "err_report.csv", rep);
    write_profiles(std::filesystem::path(ev_out) / "profiles", ck.weights.mat,
                   *ds.ground_truth, all_injections(ds));
    std::ostringstream sum;
    sum << "checkpoint epoch: " << ck.epoch << "\nloss: " << l.total << "\n"
        << err_table(rep);
    io::write_text(std::filesystem::path(ev_out) / "summary.txt", sum.str());
    std::fputs(sum.str().c_str(), stdout);
    return 0;
  }

  if (gc->parsed()) {
    if (gc_corrupt) set_adjoint_corruption(1.01);
    const Dataset ds = make_gradcheck_dataset(gc_M, gc_N, gc_P, gc_T, gc_seed);
    LossConfig lc;
    double worst = 0.0;
    for (int d = 0; d < gc_draws; ++d) {
      const TrainableWeights w = make_gradcheck_weights(ds, gc_seed + 1000 + d, gc_stencil);
      if (d == 0) {
        std::printf("eps sweep (draw 0):\n");
        for (double eps : {1e-4, 1e-6, 1e-8}) {
          const GradcheckResult r = gradcheck_once(ds, w, lc, eps);
          std::printf("  eps=%.0e  max rel dev = %.3e\n", eps, r.max_rel);
        }
      }
      const GradcheckResult r = gradcheck_once(ds, w, lc, gc_eps);
      worst = std::max(worst, r.max_rel);
    }
    set_adjoint_corruption(1.0);
    std::printf("max relative deviation over %d draw(s): %.3e\n", gc_draws, worst);
    const bool pass = worst < 1e-4;
    std::printf("%s\n", pass ? "PASS" : "FAIL");
    return pass ? 0 : 1;
  }

  if (ex->parsed()) {
    PresetBundle bundle = make_preset(ex_name, ex_seed, ex_paper);
    if (ex_epochs >= 0) bundle.train.max_epochs = ex_epochs;
    const std::filesystem::path out(ex_out);
    std::optional<Dataset> fine;
    Dataset ds = preset_generate(bundle, &fine);
    save_dataset(ds, out / "dataset");
    if (ex_keep_fine && fine) save_dataset(*fine, out / "dataset" / "fine");
    bundle.train.out_dir = out / "train";
    const TrainResult res = train(ds, bundle.train);
    write_loss_csv(out / "train" / "loss.csv", res.curve);
    std::ostringstream sum;
    sum << "preset: " << bundle.name << "\nepochs run: " << res.epochs_run
        << "\nfinal loss: " << (res.curve.empty() ? 0.0 : res.curve.back().total) << "\n";
    if (res.err) {
      write_err_csv(out / "train" / "err_report.csv", *res.err);
      write_profiles(out / "train" / "profiles", res.weights.mat, *ds.ground_truth,
                     all_injections(ds));
      sum << err_table(*res.err);
      if (bundle.name == "subset-subpixels")
        sum << "reference mean Err: 0.0617\n";
      else if (bundle.name == "all-subpixels")
        sum << "reference mean Err: 0.0333\n";
    }
    if (bundle.train.train_stencil) {
      sum << "max off-axis stencil mass (traversed voxels): "
          << max_off_axis_mass(ds, res.weights) << "\n";
    }
    io::write_text(out / "train" / "summary.txt", sum.str());
    std::fputs(sum.str().c_str(), stdout);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 4;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return 5;
  } catch (const InvariantFault& e) {
    std::fprintf(stderr, "invariant fault: %s\n", e.what());
    return 6;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
