#include "rtsd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <sstream>

#include "rtsd/downsample.hpp"
#include "rtsd/io.hpp"
#include "rtsd/lifetimes.hpp"

namespace rtsd {

namespace {

constexpr int kFormatVersion = 1;

// Portable uniforms on top of mt19937_64 (std::uniform_real_distribution is
// implementation-defined; this keeps seeds reproducible across toolchains).
double u01(std::mt19937_64& rng) { return (rng() >> 11) * 0x1.0p-53; }
double uni(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * u01(rng); }
double log_uni(std::mt19937_64& rng, double lo, double hi) {
  return std::exp(uni(rng, std::log(lo), std::log(hi)));
}

std::string sample_stem(size_t idx) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%04zu", idx);
  return buf;
}

void require_contiguous(const std::vector<int>& sel, int limit, const char* what) {
  if (sel.empty()) throw ValidationError(std::string("subset: empty ") + what);
  for (size_t i = 0; i < sel.size(); ++i) {
    if (sel[i] < 0 || sel[i] >= limit)
      throw ValidationError(std::string("subset: ") + what + " index out of range");
    if (i > 0 && sel[i] != sel[i - 1] + 1)
      throw ValidationError(std::string("subset: ") + what +
                            " must be contiguous ascending");
  }
}

}  // namespace

MaterialMap sample_material_map(int M, int N, int P, double dt, int e_centers, int h_centers,
                                const CoeffProfile& profile, uint64_t seed,
                                int lateral_block) {
  if (lateral_block < 1 || M % lateral_block != 0 || N % lateral_block != 0)
    throw ValidationError("sample_material_map: lateral_block must divide M and N");
  if (e_centers < 1 || h_centers < 1)
    throw ValidationError("sample_material_map: need at least one trap center per species");
  MaterialMap mat = MaterialMap::zeros(M, N, P, e_centers, h_centers);
  std::mt19937_64 rng(seed);
  const int b = lateral_block;
  const int Mb = M / b, Nb = N / b;

  auto w = [&](double lo, double hi) { return lifetime_to_weight(log_uni(rng, lo, hi), dt); };

  // Fixed draw order per block: electron kinds, then hole kinds. Values are
  // broadcast over the whole lateral block so block means stay exact.
  for (int I = 0; I < Mb; ++I)
    for (int J = 0; J < Nb; ++J)
      for (int k = 0; k < P; ++k) {
        std::vector<double> vals;
        vals.push_back(uni(rng, profile.e_drift_lo, profile.e_drift_hi));
        vals.push_back(w(profile.tau_e_lo, profile.tau_e_hi));
        for (int r = 0; r < e_centers; ++r) {
          vals.push_back(w(profile.tau_eT_lo, profile.tau_eT_hi));
          vals.push_back(w(profile.tau_eD_lo, profile.tau_eD_hi));
        }
        vals.push_back(uni(rng, profile.h_drift_lo, profile.h_drift_hi));
        vals.push_back(w(profile.tau_h_lo, profile.tau_h_hi));
        for (int r = 0; r < h_centers; ++r) {
          const bool fast = r == 0;
          vals.push_back(fast ? w(profile.tau_hT1_lo, profile.tau_hT1_hi)
                              : w(profile.tau_hT2_lo, profile.tau_hT2_hi));
          vals.push_back(fast ? w(profile.tau_hD1_lo, profile.tau_hD1_hi)
                              : w(profile.tau_hD2_lo, profile.tau_hD2_hi));
        }
        for (int di = 0; di < b; ++di)
          for (int dj = 0; dj < b; ++dj) {
            const int v = ((I * b + di) * N + (J * b + dj)) * P + k;
            size_t x = 0;
            mat.e.drift[v] = vals[x++];
            mat.e.rec[v] = vals[x++];
            for (int r = 0; r < e_centers; ++r) {
              mat.e.trap[r][v] = vals[x++];
              mat.e.detrap[r][v] = vals[x++];
            }
            mat.h.drift[v] = vals[x++];
            mat.h.rec[v] = vals[x++];
            for (int r = 0; r < h_centers; ++r) {
              mat.h.trap[r][v] = vals[x++];
              mat.h.detrap[r][v] = vals[x++];
            }
          }
      }
  mat.validate();
  return mat;
}

double TrainingSample::injected_total() const {
  double s = 0.0;
  for (const auto& inj : injections) s += inj.magnitude;
  return s;
}

Dataset generate(const GroundTruthConfig& config) {
  const GridSpec& g = config.grid;
  g.validate();
  if (config.sample_injections.empty())
    throw ValidationError("generate: no samples requested");

  Dataset ds;
  ds.grid = g;
  ds.e_centers = config.e_centers;
  ds.h_centers = config.h_centers;
  ds.boundary = config.boundary;
  ds.mode = config.mode;
  ds.seed = config.seed;

  switch (config.phi_mode) {
    case PhiMode::planar: ds.phi = build_planar_phi(g); break;
    case PhiMode::small_pixel_analytic:
      ds.phi = build_small_pixel_phi(g, config.geometry);
      break;
    case PhiMode::file: ds.phi = WeightingPotentialField::load(config.phi_file); break;
  }
  if (ds.phi.M != g.M || ds.phi.N != g.N || ds.phi.P != g.P)
    throw FormatError("generate: weighting-potential shape does not match grid");

  ds.stencil_e = config.stencil_e_file.empty()
                     ? DriftStencil::uniform(Species::electron, g.M, g.N, g.P)
                     : load_stencil(config.stencil_e_file);
  ds.stencil_h = config.stencil_h_file.empty()
                     ? DriftStencil::uniform(Species::hole, g.M, g.N, g.P)
                     : load_stencil(config.stencil_h_file);

  if (config.material_file) {
    MaterialMap probe = MaterialMap::zeros(g.M, g.N, g.P, config.e_centers, config.h_centers);
    const auto flat = io::read_f64(*config.material_file, probe.pack().size());
    ds.ground_truth =
        MaterialMap::unpack(flat, g.M, g.N, g.P, config.e_centers, config.h_centers);
    ds.ground_truth->validate();
  } else {
    ds.ground_truth = sample_material_map(g.M, g.N, g.P, g.dt, config.e_centers,
                                          config.h_centers, config.profile, config.seed,
                                          config.lateral_block);
  }

  TransportConfig tc;
  tc.boundary = config.boundary;
  tc.mode = config.mode;
  tc.check_conservation = config.mode == MobileMode::conservative;
  TransportEngine engine(g, *ds.ground_truth, ds.stencil_e, ds.stencil_h, ds.phi, tc);

  const size_t V = g.voxels(), E = g.electrodes();
  for (const auto& injections : config.sample_injections) {
    SimulationTrace tr = engine.simulate(injections);
    TrainingSample s;
    s.injections = injections;
    // drop row 0 (initial state): on-disk arrays cover steps 1..T
    s.q_e.assign(tr.q_e.begin() + V, tr.q_e.end());
    s.q_h.assign(tr.q_h.begin() + V, tr.q_h.end());
    s.qt_e.assign(tr.qt_e.begin() + ds.e_centers * V, tr.qt_e.end());
    s.qt_h.assign(tr.qt_h.begin() + ds.h_centers * V, tr.qt_h.end());
    s.signals.assign(tr.signals.begin() + E, tr.signals.end());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_stencil(const DriftStencil& st, const std::filesystem::path& dir,
                  const std::string& stem) {
  st.validate();
  std::filesystem::create_directories(dir);
  io::write_f64(dir / (stem + ".f64"), st.frac);
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["species"] = st.species == Species::electron ? "electron" : "hole";
  j["grid"] = {{"M", st.M}, {"N", st.N}, {"P", st.P}};
  nlohmann::json offs = nlohmann::json::array();
  for (const auto& o : st.offsets) offs.push_back({o.dx, o.dy, o.dz});
  j["offsets"] = offs;
  j["array"] = {{"file", stem + ".f64"},
                {"shape", {st.voxels(), st.n_offsets()}},
                {"dtype", "f64"}};
  io::write_json(dir / (stem + ".json"), j);
}

DriftStencil load_stencil(const std::filesystem::path& manifest_file) {
  const auto j = io::read_json(manifest_file);
  if (!j.contains("format_version") || j["format_version"].get<int>() != kFormatVersion)
    throw FormatError("stencil manifest: format version mismatch");
  DriftStencil st;
  const std::string sp = j.at("species").get<std::string>();
  if (sp == "electron")
    st.species = Species::electron;
  else if (sp == "hole")
    st.species = Species::hole;
  else
    throw FormatError("stencil manifest: unknown species '" + sp + "'");
  st.M = j.at("grid").at("M").get<int>();
  st.N = j.at("grid").at("N").get<int>();
  st.P = j.at("grid").at("P").get<int>();
  st.offsets = drift_offsets(st.species);
  const auto& offs = j.at("offsets");
  if (offs.size() != st.offsets.size())
    throw FormatError("stencil manifest: offset table shape mismatch");
  for (size_t o = 0; o < st.offsets.size(); ++o) {
    const auto& e = offs[o];
    if (e[0].get<int>() != st.offsets[o].dx || e[1].get<int>() != st.offsets[o].dy ||
        e[2].get<int>() != st.offsets[o].dz)
      throw FormatError("stencil manifest: offsets not in canonical order");
  }
  const auto& arr = j.at("array");
  st.frac = io::read_f64(manifest_file.parent_path() / arr.at("file").get<std::string>(),
                         static_cast<size_t>(st.voxels()) * st.offsets.size());
  st.validate();
  return st;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int T = ds.grid.T, E = ds.grid.electrodes();
  const int M = ds.grid.M, N = ds.grid.N, P = ds.grid.P;

  ds.phi.save(dir, "phi");
  save_stencil(ds.stencil_e, dir, "stencil_e");
  save_stencil(ds.stencil_h, dir, "stencil_h");
  if (ds.ground_truth) io::write_f64(dir / "ground_truth.f64", ds.ground_truth->pack());

  nlohmann::json arrays = nlohmann::json::object();
  auto reg = [&](const std::string& name, const std::vector<double>& data,
                 std::vector<int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    if (data.size() != n) throw InvariantFault("save_dataset: array shape mismatch: " + name);
    io::write_f64(dir / (name + ".f64"), data);
    arrays[name] = {{"file", name + ".f64"}, {"shape", shape}, {"dtype", "f64"}};
  };

  nlohmann::json samples = nlohmann::json::array();
  for (size_t si = 0; si < ds.samples.size(); ++si) {
    const auto& s = ds.samples[si];
    const std::string stem = sample_stem(si);
    reg(stem + "_q_e", s.q_e, {T, M, N, P});
    reg(stem + "_q_h", s.q_h, {T, M, N, P});
    reg(stem + "_qt_e", s.qt_e, {T, ds.e_centers, M, N, P});
    reg(stem + "_qt_h", s.qt_h, {T, ds.h_centers, M, N, P});
    reg(stem + "_signals", s.signals, {T, E});
    nlohmann::json injections = nlohmann::json::array();
    for (const auto& inj : s.injections)
      injections.push_back(
          {{"i", inj.i}, {"j", inj.j}, {"k", inj.k}, {"magnitude", inj.magnitude}});
    samples.push_back({{"injections", injections}, {"stem", stem}});
  }

  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["grid"] = {{"M", M}, {"N", N}, {"P", P}, {"T", T}, {"dt", ds.grid.dt}};
  j["boundary"] = ds.boundary == Boundary::closed_lateral ? "closed" : "virtual";
  j["mobile_mode"] = ds.mode == MobileMode::conservative ? "conservative" : "literal";
  j["e_centers"] = ds.e_centers;
  j["h_centers"] = ds.h_centers;
  j["seed"] = ds.seed;
  j["phi"] = "phi.json";
  j["stencil_e"] = "stencil_e.json";
  j["stencil_h"] = "stencil_h.json";
  if (ds.ground_truth) {
    const int kinds = 2 * (2 + ds.e_centers + ds.h_centers);
    arrays["ground_truth"] = {{"file", "ground_truth.f64"},
                              {"shape", {kinds, M, N, P}},
                              {"dtype", "f64"}};
    j["ground_truth"] = "ground_truth";
  } else {
    j["ground_truth"] = nullptr;
  }
  j["arrays"] = arrays;
  j["samples"] = samples;
  // manifest committed last: a crash mid-save leaves no readable dataset
  io::write_json(dir / "manifest.json", j);
}

Dataset load_dataset(const std::filesystem::path& manifest_file) {
  const auto j = io::read_json(manifest_file);
  const auto dir = manifest_file.parent_path();
  if (!j.contains("format_version") || j["format_version"].get<int>() != kFormatVersion)
    throw FormatError("dataset manifest: format version mismatch");

  Dataset ds;
  const auto& jg = j.at("grid");
  ds.grid.M = jg.at("M").get<int>();
  ds.grid.N = jg.at("N").get<int>();
  ds.grid.P = jg.at("P").get<int>();
  ds.grid.T = jg.at("T").get<int>();
  ds.grid.dt = jg.at("dt").get<double>();
  ds.grid.validate();
  const std::string bnd = j.at("boundary").get<std::string>();
  if (bnd == "closed")
    ds.boundary = Boundary::closed_lateral;
  else if (bnd == "virtual")
    ds.boundary = Boundary::virtual_boundary;
  else
    throw FormatError("dataset manifest: unknown boundary '" + bnd + "'");
  const std::string mode = j.at("mobile_mode").get<std::string>();
  if (mode == "conservative")
    ds.mode = MobileMode::conservative;
  else if (mode == "literal")
    ds.mode = MobileMode::literal;
  else
    throw FormatError("dataset manifest: unknown mobile mode '" + mode + "'");
  ds.e_centers = j.at("e_centers").get<int>();
  ds.h_centers = j.at("h_centers").get<int>();
  if (ds.e_centers < 1 || ds.h_centers < 1)
    throw FormatError("dataset manifest: trap center counts must be >= 1");
  ds.seed = j.value("seed", uint64_t{0});

  ds.phi = WeightingPotentialField::load(dir / j.at("phi").get<std::string>());
  if (ds.phi.M != ds.grid.M || ds.phi.N != ds.grid.N || ds.phi.P != ds.grid.P)
    throw FormatError("dataset: weighting-potential shape mismatch");
  ds.stencil_e = load_stencil(dir / j.at("stencil_e").get<std::string>());
  ds.stencil_h = load_stencil(dir / j.at("stencil_h").get<std::string>());
  for (const DriftStencil* st : {&ds.stencil_e, &ds.stencil_h})
    if (st->M != ds.grid.M || st->N != ds.grid.N || st->P != ds.grid.P)
      throw FormatError("dataset: stencil shape mismatch");
  if (ds.stencil_e.species != Species::electron || ds.stencil_h.species != Species::hole)
    throw FormatError("dataset: stencil species mismatch");

  const auto& arrays = j.at("arrays");
  auto load_arr = [&](const std::string& name, size_t expected) {
    if (!arrays.contains(name))
      throw FormatError("dataset manifest: missing array entry '" + name + "'");
    const auto& e = arrays.at(name);
    size_t n = 1;
    for (const auto& d : e.at("shape")) n *= d.get<size_t>();
    if (n != expected)
      throw FormatError("dataset manifest: declared shape mismatch for '" + name + "'");
    return io::read_f64(dir / e.at("file").get<std::string>(), expected);
  };

  if (!j.at("ground_truth").is_null()) {
    const std::string name = j.at("ground_truth").get<std::string>();
    const size_t kinds = 2 * (2 + ds.e_centers + ds.h_centers);
    const auto& e = arrays.at(name);
    const auto file = dir / e.at("file").get<std::string>();
    if (std::filesystem::exists(file)) {
      const auto flat = load_arr(name, kinds * ds.grid.voxels());
      ds.ground_truth = MaterialMap::unpack(flat, ds.grid.M, ds.grid.N, ds.grid.P,
                                            ds.e_centers, ds.h_centers);
      ds.ground_truth->validate();
    } else {
      std::fprintf(stderr,
                   "warning: ground-truth array missing (%s); dataset loaded without it\n",
                   file.string().c_str());
    }
  }

  const size_t T = ds.grid.T, V = ds.grid.voxels(), E = ds.grid.electrodes();
  for (const auto& js : j.at("samples")) {
    TrainingSample s;
    for (const auto& ji : js.at("injections")) {
      Injection inj;
      inj.i = ji.at("i").get<int>();
      inj.j = ji.at("j").get<int>();
      inj.k = ji.at("k").get<int>();
      inj.magnitude = ji.at("magnitude").get<double>();
      if (!ds.grid.contains(inj.i, inj.j, inj.k))
        throw FormatError("dataset: injection outside grid");
      s.injections.push_back(inj);
    }
    const std::string stem = js.at("stem").get<std::string>();
    s.q_e = load_arr(stem + "_q_e", T * V);
    s.q_h = load_arr(stem + "_q_h", T * V);
    s.qt_e = load_arr(stem + "_qt_e", T * ds.e_centers * V);
    s.qt_h = load_arr(stem + "_qt_h", T * ds.h_centers * V);
    s.signals = load_arr(stem + "_signals", T * E);

    // physical-range revalidation, scaled by the injected magnitude
    const double B = s.injected_total() + 1e-9;
    for (const auto* arr : {&s.q_e, &s.q_h, &s.qt_e, &s.qt_h})
      for (double q : *arr)
        if (!(q >= -1e-12) || q > B)
          throw InvariantFault("dataset: charge outside physical range");
    for (double sv : s.signals)
      if (std::abs(sv) > B) throw InvariantFault("dataset: signal outside physical range");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset subset_region(const Dataset& ds, const std::vector<int>& rows,
                      const std::vector<int>& cols) {
  require_contiguous(rows, ds.grid.M, "row");
  require_contiguous(cols, ds.grid.N, "column");
  const int Ms = static_cast<int>(rows.size()), Ns = static_cast<int>(cols.size());
  const int P = ds.grid.P, T = ds.grid.T;
  const int N = ds.grid.N;

  Dataset out;
  out.grid = ds.grid;
  out.grid.M = Ms;
  out.grid.N = Ns;
  out.e_centers = ds.e_centers;
  out.h_centers = ds.h_centers;
  out.boundary = Boundary::virtual_boundary;  // region edges become open
  out.mode = ds.mode;
  out.seed = ds.seed;

  std::vector<int> col_map(static_cast<size_t>(Ms) * Ns);  // new column -> old column
  for (int ii = 0; ii < Ms; ++ii)
    for (int jj = 0; jj < Ns; ++jj) col_map[ii * Ns + jj] = rows[ii] * N + cols[jj];

  const int Cs = Ms * Ns;
  auto slice_voxels = [&](const std::vector<double>& src, size_t outer) {
    std::vector<double> dst(outer * static_cast<size_t>(Cs) * P);
    const size_t srow = static_cast<size_t>(ds.grid.voxels());
    const size_t drow = static_cast<size_t>(Cs) * P;
    for (size_t t = 0; t < outer; ++t)
      for (int c = 0; c < Cs; ++c)
        std::copy_n(src.begin() + t * srow + static_cast<size_t>(col_map[c]) * P, P,
                    dst.begin() + t * drow + static_cast<size_t>(c) * P);
    return dst;
  };
  auto slice_columns = [&](const std::vector<double>& src, size_t outer) {
    std::vector<double> dst(outer * static_cast<size_t>(Cs));
    const size_t srow = static_cast<size_t>(ds.grid.columns());
    for (size_t t = 0; t < outer; ++t)
      for (int c = 0; c < Cs; ++c) dst[t * Cs + c] = src[t * srow + col_map[c]];
    return dst;
  };
  // kept electrodes: cathode plus the anodes of the retained columns
  std::vector<int> elec_map(1 + Cs);
  elec_map[0] = cathode_electrode();
  for (int c = 0; c < Cs; ++c) elec_map[1 + c] = 1 + col_map[c];

  out.phi.M = Ms;
  out.phi.N = Ns;
  out.phi.P = P;
  out.phi.phi.resize(static_cast<size_t>(1 + Cs) * Cs * P);
  out.phi.anode_plane.resize(static_cast<size_t>(1 + Cs) * Cs);
  out.phi.cathode_plane.resize(static_cast<size_t>(1 + Cs) * Cs);
  for (int e = 0; e < 1 + Cs; ++e) {
    const size_t sb = static_cast<size_t>(elec_map[e]);
    const auto phi_e = slice_voxels(
        {ds.phi.phi.begin() + sb * ds.grid.voxels(),
         ds.phi.phi.begin() + (sb + 1) * ds.grid.voxels()},
        1);
    std::copy(phi_e.begin(), phi_e.end(),
              out.phi.phi.begin() + static_cast<size_t>(e) * Cs * P);
    const auto ap = slice_columns({ds.phi.anode_plane.begin() + sb * ds.grid.columns(),
                                   ds.phi.anode_plane.begin() + (sb + 1) * ds.grid.columns()},
                                  1);
    const auto cp =
        slice_columns({ds.phi.cathode_plane.begin() + sb * ds.grid.columns(),
                       ds.phi.cathode_plane.begin() + (sb + 1) * ds.grid.columns()},
                      1);
    std::copy(ap.begin(), ap.end(), out.phi.anode_plane.begin() + static_cast<size_t>(e) * Cs);
    std::copy(cp.begin(), cp.end(),
              out.phi.cathode_plane.begin() + static_cast<size_t>(e) * Cs);
  }

  for (auto [src, dst] : {std::pair{&ds.stencil_e, &out.stencil_e},
                          std::pair{&ds.stencil_h, &out.stencil_h}}) {
    dst->species = src->species;
    dst->M = Ms;
    dst->N = Ns;
    dst->P = P;
    dst->offsets = src->offsets;
    // frac is voxel-major with n_offsets inner values: fold them into the OZ axis
    const int no = src->n_offsets();
    std::vector<double> tmp(static_cast<size_t>(Cs) * P * no);
    for (int c = 0; c < Cs; ++c)
      std::copy_n(src->frac.begin() + static_cast<size_t>(col_map[c]) * P * no,
                  static_cast<size_t>(P) * no, tmp.begin() + static_cast<size_t>(c) * P * no);
    dst->frac = std::move(tmp);
    dst->validate();
  }

  if (ds.ground_truth) {
    MaterialMap gt = MaterialMap::zeros(Ms, Ns, P, ds.e_centers, ds.h_centers);
    auto slice_one = [&](const std::vector<double>& src) { return slice_voxels(src, 1); };
    gt.e.drift = slice_one(ds.ground_truth->e.drift);
    gt.e.rec = slice_one(ds.ground_truth->e.rec);
    for (int r = 0; r < ds.e_centers; ++r) {
      gt.e.trap[r] = slice_one(ds.ground_truth->e.trap[r]);
      gt.e.detrap[r] = slice_one(ds.ground_truth->e.detrap[r]);
    }
    gt.h.drift = slice_one(ds.ground_truth->h.drift);
    gt.h.rec = slice_one(ds.ground_truth->h.rec);
    for (int r = 0; r < ds.h_centers; ++r) {
      gt.h.trap[r] = slice_one(ds.ground_truth->h.trap[r]);
      gt.h.detrap[r] = slice_one(ds.ground_truth->h.detrap[r]);
    }
    out.ground_truth = std::move(gt);
  }

  for (const auto& s : ds.samples) {
    TrainingSample ns;
    for (const auto& inj : s.injections) {
      const auto ri = std::find(rows.begin(), rows.end(), inj.i);
      const auto cj = std::find(cols.begin(), cols.end(), inj.j);
      if (ri == rows.end() || cj == cols.end())
        throw ValidationError("subset: sample injection outside retained region");
      Injection m = inj;
      m.i = static_cast<int>(ri - rows.begin());
      m.j = static_cast<int>(cj - cols.begin());
      ns.injections.push_back(m);
    }
    ns.q_e = slice_voxels(s.q_e, T);
    ns.q_h = slice_voxels(s.q_h, T);
    ns.qt_e = slice_voxels(s.qt_e, static_cast<size_t>(T) * ds.e_centers);
    ns.qt_h = slice_voxels(s.qt_h, static_cast<size_t>(T) * ds.h_centers);
    ns.signals.resize(static_cast<size_t>(T) * (1 + Cs));
    for (int t = 0; t < T; ++t)
      for (int e = 0; e < 1 + Cs; ++e)
        ns.signals[static_cast<size_t>(t) * (1 + Cs) + e] =
            s.signals[static_cast<size_t>(t) * ds.grid.electrodes() + elec_map[e]];
    out.samples.push_back(std::move(ns));
  }
  return out;
}

Dataset downsample_dataset(const Dataset& ds, int factor) {
  const int M = ds.grid.M, N = ds.grid.N, P = ds.grid.P, T = ds.grid.T;
  if (factor < 1 || M % factor != 0 || N % factor != 0)
    throw ValidationError("downsample_dataset: factor must divide M and N");
  const int Mc = M / factor, Nc = N / factor;
  const double inv_f2 = 1.0 / (factor * factor);

  Dataset out;
  out.grid = ds.grid;
  out.grid.M = Mc;
  out.grid.N = Nc;
  out.e_centers = ds.e_centers;
  out.h_centers = ds.h_centers;
  out.boundary = ds.boundary;
  out.mode = ds.mode;
  out.seed = ds.seed;
  out.phi = ds.phi.downsample(factor);

  for (auto [src, dst] : {std::pair{&ds.stencil_e, &out.stencil_e},
                          std::pair{&ds.stencil_h, &out.stencil_h}}) {
    dst->species = src->species;
    dst->M = Mc;
    dst->N = Nc;
    dst->P = P;
    dst->offsets = src->offsets;
    dst->frac = downsample_lateral(src->frac, 1, M, N,
                                   static_cast<size_t>(P) * src->n_offsets(), factor);
    dst->validate();
  }

  if (ds.ground_truth) {
    MaterialMap gt = MaterialMap::zeros(Mc, Nc, P, ds.e_centers, ds.h_centers);
    auto down = [&](const std::vector<double>& a) {
      return downsample_lateral(a, 1, M, N, P, factor);
    };
    gt.e.drift = down(ds.ground_truth->e.drift);
    gt.e.rec = down(ds.ground_truth->e.rec);
    for (int r = 0; r < ds.e_centers; ++r) {
      gt.e.trap[r] = down(ds.ground_truth->e.trap[r]);
      gt.e.detrap[r] = down(ds.ground_truth->e.detrap[r]);
    }
    gt.h.drift = down(ds.ground_truth->h.drift);
    gt.h.rec = down(ds.ground_truth->h.rec);
    for (int r = 0; r < ds.h_centers; ++r) {
      gt.h.trap[r] = down(ds.ground_truth->h.trap[r]);
      gt.h.detrap[r] = down(ds.ground_truth->h.detrap[r]);
    }
    out.ground_truth = std::move(gt);
  }

  const size_t Ec = out.grid.electrodes();
  for (const auto& s : ds.samples) {
    TrainingSample ns;
    // pool injections per coarse voxel; total charge scales like the
    // block-averaged charge arrays
    std::map<std::array<int, 3>, double> pooled;
    for (const auto& inj : s.injections)
      pooled[{inj.i / factor, inj.j / factor, inj.k}] += inj.magnitude * inv_f2;
    for (const auto& [key, mag] : pooled)
      ns.injections.push_back({key[0], key[1], key[2], mag});

    ns.q_e = downsample_lateral(s.q_e, T, M, N, P, factor);
    ns.q_h = downsample_lateral(s.q_h, T, M, N, P, factor);
    ns.qt_e =
        downsample_lateral(s.qt_e, static_cast<size_t>(T) * ds.e_centers, M, N, P, factor);
    ns.qt_h =
        downsample_lateral(s.qt_h, static_cast<size_t>(T) * ds.h_centers, M, N, P, factor);
    // merged anode groups read the block mean; the shared cathode scales by
    // the same 1/factor^2 so signals stay consistent with the charge arrays
    ns.signals.assign(static_cast<size_t>(T) * Ec, 0.0);
    for (int t = 0; t < T; ++t) {
      const size_t srow = static_cast<size_t>(t) * ds.grid.electrodes();
      const size_t drow = static_cast<size_t>(t) * Ec;
      ns.signals[drow] = s.signals[srow] * inv_f2;
      for (int I = 0; I < Mc; ++I)
        for (int J = 0; J < Nc; ++J) {
          double acc = 0.0;
          for (int di = 0; di < factor; ++di)
            for (int dj = 0; dj < factor; ++dj)
              acc += s.signals[srow + 1 + (I * factor + di) * N + (J * factor + dj)];
          ns.signals[drow + 1 + I * Nc + J] = acc * inv_f2;
        }
    }
    out.samples.push_back(std::move(ns));
  }
  return out;
}

void export_sample_csv(const Dataset& ds, size_t sample_index,
                       const std::filesystem::path& dir) {
  if (sample_index >= ds.samples.size())
    throw ValidationError("export_sample_csv: sample index out of range");
  std::filesystem::create_directories(dir);
  const auto& s = ds.samples[sample_index];
  const int T = ds.grid.T, M = ds.grid.M, N = ds.grid.N, P = ds.grid.P;
  const int V = ds.grid.voxels(), E = ds.grid.electrodes();
  const std::string stem = "sample" + std::to_string(sample_index);

  std::ostringstream vox;
  vox << "t,i,j,k,q_e,q_h";
  for (int r = 0; r < ds.e_centers; ++r) vox << ",qt_e" << r;
  for (int r = 0; r < ds.h_centers; ++r) vox << ",qt_h" << r;
  vox << "\n";
  vox.precision(17);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j)
        for (int k = 0; k < P; ++k) {
          const size_t v = static_cast<size_t>(ds.grid.index(i, j, k));
          vox << (t + 1) << ',' << i << ',' << j << ',' << k << ','
              << s.q_e[static_cast<size_t>(t) * V + v] << ','
              << s.q_h[static_cast<size_t>(t) * V + v];
          for (int r = 0; r < ds.e_centers; ++r)
            vox << ',' << s.qt_e[(static_cast<size_t>(t) * ds.e_centers + r) * V + v];
          for (int r = 0; r < ds.h_centers; ++r)
            vox << ',' << s.qt_h[(static_cast<size_t>(t) * ds.h_centers + r) * V + v];
          vox << "\n";
        }
  io::write_text(dir / (stem + "_voxels.csv"), vox.str());

  std::ostringstream sig;
  sig << "t,cathode";
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) sig << ",anode_" << i << '_' << j;
  sig << "\n";
  sig.precision(17);
  for (int t = 0; t < T; ++t) {
    sig << (t + 1);
    for (int e = 0; e < E; ++e) sig << ',' << s.signals[static_cast<size_t>(t) * E + e];
    sig << "\n";
  }
  io::write_text(dir / (stem + "_signals.csv"), sig.str());
}

}  // namespace rtsd
