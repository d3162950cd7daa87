#ifndef RTSD_TRAINER_HPP
#define RTSD_TRAINER_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rtsd/dataset.hpp"

namespace rtsd {

// The unknowns of the inverse problem: one raw parameter per physical
// coefficient (MaterialMap layout), plus raw per-voxel stencil fractions when
// the lateral drift is trained. The forward model always consumes the
// projected/feasible view.
struct TrainableWeights {
  MaterialMap mat;
  bool train_stencil = false;
  DriftStencil stencil_e, stencil_h;         // normalized, used by the forward model
  std::vector<double> raw_e, raw_h;          // raw fractions when train_stencil

  size_t n_params() const;
  std::vector<double> pack() const;          // mat params [+ raw stencil fractions]
  void unpack(const std::vector<double>& flat);

  // Clamp every transition probability to [0,1]; rescale (rec, trap...) groups
  // whose sum exceeds 1; clamp raw stencil fractions to >= 0 and renormalize
  // per voxel. Refreshes the normalized stencils.
  void project();

  // Fixed stencils (not trained): adopt from the dataset configuration.
  void set_fixed_stencils(const DriftStencil& se, const DriftStencil& sh);
  void enable_stencil_training();  // seeds raw fractions from current stencils
};

// Per-kind initial constants; distinct hole-center values break the
// permutation symmetry between trap centers.
struct InitConfig {
  // rec starts mid-range: a boundary crash early in training (while the other
  // coefficients are still far off) leaves ADAM stuck against the 0-clamp
  double e_drift = 0.75, h_drift = 0.3;
  double e_rec = 0.02, h_rec = 0.02;
  double e_trap = 0.01, e_detrap = 0.01;
  std::vector<double> h_trap = {0.03, 0.003};
  std::vector<double> h_detrap = {0.03, 0.003};
  double jitter = 0.0;  // relative uniform jitter, seeded
  uint64_t seed = 0;
  // when training stencils: initial mass seeded onto each off-axis offset
  // before renormalization (keeps off-axis gradients informative)
  double stencil_off_axis = 0.0;
  // solve the injected voxels' coefficients from the stored traces before
  // descending (see anchor_injection_voxels)
  bool anchor_injections = false;
};

TrainableWeights make_initial_weights(const GridSpec& grid, int e_centers, int h_centers,
                                      const DriftStencil& se, const DriftStencil& sh,
                                      bool train_stencil, const InitConfig& init = {});

// Closed-form warm start for the voxels between a column's injection depths.
// At an injected voxel the stored traces satisfy the recurrence with known
// inputs, so an exact regression recovers the drift/rec/trap/detrap
// combinations; the per-species drift split is closed against the first-step
// signals. Requires conservative mode, on-axis data stencils and at least two
// single-voxel injection depths per column; other columns are left at the
// constant init. No-op when the preconditions fail.
void anchor_injection_voxels(const Dataset& ds, TrainableWeights& w);

enum class VoltageTerm { disabled, signal_consistency };

struct LossConfig {
  double k = 1.0, l = 1000.0, n = 1000.0;
  VoltageTerm voltage = VoltageTerm::disabled;
};

struct LossBreakdown {
  double total = 0.0;
  double signal_term = 0.0;   // k-group, including the optional voltage term
  double electron_term = 0.0; // l-group
  double hole_term = 0.0;     // n-group
};

// Eq.-style squared-error loss of one model trace against one stored sample.
LossBreakdown sample_loss(const SimulationTrace& model, const TrainingSample& gt,
                          const GridSpec& grid, int e_centers, int h_centers,
                          const WeightingPotentialField& phi, const LossConfig& cfg);

// Gradient of the full-batch loss with respect to every trainable parameter,
// packed like TrainableWeights::pack(). Also reports the loss.
struct GradientResult {
  LossBreakdown loss;
  std::vector<double> grad;
};

GradientResult backward(const Dataset& ds, const TrainableWeights& w, const LossConfig& cfg);

// Full-batch loss at the given weights (forward only).
LossBreakdown total_loss(const Dataset& ds, const TrainableWeights& w, const LossConfig& cfg);

// Central finite differences, O(#params) forward passes.
std::vector<double> finite_diff_grad(const Dataset& ds, const TrainableWeights& w,
                                     const LossConfig& cfg, double eps);

struct AdamState {
  std::vector<double> m, v;
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double lr = 5e-4;
  static AdamState init(size_t n_params);
};

// Bias-corrected ADAM update followed by TrainableWeights::project().
void adam_step(AdamState& state, const std::vector<double>& grad, TrainableWeights& w);

enum class DropTrigger { fixed_epoch, oscillation };

struct ScheduleConfig {
  double initial_lr = 5e-4;
  double drop_lr = 1e-5;
  DropTrigger trigger = DropTrigger::fixed_epoch;
  int drop_epoch = 2500;
  int window = 100;     // oscillation mode
  double ratio = 2.0;   // drop when var(last W) > ratio * var(previous W)
};

// Learning rate for the given epoch. loss_history covers epochs [0, epoch).
double lr_schedule(int epoch, const std::vector<double>& loss_history,
                   const ScheduleConfig& cfg);

struct LossRow {
  int epoch = 0;
  double lr = 0.0, total = 0.0, signal_term = 0.0, electron_term = 0.0, hole_term = 0.0;
};

struct TrainConfig {
  LossConfig loss;
  ScheduleConfig schedule;
  InitConfig init;
  int max_epochs = 3000;
  bool train_stencil = false;
  // plateau stop, active once the learning rate has dropped
  int plateau_window = 200;
  double plateau_rel = 1e-8;
  int checkpoint_interval = 0;  // epochs between checkpoints; 0 = final only
  std::filesystem::path out_dir;  // empty: no checkpoints written
  // resume support: continue from a previous state instead of init
  std::optional<TrainableWeights> resume_weights;
  std::optional<AdamState> resume_adam;
  int start_epoch = 0;
};

struct ErrEntry {
  std::string kind;
  int z_lo = 0, z_hi = 0;
  std::vector<double> per_subpixel;  // M*N values; NaN where undefined
  double err = 0.0;
  bool valid = false;
  int excluded_points = 0;  // (subpixel, OZ) pairs skipped for zero ground truth
};

struct ErrReport {
  std::vector<ErrEntry> entries;
  double mean = 0.0;  // over valid entries
};

// RMS relative deviation per OZ profile, averaged across subpixels.
ErrReport err_report(const MaterialMap& learned, const MaterialMap& gt,
                     const std::vector<Injection>& injections);

// Evaluation OZ ranges derived from the injection positions: electron kinds
// [min_z, P-1] (recombination capped at min_z+15), hole kinds
// [max(min_z-8, 0), max_z].
struct KindRange {
  std::string kind;
  int z_lo, z_hi;
};
std::vector<KindRange> default_err_ranges(const std::vector<Injection>& injections, int P,
                                          int e_centers, int h_centers);

struct TrainResult {
  TrainableWeights weights;
  AdamState adam;
  std::vector<LossRow> curve;
  std::optional<ErrReport> err;
  int epochs_run = 0;
  bool plateau_stopped = false;
};

// Full-batch gradient descent. Throws DivergenceError if the loss becomes
// non-finite.
TrainResult train(const Dataset& ds, const TrainConfig& cfg);

void save_checkpoint(const std::filesystem::path& dir, const TrainableWeights& w,
                     const AdamState& adam, int epoch, const GridSpec& grid);
struct Checkpoint {
  TrainableWeights weights;
  AdamState adam;
  int epoch = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& manifest_file);

// test hook: corrupts the adjoint of the drift coefficients by the given
// factor (negative-control for gradient checking)
void set_adjoint_corruption(double factor);

}  // namespace rtsd

#endif
