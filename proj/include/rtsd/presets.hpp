#ifndef RTSD_PRESETS_HPP
#define RTSD_PRESETS_HPP

#include <optional>
#include <string>
#include <vector>

#include "rtsd/dataset.hpp"
#include "rtsd/trainer.hpp"

namespace rtsd {

// A bundled end-to-end experiment: generation config, optional region
// subsetting / lateral downsampling, and the training configuration.
struct PresetBundle {
  std::string name;
  GroundTruthConfig gen;
  std::vector<int> subset_rows, subset_cols;  // non-empty: train on this region
  int downsample_factor = 1;                  // > 1: train on the coarse copy
  TrainConfig train;
};

std::vector<std::string> preset_names();

// name in {subset-subpixels, all-subpixels, uniform-field-robustness};
// paper_scale switches to the full published epoch schedule.
PresetBundle make_preset(const std::string& name, uint64_t seed, bool paper_scale);

// Runs generation plus the preset's subset/downsample stage. When fine_out is
// non-null it receives the pre-reduction dataset (when one exists).
Dataset preset_generate(const PresetBundle& preset, std::optional<Dataset>* fine_out = nullptr);

}  // namespace rtsd

#endif
