#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>

#include "cosam/volume.hpp"

namespace cosam {

/// Configuration of the synthetic phantom generator. Targets are small,
/// irregular, low-contrast blobs; distractors are unlabeled tube-like
/// structures that share the targets' contrast and provide the confusable
/// background the false-positive suppression head is meant to handle.
struct PhantomConfig {
    std::array<int64_t, 3> extents{24, 64, 64};          // (L,H,W)
    std::pair<int, int> n_targets_range{1, 3};
    std::pair<int, int> target_voxels_range{150, 1200};
    int target_voxel_cap = 1600;
    double contrast_delta = 0.15;    // target intensity offset vs local background
    double noise_sigma = 0.05;
    double shape_irregularity = 0.3; // [0,1] radial perturbation amplitude
    uint64_t seed = 0;

    std::pair<int, int> n_distractors_range{2, 5};
    double distractor_contrast_scale = 1.0;
    std::pair<double, double> distractor_radius_range{1.2, 2.4};
    // Unlabeled target-like blobs spanning only 1-2 slices: indistinguishable
    // in-plane, separable through sequence context.
    std::pair<int, int> n_flicker_range{2, 4};

    void validate() const;
};

PhantomConfig phantom_config_from_json(const std::string& json_text);
std::string phantom_config_to_json(const PhantomConfig& cfg);

/// Deterministic for a fixed seed. Image values lie in [0,1]; the label holds
/// exactly the rasterized targets. Throws std::runtime_error when targets
/// cannot be placed without overlap after bounded retries.
std::pair<CtVolume, LabelVolume> generate_phantom(const PhantomConfig& cfg);

/// Returns the roi_slab used for volumes of the given extents: the central
/// slab where targets may appear.
std::array<int, 2> phantom_roi_slab(const std::array<int64_t, 3>& extents);

/// Writes n_volumes volume directories (volume-io format) plus manifest.json
/// and phantom_config.json into out_dir. Per-volume seeds are seed+index.
std::filesystem::path generate_dataset(const PhantomConfig& cfg, int n_volumes,
                                       const std::filesystem::path& out_dir,
                                       double train_fraction = 0.75);

}  // namespace cosam
